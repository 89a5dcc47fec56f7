use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use xbm_core::decoding::explain;
use xbm_core::interpret::{
    analyze, cross_attention_heatmap, image_to_ppm, intervention_accuracy, phrase_scores, render_report, HeadAggregation,
    InterventionSpec,
};
use xbm_core::io::{file_checksum, write_file, KvConfig};
use xbm_core::metrics::{detect_degeneration, evaluate, report_tsv, train_judges, EvalReport, JudgeConfig, Judges};
use xbm_core::nn::checkpoint::Checkpoint;
use xbm_core::nn::text::{TokenSequence, Vocabulary};
use xbm_core::nn::{ClassifierMode, ExplanationDecoder, ModelBundle, ModelConfig, VisionEncoder};
use xbm_core::rng::Rng;
use xbm_core::training::{
    ablation_rows, explain_all, init_bundle, pretrain_captioner, train_xbm, EpochMetrics, PretrainConfig, RunManifest,
    TrainConfig,
};
use xbm_core::worldgen::{build_corpora, read_split, write_split, CorpusConfig, Example, SceneSpec, Split};
use xbm_core::{Result, XbmError};

use crate::layout::Layout;
use crate::{Cli, Command, OUT_ENV};

const SMOKE_STEPS: usize = 50;

pub fn run(cli: &Cli) -> Result<()> {
    let root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("xbm-out"));
    let layout = Layout::new(root);
    match &cli.command {
        Command::GenData { config } => gen_data(cli, &layout, config),
        Command::Pretrain { config } => pretrain(cli, &layout, config.as_deref()),
        Command::TrainJudges { config } => judges(cli, &layout, config.as_deref()),
        Command::TrainXbm { config, name } => train(cli, &layout, config.as_deref(), name),
        Command::Eval { name, force, beam_width } => eval(&layout, name, *force, *beam_width),
        Command::Explain {
            name,
            index,
            max_heads,
            beam_width,
        } => explain_cmd(&layout, name, *index, *max_heads, *beam_width),
        Command::Intervene {
            name,
            kind,
            text,
            beam_width,
        } => intervene(&layout, name, kind, text.as_deref(), *beam_width),
        Command::Ablate { config } => ablate(cli, &layout, config.as_deref()),
    }
}

fn load_kv(path: Option<&Path>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::load(p),
        None => KvConfig::parse(""),
    }
}

fn smoke_cap(cli: &Cli, cap: Option<usize>) -> Option<usize> {
    if cli.smoke {
        Some(cap.map_or(SMOKE_STEPS, |c| c.min(SMOKE_STEPS)))
    } else {
        cap
    }
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    write_file(&Layout::manifest(dir), manifest.to_text().as_bytes())
}

fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = Layout::manifest(dir);
    let text = fs::read_to_string(&path).map_err(|e| XbmError::Io { path, source: e })?;
    Ok(RunManifest::parse_entries(&text))
}

fn lookup<'a>(entries: &'a [(String, String)], key: &str) -> Option<&'a str> {
    entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn gen_data(cli: &Cli, layout: &Layout, config: &Path) -> Result<()> {
    let mut kv = KvConfig::load(config)?;
    let mut seed: u64 = kv.require("seed")?;
    if let Some(s) = cli.seed {
        seed = s;
    }
    let mut sizes = [0usize; 5];
    for (i, split) in Split::ALL.iter().enumerate() {
        sizes[i] = kv.require(&format!("{}_size", split.name()))?;
    }
    let spec = SceneSpec::from_kv(&mut kv)?;
    kv.finish()?;
    let vocab = Vocabulary::standard();
    let corpus = CorpusConfig::new(seed, sizes);
    let corpora = build_corpora(&spec, &corpus, &vocab)?;
    let mut echo = format!("seed = {seed}\n");
    for (i, split) in Split::ALL.iter().enumerate() {
        let _ = writeln!(echo, "{}_size = {}", split.name(), sizes[i]);
    }
    echo.push_str(&spec.echo());
    let mut manifest = RunManifest::new("gen-data", &echo);
    manifest.seed("corpus", seed);
    for split in Split::ALL {
        let path = layout.split(split);
        write_split(&path, split, &spec, corpora.split(split))?;
        manifest.record(&format!("count.{}", split.name()), corpora.split(split).len());
    }
    write_file(&layout.vocab(), vocab.to_lines().as_bytes())?;
    for (k, v) in data_checksums(layout)? {
        manifest.record(&k, v);
    }
    write_manifest(&layout.data_dir(), &manifest)
}

/// Current checksums of every dataset file.
fn data_checksums(layout: &Layout) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for split in Split::ALL {
        out.push((format!("checksum.{}", split.name()), file_checksum(&layout.split(split))?));
    }
    out.push(("checksum.vocab".to_string(), file_checksum(&layout.vocab())?));
    Ok(out)
}

struct Data {
    spec: SceneSpec,
    vocab: Vocabulary,
    splits: Vec<Vec<Example>>,
    checksums: Vec<(String, String)>,
}

impl Data {
    fn get(&self, split: Split) -> &[Example] {
        &self.splits[split as usize]
    }
}

/// Load the dataset, checking it against the checksums gen-data recorded.
fn load_data(layout: &Layout) -> Result<Data> {
    let recorded = read_manifest(&layout.data_dir())?;
    let checksums = data_checksums(layout)?;
    verify(&recorded, &checksums, false)?;
    let text = fs::read_to_string(layout.vocab()).map_err(|e| XbmError::Io {
        path: layout.vocab(),
        source: e,
    })?;
    let vocab = Vocabulary::from_lines(&text)?;
    let mut spec = None;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let (header, examples) = read_split(&layout.split(split), &vocab)?;
        spec = Some(header.spec);
        splits.push(examples);
    }
    Ok(Data {
        spec: spec.expect("five splits"),
        vocab,
        splits,
        checksums,
    })
}

/// Compare recorded `checksum.*` entries with current values.
fn verify(recorded: &[(String, String)], current: &[(String, String)], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for (k, v) in current {
        if let Some(r) = lookup(recorded, k) {
            if r != v {
                return Err(XbmError::Checksum {
                    what: k.trim_start_matches("checksum.").to_string(),
                    expected: r.to_string(),
                    found: v.clone(),
                });
            }
        }
    }
    Ok(())
}

fn model_config(kv: &mut KvConfig, data: &Data) -> Result<ModelConfig> {
    ModelConfig::from_kv(
        kv,
        data.spec.height,
        data.spec.width,
        data.spec.max_len,
        data.vocab.len(),
        data.spec.num_classes(),
    )
}

fn pretrain(cli: &Cli, layout: &Layout, config: Option<&Path>) -> Result<()> {
    let data = load_data(layout)?;
    let mut kv = load_kv(config)?;
    let model = model_config(&mut kv, &data)?;
    let mut pc = PretrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if let Some(s) = cli.seed {
        pc.seed = s;
    }
    pc.max_steps = smoke_cap(cli, pc.max_steps);
    let out = pretrain_captioner(data.get(Split::Pretrain), &model, &pc)?;
    let mut ckpt = Checkpoint::new(model.echo());
    ckpt.add_tree("encoder", &out.encoder.store);
    ckpt.add_tree("decoder", &out.decoder.store);
    let path = layout.captioner();
    ckpt.write(&path)?;
    let mut manifest = RunManifest::new("pretrain", &format!("{}{}", model.echo(), pc.echo()));
    manifest.seed("run", pc.seed);
    for (k, v) in &data.checksums {
        manifest.record(k, v);
    }
    manifest.record("checksum.captioner", file_checksum(&path)?);
    manifest.record("steps", out.steps);
    for (i, l) in out.epoch_losses.iter().enumerate() {
        manifest.record(&format!("loss.epoch{i}"), l);
    }
    write_manifest(path.parent().expect("nested"), &manifest)
}

fn load_captioner(layout: &Layout) -> Result<(ModelConfig, VisionEncoder, ExplanationDecoder, String)> {
    let path = layout.captioner();
    let ckpt = Checkpoint::read(&path)?;
    let model = ModelConfig::from_echo(&ckpt.config_echo)?;
    let mut rng = Rng::new(0);
    let mut enc = VisionEncoder::new(&model, &mut rng)?;
    let mut dec = ExplanationDecoder::new(&model, &mut rng)?;
    ckpt.load_into("encoder", &mut enc.store)?;
    ckpt.load_into("decoder", &mut dec.store)?;
    Ok((model, enc, dec, file_checksum(&path)?))
}

fn judges(cli: &Cli, layout: &Layout, config: Option<&Path>) -> Result<()> {
    let data = load_data(layout)?;
    let mut kv = load_kv(config)?;
    let model = model_config(&mut kv, &data)?;
    let mut jc = JudgeConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if let Some(s) = cli.seed {
        jc.seed = s;
    }
    jc.max_steps = smoke_cap(cli, jc.max_steps);
    let (j, history) = train_judges(data.get(Split::Pretrain), &model, &jc)?;
    let path = layout.judges();
    j.write(&model, &path)?;
    let mut manifest = RunManifest::new("train-judges", &format!("{}{}", model.echo(), jc.echo()));
    manifest.seed("run", jc.seed);
    for (k, v) in &data.checksums {
        manifest.record(k, v);
    }
    manifest.record("checksum.judges", j.checksum());
    for (i, (c, l)) in history.contrastive.iter().zip(&history.lm).enumerate() {
        manifest.record(&format!("loss.epoch{i}"), format!("{c}\t{l}"));
    }
    write_manifest(path.parent().expect("nested"), &manifest)
}

/// Judges plus their checksum, verified against the one recorded at
/// training time.
fn load_judges(layout: &Layout, force: bool) -> Result<Judges> {
    let j = Judges::read(&layout.judges())?;
    let recorded = read_manifest(layout.judges().parent().expect("nested"))?;
    verify(&recorded, &[("checksum.judges".to_string(), j.checksum())], force)?;
    Ok(j)
}

fn train_config(cli: &Cli, kv: &mut KvConfig) -> Result<TrainConfig> {
    let mut tc = TrainConfig::from_kv(kv)?;
    if let Some(s) = cli.seed {
        tc.seed = s;
    }
    tc.max_steps = smoke_cap(cli, tc.max_steps);
    Ok(tc)
}

fn train(cli: &Cli, layout: &Layout, config: Option<&Path>, name: &str) -> Result<()> {
    let data = load_data(layout)?;
    let mut kv = load_kv(config)?;
    let tc = train_config(cli, &mut kv)?;
    kv.finish()?;
    let (_, enc, dec, captioner_sum) = load_captioner(layout)?;
    let bundle = init_bundle(&enc, &dec, &tc)?;
    let mut metrics = Vec::new();
    let out = train_xbm(bundle, data.get(Split::Train), data.get(Split::Val), &tc, |m| metrics.push(m.line()))?;
    let dir = layout.run_dir(name);
    let ckpt_path = dir.join("model.xbmc");
    out.bundle.to_checkpoint().write(&ckpt_path)?;
    let mut tsv = format!("{}\n", EpochMetrics::HEADER);
    for m in &metrics {
        tsv.push_str(m);
        tsv.push('\n');
    }
    write_file(&dir.join("metrics.tsv"), tsv.as_bytes())?;
    let mut manifest = RunManifest::new("train-xbm", &tc.echo());
    manifest.seed("run", tc.seed);
    for (k, v) in &data.checksums {
        manifest.record(k, v);
    }
    manifest.record("checksum.captioner", captioner_sum);
    if let Ok(j) = Judges::read(&layout.judges()) {
        manifest.record("checksum.judges", j.checksum());
    }
    manifest.record("checksum.model", file_checksum(&ckpt_path)?);
    manifest.record("best_epoch", out.best_epoch);
    manifest.record("best_val_acc", out.best_val_acc);
    manifest.record("steps", out.steps);
    manifest.record("clip_events", out.clip_events);
    for m in metrics {
        manifest.metric_line(m);
    }
    write_manifest(&dir, &manifest)
}

fn load_run(layout: &Layout, name: &str) -> Result<(ModelBundle, Vec<(String, String)>)> {
    let dir = layout.run_dir(name);
    let recorded = read_manifest(&dir)?;
    let path = dir.join("model.xbmc");
    let bundle = ModelBundle::from_checkpoint(&Checkpoint::read(&path)?)?;
    Ok((bundle, recorded))
}

fn eval(layout: &Layout, name: &str, force: bool, beam_width: usize) -> Result<()> {
    let data = load_data(layout)?;
    let (bundle, recorded) = load_run(layout, name)?;
    verify(&recorded, &data.checksums, force)?;
    let judges = load_judges(layout, force)?;
    verify(&recorded, &[("checksum.judges".to_string(), judges.checksum())], force)?;
    let (report, _) = evaluate(&bundle, data.get(Split::Test), &judges, beam_width, name)?;
    let dir = layout.run_dir(name);
    write_file(&dir.join("report.tsv"), report_tsv(std::slice::from_ref(&report)).as_bytes())?;
    let mut manifest = RunManifest::new("eval", &format!("beam_width = {beam_width}\nforce = {force}\n"));
    for (k, v) in &data.checksums {
        manifest.record(k, v);
    }
    manifest.record("checksum.judges", &report.judge_checksum);
    for line in report.counts().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            manifest.record(k, v);
        }
    }
    write_file(&dir.join("eval-manifest.txt"), manifest.to_text().as_bytes())
}

fn explain_cmd(layout: &Layout, name: &str, index: usize, max_heads: bool, beam_width: usize) -> Result<()> {
    let data = load_data(layout)?;
    let (bundle, _) = load_run(layout, name)?;
    let test = data.get(Split::Test);
    let example = test
        .get(index)
        .ok_or_else(|| XbmError::Data(format!("index {index} out of range for {} test images", test.len())))?;
    let agg = if max_heads { HeadAggregation::Max } else { HeadAggregation::Mean };
    let explanation = explain(&bundle.encoder, &bundle.decoder, &example.image, beam_width)?;
    let analysis = analyze(&bundle, &example.image, &explanation, agg)?;
    let phrases = phrase_scores(&analysis, &data.vocab);
    let class = xbm_core::training::argmax(&analysis.logits);
    let class_name = match data.spec.class_attrs(class) {
        Some((shape, color)) => format!("{} {}", color.word(), shape.word()),
        None => class.to_string(),
    };
    let dir = layout.run_dir(name).join("explain").join(index.to_string());
    write_file(&dir.join("image.ppm"), &image_to_ppm(&example.image, data.spec.height, data.spec.width))?;
    let heatmap_file = if bundle.classifier.mode() == ClassifierMode::Multimodal {
        let h = cross_attention_heatmap(&analysis, None)?;
        write_file(&dir.join("heatmap.pgm"), &h.to_pgm())?;
        "heatmap.pgm"
    } else {
        "none (text-only classifier)"
    };
    let report = render_report(&analysis, &phrases, &data.vocab, &class_name, heatmap_file, "image.ppm");
    write_file(&dir.join("report.txt"), report.as_bytes())
}

fn intervene(layout: &Layout, name: &str, kind: &str, text: Option<&str>, beam_width: usize) -> Result<()> {
    let data = load_data(layout)?;
    let (bundle, _) = load_run(layout, name)?;
    let spec = match kind {
        "randomized" => InterventionSpec::Randomized { seed: 0 },
        "ground_truth" => InterventionSpec::GroundTruth,
        "custom" => {
            let text = text.ok_or_else(|| XbmError::config("text", "custom intervention needs --text"))?;
            let words: Vec<&str> = text.split_whitespace().collect();
            let ids = data
                .vocab
                .encode(&words)
                .map_err(|e| XbmError::config("text", e.to_string()))?;
            InterventionSpec::Custom(TokenSequence::from_content(&ids, bundle.config.max_len)?)
        }
        other => return Err(XbmError::config("kind", format!("unknown intervention `{other}`"))),
    };
    let examples = data.get(Split::Intervention);
    let generated = explain_all(&bundle.encoder, &bundle.decoder, examples, beam_width)?;
    let (normal, intervened) = intervention_accuracy(&bundle, examples, &generated, &spec, &data.vocab)?;
    let tsv = format!(
        "kind\tnormal_acc\tintervened_acc\texamples\n{}\t{normal:.6}\t{intervened:.6}\t{}\n",
        spec.name(),
        examples.len()
    );
    write_file(&layout.run_dir(name).join(format!("intervene-{}.tsv", spec.name())), tsv.as_bytes())
}

fn ablate(cli: &Cli, layout: &Layout, config: Option<&Path>) -> Result<()> {
    let data = load_data(layout)?;
    let mut kv = load_kv(config)?;
    let wanted: Option<Vec<String>> = kv.get_list("rows")?;
    let base = train_config(cli, &mut kv)?;
    kv.finish()?;
    let (_, enc, dec, captioner_sum) = load_captioner(layout)?;
    let judges = load_judges(layout, false)?;
    let mut rows = ablation_rows(&base);
    if let Some(w) = &wanted {
        if let Some(bad) = w.iter().find(|l| !rows.iter().any(|(r, _)| r == *l)) {
            return Err(XbmError::config("rows", format!("unknown ablation row `{bad}`")));
        }
        rows.retain(|(l, _)| w.contains(l));
    }
    let mut manifest = RunManifest::new("ablate", &base.echo());
    for (k, v) in &data.checksums {
        manifest.record(k, v);
    }
    manifest.record("checksum.captioner", captioner_sum);
    manifest.record("checksum.judges", judges.checksum());
    let mut reports: Vec<EvalReport> = Vec::new();
    for (label, cfg) in &rows {
        let result = init_bundle(&enc, &dec, cfg)
            .and_then(|b| train_xbm(b, data.get(Split::Train), data.get(Split::Val), cfg, |_| {}))
            .and_then(|o| evaluate(&o.bundle, data.get(Split::Test), &judges, cfg.beam_width, label));
        match result {
            Ok((r, _)) => reports.push(r),
            Err(e) => manifest.record(&format!("row.{label}.error"), e.to_string().replace('\n', " ")),
        }
    }
    let reference = reports.iter().find(|r| r.row_label == "lambda=0.1").map(|r| r.perplexity);
    let mut degeneration = String::from("row_label\tunique_token_ratio\tperplexity\tdegenerate\n");
    for r in &reports {
        let d = detect_degeneration(r.unique_token_ratio, r.perplexity, reference);
        let _ = writeln!(
            degeneration,
            "{}\t{:.6}\t{:.6}\t{}",
            r.row_label, d.unique_token_ratio, d.perplexity, d.fired
        );
    }
    let dir = layout.ablate_dir();
    write_file(&dir.join("report.tsv"), report_tsv(&reports).as_bytes())?;
    write_file(&dir.join("degeneration.tsv"), degeneration.as_bytes())?;
    write_manifest(&dir, &manifest)
}
