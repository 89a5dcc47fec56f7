//! Browser bindings: render a scene with its caption and concept phrases,
//! draw Gumbel-softmax samples, and trace the temperature and learning
//! rate schedules.

use wasm_bindgen::prelude::*;
use xbm_core::autodiff::cosine_lr;
use xbm_core::decoding::{anneal, gumbel_softmax, GumbelSchedule};
use xbm_core::interpret::extract_concept_phrases;
use xbm_core::nn::text::Vocabulary;
use xbm_core::rng::Rng;
use xbm_core::worldgen::{caption, render, sample_scene, SceneSpec};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// One generated scene, ready for a canvas.
#[wasm_bindgen]
pub struct SceneView {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    caption: String,
    label: String,
    phrases: Vec<String>,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGBA bytes for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn caption(&self) -> String {
        self.caption.clone()
    }

    /// Class name of the largest object.
    #[wasm_bindgen(getter)]
    pub fn label(&self) -> String {
        self.label.clone()
    }

    /// Concept phrases, one per line, tagged `object` or `position`.
    #[wasm_bindgen(getter)]
    pub fn phrases(&self) -> String {
        self.phrases.join("\n")
    }
}

/// Sample, render and caption one scene. `style` picks the caption's
/// word order.
#[wasm_bindgen]
pub fn generate_scene(seed: u64, style: u64) -> Result<SceneView, JsError> {
    let spec = SceneSpec::default();
    let vocab = Vocabulary::standard();
    let scene = sample_scene(seed, &spec);
    let r = render(&scene, &spec);
    let cap = caption(&scene, &spec, &vocab, style).map_err(js_err)?;
    let label = scene.label(&spec).map_err(js_err)?;
    let (shape, color) = spec.class_attrs(label).ok_or_else(|| js_err("label outside the class set"))?;
    let rgba = r
        .image
        .chunks(3)
        .flat_map(|px| {
            let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [c(px[0]), c(px[1]), c(px[2]), 255]
        })
        .collect();
    let phrases = extract_concept_phrases(cap.ids(), &vocab)
        .into_iter()
        .map(|p| format!("{:?}\t{}", p.kind, p.text).to_lowercase())
        .collect();
    Ok(SceneView {
        width: spec.width,
        height: spec.height,
        rgba,
        caption: vocab.decode(cap.content()),
        label: format!("{} {}", color.word(), shape.word()),
        phrases,
    })
}

/// Argmax frequencies of `draws` Gumbel-softmax samples from `logits`,
/// followed by the exact softmax probabilities for comparison.
#[wasm_bindgen]
pub fn gumbel_frequencies(logits: Vec<f64>, tau: f64, draws: u32, seed: u64) -> Result<Vec<f64>, JsError> {
    if logits.is_empty() {
        return Err(js_err("need at least one logit"));
    }
    let mut rng = Rng::new(seed);
    let mut counts = vec![0u32; logits.len()];
    for _ in 0..draws {
        let y = gumbel_softmax(&logits, tau, &mut rng).map_err(js_err)?;
        let k = y
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        counts[k] += 1;
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let mut out: Vec<f64> = counts.iter().map(|&c| c as f64 / draws.max(1) as f64).collect();
    out.extend(logits.iter().map(|l| (l - m).exp() / z));
    Ok(out)
}

/// `points` evenly spaced samples over `steps` training steps, as
/// interleaved `(step, tau, lr)` triples.
#[wasm_bindgen]
pub fn schedules(tau0: f64, rate: f64, tau_min: f64, lr: f64, steps: u32, points: u32) -> Result<Vec<f64>, JsError> {
    let s = GumbelSchedule { tau0, rate, tau_min };
    s.validate().map_err(js_err)?;
    let points = points.max(2);
    let mut out = Vec::with_capacity(points as usize * 3);
    for i in 0..points {
        let step = (steps as u64 * i as u64) / (points as u64 - 1);
        out.extend([step as f64, anneal(&s, step), cosine_lr(step as usize, steps as usize, lr)]);
    }
    Ok(out)
}
