use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng),
            b: store.add_full(format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add_full(format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_full(format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
struct AttentionParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttentionParams {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }
}

/// Keys and values of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct KeyValues {
    pub k: Var,
    pub v: Var,
}

impl KeyValues {
    fn select(self, g: &mut Graph, rows: &[usize]) -> Result<Self> {
        Ok(KeyValues {
            k: g.select_rows(self.k, rows)?,
            v: g.select_rows(self.v, rows)?,
        })
    }
}

/// Output of a block, with the attention nodes kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub self_attention: Var,
    pub cross_attention: Option<Var>,
}

/// Pre-norm transformer block: self-attention, optional cross-attention
/// onto a memory sequence, then a GELU MLP, each with a residual.
#[derive(Clone, Debug)]
pub struct Block {
    heads: usize,
    causal: bool,
    ln_self: LayerNorm,
    self_attn: AttentionParams,
    cross: Option<(LayerNorm, AttentionParams)>,
    ln_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        mlp_hidden: usize,
        causal: bool,
        cross: bool,
        rng: &mut Rng,
    ) -> Self {
        let cross = cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                AttentionParams::new(store, &format!("{name}.cross"), d, rng),
            )
        });
        Block {
            heads,
            causal,
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: AttentionParams::new(store, &format!("{name}.self"), d, rng),
            cross,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, mlp_hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_hidden, d, rng),
        }
    }

    pub fn has_cross(&self) -> bool {
        self.cross.is_some()
    }

    /// Project a memory sequence `[B, m, d]` into this block's cross keys/values.
    pub fn cross_kv(&self, g: &mut Graph, store: &ParamStore, memory: Var) -> Result<Option<KeyValues>> {
        match &self.cross {
            None => Ok(None),
            Some((_, p)) => Ok(Some(KeyValues {
                k: p.k.forward(g, store, memory)?,
                v: p.v.forward(g, store, memory)?,
            })),
        }
    }

    /// Full-sequence pass over `x: [B, n, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Option<KeyValues>) -> Result<BlockOutput> {
        let h = self.ln_self.forward(g, store, x)?;
        let q = self.self_attn.q.forward(g, store, h)?;
        let k = self.self_attn.k.forward(g, store, h)?;
        let v = self.self_attn.v.forward(g, store, h)?;
        let att = g.attention(q, k, v, self.heads, self.causal)?;
        self.finish(g, store, x, att, memory)
    }

    /// One new position `x: [B, 1, d]` against the cached prefix; the cache
    /// is extended with this position's keys and values.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        cache: &mut Option<KeyValues>,
        memory: Option<KeyValues>,
    ) -> Result<BlockOutput> {
        let h = self.ln_self.forward(g, store, x)?;
        let q = self.self_attn.q.forward(g, store, h)?;
        let k_new = self.self_attn.k.forward(g, store, h)?;
        let v_new = self.self_attn.v.forward(g, store, h)?;
        let kv = match cache.take() {
            None => KeyValues { k: k_new, v: v_new },
            Some(prev) => KeyValues {
                k: g.concat(&[prev.k, k_new], 1)?,
                v: g.concat(&[prev.v, v_new], 1)?,
            },
        };
        *cache = Some(kv);
        let att = g.attention(q, kv.k, kv.v, self.heads, self.causal)?;
        self.finish(g, store, x, att, memory)
    }

    fn finish(&self, g: &mut Graph, store: &ParamStore, x: Var, att: Var, memory: Option<KeyValues>) -> Result<BlockOutput> {
        let proj = self.self_attn.o.forward(g, store, att)?;
        let mut x = g.add(x, proj)?;
        let mut cross_attention = None;
        if let (Some((ln, p)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(g, store, x)?;
            let q = p.q.forward(g, store, h)?;
            let catt = g.attention(q, mem.k, mem.v, self.heads, false)?;
            let proj = p.o.forward(g, store, catt)?;
            x = g.add(x, proj)?;
            cross_attention = Some(catt);
        }
        let h = self.ln_mlp.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        let out = g.add(x, h)?;
        Ok(BlockOutput {
            out,
            self_attention: att,
            cross_attention,
        })
    }
}

/// Stack of blocks plus a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    blocks: Vec<Block>,
    ln_final: LayerNorm,
}

/// Per-layer cross keys/values of a memory sequence.
#[derive(Clone, Debug)]
pub struct Memory {
    layers: Vec<Option<KeyValues>>,
}

impl Memory {
    pub fn select(&self, g: &mut Graph, rows: &[usize]) -> Result<Memory> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.map(|kv| kv.select(g, rows)).transpose())
            .collect::<Result<_>>()?;
        Ok(Memory { layers })
    }
}

/// Self-attention caches of an incremental pass.
#[derive(Clone, Debug, Default)]
pub struct StackCache {
    layers: Vec<Option<KeyValues>>,
}

impl StackCache {
    pub fn select(&mut self, g: &mut Graph, rows: &[usize]) -> Result<()> {
        for l in &mut self.layers {
            if let Some(kv) = l.take() {
                *l = Some(kv.select(g, rows)?);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    pub out: Var,
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        depth: usize,
        heads: usize,
        mlp_hidden: usize,
        causal: bool,
        cross: bool,
        rng: &mut Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), d, heads, mlp_hidden, causal, cross, rng))
            .collect();
        Stack {
            blocks,
            ln_final: LayerNorm::new(store, &format!("{name}.ln_final"), d),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn memory(&self, g: &mut Graph, store: &ParamStore, memory: Var) -> Result<Memory> {
        let layers = self
            .blocks
            .iter()
            .map(|b| b.cross_kv(g, store, memory))
            .collect::<Result<_>>()?;
        Ok(Memory { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, memory: Option<&Memory>) -> Result<StackOutput> {
        let mut self_attention = Vec::with_capacity(self.blocks.len());
        let mut cross_attention = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let mem = memory.and_then(|m| m.layers[i]);
            let o = b.forward(g, store, x, mem)?;
            x = o.out;
            self_attention.push(o.self_attention);
            cross_attention.extend(o.cross_attention);
        }
        let out = self.ln_final.forward(g, store, x)?;
        Ok(StackOutput {
            out,
            self_attention,
            cross_attention,
        })
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, mut x: Var, cache: &mut StackCache, memory: Option<&Memory>) -> Result<Var> {
        if cache.layers.len() != self.blocks.len() {
            cache.layers = vec![None; self.blocks.len()];
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let mem = memory.and_then(|m| m.layers[i]);
            x = b.step(g, store, x, &mut cache.layers[i], mem)?.out;
        }
        self.ln_final.forward(g, store, x)
    }
}
