//! Pre-layer-norm Transformer blocks and the per-LV heads, as parameter
//! handles plus graph-building forward functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{truncated_normal, ParamId, ParameterStore};
use crate::tensor::{Scalar, Tensor};

use super::STD_FLOOR;

/// softplus⁻¹(1): initial bias of the std heads so that fresh posteriors and
/// priors start at unit scale.
const UNIT_SOFTPLUS_BIAS: f64 = 0.541_324_854_612_918_1;

pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParameterStore<T>,
    rng: ChaCha8Rng,
    std: f64,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParameterStore<T>, seed: u64, std: f64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn weight(&mut self, path: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = truncated_normal(&mut self.rng, rows, cols, self.std);
        self.store.insert(path, t)
    }

    /// Untruncated N(0, std²); used for ID vectors and query vectors.
    pub fn normal(&mut self, path: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                T::from_f64(z * self.std)
            })
            .collect();
        self.store.insert(path, Tensor::from_vec(rows, cols, data))
    }

    pub fn filled(&mut self, path: &str, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        self.store.insert(path, Tensor::filled(rows, cols, T::from_f64(value)))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn named<T: Scalar>(
        init: &mut Init<T>,
        w_path: &str,
        b_path: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: init.weight(w_path, din, dout)?,
            b: init.filled(b_path, 1, dout, 0.0)?,
        })
    }

    pub fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, din: usize, dout: usize) -> Result<Self> {
        Self::named(init, &format!("{prefix}.w"), &format!("{prefix}.b"), din, dout)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    g: ParamId,
    b: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            g: init.filled(&format!("{prefix}.g"), 1, d, 1.0)?,
            b: init.filled(&format!("{prefix}.b"), 1, d, 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (gain, bias) = (g.param(self.g), g.param(self.b));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        let mut lin = |n: &str| Linear::named(init, &format!("{prefix}.w{n}"), &format!("{prefix}.b{n}"), d, d);
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
            heads,
        })
    }

    /// Returns the block output and the raw attention node (for its weights).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        xq: Var,
        xkv: Var,
        q_segs: &[usize],
        k_segs: &[usize],
        causal: bool,
    ) -> (Var, Var) {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let a = g.attention(q, k, v, self.heads, q_segs, k_segs, causal);
        (self.o.forward(g, a), a)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::named(init, &format!("{prefix}.w1"), &format!("{prefix}.b1"), d, 4 * d)?,
            l2: Linear::named(init, &format!("{prefix}.w2"), &format!("{prefix}.b2"), 4 * d, d)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.gelu(h);
        self.l2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{prefix}.ln1"), d)?,
            attn: MultiHeadAttention::new(init, &format!("{prefix}.attn"), d, heads)?,
            ln2: LayerNorm::new(init, &format!("{prefix}.ln2"), d)?,
            ff: FeedForward::new(init, &format!("{prefix}.ff"), d)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, segs: &[usize]) -> Var {
        let h = self.ln1.forward(g, x);
        let (a, _) = self.attn.forward(g, h, h, segs, segs, false);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// Bidirectional self-attention stack with a final layer norm.
#[derive(Clone, Debug)]
pub(crate) struct EncoderStack {
    layers: Vec<EncoderLayer>,
    ln_f: LayerNorm,
}

impl EncoderStack {
    pub fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, n: usize, d: usize, heads: usize) -> Result<Self> {
        let layers = (0..n)
            .map(|i| EncoderLayer::new(init, &format!("{prefix}.layer{i}"), d, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            ln_f: LayerNorm::new(init, &format!("{prefix}.ln_f"), d)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var, segs: &[usize]) -> Var {
        for layer in &self.layers {
            x = layer.forward(g, x, segs);
        }
        self.ln_f.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{prefix}.ln1"), d)?,
            self_attn: MultiHeadAttention::new(init, &format!("{prefix}.self_attn"), d, heads)?,
            ln2: LayerNorm::new(init, &format!("{prefix}.ln2"), d)?,
            cross_attn: MultiHeadAttention::new(init, &format!("{prefix}.cross_attn"), d, heads)?,
            ln3: LayerNorm::new(init, &format!("{prefix}.ln3"), d)?,
            ff: FeedForward::new(init, &format!("{prefix}.ff"), d)?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        segs: &[usize],
        memory: Var,
        mem_segs: &[usize],
        causal: bool,
    ) -> (Var, Var) {
        let h = self.ln1.forward(g, x);
        let (a, _) = self.self_attn.forward(g, h, h, segs, segs, causal);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let (c, weights) = self.cross_attn.forward(g, h, memory, segs, mem_segs, false);
        let x = g.add(x, c);
        let h = self.ln3.forward(g, x);
        let f = self.ff.forward(g, h);
        (g.add(x, f), weights)
    }
}

/// Self-attention (optionally causal) plus cross-attention over a memory.
#[derive(Clone, Debug)]
pub(crate) struct DecoderStack {
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
}

impl DecoderStack {
    pub fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, n: usize, d: usize, heads: usize) -> Result<Self> {
        let layers = (0..n)
            .map(|i| DecoderLayer::new(init, &format!("{prefix}.layer{i}"), d, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            ln_f: LayerNorm::new(init, &format!("{prefix}.ln_f"), d)?,
        })
    }

    /// Output and the cross-attention node of every layer.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        mut x: Var,
        segs: &[usize],
        memory: Var,
        mem_segs: &[usize],
        causal: bool,
    ) -> (Var, Vec<Var>) {
        let mut cross = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, w) = layer.forward(g, x, segs, memory, mem_segs, causal);
            x = y;
            cross.push(w);
        }
        (self.ln_f.forward(g, x), cross)
    }
}

/// Per-LV distinct heads: a linear map for the means and a two-layer
/// softplus MLP for the standard deviations.
#[derive(Clone, Debug)]
pub(crate) struct GaussianHead {
    slots: usize,
    mean_w: ParamId,
    mean_b: ParamId,
    std_w1: ParamId,
    std_b1: ParamId,
    std_w2: ParamId,
    std_b2: ParamId,
}

impl GaussianHead {
    pub fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, slots: usize, d: usize, z: usize) -> Result<Self> {
        Ok(Self {
            slots,
            mean_w: init.weight(&format!("{prefix}.mean.w"), slots * d, z)?,
            mean_b: init.filled(&format!("{prefix}.mean.b"), slots, z, 0.0)?,
            std_w1: init.weight(&format!("{prefix}.std.w1"), slots * d, d)?,
            std_b1: init.filled(&format!("{prefix}.std.b1"), slots, d, 0.0)?,
            std_w2: init.weight(&format!("{prefix}.std.w2"), slots * d, z)?,
            std_b2: init.filled(&format!("{prefix}.std.b2"), slots, z, UNIT_SOFTPLUS_BIAS)?,
        })
    }

    /// `h: [B·slots, d]` → (means, stds), each `[B·slots, z]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, h: Var) -> (Var, Var) {
        let (mw, mb) = (g.param(self.mean_w), g.param(self.mean_b));
        let mean = g.slot_linear(h, mw, mb, self.slots);
        let (w1, b1, w2, b2) = (
            g.param(self.std_w1),
            g.param(self.std_b1),
            g.param(self.std_w2),
            g.param(self.std_b2),
        );
        let s = g.slot_linear(h, w1, b1, self.slots);
        let s = g.softplus(s);
        let s = g.slot_linear(s, w2, b2, self.slots);
        let s = g.softplus(s);
        let std = g.add_scalar(s, T::from_f64(STD_FLOOR));
        (mean, std)
    }
}

/// Turns LV values into memory/source rows: each value is concatenated with
/// its trainable ID vector and projected to the model width.
#[derive(Clone, Debug)]
pub(crate) struct LatentProjection {
    slots: usize,
    ids: ParamId,
    proj: Linear,
}

impl LatentProjection {
    pub fn new<T: Scalar>(init: &mut Init<T>, prefix: &str, slots: usize, d: usize, z: usize) -> Result<Self> {
        Ok(Self {
            slots,
            ids: init.normal(&format!("{prefix}.id"), slots, d)?,
            proj: Linear::new(init, &format!("{prefix}.proj"), z + d, d)?,
        })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// `values: [B·slots, z]`, example-major → `[B·slots, d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, values: Var, batch: usize) -> Var {
        let ids = g.param(self.ids);
        let tiled = g.select_rows(ids, (0..batch).flat_map(|_| 0..self.slots).collect());
        let cat = g.concat_cols(&[values, tiled]);
        self.proj.forward(g, cat)
    }

    pub fn id_param(&self) -> ParamId {
        self.ids
    }
}

/// Learnable query vectors decoded against a memory, followed by per-LV
/// Gaussian heads. Used for the three posteriors and the two priors.
#[derive(Clone, Debug)]
pub(crate) struct QueryNetwork {
    pub slots: usize,
    queries: ParamId,
    stack: DecoderStack,
    head: GaussianHead,
    pub cond: Option<LatentProjection>,
}

pub(crate) struct QueryOutput {
    pub mean: Var,
    pub std: Var,
    pub cross_attention: Vec<Var>,
}

impl QueryNetwork {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        prefix: &str,
        slots: usize,
        cond_slots: usize,
        layers: usize,
        d: usize,
        heads: usize,
        z: usize,
    ) -> Result<Self> {
        let queries = init.normal(&format!("{prefix}.query"), slots, d)?;
        let cond = if cond_slots > 0 {
            Some(LatentProjection::new(init, &format!("{prefix}.cond"), cond_slots, d, z)?)
        } else {
            None
        };
        let stack = DecoderStack::new(init, prefix, layers, d, heads)?;
        let head = GaussianHead::new(init, &format!("{prefix}.head"), slots, d, z)?;
        Ok(Self {
            slots,
            queries,
            stack,
            head,
            cond,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, batch: usize, memory: Var, mem_segs: &[usize]) -> QueryOutput {
        let q = g.param(self.queries);
        let x = g.select_rows(q, (0..batch).flat_map(|_| 0..self.slots).collect());
        let segs = vec![self.slots; batch];
        let (h, cross_attention) = self.stack.forward(g, x, &segs, memory, mem_segs, false);
        let (mean, std) = self.head.forward(g, h);
        QueryOutput {
            mean,
            std,
            cross_attention,
        }
    }
}

/// Sinusoidal position encodings for positions restarting at every segment.
pub(crate) fn positional_encoding<T: Scalar>(segs: &[usize], d: usize) -> Tensor<T> {
    let rows: usize = segs.iter().sum();
    let mut out = Tensor::zeros(rows, d);
    let mut r = 0;
    for &len in segs {
        for pos in 0..len {
            let row = out.row_mut(r);
            for i in 0..d {
                let pair = (i / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
                row[i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
            r += 1;
        }
    }
    out
}
