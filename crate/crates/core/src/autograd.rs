//! Eager reverse-mode automatic differentiation over packed batches.
//!
//! Every op computes its value as soon as it is recorded, so callers may
//! inspect intermediate values while building the graph (the objective uses
//! this to pick its branch). Variable-length examples are packed row-wise;
//! ops that mix rows (attention, per-example reductions) take explicit
//! segment lengths instead of padding.

use std::collections::HashMap;

use crate::params::{GradStore, ParamId, ParameterStore};
use crate::tensor::{gemm, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_segs: Vec<usize>,
    k_segs: Vec<usize>,
    causal: bool,
    /// Per segment, per head, a `lq × lk` row-stochastic block.
    probs: Vec<T>,
    prob_offsets: Vec<usize>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        stats: Vec<(T, T)>,
    },
    Attention(Box<AttentionCache<T>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    SlotLinear {
        x: Var,
        w: Var,
        b: Var,
        slots: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        segs: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiag {
        mq: Var,
        sq: Var,
        prior: Option<(Var, Var)>,
    },
    SegmentSum {
        x: Var,
        segs: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<'p, T: Scalar> {
    store: &'p ParameterStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::ONE + t);
    let dy = half * (T::ONE + t)
        + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x);
    (y, dy)
}

fn softplus<T: Scalar>(x: T) -> (T, T) {
    let ax = if x < T::ZERO { -x } else { x };
    let y = x.max(T::ZERO) + (T::ONE + (-ax).exp()).ln();
    let sig = if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    };
    (y, sig)
}

fn prefix_offsets(segs: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    segs.iter()
        .map(|&l| {
            let o = acc;
            acc += l;
            o
        })
        .collect()
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph that records gradients with respect to parameters.
    pub fn new(store: &'p ParameterStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A forward-only graph; `backward` is unavailable.
    pub fn inference(store: &'p ParameterStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParameterStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter as a graph leaf. Repeated requests share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: self.store.get(id).clone(),
            op: Op::Param(id),
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `x · w (+ b)` with `w: [din, dout]` and `b: [1, dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols(), wv.rows(), "linear: inner dimension mismatch");
        let (r, din, dout) = (xv.rows(), wv.rows(), wv.cols());
        let mut out = Tensor::zeros(r, dout);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), [1, dout], "linear: bias shape");
            for i in 0..r {
                out.row_mut(i).copy_from_slice(bv.data());
            }
        }
        gemm(false, false, r, din, dout, xv.data(), wv.data(), out.data_mut(), b.is_some());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x + c).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x).0).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| softplus(x).0).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Row-wise layer normalization with gain and bias of shape `[1, d]`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        let d = xv.cols();
        assert_eq!(gv.shape(), [1, d], "layer_norm: gain shape");
        assert_eq!(bv.shape(), [1, d], "layer_norm: bias shape");
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(LN_EPS);
        let mut out = Tensor::zeros(xv.rows(), d);
        let mut stats = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_d;
            let rstd = T::ONE / (var + eps).sqrt();
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = (row[c] - mean) * rstd * gv.data()[c] + bv.data()[c];
            }
            stats.push((mean, rstd));
        }
        self.push(out, Op::LayerNorm { x, g, b, stats }, &[x, g, b])
    }

    /// Multi-head scaled dot-product attention between packed segments.
    ///
    /// Segment `s` of the queries attends only to segment `s` of the keys.
    /// With `causal`, query `i` of a segment sees keys `0..=i` only.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: &[usize],
        k_segs: &[usize],
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.shape(), kv.shape());
        assert_eq!(q_segs.len(), k_segs.len(), "attention: segment count mismatch");
        assert_eq!(q_segs.iter().sum::<usize>(), qv.rows(), "attention: query segments");
        assert_eq!(k_segs.iter().sum::<usize>(), kv.rows(), "attention: key segments");
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qo = prefix_offsets(q_segs);
        let ko = prefix_offsets(k_segs);
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = Vec::new();
        let mut prob_offsets = Vec::with_capacity(q_segs.len());
        let mut scores = Vec::new();
        for s in 0..q_segs.len() {
            let (lq, lk) = (q_segs[s], k_segs[s]);
            if causal {
                assert_eq!(lq, lk, "causal attention needs square segments");
            }
            prob_offsets.push(probs.len());
            if lk == 0 {
                continue;
            }
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..lq {
                    let qrow = &qv.row(qo[s] + i)[c0..c0 + dh];
                    let visible = if causal { i + 1 } else { lk };
                    scores.clear();
                    for j in 0..visible {
                        let krow = &kv.row(ko[s] + j)[c0..c0 + dh];
                        let mut dot = T::ZERO;
                        for c in 0..dh {
                            dot += qrow[c] * krow[c];
                        }
                        scores.push(dot * scale);
                    }
                    softmax_in_place(&mut scores);
                    scores.resize(lk, T::ZERO);
                    let orow = &mut out.row_mut(qo[s] + i)[c0..c0 + dh];
                    for (j, &p) in scores.iter().enumerate().take(visible) {
                        let vrow = &vv.row(ko[s] + j)[c0..c0 + dh];
                        for c in 0..dh {
                            orow[c] += p * vrow[c];
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            q_segs: q_segs.to_vec(),
            k_segs: k_segs.to_vec(),
            causal,
            probs,
            prob_offsets,
        };
        self.push(out, Op::Attention(Box::new(cache)), &[q, k, v])
    }

    /// Attention weights of one segment and head: `(lq, lk, row-major probs)`.
    pub fn attention_probs(&self, node: Var, segment: usize, head: usize) -> (usize, usize, &[T]) {
        match &self.nodes[node.0].op {
            Op::Attention(c) => {
                let (lq, lk) = (c.q_segs[segment], c.k_segs[segment]);
                let start = c.prob_offsets[segment] + head * lq * lk;
                (lq, lk, &c.probs[start..start + lq * lk])
            }
            _ => panic!("attention_probs on a non-attention node"),
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows: column mismatch");
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + pv.cols()].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Gather rows by index (rows may repeat).
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::SelectRows { x, idx }, &[x])
    }

    /// Row `r` is transformed by its own slot: `x[r] · W[r % slots] + b[r % slots]`.
    ///
    /// `w` stacks the per-slot `[din, dout]` matrices into `[slots·din, dout]`;
    /// `b` is `[slots, dout]`.
    pub fn slot_linear(&mut self, x: Var, w: Var, b: Var, slots: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let din = xv.cols();
        let dout = wv.cols();
        assert_eq!(wv.rows(), slots * din, "slot_linear: weight shape");
        assert_eq!(bv.shape(), [slots, dout], "slot_linear: bias shape");
        assert_eq!(xv.rows() % slots, 0, "slot_linear: rows not a multiple of slots");
        let mut out = Tensor::zeros(xv.rows(), dout);
        for r in 0..xv.rows() {
            let s = r % slots;
            let o = out.row_mut(r);
            o.copy_from_slice(bv.row(s));
            let xr = xv.row(r);
            for (i, &xi) in xr.iter().enumerate() {
                let wr = wv.row(s * din + i);
                for c in 0..dout {
                    o[c] += xi * wr[c];
                }
            }
        }
        self.push(out, Op::SlotLinear { x, w, b, slots }, &[x, w, b])
    }

    /// Per-segment summed negative log-likelihood of `targets` under
    /// softmax(`logits`). Output `[segments, 1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], segs: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy: target count");
        assert_eq!(segs.iter().sum::<usize>(), targets.len(), "cross_entropy: segments");
        let vocab = lv.cols();
        let mut probs = Vec::with_capacity(lv.len());
        let mut out = Tensor::zeros(segs.len(), 1);
        let mut r = 0;
        for (s, &len) in segs.iter().enumerate() {
            let mut total = T::ZERO;
            for _ in 0..len {
                let row = lv.row(r);
                let t = targets[r];
                assert!(t < vocab, "cross_entropy: target out of vocabulary");
                let max = row.iter().copied().fold(row[0], T::max);
                let mut sum = T::ZERO;
                for &v in row {
                    sum += (v - max).exp();
                }
                let lse = max + sum.ln();
                total += lse - row[t];
                probs.extend(row.iter().map(|&v| (v - lse).exp()));
                r += 1;
            }
            out.set(s, 0, total);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            segs: segs.to_vec(),
            probs,
        };
        self.push(out, op, &[logits])
    }

    /// Row-wise KL divergence between diagonal Gaussians `q` and `p`, summed
    /// over columns. `prior = None` means the standard normal. Output `[rows, 1]`.
    pub fn kl_diag(&mut self, mq: Var, sq: Var, prior: Option<(Var, Var)>) -> Var {
        let (mqv, sqv) = (self.value(mq), self.value(sq));
        assert_eq!(mqv.shape(), sqv.shape());
        if let Some((mp, sp)) = prior {
            assert_eq!(self.value(mp).shape(), mqv.shape());
            assert_eq!(self.value(sp).shape(), mqv.shape());
        }
        let half = T::from_f64(0.5);
        let mut out = Tensor::zeros(mqv.rows(), 1);
        for r in 0..mqv.rows() {
            let mut total = T::ZERO;
            for c in 0..mqv.cols() {
                let (m_q, s_q) = (mqv.get(r, c), sqv.get(r, c));
                let (m_p, s_p) = match prior {
                    Some((mp, sp)) => (self.value(mp).get(r, c), self.value(sp).get(r, c)),
                    None => (T::ZERO, T::ONE),
                };
                let diff = m_q - m_p;
                total += (s_p / s_q).ln() + (s_q * s_q + diff * diff) / (T::from_f64(2.0) * s_p * s_p)
                    - half;
            }
            out.set(r, 0, total);
        }
        let mut inputs = vec![mq, sq];
        if let Some((mp, sp)) = prior {
            inputs.extend([mp, sp]);
        }
        self.push(out, Op::KlDiag { mq, sq, prior }, &inputs)
    }

    /// Sum consecutive row groups: `[Σ segs, c] -> [segs.len(), c]`.
    pub fn segment_sum(&mut self, x: Var, segs: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(segs.iter().sum::<usize>(), xv.rows(), "segment_sum: segments");
        let mut out = Tensor::zeros(segs.len(), xv.cols());
        let mut r = 0;
        for (s, &len) in segs.iter().enumerate() {
            for _ in 0..len {
                let src = xv.row(r);
                let dst = out.row_mut(s);
                for c in 0..src.len() {
                    dst[c] += src[c];
                }
                r += 1;
            }
        }
        self.push(
            out,
            Op::SegmentSum {
                x,
                segs: segs.to_vec(),
            },
            &[x],
        )
    }

    /// `Σ_i weights[i] · x[i]` over all elements, as a `1×1` tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(weights.len(), xv.len(), "weighted_sum: weight count");
        let mut total = T::ZERO;
        for (&a, &w) in xv.data().iter().zip(&weights) {
            if w != T::ZERO {
                total += a * w;
            }
        }
        self.push(Tensor::scalar(total), Op::WeightedSum { x, weights }, &[x])
    }

    /// Back-propagate from the scalar `loss`, adding parameter gradients to `grads`.
    pub fn backward(&self, loss: Var, grads: &mut GradStore<T>) {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.value(loss).shape(), [1, 1], "backward needs a scalar loss");
        let mut g: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        g[loss.0] = Some(Tensor::scalar(T::ONE));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = g[i].take() else { continue };
            self.backward_node(node, &gy, &mut g, grads);
        }
    }

    fn slot<'a>(&self, g: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.needs(v) {
            return None;
        }
        let shape = self.value(v).shape();
        Some(g[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1])))
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        gy: &Tensor<T>,
        g: &mut [Option<Tensor<T>>],
        grads: &mut GradStore<T>,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let acc = grads.get_mut(*id);
                for (a, &d) in acc.data_mut().iter_mut().zip(gy.data()) {
                    *a += d;
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, din, dout) = (xv.rows(), wv.rows(), wv.cols());
                if let Some(dx) = self.slot(g, *x) {
                    gemm(false, true, r, dout, din, gy.data(), wv.data(), dx.data_mut(), true);
                }
                if let Some(dw) = self.slot(g, *w) {
                    gemm(true, false, din, r, dout, xv.data(), gy.data(), dw.data_mut(), true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(g, *b) {
                        let dbd = db.data_mut();
                        for i in 0..r {
                            for (acc, &d) in dbd.iter_mut().zip(gy.row(i)) {
                                *acc += d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(g, v) {
                        for (acc, &x) in d.data_mut().iter_mut().zip(gy.data()) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(d) = self.slot(g, *a) {
                    for ((acc, &x), &o) in d.data_mut().iter_mut().zip(gy.data()).zip(bv.data()) {
                        *acc += x * o;
                    }
                }
                if let Some(d) = self.slot(g, *b) {
                    for ((acc, &x), &o) in d.data_mut().iter_mut().zip(gy.data()).zip(av.data()) {
                        *acc += x * o;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(d) = self.slot(g, *a) {
                    for (acc, &x) in d.data_mut().iter_mut().zip(gy.data()) {
                        *acc += x * *f;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(d) = self.slot(g, *a) {
                    for (acc, &x) in d.data_mut().iter_mut().zip(gy.data()) {
                        *acc += x;
                    }
                }
            }
            Op::Gelu(a) | Op::Softplus(a) => {
                let is_gelu = matches!(node.op, Op::Gelu(_));
                let av = self.value(*a).clone();
                if let Some(d) = self.slot(g, *a) {
                    for ((acc, &x), &inp) in d.data_mut().iter_mut().zip(gy.data()).zip(av.data()) {
                        let deriv = if is_gelu { gelu(inp).1 } else { softplus(inp).1 };
                        *acc += x * deriv;
                    }
                }
            }
            Op::LayerNorm { x, g: gain, b, stats } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).clone();
                let d = xv.cols();
                let inv_d = T::from_f64(1.0 / d as f64);
                let rows = xv.rows();
                let mut xhat = Tensor::zeros(rows, d);
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    for c in 0..d {
                        xhat.set(r, c, (xv.get(r, c) - mean) * rstd);
                    }
                }
                if let Some(dg) = self.slot(g, *gain) {
                    let dgd = dg.data_mut();
                    for r in 0..rows {
                        for c in 0..d {
                            dgd[c] += gy.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if let Some(db) = self.slot(g, *b) {
                    let dbd = db.data_mut();
                    for r in 0..rows {
                        for c in 0..d {
                            dbd[c] += gy.get(r, c);
                        }
                    }
                }
                if let Some(dx) = self.slot(g, *x) {
                    let mut dxhat = vec![T::ZERO; d];
                    for r in 0..rows {
                        let (_, rstd) = stats[r];
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for c in 0..d {
                            dxhat[c] = gy.get(r, c) * gv.data()[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * xhat.get(r, c);
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let row = dx.row_mut(r);
                        for c in 0..d {
                            row[c] += rstd * (dxhat[c] - m1 - xhat.get(r, c) * m2);
                        }
                    }
                }
            }
            Op::Attention(c) => self.backward_attention(c, gy, g),
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = self.slot(g, p) {
                        for (acc, &x) in d.data_mut().iter_mut().zip(&gy.data()[r0..r0 + n]) {
                            *acc += x;
                        }
                    }
                    r0 += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if let Some(d) = self.slot(g, p) {
                        for r in 0..gy.rows() {
                            let src = &gy.row(r)[c0..c0 + pc];
                            for (acc, &x) in d.row_mut(r).iter_mut().zip(src) {
                                *acc += x;
                            }
                        }
                    }
                    c0 += pc;
                }
            }
            Op::SelectRows { x, idx } => {
                if let Some(d) = self.slot(g, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = gy.row(r);
                        for (acc, &v) in d.row_mut(i).iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::SlotLinear { x, w, b, slots } => {
                let (xv, wv) = (self.value(*x).clone(), self.value(*w).clone());
                let din = xv.cols();
                let dout = wv.cols();
                if let Some(dx) = self.slot(g, *x) {
                    for r in 0..xv.rows() {
                        let s = r % slots;
                        let gr = gy.row(r);
                        let dr = dx.row_mut(r);
                        for (i, acc) in dr.iter_mut().enumerate() {
                            let wr = wv.row(s * din + i);
                            let mut sum = T::ZERO;
                            for c in 0..dout {
                                sum += gr[c] * wr[c];
                            }
                            *acc += sum;
                        }
                    }
                }
                if let Some(dw) = self.slot(g, *w) {
                    for r in 0..xv.rows() {
                        let s = r % slots;
                        let gr = gy.row(r);
                        for (i, &xi) in xv.row(r).iter().enumerate() {
                            let wr = dw.row_mut(s * din + i);
                            for c in 0..dout {
                                wr[c] += xi * gr[c];
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(g, *b) {
                    for r in 0..xv.rows() {
                        let s = r % slots;
                        for (acc, &v) in db.row_mut(s).iter_mut().zip(gy.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                segs,
                probs,
            } => {
                if let Some(d) = self.slot(g, *logits) {
                    let vocab = d.cols();
                    let mut r = 0;
                    for (s, &len) in segs.iter().enumerate() {
                        let gs = gy.get(s, 0);
                        for _ in 0..len {
                            let p = &probs[r * vocab..(r + 1) * vocab];
                            let row = d.row_mut(r);
                            for c in 0..vocab {
                                row[c] += gs * p[c];
                            }
                            row[targets[r]] -= gs;
                            r += 1;
                        }
                    }
                }
            }
            Op::KlDiag { mq, sq, prior } => {
                let mqv = self.value(*mq).clone();
                let sqv = self.value(*sq).clone();
                let (mpv, spv) = match prior {
                    Some((mp, sp)) => (self.value(*mp).clone(), self.value(*sp).clone()),
                    None => (
                        Tensor::zeros(mqv.rows(), mqv.cols()),
                        Tensor::filled(mqv.rows(), mqv.cols(), T::ONE),
                    ),
                };
                let n = mqv.len();
                let mut d_mq = vec![T::ZERO; n];
                let mut d_sq = vec![T::ZERO; n];
                let mut d_mp = vec![T::ZERO; n];
                let mut d_sp = vec![T::ZERO; n];
                let cols = mqv.cols();
                for i in 0..n {
                    let gr = gy.get(i / cols, 0);
                    let (m_q, s_q, m_p, s_p) = (mqv.data()[i], sqv.data()[i], mpv.data()[i], spv.data()[i]);
                    let diff = m_q - m_p;
                    let vp = s_p * s_p;
                    d_mq[i] = gr * diff / vp;
                    d_mp[i] = -(gr * diff / vp);
                    d_sq[i] = gr * (s_q / vp - T::ONE / s_q);
                    d_sp[i] = gr * (T::ONE / s_p - (s_q * s_q + diff * diff) / (vp * s_p));
                }
                let mut targets = vec![(*mq, d_mq), (*sq, d_sq)];
                if let Some((mp, sp)) = prior {
                    targets.push((*mp, d_mp));
                    targets.push((*sp, d_sp));
                }
                for (v, dv) in targets {
                    if let Some(d) = self.slot(g, v) {
                        for (acc, x) in d.data_mut().iter_mut().zip(dv) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::SegmentSum { x, segs } => {
                if let Some(d) = self.slot(g, *x) {
                    let mut r = 0;
                    for (s, &len) in segs.iter().enumerate() {
                        for _ in 0..len {
                            for (acc, &v) in d.row_mut(r).iter_mut().zip(gy.row(s)) {
                                *acc += v;
                            }
                            r += 1;
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let gs = gy.item();
                if let Some(d) = self.slot(g, *x) {
                    for (acc, &w) in d.data_mut().iter_mut().zip(weights) {
                        *acc += gs * w;
                    }
                }
            }
        }
    }

    fn backward_attention(&self, c: &AttentionCache<T>, gy: &Tensor<T>, g: &mut [Option<Tensor<T>>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.cols();
        let dh = d / c.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qo = prefix_offsets(&c.q_segs);
        let ko = prefix_offsets(&c.k_segs);
        let mut dq = Tensor::zeros(qv.rows(), d);
        let mut dk = Tensor::zeros(kv.rows(), d);
        let mut dv = Tensor::zeros(vv.rows(), d);
        let mut dp = Vec::new();
        for s in 0..c.q_segs.len() {
            let (lq, lk) = (c.q_segs[s], c.k_segs[s]);
            if lk == 0 {
                continue;
            }
            for h in 0..c.heads {
                let c0 = h * dh;
                let block = c.prob_offsets[s] + h * lq * lk;
                for i in 0..lq {
                    let p = &c.probs[block + i * lk..block + (i + 1) * lk];
                    let visible = if c.causal { i + 1 } else { lk };
                    let grow = &gy.row(qo[s] + i)[c0..c0 + dh];
                    dp.clear();
                    let mut dot = T::ZERO;
                    for j in 0..visible {
                        let vrow = &vv.row(ko[s] + j)[c0..c0 + dh];
                        let mut acc = T::ZERO;
                        for cc in 0..dh {
                            acc += grow[cc] * vrow[cc];
                        }
                        dp.push(acc);
                        dot += acc * p[j];
                        let dvrow = &mut dv.row_mut(ko[s] + j)[c0..c0 + dh];
                        for cc in 0..dh {
                            dvrow[cc] += p[j] * grow[cc];
                        }
                    }
                    let qrow = &qv.row(qo[s] + i)[c0..c0 + dh];
                    for j in 0..visible {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == T::ZERO {
                            continue;
                        }
                        let krow = &kv.row(ko[s] + j)[c0..c0 + dh];
                        let dqrow = &mut dq.row_mut(qo[s] + i)[c0..c0 + dh];
                        for cc in 0..dh {
                            dqrow[cc] += ds * krow[cc];
                        }
                        let dkrow = &mut dk.row_mut(ko[s] + j)[c0..c0 + dh];
                        for cc in 0..dh {
                            dkrow[cc] += ds * qrow[cc];
                        }
                    }
                }
            }
        }
        for (v, dt) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if let Some(acc) = self.slot(g, v) {
                for (a, x) in acc.data_mut().iter_mut().zip(dt.into_data()) {
                    *a += x;
                }
            }
        }
    }
}
