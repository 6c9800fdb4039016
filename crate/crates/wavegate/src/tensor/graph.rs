//! Reverse-mode autodiff over a flat tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops append
//! nodes; node indices are naturally topologically ordered, so backward is a
//! single reverse sweep. Graphs are rebuilt per training step; parameters
//! live outside and are inserted as leaves.
//!
//! Besides the usual elementwise/matmul/softmax ops, the tape has a few
//! fused domain ops with hand-derived adjoints: the Morlet positional
//! encoding, the sigmoid energy gate with its z-normalization, the gated
//! attention renormalization, rotary application, and the lag-mixture
//! attention score (`conv_scores`).

use thiserror::Error;

use super::kernels::{mm_nn, mm_nt, mm_nt_seq, mm_tn, mm_tn_seq};
use super::{real, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("backward root must be a scalar, got {numel} elements")]
    NonScalarRoot { numel: usize },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
}

/// Gauge counting score-sized (T×T) buffers live inside the lag-attention
/// scoring kernel. Lets tests pin the memory contract: one accumulator plus
/// one reusable intermediate, independent of the lag radius. Thread-local so
/// concurrent runs do not pollute each other's readings.
pub mod score_buffers {
    use std::cell::Cell;

    thread_local! {
        static CURRENT: Cell<usize> = const { Cell::new(0) };
        static PEAK: Cell<usize> = const { Cell::new(0) };
    }

    pub fn reset() {
        CURRENT.with(|c| c.set(0));
        PEAK.with(|p| p.set(0));
    }

    /// Peak simultaneous score-sized buffers since the last reset.
    pub fn peak() -> usize {
        PEAK.with(|p| p.get())
    }

    pub(super) fn acquire() {
        let cur = CURRENT.with(|c| {
            c.set(c.get() + 1);
            c.get()
        });
        PEAK.with(|p| p.set(p.get().max(cur)));
    }

    pub(super) fn release() {
        CURRENT.with(|c| c.set(c.get() - 1));
    }
}

const LN_EPS: f64 = 1e-5;
const ZNORM_EPS: f64 = 1e-6;
const GATE_EPS: f64 = 1e-6;
/// Lag weights below this magnitude are skipped entirely.
const LAG_PRUNE: f64 = 1e-4;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    /// `b.shape` is a suffix of `a.shape`; `b` is tiled over the leading dims.
    AddBroadcast { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    MatmulNN { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    MatmulNT { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    Reshape { a: usize },
    SplitHeads { a: usize, b: usize, t: usize, h: usize, dh: usize },
    MergeHeads { a: usize, b: usize, t: usize, h: usize, dh: usize },
    TakeRows { a: usize },
    Softmax { a: usize, n: usize },
    CausalSoftmax { a: usize, t: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, d: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Cos { a: usize },
    Sin { a: usize },
    Sqrt { a: usize },
    Embedding { table: usize, ids: Vec<usize>, d: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, v: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    /// Z-normalize over the last axis with population std.
    ZNormLast { a: usize, n: usize },
    ZNormPrefix { a: usize, n: usize },
    /// Â_ij = A_ij g_j / (Σ_k A_ik g_k + ε); `g` has head dim 1 or H.
    GateRenorm { a: usize, g: usize, h: usize, hg: usize, t: usize },
    /// y[b,h,t] = Σ_d x[b,h,t,d] w[h,d]
    HeadDot { x: usize, w: usize, h: usize, t: usize, dh: usize },
    /// y = sigmoid(alpha_h (z - tau_h)) per head channel.
    GateSigmoid { z: usize, alpha: usize, tau: usize, hg: usize, t: usize },
    MopeEncode { log_omega: usize, log_sigma: usize, t: usize, half: usize },
    RopeApply { a: usize, base: f64, h: usize, t: usize, dh: usize },
    ConvScores { q: usize, k: usize, w: usize, l_max: usize, h: usize, t: usize, dh: usize },
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add { a, b } | Op::AddBroadcast { a, b } | Op::Mul { a, b } => vec![a, b],
        Op::Scale { a, .. }
        | Op::Reshape { a }
        | Op::SplitHeads { a, .. }
        | Op::MergeHeads { a, .. }
        | Op::TakeRows { a, .. }
        | Op::Softmax { a, .. }
        | Op::CausalSoftmax { a, .. }
        | Op::Gelu { a }
        | Op::Sigmoid { a }
        | Op::Exp { a }
        | Op::Log { a }
        | Op::Cos { a }
        | Op::Sin { a }
        | Op::Sqrt { a }
        | Op::SumAll { a }
        | Op::MeanAll { a }
        | Op::ZNormLast { a, .. }
        | Op::ZNormPrefix { a, .. }
        | Op::RopeApply { a, .. } => vec![a],
        Op::MatmulNN { a, b, .. } | Op::MatmulNT { a, b, .. } => vec![a, b],
        Op::LayerNorm { a, gamma, beta, .. } => vec![a, gamma, beta],
        Op::Embedding { table, .. } => vec![table],
        Op::CrossEntropy { logits, .. } => vec![logits],
        Op::GateRenorm { a, g, .. } => vec![a, g],
        Op::HeadDot { x, w, .. } => vec![x, w],
        Op::GateSigmoid { z, alpha, tau, .. } => vec![z, alpha, tau],
        Op::MopeEncode { log_omega, log_sigma, .. } => vec![log_omega, log_sigma],
        Op::ConvScores { q, k, w, .. } => vec![q, k, w],
    }
}

pub struct Graph<F: Real> {
    values: Vec<Tensor<F>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op) -> Var {
        let requires = op_inputs(&op).iter().any(|&i| self.requires[i]);
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Insert a leaf. `requires_grad` marks it as a parameter to differentiate.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.values.push(t);
        self.ops.push(Op::Leaf);
        self.requires.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if any was produced.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape.clone(), g.clone()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    // ---- elementwise & structural ops -------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape, self.values[b.0].shape, "add: shape mismatch");
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor::new(shape, data), Op::Add { a: a.0, b: b.0 })
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (&self.values[a.0].shape, &self.values[b.0].shape);
        assert!(
            ash.len() >= bsh.len() && ash[ash.len() - bsh.len()..] == bsh[..],
            "add_broadcast: {bsh:?} is not a suffix of {ash:?}"
        );
        let bn = self.values[b.0].numel();
        let data = self.values[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.values[b.0].data[i % bn])
            .collect();
        let shape = ash.clone();
        self.push(Tensor::new(shape, data), Op::AddBroadcast { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape, self.values[b.0].shape, "mul: shape mismatch");
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor::new(shape, data), Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf: F = real(c);
        let data = self.values[a.0].data.iter().map(|&x| x * cf).collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor::new(shape, data), Op::Scale { a: a.0, c })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.values[a.0].numel(),
            "reshape: element count mismatch"
        );
        let data = self.values[a.0].data.clone();
        self.push(Tensor::new(shape, data), Op::Reshape { a: a.0 })
    }

    /// First `rows` rows of a matrix-like tensor `[R, rest...]`.
    pub fn take_rows(&mut self, a: Var, rows: usize) -> Var {
        let sh = &self.values[a.0].shape;
        assert!(sh.len() >= 2 && rows <= sh[0], "take_rows: bad row count");
        let row_len: usize = sh[1..].iter().product();
        let data = self.values[a.0].data[..rows * row_len].to_vec();
        let mut shape = sh.clone();
        shape[0] = rows;
        self.push(Tensor::new(shape, data), Op::TakeRows { a: a.0 })
    }

    // ---- matmul -----------------------------------------------------------

    /// `a [.., m, k] · b [k, n]` (shared) or `b [.., k, n]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ash = self.values[a.0].shape.clone();
        let bsh = self.values[b.0].shape.clone();
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let b_shared = bsh.len() == 2;
        let (bk, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(k, bk, "matmul: inner dims {k} vs {bk}");
        if !b_shared {
            assert_eq!(
                &ash[..ash.len() - 2],
                &bsh[..bsh.len() - 2],
                "matmul: batch dims differ"
            );
        }
        let mut out = vec![F::zero(); batch * m * n];
        mm_nn(
            &self.values[a.0].data,
            &self.values[b.0].data,
            &mut out,
            batch,
            m,
            k,
            n,
            b_shared,
        );
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push(
            Tensor::new(shape, out),
            Op::MatmulNN { a: a.0, b: b.0, batch, m, k, n, b_shared },
        )
    }

    /// `a [.., m, k] · b [.., n, k]ᵀ` — scores layout.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let ash = self.values[a.0].shape.clone();
        let bsh = self.values[b.0].shape.clone();
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let b_shared = bsh.len() == 2;
        let (n, bk) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(k, bk, "matmul_nt: inner dims {k} vs {bk}");
        if !b_shared {
            assert_eq!(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2]);
        }
        let mut out = vec![F::zero(); batch * m * n];
        mm_nt(
            &self.values[a.0].data,
            &self.values[b.0].data,
            &mut out,
            batch,
            m,
            k,
            n,
            b_shared,
        );
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push(
            Tensor::new(shape, out),
            Op::MatmulNT { a: a.0, b: b.0, batch, m, k, n, b_shared },
        )
    }

    /// x·W + bias with W `[k, n]`, bias `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_broadcast(y, bias)
    }

    // ---- heads ------------------------------------------------------------

    /// `[B, T, H·dh] -> [B, H, T, dh]`
    pub fn split_heads(&mut self, a: Var, h: usize) -> Var {
        let sh = self.values[a.0].shape.clone();
        assert_eq!(sh.len(), 3, "split_heads expects [B,T,d]");
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        assert_eq!(d % h, 0, "d not divisible by heads");
        let dh = d / h;
        let src = &self.values[a.0].data;
        let mut out = vec![F::zero(); b * t * d];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let dst = (((bi * h + hi) * t) + ti) * dh;
                    let s = ((bi * t + ti) * d) + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(
            Tensor::new(vec![b, h, t, dh], out),
            Op::SplitHeads { a: a.0, b, t, h, dh },
        )
    }

    /// `[B, H, T, dh] -> [B, T, H·dh]`
    pub fn merge_heads(&mut self, a: Var) -> Var {
        let sh = self.values[a.0].shape.clone();
        assert_eq!(sh.len(), 4, "merge_heads expects [B,H,T,dh]");
        let (b, h, t, dh) = (sh[0], sh[1], sh[2], sh[3]);
        let src = &self.values[a.0].data;
        let mut out = vec![F::zero(); b * h * t * dh];
        let d = h * dh;
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let s = (((bi * h + hi) * t) + ti) * dh;
                    let dst = ((bi * t + ti) * d) + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(
            Tensor::new(vec![b, t, d], out),
            Op::MergeHeads { a: a.0, b, t, h, dh },
        )
    }

    // ---- nonlinearities ---------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let sh = self.values[a.0].shape.clone();
        let n = *sh.last().expect("softmax needs an axis");
        let src = &self.values[a.0].data;
        let mut out = vec![F::zero(); src.len()];
        for (row_o, row_i) in out.chunks_mut(n).zip(src.chunks(n)) {
            softmax_row(row_i, row_o);
        }
        self.push(Tensor::new(sh, out), Op::Softmax { a: a.0, n })
    }

    /// Row-wise softmax over the causal support j ≤ i of `[.., T, T]` scores.
    /// Masked entries are exactly zero in the output.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let sh = self.values[a.0].shape.clone();
        let t = *sh.last().unwrap();
        assert_eq!(sh[sh.len() - 2], t, "causal_softmax expects square trailing dims");
        let src = &self.values[a.0].data;
        let mut out = vec![F::zero(); src.len()];
        for (mat_o, mat_i) in out.chunks_mut(t * t).zip(src.chunks(t * t)) {
            for i in 0..t {
                let row_i = &mat_i[i * t..i * t + i + 1];
                let row_o = &mut mat_o[i * t..i * t + i + 1];
                softmax_row(row_i, row_o);
            }
        }
        self.push(Tensor::new(sh, out), Op::CausalSoftmax { a: a.0, t })
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let sh = self.values[a.0].shape.clone();
        let d = *sh.last().unwrap();
        assert_eq!(self.values[gamma.0].numel(), d);
        assert_eq!(self.values[beta.0].numel(), d);
        let src = &self.values[a.0].data;
        let gm = &self.values[gamma.0].data;
        let bt = &self.values[beta.0].data;
        let eps: F = real(LN_EPS);
        let mut out = vec![F::zero(); src.len()];
        for (row_o, row_i) in out.chunks_mut(d).zip(src.chunks(d)) {
            let inv_d = F::one() / real::<F>(d as f64);
            let mu = row_i.iter().copied().sum::<F>() * inv_d;
            let var = row_i.iter().map(|&x| (x - mu) * (x - mu)).sum::<F>() * inv_d;
            let rstd = F::one() / (var + eps).sqrt();
            for j in 0..d {
                row_o[j] = (row_i[j] - mu) * rstd * gm[j] + bt[j];
            }
        }
        self.push(
            Tensor::new(sh, out),
            Op::LayerNorm { a: a.0, gamma: gamma.0, beta: beta.0, d },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.values[a.0].data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor::new(shape, data), Op::Gelu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.values[a.0].data.iter().map(|&x| sigmoid_fwd(x)).collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor::new(shape, data), Op::Sigmoid { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |a| Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |a| Op::Log { a })
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), |a| Op::Cos { a })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), |a| Op::Sin { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), |a| Op::Sqrt { a })
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: impl Fn(usize) -> Op) -> Var {
        let data = self.values[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.values[a.0].shape.clone();
        self.push(Tensor::new(shape, data), op(a.0))
    }

    // ---- lookup & loss ----------------------------------------------------

    /// Row lookup: `ids` indexes rows of `table [V, d]`; output shape is
    /// `out_batch ++ [d]` where `out_batch` flattens to `ids.len()`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], mut out_shape: Vec<usize>) -> Var {
        let tsh = self.values[table.0].shape.clone();
        assert_eq!(tsh.len(), 2, "embedding table must be [V, d]");
        let (v, d) = (tsh[0], tsh[1]);
        assert_eq!(out_shape.iter().product::<usize>(), ids.len());
        let src = &self.values[table.0].data;
        let mut out = vec![F::zero(); ids.len() * d];
        for (slot, &id) in ids.iter().enumerate() {
            assert!(id < v, "token id {id} out of range (vocab {v})");
            out[slot * d..(slot + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        out_shape.push(d);
        self.push(
            Tensor::new(out_shape, out),
            Op::Embedding { table: table.0, ids: ids.to_vec(), d },
        )
    }

    /// Mean cross-entropy of softmax(logits `[N, V]`) against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let sh = self.values[logits.0].shape.clone();
        assert_eq!(sh.len(), 2, "cross_entropy expects [N, V] logits");
        let (n, v) = (sh[0], sh[1]);
        assert_eq!(n, targets.len(), "cross_entropy: target count mismatch");
        let src = &self.values[logits.0].data;
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < v, "target id out of range");
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            total += lse - row[t];
        }
        let loss = total / real::<F>(n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), v },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data.iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].numel();
        let s = self.values[a.0].data.iter().copied().sum::<F>() / real::<F>(n as f64);
        self.push(Tensor::scalar(s), Op::MeanAll { a: a.0 })
    }

    // ---- gating -----------------------------------------------------------

    /// (x - μ)/(σ + ε) over the last axis, population σ.
    pub fn znorm_last(&mut self, a: Var) -> Var {
        let sh = self.values[a.0].shape.clone();
        let n = *sh.last().unwrap();
        let src = &self.values[a.0].data;
        let eps: F = real(ZNORM_EPS);
        let mut out = vec![F::zero(); src.len()];
        for (row_o, row_i) in out.chunks_mut(n).zip(src.chunks(n)) {
            let inv_n = F::one() / real::<F>(n as f64);
            let mu = row_i.iter().copied().sum::<F>() * inv_n;
            let var = row_i.iter().map(|&x| (x - mu) * (x - mu)).sum::<F>() * inv_n;
            let denom = var.sqrt() + eps;
            for j in 0..n {
                row_o[j] = (row_i[j] - mu) / denom;
            }
        }
        self.push(Tensor::new(sh, out), Op::ZNormLast { a: a.0, n })
    }

    /// Causal z-normalization over the last axis: position j is centered
    /// and scaled by the statistics of positions 0..=j only, so no output
    /// depends on later inputs. Position 0 normalizes to 0.
    pub fn znorm_prefix(&mut self, a: Var) -> Var {
        let sh = self.values[a.0].shape.clone();
        let n = *sh.last().unwrap();
        let src = &self.values[a.0].data;
        let eps: F = real(ZNORM_EPS);
        let mut out = vec![F::zero(); src.len()];
        for (row_o, row_i) in out.chunks_mut(n).zip(src.chunks(n)) {
            let mut s = F::zero();
            let mut s2 = F::zero();
            for j in 0..n {
                let x = row_i[j];
                s += x;
                s2 += x * x;
                let inv_nj = F::one() / real::<F>((j + 1) as f64);
                let mu = s * inv_nj;
                let var = (s2 * inv_nj - mu * mu).max(F::zero());
                row_o[j] = (x - mu) / (var.sqrt() + eps);
            }
        }
        self.push(Tensor::new(sh, out), Op::ZNormPrefix { a: a.0, n })
    }

    /// Gate-reweighted attention rows: Â_ij = A_ij g_j / (Σ_k A_ik g_k + ε).
    /// `a` is `[B, H, T, T]`; `g` is `[B, H, T]` (per-head) or `[B, 1, T]`
    /// (shared across heads).
    pub fn gate_renorm(&mut self, a: Var, g: Var) -> Var {
        let ash = self.values[a.0].shape.clone();
        let gsh = self.values[g.0].shape.clone();
        assert_eq!(ash.len(), 4, "gate_renorm expects [B,H,T,T] attention");
        let (b, h, t) = (ash[0], ash[1], ash[2]);
        assert_eq!(ash[3], t);
        assert_eq!(gsh[0], b);
        let hg = gsh[1];
        assert!(hg == h || hg == 1, "gate head dim must be H or 1");
        assert_eq!(gsh[2], t);
        let av = &self.values[a.0].data;
        let gv = &self.values[g.0].data;
        let eps: F = real(GATE_EPS);
        let mut out = vec![F::zero(); av.len()];
        for bi in 0..b {
            for hi in 0..h {
                let g_off = (bi * hg + if hg == 1 { 0 } else { hi }) * t;
                let m_off = ((bi * h) + hi) * t * t;
                for i in 0..t {
                    let row = &av[m_off + i * t..m_off + (i + 1) * t];
                    let mut s = eps;
                    for j in 0..t {
                        s += row[j] * gv[g_off + j];
                    }
                    let o = &mut out[m_off + i * t..m_off + (i + 1) * t];
                    for j in 0..t {
                        o[j] = row[j] * gv[g_off + j] / s;
                    }
                }
            }
        }
        self.push(
            Tensor::new(ash, out),
            Op::GateRenorm { a: a.0, g: g.0, h, hg, t },
        )
    }

    /// Per-head projection to a scalar: y[b,h,t] = w_h · x[b,h,t,·].
    pub fn head_dot(&mut self, x: Var, w: Var) -> Var {
        let xsh = self.values[x.0].shape.clone();
        let wsh = self.values[w.0].shape.clone();
        assert_eq!(xsh.len(), 4, "head_dot expects [B,H,T,dh]");
        let (b, h, t, dh) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        assert_eq!(wsh, vec![h, dh], "head_dot weight must be [H, dh]");
        let xv = &self.values[x.0].data;
        let wv = &self.values[w.0].data;
        let mut out = vec![F::zero(); b * h * t];
        for bi in 0..b {
            for hi in 0..h {
                let wrow = &wv[hi * dh..(hi + 1) * dh];
                for ti in 0..t {
                    let xoff = (((bi * h + hi) * t) + ti) * dh;
                    let mut s = F::zero();
                    for d in 0..dh {
                        s += xv[xoff + d] * wrow[d];
                    }
                    out[(bi * h + hi) * t + ti] = s;
                }
            }
        }
        self.push(
            Tensor::new(vec![b, h, t], out),
            Op::HeadDot { x: x.0, w: w.0, h, t, dh },
        )
    }

    /// y = sigmoid(alpha_h (z - tau_h)); z is `[B, Hg, T]`, alpha/tau `[Hg]`.
    pub fn gate_sigmoid(&mut self, z: Var, alpha: Var, tau: Var) -> Var {
        let zsh = self.values[z.0].shape.clone();
        assert_eq!(zsh.len(), 3, "gate_sigmoid expects [B,Hg,T]");
        let (b, hg, t) = (zsh[0], zsh[1], zsh[2]);
        assert_eq!(self.values[alpha.0].numel(), hg);
        assert_eq!(self.values[tau.0].numel(), hg);
        let zv = &self.values[z.0].data;
        let al = &self.values[alpha.0].data;
        let ta = &self.values[tau.0].data;
        let mut out = vec![F::zero(); zv.len()];
        for bi in 0..b {
            for hi in 0..hg {
                for ti in 0..t {
                    let idx = (bi * hg + hi) * t + ti;
                    out[idx] = sigmoid_fwd(al[hi] * (zv[idx] - ta[hi]));
                }
            }
        }
        self.push(
            Tensor::new(zsh, out),
            Op::GateSigmoid { z: z.0, alpha: alpha.0, tau: tau.0, hg, t },
        )
    }

    // ---- positional encodings --------------------------------------------

    /// Morlet positional encoding matrix `[t, 2·half]`, differentiable in the
    /// log-frequency and log-bandwidth leaves.
    pub fn mope_encode(&mut self, log_omega: Var, log_sigma: Var, t: usize) -> Var {
        let half = self.values[log_omega.0].numel();
        assert_eq!(self.values[log_sigma.0].numel(), half);
        let lo = &self.values[log_omega.0].data;
        let ls = &self.values[log_sigma.0].data;
        let d = 2 * half;
        let mut out = vec![F::zero(); t * d];
        for i in 0..half {
            let omega = lo[i].exp();
            let sigma = ls[i].exp();
            let inv2s2 = F::one() / (real::<F>(2.0) * sigma * sigma);
            for b in 0..t {
                let bf: F = real(b as f64);
                let env = (-bf * bf * inv2s2).exp();
                let phase = omega * bf;
                out[b * d + 2 * i] = phase.cos() * env;
                out[b * d + 2 * i + 1] = phase.sin() * env;
            }
        }
        self.push(
            Tensor::new(vec![t, d], out),
            Op::MopeEncode { log_omega: log_omega.0, log_sigma: log_sigma.0, t, half },
        )
    }

    /// Rotary application to `[B, H, T, dh]`: pair p rotated by t·base^(-2p/dh).
    pub fn rope_apply(&mut self, a: Var, base: f64) -> Var {
        let sh = self.values[a.0].shape.clone();
        assert_eq!(sh.len(), 4, "rope_apply expects [B,H,T,dh]");
        let (b, h, t, dh) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(dh % 2, 0, "rope_apply: head dimension must be even");
        let src = &self.values[a.0].data;
        let mut out = vec![F::zero(); src.len()];
        for bh in 0..b * h {
            for ti in 0..t {
                let off = (bh * t + ti) * dh;
                for p in 0..dh / 2 {
                    let theta = base.powf(-2.0 * p as f64 / dh as f64);
                    let ang: F = real(ti as f64 * theta);
                    let (s, c) = (ang.sin(), ang.cos());
                    let x = src[off + 2 * p];
                    let y = src[off + 2 * p + 1];
                    out[off + 2 * p] = x * c - y * s;
                    out[off + 2 * p + 1] = x * s + y * c;
                }
            }
        }
        self.push(Tensor::new(sh, out), Op::RopeApply { a: a.0, base, h, t, dh })
    }

    // ---- lag-mixture attention scores -------------------------------------

    /// Pre-mask attention scores mixing shifted query-key products:
    /// S[i,j] = Σ_τ w_τ · (q_i · k_{j+τ}) / √dh over the valid
    /// (T−|τ|)-sized alignment block. `w` is the softmaxed lag weight vector
    /// `[2·l_max+1]`; entries with |w_τ| < 1e-4 are skipped.
    ///
    /// Memory contract: one T×T accumulator (the output) plus one reusable
    /// T×T intermediate, independent of `l_max` — tracked by
    /// [`score_buffers`].
    pub fn conv_scores(&mut self, q: Var, k: Var, w: Var, l_max: usize) -> Var {
        let sh = self.values[q.0].shape.clone();
        assert_eq!(sh.len(), 4, "conv_scores expects [B,H,T,dh]");
        let (b, h, t, dh) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(self.values[k.0].shape, sh, "conv_scores: q/k shape mismatch");
        assert!(l_max < t, "lag radius {l_max} must be below sequence length {t}");
        assert_eq!(self.values[w.0].numel(), 2 * l_max + 1);
        let qv = &self.values[q.0].data;
        let kv = &self.values[k.0].data;
        let wv = &self.values[w.0].data;
        let scale = 1.0 / (dh as f64).sqrt();

        score_buffers::reset();
        score_buffers::acquire(); // the [T,T] score accumulator
        let mut out = vec![F::zero(); b * h * t * t];
        score_buffers::acquire(); // the reusable [T,T] lag intermediate
        let mut cc = vec![F::zero(); t * t];
        for bh in 0..b * h {
            let qb = &qv[bh * t * dh..(bh + 1) * t * dh];
            let kb = &kv[bh * t * dh..(bh + 1) * t * dh];
            cc.iter_mut().for_each(|x| *x = F::zero());
            mm_nt_seq(qb, kb, &mut cc, 1, t, dh, t, true);
            let sb = &mut out[bh * t * t..(bh + 1) * t * t];
            accumulate_lags(sb, &cc, wv, l_max, t, scale, AccumDir::Forward);
        }
        score_buffers::release();
        score_buffers::release();

        let mut shape = sh[..2].to_vec();
        shape.extend([t, t]);
        self.push(
            Tensor::new(shape, out),
            Op::ConvScores { q: q.0, k: k.0, w: w.0, l_max, h, t, dh },
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Populate grads of every reachable `requires_grad` node with
    /// d(root)/d(node). `root` must be scalar and finite.
    pub fn backward(&mut self, root: Var) -> Result<(), GraphError> {
        let numel = self.values[root.0].numel();
        if numel != 1 {
            return Err(GraphError::NonScalarRoot { numel });
        }
        if !self.values[root.0].data[0].is_finite() {
            return Err(GraphError::NonFinite { context: "backward root" });
        }
        self.grads[root.0] = Some(vec![F::one()]);

        for id in (0..=root.0).rev() {
            if !self.requires[id] {
                continue;
            }
            // Keep leaf grads for retrieval; free interior grads as we go.
            let gout = if matches!(self.ops[id], Op::Leaf) {
                continue;
            } else {
                match self.grads[id].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backprop_node(id, &gout);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, idx: usize) -> &mut Vec<F> {
        let n = self.values[idx].numel();
        self.grads[idx].get_or_insert_with(|| vec![F::zero(); n])
    }

    fn backprop_node(&mut self, id: usize, gout: &[F]) {
        // Clone of the op descriptor (cheap except for id lists).
        let op = self.ops[id].clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &(src, _) in &[(a, 0), (b, 1)] {
                    if self.requires[src] {
                        let g = self.ensure_grad(src);
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.requires[a] {
                    let g = self.ensure_grad(a);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
                if self.requires[b] {
                    let bn = self.values[b].numel();
                    let g = self.ensure_grad(b);
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % bn] += go;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires[a] {
                    let bv = self.values[b].data.clone();
                    let g = self.ensure_grad(a);
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                }
                if self.requires[b] {
                    let av = self.values[a].data.clone();
                    let g = self.ensure_grad(b);
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.requires[a] {
                    let cf: F = real(c);
                    let g = self.ensure_grad(a);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * cf;
                    }
                }
            }
            Op::MatmulNN { a, b, batch, m, k, n, b_shared } => {
                if self.requires[a] {
                    let bv = std::mem::take(&mut self.values[b].data);
                    let g = self.grads[a].get_or_insert_with(|| vec![F::zero(); batch * m * k]);
                    // dA[m,k] += G[m,n] · B[k,n]ᵀ
                    mm_nt(gout, &bv, g, batch, m, n, k, b_shared);
                    self.values[b].data = bv;
                }
                if self.requires[b] {
                    let av = std::mem::take(&mut self.values[a].data);
                    let gb_len = self.values[b].numel();
                    let g = self.grads[b].get_or_insert_with(|| vec![F::zero(); gb_len]);
                    if b_shared {
                        // accumulate every batch item into the shared weight
                        for bi in 0..batch {
                            mm_tn_seq(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &gout[bi * m * n..(bi + 1) * m * n],
                                g,
                                1,
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        mm_tn(&av, gout, g, batch, m, k, n);
                    }
                    self.values[a].data = av;
                }
            }
            Op::MatmulNT { a, b, batch, m, k, n, b_shared } => {
                // out = A[m,k] · B[n,k]ᵀ
                if self.requires[a] {
                    let bv = std::mem::take(&mut self.values[b].data);
                    let g = self.grads[a].get_or_insert_with(|| vec![F::zero(); batch * m * k]);
                    // dA[m,k] += G[m,n] · B[n,k]
                    mm_nn(gout, &bv, g, batch, m, n, k, b_shared);
                    self.values[b].data = bv;
                }
                if self.requires[b] {
                    let av = std::mem::take(&mut self.values[a].data);
                    let gb_len = self.values[b].numel();
                    let g = self.grads[b].get_or_insert_with(|| vec![F::zero(); gb_len]);
                    if b_shared {
                        for bi in 0..batch {
                            mm_tn_seq(
                                &gout[bi * m * n..(bi + 1) * m * n],
                                &av[bi * m * k..(bi + 1) * m * k],
                                g,
                                1,
                                m,
                                n,
                                k,
                            );
                        }
                    } else {
                        // dB[n,k] += Gᵀ[n,m] · A[m,k]
                        mm_tn(gout, &av, g, batch, m, n, k);
                    }
                    self.values[a].data = av;
                }
            }
            Op::Reshape { a } | Op::TakeRows { a, .. } => {
                if self.requires[a] {
                    let g = self.ensure_grad(a);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::SplitHeads { a, b, t, h, dh } => {
                if self.requires[a] {
                    let d = h * dh;
                    let g = self.ensure_grad(a);
                    for bi in 0..b {
                        for hi in 0..h {
                            for ti in 0..t {
                                let s = (((bi * h + hi) * t) + ti) * dh;
                                let dst = ((bi * t + ti) * d) + hi * dh;
                                for x in 0..dh {
                                    g[dst + x] += gout[s + x];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, b, t, h, dh } => {
                if self.requires[a] {
                    let d = h * dh;
                    let g = self.ensure_grad(a);
                    for bi in 0..b {
                        for hi in 0..h {
                            for ti in 0..t {
                                let s = (((bi * h + hi) * t) + ti) * dh;
                                let src = ((bi * t + ti) * d) + hi * dh;
                                for x in 0..dh {
                                    g[s + x] += gout[src + x];
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { a, n } => {
                if self.requires[a] {
                    let y = self.values[id].data.clone();
                    let g = self.ensure_grad(a);
                    for (row, (g_row, y_row)) in
                        g.chunks_mut(n).zip(y.chunks(n)).enumerate()
                    {
                        let go_row = &gout[row * n..(row + 1) * n];
                        let dot: F = go_row.iter().zip(y_row).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            g_row[j] += y_row[j] * (go_row[j] - dot);
                        }
                    }
                }
            }
            Op::CausalSoftmax { a, t } => {
                if self.requires[a] {
                    let y = self.values[id].data.clone();
                    let g = self.ensure_grad(a);
                    let mats = y.len() / (t * t);
                    for mi in 0..mats {
                        let off = mi * t * t;
                        for i in 0..t {
                            let r = off + i * t;
                            let y_row = &y[r..r + i + 1];
                            let go_row = &gout[r..r + i + 1];
                            let dot: F = go_row.iter().zip(y_row).map(|(&a, &b)| a * b).sum();
                            for j in 0..=i {
                                g[r + j] += y_row[j] * (go_row[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, d } => {
                let x = self.values[a].data.clone();
                let gm = self.values[gamma].data.clone();
                let eps: F = real(LN_EPS);
                let rows = x.len() / d;
                let inv_d = F::one() / real::<F>(d as f64);
                // per-row statistics recomputed from the saved input
                let mut xhat = vec![F::zero(); d];
                for row in 0..rows {
                    let xr = &x[row * d..(row + 1) * d];
                    let go = &gout[row * d..(row + 1) * d];
                    let mu = xr.iter().copied().sum::<F>() * inv_d;
                    let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
                    let rstd = F::one() / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * rstd;
                    }
                    if self.requires[gamma] {
                        let g = self.ensure_grad(gamma);
                        for j in 0..d {
                            g[j] += go[j] * xhat[j];
                        }
                    }
                    if self.requires[beta] {
                        let g = self.ensure_grad(beta);
                        for j in 0..d {
                            g[j] += go[j];
                        }
                    }
                    if self.requires[a] {
                        let mut mean_dxhat = F::zero();
                        let mut mean_dxhat_xhat = F::zero();
                        for j in 0..d {
                            let dxh = go[j] * gm[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[j];
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        let g = self.ensure_grad(a);
                        for j in 0..d {
                            let dxh = go[j] * gm[j];
                            g[row * d + j] +=
                                rstd * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.requires[a] {
                    let x = self.values[a].data.clone();
                    let g = self.ensure_grad(a);
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_bwd(x[i]);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.requires[a] {
                    let y = self.values[id].data.clone();
                    let g = self.ensure_grad(a);
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (F::one() - y[i]);
                    }
                }
            }
            Op::Exp { a } => {
                if self.requires[a] {
                    let y = self.values[id].data.clone();
                    let g = self.ensure_grad(a);
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i];
                    }
                }
            }
            Op::Log { a } => {
                if self.requires[a] {
                    let x = self.values[a].data.clone();
                    let g = self.ensure_grad(a);
                    for i in 0..g.len() {
                        g[i] += gout[i] / x[i];
                    }
                }
            }
            Op::Cos { a } => {
                if self.requires[a] {
                    let x = self.values[a].data.clone();
                    let g = self.ensure_grad(a);
                    for i in 0..g.len() {
                        g[i] += -(gout[i] * x[i].sin());
                    }
                }
            }
            Op::Sin { a } => {
                if self.requires[a] {
                    let x = self.values[a].data.clone();
                    let g = self.ensure_grad(a);
                    for i in 0..g.len() {
                        g[i] += gout[i] * x[i].cos();
                    }
                }
            }
            Op::Sqrt { a } => {
                if self.requires[a] {
                    let y = self.values[id].data.clone();
                    let g = self.ensure_grad(a);
                    let half: F = real(0.5);
                    for i in 0..g.len() {
                        g[i] += gout[i] * half / y[i];
                    }
                }
            }
            Op::Embedding { table, ids, d } => {
                if self.requires[table] {
                    let g = self.ensure_grad(table);
                    for (slot, &idx) in ids.iter().enumerate() {
                        for x in 0..d {
                            g[idx * d + x] += gout[slot * d + x];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, v } => {
                if self.requires[logits] {
                    let z = self.values[logits].data.clone();
                    let scale = gout[0] / real::<F>(targets.len() as f64);
                    let g = self.ensure_grad(logits);
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &z[i * v..(i + 1) * v];
                        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                        let denom: F = row.iter().map(|&x| (x - max).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - max).exp() / denom;
                            let delta = if j == t { F::one() } else { F::zero() };
                            g[i * v + j] += scale * (p - delta);
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if self.requires[a] {
                    let go = gout[0];
                    let g = self.ensure_grad(a);
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.requires[a] {
                    let n = self.values[a].numel();
                    let go = gout[0] / real::<F>(n as f64);
                    let g = self.ensure_grad(a);
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            }
            Op::ZNormLast { a, n } => {
                if self.requires[a] {
                    let x = self.values[a].data.clone();
                    let y = self.values[id].data.clone();
                    let eps: F = real(ZNORM_EPS);
                    let tiny: F = real(1e-12);
                    let inv_n = F::one() / real::<F>(n as f64);
                    let g = self.ensure_grad(a);
                    let rows = x.len() / n;
                    for row in 0..rows {
                        let xr = &x[row * n..(row + 1) * n];
                        let yr = &y[row * n..(row + 1) * n];
                        let go = &gout[row * n..(row + 1) * n];
                        let mu = xr.iter().copied().sum::<F>() * inv_n;
                        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_n;
                        let sigma = var.sqrt();
                        let d = sigma + eps;
                        let s1 = go.iter().copied().sum::<F>();
                        let s2: F = go.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            let mut dx = (go[j] - s1 * inv_n) / d;
                            if sigma > tiny {
                                dx = dx - s2 * yr[j] * inv_n / sigma;
                            }
                            g[row * n + j] += dx;
                        }
                    }
                }
            }
            Op::ZNormPrefix { a, n } => {
                if self.requires[a] {
                    let x = self.values[a].data.clone();
                    let y = self.values[id].data.clone();
                    let eps: F = real(ZNORM_EPS);
                    let tiny: F = real(1e-12);
                    let g = self.ensure_grad(a);
                    let rows = x.len() / n;
                    for row in 0..rows {
                        let xr = &x[row * n..(row + 1) * n];
                        let yr = &y[row * n..(row + 1) * n];
                        let go = &gout[row * n..(row + 1) * n];
                        let gr = &mut g[row * n..(row + 1) * n];
                        let mut s = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..n {
                            s += xr[j];
                            s2 += xr[j] * xr[j];
                            if go[j] == F::zero() {
                                continue;
                            }
                            let inv_nj = F::one() / real::<F>((j + 1) as f64);
                            let mu = s * inv_nj;
                            let var = (s2 * inv_nj - mu * mu).max(F::zero());
                            let sigma = var.sqrt();
                            let d = sigma + eps;
                            // dy_j/dx_u = (δ_ju − 1/n_j)/d − y_j (x_u − μ_j)/(n_j σ_j d)
                            for u in 0..=j {
                                let mut dx = (if u == j { F::one() } else { F::zero() }
                                    - inv_nj)
                                    / d;
                                if sigma > tiny {
                                    dx += -(yr[j] * (xr[u] - mu) * inv_nj / (sigma * d));
                                }
                                gr[u] += go[j] * dx;
                            }
                        }
                    }
                }
            }
            Op::GateRenorm { a, g: gv, h, hg, t } => {
                let av = self.values[a].data.clone();
                let gate = self.values[gv].data.clone();
                let eps: F = real(GATE_EPS);
                let b = av.len() / (h * t * t);
                for bi in 0..b {
                    for hi in 0..h {
                        let g_off = (bi * hg + if hg == 1 { 0 } else { hi }) * t;
                        let m_off = ((bi * h) + hi) * t * t;
                        for i in 0..t {
                            let row = &av[m_off + i * t..m_off + (i + 1) * t];
                            let go = &gout[m_off + i * t..m_off + (i + 1) * t];
                            let mut s = eps;
                            for j in 0..t {
                                s += row[j] * gate[g_off + j];
                            }
                            // c_i = Σ_j G_ij Â_ij
                            let mut c = F::zero();
                            for j in 0..t {
                                c += go[j] * row[j] * gate[g_off + j] / s;
                            }
                            if self.requires[a] {
                                let ga = self.ensure_grad(a);
                                for j in 0..t {
                                    ga[m_off + i * t + j] += gate[g_off + j] / s * (go[j] - c);
                                }
                            }
                            if self.requires[gv] {
                                let gg = self.ensure_grad(gv);
                                for j in 0..t {
                                    gg[g_off + j] += row[j] / s * (go[j] - c);
                                }
                            }
                        }
                    }
                }
            }
            Op::HeadDot { x, w, h, t, dh } => {
                let b = self.values[x].shape[0];
                if self.requires[x] {
                    let wv = self.values[w].data.clone();
                    let g = self.ensure_grad(x);
                    for bi in 0..b {
                        for hi in 0..h {
                            for ti in 0..t {
                                let go = gout[(bi * h + hi) * t + ti];
                                let off = (((bi * h + hi) * t) + ti) * dh;
                                for d in 0..dh {
                                    g[off + d] += go * wv[hi * dh + d];
                                }
                            }
                        }
                    }
                }
                if self.requires[w] {
                    let xv = self.values[x].data.clone();
                    let g = self.ensure_grad(w);
                    for bi in 0..b {
                        for hi in 0..h {
                            for ti in 0..t {
                                let go = gout[(bi * h + hi) * t + ti];
                                let off = (((bi * h + hi) * t) + ti) * dh;
                                for d in 0..dh {
                                    g[hi * dh + d] += go * xv[off + d];
                                }
                            }
                        }
                    }
                }
            }
            Op::GateSigmoid { z, alpha, tau, hg, t } => {
                let zv = self.values[z].data.clone();
                let al = self.values[alpha].data.clone();
                let ta = self.values[tau].data.clone();
                let y = self.values[id].data.clone();
                let b = zv.len() / (hg * t);
                for bi in 0..b {
                    for hi in 0..hg {
                        for ti in 0..t {
                            let idx = (bi * hg + hi) * t + ti;
                            let common = gout[idx] * y[idx] * (F::one() - y[idx]);
                            if self.requires[z] {
                                self.ensure_grad(z)[idx] += common * al[hi];
                            }
                            if self.requires[alpha] {
                                self.ensure_grad(alpha)[hi] += common * (zv[idx] - ta[hi]);
                            }
                            if self.requires[tau] {
                                self.ensure_grad(tau)[hi] += -(common * al[hi]);
                            }
                        }
                    }
                }
            }
            Op::MopeEncode { log_omega, log_sigma, t, half } => {
                let lo = self.values[log_omega].data.clone();
                let ls = self.values[log_sigma].data.clone();
                let d = 2 * half;
                let two: F = real(2.0);
                for i in 0..half {
                    let omega = lo[i].exp();
                    let sigma = ls[i].exp();
                    let inv2s2 = F::one() / (two * sigma * sigma);
                    let mut d_omega = F::zero();
                    let mut d_sigma = F::zero();
                    for b in 0..t {
                        let bf: F = real(b as f64);
                        let env = (-bf * bf * inv2s2).exp();
                        let phase = omega * bf;
                        let (sn, cs) = (phase.sin(), phase.cos());
                        let gc = gout[b * d + 2 * i];
                        let gs = gout[b * d + 2 * i + 1];
                        d_omega += (gs * cs - gc * sn) * bf * env;
                        d_sigma +=
                            (gc * cs + gs * sn) * env * bf * bf / (sigma * sigma * sigma);
                    }
                    if self.requires[log_omega] {
                        self.ensure_grad(log_omega)[i] += d_omega * omega;
                    }
                    if self.requires[log_sigma] {
                        self.ensure_grad(log_sigma)[i] += d_sigma * sigma;
                    }
                }
            }
            Op::RopeApply { a, base, h, t, dh } => {
                if self.requires[a] {
                    let b = self.values[a].shape[0];
                    let g = self.ensure_grad(a);
                    for bh in 0..b * h {
                        for ti in 0..t {
                            let off = (bh * t + ti) * dh;
                            for p in 0..dh / 2 {
                                let theta = base.powf(-2.0 * p as f64 / dh as f64);
                                let ang: F = real(ti as f64 * theta);
                                let (s, c) = (ang.sin(), ang.cos());
                                let gx = gout[off + 2 * p];
                                let gy = gout[off + 2 * p + 1];
                                // inverse rotation of the upstream gradient
                                g[off + 2 * p] += gx * c + gy * s;
                                g[off + 2 * p + 1] += gy * c - gx * s;
                            }
                        }
                    }
                }
            }
            Op::ConvScores { q, k, w, l_max, h, t, dh } => {
                let qv = self.values[q].data.clone();
                let kv = self.values[k].data.clone();
                let wv = self.values[w].data.clone();
                let b = qv.len() / (h * t * dh);
                let scale = 1.0 / (dh as f64).sqrt();
                let scale_f: F = real(scale);
                let mut cc = vec![F::zero(); t * t];
                let mut dc = vec![F::zero(); t * t];
                for bh in 0..b * h {
                    let qb = &qv[bh * t * dh..(bh + 1) * t * dh];
                    let kb = &kv[bh * t * dh..(bh + 1) * t * dh];
                    let go = &gout[bh * t * t..(bh + 1) * t * t];
                    // dC[i, j+τ] += w_τ·scale·gS[i,j]; recompute C for dw.
                    dc.iter_mut().for_each(|x| *x = F::zero());
                    accumulate_lags(&mut dc, go, &wv, l_max, t, scale, AccumDir::Backward);
                    if self.requires[q] {
                        let g = self.ensure_grad(q);
                        mm_nn(
                            &dc,
                            kb,
                            &mut g[bh * t * dh..(bh + 1) * t * dh],
                            1,
                            t,
                            t,
                            dh,
                            true,
                        );
                    }
                    if self.requires[k] {
                        let g = self.ensure_grad(k);
                        mm_tn_seq(&dc, qb, &mut g[bh * t * dh..(bh + 1) * t * dh], 1, t, t, dh);
                    }
                    if self.requires[w] {
                        cc.iter_mut().for_each(|x| *x = F::zero());
                        mm_nt_seq(qb, kb, &mut cc, 1, t, dh, t, true);
                        let gw = self.ensure_grad(w);
                        for (ti, gwt) in gw.iter_mut().enumerate() {
                            let tau = ti as isize - l_max as isize;
                            if wv[ti].abs().to_f64() < LAG_PRUNE {
                                continue;
                            }
                            let (lo, hi) = lag_block(tau, t);
                            let mut acc = F::zero();
                            for i in lo..hi {
                                for j in lo..hi {
                                    let jj = (j as isize + tau) as usize;
                                    acc += go[i * t + j] * cc[i * t + jj];
                                }
                            }
                            *gwt += acc * scale_f;
                        }
                    }
                }
            }
        }
    }
}

enum AccumDir {
    /// out[i,j] += w_τ·scale·cc[i,j+τ]
    Forward,
    /// out[i,j+τ] += w_τ·scale·cc[i,j]  (transposed mapping, for dC)
    Backward,
}

/// Valid index range of the (T−|τ|)-sized alignment block at lag τ.
fn lag_block(tau: isize, t: usize) -> (usize, usize) {
    if tau >= 0 {
        (0, t - tau as usize)
    } else {
        ((-tau) as usize, t)
    }
}

fn accumulate_lags<F: Real>(
    out: &mut [F],
    cc: &[F],
    w: &[F],
    l_max: usize,
    t: usize,
    scale: f64,
    dir: AccumDir,
) {
    for (ti, &wt) in w.iter().enumerate() {
        let tau = ti as isize - l_max as isize;
        if wt.abs().to_f64() < LAG_PRUNE {
            continue;
        }
        let weff = wt * real::<F>(scale);
        let (lo, hi) = lag_block(tau, t);
        for i in lo..hi {
            for j in lo..hi {
                let jj = (j as isize + tau) as usize;
                match dir {
                    AccumDir::Forward => out[i * t + j] += weff * cc[i * t + jj],
                    AccumDir::Backward => out[i * t + jj] += weff * cc[i * t + j],
                }
            }
        }
    }
}

fn softmax_row<F: Real>(row_i: &[F], row_o: &mut [F]) {
    let max = row_i.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &x) in row_o.iter_mut().zip(row_i) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in row_o.iter_mut() {
        *o = *o / sum;
    }
}

fn sigmoid_fwd<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<F: Real>(x: F) -> F {
    let c: F = real(GELU_C);
    let a: F = real(GELU_A);
    let half: F = real(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_bwd<F: Real>(x: F) -> F {
    let c: F = real(GELU_C);
    let a: F = real(GELU_A);
    let half: F = real(0.5);
    let three: F = real(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = F::one() - th * th;
    half * (F::one() + th) + half * x * sech2 * c * (F::one() + three * a * x * x)
}
