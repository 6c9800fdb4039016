//! Attention mechanisms of the ablation matrix: scaled dot-product, the
//! energy gate, lag-mixture (convolution) scoring, band-structured head
//! initialization, and the multi-quantity spectral gate.
//!
//! Everything here is a thin composition over [`Graph`] ops so the whole
//! stack stays differentiable; the model module assembles these into full
//! attention sublayers.

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::tensor::{real, Graph, Real, Tensor, Var};

/// Per-head energy gate parameters: projection direction plus gate
/// sharpness and threshold — exactly d_head + 2 scalars per head.
#[derive(Clone, Debug)]
pub struct EgaParams<F> {
    /// `[H, d_head]` energy projection directions.
    pub w_proj: Tensor<F>,
    /// `[H]` gate sharpness α.
    pub alpha: Tensor<F>,
    /// `[H]` gate threshold τ.
    pub tau: Tensor<F>,
}

impl<F: Real> EgaParams<F> {
    /// w_proj ~ N(0, 0.02), α = 1, τ = 0 so the learned threshold's drift is
    /// observable rather than imposed.
    pub fn init(heads: usize, d_head: usize, rng: &mut SplitMix64) -> Self {
        EgaParams {
            w_proj: Tensor::randn(vec![heads, d_head], 0.02, rng),
            alpha: Tensor::full(vec![heads], F::one()),
            tau: Tensor::zeros(vec![heads]),
        }
    }

    pub fn param_count(heads: usize, d_head: usize) -> usize {
        heads * (d_head + 2)
    }
}

/// Pre-softmax lag-mixture logits over lags −L..=L.
#[derive(Clone, Debug)]
pub struct LagWeights<F> {
    pub lambda: Tensor<F>,
    pub l_max: usize,
}

impl<F: Real> LagWeights<F> {
    /// Mild zero-lag bias at init so the variant starts near standard
    /// attention and learns to spread over lags.
    pub fn init(l_max: usize) -> Self {
        let mut lambda = Tensor::zeros(vec![2 * l_max + 1]);
        lambda.data[l_max] = real(2.0);
        LagWeights { lambda, l_max }
    }
}

/// Which spectral quantities feed the multi-quantity gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MqFeatureSpec {
    pub use_energy: bool,
    pub use_phase: bool,
    pub use_flux: bool,
}

impl MqFeatureSpec {
    pub fn energy_only() -> Self {
        MqFeatureSpec { use_energy: true, use_phase: false, use_flux: false }
    }

    pub fn energy_phase() -> Self {
        MqFeatureSpec { use_energy: true, use_phase: true, use_flux: false }
    }

    pub fn energy_flux() -> Self {
        MqFeatureSpec { use_energy: true, use_phase: false, use_flux: true }
    }

    pub fn n_features(&self) -> usize {
        assert!(
            self.use_energy || self.use_phase || self.use_flux,
            "multi-quantity gate needs at least one feature"
        );
        self.use_energy as usize + self.use_phase as usize + self.use_flux as usize
    }
}

/// Standard causal scaled dot-product attention over `[B, H, T, d_head]`.
pub fn scaled_dot_attention<F: Real>(g: &mut Graph<F>, q: Var, k: Var, v: Var) -> Var {
    let a = dot_attention_weights(g, q, k);
    g.matmul(a, v)
}

/// Causal row-stochastic attention weights from dot-product scores.
pub fn dot_attention_weights<F: Real>(g: &mut Graph<F>, q: Var, k: Var) -> Var {
    let dh = *g.value(q).shape.last().unwrap();
    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
    g.causal_softmax(scaled)
}

/// Energy gate over per-head token slices: project, z-normalize causally
/// (each position against its own prefix statistics), squash. Returns
/// `[B, H, T]` gates in (0, 1).
pub fn ega_gate<F: Real>(
    g: &mut Graph<F>,
    x_heads: Var,
    w_proj: Var,
    alpha: Var,
    tau: Var,
) -> Var {
    let t = g.value(x_heads).shape[2];
    assert!(t >= 2, "energy gate needs sequence length >= 2");
    let e = g.head_dot(x_heads, w_proj);
    let z = g.znorm_prefix(e);
    g.gate_sigmoid(z, alpha, tau)
}

/// Gate-reweight attention rows and renormalize; masked entries stay zero.
pub fn ega_renormalize<F: Real>(g: &mut Graph<F>, attn: Var, gate: Var) -> Var {
    g.gate_renorm(attn, gate)
}

/// Lag-mixture (convolution) attention: scores are a softmax(λ)-weighted
/// mixture of token-shifted query-key products, causally masked, then
/// softmaxed per row and applied to values.
pub fn conv_attention<F: Real>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    lambda: Var,
    l_max: usize,
) -> Var {
    let w = g.softmax(lambda);
    let scores = g.conv_scores(q, k, w, l_max);
    let a = g.causal_softmax(scores);
    g.matmul(a, v)
}

/// Multi-quantity gate: a learned mixer maps precomputed causal spectral
/// features `[B, T, n_feat]` to one scalar per token, which then runs the
/// same causal z-normalize/sigmoid pipeline as the energy gate. One gate per
/// layer, shared by all heads (`[B, 1, T]`).
pub fn mq_gate<F: Real>(
    g: &mut Graph<F>,
    features: Var,
    mixer_w: Var,
    mixer_b: Var,
    alpha: Var,
    tau: Var,
) -> Var {
    let sh = g.value(features).shape.clone();
    assert_eq!(sh.len(), 3, "mq features must be [B,T,n_feat]");
    let (b, t, nf) = (sh[0], sh[1], sh[2]);
    assert!(nf > 0, "empty feature set");
    let flat = g.reshape(features, vec![b * t, nf]);
    let mixed = g.linear(flat, mixer_w, mixer_b);
    let z_in = g.reshape(mixed, vec![b, 1, t]);
    let z = g.znorm_prefix(z_in);
    g.gate_sigmoid(z, alpha, tau)
}

/// Gabor-like bandpass rows for one head's query/key projection: center
/// frequency geometric in the head index from 0.1 to 0.9π, envelope centered
/// at a random input position, rescaled so each row's empirical standard
/// deviation is exactly 0.02.
pub fn scale_init_head_rows<F: Real>(
    head: usize,
    num_heads: usize,
    d_model: usize,
    d_head: usize,
    rng: &mut SplitMix64,
) -> Vec<Vec<F>> {
    let f_lo = 0.1;
    let f_hi = std::f64::consts::PI * 0.9;
    let freq = if num_heads >= 2 {
        f_lo * (f_hi / f_lo).powf(head as f64 / (num_heads as f64 - 1.0))
    } else {
        (f_lo * f_hi).sqrt() // single head: mid-band
    };
    let envelope_width = d_model as f64 / 4.0;
    let mut rows = Vec::with_capacity(d_head);
    for _ in 0..d_head {
        let phase = rng.next_f64() * std::f64::consts::TAU;
        let center = rng.next_f64() * d_model as f64;
        let mut row: Vec<f64> = (0..d_model)
            .map(|j| {
                let jf = j as f64;
                (freq * jf + phase).cos()
                    * (-(jf - center) * (jf - center) / (2.0 * envelope_width * envelope_width))
                        .exp()
            })
            .collect();
        let mean = row.iter().sum::<f64>() / d_model as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d_model as f64;
        let scale = 0.02 / var.sqrt().max(1e-12);
        for x in row.iter_mut() {
            *x = (*x - mean) * scale;
        }
        rows.push(row.into_iter().map(real).collect());
    }
    rows
}

/// Full `[d_model, d_model]` projection matrix with every head's output
/// columns initialized at its frequency band.
pub fn scale_init_qk_matrix<F: Real>(
    num_heads: usize,
    d_model: usize,
    d_head: usize,
    rng: &mut SplitMix64,
) -> Tensor<F> {
    assert_eq!(num_heads * d_head, d_model);
    let mut w = Tensor::zeros(vec![d_model, d_model]);
    for h in 0..num_heads {
        let rows = scale_init_head_rows::<F>(h, num_heads, d_model, d_head, rng);
        for (r, row) in rows.iter().enumerate() {
            let col = h * d_head + r;
            for (j, &x) in row.iter().enumerate() {
                // output column `col` of x·W is a weight vector over inputs
                w.data[j * d_model + col] = x;
            }
        }
    }
    w
}
