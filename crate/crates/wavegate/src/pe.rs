//! Positional encodings: fixed sinusoidal, learned-table, rotary, and the
//! Gaussian-windowed wavelet family with learned per-pair frequency and
//! bandwidth.
//!
//! Wavelet-encoding parameters are stored in log space so positivity holds
//! by construction; the product constraint ω·σ ≥ 5 (the admissibility
//! floor keeping each dimension pair a near-zero-mean wavelet) is enforced
//! by projection after each optimizer step.

use serde::{Deserialize, Serialize};

use crate::tensor::{real, Graph, Real, Tensor, Var};

/// Minimum admissible ω·σ product.
pub const ADMISSIBILITY_FLOOR: f64 = 5.0;
/// Rotary base frequency (standard choice).
pub const ROPE_BASE: f64 = 10000.0;
/// Sinusoidal base frequency (standard choice).
pub const SINCOS_BASE: f64 = 10000.0;

/// Which positional encoding a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeKind {
    /// Trainable T×d table added to token embeddings.
    Learned,
    /// Fixed sin/cos table added to token embeddings.
    SinCos,
    /// Rotary rotation of query/key pairs inside each head; nothing added.
    Rope,
    /// Learned Gaussian-windowed wavelets added to token embeddings.
    Mope,
}

/// Per-dimension-pair log frequency and log bandwidth.
#[derive(Clone, Debug)]
pub struct MopeParams<F> {
    pub log_omega: Tensor<F>,
    pub log_sigma: Tensor<F>,
}

impl<F: Real> MopeParams<F> {
    /// Geometric frequency ladder over [1, 0.99π] with bandwidths at the
    /// admissibility minimum: ω_i = exp(i/(d/2−1)·ln(0.99π)), σ_i = 5/ω_i.
    pub fn init(d: usize) -> Self {
        assert!(d >= 4 && d % 2 == 0, "wavelet encoding needs even d >= 4, got {d}");
        let half = d / 2;
        let top = (std::f64::consts::PI * 0.99).ln();
        let mut log_omega = Vec::with_capacity(half);
        let mut log_sigma = Vec::with_capacity(half);
        for i in 0..half {
            let lw = i as f64 / (half as f64 - 1.0) * top;
            log_omega.push(real::<F>(lw));
            log_sigma.push(real::<F>(ADMISSIBILITY_FLOOR.ln() - lw));
        }
        MopeParams {
            log_omega: Tensor::new(vec![half], log_omega),
            log_sigma: Tensor::new(vec![half], log_sigma),
        }
    }

    pub fn from_tensors(log_omega: Tensor<F>, log_sigma: Tensor<F>) -> Self {
        assert_eq!(log_omega.numel(), log_sigma.numel());
        MopeParams { log_omega, log_sigma }
    }

    pub fn half_dims(&self) -> usize {
        self.log_omega.numel()
    }

    pub fn omega(&self, i: usize) -> f64 {
        self.log_omega.data[i].to_f64().exp()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.log_sigma.data[i].to_f64().exp()
    }
}

/// Raise any bandwidth whose ω·σ product fell below the floor back onto it:
/// σ ← 5/ω. Other entries are untouched. Call after each optimizer step.
pub fn mope_project_admissible<F: Real>(log_omega: &Tensor<F>, log_sigma: &mut Tensor<F>) {
    let floor_ln = ADMISSIBILITY_FLOOR.ln();
    for i in 0..log_omega.numel() {
        let lw = log_omega.data[i].to_f64();
        let ls = log_sigma.data[i].to_f64();
        if lw + ls < floor_ln {
            log_sigma.data[i] = real(floor_ln - lw);
        }
    }
}

/// Non-graph evaluation of the wavelet encoding matrix `[t, d]`.
/// Entry (b, 2i) = cos(ω_i b)·exp(−b²/2σ_i²), (b, 2i+1) the sine twin.
pub fn mope_encode_value<F: Real>(params: &MopeParams<F>, t: usize) -> Tensor<F> {
    let mut g: Graph<F> = Graph::new();
    let lo = g.leaf(params.log_omega.clone(), false);
    let ls = g.leaf(params.log_sigma.clone(), false);
    let enc = g.mope_encode(lo, ls, t);
    g.value(enc).clone()
}

/// Differentiable wavelet encoding inside a graph.
pub fn mope_encode_var<F: Real>(
    g: &mut Graph<F>,
    log_omega: Var,
    log_sigma: Var,
    t: usize,
) -> Var {
    g.mope_encode(log_omega, log_sigma, t)
}

/// Fixed sinusoidal table `[t, d]`: (b, 2i) = sin(b/10000^(2i/d)),
/// (b, 2i+1) = cos(b/10000^(2i/d)).
pub fn sincos_encode<F: Real>(t: usize, d: usize) -> Tensor<F> {
    assert!(d % 2 == 0, "sinusoidal encoding needs even d, got {d}");
    let mut out = Tensor::zeros(vec![t, d]);
    for b in 0..t {
        for i in 0..d / 2 {
            let freq = SINCOS_BASE.powf(-(2.0 * i as f64) / d as f64);
            let ang = b as f64 * freq;
            out.data[b * d + 2 * i] = real(ang.sin());
            out.data[b * d + 2 * i + 1] = real(ang.cos());
        }
    }
    out
}

/// Plane rotation used by the rotary encoding: (x, y) rotated by `angle`.
pub fn rotate_pair(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (x * c - y * s, x * s + y * c)
}

/// Theoretical lag-domain kernel of a wavelet encoding pair:
/// exp(−τ²/4σ²)·cos(ωτ). Used as a verification oracle against the
/// empirical autocorrelation of encoding columns.
pub fn mope_lag_kernel(tau: f64, omega: f64, sigma: f64) -> f64 {
    assert!(sigma > 0.0, "lag kernel needs positive bandwidth");
    (-tau * tau / (4.0 * sigma * sigma)).exp() * (omega * tau).cos()
}
