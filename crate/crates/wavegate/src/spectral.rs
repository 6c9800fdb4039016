//! Morlet wavelet analysis: the continuous wavelet transform, its causal
//! variant used for online gate features, layer-cascade energy profiles,
//! and gate/energy diagnostics.

use num_complex::Complex64;

use crate::attention::MqFeatureSpec;
use crate::tensor::{real, Real, Tensor};

/// Carrier frequency of the analysis wavelet.
pub const OMEGA0: f64 = 5.0;

/// Support truncation in mother-wavelet units.
pub const SUPPORT: f64 = 4.0;

/// Number of analysis scales.
pub const N_SCALES: usize = 16;

/// Channels sampled from the model width when building gate features.
pub const MQ_CHANNELS: usize = 8;

/// Complex Morlet mother wavelet at argument `u`, zero outside the
/// truncation support.
pub fn morlet(u: f64) -> Complex64 {
    if u.abs() > SUPPORT {
        return Complex64::new(0.0, 0.0);
    }
    let norm = std::f64::consts::PI.powf(-0.25);
    let env = (-0.5 * u * u).exp();
    Complex64::new(0.0, OMEGA0 * u).exp() * (norm * env)
}

/// Geometric scale ladder from `lo` to `hi` inclusive.
pub fn geometric_scales(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    assert!(n >= 2 && lo > 0.0 && hi > lo);
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Default ladder for a length-`t` sequence: [2, t/2].
pub fn default_scales(t: usize) -> Vec<f64> {
    geometric_scales(N_SCALES, 2.0, t as f64 / 2.0)
}

/// Continuous wavelet transform of a real signal. Output is
/// `[scales][time]`; coefficient (s, b) integrates the signal against the
/// conjugate wavelet centered at b with width s, 1/√s normalized.
pub fn morlet_cwt(signal: &[f64], scales: &[f64]) -> Vec<Vec<Complex64>> {
    let t = signal.len();
    scales
        .iter()
        .map(|&s| {
            let half = (SUPPORT * s).ceil() as isize;
            let inv_sqrt_s = 1.0 / s.sqrt();
            (0..t as isize)
                .map(|b| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    let lo = (b - half).max(0);
                    let hi = (b + half).min(t as isize - 1);
                    for u in lo..=hi {
                        let w = morlet((u - b) as f64 / s).conj();
                        acc += w * signal[u as usize];
                    }
                    acc * inv_sqrt_s
                })
                .collect()
        })
        .collect()
}

/// Causal transform: only samples at or before the center contribute, and
/// the truncated window is renormalized to unit energy so early positions
/// are comparable to late ones.
pub fn causal_morlet_cwt(signal: &[f64], scales: &[f64]) -> Vec<Vec<Complex64>> {
    let t = signal.len();
    scales
        .iter()
        .map(|&s| {
            let half = (SUPPORT * s).ceil() as usize;
            // conj(psi(-o/s)) for offsets o = 0..=half, and cumulative
            // window energy, precomputed once per scale
            let win: Vec<Complex64> =
                (0..=half).map(|o| morlet(-(o as f64) / s).conj()).collect();
            let cum_energy: Vec<f64> = win
                .iter()
                .scan(0.0, |acc, w| {
                    *acc += w.norm_sqr();
                    Some(*acc)
                })
                .collect();
            (0..t)
                .map(|b| {
                    let m = half.min(b);
                    let mut acc = Complex64::new(0.0, 0.0);
                    for o in 0..=m {
                        acc += win[o] * signal[b - o];
                    }
                    let energy = cum_energy[m];
                    if energy > 0.0 {
                        acc / energy.sqrt()
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Total spectral energy per scale for one signal, Kahan-summed over time.
pub fn scale_energy(cwt: &[Vec<Complex64>]) -> Vec<f64> {
    cwt.iter()
        .map(|row| {
            let mut sum = 0.0;
            let mut c = 0.0;
            for z in row {
                let y = z.norm_sqr() - c;
                let t = sum + y;
                c = (t - sum) - y;
                sum = t;
            }
            sum
        })
        .collect()
}

/// Energy-per-scale profile across a cascade of representations (one signal
/// per stage, for instance one hidden channel per layer). Output is
/// `[stages][scales]`.
pub fn cascade_profile(stages: &[Vec<f64>], scales: &[f64]) -> Vec<Vec<f64>> {
    stages
        .iter()
        .map(|sig| scale_energy(&morlet_cwt(sig, scales)))
        .collect()
}

/// Per-token gate features from a `[B, T, d]` activation tensor: spectral
/// energy, instantaneous phase cosine at the dominant scale, and energy
/// flux. Channels are an even stride through the width; everything is
/// causal so position t only sees positions ≤ t.
pub fn mq_features<F: Real>(x: &Tensor<F>, spec: MqFeatureSpec) -> Tensor<F> {
    assert_eq!(x.ndim(), 3, "mq_features expects [B,T,d]");
    let (b, t, d) = (x.shape[0], x.shape[1], x.shape[2]);
    let nf = spec.n_features();
    let n_ch = MQ_CHANNELS.min(d);
    let scales = default_scales(t);
    let mut out = Tensor::zeros(vec![b, t, nf]);
    for bi in 0..b {
        let mut energy = vec![0.0f64; t];
        let mut phase = vec![0.0f64; t];
        for ci in 0..n_ch {
            let ch = ci * d / n_ch;
            let sig: Vec<f64> =
                (0..t).map(|ti| x.data[(bi * t + ti) * d + ch].to_f64()).collect();
            let cwt = causal_morlet_cwt(&sig, &scales);
            for ti in 0..t {
                let mut e = 0.0;
                let mut best = 0usize;
                let mut best_e = -1.0;
                for (si, row) in cwt.iter().enumerate() {
                    let p = row[ti].norm();
                    e += p;
                    if p > best_e {
                        best_e = p;
                        best = si;
                    }
                }
                energy[ti] += e;
                phase[ti] += cwt[best][ti].arg().cos();
            }
        }
        for ti in 0..t {
            energy[ti] /= (n_ch * scales.len()) as f64;
            phase[ti] /= n_ch as f64;
        }
        for ti in 0..t {
            let mut fi = 0;
            let base = (bi * t + ti) * nf;
            if spec.use_energy {
                out.data[base + fi] = real(energy[ti]);
                fi += 1;
            }
            if spec.use_phase {
                out.data[base + fi] = real(phase[ti]);
                fi += 1;
            }
            if spec.use_flux {
                let flux = if ti == 0 { 0.0 } else { (energy[ti] - energy[ti - 1]).abs() };
                out.data[base + fi] = real(flux);
            }
        }
    }
    out
}

/// Pearson correlation, `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va < 1e-24 || vb < 1e-24 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Per-head correlation between gate values and local spectral energy of
/// the gated representation. `gates` is `[H][T]`, `energy` is `[T]`.
pub fn gate_energy_correlation(gates: &[Vec<f64>], energy: &[f64]) -> Vec<Option<f64>> {
    gates.iter().map(|g| pearson(g, energy)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(t: usize, freq: f64) -> Vec<f64> {
        (0..t).map(|i| (freq * i as f64).cos()).collect()
    }

    #[test]
    fn transform_is_linear() {
        let t = 96;
        let x = tone(t, 0.5);
        let y: Vec<f64> = (0..t).map(|i| ((i * i) % 17) as f64 / 17.0 - 0.5).collect();
        let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let scales = default_scales(t);
        let cx = morlet_cwt(&x, &scales);
        let cy = morlet_cwt(&y, &scales);
        let cz = morlet_cwt(&z, &scales);
        for s in 0..scales.len() {
            for i in 0..t {
                let want = 2.0 * cx[s][i] - 3.0 * cy[s][i];
                assert!((cz[s][i] - want).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn pure_tone_peaks_at_matching_scale() {
        // peak response at scale s where omega0 / s == tone frequency
        let t = 256;
        let freq = 0.7;
        let x = tone(t, freq);
        let scales = geometric_scales(32, 2.0, 40.0);
        let cwt = morlet_cwt(&x, &scales);
        // interior column, away from edge effects
        let mid = t / 2;
        let argmax = (0..scales.len())
            .max_by(|&a, &b| {
                cwt[a][mid].norm().partial_cmp(&cwt[b][mid].norm()).unwrap()
            })
            .unwrap();
        let expected = OMEGA0 / freq;
        let got = scales[argmax];
        assert!(
            (got / expected).ln().abs() < 0.2,
            "peak scale {got:.2}, expected near {expected:.2}"
        );
    }

    #[test]
    fn causal_transform_ignores_the_future() {
        let t = 64;
        let mut a = tone(t, 0.4);
        let mut b = a.clone();
        let p = 40;
        b[p + 1] += 10.0; // perturb strictly after p
        b[t - 1] -= 3.0;
        a[p + 1] += 0.0;
        let scales = default_scales(t);
        let ca = causal_morlet_cwt(&a, &scales);
        let cb = causal_morlet_cwt(&b, &scales);
        for s in 0..scales.len() {
            for i in 0..=p {
                assert!(
                    (ca[s][i] - cb[s][i]).norm() < 1e-12,
                    "future leaked into position {i} at scale {s}"
                );
            }
        }
    }

    #[test]
    fn causal_features_are_causal() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(3);
        let (b, t, d) = (1, 32, 8);
        let base = Tensor::<f64>::randn(vec![b, t, d], 1.0, &mut rng);
        let mut pert = base.clone();
        let p = 20;
        for ch in 0..d {
            pert.data[(p + 1) * d + ch] += 5.0;
        }
        let spec = MqFeatureSpec { use_energy: true, use_phase: true, use_flux: true };
        let fa = mq_features(&base, spec);
        let fb = mq_features(&pert, spec);
        for ti in 0..=p {
            for f in 0..3 {
                assert!((fa.data[ti * 3 + f] - fb.data[ti * 3 + f]).abs() < 1e-12);
            }
        }
        // and the perturbation is visible after p
        let changed = (p + 1..t)
            .any(|ti| (fa.data[ti * 3] - fb.data[ti * 3]).abs() > 1e-6);
        assert!(changed);
    }

    #[test]
    fn flux_flags_a_regime_change() {
        // quiet signal switches to a loud tone at p: the largest energy jump
        // should land within a couple of samples of the boundary
        let t = 128;
        let p = 64;
        let x: Vec<f64> = (0..t)
            .map(|i| if i < p { 0.01 * ((i % 7) as f64 - 3.0) } else { (0.8 * i as f64).cos() * 2.0 })
            .collect();
        let tensor = Tensor::new(vec![1, t, 1], x);
        let spec = MqFeatureSpec { use_energy: true, use_phase: false, use_flux: true };
        let f = mq_features(&tensor, spec);
        let argmax = (1..t)
            .max_by(|&a, &b| f.data[a * 2 + 1].partial_cmp(&f.data[b * 2 + 1]).unwrap())
            .unwrap();
        assert!(
            (p..=p + 2).contains(&argmax),
            "energy flux peaked at {argmax}, expected in [{p}, {}]",
            p + 2
        );
    }

    #[test]
    fn first_position_flux_is_zero() {
        let x = Tensor::new(vec![1, 16, 1], (0..16).map(|i| i as f64).collect());
        let spec = MqFeatureSpec { use_energy: true, use_phase: false, use_flux: true };
        let f = mq_features(&x, spec);
        assert_eq!(f.data[1], 0.0);
    }

    #[test]
    fn cascade_profile_shape_and_positivity() {
        let scales = default_scales(64);
        let stages: Vec<Vec<f64>> = (0..3).map(|k| tone(64, 0.2 * (k + 1) as f64)).collect();
        let prof = cascade_profile(&stages, &scales);
        assert_eq!(prof.len(), 3);
        assert!(prof.iter().all(|row| row.len() == scales.len()));
        assert!(prof.iter().flatten().all(|&e| e >= 0.0));
    }

    #[test]
    fn pearson_perfect_and_degenerate() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [-1.0, -2.0, -3.0, -4.0];
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        let flat = [5.0; 4];
        assert!(pearson(&a, &flat).is_none());
    }

    #[test]
    fn gate_energy_correlation_per_head() {
        let energy = vec![0.1, 0.9, 0.2, 0.8, 0.3, 0.7];
        let gates = vec![energy.clone(), vec![0.5; 6]];
        let r = gate_energy_correlation(&gates, &energy);
        assert!((r[0].unwrap() - 1.0).abs() < 1e-12);
        assert!(r[1].is_none());
    }

    #[test]
    fn wavelet_truncation_and_admissibility() {
        assert_eq!(morlet(4.5).norm(), 0.0);
        assert!(morlet(0.0).re > 0.0);
        // near-zero mean over the support
        let n = 20_000;
        let mut sum = Complex64::new(0.0, 0.0);
        for i in 0..n {
            let u = -SUPPORT + 2.0 * SUPPORT * i as f64 / (n - 1) as f64;
            sum += morlet(u);
        }
        sum *= 2.0 * SUPPORT / n as f64;
        assert!(sum.norm() < 1e-4, "wavelet mean {sum}");
    }
}
