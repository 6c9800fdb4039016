//! Parameter storage, AdamW, cosine schedule, and gradient clipping.

use std::collections::HashMap;

use crate::tensor::{real, Real, Tensor};

/// Named, ordered collection of trainable tensors. Order is insertion order
/// and is what the optimizer state, checkpoints, and gradient vectors align
/// with.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn map_precision<G: Real>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, t.map(|x| real::<G>(x.to_f64())));
        }
        out
    }
}

/// Whether weight decay applies: matrices and embeddings decay, vectors
/// (biases, norms, gains, log-frequencies, gate scalars) do not.
pub fn decays(t: &Tensor<impl Real>) -> bool {
    t.ndim() >= 2
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are zero-initialized and the
/// step counter advances by exactly one per `step`.
pub struct AdamW<F> {
    cfg: AdamWConfig,
    first_moment: Vec<Vec<F>>,
    second_moment: Vec<Vec<F>>,
    step_count: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ParamSet<F>, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            first_moment: params.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect(),
            second_moment: params.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over the full parameter set. `grads[i]` aligns with the
    /// i-th parameter; `None` means unreachable this step (zero gradient,
    /// decay still applies).
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Option<Tensor<F>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        assert!(lr > 0.0, "learning rate must be positive");
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1: F = real(self.cfg.beta1);
        let b2: F = real(self.cfg.beta2);
        let eps: F = real(self.cfg.eps);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        let lr_f: F = real(lr);
        let decay_mul: F = real(1.0 - lr * self.cfg.weight_decay);

        for (i, (_, p)) in params.iter_mut().enumerate() {
            if let Some(g) = &grads[i] {
                assert_eq!(g.shape, p.shape, "gradient shape mismatch at param {i}");
            }
            let apply_decay = decays(p);
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.numel() {
                let gj = grads[i].as_ref().map_or(F::zero(), |g| g.data[j]);
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if apply_decay {
                    p.data[j] = p.data[j] * decay_mul;
                }
                p.data[j] = p.data[j] - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Half-cosine decay from `peak` to `floor` over `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64, floor: f64) -> f64 {
    assert!(step <= total_steps, "step {step} out of range (total {total_steps})");
    assert!(peak >= floor && floor >= 0.0, "need peak >= floor >= 0");
    let frac = step as f64 / total_steps as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for &x in &g.data {
            sq += x.to_f64() * x.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s: F = real(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data.iter_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}
