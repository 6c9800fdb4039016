//! Training harness: the variant matrix, deterministic batch streams, the
//! optimization loop, and the ablation driver.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::attention::MqFeatureSpec;
use crate::model::{
    build_params, forward_loss, AttnKind, Bound, CharVocab, GateKind, ModelConfig,
};
use crate::optim::{clip_global_norm, cosine_lr, AdamW, AdamWConfig, ParamSet};
use crate::pe::{mope_project_admissible, PeKind};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Real};

/// The ablation matrix, in canonical order. BASE-DOT is the reference run.
pub const VARIANTS: [&str; 12] = [
    "BASE-DOT", "CONV-L4", "CONV-L8", "PE-SINCOS", "PE-ROPE", "PE-MORLET",
    "EGA-1", "EGA-MORLET", "SCALE-INIT", "MQ-E", "MQ-EP", "MQ-EF",
];

/// Maps a variant name onto the baseline configuration.
pub fn variant_config(name: &str, base: &ModelConfig) -> Result<ModelConfig> {
    let mut cfg = *base;
    cfg.pe = PeKind::Learned;
    cfg.attn = AttnKind::Dot;
    cfg.gate = GateKind::None;
    cfg.scale_init = false;
    match name {
        "BASE-DOT" => {}
        "CONV-L4" => cfg.attn = AttnKind::Conv { l_max: 4 },
        "CONV-L8" => cfg.attn = AttnKind::Conv { l_max: 8 },
        "PE-SINCOS" => cfg.pe = PeKind::SinCos,
        "PE-ROPE" => cfg.pe = PeKind::Rope,
        "PE-MORLET" => cfg.pe = PeKind::Mope,
        "EGA-1" => cfg.gate = GateKind::Ega,
        "EGA-MORLET" => {
            cfg.pe = PeKind::Mope;
            cfg.gate = GateKind::Ega;
        }
        "SCALE-INIT" => cfg.scale_init = true,
        "MQ-E" => cfg.gate = GateKind::Mq(MqFeatureSpec::energy_only()),
        "MQ-EP" => cfg.gate = GateKind::Mq(MqFeatureSpec::energy_phase()),
        "MQ-EF" => cfg.gate = GateKind::Mq(MqFeatureSpec::energy_flux()),
        other => bail!("unknown variant {other}"),
    }
    Ok(cfg)
}

/// Optimization-side knobs, separate from model shape.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub train_frac: f64,
    pub seed: u64,
}

/// Small model shape that trains on one core in minutes.
pub fn desk_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        seq_len: 128,
        vocab_size,
        pe: PeKind::Learned,
        attn: AttnKind::Dot,
        gate: GateKind::None,
        scale_init: false,
    }
}

/// Full-size model shape.
pub fn paper_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 6,
        n_heads: 8,
        d_model: 256,
        seq_len: 256,
        vocab_size,
        pe: PeKind::Learned,
        attn: AttnKind::Dot,
        gate: GateKind::None,
        scale_init: false,
    }
}

pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 2000,
        batch_size: 32,
        lr_peak: 3e-4,
        lr_floor: 0.0,
        grad_clip: 1.0,
        eval_every: 250,
        eval_batches: 20,
        train_frac: 0.9,
        seed,
    }
}

pub fn full_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 5000,
        batch_size: 64,
        ..desk_train_config(seed)
    }
}

/// Optional overrides loaded from a JSON config file. Unknown keys are
/// rejected so typos fail loudly instead of silently training the default.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub seq_len: Option<usize>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_peak: Option<f64>,
    pub lr_floor: Option<f64>,
    pub grad_clip: Option<f64>,
    pub eval_every: Option<usize>,
    pub eval_batches: Option<usize>,
    pub train_frac: Option<f64>,
    pub seed: Option<u64>,
}

impl ConfigFile {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn apply(&self, mc: &mut ModelConfig, tc: &mut TrainConfig) {
        macro_rules! ov {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        ov!(mc.n_layers, self.n_layers);
        ov!(mc.n_heads, self.n_heads);
        ov!(mc.d_model, self.d_model);
        ov!(mc.seq_len, self.seq_len);
        ov!(tc.steps, self.steps);
        ov!(tc.batch_size, self.batch_size);
        ov!(tc.lr_peak, self.lr_peak);
        ov!(tc.lr_floor, self.lr_floor);
        ov!(tc.grad_clip, self.grad_clip);
        ov!(tc.eval_every, self.eval_every);
        ov!(tc.eval_batches, self.eval_batches);
        ov!(tc.train_frac, self.train_frac);
        ov!(tc.seed, self.seed);
    }
}

/// One `[b, t]` batch of inputs with next-character targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub b: usize,
    pub t: usize,
}

/// Draws a batch of uniform random crops. Consuming the stream with the
/// same seed yields the identical sequence of batches regardless of which
/// model sits on top.
pub fn draw_batch(data: &[usize], b: usize, t: usize, rng: &mut SplitMix64) -> Batch {
    assert!(data.len() > t + 1, "split too small for sequence length {t}");
    let mut inputs = Vec::with_capacity(b * t);
    let mut targets = Vec::with_capacity(b * t);
    for _ in 0..b {
        let start = rng.next_below(data.len() - t - 1);
        inputs.extend_from_slice(&data[start..start + t]);
        targets.extend_from_slice(&data[start + 1..start + t + 1]);
    }
    Batch { inputs, targets, b, t }
}

/// The fixed validation set: `n` batches drawn from a seed-derived stream,
/// reused at every evaluation point.
pub fn fixed_val_batches(
    data: &[usize],
    b: usize,
    t: usize,
    n: usize,
    seed: u64,
) -> Vec<Batch> {
    // offset keeps the validation stream disjoint from the training stream
    let mut rng = SplitMix64::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n).map(|_| draw_batch(data, b, t, &mut rng)).collect()
}

/// Point-in-time training measurements for one step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
    pub gate_mean: Option<f64>,
}

/// Everything a finished run reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: String,
    pub records: Vec<StepRecord>,
    pub final_val_loss: f64,
    pub param_count: usize,
}

/// Mean validation loss over the fixed batches.
pub fn evaluate<F: Real>(
    cfg: &ModelConfig,
    ps: &ParamSet<F>,
    batches: &[Batch],
) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches {
        let mut g: Graph<F> = Graph::new();
        let bound = Bound::bind(&mut g, ps);
        let (loss, _) =
            forward_loss(&mut g, cfg, &bound, &batch.inputs, &batch.targets, batch.b, batch.t);
        let l = g.value(loss).item().to_f64();
        if !l.is_finite() {
            bail!("validation loss diverged (non-finite)");
        }
        total += l;
    }
    Ok(total / batches.len() as f64)
}

/// Trains one variant from scratch. The batch stream depends only on
/// `tc.seed`, so two variants trained with the same seed see byte-identical
/// data order. Returns the trace and leaves the final parameters in `ps`.
pub fn train_variant<F: Real>(
    variant: &str,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train_ids: &[usize],
    val_ids: &[usize],
    ps: &mut ParamSet<F>,
    mut on_eval: impl FnMut(&StepRecord),
) -> Result<RunMetrics> {
    let t = cfg.seq_len;
    let mut batch_rng = SplitMix64::new(tc.seed);
    let val_batches = fixed_val_batches(val_ids, tc.batch_size, t, tc.eval_batches, tc.seed);
    let mut opt = AdamW::new(ps, AdamWConfig::default());
    let mut records = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let batch = draw_batch(train_ids, tc.batch_size, t, &mut batch_rng);
        let mut g: Graph<F> = Graph::new();
        let bound = Bound::bind(&mut g, ps);
        let (loss, fwd) =
            forward_loss(&mut g, cfg, &bound, &batch.inputs, &batch.targets, batch.b, batch.t);
        let train_loss = g.value(loss).item().to_f64();
        if !train_loss.is_finite() {
            bail!("training diverged at step {step} (loss {train_loss})");
        }
        let gate_mean = if fwd.gates.is_empty() {
            None
        } else {
            let (mut s, mut n) = (0.0, 0usize);
            for &gv in &fwd.gates {
                let t = g.value(gv);
                s += t.data.iter().map(|&x| x.to_f64()).sum::<f64>();
                n += t.numel();
            }
            Some(s / n as f64)
        };
        g.backward(loss)
            .with_context(|| format!("backward failed at step {step}"))?;
        let mut grads = bound.grads(&g);
        drop(g);
        let grad_norm = clip_global_norm(&mut grads, tc.grad_clip);
        if !grad_norm.is_finite() {
            bail!("gradient norm diverged at step {step}");
        }
        let lr = cosine_lr(step, tc.steps, tc.lr_peak, tc.lr_floor);
        opt.step(ps, &grads, lr);
        if cfg.pe == PeKind::Mope {
            // keep every wave admissible after the unconstrained update
            let lo = ps.get("mope.log_omega").clone();
            mope_project_admissible(&lo, ps.get_mut("mope.log_sigma"));
        }

        let at_eval = (step + 1) % tc.eval_every == 0 || step + 1 == tc.steps;
        let val_loss = if at_eval {
            Some(evaluate(cfg, ps, &val_batches)?)
        } else {
            None
        };
        let rec = StepRecord { step, lr, train_loss, grad_norm, val_loss, gate_mean };
        if at_eval {
            on_eval(&rec);
        }
        records.push(rec);
    }

    let final_val_loss = evaluate(cfg, ps, &val_batches)?;
    Ok(RunMetrics {
        variant: variant.to_string(),
        records,
        final_val_loss,
        param_count: ps.total_params(),
    })
}

/// One row of the ablation summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub final_val_loss: Option<f64>,
    /// Improvement over BASE-DOT in nats (positive is better).
    pub delta_vs_base: Option<f64>,
    pub param_count: usize,
    pub failed: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    /// Δ(EGA-MORLET) − Δ(EGA-1) − Δ(PE-MORLET): positive means the combined
    /// variant beats the sum of its parts.
    pub superadditivity: Option<f64>,
    pub seed: u64,
}

impl AblationSummary {
    pub fn delta(&self, variant: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.failed.is_none())
            .and_then(|r| r.delta_vs_base)
    }
}

/// Runs the requested variants over identical batch streams and summarizes
/// against BASE-DOT. A diverged run is recorded as failed without sinking
/// the rest of the matrix.
pub fn run_ablation<F: Real>(
    variants: &[&str],
    base: &ModelConfig,
    tc: &TrainConfig,
    train_ids: &[usize],
    val_ids: &[usize],
    mut on_progress: impl FnMut(&str, &StepRecord),
) -> Result<AblationSummary> {
    let mut results = Vec::new();
    for &name in variants {
        let cfg = variant_config(name, base)?;
        let mut ps: ParamSet<F> = build_params(&cfg, tc.seed);
        let outcome = train_variant(name, &cfg, tc, train_ids, val_ids, &mut ps, |r| {
            on_progress(name, r)
        });
        results.push((name.to_string(), crate::model::param_count(&cfg), outcome));
    }
    Ok(assemble_summary(results, tc.seed))
}

/// Turns per-variant outcomes into the delta table and the
/// superadditivity measurement.
pub fn assemble_summary(
    results: Vec<(String, usize, Result<RunMetrics>)>,
    seed: u64,
) -> AblationSummary {
    let mut rows: Vec<AblationRow> = results
        .into_iter()
        .map(|(name, pc, outcome)| match outcome {
            Ok(m) => AblationRow {
                variant: name,
                final_val_loss: Some(m.final_val_loss),
                delta_vs_base: None,
                param_count: m.param_count,
                failed: None,
            },
            Err(e) => AblationRow {
                variant: name,
                final_val_loss: None,
                delta_vs_base: None,
                param_count: pc,
                failed: Some(format!("{e:#}")),
            },
        })
        .collect();
    let base_loss = rows
        .iter()
        .find(|r| r.variant == "BASE-DOT" && r.failed.is_none())
        .and_then(|r| r.final_val_loss);
    if let Some(bl) = base_loss {
        for r in rows.iter_mut() {
            if let Some(v) = r.final_val_loss {
                r.delta_vs_base = Some(bl - v);
            }
        }
    }
    let summary = AblationSummary { rows, superadditivity: None, seed };
    let supe = match (
        summary.delta("EGA-MORLET"),
        summary.delta("EGA-1"),
        summary.delta("PE-MORLET"),
    ) {
        (Some(a), Some(b), Some(c)) => Some(a - b - c),
        _ => None,
    };
    AblationSummary { superadditivity: supe, ..summary }
}

/// Encode a corpus into ids and split train/val.
pub fn prepare_ids(text: &str, vocab: &CharVocab, train_frac: f64) -> (Vec<usize>, Vec<usize>) {
    let ids = vocab.encode(text).expect("corpus outside vocabulary");
    let cut = (ids.len() as f64 * train_frac) as usize;
    let (a, b) = ids.split_at(cut);
    (a.to_vec(), b.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_corpus;

    #[test]
    fn every_variant_name_maps_to_a_config() {
        let base = desk_model_config(65);
        for name in VARIANTS {
            let cfg = variant_config(name, &base).unwrap();
            assert_eq!(cfg.vocab_size, 65);
        }
        assert!(variant_config("NOPE", &base).is_err());
    }

    #[test]
    fn variant_matrix_is_twelve_distinct_configs() {
        let base = desk_model_config(65);
        let cfgs: Vec<ModelConfig> =
            VARIANTS.iter().map(|n| variant_config(n, &base).unwrap()).collect();
        for i in 0..cfgs.len() {
            for j in i + 1..cfgs.len() {
                assert_ne!(cfgs[i], cfgs[j], "{} and {}", VARIANTS[i], VARIANTS[j]);
            }
        }
    }

    #[test]
    fn batch_stream_is_seed_deterministic() {
        let data: Vec<usize> = (0..5000).map(|i| i % 60).collect();
        let mut r1 = SplitMix64::new(42);
        let mut r2 = SplitMix64::new(42);
        for _ in 0..10 {
            assert_eq!(draw_batch(&data, 4, 32, &mut r1), draw_batch(&data, 4, 32, &mut r2));
        }
        let mut r3 = SplitMix64::new(43);
        assert_ne!(draw_batch(&data, 4, 32, &mut r1), draw_batch(&data, 4, 32, &mut r3));
    }

    #[test]
    fn targets_are_inputs_shifted_by_one() {
        let data: Vec<usize> = (0..500).collect();
        let mut rng = SplitMix64::new(1);
        let b = draw_batch(&data, 2, 16, &mut rng);
        for row in 0..b.b {
            for i in 0..b.t {
                assert_eq!(b.targets[row * b.t + i], b.inputs[row * b.t + i] + 1);
            }
        }
    }

    #[test]
    fn val_batches_are_fixed_across_calls() {
        let data: Vec<usize> = (0..5000).map(|i| (i * 7) % 60).collect();
        let a = fixed_val_batches(&data, 2, 16, 5, 9);
        let b = fixed_val_batches(&data, 2, 16, 5, 9);
        assert_eq!(a, b);
    }

    fn micro_setup() -> (ModelConfig, TrainConfig, Vec<usize>, Vec<usize>) {
        let text = synthetic_corpus(30_000, 3);
        let vocab = CharVocab::from_text(&text);
        let mut cfg = desk_model_config(vocab.len());
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_model = 16;
        cfg.seq_len = 24;
        let tc = TrainConfig {
            steps: 12,
            batch_size: 4,
            lr_peak: 1e-3,
            lr_floor: 0.0,
            grad_clip: 1.0,
            eval_every: 6,
            eval_batches: 2,
            train_frac: 0.9,
            seed: 5,
        };
        let (tr, va) = prepare_ids(&text, &vocab, tc.train_frac);
        (cfg, tc, tr, va)
    }

    #[test]
    fn micro_training_reduces_loss_deterministically() {
        let (cfg, tc, tr, va) = micro_setup();
        let run = || {
            let mut ps: ParamSet<f32> = build_params(&cfg, tc.seed);
            train_variant("BASE-DOT", &cfg, &tc, &tr, &va, &mut ps, |_| {}).unwrap()
        };
        let m1 = run();
        let m2 = run();
        assert_eq!(m1.final_val_loss, m2.final_val_loss, "training not deterministic");
        let first = m1.records.first().unwrap().train_loss;
        let last = m1.records.last().unwrap().train_loss;
        assert!(last < first, "loss did not move: {first} -> {last}");
    }

    #[test]
    fn mope_training_keeps_admissibility() {
        let (mut cfg, mut tc, tr, va) = micro_setup();
        cfg.pe = PeKind::Mope;
        tc.steps = 8;
        let mut ps: ParamSet<f32> = build_params(&cfg, tc.seed);
        train_variant("PE-MORLET", &cfg, &tc, &tr, &va, &mut ps, |_| {}).unwrap();
        let lo = ps.get("mope.log_omega");
        let ls = ps.get("mope.log_sigma");
        for (o, s) in lo.data.iter().zip(&ls.data) {
            let prod = (o.to_f64() + s.to_f64()).exp();
            assert!(prod >= 5.0 - 1e-4, "admissibility violated: {prod}");
        }
    }
}
