//! Command-line surface: dataset handling, single-variant training, the
//! ablation matrix, and checkpoint analysis.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use wavegate::data;
use wavegate::model::{
    build_params, forward, greedy_generate, load_checkpoint, param_count, save_checkpoint,
    Bound, CharVocab, GateKind, ModelConfig,
};
use wavegate::optim::ParamSet;
use wavegate::pe::MopeParams;
use wavegate::report;
use wavegate::spectral::{
    causal_morlet_cwt, default_scales, gate_energy_correlation, mq_features, scale_energy,
    MQ_CHANNELS,
};
use wavegate::attention::MqFeatureSpec;
use wavegate::tensor::Graph;
use wavegate::train::{
    assemble_summary, desk_model_config, desk_train_config, full_train_config,
    paper_model_config, prepare_ids, train_variant, variant_config, ConfigFile, StepRecord,
    TrainConfig, VARIANTS,
};

#[derive(Parser)]
#[command(name = "wavegate", version, about = "character transformer training lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify a local corpus file, or generate the built-in synthetic one.
    Data {
        /// Local corpus file to verify and install.
        path: Option<PathBuf>,
        /// Generate the deterministic synthetic corpus instead of reading a file.
        #[arg(long)]
        synth: bool,
        /// Accept the file even if validation fails.
        #[arg(long)]
        force: bool,
        /// Where to put the verified corpus.
        #[arg(long, default_value = "data/corpus.txt")]
        out: PathBuf,
        /// Seed for the synthetic generator.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a single variant and write its run directory.
    Train {
        /// JSON file overriding model or optimization settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: String,
        /// desk (small, minutes) or paper (full size).
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory (default runs/<timestamp>-<variant>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corpus path (falls back to WAVEGATE_DATA_DIR, then data/corpus.txt).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train many variants over identical batch streams and summarize.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// "all" or a comma-separated subset of variant names.
        #[arg(long, default_value = "all")]
        variants: String,
        /// Independent runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Inspect a trained checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// cascade, mope-params, or gate-corr.
        #[arg(long)]
        what: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Greedy-sample a few characters from a checkpoint (smoke check).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "The ")]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        length: usize,
    },
}

/// A failure that is the caller's fault (bad flags, bad names): exit 2.
struct UsageError(String);

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e.0)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Data { path, synth, force, out, seed } => cmd_data(path, synth, force, &out, seed),
        Cmd::Train { config, variant, scale, seed, out, data } => {
            cmd_train(config, &variant, &scale, seed, out, data)
        }
        Cmd::Ablate { config, scale, seed, variants, jobs, out, data } => {
            cmd_ablate(config, &scale, seed, &variants, jobs, out, data)
        }
        Cmd::Analyze { checkpoint, what, out, data } => cmd_analyze(&checkpoint, &what, out, data),
        Cmd::Sample { checkpoint, prompt, length } => cmd_sample(&checkpoint, &prompt, length),
    }
}

fn resolve_data_path(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("WAVEGATE_DATA_DIR").map(|d| PathBuf::from(d).join("corpus.txt")))
        .unwrap_or_else(|| PathBuf::from("data/corpus.txt"))
}

fn load_corpus_text(flag: Option<PathBuf>) -> Result<String, CliError> {
    let path = resolve_data_path(flag);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "no corpus at {} (run `wavegate data --synth` first, or pass --data)",
            path.display()
        )));
    }
    Ok(data::load_corpus(&path, false)?)
}

fn cmd_data(
    path: Option<PathBuf>,
    synth: bool,
    force: bool,
    out: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let text = if synth {
        data::synthetic_corpus(data::TARGET_BYTES, seed)
    } else {
        let src = path.ok_or_else(|| {
            UsageError("pass a corpus file path, or --synth to generate one".into())
        })?;
        data::load_corpus(&src, force)?
    };
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).context("creating data directory")?;
    }
    std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    let vocab = CharVocab::from_text(&text);
    println!(
        "corpus installed at {} ({} bytes, vocab {})",
        out.display(),
        text.len(),
        vocab.len()
    );
    Ok(())
}

fn scale_configs(scale: &str, vocab_size: usize, seed: u64) -> Result<(ModelConfig, TrainConfig), UsageError> {
    match scale {
        "desk" => Ok((desk_model_config(vocab_size), desk_train_config(seed))),
        "paper" => Ok((paper_model_config(vocab_size), full_train_config(seed))),
        other => Err(UsageError(format!("unknown scale {other:?}; use desk or paper"))),
    }
}

fn check_variant(name: &str) -> Result<(), UsageError> {
    if VARIANTS.contains(&name) {
        Ok(())
    } else {
        Err(UsageError(format!(
            "unknown variant {name:?}; valid names: {}",
            VARIANTS.join(", ")
        )))
    }
}

fn default_out(variant: &str) -> PathBuf {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{ts}-{variant}"))
}

#[derive(serde::Serialize)]
struct EffectiveConfig<'a> {
    variant: &'a str,
    model: ModelConfig,
    train: TrainConfig,
}

fn print_eval(name: &str, r: &StepRecord) {
    if let Some(v) = r.val_loss {
        eprintln!("[{name}] step {:>5}  train {:.4}  val {:.4}", r.step + 1, r.train_loss, v);
    }
}

fn cmd_train(
    config: Option<PathBuf>,
    variant: &str,
    scale: &str,
    seed: u64,
    out: Option<PathBuf>,
    data_flag: Option<PathBuf>,
) -> Result<(), CliError> {
    check_variant(variant)?;
    let text = load_corpus_text(data_flag)?;
    let vocab = CharVocab::from_text(&text);
    let (mut base, mut tc) = scale_configs(scale, vocab.len(), seed)?;
    if let Some(cfg_path) = config {
        let file = ConfigFile::load(&cfg_path).map_err(|e| CliError::Usage(format!("{e:#}")))?;
        file.apply(&mut base, &mut tc);
    }
    let cfg = variant_config(variant, &base).map_err(|e| CliError::Usage(format!("{e:#}")))?;
    let out_dir = out.unwrap_or_else(|| default_out(variant));
    std::fs::create_dir_all(&out_dir).context("creating run directory")?;

    let (train_ids, val_ids) = prepare_ids(&text, &vocab, tc.train_frac);
    eprintln!(
        "training {variant} at {scale} scale: {} params, {} steps",
        param_count(&cfg),
        tc.steps
    );
    let mut ps: ParamSet<f32> = build_params(&cfg, tc.seed);
    let metrics =
        train_variant(variant, &cfg, &tc, &train_ids, &val_ids, &mut ps, |r| print_eval(variant, r))?;

    report::write_metrics_csv(&out_dir.join("metrics.csv"), &metrics)?;
    report::write_loss_curve_svg(&out_dir.join("loss-curve.svg"), &metrics)?;
    save_checkpoint(&out_dir.join("model.ckpt"), &cfg, &vocab, &ps, tc.steps, tc.seed)?;
    let eff = EffectiveConfig { variant, model: cfg, train: tc };
    std::fs::write(
        out_dir.join("effective-config.json"),
        serde_json::to_string_pretty(&eff).context("serializing config")?,
    )
    .context("writing effective-config.json")?;
    println!(
        "{variant}: final val loss {:.4} (artifacts in {})",
        metrics.final_val_loss,
        out_dir.display()
    );
    Ok(())
}

fn cmd_ablate(
    config: Option<PathBuf>,
    scale: &str,
    seed: u64,
    variants: &str,
    jobs: usize,
    out: Option<PathBuf>,
    data_flag: Option<PathBuf>,
) -> Result<(), CliError> {
    let names: Vec<String> = if variants == "all" {
        VARIANTS.iter().map(|s| s.to_string()).collect()
    } else {
        variants.split(',').map(|s| s.trim().to_string()).collect()
    };
    for n in &names {
        check_variant(n)?;
    }
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let text = load_corpus_text(data_flag)?;
    let vocab = CharVocab::from_text(&text);
    let (mut base, mut tc) = scale_configs(scale, vocab.len(), seed)?;
    if let Some(cfg_path) = config {
        let file = ConfigFile::load(&cfg_path).map_err(|e| CliError::Usage(format!("{e:#}")))?;
        file.apply(&mut base, &mut tc);
    }
    let out_dir = out.unwrap_or_else(|| default_out("ablation"));
    std::fs::create_dir_all(&out_dir).context("creating run directory")?;
    let (train_ids, val_ids) = prepare_ids(&text, &vocab, tc.train_frac);

    // independent runs; chunks of --jobs train concurrently
    let mut results: Vec<(String, usize, anyhow::Result<wavegate::train::RunMetrics>)> = Vec::new();
    for chunk in names.chunks(jobs.max(1)) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for name in chunk {
                let cfg = match variant_config(name, &base) {
                    Ok(c) => c,
                    Err(e) => {
                        results.push((name.clone(), 0, Err(e)));
                        continue;
                    }
                };
                let (tr, va) = (&train_ids, &val_ids);
                let run_dir = out_dir.join(name);
                let vchars = vocab.chars().to_vec();
                handles.push((name.clone(), param_count(&cfg), scope.spawn(move || {
                    std::fs::create_dir_all(&run_dir).context("creating run dir")?;
                    let mut ps: ParamSet<f32> = build_params(&cfg, tc.seed);
                    let m = train_variant(name, &cfg, &tc, tr, va, &mut ps, |r| {
                        print_eval(name, r)
                    })?;
                    report::write_metrics_csv(&run_dir.join("metrics.csv"), &m)?;
                    report::write_loss_curve_svg(&run_dir.join("loss-curve.svg"), &m)?;
                    save_checkpoint(
                        &run_dir.join("model.ckpt"),
                        &cfg,
                        &CharVocab::from_chars(vchars),
                        &ps,
                        tc.steps,
                        tc.seed,
                    )?;
                    Ok(m)
                })));
            }
            for (name, pc, h) in handles {
                let outcome = match h.join() {
                    Ok(r) => r,
                    Err(_) => Err(anyhow::anyhow!("worker thread panicked")),
                };
                results.push((name, pc, outcome));
            }
        });
    }

    let summary = assemble_summary(results, tc.seed);
    report::write_ablation_csv(&out_dir.join("summary.csv"), &summary)?;
    report::write_ablation_json(&out_dir.join("summary.json"), &summary)?;
    report::write_ablation_bars_svg(&out_dir.join("summary.svg"), &summary)?;

    println!("{:<12} {:>10} {:>10}  status", "Model", "Val", "Delta");
    for r in &summary.rows {
        match (r.final_val_loss, r.delta_vs_base) {
            (Some(v), Some(d)) => {
                println!("{:<12} {:>10.4} {:>+10.4}  ok", r.variant, v, d)
            }
            _ => println!("{:<12} {:>10} {:>10}  failed", r.variant, "-", "-"),
        }
    }
    if let Some(s) = summary.superadditivity {
        println!("superadditivity (EGA-MORLET beyond its parts): {s:+.4}");
    }
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_analyze(
    ckpt_path: &Path,
    what: &str,
    out: Option<PathBuf>,
    data_flag: Option<PathBuf>,
) -> Result<(), CliError> {
    let ck = load_checkpoint::<f64>(ckpt_path)?;
    let out_dir = out.unwrap_or_else(|| {
        ckpt_path.parent().map(|p| p.to_path_buf()).unwrap_or_else(|| PathBuf::from("."))
    });
    std::fs::create_dir_all(&out_dir).context("creating analysis directory")?;
    match what {
        "mope-params" => {
            if !ck.params.contains("mope.log_omega") {
                return Err(CliError::Usage(
                    "mope-params needs a checkpoint trained with the morlet encoding \
                     (PE-MORLET or EGA-MORLET)"
                        .into(),
                ));
            }
            let p = MopeParams::from_tensors(
                ck.params.get("mope.log_omega").clone(),
                ck.params.get("mope.log_sigma").clone(),
            );
            report::write_mope_csv(&out_dir.join("mope-params.csv"), &p)?;
            report::write_mope_histogram_svg(&out_dir.join("mope-sigma-hist.svg"), &p)?;
            println!("wrote mope-params.csv and mope-sigma-hist.svg in {}", out_dir.display());
        }
        "cascade" => {
            let fwd_t = sample_forward(&ck, data_flag)?;
            let scales = default_scales(ck.config.seq_len);
            let mut w = csv::Writer::from_path(out_dir.join("cascade.csv"))
                .context("creating cascade.csv")?;
            w.write_record(["stage", "scale", "energy"]).context("csv header")?;
            for (stage, x) in fwd_t.iter().enumerate() {
                // average spectral energy over strided channels of the stage
                let (t, d) = (x.shape[1], x.shape[2]);
                let n_ch = MQ_CHANNELS.min(d);
                let mut acc = vec![0.0f64; scales.len()];
                for ci in 0..n_ch {
                    let ch = ci * d / n_ch;
                    let sig: Vec<f64> = (0..t).map(|ti| x.data[ti * d + ch]).collect();
                    let e = scale_energy(&causal_morlet_cwt(&sig, &scales));
                    for (a, b) in acc.iter_mut().zip(e) {
                        *a += b / n_ch as f64;
                    }
                }
                for (si, s) in scales.iter().enumerate() {
                    w.write_record([
                        stage.to_string(),
                        format!("{s:.4}"),
                        format!("{:.6e}", acc[si]),
                    ])
                    .context("csv row")?;
                }
            }
            w.flush().context("flushing cascade.csv")?;
            println!(
                "wrote cascade.csv ({} stages x {} scales) in {}",
                fwd_t.len(),
                scales.len(),
                out_dir.display()
            );
        }
        "gate-corr" => {
            if matches!(ck.config.gate, GateKind::None) {
                return Err(CliError::Usage(
                    "gate-corr needs a gated checkpoint (EGA-1, EGA-MORLET, or an MQ variant); \
                     this one has no gate"
                        .into(),
                ));
            }
            let (gates, energy) = sample_gates(&ck, data_flag)?;
            let mut w = csv::Writer::from_path(out_dir.join("gate-corr.csv"))
                .context("creating gate-corr.csv")?;
            w.write_record(["layer", "head", "pearson_r"]).context("csv header")?;
            for (l, layer_gates) in gates.iter().enumerate() {
                for (h, r) in gate_energy_correlation(layer_gates, &energy).iter().enumerate() {
                    w.write_record([
                        l.to_string(),
                        h.to_string(),
                        r.map(|v| format!("{v:.6}")).unwrap_or_default(),
                    ])
                    .context("csv row")?;
                }
            }
            w.flush().context("flushing gate-corr.csv")?;
            println!("wrote gate-corr.csv in {}", out_dir.display());
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown analysis {other:?}; use cascade, mope-params, or gate-corr"
            )));
        }
    }
    Ok(())
}

/// One deterministic corpus window pushed through the model; returns the
/// residual stream at every stage as value tensors.
fn sample_forward(
    ck: &wavegate::model::Checkpoint<f64>,
    data_flag: Option<PathBuf>,
) -> Result<Vec<wavegate::tensor::Tensor<f64>>, CliError> {
    let text = load_corpus_text(data_flag)?;
    let t = ck.config.seq_len;
    let ids = ck
        .vocab
        .encode(&text[..t])
        .context("corpus does not match checkpoint vocabulary")?;
    let mut g: Graph<f64> = Graph::new();
    let bound = Bound::bind(&mut g, &ck.params);
    let fwd = forward(&mut g, &ck.config, &bound, &ids, 1, t);
    Ok(fwd
        .layer_outputs
        .iter()
        .map(|&v| g.value(v).clone())
        .collect())
}

/// Per-layer gate values `[layer][head][t]` and token spectral energy.
#[allow(clippy::type_complexity)]
fn sample_gates(
    ck: &wavegate::model::Checkpoint<f64>,
    data_flag: Option<PathBuf>,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<f64>), CliError> {
    let text = load_corpus_text(data_flag)?;
    let t = ck.config.seq_len;
    let ids = ck
        .vocab
        .encode(&text[..t])
        .context("corpus does not match checkpoint vocabulary")?;
    let mut g: Graph<f64> = Graph::new();
    let bound = Bound::bind(&mut g, &ck.params);
    let fwd = forward(&mut g, &ck.config, &bound, &ids, 1, t);
    let mut gates = Vec::new();
    for &gv in &fwd.gates {
        let tensor = g.value(gv);
        let hg = tensor.shape[1];
        let per_head: Vec<Vec<f64>> = (0..hg)
            .map(|h| tensor.data[h * t..(h + 1) * t].to_vec())
            .collect();
        gates.push(per_head);
    }
    let feats = mq_features(g.value(fwd.embedded), MqFeatureSpec::energy_only());
    let energy: Vec<f64> = (0..t).map(|ti| feats.data[ti]).collect();
    Ok((gates, energy))
}

fn cmd_sample(ckpt_path: &Path, prompt: &str, length: usize) -> Result<(), CliError> {
    let ck = load_checkpoint::<f32>(ckpt_path)?;
    let out = greedy_generate(&ck.config, &ck.params, &ck.vocab, prompt, length)?;
    println!("{out}");
    Ok(())
}
