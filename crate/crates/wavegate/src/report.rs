//! Run artifacts: metrics CSV, ablation summaries, and self-contained SVG
//! plots (loss curves, ablation bars, bandwidth histograms).

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

use crate::pe::MopeParams;
use crate::tensor::Real;
use crate::train::{AblationSummary, RunMetrics};

/// Per-step metrics table for one run.
pub fn write_metrics_csv(path: &Path, m: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["step", "lr", "train_loss", "grad_norm", "val_loss", "gate_mean"])?;
    for r in &m.records {
        w.write_record([
            r.step.to_string(),
            format!("{:.8e}", r.lr),
            format!("{:.6}", r.train_loss),
            format!("{:.6}", r.grad_norm),
            r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.gate_mean.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Final table of the ablation matrix.
pub fn write_ablation_csv(path: &Path, s: &AblationSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["variant", "final_val_loss", "delta_vs_base", "param_count", "status"])?;
    for r in &s.rows {
        w.write_record([
            r.variant.clone(),
            r.final_val_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.delta_vs_base.map(|v| format!("{v:+.6}")).unwrap_or_default(),
            r.param_count.to_string(),
            r.failed.clone().unwrap_or_else(|| "ok".into()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_json(path: &Path, s: &AblationSummary) -> Result<()> {
    let json = serde_json::to_string_pretty(s)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---- svg -------------------------------------------------------------------

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 50.0;

fn svg_open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    );
}

fn to_px(x: f64, lo: f64, hi: f64, p0: f64, p1: f64) -> f64 {
    if hi <= lo {
        return p0;
    }
    p0 + (x - lo) / (hi - lo) * (p1 - p0)
}

/// Train and validation loss curves for one run.
pub fn loss_curve_svg(m: &RunMetrics) -> String {
    let steps: Vec<f64> = m.records.iter().map(|r| r.step as f64).collect();
    let train: Vec<f64> = m.records.iter().map(|r| r.train_loss).collect();
    let val: Vec<(f64, f64)> = m
        .records
        .iter()
        .filter_map(|r| r.val_loss.map(|v| (r.step as f64, v)))
        .collect();
    let xmax = steps.last().copied().unwrap_or(1.0).max(1.0);
    let ymax = train
        .iter()
        .chain(val.iter().map(|(_, v)| v))
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let (x0, x1) = (MARGIN, W - 20.0);
    let (y0, y1) = (H - MARGIN, 40.0);
    let mut out = String::new();
    svg_open(&mut out, &format!("{} loss", m.variant));
    let _ = write!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>\n\
         <text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">loss (nats)</text>\n",
        (x0 + x1) / 2.0,
        H - 12.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    let mut pts = String::new();
    for (s, l) in steps.iter().zip(&train) {
        let _ = write!(
            pts,
            "{:.1},{:.1} ",
            to_px(*s, 0.0, xmax, x0, x1),
            to_px(*l, 0.0, ymax, y0, y1)
        );
    }
    let _ = write!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1\"/>\n",
        pts.trim_end()
    );
    if !val.is_empty() {
        let mut vp = String::new();
        for (s, v) in &val {
            let _ = write!(
                vp,
                "{:.1},{:.1} ",
                to_px(*s, 0.0, xmax, x0, x1),
                to_px(*v, 0.0, ymax, y0, y1)
            );
        }
        let _ = write!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"firebrick\" stroke-width=\"2\"/>\n",
            vp.trim_end()
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"40\" fill=\"steelblue\">train</text>\n\
         <text x=\"{}\" y=\"56\" fill=\"firebrick\">val</text>\n</svg>\n",
        W - 90.0,
        W - 90.0
    );
    out
}

pub fn write_loss_curve_svg(path: &Path, m: &RunMetrics) -> Result<()> {
    std::fs::write(path, loss_curve_svg(m))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Horizontal bars of each variant's improvement over the baseline.
pub fn ablation_bars_svg(s: &AblationSummary) -> String {
    let rows: Vec<(&str, f64)> = s
        .rows
        .iter()
        .filter_map(|r| Some((r.variant.as_str(), r.delta_vs_base?)))
        .collect();
    let mut out = String::new();
    svg_open(&mut out, "validation improvement vs BASE-DOT (nats)");
    if rows.is_empty() {
        let _ = write!(out, "<text x=\"{}\" y=\"{}\">no completed runs</text></svg>\n", W / 2.0, H / 2.0);
        return out;
    }
    let max_abs = rows.iter().map(|(_, d)| d.abs()).fold(1e-6f64, f64::max);
    let x_mid = W / 2.0;
    let span = W / 2.0 - 130.0;
    let row_h = (H - 80.0) / rows.len() as f64;
    for (i, (name, d)) in rows.iter().enumerate() {
        let y = 50.0 + i as f64 * row_h;
        let wpx = d.abs() / max_abs * span;
        let (x, color) = if *d >= 0.0 {
            (x_mid, "seagreen")
        } else {
            (x_mid - wpx, "indianred")
        };
        let _ = write!(
            out,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{wpx:.1}\" height=\"{:.1}\" fill=\"{color}\"/>\n\
             <text x=\"10\" y=\"{:.1}\">{name}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{d:+.4}</text>\n",
            y,
            (row_h - 6.0).max(4.0),
            y + row_h / 2.0 + 4.0,
            x_mid + span + 6.0,
            y + row_h / 2.0 + 4.0
        );
    }
    let _ = write!(
        out,
        "<line x1=\"{x_mid}\" y1=\"40\" x2=\"{x_mid}\" y2=\"{}\" stroke=\"black\"/>\n</svg>\n",
        H - 30.0
    );
    out
}

pub fn write_ablation_bars_svg(path: &Path, s: &AblationSummary) -> Result<()> {
    std::fs::write(path, ablation_bars_svg(s))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Learned wave table: one row per dimension pair.
pub fn write_mope_csv<F: Real>(path: &Path, p: &MopeParams<F>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["pair", "omega", "sigma", "omega_sigma", "period"])?;
    for i in 0..p.half_dims() {
        let (o, s) = (p.omega(i), p.sigma(i));
        w.write_record([
            i.to_string(),
            format!("{o:.6}"),
            format!("{s:.6}"),
            format!("{:.4}", o * s),
            format!("{:.3}", std::f64::consts::TAU / o),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reference linguistic timescales overlaid on the bandwidth histogram,
/// in characters.
const BANDS: [(&str, f64, f64); 4] = [
    ("char", 2.0, 3.0),
    ("word", 8.0, 12.0),
    ("clause", 25.0, 40.0),
    ("sentence", 60.0, 100.0),
];

/// 24-bin histogram of learned bandwidths on a log axis, with reference
/// bands for familiar text scales.
pub fn mope_histogram_svg<F: Real>(p: &MopeParams<F>) -> String {
    const NBINS: usize = 24;
    let sigmas: Vec<f64> = (0..p.half_dims()).map(|i| p.sigma(i)).collect();
    // span both the data and the reference bands so the overlay always shows
    let lo = sigmas
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .max(1e-3)
        .min(1.5)
        .ln();
    let hi = sigmas.iter().cloned().fold(0.0f64, f64::max).max(120.0).ln() + 1e-9;
    let mut bins = [0usize; NBINS];
    for &s in &sigmas {
        let f = (s.ln() - lo) / (hi - lo);
        let b = ((f * NBINS as f64) as usize).min(NBINS - 1);
        bins[b] += 1;
    }
    let max_bin = bins.iter().copied().max().unwrap_or(1).max(1);
    let (x0, x1) = (MARGIN, W - 20.0);
    let (y0, y1) = (H - MARGIN, 40.0);
    let mut out = String::new();
    svg_open(&mut out, "learned bandwidths (characters, log axis)");
    for (name, blo, bhi) in BANDS {
        let px0 = to_px(blo.ln(), lo, hi, x0, x1).clamp(x0, x1);
        let px1 = to_px(bhi.ln(), lo, hi, x0, x1).clamp(x0, x1);
        if px1 > px0 {
            let _ = write!(
                out,
                "<rect x=\"{px0:.1}\" y=\"{y1}\" width=\"{:.1}\" height=\"{:.1}\" \
                 fill=\"gold\" opacity=\"0.25\"/>\n\
                 <text x=\"{px0:.1}\" y=\"36\" font-size=\"10\">{name}</text>\n",
                px1 - px0,
                y0 - y1
            );
        }
    }
    let bw = (x1 - x0) / NBINS as f64;
    for (i, &c) in bins.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let bh = c as f64 / max_bin as f64 * (y0 - y1);
        let _ = write!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" \
             fill=\"steelblue\" stroke=\"white\"/>\n",
            x0 + i as f64 * bw,
            y0 - bh,
            bw
        );
    }
    let _ = write!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n</svg>\n"
    );
    out
}

pub fn write_mope_histogram_svg<F: Real>(path: &Path, p: &MopeParams<F>) -> Result<()> {
    std::fs::write(path, mope_histogram_svg(p))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{AblationRow, StepRecord};

    fn fake_metrics() -> RunMetrics {
        RunMetrics {
            variant: "BASE-DOT".into(),
            records: (0..10)
                .map(|s| StepRecord {
                    step: s,
                    lr: 3e-4,
                    train_loss: 4.0 - 0.1 * s as f64,
                    grad_norm: 1.0,
                    val_loss: if s % 5 == 4 { Some(3.9 - 0.1 * s as f64) } else { None },
                    gate_mean: None,
                })
                .collect(),
            final_val_loss: 3.0,
            param_count: 1000,
        }
    }

    fn fake_summary() -> AblationSummary {
        AblationSummary {
            rows: vec![
                AblationRow {
                    variant: "BASE-DOT".into(),
                    final_val_loss: Some(1.5),
                    delta_vs_base: Some(0.0),
                    param_count: 1000,
                    failed: None,
                },
                AblationRow {
                    variant: "EGA-1".into(),
                    final_val_loss: Some(1.4),
                    delta_vs_base: Some(0.1),
                    param_count: 1010,
                    failed: None,
                },
                AblationRow {
                    variant: "CONV-L8".into(),
                    final_val_loss: None,
                    delta_vs_base: None,
                    param_count: 1017,
                    failed: Some("diverged".into()),
                },
            ],
            superadditivity: Some(0.05),
            seed: 1,
        }
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        write_metrics_csv(&p, &fake_metrics()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,lr,train_loss,grad_norm,val_loss,gate_mean"
        );
        assert_eq!(lines.count(), 10);
    }

    #[test]
    fn ablation_csv_marks_failures() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("summary.csv");
        write_ablation_csv(&p, &fake_summary()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("diverged"));
        assert!(text.contains("+0.100000"));
    }

    #[test]
    fn ablation_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("summary.json");
        let s = fake_summary();
        write_ablation_json(&p, &s).unwrap();
        let back: AblationSummary =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back.rows.len(), 3);
        assert_eq!(back.superadditivity, Some(0.05));
    }

    #[test]
    fn svgs_are_self_contained_documents() {
        let loss = loss_curve_svg(&fake_metrics());
        let bars = ablation_bars_svg(&fake_summary());
        let hist = mope_histogram_svg(&MopeParams::<f64>::init(64));
        for svg in [&loss, &bars, &hist] {
            assert!(svg.starts_with("<svg"));
            assert!(svg.trim_end().ends_with("</svg>"));
            assert!(svg.contains("xmlns"));
            assert!(!svg.contains("http://") || svg.contains("www.w3.org"), "external refs");
        }
        assert!(bars.contains("EGA-1"));
        assert!(hist.contains("word"));
    }

    #[test]
    fn mope_csv_reports_admissible_products() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mope.csv");
        write_mope_csv(&p, &MopeParams::<f64>::init(16)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        for line in text.lines().skip(1) {
            let prod: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
            assert!(prod >= 5.0 - 1e-3);
        }
    }
}
