//! Reconstruction-based explanations.
//!
//! Two procedures probe what the class capsules encode. The disturbance
//! study shifts a beat in time and checks that the decoder redraws the same
//! waveform, only shifted. The cross-label study stretches a non-winning
//! class capsule to the winner's length and decodes it, which shows the beat
//! as the model imagines it under that other label.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::capsule::argmax;
use crate::data::P_PHASE;
use crate::error::{Error, Result};
use crate::model::MambaCapsule;
use crate::tensor::Tensor;
use crate::training::recon::center_window;

/// Delays `x` by `k` samples (advances it for negative `k`), repeating the
/// edge value into the vacated positions.
pub fn shift_input(x: &[f64], k: isize) -> Result<Vec<f64>> {
    let len = x.len() as isize;
    if len == 0 || k.abs() >= len {
        return Err(Error::Config(format!(
            "shift {k} must be smaller in magnitude than the signal length {len}"
        )));
    }
    Ok((0..len).map(|i| x[(i - k).clamp(0, len - 1) as usize]).collect())
}

/// Parses `a..b` (inclusive) or a comma-separated list such as `-2,0,3`.
pub fn parse_shifts(spec: &str) -> Result<Vec<isize>> {
    let bad = || Error::Config(format!("invalid shift list {spec:?}"));
    let spec = spec.trim().trim_start_matches('=');
    if let Some((a, b)) = spec.split_once("..") {
        let a: isize = a.trim().parse().map_err(|_| bad())?;
        let b: isize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftTrace {
    pub shift: isize,
    pub input: Vec<f64>,
    pub predicted: usize,
    pub reconstruction: Vec<f64>,
    /// Smallest MSE against the unshifted reconstruction over re-shifts.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisturbanceStudy {
    /// Reconstruction of the unshifted beat.
    pub reference: Vec<f64>,
    /// MSE between `reference` and the matching window of the input.
    pub reference_mse: f64,
    pub traces: Vec<ShiftTrace>,
}

impl DisturbanceStudy {
    pub fn mean_score(&self) -> f64 {
        self.traces.iter().map(|t| t.score).sum::<f64>() / self.traces.len().max(1) as f64
    }
}

/// Classifies and reconstructs `x` under each shift. The alignment score of
/// a shift is the minimum MSE between its reconstruction, re-shifted by any
/// `j` with `|j| <= max |shift|`, and the unshifted reconstruction.
pub fn disturbance_study(model: &MambaCapsule, x: &[f64], shifts: &[isize]) -> Result<DisturbanceStudy> {
    let len = model.config.seq_len;
    if x.len() != len {
        return Err(Error::Shape(format!(
            "beat has {} samples, model expects {len}",
            x.len()
        )));
    }
    let mut inputs = vec![x.to_vec()];
    for &k in shifts {
        inputs.push(shift_input(x, k)?);
    }
    let batch = Tensor::new([inputs.len(), len], inputs.concat())?;
    let out = model.infer(&batch)?;
    let predicted = out.predictions();
    let recon = model.reconstruct(&out.capsules, &predicted)?;
    let rows: Vec<Vec<f64>> = recon.data().chunks(model.recon.out_len).map(<[f64]>::to_vec).collect();

    let reference = rows[0].clone();
    let window = center_window(len, model.recon.out_len)?;
    let reference_mse = mse(&reference, &x[window]);
    let reach = shifts.iter().map(|k| k.abs()).max().unwrap_or(0);
    let mut traces = Vec::with_capacity(shifts.len());
    for (i, &shift) in shifts.iter().enumerate() {
        let rec = &rows[i + 1];
        let mut score = f64::INFINITY;
        for j in -reach..=reach {
            if j.abs() < rec.len() as isize {
                score = score.min(mse(&shift_input(rec, j)?, &reference));
            }
        }
        traces.push(ShiftTrace {
            shift,
            input: inputs[i + 1].clone(),
            predicted: predicted[i + 1],
            reconstruction: rec.clone(),
            score,
        });
    }
    Ok(DisturbanceStudy {
        reference,
        reference_mse,
        traces,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossLabel {
    pub target: usize,
    pub argmax: usize,
    /// Length of the target capsule before rescaling.
    pub target_norm: f64,
    pub argmax_norm: f64,
    /// Length of the target capsule as decoded.
    pub rescaled_norm: f64,
    pub reconstruction: Vec<f64>,
}

/// Cross-label reconstruction from one beat's class capsules `[K * Dc]`.
/// A target capsule of length zero is decoded as is.
pub fn cross_label_from_capsules(model: &MambaCapsule, capsules: &[f64], target: usize) -> Result<CrossLabel> {
    let (k, dc) = (model.config.n_classes, model.config.class_dim);
    if capsules.len() != k * dc {
        return Err(Error::dim("cross_label", &[capsules.len()], &[k * dc]));
    }
    if target >= k {
        return Err(Error::Config(format!(
            "target class {target} out of range for {k} classes"
        )));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norms: Vec<f64> = capsules.chunks(dc).map(norm).collect();
    let winner = argmax(&norms);
    let mut caps = capsules.to_vec();
    let slot = &mut caps[target * dc..(target + 1) * dc];
    if target != winner && norms[target] > 0.0 {
        let scale = norms[winner] / norms[target];
        slot.iter_mut().for_each(|v| *v *= scale);
    }
    let rescaled_norm = norm(slot);
    let recon = model.reconstruct(&Tensor::new([1, k, dc], caps)?, &[target])?;
    Ok(CrossLabel {
        target,
        argmax: winner,
        target_norm: norms[target],
        argmax_norm: norms[winner],
        rescaled_norm,
        reconstruction: recon.into_data(),
    })
}

/// Classifies `x`, stretches the `target` capsule to the winning capsule's
/// length and reconstructs from it alone.
pub fn cross_label_reconstruct(model: &MambaCapsule, x: &[f64], target: usize) -> Result<CrossLabel> {
    let out = model.infer(&Tensor::new([1, x.len()], x.to_vec())?)?;
    cross_label_from_capsules(model, out.capsules.data(), target)
}

/// Energy of a reconstruction around the P-wave phase: the mean squared
/// excess over the PR-segment level, in a window of ±3% of the beat.
/// `trace` is a centred window of a beat of length `seq_len`.
pub fn p_phase_energy(trace: &[f64], seq_len: usize) -> Result<f64> {
    let window = center_window(seq_len, trace.len())?;
    let at = |phase: f64| (phase * seq_len as f64).round() as isize - window.start as isize;
    let half = ((0.03 * seq_len as f64).round() as isize).max(1);
    let (p, pr) = (at(P_PHASE), at(0.43));
    let in_range = |i: isize| i >= 0 && (i as usize) < trace.len();
    if !in_range(p - half) || !in_range(p + half) || !in_range(pr + half) {
        return Err(Error::Config(format!(
            "reconstruction window {:?} does not cover the P-wave phase",
            window
        )));
    }
    let seg = |c: isize| &trace[(c - half) as usize..=(c + half) as usize];
    let pr_seg = seg(pr);
    let base = pr_seg.iter().sum::<f64>() / pr_seg.len() as f64;
    let p_seg = seg(p);
    Ok(p_seg.iter().map(|v| (v - base).max(0.0).powi(2)).sum::<f64>() / p_seg.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub label: String,
    pub values: Vec<f64>,
}

impl Trace {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
        }
    }
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SVG document with the traces overlaid on shared axes.
pub fn render_svg(traces: &[Trace]) -> String {
    let n = traces.iter().map(|t| t.values.len()).max().unwrap_or(0);
    let finite = || traces.iter().flat_map(|t| &t.values).copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = (
        finite().fold(f64::INFINITY, f64::min),
        finite().fold(f64::NEG_INFINITY, f64::max),
    );
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    } else if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let px = |i: usize| MARGIN + pw * i as f64 / (n.max(2) - 1) as f64;
    let py = |v: f64| MARGIN + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<g stroke="black" stroke-width="1">"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(
        s,
        r#"<text x="{x0}" y="{:.2}" text-anchor="middle">0</text>"#,
        y0 + 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{x1}" y="{:.2}" text-anchor="middle">{}</text>"#,
        y0 + 15.0,
        n.saturating_sub(1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{y0}" text-anchor="end">{lo:.3}</text>"#,
        x0 - 5.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{y1}" text-anchor="end">{hi:.3}</text>"#,
        x0 - 5.0
    );
    let _ = writeln!(s, "</g>");
    for (i, t) in traces.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = t
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(j, &v)| format!("{:.2},{:.2}", px(j), py(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" font-family="sans-serif" font-size="11" fill="{colour}">{}</text>"#,
            WIDTH - MARGIN + 5.0 - 120.0,
            xml_escape(&t.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// CSV with an index column and one column per trace; shorter traces leave
/// trailing cells empty.
pub fn render_csv(traces: &[Trace]) -> String {
    let n = traces.iter().map(|t| t.values.len()).max().unwrap_or(0);
    let mut s = String::from("index");
    for t in traces {
        s.push(',');
        s.push_str(&t.label.replace(',', ";"));
    }
    s.push('\n');
    for i in 0..n {
        s.push_str(&i.to_string());
        for t in traces {
            s.push(',');
            if let Some(v) = t.values.get(i) {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

/// Writes `path` as SVG and a sidecar CSV next to it; returns the CSV path.
pub fn emit_plot(traces: &[Trace], path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let csv = path.with_extension("csv");
    if csv == path {
        return Err(Error::Config(format!(
            "plot path {} must not end in .csv",
            path.display()
        )));
    }
    fs::write(path, render_svg(traces))?;
    fs::write(&csv, render_csv(traces))?;
    Ok(csv)
}
