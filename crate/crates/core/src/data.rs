//! Beat datasets: CSV ingestion, stratified splitting and a synthetic ECG
//! generator for desk-scale experiments.
//!
//! The CSV layout is one beat per row: `L` comma-separated samples followed
//! by the integer class label (written either as `3` or `3.0`). A leading
//! header row is skipped when its first field is not numeric.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BEAT_LEN: usize = 187;

#[derive(Clone, Debug, PartialEq)]
pub struct BeatRecord {
    pub samples: Vec<f64>,
    pub label: usize,
}

/// Ordered class names; a name's position is its CSV label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl LabelVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("label vocabulary is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(',') || n.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid class name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// The five AAMI beat classes.
    pub fn mitbih() -> Self {
        Self::new(["N", "S", "V", "F", "Q"]).expect("static vocabulary")
    }

    /// Normal vs myocardial infarction.
    pub fn ptb() -> Self {
        Self::new(["Normal", "MI"]).expect("static vocabulary")
    }

    /// Classes produced by [`synth_beats`]: normal and P-wave-suppressed.
    pub fn synthetic() -> Self {
        Self::new(["N", "S"]).expect("static vocabulary")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn parse_field(field: &str, row: usize, column: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        row,
        column,
        message: format!("non-numeric field {:?}", field.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column,
            message: format!("non-finite field {:?}", field.trim()),
        });
    }
    Ok(v)
}

/// Parses beat rows from any reader. Rows and columns in errors are 1-based.
pub fn read_csv(reader: impl BufRead, len: usize, n_classes: usize) -> Result<Vec<BeatRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if row == 1 && fields[0].trim().parse::<f64>().is_err() {
            continue;
        }
        if fields.len() != len + 1 {
            return Err(Error::Parse {
                row,
                column: fields.len(),
                message: format!("expected {} fields at row {row}, found {}", len + 1, fields.len()),
            });
        }
        let samples = fields[..len]
            .iter()
            .enumerate()
            .map(|(c, f)| parse_field(f, row, c + 1))
            .collect::<Result<Vec<_>>>()?;
        let raw = parse_field(fields[len], row, len + 1)?;
        if raw < 0.0 || raw.fract() != 0.0 || raw as usize >= n_classes {
            return Err(Error::Parse {
                row,
                column: len + 1,
                message: format!("label {raw} is not a class index below {n_classes}"),
            });
        }
        records.push(BeatRecord {
            samples,
            label: raw as usize,
        });
    }
    Ok(records)
}

pub fn load_csv(path: impl AsRef<Path>, len: usize, n_classes: usize) -> Result<Vec<BeatRecord>> {
    let file = File::open(path.as_ref())?;
    read_csv(BufReader::new(file), len, n_classes)
}

pub fn write_csv(path: impl AsRef<Path>, records: &[BeatRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path.as_ref())?);
    for r in records {
        for s in &r.samples {
            write!(out, "{s},")?;
        }
        writeln!(out, "{}", r.label)?;
    }
    out.flush()?;
    Ok(())
}

/// Number of records per class index.
pub fn class_counts(records: &[BeatRecord], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for r in records {
        counts[r.label] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<BeatRecord>,
    pub test: Vec<BeatRecord>,
    pub seed: u64,
}

/// Per-class random split; each class contributes `round(ratio * n)`
/// records to `train`. Both halves keep the input order.
pub fn stratified_split(records: &[BeatRecord], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; records.len()];
    for indices in by_class.values_mut() {
        indices.shuffle(&mut rng);
        let n_train = (ratio * indices.len() as f64).round() as usize;
        for &i in &indices[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok(DatasetSplit { train, test, seed })
}

/// Stacks beats into a `[B, L]` tensor.
pub fn to_batch(records: &[&BeatRecord]) -> Result<Tensor> {
    let len = records
        .first()
        .map(|r| r.samples.len())
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let mut data = Vec::with_capacity(records.len() * len);
    for r in records {
        if r.samples.len() != len {
            return Err(Error::Shape(format!(
                "beat of length {} in batch of length {len}",
                r.samples.len()
            )));
        }
        data.extend_from_slice(&r.samples);
    }
    Tensor::new([records.len(), len], data)
}

/// Fractional positions of the synthetic waves within a beat.
pub const P_PHASE: f64 = 0.36;
pub const R_PHASE: f64 = 0.5;
pub const T_PHASE: f64 = 0.72;

/// Sample index of the P-wave peak in a synthetic beat of length `len`.
pub fn p_wave_index(len: usize) -> usize {
    (P_PHASE * len as f64).round() as usize
}

/// Synthetic two-class beats. Class 0 carries a P bump, an R spike and a T
/// bump; class 1 is identical except that the P bump is absent. Each beat
/// is min-max normalised to `[0, 1]`. Records come out class 0 first.
pub fn synth_beats(n_per_class: usize, len: usize, seed: u64) -> Vec<BeatRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    let jitter = Uniform::new_inclusive(-2.0, 2.0).expect("valid range");
    let mut out = Vec::with_capacity(2 * n_per_class);
    for label in 0..2 {
        for _ in 0..n_per_class {
            let shift: f64 = jitter.sample(&mut rng);
            let p_amp = if label == 0 { rng.random_range(0.2..0.3) } else { 0.0 };
            let r_amp = rng.random_range(0.9..1.1);
            let t_amp = rng.random_range(0.25..0.35);
            let wander = rng.random_range(-0.05..0.05);
            let l = len as f64;
            let bump = |t: f64, centre: f64, width: f64| (-0.5 * ((t - centre) / width).powi(2)).exp();
            let raw: Vec<f64> = (0..len)
                .map(|i| {
                    let t = i as f64 - shift;
                    p_amp * bump(t, P_PHASE * l, 0.022 * l)
                        + r_amp * bump(t, R_PHASE * l, 0.008 * l)
                        + t_amp * bump(t, T_PHASE * l, 0.045 * l)
                        + wander * i as f64 / l
                        + noise.sample(&mut rng)
                })
                .collect();
            let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            out.push(BeatRecord {
                samples: raw.iter().map(|v| (v - lo) / span).collect(),
                label,
            });
        }
    }
    out
}
