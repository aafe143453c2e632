//! Configuration files and the layered resolution of run settings.
//!
//! A configuration file is flat `key = value` text split into `[model]`,
//! `[train]` and `[data]` sections. `#` starts a comment. Values resolve in
//! this order, later layers winning: preset defaults, configuration file,
//! environment variables and command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use mambacaps_core::{LabelVocabulary, LossConfig, ModelConfig, TrainConfig};

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dataset {
    /// Generated two-class beats.
    Synthetic,
    /// Five AAMI classes: N, S, V, F, Q.
    Mitbih,
    /// Normal vs myocardial infarction.
    Ptb,
}

impl Dataset {
    pub fn vocabulary(self) -> LabelVocabulary {
        match self {
            Dataset::Synthetic => LabelVocabulary::synthetic(),
            Dataset::Mitbih => LabelVocabulary::mitbih(),
            Dataset::Ptb => LabelVocabulary::ptb(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dataset::Synthetic => "synthetic",
            Dataset::Mitbih => "mitbih",
            Dataset::Ptb => "ptb",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Desk-scale model for the synthetic task.
    Tiny,
    /// Full-size model.
    Full,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Full => "full",
        }
    }
}

/// One `key = value` line of a configuration file.
#[derive(Clone, Debug)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("{}:{}", origin.display(), i + 1);
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if !matches!(section.as_str(), "model" | "train" | "data") {
                return Err(UsageError(format!("{}: unknown section [{section}]", at())).into());
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(UsageError(format!("{}: expected key = value, got {line:?}", at())).into());
        };
        if section.is_empty() {
            return Err(UsageError(format!("{}: key {:?} appears before any section", at(), key.trim())).into());
        }
        entries.push(Entry {
            section: section.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(entries)
}

pub fn read_config(path: Option<&Path>) -> Result<Vec<Entry>> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_config(&text, p)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub dataset: Dataset,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub split_ratio: f64,
    pub synthetic_per_class: usize,
    pub data_seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            dataset: Dataset::Synthetic,
            train_csv: None,
            test_csv: None,
            split_ratio: 0.8,
            synthetic_per_class: 100,
            data_seed: 0,
        }
    }
}

fn bad_value(e: &Entry) -> anyhow::Error {
    UsageError(format!("invalid value {:?} for {} (line {})", e.value, e.key, e.line)).into()
}

impl DataSettings {
    pub fn apply(&mut self, e: &Entry) -> Result<()> {
        let v = e.value.as_str();
        match e.key.as_str() {
            "dataset" => self.dataset = Dataset::from_str(v, true).map_err(|_| bad_value(e))?,
            "train_csv" => self.train_csv = Some(PathBuf::from(v)),
            "test_csv" => self.test_csv = Some(PathBuf::from(v)),
            "split_ratio" => self.split_ratio = v.parse().map_err(|_| bad_value(e))?,
            "synthetic_per_class" => self.synthetic_per_class = v.parse().map_err(|_| bad_value(e))?,
            "data_seed" => self.data_seed = v.parse().map_err(|_| bad_value(e))?,
            "preset" => {}
            _ => return Err(UsageError(format!("unknown data key {:?} (line {})", e.key, e.line)).into()),
        }
        Ok(())
    }
}

/// Everything a training run needs.
#[derive(Clone, Debug)]
pub struct Settings {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
}

/// Command-line overrides; `None` leaves the lower layers in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub dataset: Option<Dataset>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub split_ratio: Option<f64>,
    pub synthetic_per_class: Option<usize>,
    pub data_seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

fn section<'a>(entries: &'a [Entry], name: &'a str) -> impl Iterator<Item = &'a Entry> {
    entries.iter().filter(move |e| e.section == name)
}

fn with_line(e: &Entry, err: mambacaps_core::Error) -> anyhow::Error {
    UsageError(format!("[{}] line {}: {err}", e.section, e.line)).into()
}

pub fn resolve(entries: &[Entry], o: &Overrides) -> Result<Settings> {
    let mut data = DataSettings::default();
    for e in section(entries, "data") {
        data.apply(e)?;
    }
    if let Some(d) = o.dataset {
        data.dataset = d;
    }
    if o.train_csv.is_some() {
        data.train_csv.clone_from(&o.train_csv);
    }
    if o.test_csv.is_some() {
        data.test_csv.clone_from(&o.test_csv);
    }
    data.split_ratio = o.split_ratio.unwrap_or(data.split_ratio);
    data.synthetic_per_class = o.synthetic_per_class.unwrap_or(data.synthetic_per_class);
    data.data_seed = o.data_seed.unwrap_or(data.data_seed);

    let file_preset = section(entries, "data")
        .filter(|e| e.key == "preset")
        .last()
        .map(|e| Preset::from_str(&e.value, true).map_err(|_| bad_value(e)))
        .transpose()?;
    let preset = o.preset.or(file_preset).unwrap_or(match data.dataset {
        Dataset::Synthetic => Preset::Tiny,
        _ => Preset::Full,
    });

    let mut model = match preset {
        Preset::Tiny => ModelConfig::tiny(),
        Preset::Full => ModelConfig::default(),
    };
    let vocab = data.dataset.vocabulary();
    let mut explicit_classes = None;
    for e in section(entries, "model") {
        model.set(&e.key, &e.value).map_err(|err| with_line(e, err))?;
        if e.key == "n_classes" {
            explicit_classes = Some(model.n_classes);
        }
    }
    if let Some(k) = explicit_classes.filter(|&k| k != vocab.len()) {
        return Err(UsageError(format!(
            "n_classes = {k} conflicts with the {} dataset, which has {} classes",
            data.dataset.name(),
            vocab.len()
        ))
        .into());
    }
    model.n_classes = vocab.len();

    let mut train = match preset {
        Preset::Tiny => TrainConfig::tiny(),
        Preset::Full => TrainConfig::default(),
    };
    let mut explicit_weight = false;
    for e in section(entries, "train") {
        train.set(&e.key, &e.value).map_err(|err| with_line(e, err))?;
        explicit_weight |= e.key == "recon_weight";
    }
    if !explicit_weight {
        train.loss.recon_weight = LossConfig::for_model(&model).recon_weight;
    }
    train.epochs = o.epochs.unwrap_or(train.epochs);
    train.batch_size = o.batch_size.unwrap_or(train.batch_size);
    train.lr_peak = o.lr.unwrap_or(train.lr_peak);
    train.seed = o.seed.unwrap_or(train.seed);
    train.workers = o.workers.unwrap_or(train.workers);

    model.validate().map_err(|e| UsageError(e.to_string()))?;
    train.validate().map_err(|e| UsageError(e.to_string()))?;
    train.loss.validate().map_err(|e| UsageError(e.to_string()))?;
    if !(data.split_ratio > 0.0 && data.split_ratio < 1.0) {
        return Err(UsageError(format!("split_ratio must lie in (0, 1), got {}", data.split_ratio)).into());
    }
    Ok(Settings {
        preset,
        model,
        train,
        data,
    })
}

impl Settings {
    /// The resolved settings in configuration-file form.
    pub fn to_config_text(&self) -> String {
        let mut s = String::from("[data]\n");
        let d = &self.data;
        let _ = writeln!(s, "preset = {}", self.preset.name());
        let _ = writeln!(s, "dataset = {}", d.dataset.name());
        if let Some(p) = &d.train_csv {
            let _ = writeln!(s, "train_csv = {}", p.display());
        }
        if let Some(p) = &d.test_csv {
            let _ = writeln!(s, "test_csv = {}", p.display());
        }
        let _ = writeln!(s, "split_ratio = {}", d.split_ratio);
        let _ = writeln!(s, "synthetic_per_class = {}", d.synthetic_per_class);
        let _ = writeln!(s, "data_seed = {}", d.data_seed);
        s.push_str("\n[model]\n");
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("\n[train]\n");
        for (k, v) in self.train.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
