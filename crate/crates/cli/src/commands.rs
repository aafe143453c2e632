use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use mambacaps_core::data::{load_csv, stratified_split, synth_beats, write_csv, BeatRecord};
use mambacaps_core::explain::{
    cross_label_reconstruct, disturbance_study, emit_plot, p_phase_energy, parse_shifts, Trace,
};
use mambacaps_core::metrics::per_class_metrics;
use mambacaps_core::training::{evaluate, train as run_training};
use mambacaps_core::{checkpoint, DatasetSplit, MambaCapsule};

use crate::settings::{read_config, resolve, Dataset, Overrides, Settings};
use crate::{EvalArgs, ExplainArgs, SourceArgs, Split, SynthArgs, TrainArgs, UsageError};

fn synthetic_split(per_class: usize, len: usize, seed: u64) -> DatasetSplit {
    DatasetSplit {
        train: synth_beats(per_class, len, seed),
        test: synth_beats((per_class / 2).max(1), len, seed.wrapping_add(1)),
        seed,
    }
}

fn training_data(s: &Settings) -> Result<DatasetSplit> {
    let (len, k) = (s.model.seq_len, s.model.n_classes);
    let d = &s.data;
    let Some(train_csv) = &d.train_csv else {
        if d.dataset == Dataset::Synthetic {
            return Ok(synthetic_split(d.synthetic_per_class, len, d.data_seed));
        }
        return Err(UsageError("--train-csv is required unless training on synthetic data".into()).into());
    };
    let train = load_csv(train_csv, len, k).with_context(|| format!("loading {}", train_csv.display()))?;
    match &d.test_csv {
        Some(p) => Ok(DatasetSplit {
            train,
            test: load_csv(p, len, k).with_context(|| format!("loading {}", p.display()))?,
            seed: d.data_seed,
        }),
        None => Ok(stratified_split(&train, d.split_ratio, d.data_seed)?),
    }
}

pub fn train(config: Option<&Path>, a: TrainArgs) -> Result<()> {
    let entries = read_config(config)?;
    let overrides = Overrides {
        preset: a.preset,
        dataset: if a.synthetic {
            Some(Dataset::Synthetic)
        } else {
            a.dataset
        },
        train_csv: a.train_csv,
        test_csv: a.test_csv,
        split_ratio: a.split_ratio,
        synthetic_per_class: a.synthetic_per_class,
        data_seed: a.data_seed,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        workers: a.workers,
    };
    let s = resolve(&entries, &overrides)?;
    let split = training_data(&s)?;
    let vocab = s.data.dataset.vocabulary();
    let names = vocab.names().to_vec();

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    fs::write(a.out_dir.join("config.ini"), s.to_config_text())?;
    let ckpt = a.out_dir.join("model.ckpt");
    let mut log = File::create(a.out_dir.join("train.log"))?;
    let mut model = MambaCapsule::new(s.model.clone(), vocab, s.train.seed)?;
    println!(
        "training {} parameters on {} beats, testing on {}",
        model.store.numel(),
        split.train.len(),
        split.test.len()
    );
    let summary = run_training(&mut model, &split, &s.train, |record, m| {
        writeln!(log, "{record}")?;
        println!("{record}");
        checkpoint::save(m, &ckpt)
    })?;
    if let Some(cm) = summary.test_confusion {
        let report = per_class_metrics(&cm)?;
        print!("{}", report.to_text(&names));
        fs::write(a.out_dir.join("confusion.csv"), cm.to_csv(&names))?;
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<MambaCapsule> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn source_records(config: Option<&Path>, model: &MambaCapsule, src: &SourceArgs) -> Result<Vec<BeatRecord>> {
    let defaults = resolve(&read_config(config)?, &Overrides::default())?.data;
    let k = model.config.n_classes;
    let mismatch = |d: Dataset| {
        let v = d.vocabulary();
        UsageError(format!(
            "checkpoint classifies {k} classes ({}) but the data uses {} ({})",
            model.vocabulary.names().join(", "),
            v.len(),
            v.names().join(", ")
        ))
    };
    let dataset = if src.synthetic {
        Some(Dataset::Synthetic)
    } else {
        src.dataset
    };
    if let Some(d) = dataset {
        if d.vocabulary().len() != k {
            return Err(mismatch(d).into());
        }
    }
    if src.synthetic {
        let per_class = src.synthetic_per_class.unwrap_or(defaults.synthetic_per_class);
        let seed = src.data_seed.unwrap_or(defaults.data_seed);
        let split = synthetic_split(per_class, model.config.seq_len, seed);
        return Ok(match src.split {
            Split::Train => split.train,
            Split::Test => split.test,
        });
    }
    let Some(csv) = src.csv.as_ref().or(defaults.test_csv.as_ref()) else {
        return Err(UsageError("pass --csv PATH or --synthetic".into()).into());
    };
    let records = load_csv(csv, model.config.seq_len, k).with_context(|| format!("loading {}", csv.display()))?;
    if records.is_empty() {
        return Err(UsageError(format!("{} holds no beats", csv.display())).into());
    }
    Ok(records)
}

pub fn eval(config: Option<&Path>, a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let records = source_records(config, &model, &a.source)?;
    let names = model.vocabulary.names().to_vec();
    let cm = evaluate(&model, &records)?;
    let report = per_class_metrics(&cm)?;
    println!("beats={} accuracy={:.4}", cm.total(), cm.overall_accuracy());
    print!("{}", report.to_text(&names));
    for z in &report.zero_division {
        println!(
            "note: {} of class {} has a zero denominator and is reported as 0",
            z.metric, names[z.class]
        );
    }
    fs::write(&a.confusion_out, cm.to_csv(&names))?;
    if let Some(p) = &a.report_csv {
        fs::write(p, report.to_csv(&names))?;
    }
    println!("confusion matrix written to {}", a.confusion_out.display());
    Ok(())
}

pub fn explain(config: Option<&Path>, a: ExplainArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let records = source_records(config, &model, &a.source)?;
    let beat = records
        .get(a.index)
        .ok_or_else(|| UsageError(format!("index {} is out of range for {} beats", a.index, records.len())))?;
    let vocab = &model.vocabulary;
    println!("beat={} label={}", a.index, vocab.name(beat.label));
    let traces = match a.mode {
        crate::ExplainMode::Shift => {
            let shifts = parse_shifts(&a.shifts)?;
            let study = disturbance_study(&model, &beat.samples, &shifts)?;
            println!("reference_mse={:.6e}", study.reference_mse);
            for t in &study.traces {
                println!(
                    "shift={} predicted={} score={:.6e}",
                    t.shift,
                    vocab.name(t.predicted),
                    t.score
                );
            }
            println!("mean_score={:.6e}", study.mean_score());
            study
                .traces
                .into_iter()
                .map(|t| Trace::new(format!("shift={}", t.shift), t.reconstruction))
                .collect::<Vec<_>>()
        }
        crate::ExplainMode::Crosslabel => {
            let targets = match &a.target {
                Some(name) => vec![vocab.index_of(name).ok_or_else(|| {
                    UsageError(format!(
                        "unknown class {name:?}; the checkpoint's classes are {}",
                        vocab.names().join(", ")
                    ))
                })?],
                None => (0..vocab.len()).collect(),
            };
            let mut traces = Vec::with_capacity(targets.len());
            for target in targets {
                let cl = cross_label_reconstruct(&model, &beat.samples, target)?;
                let energy = p_phase_energy(&cl.reconstruction, model.config.seq_len)
                    .map(|e| format!(" p_phase_energy={e:.6e}"))
                    .unwrap_or_default();
                println!(
                    "target={} argmax={} target_norm={:.6} argmax_norm={:.6} rescaled_norm={:.6}{energy}",
                    vocab.name(cl.target),
                    vocab.name(cl.argmax),
                    cl.target_norm,
                    cl.argmax_norm,
                    cl.rescaled_norm
                );
                traces.push(Trace::new(format!("as={}", vocab.name(target)), cl.reconstruction));
            }
            traces
        }
    };
    let csv = emit_plot(&traces, &a.out)?;
    println!(
        "{} traces written to {} and {}",
        traces.len(),
        a.out.display(),
        csv.display()
    );
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.per_class == 0 || a.len < 16 {
        return Err(UsageError("need at least one beat per class and 16 samples per beat".into()).into());
    }
    let beats = synth_beats(a.per_class, a.len, a.seed);
    write_csv(&a.out, &beats)?;
    println!("{} beats written to {}", beats.len(), a.out.display());
    Ok(())
}
