//! Trains the tiny model on the synthetic two-class task, saves a checkpoint
//! and prints reconstruction statistics on the test beats.
//!
//! cargo run --release -p mambacaps-core --example toy_train -- toy.ckpt

use std::time::Instant;

use mambacaps_core::data::synth_beats;
use mambacaps_core::explain::{cross_label_reconstruct, disturbance_study, p_phase_energy};
use mambacaps_core::training::recon::center_window;
use mambacaps_core::{checkpoint, DatasetSplit, LabelVocabulary, MambaCapsule, ModelConfig, TrainConfig};

fn main() -> mambacaps_core::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "toy.ckpt".into());
    let cfg = ModelConfig::tiny();
    let split = DatasetSplit {
        train: synth_beats(100, cfg.seq_len, 11),
        test: synth_beats(50, cfg.seq_len, 12),
        seed: 0,
    };
    let mut model = MambaCapsule::new(cfg.clone(), LabelVocabulary::synthetic(), 1)?;
    let tc = TrainConfig {
        workers: 4,
        ..TrainConfig::tiny()
    };
    let start = Instant::now();
    mambacaps_core::training::train(&mut model, &split, &tc, |r, _| {
        println!("{r} t={:.1}s", start.elapsed().as_secs_f64());
        Ok(())
    })?;
    checkpoint::save(&model, &out)?;
    println!("saved {out}");

    let window = center_window(cfg.seq_len, model.recon.out_len)?;
    let out = model.infer_records(&split.test)?;
    let (k, dc) = (cfg.n_classes, cfg.class_dim);
    let (mut true_wins, mut p_wins) = (0, 0);
    let (mut ratio_sum, mut n) = (0.0, 0);
    for (b, rec) in split.test.iter().enumerate() {
        let caps = mambacaps_core::Tensor::new([1, k, dc], out.capsules.data()[b * k * dc..(b + 1) * k * dc].to_vec())?;
        let err = |c: usize| -> mambacaps_core::Result<f64> {
            let r = model.reconstruct(&caps, &[c])?;
            let x = &rec.samples[window.clone()];
            Ok(r.data().iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
        };
        if err(rec.label)? < err(1 - rec.label)? {
            true_wins += 1;
        }
        let normal = cross_label_reconstruct(&model, &rec.samples, 0)?;
        let suppressed = cross_label_reconstruct(&model, &rec.samples, 1)?;
        if p_phase_energy(&suppressed.reconstruction, cfg.seq_len)?
            < p_phase_energy(&normal.reconstruction, cfg.seq_len)?
        {
            p_wins += 1;
        }
        let study = disturbance_study(&model, &rec.samples, &(-5..=5).collect::<Vec<_>>())?;
        ratio_sum += study.mean_score() / study.reference_mse;
        n += 1;
    }
    println!(
        "true-label recon better on {true_wins}/{n}; P-energy contrast on {p_wins}/{n}; mean shift score / ref mse = {:.4}",
        ratio_sum / n as f64
    );
    Ok(())
}
