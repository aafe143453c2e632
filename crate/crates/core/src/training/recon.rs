//! Reconstruction network: a three-layer MLP decoding one class capsule
//! (all others masked to zero) back into the central window of the beat.

use std::ops::Range;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::linear;
use crate::params::{linear_init, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ReconstructorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    pub n_classes: usize,
    pub class_dim: usize,
    pub out_len: usize,
    pub sigmoid: bool,
}

impl ReconstructorParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let input = cfg.n_classes * cfg.class_dim;
        let [h1, h2] = cfg.recon_hidden;
        let out = cfg.recon_len();
        Self {
            w1: store.add("recon.w1", linear_init(rng, input, h1)),
            b1: store.add("recon.b1", Tensor::zeros([h1])),
            w2: store.add("recon.w2", linear_init(rng, h1, h2)),
            b2: store.add("recon.b2", Tensor::zeros([h2])),
            w3: store.add("recon.w3", linear_init(rng, h2, out)),
            b3: store.add("recon.b3", Tensor::zeros([out])),
            n_classes: cfg.n_classes,
            class_dim: cfg.class_dim,
            out_len: out,
            sigmoid: cfg.recon_sigmoid,
        }
    }
}

/// Centred window of length `out_len` inside a beat of length `len`.
pub fn center_window(len: usize, out_len: usize) -> Result<Range<usize>> {
    if out_len == 0 || out_len > len {
        return Err(Error::Config(format!(
            "reconstruction window {out_len} does not fit a beat of length {len}"
        )));
    }
    let start = (len - out_len) / 2;
    Ok(start..start + out_len)
}

/// One-hot `[B, K, 1]` mask selecting `choose[b]` in row `b`.
pub fn capsule_mask(choose: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut mask = Tensor::zeros([choose.len().max(1), n_classes, 1]);
    for (b, &k) in choose.iter().enumerate() {
        if k >= n_classes {
            return Err(Error::Config(format!(
                "class index {k} out of range for {n_classes} classes"
            )));
        }
        mask.set(&[b, k, 0], 1.0);
    }
    Ok(mask)
}

/// Decodes already-masked capsules `[B, K, Dc]` into `[B, out_len]`.
pub fn decode(tape: &mut Tape, p: &Bound, r: &ReconstructorParams, masked: Var) -> Result<Var> {
    let b = tape.shape(masked)[0];
    let flat = tape.reshape(masked, &[b, r.n_classes * r.class_dim])?;
    let h = linear(tape, flat, p.var(r.w1), Some(p.var(r.b1)))?;
    let h = tape.relu(h);
    let h = linear(tape, h, p.var(r.w2), Some(p.var(r.b2)))?;
    let h = tape.relu(h);
    let out = linear(tape, h, p.var(r.w3), Some(p.var(r.b3)))?;
    Ok(if r.sigmoid { tape.sigmoid(out) } else { out })
}

/// Masks every capsule except `choose[b]` and decodes.
pub fn reconstruct(
    tape: &mut Tape,
    p: &Bound,
    r: &ReconstructorParams,
    capsules: Var,
    choose: &[usize],
) -> Result<Var> {
    let shape = tape.shape(capsules).to_vec();
    if shape.len() != 3 || shape[0] != choose.len() {
        return Err(Error::Shape(format!(
            "capsules {shape:?} do not match {} chosen classes",
            choose.len()
        )));
    }
    let mask = tape.constant(capsule_mask(choose, r.n_classes)?);
    let masked = tape.mul(capsules, mask)?;
    decode(tape, p, r, masked)
}

/// MSE between `recon: [B, Lr]` and the centred `Lr`-window of `x: [B, L]`.
pub fn reconstruction_loss(tape: &mut Tape, recon: Var, x: &Tensor) -> Result<Var> {
    let rs = tape.shape(recon).to_vec();
    let xs = x.shape();
    if xs.len() != 2 || rs.len() != 2 || rs[0] != xs[0] {
        return Err(Error::dim("reconstruction_loss", &rs, xs));
    }
    let window = center_window(xs[1], rs[1])?;
    let target: Vec<f64> = x
        .data()
        .chunks(xs[1])
        .flat_map(|row| row[window.clone()].iter().copied())
        .collect();
    let target = tape.constant(Tensor::new(rs, target)?);
    tape.mse(recon, target)
}
