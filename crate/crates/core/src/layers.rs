//! Small building blocks shared by the encoder, capsule head and reconstructor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-pass mode. Training carries one seed per batch row so dropout
/// masks depend only on the sample, not on how a batch is sharded.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Eval,
    Train { sample_seeds: &'a [u64] },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// `x @ w + b` over the last axis of `x`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Inverted dropout. `site` distinguishes the dropout layers of one forward pass.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode<'_>, site: u64) -> Result<Var> {
    let Mode::Train { sample_seeds } = mode else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    if sample_seeds.len() != shape[0] {
        return Err(Error::Shape(format!(
            "dropout got {} sample seeds for batch of {}",
            sample_seeds.len(),
            shape[0]
        )));
    }
    let per_row = shape[1..].iter().product::<usize>();
    let keep = 1.0 - rate;
    let mut mask = Vec::with_capacity(shape[0] * per_row);
    for &seed in sample_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(site);
        mask.extend((0..per_row).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }));
    }
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}
