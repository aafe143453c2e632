use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Positive margin at step 0; it then follows the `m_plus` schedule.
    pub m_plus_start: f64,
    pub m_minus: f64,
    /// Down-weighting of absent-class hinge terms.
    pub lambda: f64,
    pub recon_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_model(&ModelConfig::default())
    }
}

impl LossConfig {
    /// Defaults with `recon_weight = 0.0005 * window_len`, i.e. 0.0005 times
    /// the summed (rather than mean) squared reconstruction error.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            m_plus_start: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            recon_weight: 0.0005 * cfg.recon_len() as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus_start && self.m_plus_start < 1.0) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 < m_minus ({}) < m_plus_start ({}) < 1",
                self.m_minus, self.m_plus_start
            )));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!("lambda ({}) must be positive", self.lambda)));
        }
        if self.recon_weight < 0.0 || !self.recon_weight.is_finite() {
            return Err(Error::Config(format!(
                "recon_weight ({}) must be finite and non-negative",
                self.recon_weight
            )));
        }
        Ok(())
    }
}

/// Batch mean of
/// `sum_k T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2`.
pub fn margin_loss(tape: &mut Tape, norms: Var, labels: &[usize], m_plus: f64, cfg: &LossConfig) -> Result<Var> {
    let shape = tape.shape(norms).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "norms {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (b, k) = (shape[0], shape[1]);
    let mut present = Tensor::zeros([b, k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Config(format!("label {l} out of range for {k} classes")));
        }
        present.set(&[i, l], 1.0);
    }
    let absent = present.map(|t| cfg.lambda * (1.0 - t));
    let present = tape.constant(present);
    let absent = tape.constant(absent);

    let neg = tape.scale(norms, -1.0);
    let short = tape.add_scalar(neg, m_plus);
    let short = tape.relu(short);
    let short = tape.square(short);
    let pos_term = tape.mul(short, present)?;

    let long = tape.add_scalar(norms, -cfg.m_minus);
    let long = tape.relu(long);
    let long = tape.square(long);
    let neg_term = tape.mul(long, absent)?;

    let both = tape.add(pos_term, neg_term)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `margin + recon_weight * recon`.
pub fn total_loss(tape: &mut Tape, margin: Var, recon: Var, cfg: &LossConfig) -> Result<Var> {
    let weighted = tape.scale(recon, cfg.recon_weight);
    tape.add(margin, weighted)
}
