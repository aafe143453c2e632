//! Capsule head: primary capsules, per-pair vote transforms and dynamic
//! routing by agreement.
//!
//! Routing starts from zero logits `b` and repeats `r` times:
//!
//! ```text
//! c_i   = softmax_j(b_i)
//! s_j   = sum_i c_ij u_hat_{j|i}
//! v_j   = squash(s_j)
//! b_ij += <v_j, u_hat_{j|i}>
//! ```
//!
//! `b` and `c` are recomputed per forward pass and gradients flow through
//! every iteration.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CapsuleParams {
    /// Vote transforms, shape `[P, K, class_dim, primary_dim]`.
    pub votes_w: ParamId,
    pub pool_stride: usize,
    pub primary_dim: usize,
    pub routing_iters: usize,
}

impl CapsuleParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let shape = [cfg.n_primary(), cfg.n_classes, cfg.class_dim, cfg.primary_dim];
        let bound = (1.0 / cfg.primary_dim as f64).sqrt();
        Self {
            votes_w: store.add("capsule.votes_w", uniform(rng, &shape, bound)),
            pool_stride: cfg.pool_stride,
            primary_dim: cfg.primary_dim,
            routing_iters: cfg.routing_iters,
        }
    }
}

/// Output of the routing layer, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleVars {
    /// `[B, K, class_dim]`
    pub capsules: Var,
    /// `[B, K]`
    pub norms: Var,
}

/// Class capsules detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleOutput {
    pub capsules: Tensor,
    pub norms: Tensor,
}

impl CapsuleOutput {
    pub fn from_tape(tape: &Tape, vars: CapsuleVars) -> Self {
        Self {
            capsules: tape.value(vars.capsules).clone(),
            norms: tape.value(vars.norms).clone(),
        }
    }

    pub fn batch(&self) -> usize {
        self.norms.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.norms.shape()[1]
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.norms.data().chunks(self.n_classes()).map(argmax).collect()
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pools `features: [B, L, D]` with stride `stride`, regroups channels into
/// capsules of `dim`, and squashes them. Returns `[B, P, dim]`.
pub fn form_primary_capsules(tape: &mut Tape, features: Var, stride: usize, dim: usize) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 3 {
        return Err(Error::Shape(format!("features must be [B, L, D], got {fs:?}")));
    }
    let (b, l, d) = (fs[0], fs[1], fs[2]);
    if stride == 0 || l % stride != 0 {
        return Err(Error::Config(format!(
            "pool stride {stride} does not divide length {l}"
        )));
    }
    let pooled_len = l / stride;
    if dim == 0 || !(pooled_len * d).is_multiple_of(dim) {
        return Err(Error::Config(format!(
            "capsule dim {dim} does not divide pooled size {}",
            pooled_len * d
        )));
    }
    let grouped = tape.reshape(features, &[b, pooled_len, stride, d])?;
    let pooled = tape.mean_axis(grouped, 2, false)?;
    let caps = tape.reshape(pooled, &[b, pooled_len * d / dim, dim])?;
    Ok(tape.squash(caps))
}

/// `u_hat[b, i, j] = W[i, j] u[b, i]` for `u: [B, P, Dp]`, `w: [P, K, Dc, Dp]`.
pub fn predict_votes(tape: &mut Tape, u: Var, w: Var) -> Result<Var> {
    let (us, ws) = (tape.shape(u).to_vec(), tape.shape(w).to_vec());
    if us.len() != 3 || ws.len() != 4 || us[1] != ws[0] || us[2] != ws[3] {
        return Err(Error::dim("predict_votes", &us, &ws));
    }
    let (b, p, dp) = (us[0], us[1], us[2]);
    let (k, dc) = (ws[1], ws[2]);
    let u4 = tape.reshape(u, &[b, p, dp, 1])?;
    let w3 = tape.reshape(w, &[p, k * dc, dp])?;
    let votes = tape.matmul(w3, u4)?;
    tape.reshape(votes, &[b, p, k, dc])
}

/// Dynamic routing of `votes: [B, P, K, Dc]` for `iters` rounds.
///
/// Returns the class capsules and, for inspection, the coupling
/// coefficients `[B, P, K]` used in each round.
pub fn dynamic_routing(tape: &mut Tape, votes: Var, iters: usize) -> Result<(CapsuleVars, Vec<Tensor>)> {
    if iters < 1 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let vs = tape.shape(votes).to_vec();
    if vs.len() != 4 {
        return Err(Error::Shape(format!("votes must be [B, P, K, D], got {vs:?}")));
    }
    let (b, p, k, dc) = (vs[0], vs[1], vs[2], vs[3]);
    let mut logits = tape.constant(Tensor::zeros([b, p, k]));
    let mut history = Vec::with_capacity(iters);
    let mut v = logits;
    for round in 0..iters {
        let c = tape.softmax(logits, 2)?;
        history.push(tape.value(c).clone());
        let c4 = tape.reshape(c, &[b, p, k, 1])?;
        let weighted = tape.mul(c4, votes)?;
        let s = tape.sum_axis(weighted, 1, false)?;
        v = tape.squash(s);
        if round + 1 < iters {
            let v4 = tape.reshape(v, &[b, 1, k, dc])?;
            let prod = tape.mul(v4, votes)?;
            let agreement = tape.sum_axis(prod, 3, false)?;
            logits = tape.add(logits, agreement)?;
        }
    }
    let norms = tape.l2norm(v, 2)?;
    Ok((CapsuleVars { capsules: v, norms }, history))
}

/// Features `[B, L, D]` to class capsules.
pub fn classify(tape: &mut Tape, p: &Bound, caps: &CapsuleParams, features: Var) -> Result<CapsuleVars> {
    let u = form_primary_capsules(tape, features, caps.pool_stride, caps.primary_dim)?;
    let votes = predict_votes(tape, u, p.var(caps.votes_w))?;
    Ok(dynamic_routing(tape, votes, caps.routing_iters)?.0)
}
