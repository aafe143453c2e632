//! Selective state-space feature network.
//!
//! Each fusion block convolves its input, runs `m` selective SSM branches
//! tuned to different time scales, projects every branch down to
//! `d_model / m` channels, concatenates the branches, adds the residual and
//! layer-normalises:
//!
//! ```text
//! x_hat = conv1d(x)
//! u_j   = down_j(ssm_j(x_hat))                      j = 0..m
//! x'    = layer_norm(concat(u_0, .., u_{m-1}) + x)
//! ```
//!
//! A branch discretises a diagonal, strictly negative state matrix `A` with
//! a zero-order hold, using input-dependent step sizes and input/output maps:
//!
//! ```text
//! delta_t = softplus(delta_bias + x_t W_delta)
//! B_t = x_t W_B,   C_t = x_t W_C
//! A_bar = exp(delta A),   B_bar = (delta A)^-1 (exp(delta A) - 1) delta B_t
//! h_t = A_bar h_{t-1} + B_bar x_t,   y_t = <C_t, h_t>
//! ```

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{dropout, linear, Mode};
use crate::params::{linear_init, normal, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Below this `|delta * A|` the ZOH input gain uses its Taylor series.
const SERIES_THRESHOLD: f64 = 1e-6;

/// `(A_bar, q)` for one diagonal entry, where `B_bar = q * B`.
#[inline]
pub fn zoh(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let phi = if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    };
    (z.exp(), delta * phi)
}

/// d q / d A for `q = delta * phi(delta * A)`.
#[inline]
fn zoh_gain_da(a: f64, delta: f64) -> f64 {
    let z = delta * a;
    let dphi = if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    };
    delta * delta * dphi
}

fn check_delta(delta: &[f64]) -> Result<()> {
    match delta.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        Some(d) => Err(Error::Numeric(format!(
            "step size must be positive and finite, got {d}"
        ))),
        None => Ok(()),
    }
}

/// Zero-order-hold discretisation of a diagonal system.
///
/// `a: [D, N]`, `b: [B, L, N]`, `delta: [B, L, D]`; returns
/// `(A_bar, B_bar)`, both `[B, L, D, N]`.
pub fn discretize(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    let (ds, bs, dls) = (a.shape(), b.shape(), delta.shape());
    if ds.len() != 2 || bs.len() != 3 || dls.len() != 3 || bs[..2] != dls[..2] {
        return Err(Error::dim("discretize", bs, dls));
    }
    let (d, n) = (ds[0], ds[1]);
    if dls[2] != d || bs[2] != n {
        return Err(Error::dim("discretize", ds, bs));
    }
    check_delta(delta.data())?;
    let steps = bs[0] * bs[1];
    let mut a_bar = Vec::with_capacity(steps * d * n);
    let mut b_bar = Vec::with_capacity(steps * d * n);
    for s in 0..steps {
        for di in 0..d {
            let dt = delta.data()[s * d + di];
            for ni in 0..n {
                let (ab, q) = zoh(a.data()[di * n + ni], dt);
                a_bar.push(ab);
                b_bar.push(q * b.data()[s * n + ni]);
            }
        }
    }
    let shape = [bs[0], bs[1], d, n];
    Ok((Tensor::new(shape, a_bar)?, Tensor::new(shape, b_bar)?))
}

struct ScanDims {
    batch: usize,
    len: usize,
    d: usize,
    n: usize,
}

fn scan_forward(x: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64], dims: &ScanDims) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { batch, len, d, n } = *dims;
    let mut y = vec![0.0; batch * len * d];
    let mut hs = vec![0.0; batch * len * d * n];
    for bi in 0..batch {
        let mut h = vec![0.0; d * n];
        for t in 0..len {
            let s = bi * len + t;
            for di in 0..d {
                let dt = delta[s * d + di];
                let xv = x[s * d + di];
                let mut acc = 0.0;
                for ni in 0..n {
                    let (ab, q) = zoh(a[di * n + ni], dt);
                    let hv = ab * h[di * n + ni] + q * b[s * n + ni] * xv;
                    h[di * n + ni] = hv;
                    acc += c[s * n + ni] * hv;
                }
                y[s * d + di] = acc;
            }
            hs[s * d * n..(s + 1) * d * n].copy_from_slice(&h);
        }
    }
    (y, hs)
}

/// Fused selective scan: inputs `[x, delta, a_log, b, c]`, `A = -exp(a_log)`.
struct SelectiveScanOp {
    dims: ScanDims,
    hidden: Vec<f64>,
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ScanDims { batch, len, d, n } = self.dims;
        let (x, delta, a_log, b, c) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
        let mut gx = vec![0.0; x.len()];
        let mut gdelta = vec![0.0; delta.len()];
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        let mut gc = vec![0.0; c.len()];
        let h = &self.hidden;
        for bi in 0..batch {
            let mut gh_next = vec![0.0; d * n];
            let mut a_bar_next = vec![0.0; d * n];
            for t in (0..len).rev() {
                let s = bi * len + t;
                for di in 0..d {
                    let dt = delta[s * d + di];
                    let xv = x[s * d + di];
                    let gyv = gy[s * d + di];
                    for ni in 0..n {
                        let k = di * n + ni;
                        let av = a[k];
                        let (ab, q) = zoh(av, dt);
                        let gh = c[s * n + ni] * gyv + a_bar_next[k] * gh_next[k];
                        let h_prev = if t > 0 { h[(s - 1) * d * n + k] } else { 0.0 };
                        let g_abar = gh * h_prev;
                        let g_bbar = gh * xv;
                        let bv = b[s * n + ni];
                        gx[s * d + di] += gh * q * bv;
                        gc[s * n + ni] += gyv * h[s * d * n + k];
                        gdelta[s * d + di] += g_abar * av * ab + g_bbar * bv * ab;
                        ga[k] += g_abar * dt * ab + g_bbar * bv * zoh_gain_da(av, dt);
                        gb[s * n + ni] += g_bbar * q;
                        gh_next[k] = gh;
                        a_bar_next[k] = ab;
                    }
                }
            }
        }
        // A = -exp(a_log) => dA/da_log = A
        for (g, av) in ga.iter_mut().zip(&a) {
            *g *= av;
        }
        for (slot, g) in grads.iter_mut().zip([gx, gdelta, ga, gb, gc]) {
            if let Some(buf) = slot {
                buf.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
        }
    }
}

/// Records the selective scan recurrence on `tape`.
///
/// `x, delta: [B, L, D]`, `a_log: [D, N]`, `b, c: [B, L, N]`; returns `y: [B, L, D]`.
pub fn scan(tape: &mut Tape, x: Var, delta: Var, a_log: Var, b: Var, c: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 || tape.shape(delta) != xs.as_slice() {
        return Err(Error::dim("selective_scan", &xs, tape.shape(delta)));
    }
    let (batch, len, d) = (xs[0], xs[1], xs[2]);
    let ash = tape.shape(a_log).to_vec();
    if ash.len() != 2 || ash[0] != d {
        return Err(Error::dim("selective_scan", &xs, &ash));
    }
    let n = ash[1];
    for v in [b, c] {
        if tape.shape(v) != [batch, len, n] {
            return Err(Error::dim("selective_scan", &[batch, len, n], tape.shape(v)));
        }
    }
    check_delta(tape.value(delta).data())?;
    let a: Vec<f64> = tape.value(a_log).data().iter().map(|v| -v.exp()).collect();
    let dims = ScanDims { batch, len, d, n };
    let (y, hidden) = scan_forward(
        tape.value(x).data(),
        tape.value(delta).data(),
        &a,
        tape.value(b).data(),
        tape.value(c).data(),
        &dims,
    );
    let out = Tensor::new(xs, y)?;
    Ok(tape.custom(
        &[x, delta, a_log, b, c],
        out,
        Box::new(SelectiveScanOp { dims, hidden }),
    ))
}

/// Parameters of one selective SSM branch.
#[derive(Clone, Debug)]
pub struct SsmBranchParams {
    /// `log(-A)`, shape `[D, N]`; keeps `A` strictly negative.
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    /// Learned base value added before the step-size softplus, shape `[D]`.
    pub delta_bias: ParamId,
    pub w_delta: ParamId,
    /// Depthwise convolution of the branch, shape `[conv_width, D]`.
    pub conv: ParamId,
    pub conv_width: usize,
    /// Multiplier on the initial step-size range of this branch.
    pub delta_scale: f64,
}

impl SsmBranchParams {
    /// Branch `index` gets conv width `2 * index + 1` and initial step sizes
    /// drawn from `[0.001, 0.1] * 4^index`.
    pub fn init(store: &mut ParamStore, prefix: &str, index: usize, d: usize, n: usize, rng: &mut impl Rng) -> Self {
        let conv_width = 2 * index + 1;
        let delta_scale = 4f64.powi(index as i32);
        let a_log = Tensor::new(
            [d, n],
            (0..d).flat_map(|_| (0..n).map(|ni| ((ni + 1) as f64).ln())).collect(),
        )
        .expect("shape matches");
        let range = Uniform::new_inclusive(0.001 * delta_scale, 0.1 * delta_scale).expect("valid range");
        // softplus^-1(dt) = dt + ln(1 - e^-dt)
        let delta_bias: Vec<f64> = (0..d)
            .map(|_| {
                let dt: f64 = range.sample(rng);
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let mut conv = normal(rng, &[conv_width, d], 0.1);
        for c in 0..d {
            conv.set(&[conv_width / 2, c], 1.0);
        }
        Self {
            a_log: store.add(format!("{prefix}.a_log"), a_log),
            w_b: store.add(format!("{prefix}.w_b"), linear_init(rng, d, n)),
            w_c: store.add(format!("{prefix}.w_c"), linear_init(rng, d, n)),
            delta_bias: store.add(
                format!("{prefix}.delta_bias"),
                Tensor::new([d], delta_bias).expect("shape"),
            ),
            w_delta: store.add(
                format!("{prefix}.w_delta"),
                normal(rng, &[d, d], 0.1 / (d as f64).sqrt()),
            ),
            conv: store.add(format!("{prefix}.conv"), conv),
            conv_width,
            delta_scale,
        }
    }
}

/// Runs one branch on `x: [B, L, D]`: depthwise conv, input-dependent
/// projections, then the scan. Returns `[B, L, D]`.
pub fn selective_scan(tape: &mut Tape, p: &Bound, branch: &SsmBranchParams, x: Var) -> Result<Var> {
    let z = tape.conv1d(x, p.var(branch.conv))?;
    let b = tape.matmul(z, p.var(branch.w_b))?;
    let c = tape.matmul(z, p.var(branch.w_c))?;
    let pre = linear(tape, z, p.var(branch.w_delta), Some(p.var(branch.delta_bias)))?;
    let delta = tape.softplus(pre);
    scan(tape, z, delta, p.var(branch.a_log), b, c)
}

#[derive(Clone, Debug)]
pub struct FusionBlockParams {
    pub conv: ParamId,
    pub branches: Vec<SsmBranchParams>,
    /// Per-branch channel projections `[D, D / m]`.
    pub down: Vec<ParamId>,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl FusionBlockParams {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, m) = (cfg.d_model, cfg.n_branches);
        if m == 0 || d % m != 0 {
            return Err(Error::Config(format!("n_branches ({m}) must divide d_model ({d})")));
        }
        let mut conv = normal(rng, &[cfg.conv_width, d], 0.1);
        for c in 0..d {
            conv.set(&[cfg.conv_width / 2, c], 1.0);
        }
        let conv = store.add(format!("{prefix}.conv"), conv);
        let mut branches = Vec::with_capacity(m);
        let mut down = Vec::with_capacity(m);
        for j in 0..m {
            branches.push(SsmBranchParams::init(
                store,
                &format!("{prefix}.branch{j}"),
                j,
                d,
                cfg.d_state,
                rng,
            ));
            down.push(store.add(format!("{prefix}.down{j}"), linear_init(rng, d, d / m)));
        }
        Ok(Self {
            conv,
            branches,
            down,
            ln_gamma: store.add(format!("{prefix}.ln_gamma"), Tensor::full([d], 1.0)),
            ln_beta: store.add(format!("{prefix}.ln_beta"), Tensor::zeros([d])),
        })
    }
}

/// One fusion block; output shape equals input shape `[B, L, D]`.
pub fn fusion_block(tape: &mut Tape, p: &Bound, block: &FusionBlockParams, x: Var) -> Result<Var> {
    let x_hat = tape.conv1d(x, p.var(block.conv))?;
    let mut parts = Vec::with_capacity(block.branches.len());
    for (branch, &down) in block.branches.iter().zip(&block.down) {
        let y = selective_scan(tape, p, branch, x_hat)?;
        parts.push(tape.matmul(y, p.var(down))?);
    }
    let joined = tape.concat(&parts, 2)?;
    let residual = tape.add(joined, x)?;
    tape.layer_norm(residual, p.var(block.ln_gamma), p.var(block.ln_beta))
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// `[1, D]` map from a scalar sample to `D` channels.
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub blocks: Vec<FusionBlockParams>,
    pub seq_len: usize,
    pub dropout: f64,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.n_layers < 1 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let d = cfg.d_model;
        let up_w = store.add("encoder.up_w", normal(rng, &[1, d], 1.0));
        let up_b = store.add("encoder.up_b", normal(rng, &[d], 0.1));
        let blocks = (0..cfg.n_layers)
            .map(|i| FusionBlockParams::init(store, &format!("encoder.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            up_w,
            up_b,
            blocks,
            seq_len: cfg.seq_len,
            dropout: cfg.dropout,
        })
    }
}

/// Feature network: `x: [B, L]` to features `[B, L, D]`.
pub fn encode(tape: &mut Tape, p: &Bound, enc: &EncoderParams, x: Var, mode: Mode<'_>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != enc.seq_len {
        return Err(Error::Shape(format!(
            "encoder expects input [batch, {}], got {xs:?}",
            enc.seq_len
        )));
    }
    let x3 = tape.reshape(x, &[xs[0], xs[1], 1])?;
    let mut h = linear(tape, x3, p.var(enc.up_w), Some(p.var(enc.up_b)))?;
    h = dropout(tape, h, enc.dropout, mode, 0)?;
    for (i, block) in enc.blocks.iter().enumerate() {
        h = fusion_block(tape, p, block, h)?;
        h = dropout(tape, h, enc.dropout, mode, i as u64 + 1)?;
    }
    Ok(h)
}
