//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use mambacaps_core::autodiff::{Tape, Var};
use mambacaps_core::{ModelConfig, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest relative error between the tape gradient of `f` and central
/// finite differences, over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect();

    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_EPS;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_EPS;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output element contributes a distinct cotangent.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(&mut rng(seed), tape.shape(out), -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Selective scan written as an explicit sum over past inputs:
/// `y_t = sum_{s<=t} <C_t, (prod_{r=s+1..t} A_bar_r) B_bar_s> x_s`, with
/// `A_bar = exp(delta A)` and `B_bar = (exp(delta A) - 1) / A * B`.
pub fn scan_oracle(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Tensor {
    let (bs, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = a.shape()[1];
    let mut y = Tensor::zeros([bs, l, d]);
    for bi in 0..bs {
        for di in 0..d {
            for t in 0..l {
                let mut acc = 0.0;
                for s in 0..=t {
                    for ni in 0..n {
                        let av = a.get(&[di, ni]);
                        let mut decay = 1.0;
                        for r in s + 1..=t {
                            decay *= (delta.get(&[bi, r, di]) * av).exp();
                        }
                        let ds = delta.get(&[bi, s, di]);
                        let b_bar = ((ds * av).exp() - 1.0) / av * b.get(&[bi, s, ni]);
                        acc += c.get(&[bi, t, ni]) * decay * b_bar * x.get(&[bi, s, di]);
                    }
                }
                y.set(&[bi, t, di], acc);
            }
        }
    }
    y
}

/// Squash of one vector, zero for a zero input.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    let n = n2.sqrt();
    if n < 1e-12 {
        return vec![0.0; s.len()];
    }
    s.iter().map(|v| n2 / (1.0 + n2) * v / n).collect()
}

/// Routing by agreement for a single example, written out with nested loops.
pub fn scripted_routing(u: &[Vec<Vec<f64>>], iters: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let (p, k, d) = (u.len(), u[0].len(), u[0][0].len());
    let mut b = vec![vec![0.0; k]; p];
    let mut v = vec![vec![0.0; d]; k];
    let mut cs = Vec::new();
    for it in 0..iters {
        let c: Vec<Vec<f64>> = b
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            })
            .collect();
        for j in 0..k {
            let mut s = vec![0.0; d];
            for i in 0..p {
                for (sv, uv) in s.iter_mut().zip(&u[i][j]) {
                    *sv += c[i][j] * uv;
                }
            }
            v[j] = squash(&s);
        }
        cs.push(c);
        if it + 1 < iters {
            for i in 0..p {
                for j in 0..k {
                    b[i][j] += v[j].iter().zip(&u[i][j]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    (v, cs)
}

/// The configuration used for whole-network gradient checks.
pub fn grad_config() -> ModelConfig {
    ModelConfig {
        seq_len: 16,
        d_model: 4,
        n_layers: 1,
        d_state: 2,
        n_branches: 2,
        conv_width: 3,
        dropout: 0.1,
        pool_stride: 4,
        primary_dim: 4,
        class_dim: 4,
        n_classes: 2,
        routing_iters: 2,
        recon_hidden: [6, 6],
        window_fraction: 0.6,
        recon_sigmoid: true,
    }
}

/// Reference MIT-BIH confusion matrix (rows true, columns predicted; N S V F Q).
pub const MITBIH_CONFUSION: [[u64; 5]; 5] = [
    [18092, 11, 14, 0, 1],
    [153, 401, 1, 0, 1],
    [3, 7, 1422, 11, 5],
    [29, 0, 11, 122, 0],
    [1, 0, 6, 0, 1601],
];

/// Reference per-class scores for that matrix, columns ACC SEN F1 PPV SPEC,
/// rows N S V F Q then the macro average.
pub const MITBIH_SCORES: [[f64; 5]; 6] = [
    [99.03, 99.86, 99.44, 98.98, 95.07],
    [99.21, 72.12, 83.52, 95.70, 99.92],
    [99.74, 98.20, 98.96, 97.80, 99.84],
    [99.77, 75.31, 85.29, 91.73, 99.95],
    [99.94, 99.56, 99.75, 99.56, 99.97],
    [99.54, 89.01, 93.50, 96.76, 98.95],
];

/// The one reference cell (class F, F1) that the matrix does not support;
/// the matrix gives 85.83, which is also what the reference macro F1 needs.
pub const MITBIH_F1_FROM_MATRIX: (usize, usize, f64) = (3, 2, 85.83);

/// Reference PTB confusion matrix (Normal, MI).
pub const PTB_CONFUSION: [[u64; 2]; 2] = [[800, 9], [4, 2096]];

/// Reference PTB per-class scores (Normal, MI, macro), same column order.
pub const PTB_SCORES: [[f64; 5]; 3] = [
    [99.59, 99.24, 98.89, 99.63, 99.86],
    [99.59, 99.72, 99.86, 99.57, 98.89],
    [99.59, 99.48, 99.37, 99.60, 99.37],
];

pub fn confusion_from<const K: usize>(rows: &[[u64; K]]) -> mambacaps_core::ConfusionMatrix {
    let rows: Vec<Vec<u64>> = rows.iter().map(|r| r.to_vec()).collect();
    mambacaps_core::ConfusionMatrix::from_rows(&rows).unwrap()
}

pub fn score_row(m: &mambacaps_core::metrics::ClassMetrics) -> [f64; 5] {
    [m.acc, m.sen, m.f1, m.ppv, m.spec]
}
