//! Central-difference checks of every differentiable op and of the full
//! fusion model.

use coordfuse::fusion::{build_fusion, predict_var, BranchConfig, ConvSpec, FusionModel, SessionInputs};
use coordfuse::tensor::nn::{
    conv1d_forward, dropout_forward, init_linear, init_mha, linear_forward, mean_pool_forward, mha_forward, mse_loss,
    relu_forward,
};
use coordfuse::tensor::{grad_check, grad_check_params, GradCheckReport, ParameterSet, Tape, Tensor, Var};
use coordfuse::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct OpResult {
    pub op: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

impl OpResult {
    fn from_report(op: &str, r: &GradCheckReport) -> Self {
        Self {
            op: op.to_string(),
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
            passed: r.max_rel_error <= TOLERANCE,
        }
    }
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Values bounded away from zero so the ReLU kink never sits inside `±h`.
fn away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn input_checks(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let pool_mask = vec![true, false, true, true];
    let soft_mask = vec![true, true, false, true, true];
    vec![
        (
            "matmul",
            Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1])),
            vec![rand_tensor(vec![3, 4], rng), rand_tensor(vec![4, 5], rng)],
        ),
        (
            "linear",
            Box::new(|t: &mut Tape, v: &[Var]| linear_forward(t, v[0], v[1], v[2])),
            vec![rand_tensor(vec![3, 4], rng), rand_tensor(vec![4, 2], rng), rand_tensor(vec![2], rng)],
        ),
        (
            "conv1d",
            Box::new(|t: &mut Tape, v: &[Var]| conv1d_forward(t, v[0], v[1], Some(v[2]), 2, 1)),
            vec![
                rand_tensor(vec![2, 3, 7], rng),
                rand_tensor(vec![4, 3, 3], rng),
                rand_tensor(vec![4], rng),
            ],
        ),
        (
            "relu",
            Box::new(|t: &mut Tape, v: &[Var]| Ok(relu_forward(t, v[0]))),
            vec![away_from_zero(vec![4, 5], rng)],
        ),
        (
            "dropout",
            Box::new(|t: &mut Tape, v: &[Var]| dropout_forward(t, v[0], 0.3, true, 17)),
            vec![rand_tensor(vec![4, 5], rng)],
        ),
        (
            "mean_pool",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let a = mean_pool_forward(t, v[0], 0, Some(&pool_mask))?;
                let b = mean_pool_forward(t, v[0], 1, None)?;
                let a = t.sum_all(a);
                let b = t.sum_all(b);
                let b = t.scale(b, 0.5);
                t.add(a, b)
            }),
            vec![rand_tensor(vec![4, 3], rng)],
        ),
        (
            "softmax",
            Box::new(move |t: &mut Tape, v: &[Var]| t.softmax_rows(v[0], Some(&soft_mask))),
            vec![rand_tensor(vec![3, 5], rng)],
        ),
        (
            "mse",
            Box::new(|t: &mut Tape, v: &[Var]| mse_loss(t, v[0], v[1])),
            vec![rand_tensor(vec![3, 2], rng), rand_tensor(vec![3, 2], rng)],
        ),
        (
            "reshape_transpose_slice_concat",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let r = t.reshape(v[0], vec![4, 3])?;
                let tr = t.transpose(r)?;
                let s = t.slice(tr, 1, 2, 0, 4)?;
                let c = t.concat(&[s, v[1]], 0)?;
                let e = t.mul(c, c)?;
                t.add(e, c)
            }),
            vec![rand_tensor(vec![2, 6], rng), rand_tensor(vec![1, 4], rng)],
        ),
    ]
}

fn nearest_rows(z: &[f64], table: &[f64], l: usize) -> Vec<usize> {
    z.chunks_exact(l)
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (k, e) in table.chunks_exact(l).enumerate() {
                let d: f64 = row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect()
}

/// `beta * commit + codebook` with nearest-code assignment.
fn vq_loss(tape: &mut Tape, z: Var, codebook: Var, indices: &[usize], beta: f64) -> Result<Var> {
    let rows = indices.len() as f64;
    let e = tape.gather_rows(codebook, indices)?;
    let e_sg = tape.stop_grad(e);
    let d = tape.sub(z, e_sg)?;
    let sq = tape.mul(d, d)?;
    let commit = tape.sum_all(sq);
    let commit = tape.scale(commit, beta / rows);
    let z_sg = tape.stop_grad(z);
    let d = tape.sub(z_sg, e)?;
    let sq = tape.mul(d, d)?;
    let cb = tape.sum_all(sq);
    let cb = tape.scale(cb, 1.0 / rows);
    tape.add(commit, cb)
}

/// The stop-gradients make the VQ objective's gradient differ from its
/// total derivative: the latents see only `beta * commit` and the codebook
/// only the codebook term. Each side is compared with central differences of
/// the term it receives, the other side held fixed.
fn vq_check(rng: &mut ChaCha8Rng) -> Result<OpResult> {
    let (rows, k, l, beta) = (6, 4, 3, 0.25);
    let z = rand_tensor(vec![rows, l], rng);
    let table = rand_tensor(vec![k, l], rng);
    let indices = nearest_rows(z.data(), table.data(), l);
    let mut tape = Tape::new();
    let zv = tape.leaf(&z.clone().with_grad());
    let ev = tape.leaf(&table.clone().with_grad());
    let loss = vq_loss(&mut tape, zv, ev, &indices, beta)?;
    let grads = tape.backward(loss)?;
    let zeros_z = vec![0.0; z.numel()];
    let zeros_e = vec![0.0; table.numel()];
    let gz = grads.get(zv).unwrap_or(&zeros_z);
    let ge = grads.get(ev).unwrap_or(&zeros_e);

    let sq_dist = |zd: &[f64], ed: &[f64]| -> f64 {
        zd.chunks_exact(l)
            .zip(&indices)
            .map(|(row, &i)| row.iter().zip(&ed[i * l..(i + 1) * l]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / rows as f64
    };
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut rel = |a: f64, n: f64| {
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
        coords += 1;
    };
    let mut zd = z.data().to_vec();
    for c in 0..zd.len() {
        let orig = zd[c];
        zd[c] = orig + STEP;
        let plus = beta * sq_dist(&zd, table.data());
        zd[c] = orig - STEP;
        let minus = beta * sq_dist(&zd, table.data());
        zd[c] = orig;
        rel(gz[c], (plus - minus) / (2.0 * STEP));
    }
    let mut ed = table.data().to_vec();
    for c in 0..ed.len() {
        let orig = ed[c];
        ed[c] = orig + STEP;
        let plus = sq_dist(z.data(), &ed);
        ed[c] = orig - STEP;
        let minus = sq_dist(z.data(), &ed);
        ed[c] = orig;
        rel(ge[c], (plus - minus) / (2.0 * STEP));
    }
    Ok(OpResult {
        op: "vq_loss".into(),
        max_rel_error: worst,
        coords_checked: coords,
        passed: worst <= TOLERANCE,
    })
}

fn mha_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut params = ParameterSet::new();
    init_mha(&mut params, "attn", 4, rng)?;
    let x = rand_tensor(vec![2, 3, 4], rng);
    let valid = vec![true, true, false, true, true, true];
    let input_report = grad_check(
        |t, v| mha_forward(t, &params, "attn", v[0], v[0], v[0], 2, Some(&valid)),
        std::slice::from_ref(&x),
        STEP,
        3,
    )?;
    let param_report = grad_check_params(
        |t, p| {
            let xv = t.constant(x.shape().to_vec(), x.data().to_vec())?;
            mha_forward(t, p, "attn", xv, xv, xv, 2, Some(&valid))
        },
        &params,
        STEP,
        4,
    )?;
    Ok(worse(input_report, param_report))
}

fn linear_params_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut params = ParameterSet::new();
    init_linear(&mut params, "fc", 5, 3, rng)?;
    let x = rand_tensor(vec![4, 5], rng);
    grad_check_params(
        |t, p| {
            let xv = t.constant(x.shape().to_vec(), x.data().to_vec())?;
            coordfuse::tensor::nn::linear(t, p, "fc", xv)
        },
        &params,
        STEP,
        5,
    )
}

fn worse(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let coords = a.coords_checked + b.coords_checked;
    let mut w = if b.max_rel_error > a.max_rel_error { b } else { a };
    w.coords_checked = coords;
    w
}

fn fusion_check() -> Result<GradCheckReport> {
    let branch = BranchConfig {
        input_dim: 8,
        convs: vec![
            ConvSpec {
                channels: 4,
                kernel: 2,
                stride: 1,
                padding: 1,
            },
            ConvSpec {
                channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
        ],
        dropout: 0.2,
        mha_heads: 2,
        mha_enabled: true,
    };
    let model = build_fusion(&branch, &branch, true, 0)?;
    let m = |k: f64| Array2::from_shape_fn((3, 8), |(i, j)| 2.0 * ((i * 8 + j) as f64 * 0.37 + k).sin());
    let x = SessionInputs {
        id: "check".into(),
        severity: 40.0,
        speech: Some(m(0.3)),
        artic: Some(m(1.3)),
    };
    // a small residual keeps roundoff below the tiniest attention-key gradients
    let mut tape = Tape::new();
    let out = predict_var(&mut tape, &model, &x, true, 11)?;
    let target = tape.value(out)[0] - 0.01;
    grad_check_params(
        |tape, params| {
            let m = FusionModel {
                config: model.config.clone(),
                params: params.clone(),
            };
            let out = predict_var(tape, &m, &x, true, 11)?;
            let t = tape.constant(vec![1, 1], vec![target])?;
            mse_loss(tape, out, t)
        },
        &model.params,
        STEP,
        0,
    )
}

/// Runs every check; the caller decides what a failure means.
pub fn run_suite(seed: u64) -> Result<Vec<OpResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, op, inputs) in input_checks(&mut rng) {
        let r = grad_check(op, &inputs, STEP, seed)?;
        out.push(OpResult::from_report(name, &r));
    }
    out.push(OpResult::from_report("linear_params", &linear_params_check(&mut rng)?));
    out.push(OpResult::from_report("mha", &mha_check(&mut rng)?));
    out.push(vq_check(&mut rng)?);
    out.push(OpResult::from_report("fusion_model", &fusion_check()?));
    Ok(out)
}
