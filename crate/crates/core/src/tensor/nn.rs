//! Layer-level building blocks on top of [`Tape`].

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `y = x W + b` for `x [B x F_in]`, `W [F_in x F_out]`, `b [F_out]`.
pub fn linear_forward(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Linear layer whose parameters are `{prefix}.weight` and `{prefix}.bias`.
pub fn linear(tape: &mut Tape, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.weight"))?;
    let b = tape.param(params, &format!("{prefix}.bias"))?;
    linear_forward(tape, x, w, b)
}

pub fn conv1d_forward(
    tape: &mut Tape,
    x: Var,
    kernels: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    tape.conv1d(x, kernels, bias, stride, padding)
}

pub fn relu_forward(tape: &mut Tape, x: Var) -> Var {
    tape.relu(x)
}

/// Zeroes exactly `round(p * n)` entries chosen by `seed` and scales the
/// survivors by `1 / (1 - p)`. Identity in eval mode or when `p == 0`.
pub fn dropout_forward(tape: &mut Tape, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let n = tape.value(x).len();
    let mask = exact_count_mask(n, p, seed);
    let keep = 1.0 / (1.0 - p);
    let scale = mask.iter().map(|&drop| if drop { 0.0 } else { keep }).collect();
    tape.mask_scale(x, scale)
}

/// `true` at exactly `round(p * n)` positions sampled without replacement.
pub fn exact_count_mask(n: usize, p: f64, seed: u64) -> Vec<bool> {
    let count = ((p * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    for i in sample(&mut rng, n, count).iter() {
        mask[i] = true;
    }
    mask
}

/// Mean over `axis` of a 2-D operand. `valid` flags which entries along
/// `axis` take part.
pub fn mean_pool_forward(tape: &mut Tape, x: Var, axis: usize, valid: Option<&[bool]>) -> Result<Var> {
    match axis {
        0 => tape.mean_rows(x, valid),
        1 => {
            let t = tape.transpose(x)?;
            tape.mean_rows(t, valid)
        }
        _ => Err(Error::invalid(format!("mean_pool axis {axis} on a 2-D operand"))),
    }
}

pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Names of the projection parameters of one attention layer.
pub fn mha_param_names(prefix: &str) -> [String; 8] {
    ["q_weight", "q_bias", "k_weight", "k_bias", "v_weight", "v_bias", "out_weight", "out_bias"]
        .map(|s| format!("{prefix}.{s}"))
}

/// Multi-head scaled dot-product attention with learned projections.
///
/// `query` is `[B x S_q x E]`, `key`/`value` are `[B x S_k x E]`; `valid`
/// (`[B x S_k]`, row-major) marks key positions that may be attended to.
#[allow(clippy::too_many_arguments)]
pub fn mha_forward(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    valid: Option<&[bool]>,
) -> Result<Var> {
    mha_forward_traced(tape, params, prefix, query, key, value, heads, valid).map(|(out, _)| out)
}

/// As [`mha_forward`], also returning the `[S_q x S_k]` attention weights
/// per batch element and head (batch-major).
#[allow(clippy::too_many_arguments)]
pub fn mha_forward_traced(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
    valid: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let (batch, s_q, e) = match *tape.shape(query) {
        [b, s, e] => (b, s, e),
        ref other => return Err(Error::shape("mha", format!("query must be 3-D, got {other:?}"))),
    };
    let (kb, s_k, ke) = match *tape.shape(key) {
        [b, s, e] => (b, s, e),
        ref other => return Err(Error::shape("mha", format!("key must be 3-D, got {other:?}"))),
    };
    if tape.shape(value) != [kb, s_k, ke] || kb != batch || ke != e {
        return Err(Error::shape(
            "mha",
            format!(
                "query {:?}, key {:?}, value {:?}",
                tape.shape(query),
                tape.shape(key),
                tape.shape(value)
            ),
        ));
    }
    if heads == 0 || e % heads != 0 {
        return Err(Error::invalid(format!("embedding dim {e} not divisible by {heads} heads")));
    }
    if let Some(m) = valid {
        if m.len() != batch * s_k {
            return Err(Error::shape("mha", format!("mask of {} for [{batch} x {s_k}]", m.len())));
        }
    }
    let [qw, qb, kw, kb_, vw, vb, ow, ob] = mha_param_names(prefix);
    let q_flat = tape.reshape(query, vec![batch * s_q, e])?;
    let k_flat = tape.reshape(key, vec![batch * s_k, e])?;
    let v_flat = tape.reshape(value, vec![batch * s_k, e])?;
    let (qw, qb) = (tape.param(params, &qw)?, tape.param(params, &qb)?);
    let (kw, kb_) = (tape.param(params, &kw)?, tape.param(params, &kb_)?);
    let (vw, vb) = (tape.param(params, &vw)?, tape.param(params, &vb)?);
    let q = linear_forward(tape, q_flat, qw, qb)?;
    let k = linear_forward(tape, k_flat, kw, kb_)?;
    let v = linear_forward(tape, v_flat, vw, vb)?;

    let dh = e / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut rows = Vec::with_capacity(batch);
    let mut all_weights = Vec::with_capacity(batch * heads);
    for bi in 0..batch {
        let mask = valid.map(|m| &m[bi * s_k..(bi + 1) * s_k]);
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, bi * s_q, s_q, h * dh, dh)?;
            let kh = tape.slice(k, bi * s_k, s_k, h * dh, dh)?;
            let vh = tape.slice(v, bi * s_k, s_k, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let weights = tape.softmax_rows(scores, mask)?;
            all_weights.push(weights);
            head_outs.push(tape.matmul(weights, vh)?);
        }
        rows.push(tape.concat(&head_outs, 1)?);
    }
    let attended = tape.concat(&rows, 0)?;
    let (ow, ob) = (tape.param(params, &ow)?, tape.param(params, &ob)?);
    let out = linear_forward(tape, attended, ow, ob)?;
    Ok((tape.reshape(out, vec![batch, s_q, e])?, all_weights))
}

/// Uniform fan-in scaled initializer, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

pub fn init_linear(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.insert(
        format!("{prefix}.weight"),
        uniform_fan_in(vec![fan_in, fan_out], fan_in, rng),
    )?;
    params.insert(format!("{prefix}.bias"), uniform_fan_in(vec![fan_out], fan_in, rng))
}

pub fn init_conv1d(
    params: &mut ParameterSet,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let fan_in = c_in * kernel;
    params.insert(
        format!("{prefix}.weight"),
        uniform_fan_in(vec![c_out, c_in, kernel], fan_in, rng),
    )?;
    params.insert(format!("{prefix}.bias"), uniform_fan_in(vec![c_out], fan_in, rng))
}

pub fn init_mha(params: &mut ParameterSet, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<()> {
    for proj in ["q", "k", "v", "out"] {
        params.insert(
            format!("{prefix}.{proj}_weight"),
            uniform_fan_in(vec![dim, dim], dim, rng),
        )?;
        params.insert(format!("{prefix}.{proj}_bias"), uniform_fan_in(vec![dim], dim, rng))?;
    }
    Ok(())
}
