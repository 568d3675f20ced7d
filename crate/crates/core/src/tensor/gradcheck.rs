use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input (or parameter) position and coordinate of the worst mismatch.
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
        }
    }

    fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        self.coords_checked += 1;
        if rel > self.max_rel_error || self.coords_checked == 1 {
            self.max_rel_error = rel;
            self.worst_input = input;
            self.worst_coord = coord;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn cotangent(len: usize, seed: u64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn reduce(tape: &Tape, out: Var, cot: &[f64]) -> Result<f64> {
    let v = tape.value(out);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("grad_check forward output".into()));
    }
    Ok(v.iter().zip(cot).map(|(a, b)| a * b).sum())
}

/// Compares analytic gradients of `op` against central differences at step
/// `h`. Non-scalar outputs are reduced with a fixed random cotangent drawn
/// from `seed`. Every coordinate of every input is perturbed.
pub fn grad_check<F>(op: F, inputs: &[Tensor], h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
        let out = op(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = run(inputs)?;
    let cot = cotangent(tape.value(out).len(), seed);
    reduce(&tape, out, &cot)?;
    let grads = tape.backward_with(out, &cot)?;

    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros).to_vec();
        for c in 0..inputs[i].numel() {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let (t, _, o) = run(&work)?;
            let plus = reduce(&t, o, &cot)?;
            work[i].data_mut()[c] = orig - h;
            let (t, _, o) = run(&work)?;
            let minus = reduce(&t, o, &cot)?;
            work[i].data_mut()[c] = orig;
            report.record(i, c, analytic[c], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// As [`grad_check`], perturbing every coordinate of every parameter in
/// `params` instead of explicit inputs.
pub fn grad_check_params<F>(forward: F, params: &ParameterSet, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = forward(&mut tape, params)?;
    let cot = cotangent(tape.value(out).len(), seed);
    reduce(&tape, out, &cot)?;
    let grads = tape.backward_with(out, &cot)?;
    let mut analytic = params.clone();
    analytic.clear_grads();
    tape.accumulate_param_grads(&grads, &mut analytic)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::new();
        let o = forward(&mut t, p)?;
        reduce(&t, o, &cot)
    };
    let mut report = GradCheckReport::new();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for (i, name) in names.iter().enumerate() {
        let n = params.require(name)?.numel();
        let zeros = vec![0.0; n];
        let a = analytic.require(name)?.grad().unwrap_or(&zeros).to_vec();
        for c in 0..n {
            let orig = params.require(name)?.data()[c];
            work.get_mut(name).unwrap().data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig;
            report.record(i, c, a[c], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_is_exact() {
        let x = Tensor::new(vec![5], vec![0.1, -0.2, 0.35, 0.7, -0.05]).unwrap();
        let r = grad_check(|t, v| Ok(t.sum_all(v[0])), &[x], 1e-5, 0).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum_all(sq))
            },
            &[x],
            1e-5,
            0,
        )
        .unwrap();
        assert_eq!(r.analytic, 6.0);
        assert!((r.numeric - 6.0).abs() <= 1e-6);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap();
        assert!(grad_check(|t, v| Ok(t.sum_all(v[0])), &[x], 1e-5, 0).is_err());
    }
}
