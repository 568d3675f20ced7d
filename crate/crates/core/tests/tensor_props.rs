use coordfuse::tensor::nn::{exact_count_mask, init_mha, mean_pool_forward, mha_forward, mha_forward_traced};
use coordfuse::tensor::{
    adam_step, grad_check, AdamConfig, OptimizerState, ParameterSet, PlateauConfig, PlateauScheduler, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check<F>(op: F, inputs: &[Tensor], seed: u64) -> Result<(), TestCaseError>
where
    F: Fn(&mut Tape, &[Var]) -> coordfuse::Result<Var>,
{
    let r = grad_check(op, inputs, H, seed).unwrap();
    prop_assert!(r.max_rel_error <= TOL, "{r:?}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn matmul_and_bias_gradients(r in 1usize..5, k in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        check(|t, v| { let m = t.matmul(v[0], v[1])?; t.add_bias(m, v[2]) },
            &[tensor(vec![r, k], seed), tensor(vec![k, c], seed ^ 1), tensor(vec![c], seed ^ 2)], seed)?;
    }

    #[test]
    fn elementwise_gradients(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        check(|t, v| {
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(s, v[0])?;
            let a = t.add(m, v[1])?;
            Ok(t.scale(a, -1.5))
        }, &[tensor(vec![r, c], seed), tensor(vec![r, c], seed ^ 1)], seed)?;
    }

    #[test]
    fn relu_gradients(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let mut x = tensor(vec![r, c], seed);
        // keep every entry clear of the kink
        for v in x.data_mut() {
            *v = if v.abs() < 0.05 { 0.5 } else { *v };
        }
        check(|t, v| Ok(t.relu(v[0])), &[x], seed)?;
    }

    #[test]
    fn conv1d_gradients(
        b in 1usize..3, cin in 1usize..4, cout in 1usize..4, len in 3usize..8,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()
    ) {
        prop_assume!(len + 2 * pad >= k);
        check(|t, v| t.conv1d(v[0], v[1], Some(v[2]), stride, pad),
            &[tensor(vec![b, cin, len], seed), tensor(vec![cout, cin, k], seed ^ 1), tensor(vec![cout], seed ^ 2)], seed)?;
    }

    #[test]
    fn softmax_gradients(r in 1usize..5, c in 2usize..6, seed in any::<u64>(), masked in any::<bool>()) {
        let mask: Vec<bool> = (0..c).map(|j| !masked || j % 2 == 0).collect();
        check(move |t, v| t.softmax_rows(v[0], Some(&mask)), &[tensor(vec![r, c], seed)], seed)?;
    }

    #[test]
    fn pooling_and_losses_gradients(r in 2usize..6, c in 1usize..5, seed in any::<u64>()) {
        let valid: Vec<bool> = (0..r).map(|i| i != 1).collect();
        check(move |t, v| {
            let p = mean_pool_forward(t, v[0], 0, Some(&valid))?;
            let q = mean_pool_forward(t, v[0], 1, None)?;
            let d = t.sub(v[0], v[1])?;
            let sq = t.mul(d, d)?;
            let mse = t.mean_all(sq);
            let a = t.sum_all(p);
            let b = t.sum_all(q);
            let s = t.add(a, b)?;
            t.add(s, mse)
        }, &[tensor(vec![r, c], seed), tensor(vec![r, c], seed ^ 1)], seed)?;
    }

    #[test]
    fn shape_op_gradients(r in 1usize..4, c in 2usize..5, seed in any::<u64>()) {
        check(move |t, v| {
            let tr = t.transpose(v[0])?;
            let re = t.reshape(tr, vec![r * c, 1])?;
            let re = t.reshape(re, vec![c, r])?;
            let sl = t.slice(re, 0, c - 1, 0, r)?;
            let cat = t.concat(&[sl, v[1]], 0)?;
            let g = t.gather_rows(cat, &[0, c - 1, 0])?;
            t.mul(g, g)
        }, &[tensor(vec![r, c], seed), tensor(vec![1, r], seed ^ 1)], seed)?;
    }

    #[test]
    fn dropout_gradients(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        check(move |t, v| coordfuse::tensor::nn::dropout_forward(t, v[0], 0.4, true, seed), &[tensor(vec![r, c], seed)], seed)?;
    }

    #[test]
    fn mha_gradients(b in 1usize..3, s in 1usize..4, heads in 1usize..3, seed in any::<u64>()) {
        let e = 2 * heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        init_mha(&mut params, "a", e, &mut rng).unwrap();
        let valid: Vec<bool> = (0..b * s).map(|i| i % s != s - 1 || s == 1).collect();
        check(move |t, v| mha_forward(t, &params, "a", v[0], v[1], v[1], heads, Some(&valid)),
            &[tensor(vec![b, s, e], seed), tensor(vec![b, s, e], seed ^ 1)], seed)?;
    }

    #[test]
    fn attention_rows_sum_to_one(b in 1usize..3, sq in 1usize..5, sk in 1usize..5, heads in 1usize..3, seed in any::<u64>(), masked in any::<bool>()) {
        let e = 2 * heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        init_mha(&mut params, "a", e, &mut rng).unwrap();
        let valid: Vec<bool> = (0..b * sk).map(|i| !masked || i % sk == 0 || i % 2 == 1).collect();
        let mut tape = Tape::new();
        let q = tape.leaf(&tensor(vec![b, sq, e], seed));
        let k = tape.leaf(&tensor(vec![b, sk, e], seed ^ 1));
        let (_, weights) = mha_forward_traced(&mut tape, &params, "a", q, k, k, heads, Some(&valid)).unwrap();
        prop_assert_eq!(weights.len(), b * heads);
        for (i, w) in weights.iter().enumerate() {
            let batch = i / heads;
            for row in tape.value(*w).chunks(sk) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for (j, &x) in row.iter().enumerate() {
                    if !valid[batch * sk + j] {
                        prop_assert_eq!(x, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic(b in 1usize..3, s in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        init_mha(&mut params, "a", 4, &mut rng).unwrap();
        let x = tensor(vec![b, s, 4], seed);
        let run = || {
            let mut t = Tape::new();
            let v = t.leaf(&x);
            let o = mha_forward(&mut t, &params, "a", v, v, v, 2, None).unwrap();
            let o = coordfuse::tensor::nn::dropout_forward(&mut t, o, 0.3, true, seed).unwrap();
            t.value(o).to_vec()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn dropout_mask_count_is_exact(n in 0usize..500, p in 0.0f64..0.95, seed in any::<u64>()) {
        let m = exact_count_mask(n, p, seed);
        prop_assert_eq!(m.iter().filter(|&&x| x).count(), (p * n as f64).round() as usize);
    }
}

/// Sets each parameter's gradient to `grads[name]` by backpropagating
/// `sum(p * g)`.
fn set_grads(params: &mut ParameterSet, grads: &[Vec<f64>]) {
    let mut tape = Tape::new();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut total = None;
    for (name, g) in names.iter().zip(grads) {
        let p = tape.param(params, name).unwrap();
        let c = tape.constant(params.get(name).unwrap().shape().to_vec(), g.clone()).unwrap();
        let m = tape.mul(p, c).unwrap();
        let s = tape.sum_all(m);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s).unwrap(),
        });
    }
    let out = total.unwrap();
    let g = tape.backward(out).unwrap();
    params.clear_grads();
    tape.accumulate_param_grads(&g, params).unwrap();
}

#[test]
fn adam_and_scheduler_replay_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trace: Vec<(Vec<Vec<f64>>, f64)> = (0..40)
        .map(|_| {
            let g = vec![
                (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ];
            (g, rng.random_range(0.0..1.0))
        })
        .collect();
    let replay = || {
        let mut params = ParameterSet::new();
        params.insert("w", tensor(vec![2, 3], 1).with_grad()).unwrap();
        params.insert("b", tensor(vec![3], 2).with_grad()).unwrap();
        let mut state = OptimizerState::new(AdamConfig::default(), &params);
        let mut sched = PlateauScheduler::new(1e-3, PlateauConfig::default()).unwrap();
        for (g, metric) in &trace {
            set_grads(&mut params, g);
            adam_step(&mut params, &mut state).unwrap();
            let lr = sched.step(*metric).unwrap();
            state.set_lr(lr);
        }
        (params, state, sched.history().to_vec(), sched.lr())
    };
    let (p1, s1, h1, l1) = replay();
    let (p2, s2, h2, l2) = replay();
    assert_eq!(p1, p2);
    assert_eq!(s1, s2);
    assert_eq!(h1, h2);
    assert_eq!(l1.to_bits(), l2.to_bits());
}
