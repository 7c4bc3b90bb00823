//! Finite-difference checks of every differentiable primitive.

use lcrank::tensor::nn::{lstm_forward, LstmWeights};
use lcrank::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Builds a scalar loss from fresh parameter leaves holding `inputs`.
type Builder = dyn Fn(&Graph, &[Var]) -> Var;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

fn eval(build: &Builder, inputs: &[Tensor]) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars);
    g.scalar(loss)
}

/// Compares analytic and central-difference gradients on every coordinate;
/// returns the number of coordinates checked.
fn check(build: &Builder, inputs: &[Tensor]) -> usize {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss).unwrap();
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * STEP);
            let err = relative_error(analytic[i], numeric);
            assert!(
                err <= TOL || (analytic[i] - numeric).abs() < 1e-8,
                "input {k} coord {i}: analytic {} numeric {numeric} (rel {err})",
                analytic[i]
            );
            checked += 1;
        }
    }
    checked
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// A weighted sum makes every output coordinate matter.
fn weighted_sum(g: &Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &g.shape(y));
    let w = g.constant(w);
    g.sum(g.mul(y, w).unwrap())
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    let row = random(&mut rng, &[4]);
    let mut total = 0;
    let cases: Vec<Box<Builder>> = vec![
        Box::new(|g, v| weighted_sum(g, g.add(v[0], v[1]).unwrap(), 1)),
        Box::new(|g, v| weighted_sum(g, g.sub(v[0], v[1]).unwrap(), 2)),
        Box::new(|g, v| weighted_sum(g, g.mul(v[0], v[1]).unwrap(), 3)),
        Box::new(|g, v| weighted_sum(g, g.tanh(v[0]), 4)),
        Box::new(|g, v| weighted_sum(g, g.sigmoid(v[0]), 5)),
        Box::new(|g, v| weighted_sum(g, g.exp(v[0]), 6)),
        Box::new(|g, v| weighted_sum(g, g.log(g.add_scalar(g.square(v[0]), 0.5)).unwrap(), 7)),
        Box::new(|g, v| weighted_sum(g, g.concat(&[v[0], v[1]], 1).unwrap(), 8)),
        Box::new(|g, v| weighted_sum(g, g.concat(&[v[0], v[1]], 0).unwrap(), 9)),
        Box::new(|g, v| weighted_sum(g, g.slice(v[0], 1, 1, 2).unwrap(), 10)),
        Box::new(|g, v| weighted_sum(g, g.softmax(v[0]).unwrap(), 11)),
        Box::new(|g, v| weighted_sum(g, g.log_softmax(v[0]).unwrap(), 12)),
        Box::new(|g, v| weighted_sum(g, g.sum_axis(v[0], 0).unwrap(), 13)),
        Box::new(|g, v| weighted_sum(g, g.scale(g.neg(v[0]), 0.3), 14)),
    ];
    for case in &cases {
        total += check(case.as_ref(), &[a.clone(), b.clone()]);
    }
    let bcast: Box<Builder> = Box::new(|g, v| weighted_sum(g, g.mul(g.add(v[0], v[1]).unwrap(), v[0]).unwrap(), 15));
    total += check(bcast.as_ref(), &[a.clone(), row]);
    assert!(total >= 100, "only {total} coordinates checked");
}

#[test]
fn matmul_conv_pool_dense_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let signal = random(&mut rng, &[2, 7, 1]);
    let kernels = random(&mut rng, &[3, 1, 4]);
    let bias = random(&mut rng, &[4]);
    let w = random(&mut rng, &[4, 2]);
    let build: Box<Builder> = Box::new(|g, v| {
        let conv = g.conv1d_valid(v[0], v[1], v[2]).unwrap();
        let pooled = g.global_max_pool(conv).unwrap();
        let dense = g.tanh(g.matmul(pooled, v[3]).unwrap());
        weighted_sum(g, dense, 21)
    });
    let n = check(build.as_ref(), &[signal, kernels, bias, w]);
    assert!(n >= 30);
}

#[test]
fn lstm_and_attention_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (din, h, steps) = (3, 2, 3);
    let xs = random(&mut rng, &[steps, 2, din]);
    let weight = random(&mut rng, &[din + h, 4 * h]);
    let bias = random(&mut rng, &[4 * h]);
    let table = random(&mut rng, &[5, 2]);
    let build: Box<Builder> = Box::new(move |g, v| {
        let inputs: Vec<Var> = (0..steps)
            .map(|t| {
                let s = g.slice(v[0], 0, t, 1).unwrap();
                g.reshape(s, &[2, din]).unwrap()
            })
            .collect();
        let w = LstmWeights {
            weight: v[1],
            bias: v[2],
            hidden: h,
        };
        let (outs, last) = lstm_forward(g, &inputs, &w, None).unwrap();
        let stacked: Vec<Var> = outs.iter().map(|&o| g.reshape(o, &[2, 1, h]).unwrap()).collect();
        let enc = g.concat(&stacked, 1).unwrap();
        let q = g.reshape(last.h, &[2, 1, h]).unwrap();
        let scores = g.sum_axis(g.tanh(g.add(enc, q).unwrap()), 2).unwrap();
        let attn = g.softmax(scores).unwrap();
        let a3 = g.reshape(attn, &[2, steps, 1]).unwrap();
        let ctx = g.sum_axis(g.mul(a3, enc).unwrap(), 1).unwrap();
        let emb = g.gather_rows(v[3], &[4, 0]).unwrap();
        let out = g.concat(&[ctx, emb], 1).unwrap();
        weighted_sum(g, out, 33)
    });
    check(build.as_ref(), &[xs, weight, bias, table]);
}

#[test]
fn max_routing_preserves_gradient_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[6, 3]);
    let g = Graph::new();
    let v = g.param(x);
    let pooled = g.global_max_pool(v).unwrap();
    let upstream = random(&mut rng, &[3]);
    let total: f64 = upstream.data().iter().sum();
    let loss = g.sum(g.mul(pooled, g.constant(upstream)).unwrap());
    let grad = g.backward(loss).unwrap().wrt(v);
    assert!((grad.iter().sum::<f64>() - total).abs() < 1e-12);
    for ch in 0..3 {
        let nonzero = (0..6).filter(|r| grad[r * 3 + ch] != 0.0).count();
        assert_eq!(nonzero, 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect()).unwrap();
        let g = Graph::new();
        let sm = g.softmax(g.constant(x)).unwrap();
        for row in g.value(sm).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let build: Box<Builder> = Box::new(|g, v| weighted_sum(g, g.matmul(v[0], v[1]).unwrap(), 99));
        check(build.as_ref(), &[a, b]);
    }
}
