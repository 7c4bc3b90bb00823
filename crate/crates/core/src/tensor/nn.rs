//! Layer building blocks on top of [`Graph`](super::Graph).

use rand::Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

/// Uniform in `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, s)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}

/// `x · w + b` with `b` broadcast over rows.
pub fn dense(g: &Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Weights of one LSTM layer. `weight` is `[d_in + hidden, 4 · hidden]` with
/// gate blocks ordered input, forget, candidate, output; `bias` is `[4 · hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub weight: Var,
    pub bias: Var,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmWeights {
    pub fn zero_state(&self, g: &Graph, batch: usize) -> Result<LstmState> {
        let z = Tensor::zeros(&[batch, self.hidden])?;
        Ok(LstmState {
            h: g.constant(z.clone()),
            c: g.constant(z),
        })
    }

    /// One recurrence step on a `[batch, d_in]` input.
    pub fn step(&self, g: &Graph, x: Var, state: LstmState) -> Result<LstmState> {
        let xh = g.concat(&[x, state.h], 1)?;
        let z = dense(g, xh, self.weight, self.bias)?;
        let n = self.hidden;
        let i = g.sigmoid(g.slice(z, 1, 0, n)?);
        let f = g.sigmoid(g.slice(z, 1, n, n)?);
        let cand = g.tanh(g.slice(z, 1, 2 * n, n)?);
        let o = g.sigmoid(g.slice(z, 1, 3 * n, n)?);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let h = g.mul(o, g.tanh(c))?;
        Ok(LstmState { h, c })
    }
}

/// Runs the LSTM over `inputs`, returning every hidden output and the final state.
pub fn lstm_forward(
    g: &Graph,
    inputs: &[Var],
    weights: &LstmWeights,
    initial: Option<LstmState>,
) -> Result<(Vec<Var>, LstmState)> {
    let first = *inputs.first().ok_or(TensorError::Empty("lstm_forward"))?;
    let batch = g.shape(first)[0];
    let mut state = match initial {
        Some(s) => s,
        None => weights.zero_state(g, batch)?,
    };
    let mut outputs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = weights.step(g, x, state)?;
        outputs.push(state.h);
    }
    Ok((outputs, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let g = Graph::new();
        let w = LstmWeights {
            weight: g.param(Tensor::zeros(&[3 + 2, 8]).unwrap()),
            bias: g.param(Tensor::zeros(&[8]).unwrap()),
            hidden: 2,
        };
        let xs: Vec<Var> = (0..4)
            .map(|t| g.constant(Tensor::new(&[1, 3], vec![t as f64, 1.0, -2.0]).unwrap()))
            .collect();
        let (outs, last) = lstm_forward(&g, &xs, &w, None).unwrap();
        for o in outs {
            assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        }
        assert!(g.value(last.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_gate_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (din, h) = (2, 3);
        let wt = uniform(&mut rng, &[din + h, 4 * h], 0.8).unwrap();
        let bt = uniform(&mut rng, &[4 * h], 0.3).unwrap();
        let x = [0.4, -1.1];

        let g = Graph::new();
        let w = LstmWeights {
            weight: g.param(wt.clone()),
            bias: g.param(bt.clone()),
            hidden: h,
        };
        let xv = g.constant(Tensor::new(&[1, din], x.to_vec()).unwrap());
        let (outs, _) = lstm_forward(&g, &[xv], &w, None).unwrap();

        // Hand evaluation with h0 = c0 = 0: only the x rows of the weight matter.
        let pre = |col: usize| bt.data()[col] + (0..din).map(|r| x[r] * wt.data()[r * 4 * h + col]).sum::<f64>();
        for j in 0..h {
            let i = sig(pre(j));
            let cand = pre(2 * h + j).tanh();
            let o = sig(pre(3 * h + j));
            let c = i * cand;
            let expected = o * c.tanh();
            let got = g.value(outs[0]).data()[j];
            assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
        }
    }

    #[test]
    fn glorot_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = glorot_uniform(&mut rng, &[10, 20], 10, 20).unwrap();
        let s = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= s));
    }
}
