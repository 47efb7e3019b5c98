//! Central finite-difference verification of reverse-mode gradients.
//!
//! [`RandomGraph`] draws small compositions of the tape operations so the
//! checker can be run over many shapes and op orderings.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative error used by [`check_gradients`]: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares the analytic gradient of `f` with central differences of step `h`
/// for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.item(root))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt_or_zero(*v, inputs[k].numel());
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            work[k].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[j], numeric, 1e-6));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

#[derive(Clone, Debug)]
enum Step {
    MatMul(usize),
    AddRow(usize),
    MulSame(usize),
    ConcatCols(usize),
    LayerNorm(usize, usize),
    Scale(f64),
    Tanh,
    Gelu,
    Exp,
    LogSigmoid,
    Softmax,
    LogSoftmax,
    SelectRows(Vec<usize>),
    /// `softmax(mask(x x^T))` on the current matrix, then back to `[r, c]` via a matmul with `x`.
    CausalAttention,
}

#[derive(Clone, Debug)]
enum Reduce {
    Sum,
    Mean,
    GatherMean(Vec<usize>),
}

/// A randomly drawn smooth computation over a handful of input tensors.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub inputs: Vec<Tensor>,
    steps: Vec<Step>,
    reduce: Reduce,
}

impl RandomGraph {
    /// Draws a graph whose inputs hold at most `max_params` scalars in total.
    pub fn sample(seed: u64, max_params: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let g = Self::draw(&mut rng);
            let n: usize = g.inputs.iter().map(Tensor::numel).sum();
            if n <= max_params {
                return g;
            }
        }
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut rows = rng.random_range(1..=4);
        let mut cols = rng.random_range(2..=5);
        let mut inputs = vec![Tensor::randn(&[rows, cols], 0.8, rng)];
        let mut steps = Vec::new();
        let n_steps = rng.random_range(2..=5);
        let kinds = [
            "matmul", "add", "mul", "concat", "ln", "scale", "tanh", "gelu", "exp", "logsig",
            "softmax", "logsoftmax", "select", "attn",
        ];
        for _ in 0..n_steps {
            let kind = *kinds.choose(rng).unwrap();
            let step = match kind {
                "matmul" => {
                    let out = rng.random_range(2..=5);
                    inputs.push(Tensor::randn(&[cols, out], 0.6, rng));
                    cols = out;
                    Step::MatMul(inputs.len() - 1)
                }
                "add" => {
                    inputs.push(Tensor::randn(&[cols], 0.5, rng));
                    Step::AddRow(inputs.len() - 1)
                }
                "mul" => {
                    inputs.push(Tensor::randn(&[rows, cols], 0.8, rng));
                    Step::MulSame(inputs.len() - 1)
                }
                "concat" => {
                    let extra = rng.random_range(1..=3);
                    inputs.push(Tensor::randn(&[rows, extra], 0.8, rng));
                    cols += extra;
                    Step::ConcatCols(inputs.len() - 1)
                }
                "ln" if cols >= 2 => {
                    inputs.push(Tensor::randn(&[cols], 0.5, rng));
                    inputs.push(Tensor::randn(&[cols], 0.5, rng));
                    Step::LayerNorm(inputs.len() - 2, inputs.len() - 1)
                }
                "scale" => Step::Scale(rng.random_range(-1.5..1.5)),
                "tanh" => Step::Tanh,
                "gelu" => Step::Gelu,
                "exp" => Step::Exp,
                "logsig" => Step::LogSigmoid,
                "softmax" => Step::Softmax,
                "logsoftmax" => Step::LogSoftmax,
                "select" => {
                    let k = rng.random_range(1..=rows + 1);
                    let picked: Vec<usize> = (0..k).map(|_| rng.random_range(0..rows)).collect();
                    rows = k;
                    Step::SelectRows(picked)
                }
                _ => Step::CausalAttention,
            };
            steps.push(step);
        }
        let reduce = match rng.random_range(0..3) {
            0 => Reduce::Sum,
            1 => Reduce::Mean,
            _ => Reduce::GatherMean((0..rows).map(|_| rng.random_range(0..cols)).collect()),
        };
        Self {
            inputs,
            steps,
            reduce,
        }
    }

    /// Replays the drawn computation on `vars` (one per input, in order).
    pub fn build(&self, g: &mut Graph<'_>, vars: &[Var]) -> Result<Var> {
        let mut x = vars[0];
        for step in &self.steps {
            x = match step {
                Step::MatMul(i) => g.matmul(x, vars[*i])?,
                Step::AddRow(i) => g.add(x, vars[*i])?,
                Step::MulSame(i) => g.mul(x, vars[*i])?,
                Step::ConcatCols(i) => g.concat_cols(x, vars[*i])?,
                Step::LayerNorm(a, b) => g.layer_norm(x, vars[*a], vars[*b], 1e-5)?,
                Step::Scale(c) => g.scale(x, *c),
                Step::Tanh => g.tanh(x),
                Step::Gelu => g.gelu(x),
                Step::Exp => {
                    let t = g.tanh(x);
                    g.exp(t)
                }
                Step::LogSigmoid => g.log_sigmoid(x),
                Step::Softmax => g.softmax(x),
                Step::LogSoftmax => g.log_softmax(x),
                Step::SelectRows(rows) => g.select_rows(x, rows)?,
                Step::CausalAttention => {
                    let xt = g.transpose(x)?;
                    let scores = g.matmul(x, xt)?;
                    let masked = g.causal_mask(scores)?;
                    let p = g.softmax(masked);
                    g.matmul(p, x)?
                }
            };
        }
        Ok(match &self.reduce {
            Reduce::Sum => g.sum(x),
            Reduce::Mean => g.mean(x),
            Reduce::GatherMean(idx) => {
                let lp = g.log_softmax(x);
                let picked = g.gather(lp, idx)?;
                g.mean(picked)
            }
        })
    }

    /// Finite-difference check of this graph with step `h`.
    pub fn check(&self, h: f64) -> Result<GradCheck> {
        check_gradients(&self.inputs, h, |g, vars| self.build(g, vars))
    }
}
