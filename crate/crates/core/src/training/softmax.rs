//! Multinomial logistic regression trained by mini-batch gradient descent.
//!
//! Objective over a batch of n examples:
//! `L = (1/n) * sum_i -ln p(y_i | x_i) + (l2/2) * ||W||^2` (bias not
//! regularized). All reductions run sequentially in row-major order, so
//! results are bit-reproducible.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    /// Mini-batch size; `usize::MAX` means full-batch gradient descent.
    pub batch: usize,
    pub l2: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 0.1,
            epochs: 50,
            batch: 32,
            l2: 1e-4,
        }
    }
}

/// Weights (`classes x dim`, row-major) and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Params {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Params {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi))
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Objective value and its gradient on the examples selected by `batch`.
pub fn loss_and_gradient(
    params: &Params,
    xs: &[Vec<f64>],
    ys: &[usize],
    batch: &[usize],
    l2: f64,
) -> (f64, Params) {
    let mut grad = Params::zeros(params.classes, params.dim);
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        let x = &xs[i];
        let p = params.predict(x);
        loss -= p[ys[i]].max(f64::MIN_POSITIVE).ln();
        for (k, (gk_row, pk)) in grad.weights.chunks_exact_mut(params.dim).zip(&p).enumerate() {
            let delta = pk - if k == ys[i] { 1.0 } else { 0.0 };
            grad.bias[k] += delta;
            for (g, xi) in gk_row.iter_mut().zip(x) {
                *g += delta * xi;
            }
        }
    }
    loss /= n;
    for g in grad.bias.iter_mut() {
        *g /= n;
    }
    let mut sq = 0.0;
    for (g, w) in grad.weights.iter_mut().zip(&params.weights) {
        *g = *g / n + l2 * w;
        sq += w * w;
    }
    (loss + 0.5 * l2 * sq, grad)
}

/// Runs gradient descent from zero weights. Shuffling before each epoch is
/// the only use of randomness and is driven by `seed`.
pub fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize, dim: usize, hyper: &Hyper, seed: u64) -> Params {
    descend(xs, ys, classes, dim, hyper, seed, None)
}

/// Like [`fit`], calling `on_epoch(epoch, full_objective)` after each epoch.
pub fn fit_traced(
    xs: &[Vec<f64>],
    ys: &[usize],
    classes: usize,
    dim: usize,
    hyper: &Hyper,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Params {
    descend(xs, ys, classes, dim, hyper, seed, Some(&mut on_epoch))
}

fn descend(
    xs: &[Vec<f64>],
    ys: &[usize],
    classes: usize,
    dim: usize,
    hyper: &Hyper,
    seed: u64,
    mut on_epoch: Option<&mut dyn FnMut(usize, f64)>,
) -> Params {
    let mut params = Params::zeros(classes, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let batch = hyper.batch.clamp(1, xs.len().max(1));
    let all: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let (_, grad) = loss_and_gradient(&params, xs, ys, chunk, hyper.l2);
            for (w, g) in params.weights.iter_mut().zip(&grad.weights) {
                *w -= hyper.lr * g;
            }
            for (b, g) in params.bias.iter_mut().zip(&grad.bias) {
                *b -= hyper.lr * g;
            }
        }
        if let Some(cb) = on_epoch.as_mut() {
            let (full, _) = loss_and_gradient(&params, xs, ys, &all, hyper.l2);
            cb(epoch, full);
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(&[0.0; 4]);
        assert!(p.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn zero_params_loss_is_ln_k() {
        let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (loss, grad) = loss_and_gradient(&Params::zeros(3, 2), &xs, &[0, 2], &[0, 1], 0.1);
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        // Bias gradient: mean of (1/3 - onehot).
        assert!((grad.bias[1] - 1.0 / 3.0).abs() < 1e-15);
    }
}
