//! Dense-layer primitives with hand-derived backward passes.
//!
//! Everything here is expressed on [`Matrix`] in a chosen precision: `f32`
//! for training, `f64` when the same code is being gradient-checked against
//! central finite differences.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y = x W + b`.
pub fn linear_forward<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    if b.len() != w.cols() {
        return Err(Error::ShapeMismatch(format!(
            "bias length {} does not match {} output channels",
            b.len(),
            w.cols()
        )));
    }
    let mut y = x.matmul(w)?;
    for i in 0..y.rows() {
        for (o, &bj) in y.row_mut(i).iter_mut().zip(b) {
            *o += bj;
        }
    }
    debug_assert!(y.all_finite(), "linear_forward produced non-finite output");
    Ok(y)
}

/// Gradients of `y = x W + b` given `grad_y`.
pub fn linear_backward<T: Real>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    grad_y: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Vec<T>)> {
    if grad_y.rows() != x.rows() || grad_y.cols() != w.cols() {
        return Err(Error::ShapeMismatch(format!(
            "grad_y {}x{} for x {}x{} and w {}x{}",
            grad_y.rows(),
            grad_y.cols(),
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let grad_x = grad_y.matmul_a_bt(w)?;
    let grad_w = x.matmul_at_b(grad_y)?;
    let mut grad_b = vec![T::ZERO; w.cols()];
    for i in 0..grad_y.rows() {
        for (g, &v) in grad_b.iter_mut().zip(grad_y.row(i)) {
            *g += v;
        }
    }
    Ok((grad_x, grad_w, grad_b))
}

pub fn relu_forward<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.maximum(T::ZERO))
}

/// Masks `grad_y` by the activation sign; the gradient at exactly 0 is 0.
pub fn relu_backward<T: Real>(out: &Matrix<T>, grad_y: &Matrix<T>) -> Matrix<T> {
    debug_assert_eq!(out.shape(), grad_y.shape());
    let mut grad_x = grad_y.clone();
    for (g, &o) in grad_x.data_mut().iter_mut().zip(out.data()) {
        if !(o > T::ZERO) {
            *g = T::ZERO;
        }
    }
    grad_x
}

/// Per-channel batch normalization over all rows of the input.
///
/// All points of all clouds in a minibatch are pooled into one statistics
/// batch. Running statistics follow the usual convention: biased variance
/// normalizes the batch, the unbiased estimate feeds the running average.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, BnCache<T>)> {
        let (m, c) = x.shape();
        if c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm over {} channels got {c}",
                self.channels()
            )));
        }
        let eps = T::from_f64(self.eps);
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batchnorm in train mode needs at least 2 rows, got {m}"
                    )));
                }
                let inv_m = T::ONE / T::from_f64(m as f64);
                let mut mean = vec![T::ZERO; c];
                for i in 0..m {
                    for (acc, &v) in mean.iter_mut().zip(x.row(i)) {
                        *acc += v;
                    }
                }
                for v in mean.iter_mut() {
                    *v *= inv_m;
                }
                let mut var = vec![T::ZERO; c];
                for i in 0..m {
                    for ((acc, &v), &mu) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                        let d = v - mu;
                        *acc += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v *= inv_m;
                }
                // Unbiased estimate for the running average.
                let bessel = T::from_f64(m as f64 / (m as f64 - 1.0));
                let mom = T::from_f64(self.momentum);
                let keep = T::ONE - mom;
                for ((rm, rv), (&mu, &va)) in self
                    .running_mean
                    .iter_mut()
                    .zip(self.running_var.iter_mut())
                    .zip(mean.iter().zip(&var))
                {
                    *rm = keep * *rm + mom * mu;
                    *rv = keep * *rv + mom * va * bessel;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => {
                let inv_std: Vec<T> = self
                    .running_var
                    .iter()
                    .map(|&v| T::ONE / (v + eps).sqrt())
                    .collect();
                (self.running_mean.clone(), inv_std)
            }
        };

        let mut xhat = Matrix::zeros(m, c);
        let mut y = Matrix::zeros(m, c);
        for i in 0..m {
            let xr = x.row(i);
            let hr = xhat.row_mut(i);
            for j in 0..c {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let yr = y.row_mut(i);
            for j in 0..c {
                yr[j] = self.gamma[j] * hr[j] + self.beta[j];
            }
        }
        debug_assert!(y.all_finite(), "batchnorm produced non-finite output");
        Ok((y, BnCache { xhat, inv_std, mode }))
    }

    pub fn backward(
        &self,
        cache: &BnCache<T>,
        grad_y: &Matrix<T>,
    ) -> (Matrix<T>, Vec<T>, Vec<T>) {
        let (m, c) = grad_y.shape();
        debug_assert_eq!(cache.xhat.shape(), (m, c));
        let mut grad_gamma = vec![T::ZERO; c];
        let mut grad_beta = vec![T::ZERO; c];
        for i in 0..m {
            let gy = grad_y.row(i);
            let xh = cache.xhat.row(i);
            for j in 0..c {
                grad_gamma[j] += gy[j] * xh[j];
                grad_beta[j] += gy[j];
            }
        }
        let mut grad_x = Matrix::zeros(m, c);
        match cache.mode {
            Mode::Train => {
                let inv_m = T::ONE / T::from_f64(m as f64);
                for i in 0..m {
                    let gy = grad_y.row(i);
                    let xh = cache.xhat.row(i);
                    let gx = grad_x.row_mut(i);
                    for j in 0..c {
                        let centered =
                            gy[j] - inv_m * grad_beta[j] - xh[j] * inv_m * grad_gamma[j];
                        gx[j] = self.gamma[j] * cache.inv_std[j] * centered;
                    }
                }
            }
            Mode::Eval => {
                // Statistics are constants in eval mode.
                for i in 0..m {
                    let gy = grad_y.row(i);
                    let gx = grad_x.row_mut(i);
                    for j in 0..c {
                        gx[j] = self.gamma[j] * cache.inv_std[j] * gy[j];
                    }
                }
            }
        }
        (grad_x, grad_gamma, grad_beta)
    }
}

/// Channel-wise max over the rows `[start, end)`.
///
/// Returns the pooled row and, per channel, the absolute row index of the
/// first maximum (tie broken toward the lowest row index).
pub fn maxpool_rows<T: Real>(x: &Matrix<T>, start: usize, end: usize) -> (Vec<T>, Vec<u32>) {
    assert!(start < end && end <= x.rows(), "empty or out-of-range pool");
    let c = x.cols();
    let mut best = x.row(start).to_vec();
    let mut arg = vec![start as u32; c];
    for i in start + 1..end {
        let row = x.row(i);
        for j in 0..c {
            if row[j] > best[j] {
                best[j] = row[j];
                arg[j] = i as u32;
            }
        }
    }
    (best, arg)
}

/// Channel-wise max over every row of `x`.
pub fn channelwise_maxpool<T: Real>(x: &Matrix<T>) -> (Vec<T>, Vec<u32>) {
    maxpool_rows(x, 0, x.rows())
}

/// Routes `grad_out` back to the argmax rows recorded by the forward pass.
pub fn maxpool_backward_into<T: Real>(grad_out: &[T], argmax: &[u32], grad_x: &mut Matrix<T>) {
    debug_assert_eq!(grad_out.len(), argmax.len());
    for (j, (&g, &row)) in grad_out.iter().zip(argmax).enumerate() {
        let r = grad_x.row_mut(row as usize);
        r[j] += g;
    }
}

/// Numerically stabilized softmax cross entropy for one logit row.
///
/// Returns the loss and the gradient `softmax - onehot(label)`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax needs at least 2 classes, got {k}"
        )));
    }
    if label >= k {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let mut max = logits[0];
    for &v in &logits[1..] {
        max = max.maximum(v);
    }
    let mut sum = T::ZERO;
    for &v in logits {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<T> = logits.iter().map(|&v| (v - lse).exp()).collect();
    grad[label] -= T::ONE;
    Ok((loss, grad))
}

/// Mean cross entropy over a batch of logit rows; gradient carries the 1/B.
pub fn softmax_cross_entropy_batch<T: Real>(
    logits: &Matrix<T>,
    labels: &[u32],
) -> Result<(T, Matrix<T>)> {
    let b = logits.rows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    let inv_b = T::ONE / T::from_f64(b as f64);
    let mut total = T::ZERO;
    let mut grad = Matrix::zeros(b, logits.cols());
    for i in 0..b {
        let (loss, g) = softmax_cross_entropy(logits.row(i), labels[i] as usize)?;
        total += loss;
        for (dst, &v) in grad.row_mut(i).iter_mut().zip(&g) {
            *dst = v * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}

/// Uniform init in the symmetric Glorot range `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<T: Real>(rng: &mut crate::rng::Rng, rows: usize, cols: usize) -> Matrix<T> {
    let limit = libm::sqrt(6.0 / (rows + cols) as f64);
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.uniform(-limit, limit)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update; `t` is the 1-based step count.
pub fn adam_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    hp: &AdamHyper,
) {
    debug_assert!(t >= 1);
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), m.len());
    debug_assert_eq!(param.len(), v.len());
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let one_minus_b1 = T::ONE - b1;
    let one_minus_b2 = T::ONE - b2;
    let corr1 = T::from_f64(1.0 - libm::pow(hp.beta1, t as f64));
    let corr2 = T::from_f64(1.0 - libm::pow(hp.beta2, t as f64));
    let lr = T::from_f64(hp.lr);
    let eps = T::from_f64(hp.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + one_minus_b1 * g;
        v[i] = b2 * v[i] + one_minus_b2 * g * g;
        let mhat = m[i] / corr1;
        let vhat = v[i] / corr2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}
