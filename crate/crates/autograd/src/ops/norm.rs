use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Normalization statistics used for one batch-norm evaluation.
#[derive(Clone, Debug)]
pub enum BatchStats<'a, T> {
    /// Normalize with the statistics of the batch itself.
    Batch,
    /// Normalize with externally tracked running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Output of [`batch_norm`] plus what the backward pass and the running-stat
/// update need.
pub struct BatchNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, for the running estimate.
    pub batch_var_unbiased: Vec<T>,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid("batch_norm", "expected at least N x C"));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], spatial))
}

/// Per-channel normalization over `N` and all trailing axes.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: BatchStats<'_, T>,
    eps: T,
) -> Result<BatchNormOut<T>> {
    let (n, c, s) = layout(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", &[c], gamma.shape()));
    }
    let count = n * s;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut unbiased = vec![T::zero(); c];
    let xd = x.data();
    for ch in 0..c {
        let mut sum = T::zero();
        for b in 0..n {
            sum += xd[(b * c + ch) * s..(b * c + ch + 1) * s].iter().copied().sum::<T>();
        }
        let m = sum / T::from_f64(count as f64);
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &xd[(b * c + ch) * s..(b * c + ch + 1) * s] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / T::from_f64(count as f64);
        unbiased[ch] = if count > 1 {
            sq / T::from_f64((count - 1) as f64)
        } else {
            T::zero()
        };
    }
    let (use_mean, use_var): (&[T], &[T]) = match stats {
        BatchStats::Batch => (&mean, &var),
        BatchStats::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("batch_norm running stats", &[c], &[mean.len()]));
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = use_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            let (m, is, g, bt) = (use_mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for idx in range {
                let h = (xd[idx] - m) * is;
                xhat.data_mut()[idx] = h;
                y.data_mut()[idx] = g * h + bt;
            }
        }
    }
    Ok(BatchNormOut {
        y,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var_unbiased: unbiased,
    })
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the gradient flows
/// through the batch mean and variance as well.
pub fn batch_norm_backward<T: Real>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = dy.shape();
    let (n, c, s) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let count = T::from_f64((n * s) as f64);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(shape);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            for (&d, &h) in dy.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                sum_dy += d;
                sum_dy_xhat += d * h;
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        let k = gamma.data()[ch] * inv_std[ch];
        for b in 0..n {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            for idx in r {
                let d = dy.data()[idx];
                dx.data_mut()[idx] = if batch_stats {
                    k * (d - sum_dy / count - xhat.data()[idx] * sum_dy_xhat / count)
                } else {
                    k * d
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
