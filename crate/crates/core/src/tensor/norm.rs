use super::{c, Float, Tensor};
use crate::error::{Error, Result};

/// Per-channel running mean and variance tracked during training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics; fold them into the running stats
    /// when `update_stats` is set.
    Train { update_stats: bool },
    /// Normalize with the running stats.
    Eval,
}

/// Batch normalization over `[B, C, H, W]`, statistics per channel.
pub fn batch_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    mode: BatchNormMode,
    running: Option<&mut RunningStats<T>>,
) -> Result<Tensor<T>> {
    let [b, ch, h, w] = match *x.shape() {
        [b, ch, h, w] => [b, ch, h, w],
        _ => return Err(Error::dim("batch_norm input must be 4-D")),
    };
    if gamma.shape() != [ch] || beta.shape() != [ch] {
        return Err(Error::dim(format!(
            "batch_norm: gamma/beta must have shape [{ch}]"
        )));
    }
    let plane = h * w;
    let n = b * plane;
    let eps_t: T = c(eps);
    let xv = x.to_vec();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();

    let (mean, var) = match mode {
        BatchNormMode::Train { update_stats } => {
            let inv_n: T = c(1.0 / n as f64);
            let mut mean = vec![T::zero(); ch];
            let mut var = vec![T::zero(); ch];
            for ci in 0..ch {
                let mut s = T::zero();
                for bi in 0..b {
                    let off = (bi * ch + ci) * plane;
                    s += xv[off..off + plane].iter().copied().sum::<T>();
                }
                let m = s * inv_n;
                let mut sq = T::zero();
                for bi in 0..b {
                    let off = (bi * ch + ci) * plane;
                    sq += xv[off..off + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                mean[ci] = m;
                var[ci] = sq * inv_n;
            }
            if update_stats {
                if let Some(rs) = running {
                    let mom: T = c(rs.momentum);
                    let unbias: T = if n > 1 { c(n as f64 / (n - 1) as f64) } else { T::one() };
                    for ci in 0..ch {
                        rs.mean[ci] = (T::one() - mom) * rs.mean[ci] + mom * mean[ci];
                        rs.var[ci] = (T::one() - mom) * rs.var[ci] + mom * var[ci] * unbias;
                    }
                }
            }
            (mean, var)
        }
        BatchNormMode::Eval => {
            let rs = running.ok_or_else(|| Error::contract("eval batch_norm needs running stats"))?;
            (rs.mean.clone(), rs.var.clone())
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut xhat = vec![T::zero(); xv.len()];
    let mut y = vec![T::zero(); xv.len()];
    for bi in 0..b {
        for ci in 0..ch {
            let off = (bi * ch + ci) * plane;
            for i in off..off + plane {
                let xh = (xv[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                y[i] = gv[ci] * xh + bv[ci];
            }
        }
    }

    let batch_stats = matches!(mode, BatchNormMode::Train { .. });
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |dy| {
            let mut dgamma = vec![T::zero(); ch];
            let mut dbeta = vec![T::zero(); ch];
            let mut dx = vec![T::zero(); dy.len()];
            let n_t: T = c(n as f64);
            for ci in 0..ch {
                let mut sum_dy = T::zero();
                let mut sum_dy_xh = T::zero();
                for bi in 0..b {
                    let off = (bi * ch + ci) * plane;
                    for i in off..off + plane {
                        sum_dy += dy[i];
                        sum_dy_xh += dy[i] * xhat[i];
                    }
                }
                dgamma[ci] = sum_dy_xh;
                dbeta[ci] = sum_dy;
                let k = gv[ci] * inv_std[ci];
                for bi in 0..b {
                    let off = (bi * ch + ci) * plane;
                    for i in off..off + plane {
                        dx[i] = if batch_stats {
                            k * (dy[i] - sum_dy / n_t - xhat[i] * sum_dy_xh / n_t)
                        } else {
                            k * dy[i]
                        };
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(ch: usize, g: f64, b: f64) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[ch], g), Tensor::full(&[ch], b))
    }

    #[test]
    fn constant_input_yields_beta() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.2);
        let (g, b) = params(1, 1.0, 0.7);
        let mode = BatchNormMode::Train { update_stats: false };
        let y = batch_norm(&x, &g, &b, 1e-5, mode, None).unwrap();
        assert!(y.to_vec().iter().all(|&v| (v - 0.7).abs() <= 1e-3));
    }

    #[test]
    fn two_values_normalize_to_unit() {
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (g, b) = params(1, 1.0, 0.0);
        let mode = BatchNormMode::Train { update_stats: false };
        let y = batch_norm(&x, &g, &b, 1e-12, mode, None).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn running_stats_update_and_eval() {
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (g, b) = params(1, 1.0, 0.0);
        let mut rs = RunningStats::new(1);
        rs.momentum = 1.0;
        batch_norm(&x, &g, &b, 0.0, BatchNormMode::Train { update_stats: true }, Some(&mut rs))
            .unwrap();
        assert_eq!(rs.mean, vec![2.0]);
        // unbiased: 2 / 1
        assert_eq!(rs.var, vec![2.0]);

        let y = batch_norm(&x, &g, &b, 0.0, BatchNormMode::Eval, Some(&mut rs)).unwrap();
        let s = 2f64.sqrt();
        assert_eq!(y.to_vec(), vec![-1.0 / s, 1.0 / s]);
    }

    #[test]
    fn eval_without_stats_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let (g, b) = params(1, 1.0, 0.0);
        assert!(batch_norm(&x, &g, &b, 1e-5, BatchNormMode::Eval, None).is_err());
    }
}
