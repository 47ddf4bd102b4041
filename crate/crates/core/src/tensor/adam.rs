use serde::{Deserialize, Serialize};

use super::{c, Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Float> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        AdamState {
            first_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam update. `grads[i]` of `None` leaves parameter
    /// `i` and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Option<&[T]>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "adam: state tracks {} parameters, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let cfg = self.config;
        let t = self.step_count as i32;
        let (b1, b2): (T, T) = (c(cfg.beta1), c(cfg.beta2));
        let bc1: T = c(1.0 - cfg.beta1.powi(t));
        let bc2: T = c(1.0 - cfg.beta2.powi(t));
        let lr: T = c(cfg.lr);
        let eps: T = c(cfg.epsilon);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            if m.len() != p.len() || g.len() != p.len() {
                return Err(Error::dim(format!("adam: size mismatch on parameter {i}")));
            }
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Adam bound to a set of parameter tensors.
pub struct Adam<T: Float = f32> {
    params: Vec<Tensor<T>>,
    pub state: AdamState<T>,
}

impl<T: Float> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, config: AdamConfig) -> Self {
        let state = AdamState::new(params.iter().map(|p| p.numel()), config);
        Adam { params, state }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Apply the accumulated gradients.
    pub fn step(&mut self) -> Result<()> {
        let grads: Vec<Option<Vec<T>>> = self.params.iter().map(|p| p.grad()).collect();
        let mut datas: Vec<_> = self.params.iter().map(|p| p.data_mut()).collect();
        let mut slices: Vec<&mut [T]> = datas.iter_mut().map(|d| d.as_mut_slice()).collect();
        let grad_refs: Vec<Option<&[T]>> = grads.iter().map(|g| g.as_deref()).collect();
        self.state.step(&mut slices, &grad_refs)
    }
}
