//! Network building blocks plus the generator and patch discriminators.

mod discriminator;
mod generator;
mod receptive;

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use discriminator::{build_discriminator, DiscriminatorNet, DiscriminatorSpec, PATCH_FAMILY};
pub use generator::{build_generator, GeneratorConfig, GeneratorNet};
pub use receptive::{compute_receptive_field, discriminator_layers, layers_for_patch};

use crate::error::{Error, Result};
use crate::tensor::{
    batch_norm, conv2d, conv_transpose2d, BatchNormMode, Float, RunningStats, Tensor, TensorData,
};

pub const BN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// How a forward pass treats normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running stats updated.
    Train,
    /// Batch statistics, running stats left alone. Used when a network is
    /// only a critic for another network's update.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

impl Mode {
    fn batch_norm(self) -> BatchNormMode {
        match self {
            Mode::Train => BatchNormMode::Train { update_stats: true },
            Mode::TrainFrozenStats => BatchNormMode::Train { update_stats: false },
            Mode::Eval => BatchNormMode::Eval,
        }
    }
}

/// Named tensors (parameters and buffers) in a stable order.
pub type StateDict<T> = Vec<(String, TensorData<T>)>;

pub trait Module<T: Float> {
    fn parameters(&self) -> Vec<Tensor<T>>;

    /// Parameters and running statistics, keyed by dotted path.
    fn state_dict(&self) -> StateDict<T>;

    fn load_state_dict(&self, state: &StateDict<T>) -> Result<()>;

    fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }
}

fn normal_init<T: Float>(n: usize, rng: &mut impl Rng) -> Vec<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
}

pub(crate) struct Conv2d<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let weight = Tensor::parameter(&shape, normal_init(cout * cin * kernel * kernel, rng))
            .expect("shape matches init length");
        let bias = with_bias.then(|| Tensor::zeros(&[cout]).into_parameter());
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

pub(crate) struct ConvTranspose2d<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> ConvTranspose2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [cin, cout, kernel, kernel];
        let weight = Tensor::parameter(&shape, normal_init(cout * cin * kernel * kernel, rng))
            .expect("shape matches init length");
        let bias = with_bias.then(|| Tensor::zeros(&[cout]).into_parameter());
        ConvTranspose2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv_transpose2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

pub(crate) struct BatchNorm2d<T: Float> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RefCell<RunningStats<T>>,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], T::one()).into_parameter(),
            beta: Tensor::zeros(&[channels]).into_parameter(),
            running: RefCell::new(RunningStats::new(channels)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut rs = self.running.borrow_mut();
        batch_norm(x, &self.gamma, &self.beta, BN_EPS, mode.batch_norm(), Some(&mut rs))
    }
}

/// Collects named tensors while walking a network.
#[derive(Default)]
pub(crate) struct StateWriter<T> {
    pub entries: StateDict<T>,
}

impl<T: Float> StateWriter<T> {
    pub fn tensor(&mut self, name: String, t: &Tensor<T>) {
        self.entries.push((name, t.to_data()));
    }

    pub fn conv(&mut self, prefix: &str, conv: &Conv2d<T>) {
        self.tensor(format!("{prefix}.weight"), &conv.weight);
        if let Some(b) = &conv.bias {
            self.tensor(format!("{prefix}.bias"), b);
        }
    }

    pub fn conv_t(&mut self, prefix: &str, conv: &ConvTranspose2d<T>) {
        self.tensor(format!("{prefix}.weight"), &conv.weight);
        if let Some(b) = &conv.bias {
            self.tensor(format!("{prefix}.bias"), b);
        }
    }

    pub fn norm(&mut self, prefix: &str, bn: &BatchNorm2d<T>) {
        self.tensor(format!("{prefix}.gamma"), &bn.gamma);
        self.tensor(format!("{prefix}.beta"), &bn.beta);
        let rs = bn.running.borrow();
        let ch = rs.mean.len();
        self.entries.push((
            format!("{prefix}.running_mean"),
            TensorData {
                shape: vec![ch],
                data: rs.mean.clone(),
            },
        ));
        self.entries.push((
            format!("{prefix}.running_var"),
            TensorData {
                shape: vec![ch],
                data: rs.var.clone(),
            },
        ));
    }
}

/// Strict loader: every tensor the network owns must be present with the
/// same shape, and nothing else may be.
pub(crate) struct StateReader<'a, T> {
    map: BTreeMap<&'a str, &'a TensorData<T>>,
    used: usize,
}

impl<'a, T: Float> StateReader<'a, T> {
    pub fn new(state: &'a StateDict<T>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, data) in state {
            if map.insert(name.as_str(), data).is_some() {
                return Err(Error::Format(format!("duplicate tensor '{name}'")));
            }
        }
        Ok(StateReader { map, used: 0 })
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<&'a TensorData<T>> {
        let d = self
            .map
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
        if d.shape != shape {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                d.shape, shape
            )));
        }
        self.used += 1;
        Ok(d)
    }

    pub fn tensor(&mut self, name: String, t: &Tensor<T>) -> Result<()> {
        let d = self.take(&name, t.shape())?;
        t.data_mut().copy_from_slice(&d.data);
        Ok(())
    }

    pub fn conv(&mut self, prefix: &str, conv: &Conv2d<T>) -> Result<()> {
        self.tensor(format!("{prefix}.weight"), &conv.weight)?;
        if let Some(b) = &conv.bias {
            self.tensor(format!("{prefix}.bias"), b)?;
        }
        Ok(())
    }

    pub fn conv_t(&mut self, prefix: &str, conv: &ConvTranspose2d<T>) -> Result<()> {
        self.tensor(format!("{prefix}.weight"), &conv.weight)?;
        if let Some(b) = &conv.bias {
            self.tensor(format!("{prefix}.bias"), b)?;
        }
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, bn: &BatchNorm2d<T>) -> Result<()> {
        self.tensor(format!("{prefix}.gamma"), &bn.gamma)?;
        self.tensor(format!("{prefix}.beta"), &bn.beta)?;
        let ch = bn.gamma.numel();
        let mean = self.take(&format!("{prefix}.running_mean"), &[ch])?;
        let var = self.take(&format!("{prefix}.running_var"), &[ch])?;
        let mut rs = bn.running.borrow_mut();
        rs.mean.copy_from_slice(&mean.data);
        rs.var.copy_from_slice(&var.data);
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.used != self.map.len() {
            return Err(Error::Format(format!(
                "{} unexpected tensors in state",
                self.map.len() - self.used
            )));
        }
        Ok(())
    }
}

/// Copy a state dict between precisions.
pub fn convert_state<A: Float, B: Float>(state: &StateDict<A>) -> StateDict<B> {
    state
        .iter()
        .map(|(name, d)| {
            (
                name.clone(),
                TensorData {
                    shape: d.shape.clone(),
                    data: d.data.iter().map(|v| B::from_f64_lossy(v.to_f64_lossy())).collect(),
                },
            )
        })
        .collect()
}

/// Look up a tensor shape in a state dict.
pub(crate) fn shape_of<'a, T>(state: &'a StateDict<T>, name: &str) -> Option<&'a [usize]> {
    state
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, d)| d.shape.as_slice())
}
