use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    shape_of, BatchNorm2d, Conv2d, ConvTranspose2d, Mode, Module, StateDict, StateReader,
    StateWriter,
};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Float, Tensor};

const LEAKY_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Channels of the first encoder stage; doubles per stage.
    pub base_width: usize,
    pub max_width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl GeneratorConfig {
    pub fn new(resolution: usize) -> Self {
        GeneratorConfig {
            resolution,
            base_width: 16,
            max_width: 128,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn depth(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    fn width(&self, stage: usize) -> usize {
        (self.base_width << stage).min(self.max_width)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || !(16..=256).contains(&self.resolution) {
            return Err(Error::contract(format!(
                "generator resolution must be a power of two in 16..=256, got {}",
                self.resolution
            )));
        }
        if self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::contract("generator widths must satisfy 0 < base <= max"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::contract("generator channel counts must be positive"));
        }
        Ok(())
    }
}

struct Stage<T: Float, C> {
    conv: C,
    norm: Option<BatchNorm2d<T>>,
}

/// U-Net generator: `log2(resolution)` stride-2 encoder stages down to a
/// 1×1 bottleneck, a mirrored decoder with skip concatenations, tanh out.
pub struct GeneratorNet<T: Float = f32> {
    config: GeneratorConfig,
    encoder: Vec<Stage<T, Conv2d<T>>>,
    /// Ordered from the bottleneck outwards.
    decoder: Vec<Stage<T, ConvTranspose2d<T>>>,
    output: ConvTranspose2d<T>,
}

pub fn build_generator<T: Float>(
    config: GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<GeneratorNet<T>> {
    config.validate()?;
    let n = config.depth();

    let mut encoder = Vec::with_capacity(n);
    for i in 0..n {
        let cin = if i == 0 { config.in_channels } else { config.width(i - 1) };
        // No norm on the first stage nor on the 1×1 bottleneck.
        let normed = i != 0 && i != n - 1;
        encoder.push(Stage {
            conv: Conv2d::new(cin, config.width(i), 4, 2, 1, !normed, rng),
            norm: normed.then(|| BatchNorm2d::new(config.width(i))),
        });
    }

    let mut decoder = Vec::with_capacity(n - 1);
    for j in (1..n).rev() {
        let cin = if j == n - 1 { config.width(j) } else { 2 * config.width(j) };
        let cout = config.width(j - 1);
        decoder.push(Stage {
            conv: ConvTranspose2d::new(cin, cout, 4, 2, 1, false, rng),
            norm: Some(BatchNorm2d::new(cout)),
        });
    }
    let out_in = if n == 1 { config.width(0) } else { 2 * config.width(0) };
    let output = ConvTranspose2d::new(out_in, config.out_channels, 4, 2, 1, true, rng);

    Ok(GeneratorNet {
        config,
        encoder,
        decoder,
        output,
    })
}

impl<T: Float> GeneratorNet<T> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    /// `[B, in_channels, R, R]` → `[B, out_channels, R, R]` in (−1, 1).
    pub fn forward(&self, y: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let r = self.config.resolution;
        match *y.shape() {
            [_, c, h, w] if c == self.config.in_channels && h == r && w == r => {}
            _ => {
                return Err(Error::dim(format!(
                    "generator expects [B, {}, {r}, {r}], got {:?}",
                    self.config.in_channels,
                    y.shape()
                )))
            }
        }

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = y.clone();
        for stage in &self.encoder {
            h = stage.conv.forward(&h)?;
            if let Some(norm) = &stage.norm {
                h = norm.forward(&h, mode)?;
            }
            h = h.leaky_relu(LEAKY_ALPHA);
            skips.push(h.clone());
        }

        let n = self.encoder.len();
        for (i, stage) in self.decoder.iter().enumerate() {
            // decoder stage i mirrors encoder stage n-1-i
            let mut d = stage.conv.forward(&h)?;
            if let Some(norm) = &stage.norm {
                d = norm.forward(&d, mode)?;
            }
            d = d.relu();
            h = concat_channels(&[&d, &skips[n - 2 - i]])?;
        }
        Ok(self.output.forward(&h)?.tanh())
    }

    /// Rebuild the architecture from tensor shapes and load the values.
    pub fn from_state_dict(state: &StateDict<T>) -> Result<Self> {
        let mut n = 0;
        while shape_of(state, &format!("enc.{n}.conv.weight")).is_some() {
            n += 1;
        }
        if n == 0 {
            return Err(Error::Format("no generator encoder tensors".into()));
        }
        let first = shape_of(state, "enc.0.conv.weight").expect("counted above");
        let out = shape_of(state, "out.weight")
            .ok_or_else(|| Error::Format("missing tensor 'out.weight'".into()))?;
        let max_width = (0..n)
            .map(|i| shape_of(state, &format!("enc.{i}.conv.weight")).unwrap()[0])
            .max()
            .unwrap_or(first[0]);
        let config = GeneratorConfig {
            resolution: 1 << n,
            base_width: first[0],
            max_width,
            in_channels: first[1],
            out_channels: out[1],
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let net = build_generator(config, &mut rng)?;
        net.load_state_dict(state)?;
        Ok(net)
    }
}

impl<T: Float> Module<T> for GeneratorNet<T> {
    fn parameters(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        let mut push_stage = |w: &Tensor<T>, b: &Option<Tensor<T>>, norm: &Option<BatchNorm2d<T>>| {
            out.push(w.clone());
            out.extend(b.iter().cloned());
            if let Some(n) = norm {
                out.push(n.gamma.clone());
                out.push(n.beta.clone());
            }
        };
        for s in &self.encoder {
            push_stage(&s.conv.weight, &s.conv.bias, &s.norm);
        }
        for s in &self.decoder {
            push_stage(&s.conv.weight, &s.conv.bias, &s.norm);
        }
        push_stage(&self.output.weight, &self.output.bias, &None);
        out
    }

    fn state_dict(&self) -> StateDict<T> {
        let mut w = StateWriter::default();
        for (i, s) in self.encoder.iter().enumerate() {
            w.conv(&format!("enc.{i}.conv"), &s.conv);
            if let Some(n) = &s.norm {
                w.norm(&format!("enc.{i}.norm"), n);
            }
        }
        for (i, s) in self.decoder.iter().enumerate() {
            w.conv_t(&format!("dec.{i}.conv"), &s.conv);
            if let Some(n) = &s.norm {
                w.norm(&format!("dec.{i}.norm"), n);
            }
        }
        w.conv_t("out", &self.output);
        w.entries
    }

    fn load_state_dict(&self, state: &StateDict<T>) -> Result<()> {
        let mut r = StateReader::new(state)?;
        for (i, s) in self.encoder.iter().enumerate() {
            r.conv(&format!("enc.{i}.conv"), &s.conv)?;
            if let Some(n) = &s.norm {
                r.norm(&format!("enc.{i}.norm"), n)?;
            }
        }
        for (i, s) in self.decoder.iter().enumerate() {
            r.conv_t(&format!("dec.{i}.conv"), &s.conv)?;
            if let Some(n) = &s.norm {
                r.norm(&format!("dec.{i}.norm"), n)?;
            }
        }
        r.conv_t("out", &self.output)?;
        r.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = build_generator::<f32>(GeneratorConfig::new(64), &mut rng).unwrap();
        assert_eq!(g.encoder.len(), 6);
        let x = Tensor::zeros(&[1, 1, 64, 64]);
        let mut h = x.clone();
        for s in &g.encoder {
            h = s.conv.forward(&h).unwrap();
        }
        assert_eq!(&h.shape()[2..], &[1, 1]);

        let y = g.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        assert!(y.to_vec().iter().all(|v| v.is_finite() && v.abs() < 1.0));
    }

    #[test]
    fn rejects_bad_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in [8, 48, 512] {
            assert!(matches!(
                build_generator::<f32>(GeneratorConfig::new(r), &mut rng),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn state_dict_roundtrip_rebuilds_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GeneratorConfig {
            base_width: 4,
            max_width: 16,
            ..GeneratorConfig::new(32)
        };
        let g = build_generator::<f32>(cfg, &mut rng).unwrap();
        let sd = g.state_dict();
        let g2 = GeneratorNet::<f32>::from_state_dict(&sd).unwrap();
        assert_eq!(g2.config(), &cfg);
        assert_eq!(g2.state_dict(), sd);
    }

    #[test]
    fn load_rejects_missing_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = build_generator::<f32>(GeneratorConfig::new(16), &mut rng).unwrap();
        let mut sd = g.state_dict();
        sd.pop();
        assert!(g.load_state_dict(&sd).is_err());
    }
}
