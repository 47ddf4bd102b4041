use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    compute_receptive_field, layers_for_patch, shape_of, BatchNorm2d,
    Conv2d, Mode, Module, StateDict, StateReader, StateWriter,
};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Float, Tensor};

/// Patch sizes reachable by the k4/s2 + k2/s1 family, `2^(n+1) − 2`.
pub const PATCH_FAMILY: [usize; 6] = [2, 6, 14, 30, 62, 126];

const LEAKY_ALPHA: f64 = 0.2;
const BASE_WIDTH: usize = 16;
const MAX_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub patch_size: usize,
    pub weight: f64,
    pub conditional: bool,
}

impl DiscriminatorSpec {
    pub fn new(patch_size: usize, weight: f64) -> Self {
        DiscriminatorSpec {
            patch_size,
            weight,
            conditional: true,
        }
    }
}

/// PatchGAN critic. Emits one logit per receptive-field patch.
pub struct DiscriminatorNet<T: Float = f32> {
    spec: DiscriminatorSpec,
    in_channels: usize,
    body: Vec<(Conv2d<T>, Option<BatchNorm2d<T>>)>,
    head: Conv2d<T>,
}

/// Deepest discriminator that still leaves a 2×2 map for the head at this
/// resolution.
fn max_layers(resolution: usize) -> usize {
    let mut n = 1;
    while n < 6 && resolution >> n >= 2 {
        n += 1;
    }
    n
}

/// Build a discriminator for `spec` taking `in_channels` input channels
/// (candidate plus condition when conditional) at `resolution`.
///
/// When the requested patch exceeds what the resolution supports, depth is
/// clamped; [`DiscriminatorNet::effective_patch_size`] reports the result.
pub fn build_discriminator<T: Float>(
    spec: &DiscriminatorSpec,
    in_channels: usize,
    resolution: usize,
    rng: &mut impl Rng,
) -> Result<DiscriminatorNet<T>> {
    let requested = layers_for_patch(spec.patch_size)?;
    if in_channels == 0 {
        return Err(Error::contract("discriminator needs at least one input channel"));
    }
    if resolution < 2 {
        return Err(Error::contract("discriminator resolution must be at least 2"));
    }
    let n = requested.min(max_layers(resolution));
    Ok(DiscriminatorNet::with_layers(*spec, in_channels, n, rng))
}

impl<T: Float> DiscriminatorNet<T> {
    fn with_layers(
        spec: DiscriminatorSpec,
        in_channels: usize,
        n: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let width = |i: usize| (BASE_WIDTH << i).min(MAX_WIDTH);
        let mut body = Vec::with_capacity(n - 1);
        let mut cin = in_channels;
        for i in 0..n - 1 {
            let normed = i > 0;
            let conv = Conv2d::new(cin, width(i), 4, 2, 1, !normed, rng);
            body.push((conv, normed.then(|| BatchNorm2d::new(width(i)))));
            cin = width(i);
        }
        let head = Conv2d::new(cin, 1, 2, 1, 0, true, rng);
        DiscriminatorNet {
            spec,
            in_channels,
            body,
            head,
        }
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layer_count(&self) -> usize {
        self.body.len() + 1
    }

    /// `(kernel, stride)` per conv layer, input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        self.body
            .iter()
            .map(|(c, _)| (c.kernel(), c.stride))
            .chain(std::iter::once((self.head.kernel(), self.head.stride)))
            .collect()
    }

    pub fn effective_patch_size(&self) -> usize {
        compute_receptive_field(&self.layers()).expect("non-empty positive layers")
    }

    pub fn is_clamped(&self) -> bool {
        self.effective_patch_size() != self.spec.patch_size
    }

    /// Zero the head so every logit is 0 (σ = 0.5) regardless of input.
    pub fn zero_head(&self) {
        self.head.weight.data_mut().fill(T::zero());
        if let Some(b) = &self.head.bias {
            b.data_mut().fill(T::zero());
        }
    }

    pub fn head_bias(&self) -> &Tensor<T> {
        self.head.bias.as_ref().expect("head has a bias")
    }

    /// Logit map for `candidate`, with `condition` channel-concatenated in
    /// front when the net is conditional.
    pub fn forward(
        &self,
        candidate: &Tensor<T>,
        condition: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let input = if self.spec.conditional {
            let cond = condition
                .ok_or_else(|| Error::contract("conditional discriminator needs a condition"))?;
            if cond.shape().len() != 4
                || candidate.shape().len() != 4
                || cond.shape()[2..] != candidate.shape()[2..]
            {
                return Err(Error::contract(format!(
                    "condition {:?} and candidate {:?} differ in resolution",
                    cond.shape(),
                    candidate.shape()
                )));
            }
            concat_channels(&[cond, candidate])?
        } else {
            candidate.clone()
        };
        if input.shape().len() != 4 || input.shape()[1] != self.in_channels {
            return Err(Error::dim(format!(
                "discriminator expects {} input channels, got shape {:?}",
                self.in_channels,
                input.shape()
            )));
        }
        let mut h = input;
        for (conv, norm) in &self.body {
            h = conv.forward(&h)?;
            if let Some(norm) = norm {
                h = norm.forward(&h, mode)?;
            }
            h = h.leaky_relu(LEAKY_ALPHA);
        }
        self.head.forward(&h)
    }

    /// Rebuild from tensor shapes; the spec's weight and conditioning flag
    /// are not stored in tensors and come from `spec`.
    pub fn from_state_dict(
        spec: DiscriminatorSpec,
        state: &StateDict<T>,
        prefix: &str,
    ) -> Result<Self> {
        let mut n_body = 0;
        while shape_of(state, &format!("{prefix}body.{n_body}.conv.weight")).is_some() {
            n_body += 1;
        }
        let first_name = if n_body == 0 {
            format!("{prefix}head.weight")
        } else {
            format!("{prefix}body.0.conv.weight")
        };
        let first = shape_of(state, &first_name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{first_name}'")))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let net = Self::with_layers(spec, first[1], n_body + 1, &mut rng);
        let own: StateDict<T> = state
            .iter()
            .filter_map(|(name, d)| {
                name.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), d.clone()))
            })
            .collect();
        net.load_state_dict(&own)?;
        Ok(net)
    }
}

impl<T: Float> Module<T> for DiscriminatorNet<T> {
    fn parameters(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        for (conv, norm) in &self.body {
            out.push(conv.weight.clone());
            out.extend(conv.bias.iter().cloned());
            if let Some(n) = norm {
                out.push(n.gamma.clone());
                out.push(n.beta.clone());
            }
        }
        out.push(self.head.weight.clone());
        out.extend(self.head.bias.iter().cloned());
        out
    }

    fn state_dict(&self) -> StateDict<T> {
        let mut w = StateWriter::default();
        for (i, (conv, norm)) in self.body.iter().enumerate() {
            w.conv(&format!("body.{i}.conv"), conv);
            if let Some(n) = norm {
                w.norm(&format!("body.{i}.norm"), n);
            }
        }
        w.conv("head", &self.head);
        w.entries
    }

    fn load_state_dict(&self, state: &StateDict<T>) -> Result<()> {
        let mut r = StateReader::new(state)?;
        for (i, (conv, norm)) in self.body.iter().enumerate() {
            r.conv(&format!("body.{i}.conv"), conv)?;
            if let Some(n) = norm {
                r.norm(&format!("body.{i}.norm"), n)?;
            }
        }
        r.conv("head", &self.head)?;
        r.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(patch: usize, res: usize) -> DiscriminatorNet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_discriminator(&DiscriminatorSpec::new(patch, 1.0), 2, res, &mut rng).unwrap()
    }

    #[test]
    fn family_receptive_fields() {
        for (n, &patch) in PATCH_FAMILY.iter().enumerate() {
            let d = build(patch, 256);
            assert_eq!(d.layer_count(), n + 1);
            assert_eq!(d.effective_patch_size(), patch);
            assert!(!d.is_clamped());
        }
        assert_eq!(build(6, 64).layers(), vec![(4, 2), (2, 1)]);
        assert_eq!(build(126, 64).layer_count(), 6);
    }

    #[test]
    fn unsupported_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_discriminator::<f32>(&DiscriminatorSpec::new(7, 1.0), 2, 64, &mut rng)
            .err()
            .unwrap();
        let msg = err.to_string();
        assert!(msg.contains("{2, 6, 14, 30, 62, 126}"), "{msg}");
    }

    #[test]
    fn logit_map_shapes() {
        let y = Tensor::<f32>::zeros(&[1, 1, 64, 64]);
        let x = Tensor::zeros(&[1, 1, 64, 64]);
        let d6 = build(6, 64);
        assert_eq!(d6.forward(&x, Some(&y), Mode::Train).unwrap().shape(), &[1, 1, 31, 31]);
        let d126 = build(126, 64);
        assert_eq!(d126.forward(&x, Some(&y), Mode::Train).unwrap().shape(), &[1, 1, 1, 1]);

        let mut prev = usize::MAX;
        for &patch in &PATCH_FAMILY {
            let side = build(patch, 64).forward(&x, Some(&y), Mode::Train).unwrap().shape()[2];
            assert!(side < prev);
            prev = side;
        }
    }

    #[test]
    fn depth_clamps_to_resolution() {
        let d = build(126, 32);
        assert_eq!(d.layer_count(), 5);
        assert_eq!(d.effective_patch_size(), 62);
        assert!(d.is_clamped());
        let x = Tensor::<f32>::zeros(&[1, 1, 32, 32]);
        assert_eq!(d.forward(&x, Some(&x), Mode::Train).unwrap().shape(), &[1, 1, 1, 1]);
    }

    #[test]
    fn zero_head_gives_half() {
        let d = build(14, 32);
        d.zero_head();
        let x = Tensor::<f32>::full(&[2, 1, 32, 32], 0.3);
        let logits = d.forward(&x, Some(&x), Mode::Train).unwrap();
        assert!(logits.sigmoid().to_vec().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn missing_condition() {
        let d = build(6, 32);
        let x = Tensor::<f32>::zeros(&[1, 1, 32, 32]);
        assert!(matches!(d.forward(&x, None, Mode::Train), Err(Error::Contract(_))));
    }

    #[test]
    fn unconditional_takes_candidate_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DiscriminatorSpec {
            conditional: false,
            ..DiscriminatorSpec::new(6, 1.0)
        };
        let d = build_discriminator::<f32>(&spec, 1, 32, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 1, 32, 32]);
        assert_eq!(d.forward(&x, None, Mode::Train).unwrap().shape(), &[1, 1, 15, 15]);
    }

    #[test]
    fn state_roundtrip() {
        let d = build(30, 64);
        let sd: StateDict<f32> = d
            .state_dict()
            .into_iter()
            .map(|(n, t)| (format!("d0.{n}"), t))
            .collect();
        let d2 = DiscriminatorNet::from_state_dict(*d.spec(), &sd, "d0.").unwrap();
        assert_eq!(d2.layer_count(), d.layer_count());
        assert_eq!(d2.state_dict(), d.state_dict());
    }
}
