//! Adversarial objectives.

use crate::error::{Error, Result};
use crate::nn::{DiscriminatorNet, Mode};
use crate::tensor::{bce_with_logits, l1_loss, Float, Tensor};

/// How far `Σ w` may drift from 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Probabilities are turned into logits clamped to this magnitude, which is
/// far enough out that `ln σ` saturates to 0 in double precision.
const LOGIT_LIMIT: f64 = 1e4;

pub fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Config("at least one discriminator is required".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Config(format!("discriminator weight {w} must be finite and ≥ 0")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::Config(format!("discriminator weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// The generator objective with each term kept for reporting.
pub struct GeneratorLoss<T: Float> {
    pub total: Tensor<T>,
    /// Unweighted `−mean log D_i(G(y))` per discriminator.
    pub adversarial: Vec<f64>,
    /// Mean absolute error between target and generated image.
    pub l1: f64,
}

/// `Σ w_i · bce(z_i, 1) + λ · mean|real − fake|` from discriminator logit
/// maps `z_i`, which equals `−Σ w_i mean log σ(z_i) + λ·L1`.
pub fn generator_loss<T: Float>(
    d_logits: &[Tensor<T>],
    weights: &[f64],
    fake: &Tensor<T>,
    real: &Tensor<T>,
    lambda: f64,
) -> Result<GeneratorLoss<T>> {
    if d_logits.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} score maps but {} weights",
            d_logits.len(),
            weights.len()
        )));
    }
    check_weights(weights)?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    if fake.shape() != real.shape() {
        return Err(Error::dim(format!(
            "generated {:?} and target {:?} differ in shape",
            fake.shape(),
            real.shape()
        )));
    }
    let l1 = l1_loss(real, fake)?;
    let mut total = l1.scale(lambda);
    let mut adversarial = Vec::with_capacity(d_logits.len());
    for (z, &w) in d_logits.iter().zip(weights) {
        let term = bce_with_logits(z, &Tensor::full(z.shape(), T::one()))?;
        adversarial.push(term.item().to_f64_lossy());
        total = total.add(&term.scale(w))?;
    }
    let l1 = l1.item().to_f64_lossy();
    Ok(GeneratorLoss {
        total,
        adversarial,
        l1,
    })
}

/// Convert probabilities in [0, 1] to logits for the loss functions.
pub fn scores_to_logits(scores: &Tensor<f64>) -> Tensor<f64> {
    let data = scores
        .data()
        .iter()
        .map(|&p| (p.ln() - (-p).ln_1p()).clamp(-LOGIT_LIMIT, LOGIT_LIMIT))
        .collect();
    Tensor::from_vec(scores.shape(), data).expect("same shape")
}

/// [`generator_loss`] from patch probability maps instead of logits.
pub fn generator_loss_from_scores(
    d_scores: &[Tensor<f64>],
    weights: &[f64],
    fake: &Tensor<f64>,
    real: &Tensor<f64>,
    lambda: f64,
) -> Result<f64> {
    let logits: Vec<_> = d_scores.iter().map(scores_to_logits).collect();
    Ok(generator_loss(&logits, weights, fake, real, lambda)?.total.item())
}

/// `½ [bce(D(y, real), 1) + bce(D(y, fake), 0)]`. `fake` must already be
/// detached from the generator's graph.
pub fn discriminator_loss<T: Float>(
    d: &DiscriminatorNet<T>,
    condition: &Tensor<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    if fake.requires_grad() {
        return Err(Error::contract(
            "discriminator update needs a detached fake sample",
        ));
    }
    if real.shape() != fake.shape() {
        return Err(Error::dim(format!(
            "real {:?} and fake {:?} differ in shape",
            real.shape(),
            fake.shape()
        )));
    }
    let real_logits = d.forward(real, Some(condition), mode)?;
    let fake_logits = d.forward(fake, Some(condition), mode)?;
    let on_real = bce_with_logits(&real_logits, &Tensor::full(real_logits.shape(), T::one()))?;
    let on_fake = bce_with_logits(&fake_logits, &Tensor::zeros(fake_logits.shape()))?;
    Ok(on_real.add(&on_fake)?.scale(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_discriminator, DiscriminatorSpec, Module};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn full(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape, v)
    }

    #[test]
    fn single_d_at_half() {
        let img = full(&[1, 1, 4, 4], 0.3);
        let l = generator_loss_from_scores(&[full(&[1, 1, 3, 3], 0.5)], &[1.0], &img, &img, 100.0)
            .unwrap();
        assert!((l - LN2).abs() < 1e-12);
        assert!((l - 0.6931).abs() < 5e-5);
    }

    #[test]
    fn two_ds_equal_scores() {
        let img = full(&[1, 1, 4, 4], 0.3);
        let s = [full(&[1, 1, 3, 3], 0.5), full(&[1, 1, 1, 1], 0.5)];
        let l = generator_loss_from_scores(&s, &[0.25, 0.75], &img, &img, 100.0).unwrap();
        assert!((l - LN2).abs() < 1e-12);
    }

    #[test]
    fn certain_d_leaves_only_l1() {
        let real = full(&[1, 1, 4, 4], 0.5);
        let fake = full(&[1, 1, 4, 4], 0.49);
        let l = generator_loss_from_scores(&[full(&[1, 1, 2, 2], 1.0)], &[1.0], &fake, &real, 100.0)
            .unwrap();
        assert!((l - 1.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn weight_validation() {
        let img = full(&[1, 1, 2, 2], 0.0);
        let s = [full(&[1], 0.5), full(&[1], 0.5)];
        assert!(matches!(
            generator_loss_from_scores(&s, &[0.5, 0.6], &img, &img, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generator_loss_from_scores(&s, &[1.0], &img, &img, 1.0),
            Err(Error::Contract(_))
        ));
        assert!(generator_loss_from_scores(&s, &[0.5, 0.5 + 1e-10], &img, &img, 1.0).is_ok());
    }

    #[test]
    fn permutation_invariant_and_lambda_zero_ignores_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                Tensor::from_vec(&[1, 1, 2, 2], (0..4).map(|_| rng.gen_range(0.05..0.95)).collect())
                    .unwrap()
            })
            .collect();
        let w = [0.2, 0.3, 0.5];
        let fake = full(&[1, 1, 4, 4], 0.1);
        let real = full(&[1, 1, 4, 4], -0.4);
        let a = generator_loss_from_scores(&maps, &w, &fake, &real, 10.0).unwrap();
        let perm = [maps[2].clone(), maps[0].clone(), maps[1].clone()];
        let b = generator_loss_from_scores(&perm, &[0.5, 0.2, 0.3], &fake, &real, 10.0).unwrap();
        assert!((a - b).abs() <= 1e-12);

        let other = full(&[1, 1, 4, 4], 0.9);
        let c = generator_loss_from_scores(&maps, &w, &fake, &real, 0.0).unwrap();
        let d = generator_loss_from_scores(&maps, &w, &fake, &other, 0.0).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn discriminator_loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = build_discriminator::<f64>(&DiscriminatorSpec::new(6, 1.0), 2, 16, &mut rng).unwrap();
        d.zero_head();
        let y = full(&[1, 1, 16, 16], 0.2);
        let x = full(&[1, 1, 16, 16], 0.7);
        let l = discriminator_loss(&d, &y, &x, &x, Mode::Train).unwrap();
        assert!((l.item() - LN2).abs() < 1e-12);
        assert!(discriminator_loss(&d, &y, &x, &x.clone().into_parameter(), Mode::Train).is_err());
    }

    #[test]
    fn discriminator_head_bias_gradient() {
        // d/db of the loss is ½[mean(σ_real − 1) + mean(σ_fake)]
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = build_discriminator::<f64>(&DiscriminatorSpec::new(6, 1.0), 2, 16, &mut rng).unwrap();
        let rand_img = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let (y, x, f) = (rand_img(&mut rng), rand_img(&mut rng), rand_img(&mut rng));
        let mode = Mode::TrainFrozenStats;
        d.zero_grad();
        discriminator_loss(&d, &y, &x, &f, mode).unwrap().backward().unwrap();
        let analytic = d.head_bias().grad().unwrap()[0];

        let mean_sigmoid = |img: &Tensor<f64>| {
            let z = d.forward(img, Some(&y), mode).unwrap();
            let v = z.sigmoid().to_vec();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let expected = 0.5 * ((mean_sigmoid(&x) - 1.0) + mean_sigmoid(&f));
        assert!((analytic - expected).abs() < 1e-12);

        let h = 1e-6;
        let bias = d.head_bias();
        let b0 = bias.data()[0];
        let eval = |b: f64| {
            bias.data_mut()[0] = b;
            discriminator_loss(&d, &y, &x, &f, mode).unwrap().item()
        };
        let numeric = (eval(b0 + h) - eval(b0 - h)) / (2.0 * h);
        bias.data_mut()[0] = b0;
        assert!((numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1e-6));
    }
}
