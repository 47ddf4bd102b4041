//! Randomized finite-difference cases for every differentiable operation.
//! Each case draws its shapes and values from the seed and reports the
//! worst relative error it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    check_coordinates, check_directional, random_projection, relative_error, CheckReport, DEFAULT_STEP,
};
use crate::error::Result;
use crate::nn::{build_discriminator, build_generator, DiscriminatorSpec, GeneratorConfig, Mode, Module};
use crate::tensor::{
    batch_norm, bce_with_logits, conv2d, conv_transpose2d, l1_loss, Activation, BatchNormMode,
    RunningStats, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    Conv2d,
    ConvTranspose2d,
    ConvAdjoint,
    Activations,
    BatchNorm,
    BceWithLogits,
    L1Loss,
    Generator16,
    DiscriminatorPatch6,
}

pub const CASES: [Case; 9] = [
    Case::Conv2d,
    Case::ConvTranspose2d,
    Case::ConvAdjoint,
    Case::Activations,
    Case::BatchNorm,
    Case::BceWithLogits,
    Case::L1Loss,
    Case::Generator16,
    Case::DiscriminatorPatch6,
];

impl Case {
    pub fn name(self) -> &'static str {
        match self {
            Case::Conv2d => "conv2d",
            Case::ConvTranspose2d => "conv_transpose2d",
            Case::ConvAdjoint => "conv adjoint",
            Case::Activations => "activations",
            Case::BatchNorm => "batch_norm",
            Case::BceWithLogits => "bce_with_logits",
            Case::L1Loss => "l1_loss",
            Case::Generator16 => "generator@16",
            Case::DiscriminatorPatch6 => "discriminator patch 6",
        }
    }

    /// Worst relative error over every probe of this case for `seed`.
    pub fn run(self, seed: u64) -> Result<f64> {
        // distinct streams per case so cases do not share draws
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self as u64 + 1);
        let report = match self {
            Case::ConvAdjoint => return adjoint_case(&mut rng),
            Case::Conv2d => conv2d_case(&mut rng),
            Case::ConvTranspose2d => conv_transpose2d_case(&mut rng),
            Case::Activations => activation_case(&mut rng),
            Case::BatchNorm => batch_norm_case(&mut rng),
            Case::BceWithLogits => bce_case(&mut rng),
            Case::L1Loss => l1_case(&mut rng),
            Case::Generator16 => generator_case(&mut rng),
            Case::DiscriminatorPatch6 => discriminator_case(&mut rng),
        }?;
        Ok(report.worst)
    }
}

fn merge(a: CheckReport, b: CheckReport) -> CheckReport {
    CheckReport {
        worst: a.worst.max(b.worst),
        probes: a.probes + b.probes,
        redrawn: a.redrawn + b.redrawn,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], param: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    let t = Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape");
    if param {
        t.into_parameter()
    } else {
        t
    }
}

/// Values at least 0.05 from zero, either sign.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn conv2d_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let (b, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let k = rng.gen_range(1..5);
    let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
    let (h, w) = (rng.gen_range(k..k + 5), rng.gen_range(k..k + 5));
    let x = uniform(rng, &[b, cin, h, w], true);
    let wt = uniform(rng, &[cout, cin, k, k], true);
    let bias = uniform(rng, &[cout], true);
    let r = uniform(rng, conv2d(&x, &wt, Some(&bias), stride, pad)?.shape(), false);
    check_coordinates(
        || random_projection(&conv2d(&x, &wt, Some(&bias), stride, pad)?, &r),
        &[x.clone(), wt.clone(), bias.clone()],
        None,
        DEFAULT_STEP,
        rng,
    )
}

fn conv_transpose2d_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let (b, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
    let k = rng.gen_range(2..5);
    let stride = rng.gen_range(1..3);
    // at least two input pixels so padding never eats the output
    let pad = rng.gen_range(0..2);
    let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
    let x = uniform(rng, &[b, cin, h, w], true);
    let wt = uniform(rng, &[cin, cout, k, k], true);
    let bias = uniform(rng, &[cout], true);
    let r = uniform(rng, conv_transpose2d(&x, &wt, Some(&bias), stride, pad)?.shape(), false);
    check_coordinates(
        || random_projection(&conv_transpose2d(&x, &wt, Some(&bias), stride, pad)?, &r),
        &[x.clone(), wt.clone(), bias.clone()],
        None,
        DEFAULT_STEP,
        rng,
    )
}

/// <conv(x), y> against <x, conv_transpose(y)> with shared weights.
fn adjoint_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cout = rng.gen_range(1..4);
    let x = uniform(rng, &[1, 2, 8, 8], false);
    let wt = uniform(rng, &[cout, 2, 4, 4], false);
    let fwd = conv2d(&x, &wt, None, 2, 1)?;
    let y = uniform(rng, fwd.shape(), false);
    let lhs: f64 = fwd.mul(&y)?.sum().item();
    let rhs: f64 = x.mul(&conv_transpose2d(&y, &wt, None, 2, 1)?)?.sum().item();
    Ok(relative_error(lhs, rhs))
}

fn activation_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let n = rng.gen_range(1..20);
    let x = Tensor::parameter(&[n], away_from_zero(rng, n))?;
    let r = uniform(rng, &[n], false);
    let mut report = CheckReport::default();
    for kind in [Activation::Relu, Activation::leaky(), Activation::Tanh, Activation::Sigmoid] {
        let one = check_coordinates(
            || random_projection(&x.activation(kind), &r),
            &[x.clone()],
            None,
            DEFAULT_STEP,
            rng,
        )?;
        report = merge(report, one);
    }
    Ok(report)
}

fn batch_norm_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let (b, c, h) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    let x = uniform(rng, &[b, c, h, 2], true);
    let gamma = uniform(rng, &[c], true);
    let beta = uniform(rng, &[c], true);
    let r = uniform(rng, &[b, c, h, 2], false);
    let inputs = [x.clone(), gamma.clone(), beta.clone()];
    let train = BatchNormMode::Train { update_stats: false };
    let on_batch = check_coordinates(
        || random_projection(&batch_norm(&x, &gamma, &beta, 1e-5, train, None)?, &r),
        &inputs,
        None,
        DEFAULT_STEP,
        rng,
    )?;
    let mut stats = RunningStats::new(c);
    stats.mean = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    stats.var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    let on_running = check_coordinates(
        || {
            let mut s = stats.clone();
            random_projection(&batch_norm(&x, &gamma, &beta, 1e-5, BatchNormMode::Eval, Some(&mut s))?, &r)
        },
        &inputs,
        None,
        DEFAULT_STEP,
        rng,
    )?;
    Ok(merge(on_batch, on_running))
}

fn bce_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let n = rng.gen_range(1..16);
    let z = Tensor::parameter(&[n], (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect())?;
    // hard and soft labels
    let t = Tensor::from_vec(
        &[n],
        (0..n)
            .map(|i| if i % 3 == 0 { f64::from(u8::from(rng.gen_bool(0.5))) } else { rng.gen_range(0.0..1.0) })
            .collect(),
    )?;
    check_coordinates(|| bce_with_logits(&z, &t), &[z.clone()], None, DEFAULT_STEP, rng)
}

fn l1_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let n = rng.gen_range(1..16);
    let a = Tensor::parameter(&[n], away_from_zero(rng, n))?;
    let b = Tensor::zeros(&[n]).into_parameter();
    check_coordinates(|| l1_loss(&a, &b), &[a.clone(), b.clone()], None, DEFAULT_STEP, rng)
}

fn generator_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let g = build_generator::<f64>(GeneratorConfig::new(16), rng)?;
    let y = uniform(rng, &[2, 1, 16, 16], true);
    let target = uniform(rng, &[2, 1, 16, 16], false);
    let mut inputs = g.parameters();
    inputs.push(y.clone());
    let loss = || random_projection(&g.forward(&y, Mode::TrainFrozenStats)?, &target);
    let all = check_directional(loss, &inputs, 2, DEFAULT_STEP, rng)?;
    let input = check_coordinates(loss, &inputs[inputs.len() - 1..], Some(8), DEFAULT_STEP, rng)?;
    Ok(merge(all, input))
}

fn discriminator_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let d = build_discriminator::<f64>(&DiscriminatorSpec::new(6, 1.0), 2, 16, rng)?;
    let cand = uniform(rng, &[2, 1, 16, 16], true);
    let cond = uniform(rng, &[2, 1, 16, 16], false);
    let ones = Tensor::full(&[2, 1, 7, 7], 1.0);
    let mut inputs = d.parameters();
    inputs.push(cand.clone());
    let loss = || bce_with_logits(&d.forward(&cand, Some(&cond), Mode::TrainFrozenStats)?, &ones);
    let all = check_directional(loss, &inputs, 2, DEFAULT_STEP, rng)?;
    let some = check_coordinates(loss, &inputs[inputs.len() - 2..], Some(8), DEFAULT_STEP, rng)?;
    Ok(merge(all, some))
}
