//! Central finite-difference gradient checking in double precision.
//!
//! Only forward evaluations are used here, so the check is independent of
//! the backward closures it validates. A probe whose `±h` evaluations land
//! on different sides of a relu / leaky relu / l1 kink is not a valid
//! central difference; such probes are redrawn (see [`trace_kinks`]).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{trace_kinks, Tensor};

pub mod suite;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
const SCALE_FLOOR: f64 = 1e-6;

/// Redraws allowed per probe before giving up.
const MAX_REDRAWS: usize = 50;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckReport {
    pub worst: f64,
    pub probes: usize,
    /// Probes discarded because the stencil straddled a kink.
    pub redrawn: usize,
}

impl CheckReport {
    fn record(&mut self, err: f64) {
        self.worst = self.worst.max(err);
        self.probes += 1;
    }
}

fn analytic_grads(
    loss: &impl Fn() -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    for t in inputs {
        t.zero_grad();
    }
    let (l, trace) = trace_kinks(loss);
    l?.backward()?;
    let grads = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((grads, trace))
}

/// f(+) and f(−) if neither crosses a kink relative to `base_trace`.
fn stencil(
    loss: &impl Fn() -> Result<Tensor<f64>>,
    base_trace: &[bool],
    mut set: impl FnMut(f64),
) -> Result<Option<(f64, f64)>> {
    set(1.0);
    let (plus, tp) = trace_kinks(loss);
    set(-1.0);
    let (minus, tm) = trace_kinks(loss);
    set(0.0);
    if tp != base_trace || tm != base_trace {
        return Ok(None);
    }
    Ok(Some((plus?.item(), minus?.item())))
}

/// Compare backward() against central differences coordinate by
/// coordinate. `coords` caps how many coordinates per input are probed
/// (chosen at random); `None` probes all.
pub fn check_coordinates(
    loss: impl Fn() -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    coords: Option<usize>,
    h: f64,
    rng: &mut impl Rng,
) -> Result<CheckReport> {
    let (grads, base_trace) = analytic_grads(&loss, inputs)?;
    let mut report = CheckReport::default();
    for (t, g) in inputs.iter().zip(&grads) {
        let n = t.numel();
        let random = matches!(coords, Some(k) if k < n);
        let count = if random { coords.unwrap() } else { n };
        for j in 0..count {
            let mut i = if random { rng.gen_range(0..n) } else { j };
            let mut redraws = 0;
            loop {
                let orig = t.data()[i];
                let result = stencil(&loss, &base_trace, |s| t.data_mut()[i] = orig + s * h)?;
                if let Some((plus, minus)) = result {
                    report.record(relative_error(g[i], (plus - minus) / (2.0 * h)));
                    break;
                }
                report.redrawn += 1;
                redraws += 1;
                if !random || redraws > MAX_REDRAWS {
                    // A fixed coordinate sits on a kink: no valid central
                    // difference exists there, so it is skipped.
                    if random {
                        return Err(Error::contract("gradient check: every probe hit a kink"));
                    }
                    break;
                }
                i = rng.gen_range(0..n);
            }
        }
    }
    Ok(report)
}

/// Directional check over all inputs at once: ⟨∇f, v⟩ against
/// `(f(θ + hv) − f(θ − hv)) / 2h` for `directions` random unit-norm v.
pub fn check_directional(
    loss: impl Fn() -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    directions: usize,
    h: f64,
    rng: &mut impl Rng,
) -> Result<CheckReport> {
    let (grads, base_trace) = analytic_grads(&loss, inputs)?;
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.to_vec()).collect();
    let mut report = CheckReport::default();
    for _ in 0..directions {
        let mut redraws = 0;
        loop {
            let mut dirs: Vec<Vec<f64>> = inputs
                .iter()
                .map(|t| (0..t.numel()).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            dirs.iter_mut().flatten().for_each(|v| *v /= norm);
            let analytic: f64 = grads
                .iter()
                .zip(&dirs)
                .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            let result = stencil(&loss, &base_trace, |sign| {
                for ((t, b), v) in inputs.iter().zip(&base).zip(&dirs) {
                    let mut d = t.data_mut();
                    for ((x, &b), &v) in d.iter_mut().zip(b).zip(v) {
                        *x = b + sign * h * v;
                    }
                }
            })?;
            if let Some((plus, minus)) = result {
                report.record(relative_error(analytic, (plus - minus) / (2.0 * h)));
                break;
            }
            report.redrawn += 1;
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::contract("gradient check: every direction hit a kink"));
            }
        }
    }
    Ok(report)
}

/// `Σ r ⊙ y` for a fixed random `r`, turning any tensor into a scalar whose
/// gradient exercises every output element.
pub fn random_projection(y: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(y.mul(weights)?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kink_straddling_probe_is_redrawn() {
        // relu at exactly 0: the only coordinate is on the kink.
        let x = Tensor::<f64>::parameter(&[1], vec![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = check_coordinates(|| Ok(x.relu().sum()), &[x.clone()], None, 1e-5, &mut rng)
            .unwrap();
        assert_eq!(r.probes, 0);
        assert_eq!(r.redrawn, 1);
    }

    #[test]
    fn relative_error_floor() {
        assert!(relative_error(1.0, 1.0 + 1e-3) > 1e-4);
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }
}
