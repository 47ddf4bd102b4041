use std::cell::RefCell;

use super::{c, Float, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static KINK_TRACE: RefCell<Option<Vec<bool>>> = const { RefCell::new(None) };
}

/// Run `f` while recording which side of its kink every input to a
/// piecewise-linear op (relu, leaky relu, l1) fell on. Two evaluations with
/// different traces straddle a non-differentiable point.
pub fn trace_kinks<R>(f: impl FnOnce() -> R) -> (R, Vec<bool>) {
    let outer = KINK_TRACE.with(|t| t.borrow_mut().replace(Vec::new()));
    let r = f();
    let trace = KINK_TRACE.with(|t| std::mem::replace(&mut *t.borrow_mut(), outer));
    (r, trace.unwrap_or_default())
}

fn record_kinks<T: Float>(values: &[T], side: impl Fn(T) -> u8) {
    KINK_TRACE.with(|t| {
        if let Some(trace) = t.borrow_mut().as_mut() {
            for &v in values {
                let s = side(v);
                trace.push(s & 1 != 0);
                trace.push(s & 2 != 0);
            }
        }
    });
}

fn sign_side<T: Float>(v: T) -> u8 {
    u8::from(v > T::zero()) | (u8::from(v < T::zero()) << 1)
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const LEAKY_DEFAULT_ALPHA: f64 = 0.2;

    pub fn leaky() -> Self {
        Activation::LeakyRelu(Self::LEAKY_DEFAULT_ALPHA)
    }
}

pub(crate) fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    fn unary(
        &self,
        forward: impl Fn(T) -> T,
        derivative: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let x = self.to_vec();
        let y: Vec<T> = x.iter().map(|&v| forward(v)).collect();
        let saved_y = y.clone();
        Tensor::from_op(self.shape().to_vec(), y, vec![self.clone()], move |g| {
            let dx = g
                .iter()
                .zip(x.iter().zip(&saved_y))
                .map(|(&g, (&x, &y))| g * derivative(x, y))
                .collect();
            vec![Some(dx)]
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "add")?;
        let y = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "sub")?;
        let y = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "mul")?;
        let a = self.to_vec();
        let b = other.to_vec();
        let y = a.iter().zip(&b).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), other.clone()],
            move |g| {
                let da = g.iter().zip(&b).map(|(&g, &b)| g * b).collect();
                let db = g.iter().zip(&a).map(|(&g, &a)| g * a).collect();
                vec![Some(da), Some(db)]
            },
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s: T = c(s);
        let y = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), y, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    /// `s·x + b` elementwise.
    pub fn affine(&self, s: f64, b: f64) -> Tensor<T> {
        let (s, b): (T, T) = (c(s), c(b));
        let y = self.data().iter().map(|&v| v * s + b).collect();
        Tensor::from_op(self.shape().to_vec(), y, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv: T = c(1.0 / n as f64);
        let s: T = self.data().iter().copied().sum::<T>() * inv;
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        record_kinks(&self.data(), sign_side);
        self.unary(
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor<T> {
        let a: T = c(alpha);
        record_kinks(&self.data(), sign_side);
        self.unary(
            move |v| if v > T::zero() { v } else { v * a },
            move |x, _| if x > T::zero() { T::one() } else { a },
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn activation(&self, kind: Activation) -> Tensor<T> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::LeakyRelu(alpha) => self.leaky_relu(alpha),
            Activation::Tanh => self.tanh(),
            Activation::Sigmoid => self.sigmoid(),
        }
    }
}

/// Concatenate 4-D tensors along the channel axis.
pub fn concat_channels<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors"))?;
    if first.shape().len() != 4 {
        return Err(Error::dim("concat_channels needs 4-D tensors"));
    }
    let (b, h, w) = (first.shape()[0], first.shape()[2], first.shape()[3]);
    for p in parts {
        let s = p.shape();
        if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
            return Err(Error::dim(format!(
                "concat_channels: {:?} incompatible with {:?}",
                s,
                first.shape()
            )));
        }
    }
    let channels: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(b * total * plane);
    for bi in 0..b {
        for (p, &ch) in parts.iter().zip(&channels) {
            let d = p.data();
            out.extend_from_slice(&d[bi * ch * plane..(bi + 1) * ch * plane]);
        }
    }
    let parents: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
    Ok(Tensor::from_op(
        vec![b, total, h, w],
        out,
        parents,
        move |g| {
            let mut grads: Vec<Vec<T>> = channels
                .iter()
                .map(|&ch| Vec::with_capacity(b * ch * plane))
                .collect();
            let mut offset = 0;
            for _ in 0..b {
                for (gi, &ch) in grads.iter_mut().zip(&channels) {
                    gi.extend_from_slice(&g[offset..offset + ch * plane]);
                    offset += ch * plane;
                }
            }
            grads.into_iter().map(Some).collect()
        },
    ))
}

/// Mean binary cross-entropy on logits, in the overflow-free softplus form
/// `max(z,0) - z·t + ln(1 + e^-|z|)`.
pub fn bce_with_logits<T: Float>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(logits, target, "bce_with_logits")?;
    let z = logits.to_vec();
    let t = target.to_vec();
    let n = z.len();
    let inv: T = c(1.0 / n as f64);
    let total: T = z
        .iter()
        .zip(&t)
        .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(Tensor::from_op(
        vec![1],
        vec![total * inv],
        vec![logits.clone(), target.clone()],
        move |g| {
            let scale = g[0] * inv;
            let dz = z
                .iter()
                .zip(&t)
                .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                .collect();
            // d/dt = -z
            let dt = z.iter().map(|&z| -z * scale).collect();
            vec![Some(dz), Some(dt)]
        },
    ))
}

/// Mean absolute difference. The subgradient at ties is zero.
pub fn l1_loss<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "l1_loss")?;
    let diff: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x - y)
        .collect();
    record_kinks(&diff, sign_side);
    let n = diff.len();
    let inv: T = c(1.0 / n as f64);
    let total: T = diff.iter().map(|d| d.abs()).sum();
    Ok(Tensor::from_op(
        vec![1],
        vec![total * inv],
        vec![a.clone(), b.clone()],
        move |g| {
            let scale = g[0] * inv;
            let da: Vec<T> = diff
                .iter()
                .map(|&d| {
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let db = da.iter().map(|&v| -v).collect();
            vec![Some(da), Some(db)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn activation_values() {
        assert_eq!(t(&[-1.0]).leaky_relu(0.2).item(), -0.2);
        assert_eq!(t(&[0.0]).sigmoid().item(), 0.5);
        assert_eq!(t(&[0.0]).tanh().item(), 0.0);
        assert_eq!(t(&[-3.0, 2.0]).relu().to_vec(), vec![0.0, 2.0]);
        assert_eq!(
            t(&[-1.0]).activation(Activation::leaky()).item(),
            -0.2
        );
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let x = Tensor::<f64>::parameter(&[1], vec![0.0]).unwrap();
        x.tanh().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 1.0);
    }

    #[test]
    fn bce_known_values() {
        let l = bce_with_logits(&t(&[0.0]), &t(&[1.0])).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let l = bce_with_logits(&t(&[100.0]), &t(&[1.0])).unwrap().item();
        assert!(l.is_finite() && l <= 1e-40);

        let l = bce_with_logits(&t(&[1e4, -1e4]), &t(&[0.0, 1.0])).unwrap().item();
        assert!(l.is_finite());
        assert!((l - 1e4).abs() < 1e-9);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target() {
        for (z, tv) in [(0.3, 1.0), (-2.0, 0.0), (5.0, 0.25), (-40.0, 1.0)] {
            let zt = Tensor::<f64>::parameter(&[1], vec![z]).unwrap();
            bce_with_logits(&zt, &t(&[tv])).unwrap().backward().unwrap();
            let expected = 1.0 / (1.0 + (-z as f64).exp()) - tv;
            assert!((zt.grad().unwrap()[0] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn l1_values_and_ties() {
        assert_eq!(l1_loss(&t(&[0.0, 1.0]), &t(&[1.0, 1.0])).unwrap().item(), 0.5);
        assert_eq!(l1_loss(&t(&[0.3, 0.7]), &t(&[0.3, 0.7])).unwrap().item(), 0.0);

        let a = Tensor::<f64>::parameter(&[3], vec![0.0, 2.0, 1.0]).unwrap();
        l1_loss(&a, &t(&[1.0, 1.0, 1.0])).unwrap().backward().unwrap();
        let g = a.grad().unwrap();
        assert_eq!(g, vec![-1.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn l1_shape_mismatch() {
        assert!(matches!(
            l1_loss(&t(&[0.0]), &t(&[0.0, 1.0])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn concat_splits_gradient() {
        let a = Tensor::<f64>::parameter(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::parameter(&[2, 2, 1, 2], (0..8).map(f64::from).collect()).unwrap();
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 1, 2]);
        assert_eq!(
            cat.to_vec(),
            vec![1.0, 2.0, 0.0, 1.0, 2.0, 3.0, 3.0, 4.0, 4.0, 5.0, 6.0, 7.0]
        );
        let w = Tensor::from_vec(&[2, 3, 1, 2], (0..12).map(f64::from).collect()).unwrap();
        cat.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 1.0, 6.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }
}
