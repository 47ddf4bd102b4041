//! 2-D convolution and its adjoint, lowered to im2col + gemm.
//!
//! Three kernels cover both operations: the forward cross-correlation, its
//! input gradient (which is the transposed convolution) and its weight
//! gradient. Each output element is produced by one gemm call over a fixed
//! summation order, so results are deterministic.

use super::{Float, Tensor};
use crate::error::{Error, Result};

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Shape bookkeeping for a convolution from `cin×h×w` to `cout×oh×ow`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn in_plane(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.cout * self.p()
    }
}

fn im2col<T: Float>(x: &[T], g: &Geom, col: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &Geom, x: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// y = W ⋆ x (+ bias). `w` is `[cout, cin, kh, kw]`.
fn forward_kernel<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut y = vec![T::zero(); g.batch * g.out_plane()];
    let mut col = vec![T::zero(); k * p];
    for b in 0..g.batch {
        im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], g, &mut col);
        let yb = &mut y[b * g.out_plane()..(b + 1) * g.out_plane()];
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                yb[co * p..(co + 1) * p].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.cout, k, p, w, (k as isize, 1), &col, (p as isize, 1), beta, yb);
    }
    y
}

/// dx = Wᵀ ⋆ dy, the adjoint of `forward_kernel` in its input.
fn input_grad_kernel<T: Float>(dy: &[T], w: &[T], g: &Geom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut dx = vec![T::zero(); g.batch * g.in_plane()];
    let mut dcol = vec![T::zero(); k * p];
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_plane()..(b + 1) * g.out_plane()];
        T::gemm(k, g.cout, p, w, (1, k as isize), dyb, (p as isize, 1), T::zero(), &mut dcol);
        col2im(&dcol, g, &mut dx[b * g.in_plane()..(b + 1) * g.in_plane()]);
    }
    dx
}

/// dW = Σ_b dy_b · colᵀ(x_b).
fn weight_grad_kernel<T: Float>(x: &[T], dy: &[T], g: &Geom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut dw = vec![T::zero(); g.cout * k];
    let mut col = vec![T::zero(); k * p];
    for b in 0..g.batch {
        im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], g, &mut col);
        let dyb = &dy[b * g.out_plane()..(b + 1) * g.out_plane()];
        T::gemm(g.cout, p, k, dyb, (p as isize, 1), &col, (1, p as isize), T::one(), &mut dw);
    }
    dw
}

fn bias_grad<T: Float>(dy: &[T], batch: usize, cout: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for b in 0..batch {
        for (co, acc) in db.iter_mut().enumerate() {
            let off = (b * cout + co) * p;
            *acc += dy[off..off + p].iter().copied().sum::<T>();
        }
    }
    db
}

fn check_4d<T: Float>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::dim(format!(
            "{what} must be 4-D, got shape {:?}",
            t.shape()
        ))),
    }
}

fn check_bias<T: Float>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Direct cross-correlation of `input [B,Cin,H,W]` with `weight [Cout,Cin,kH,kW]`.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [batch, cin, h, w] = check_4d(input, "conv2d input")?;
    let [cout, wcin, kh, kw] = check_4d(weight, "conv2d weight")?;
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be positive"));
    }
    if cin != wcin {
        return Err(Error::dim(format!(
            "conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::dim(format!(
            "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    check_bias(bias, cout)?;
    let g = Geom {
        batch,
        cin,
        cout,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        oh: conv_output_len(h, kh, stride, pad),
        ow: conv_output_len(w, kw, stride, pad),
    };

    let x = input.to_vec();
    let wt = weight.to_vec();
    let bias_v = bias.map(|b| b.to_vec());
    let y = forward_kernel(&x, &wt, bias_v.as_deref(), &g);

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (need_x, need_w) = (input.requires_grad(), weight.requires_grad());
    Ok(Tensor::from_op(
        vec![batch, cout, g.oh, g.ow],
        y,
        parents,
        move |dy| {
            let dx = need_x.then(|| input_grad_kernel(dy, &wt, &g));
            let dw = need_w.then(|| weight_grad_kernel(&x, dy, &g));
            let mut grads = vec![dx, dw];
            if bias_v.is_some() {
                grads.push(Some(bias_grad(dy, g.batch, g.cout, g.p())));
            }
            grads
        },
    ))
}

/// Transposed convolution: the linear adjoint of [`conv2d`] with the same
/// stride and padding. `weight` is `[Cin, Cout, kH, kW]`.
pub fn conv_transpose2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [batch, cin, h, w] = check_4d(input, "conv_transpose2d input")?;
    let [wcin, cout, kh, kw] = check_4d(weight, "conv_transpose2d weight")?;
    if stride == 0 {
        return Err(Error::contract("conv_transpose2d stride must be positive"));
    }
    if cin != wcin {
        return Err(Error::dim(format!(
            "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if (h - 1) * stride + kh <= 2 * pad || (w - 1) * stride + kw <= 2 * pad {
        return Err(Error::dim("conv_transpose2d: padding consumes the whole output"));
    }
    check_bias(bias, cout)?;
    let oh = conv_transpose_output_len(h, kh, stride, pad);
    let ow = conv_transpose_output_len(w, kw, stride, pad);
    // The forward conv this is the adjoint of: cout×oh×ow → cin×h×w.
    let g = Geom {
        batch,
        cin: cout,
        cout: cin,
        h: oh,
        w: ow,
        kh,
        kw,
        stride,
        pad,
        oh: h,
        ow: w,
    };
    debug_assert_eq!(conv_output_len(oh, kh, stride, pad), h);

    let x = input.to_vec();
    let wt = weight.to_vec();
    let mut y = input_grad_kernel(&x, &wt, &g);
    if let Some(b) = bias {
        let plane = oh * ow;
        let bv = b.data();
        for bi in 0..batch {
            for (co, &v) in bv.iter().enumerate() {
                let off = (bi * cout + co) * plane;
                y[off..off + plane].iter_mut().for_each(|e| *e += v);
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    let has_bias = bias.is_some();
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (need_x, need_w) = (input.requires_grad(), weight.requires_grad());
    Ok(Tensor::from_op(
        vec![batch, cout, oh, ow],
        y,
        parents,
        move |dy| {
            let dx = need_x.then(|| forward_kernel(dy, &wt, None, &g));
            let dw = need_w.then(|| weight_grad_kernel(dy, &x, &g));
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(Some(bias_grad(dy, batch, cout, oh * ow)));
            }
            grads
        },
    ))
}
