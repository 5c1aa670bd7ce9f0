//! 2x average pooling and 2x trilinear upsampling (align-corners off).

use super::graph::{Graph, Var};
use super::{dims5, with_spatial, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn avgpool3d_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = input.dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "avgpool3d needs even spatial extents, got {:?}",
            input.shape()
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let x = input.data();
    let eighth = T::of(0.125);
    let mut out = vec![T::zero(); n * c * od * oh * ow];
    for nc in 0..n * c {
        let src = &x[nc * d * h * w..(nc + 1) * d * h * w];
        let dst = &mut out[nc * od * oh * ow..(nc + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = T::zero();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx;
                            s += src[row] + src[row + 1];
                        }
                    }
                    dst[(z * oh + y) * ow + xx] = s * eighth;
                }
            }
        }
    }
    Tensor::new(with_spatial(input.shape(), od, oh, ow), out)
}

/// Transpose of [`avgpool3d_forward`]: each upstream value splats 1/8 onto
/// its 2x2x2 block. `shape` is the pooled input's shape.
pub fn avgpool3d_backward<T: Real>(shape: &[usize], grad_out: &[T]) -> Result<Vec<T>> {
    let [n, c, d, h, w] = dims5(shape)?;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    if grad_out.len() != n * c * od * oh * ow {
        return Err(Error::Shape("avgpool3d upstream gradient has the wrong size".into()));
    }
    let eighth = T::of(0.125);
    let mut g = vec![T::zero(); n * c * d * h * w];
    for nc in 0..n * c {
        let src = &grad_out[nc * od * oh * ow..(nc + 1) * od * oh * ow];
        let dst = &mut g[nc * d * h * w..(nc + 1) * d * h * w];
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    dst[(z * h + y) * w + xx] = src[((z / 2) * oh + y / 2) * ow + xx / 2] * eighth;
                }
            }
        }
    }
    Ok(g)
}

/// Two-tap linear interpolation weights for doubling an axis of length `n`
/// with sample centres at half-integer positions (align-corners off).
fn doubling_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = s - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Resamples the middle axis of a `[outer, len, inner]` view.
fn resample_axis<T: Real>(x: &[T], outer: usize, len: usize, inner: usize, taps: &[(usize, usize, f64, f64)]) -> Vec<T> {
    let olen = taps.len();
    let mut out = vec![T::zero(); outer * olen * inner];
    for a in 0..outer {
        for (o, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            let dst = &mut out[(a * olen + o) * inner..(a * olen + o + 1) * inner];
            let s0 = &x[(a * len + i0) * inner..(a * len + i0 + 1) * inner];
            let s1 = &x[(a * len + i1) * inner..(a * len + i1 + 1) * inner];
            for ((d, &p), &q) in dst.iter_mut().zip(s0).zip(s1) {
                *d = w0 * p + w1 * q;
            }
        }
    }
    out
}

fn resample_axis_transpose<T: Real>(g: &[T], outer: usize, len: usize, inner: usize, taps: &[(usize, usize, f64, f64)]) -> Vec<T> {
    let olen = taps.len();
    let mut out = vec![T::zero(); outer * len * inner];
    for a in 0..outer {
        for (o, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            let src = &g[(a * olen + o) * inner..(a * olen + o + 1) * inner];
            for (j, &v) in src.iter().enumerate() {
                out[(a * len + i0) * inner + j] += w0 * v;
                out[(a * len + i1) * inner + j] += w1 * v;
            }
        }
    }
    out
}

pub fn upsample3d_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = input.dims5()?;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("upsample of an empty tensor".into()));
    }
    let nc = n * c;
    let x = resample_axis(input.data(), nc * d * h, w, 1, &doubling_taps(w));
    let x = resample_axis(&x, nc * d, h, 2 * w, &doubling_taps(h));
    let x = resample_axis(&x, nc, d, 4 * h * w, &doubling_taps(d));
    Tensor::new(with_spatial(input.shape(), 2 * d, 2 * h, 2 * w), x)
}

/// Transpose of [`upsample3d_forward`]; `shape` is the low-resolution shape.
pub fn upsample3d_backward<T: Real>(shape: &[usize], grad_out: &[T]) -> Result<Vec<T>> {
    let [n, c, d, h, w] = dims5(shape)?;
    if grad_out.len() != n * c * 8 * d * h * w {
        return Err(Error::Shape("upsample upstream gradient has the wrong size".into()));
    }
    let nc = n * c;
    let g = resample_axis_transpose(grad_out, nc, d, 4 * h * w, &doubling_taps(d));
    let g = resample_axis_transpose(&g, nc * d, h, 2 * w, &doubling_taps(h));
    Ok(resample_axis_transpose(&g, nc * d * h, w, 1, &doubling_taps(w)))
}

impl<T: Real> Graph<T> {
    pub fn avgpool3d(&mut self, x: Var) -> Result<Var> {
        let out = avgpool3d_forward(self.value(x))?;
        Ok(self.push(
            "avgpool3d",
            vec![x],
            out,
            Box::new(|a| vec![Some(avgpool3d_backward(a.inputs[0].shape(), a.grad).expect("validated"))]),
        ))
    }

    pub fn upsample3d(&mut self, x: Var) -> Result<Var> {
        let out = upsample3d_forward(self.value(x))?;
        Ok(self.push(
            "upsample3d",
            vec![x],
            out,
            Box::new(|a| vec![Some(upsample3d_backward(a.inputs[0].shape(), a.grad).expect("validated"))]),
        ))
    }
}
