//! Shape-preserving 3-D convolution (stride 1, zero padding `(k-1)/2`,
//! cross-correlation orientation).

use rayon::prelude::*;

use super::graph::{Graph, Var};
use super::{dims5, with_channels, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

struct ConvDims {
    n: usize,
    ci: usize,
    co: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.d * self.h * self.w
    }

    fn k3(&self) -> usize {
        self.k * self.k * self.k
    }
}

fn check(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<ConvDims> {
    let [n, ci, d, h, w] = dims5(input)?;
    let &[co, wci, k, k1, k2] = weight else {
        return Err(Error::Shape(format!("conv3d weight must be [Co,Ci,k,k,k], got {weight:?}")));
    };
    if k != k1 || k != k2 || k % 2 == 0 {
        return Err(Error::Shape(format!("conv3d kernel must be cubic with odd extent, got {weight:?}")));
    }
    if wci != ci {
        return Err(Error::Shape(format!(
            "conv3d input has {ci} channels but weight expects {wci} (weight {weight:?}, input {input:?})"
        )));
    }
    if bias != [co] {
        return Err(Error::Shape(format!("conv3d bias must be [{co}], got {bias:?}")));
    }
    Ok(ConvDims { n, ci, co, d, h, w, k })
}

/// Zero-padded layout of one channel: the volume sits inside a border of
/// `k / 2` voxels, so every kernel tap becomes a constant flat offset and a
/// whole channel can be processed with long contiguous loops.
struct Padded {
    hp: usize,
    wp: usize,
    len: usize,
    p: usize,
    /// Flat range covering every interior voxel.
    lo: usize,
    hi: usize,
    offsets: Vec<isize>,
}

impl Padded {
    fn new(dm: &ConvDims) -> Self {
        let p = dm.k / 2;
        let (dp, hp, wp) = (dm.d + 2 * p, dm.h + 2 * p, dm.w + 2 * p);
        let idx = |z: usize, y: usize, x: usize| ((z + p) * hp + y + p) * wp + x + p;
        let mut offsets = Vec::with_capacity(dm.k3());
        for kz in 0..dm.k {
            for ky in 0..dm.k {
                for kx in 0..dm.k {
                    let o = ((kz as isize - p as isize) * hp as isize + ky as isize - p as isize) * wp as isize + kx as isize
                        - p as isize;
                    offsets.push(o);
                }
            }
        }
        Self {
            hp,
            wp,
            len: dp * hp * wp,
            p,
            lo: idx(0, 0, 0),
            hi: idx(dm.d - 1, dm.h - 1, dm.w - 1) + 1,
            offsets,
        }
    }

    fn pad_into<T: Real>(&self, src: &[T], dst: &mut [T], dm: &ConvDims) {
        for z in 0..dm.d {
            for y in 0..dm.h {
                let o = ((z + self.p) * self.hp + y + self.p) * self.wp + self.p;
                dst[o..o + dm.w].copy_from_slice(&src[(z * dm.h + y) * dm.w..(z * dm.h + y + 1) * dm.w]);
            }
        }
    }

    /// Copies the interior of a buffer indexed from `lo` back to dense layout.
    fn extract<T: Real>(&self, buf: &[T], dst: &mut [T], dm: &ConvDims) {
        for z in 0..dm.d {
            for y in 0..dm.h {
                let o = ((z + self.p) * self.hp + y + self.p) * self.wp + self.p - self.lo;
                dst[(z * dm.h + y) * dm.w..(z * dm.h + y + 1) * dm.w].copy_from_slice(&buf[o..o + dm.w]);
            }
        }
    }

    fn pad_all<T: Real>(&self, data: &[T], channels: usize, dm: &ConvDims) -> Vec<T> {
        let plane = dm.plane();
        let mut out = vec![T::zero(); channels * self.len];
        for c in 0..channels {
            self.pad_into(&data[c * plane..(c + 1) * plane], &mut out[c * self.len..(c + 1) * self.len], dm);
        }
        out
    }
}

const CHUNK: usize = 512;
const BLOCK: usize = 4;

/// For each of the `nb` outputs in `acc` (each `hi - lo` long, indexed from
/// `lo`): `acc[j][i] += sum_{c,t} wts[(c * taps + t) * nb + j] * src[c][i + off[t]]`.
fn accumulate_block<T: Real>(acc: &mut [T], nb: usize, src: &[T], n_src: usize, wts: &[T], pad: &Padded, offs: &[isize]) {
    let span = pad.hi - pad.lo;
    let taps = offs.len();
    let mut start = 0;
    while start < span {
        let n = CHUNK.min(span - start);
        for c in 0..n_src {
            let plane = &src[c * pad.len..(c + 1) * pad.len];
            for (t, &off) in offs.iter().enumerate() {
                let base = (pad.lo + start) as isize + off;
                let s = &plane[base as usize..base as usize + n];
                let w = &wts[(c * taps + t) * nb..(c * taps + t + 1) * nb];
                if nb == BLOCK {
                    let (a0, rest) = acc.split_at_mut(span);
                    let (a1, rest) = rest.split_at_mut(span);
                    let (a2, a3) = rest.split_at_mut(span);
                    let (a0, a1, a2, a3) =
                        (&mut a0[start..start + n], &mut a1[start..start + n], &mut a2[start..start + n], &mut a3[start..start + n]);
                    let (w0, w1, w2, w3) = (w[0], w[1], w[2], w[3]);
                    for i in 0..n {
                        let v = s[i];
                        a0[i] += w0 * v;
                        a1[i] += w1 * v;
                        a2[i] += w2 * v;
                        a3[i] += w3 * v;
                    }
                } else {
                    for (j, &wj) in w.iter().enumerate() {
                        let a = &mut acc[j * span + start..j * span + start + n];
                        for (o, &v) in a.iter_mut().zip(s) {
                            *o += wj * v;
                        }
                    }
                }
            }
        }
        start += n;
    }
}

/// Lane-split dot product so the reduction vectorizes; the order is fixed.
fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = lanes.iter().fold(T::zero(), |acc, &v| acc + v);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Runs `accumulate_block` over blocks of `n_out` outputs for every sample
/// and writes dense results. `weight(j_out, c_src, tap)` gives the taps.
#[allow(clippy::too_many_arguments)]
fn blocked_correlation<T: Real>(
    dm: &ConvDims,
    pad: &Padded,
    src_padded: &[T],
    n_src: usize,
    n_out: usize,
    offs: &[isize],
    init: impl Fn(usize) -> T + Sync,
    weight: impl Fn(usize, usize, usize) -> T + Sync,
) -> Vec<T> {
    let plane = dm.plane();
    let span = pad.hi - pad.lo;
    let taps = offs.len();
    let blocks: Vec<(usize, usize, usize)> = (0..dm.n)
        .flat_map(|b| (0..n_out).step_by(BLOCK).map(move |j0| (b, j0, BLOCK.min(n_out - j0))))
        .collect();
    let results: Vec<Vec<T>> = blocks
        .par_iter()
        .map(|&(b, j0, nb)| {
            let mut wts = vec![T::zero(); n_src * taps * nb];
            for c in 0..n_src {
                for t in 0..taps {
                    for j in 0..nb {
                        wts[(c * taps + t) * nb + j] = weight(j0 + j, c, t);
                    }
                }
            }
            let mut acc = vec![T::zero(); nb * span];
            for j in 0..nb {
                acc[j * span..(j + 1) * span].fill(init(j0 + j));
            }
            let src = &src_padded[b * n_src * pad.len..(b + 1) * n_src * pad.len];
            accumulate_block(&mut acc, nb, src, n_src, &wts, pad, offs);
            let mut dense = vec![T::zero(); nb * plane];
            for j in 0..nb {
                pad.extract(&acc[j * span..(j + 1) * span], &mut dense[j * plane..(j + 1) * plane], dm);
            }
            dense
        })
        .collect();
    let mut out = vec![T::zero(); dm.n * n_out * plane];
    for (&(b, j0, nb), dense) in blocks.iter().zip(results) {
        out[(b * n_out + j0) * plane..(b * n_out + j0 + nb) * plane].copy_from_slice(&dense);
    }
    out
}

pub fn conv3d_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let dm = check(input.shape(), weight.shape(), bias.shape())?;
    let pad = Padded::new(&dm);
    let k3 = dm.k3();
    let xp = pad.pad_all(input.data(), dm.n * dm.ci, &dm);
    let (w, b) = (weight.data(), bias.data());
    let out = blocked_correlation(&dm, &pad, &xp, dm.ci, dm.co, &pad.offsets, |co| b[co], |co, ci, t| {
        w[(co * dm.ci + ci) * k3 + t]
    });
    Tensor::new(with_channels(input.shape(), dm.co), out)
}

/// Gradients `(d input, d weight, d bias)` for upstream gradient `grad_out`.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let co = weight.shape()[0];
    let dm = check(input.shape(), weight.shape(), &[co])?;
    let plane = dm.plane();
    let k3 = dm.k3();
    if grad_out.len() != dm.n * dm.co * plane {
        return Err(Error::Shape("conv3d upstream gradient has the wrong size".into()));
    }
    let pad = Padded::new(&dm);
    let gp = pad.pad_all(grad_out, dm.n * dm.co, &dm);
    let w = weight.data();

    // d input: correlation of the gradient with the mirrored kernel
    let neg: Vec<isize> = pad.offsets.iter().map(|o| -o).collect();
    let gin = blocked_correlation(&dm, &pad, &gp, dm.co, dm.ci, &neg, |_| T::zero(), |ci, co, t| {
        w[(co * dm.ci + ci) * k3 + t]
    });

    let xp = pad.pad_all(input.data(), dm.n * dm.ci, &dm);
    let mut gw = vec![T::zero(); dm.co * dm.ci * k3];
    gw.par_chunks_mut(dm.ci * k3).enumerate().for_each(|(co, gwc)| {
        for b in 0..dm.n {
            let g = &gp[(b * dm.co + co) * pad.len..(b * dm.co + co + 1) * pad.len];
            let g = &g[pad.lo..pad.hi];
            for ci in 0..dm.ci {
                let src = &xp[(b * dm.ci + ci) * pad.len..(b * dm.ci + ci + 1) * pad.len];
                for (t, &off) in pad.offsets.iter().enumerate() {
                    let base = (pad.lo as isize + off) as usize;
                    gwc[ci * k3 + t] += dot_lanes(g, &src[base..base + g.len()]);
                }
            }
        }
    });

    let mut gb = vec![T::zero(); dm.co];
    for (co, gbc) in gb.iter_mut().enumerate() {
        for b in 0..dm.n {
            *gbc += grad_out[(b * dm.co + co) * plane..(b * dm.co + co + 1) * plane]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    Ok((gin, gw, gb))
}

impl<T: Real> Graph<T> {
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = conv3d_forward(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(
            "conv3d",
            vec![x, weight, bias],
            out,
            Box::new(|a| {
                let (gi, gw, gb) = conv3d_backward(a.inputs[0], a.inputs[1], a.grad)
                    .expect("shapes validated in forward");
                vec![Some(gi), Some(gw), Some(gb)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Six nested loops straight from the definition.
    fn naive(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
        let [_, ci, d, h, w] = dims5(input.shape()).unwrap();
        let co = weight.shape()[0];
        let k = weight.shape()[2];
        let p = (k / 2) as isize;
        let x = input.data();
        let wt = weight.data();
        let mut out = vec![0.0; co * d * h * w];
        for o in 0..co {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias.data()[o];
                        for c in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (sz, sy, sx) = (
                                            z as isize + kz as isize - p,
                                            y as isize + ky as isize - p,
                                            xx as isize + kx as isize - p,
                                        );
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                                            continue;
                                        }
                                        let xi = ((c * d + sz as usize) * h + sy as usize) * w + sx as usize;
                                        let wi = (((o * ci + c) * k + kz) * k + ky) * k + kx;
                                        acc += wt[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        out[((o * d + z) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = random(&[1, 3, 4, 5], 1).cast::<f32>();
        let w = Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0f32]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv3d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn impulse_reproduces_kernel_in_correlation_orientation() {
        let mut x = Tensor::<f64>::zeros(&[1, 5, 5, 5]);
        x.data_mut()[(2 * 5 + 2) * 5 + 2] = 1.0;
        let w = Tensor::from_fn(&[1, 1, 3, 3, 3], |i| i as f64 + 1.0);
        let y = conv3d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        // out[c + o] = w[pad - o]: the kernel appears flipped about the impulse
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (z, yy, xx) = (3 - kz, 3 - ky, 3 - kx);
                    assert_eq!(y.data()[(z * 5 + yy) * 5 + xx], w.data()[(kz * 3 + ky) * 3 + kx]);
                }
            }
        }
    }

    #[test]
    fn matches_nested_loop_oracle_f32() {
        let x = random(&[2, 5, 5, 5], 7);
        let w = random(&[3, 2, 3, 3, 3], 8);
        let b = random(&[3], 9);
        let expected = naive(&x, &w, &b);
        let y = conv3d_forward(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>()).unwrap();
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((*a as f64 - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3, 3]);
        let err = conv3d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap_err();
        assert!(err.to_string().contains("2 channels"));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let x = random(&[1, 2, 4, 5, 6], 11);
        let w = random(&[3, 2, 3, 3, 3], 12);
        let zero_b = Tensor::zeros(&[3]);
        let gy = random(&[1, 3, 4, 5, 6], 13);
        let y = conv3d_forward(&x, &w, &zero_b).unwrap();
        let (gx, gw, _) = conv3d_backward(&x, &w, gy.data()).unwrap();
        let lhs = crate::scalar::dot(y.data(), gy.data());
        let via_x = crate::scalar::dot(x.data(), &gx);
        let via_w = crate::scalar::dot(w.data(), &gw);
        assert!((lhs - via_x).abs() < 1e-10 * lhs.abs());
        assert!((lhs - via_w).abs() < 1e-10 * lhs.abs());
    }
}
