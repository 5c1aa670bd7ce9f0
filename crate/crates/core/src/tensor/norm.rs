use super::graph::{Graph, Var};
use super::{dims5, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

impl<T: Real> Graph<T> {
    /// Batch normalization over `(N, D, H, W)` per channel. In train mode the
    /// batch statistics are used and `stats` is updated with momentum 0.1.
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let [n, c, d, h, w] = dims5(&shape)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!("batchnorm3d affine parameters must be [{c}]")));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Invalid(format!(
                "batchnorm3d running statistics hold {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let plane = d * h * w;
        let count = n * plane;
        let eps = T::of(BN_EPS);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();

        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (m, v) = match mode {
                BatchNormMode::Train => {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        s += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0f64;
                    for b in 0..n {
                        ss += xd[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v.f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    let var = ss / count as f64;
                    let unbiased = if count > 1 { ss / (count - 1) as f64 } else { var };
                    let mom = BN_MOMENTUM;
                    stats.mean[ch] = T::of((1.0 - mom) * stats.mean[ch].f64() + mom * m);
                    stats.var[ch] = T::of((1.0 - mom) * stats.var[ch].f64() + mom * unbiased);
                    (T::of(m), T::of(var))
                }
                BatchNormMode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            mean[ch] = m;
            inv_std[ch] = T::one() / (v + eps).sqrt();
        }

        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xd[r]) {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = gd[ch] * *xh + bd[ch];
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            "batchnorm3d",
            vec![x, gamma, beta],
            out,
            Box::new(move |a| {
                let g = a.grad;
                let gamma = a.inputs[1].data();
                let mut gx = vec![T::zero(); g.len()];
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let m = T::of(count as f64);
                for ch in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for b in 0..n {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            sum_g += gv;
                            sum_gx += gv * xh;
                        }
                    }
                    ggamma[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    let k = gamma[ch] * inv_std[ch];
                    for b in 0..n {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        for ((o, &gv), &xh) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                            *o = match mode {
                                BatchNormMode::Train => k * (gv - sum_g / m - xh * sum_gx / m),
                                BatchNormMode::Eval => k * gv,
                            };
                        }
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }),
        ))
    }
}
