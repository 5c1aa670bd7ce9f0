use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `x` for `x >= 0`, `slope[c] * x` otherwise. Slope is per channel.
pub fn prelu_forward<T: Real>(input: &Tensor<T>, slope: &[T]) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = input.dims5()?;
    if slope.len() != c {
        return Err(Error::Shape(format!("prelu slope has {} entries for {c} channels", slope.len())));
    }
    let plane = d * h * w;
    let mut out = input.data().to_vec();
    for b in 0..n {
        for (ch, &a) in slope.iter().enumerate() {
            for v in &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                if *v < T::zero() {
                    *v *= a;
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

impl<T: Real> Graph<T> {
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let out = prelu_forward(self.value(x), self.value(slope).data())?;
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let plane = d * h * w;
        Ok(self.push(
            "prelu",
            vec![x, slope],
            out,
            Box::new(move |a| {
                let x = a.inputs[0].data();
                let s = a.inputs[1].data();
                let mut gx = a.grad.to_vec();
                let mut gs = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        for (g, &v) in gx[r.clone()].iter_mut().zip(&x[r]) {
                            if v < T::zero() {
                                gs[ch] += *g * v;
                                *g *= s[ch];
                            }
                        }
                    }
                }
                vec![Some(gx), Some(gs)]
            }),
        ))
    }
}
