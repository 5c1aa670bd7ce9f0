use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Mean absolute difference, accumulated in `f64`.
pub fn l1_loss_value<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("l1 loss: {} vs {} elements", pred.len(), target.len())));
    }
    let s: f64 = pred.iter().zip(target).map(|(&p, &t)| (p.f64() - t.f64()).abs()).sum();
    Ok(s / pred.len() as f64)
}

impl<T: Real> Graph<T> {
    /// Mean absolute error; the subgradient at ties is 0.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Shape(format!(
                "l1 loss: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let v = l1_loss_value(self.value(pred).data(), self.value(target).data())?;
        let n = self.value(pred).numel();
        Ok(self.push(
            "l1_loss",
            vec![pred, target],
            Tensor::scalar(T::of(v)),
            Box::new(move |a| {
                let scale = a.grad[0] / T::of(n as f64);
                let gp: Vec<T> = a.inputs[0]
                    .data()
                    .iter()
                    .zip(a.inputs[1].data())
                    .map(|(&p, &t)| {
                        if p > t {
                            scale
                        } else if p < t {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let gt = gp.iter().map(|&g| -g).collect();
                vec![Some(gp), Some(gt)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Domain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_and_offset() {
        let a = vec![1.0f32, -2.0, 3.5];
        assert_eq!(l1_loss_value(&a, &a).unwrap(), 0.0);
        let b: Vec<f32> = a.iter().map(|v| v + 5.0).collect();
        assert_eq!(l1_loss_value(&b, &a).unwrap(), 5.0);
    }

    #[test]
    fn matches_direct_mean_abs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut direct = 0.0;
        for i in 0..a.len() {
            direct += (a[i] - b[i]).abs();
        }
        direct /= a.len() as f64;
        assert!((l1_loss_value(&a, &b).unwrap() - direct).abs() <= 1e-7);
    }

    #[test]
    fn scalar_sign_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0).with_requires_grad(true), Domain::Other);
        let z = g.input(Tensor::scalar(0.0), Domain::Other);
        let l = g.l1_loss(x, z).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]), Domain::Other);
        let y = g.input(Tensor::zeros(&[3]), Domain::Other);
        assert!(g.l1_loss(x, y).is_err());
    }
}
