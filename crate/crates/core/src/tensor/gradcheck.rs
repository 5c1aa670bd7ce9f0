//! Central-difference verification of reverse-mode gradients.

use super::{Domain, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`,
    /// with `floor` 1e-3 of the largest numeric gradient seen.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Evenly strided sample of at most `max` indices below `n`.
pub fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * (n - 1) / (max - 1).max(1)).collect()
}

/// Relative error summary over `(analytic, numeric)` pairs.
pub fn compare_gradients(pairs: &[(f64, f64)]) -> GradCheck {
    let scale = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    let max_rel_error = pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    GradCheck { max_rel_error, checked: pairs.len() }
}

/// Checks the gradient of the scalar `f(graph, leaves)` with respect to
/// every input tensor, at up to `per_input` entries each.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: usize,
    mut f: impl FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone().with_requires_grad(true), Domain::Other)).collect();
        let out = f(&mut g, &leaves)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Shape("gradient check needs a scalar output".into()));
        }
        let value = g.value(out).data()[0];
        if !grads {
            return Ok((value, vec![]));
        }
        g.backward(out)?;
        let gs = leaves
            .iter()
            .zip(xs)
            .map(|(&l, x)| g.grad(l).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut pairs = Vec::new();
    let mut xs = inputs.to_vec();
    for (t, x) in inputs.iter().enumerate() {
        for i in sample_indices(x.numel(), per_input) {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + eps;
            let (up, _) = eval(&xs, false)?;
            xs[t].data_mut()[i] = orig - eps;
            let (down, _) = eval(&xs, false)?;
            xs[t].data_mut()[i] = orig;
            pairs.push((analytic[t][i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(compare_gradients(&pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_passes_and_wrong_gradient_fails() {
        let a = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let b = Tensor::new(vec![3], vec![1.25, 0.75, -0.5]).unwrap();
        let ok = check_gradients(&[a, b], 1e-6, 8, |g, v| {
            let p = g.mul(v[0], v[1])?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert_eq!(ok.checked, 6);
        assert!(ok.max_rel_error < 1e-8, "{ok:?}");
        assert!(compare_gradients(&[(1.0, 1.1)]).max_rel_error > 0.05);
    }

    #[test]
    fn sampling_covers_ends() {
        assert_eq!(sample_indices(3, 5), vec![0, 1, 2]);
        let s = sample_indices(100, 4);
        assert_eq!(s.first(), Some(&0));
        assert_eq!(s.last(), Some(&99));
    }
}
