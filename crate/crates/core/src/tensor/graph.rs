//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and `backward` simply walks it in reverse.

use super::{dims5, with_channels, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which space a node's value lives in. Used for structural checks of the
/// unrolled networks (where the measured projections re-enter).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Volume,
    Projection,
    Other,
}

pub struct BackwardArgs<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
}

/// Maps the upstream gradient to one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    op: &'static str,
    domain: Domain,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), params: Vec::new() }
    }

    fn leaf_node(&mut self, value: Tensor<T>, requires_grad: bool, op: &'static str, domain: Domain) -> Var {
        let value = Tensor { requires_grad, grad: None, ..value };
        self.nodes.push(Node { value, parents: vec![], backward: None, requires_grad, op, domain });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>, domain: Domain) -> Var {
        self.leaf_node(value, false, "input", domain)
    }

    /// Leaf whose gradient is tracked; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, value: Tensor<T>, domain: Domain) -> Var {
        let rg = value.requires_grad();
        self.leaf_node(value, rg, "leaf", domain)
    }

    /// Binds a trainable parameter, remembering its external slot `id`.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        let v = self.leaf_node(value.clone(), true, "param", Domain::Other);
        self.params.push((id, v));
        v
    }

    pub fn param_bindings(&self) -> &[(usize, Var)] {
        &self.params
    }

    /// Appends an operation node. The backward closure is dropped when no
    /// parent requires a gradient.
    pub fn push(
        &mut self,
        op: &'static str,
        parents: Vec<Var>,
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var {
        let domain = parents
            .iter()
            .map(|p| self.nodes[p.0].domain)
            .find(|d| *d != Domain::Other)
            .unwrap_or(Domain::Other);
        self.push_in(op, domain, parents, value, backward)
    }

    /// As [`Graph::push`] with an explicit output domain.
    pub fn push_in(
        &mut self,
        op: &'static str,
        domain: Domain,
        parents: Vec<Var>,
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.nodes.push(Node { value, parents, backward, requires_grad, op, domain });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn domain(&self, v: Var) -> Domain {
        self.nodes[v.0].domain
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar loss. Gradients of parameters and of
    /// leaves created with `requires_grad` are retained; intermediate
    /// gradients are released as soon as they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].as_ref() else { continue };
            let args = BackwardArgs {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: g,
            };
            let parent_grads = bw(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            let keep = node.op == "leaf" || node.op == "param";
            if !keep {
                grads[i] = None;
            }
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // keep only leaf/param gradients plus the loss seed
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op != "leaf" && node.op != "param" && i != loss.0 {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    // ---------------------------------------------------------------
    // elementwise and structural ops
    // ---------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push("add", vec![a, b], out, Box::new(|a| vec![Some(a.grad.to_vec()), Some(a.grad.to_vec())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("sub: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(
            "sub",
            vec![a, b],
            out,
            Box::new(|a| vec![Some(a.grad.to_vec()), Some(a.grad.iter().map(|&g| -g).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(
            "mul",
            vec![a, b],
            out,
            Box::new(|a| {
                let ga = a.grad.iter().zip(a.inputs[1].data()).map(|(&g, &y)| g * y).collect();
                let gb = a.grad.iter().zip(a.inputs[0].data()).map(|(&g, &x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", vec![a], out, Box::new(move |a| vec![Some(a.grad.iter().map(|&g| g * c).collect())]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            "sum",
            vec![a],
            out,
            Box::new(|a| vec![Some(vec![a.grad[0]; a.inputs[0].numel()])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Channel-wise concatenation of 4-D or 5-D tensors with equal batch
    /// and spatial extents.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let [n, _, d, h, w] = dims5(&first)?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let [pn, pc, pd, ph, pw] = dims5(s)?;
            if s.len() != first.len() || (pn, pd, ph, pw) != (n, d, h, w) {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {first:?}")));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let plane = d * h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&chans) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new(with_channels(&first, total), data)?;
        let chans2 = chans.clone();
        Ok(self.push(
            "concat",
            parts.to_vec(),
            out,
            Box::new(move |a| {
                let mut gs: Vec<Vec<T>> = chans2.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
                let mut off = 0;
                for _ in 0..n {
                    for (g, &c) in gs.iter_mut().zip(&chans2) {
                        g.extend_from_slice(&a.grad[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                gs.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Channels `[start, start + len)` of a 4-D or 5-D tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let [n, c, d, h, w] = dims5(&shape)?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!("channel slice {start}+{len} of {c}")));
        }
        let plane = d * h * w;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&src[base..base + len * plane]);
        }
        let out = Tensor::new(with_channels(&shape, len), data)?;
        Ok(self.push(
            "slice",
            vec![a],
            out,
            Box::new(move |a| {
                let mut g = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    g[dst..dst + len * plane].copy_from_slice(&a.grad[src..src + len * plane]);
                }
                vec![Some(g)]
            }),
        ))
    }
}
