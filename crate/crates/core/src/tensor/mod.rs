//! Dense tensors and a small reverse-mode autodiff engine.
//!
//! Layout is channels-first with `x` fastest: volumes are `[N, C, D, H, W]`
//! (a 4-D `[C, D, H, W]` tensor is treated as a batch of one). Projection
//! stacks use the same layout with `(view, row, col)` as the spatial axes.

mod activation;
mod adam;
mod conv;
pub mod gradcheck;
mod graph;
mod loss;
mod norm;
mod pool;

pub use activation::prelu_forward;
pub use adam::{Adam, AdamState};
pub use conv::{conv3d_backward, conv3d_forward};
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{BackwardArgs, BackwardFn, Domain, Graph, Var};
pub use loss::l1_loss_value;
pub use norm::{BatchNormMode, RunningStats};
pub use pool::{avgpool3d_backward, avgpool3d_forward, upsample3d_backward, upsample3d_forward};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Interprets the shape as `[N, C, D, H, W]`; 4-D shapes get `N = 1`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        dims5(&self.shape)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

pub(crate) fn dims5(shape: &[usize]) -> Result<[usize; 5]> {
    match *shape {
        [c, d, h, w] => Ok([1, c, d, h, w]),
        [n, c, d, h, w] => Ok([n, c, d, h, w]),
        _ => Err(Error::Shape(format!(
            "expected [C,D,H,W] or [N,C,D,H,W], got {shape:?}"
        ))),
    }
}

/// Shape with the channel extent replaced, preserving 4-D vs 5-D layout.
pub(crate) fn with_channels(shape: &[usize], c: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let idx = if s.len() == 4 { 0 } else { 1 };
    s[idx] = c;
    s
}

/// Shape with the spatial extents replaced, preserving 4-D vs 5-D layout.
pub(crate) fn with_spatial(shape: &[usize], d: usize, h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let k = s.len();
    s[k - 3] = d;
    s[k - 2] = h;
    s[k - 1] = w;
    s
}
