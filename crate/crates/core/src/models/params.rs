use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Domain, Graph, RunningStats, Tensor, Var};

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    buffers: Vec<(String, RunningStats<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), buffers: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: String, tensor: Tensor<T>) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        self.tensors.len() - 1
    }

    pub fn add_buffer(&mut self, name: String, channels: usize) -> usize {
        assert!(self.buffers.iter().all(|(n, _)| *n != name), "duplicate buffer {name}");
        self.buffers.push((name, RunningStats::new(channels)));
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn buffer_mut(&mut self, id: usize) -> &mut RunningStats<T> {
        &mut self.buffers[id].1
    }

    pub fn buffers(&self) -> &[(String, RunningStats<T>)] {
        &self.buffers
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Binds every parameter into `graph`; gradients are tracked only when
    /// `trainable`.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable { graph.param(i, t) } else { graph.input(t.clone(), Domain::Other) })
            .collect()
    }

    /// Adds the gradients of the last backward pass into the parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        for &(id, var) in graph.param_bindings() {
            if let Some(g) = graph.grad(var) {
                self.tensors[id].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Parameters then running statistics, as `f32` tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> =
            self.names.iter().cloned().zip(self.tensors.iter().map(|t| t.cast::<f32>())).collect();
        for (name, s) in &self.buffers {
            let c = s.mean.len();
            let cast = |v: &[T]| Tensor::new(vec![c], v.iter().map(|x| x.f64() as f32).collect()).expect("sized");
            out.push((format!("{name}.running_mean"), cast(&s.mean)));
            out.push((format!("{name}.running_var"), cast(&s.var)));
        }
        out
    }

    /// Replaces every parameter and buffer; the name set and shapes must
    /// match exactly.
    pub fn load_named(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let expected = self.names.len() + 2 * self.buffers.len();
        if entries.len() != expected {
            return Err(Error::Invalid(format!("checkpoint holds {} tensors, model needs {expected}", entries.len())));
        }
        let map: HashMap<&str, &Tensor<f32>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if map.len() != entries.len() {
            return Err(Error::Invalid("checkpoint repeats a tensor name".into()));
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let t = map.get(name).ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Shape(format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape())));
            }
            Ok(t.data().iter().map(|&v| T::of(v as f64)).collect())
        };
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let data = fetch(name, t.shape())?;
            t.data_mut().copy_from_slice(&data);
            t.zero_grad();
        }
        for (name, s) in &mut self.buffers {
            let c = s.mean.len();
            s.mean = fetch(&format!("{name}.running_mean"), &[c])?;
            s.var = fetch(&format!("{name}.running_var"), &[c])?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: usize,
    pub bias: usize,
}

impl Conv {
    /// Fan-in uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero bias.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ci: usize, co: usize, k: usize) -> Self {
        let bound = 1.0 / ((ci * k * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[co, ci, k, k, k], |_| T::of(rng.gen_range(-bound..bound)));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[co]));
        Self { weight, bias }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.conv3d(x, p[self.weight], p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Prelu {
    pub slope: usize,
}

impl Prelu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self { slope: store.add(format!("{name}.slope"), Tensor::full(&[c], T::of(0.25))) }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.prelu(x, p[self.slope])
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    /// One set of running statistics per slot (per unrolled iteration when
    /// the layer is shared).
    pub stats: Vec<usize>,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, slots: usize) -> Self {
        let stats = if slots == 1 {
            vec![store.add_buffer(name.to_string(), c)]
        } else {
            (0..slots).map(|i| store.add_buffer(format!("{name}.slot{i}"), c)).collect()
        };
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            stats,
        }
    }
}

impl BatchNorm {
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        store: &mut ParamStore<T>,
        x: Var,
        mode: crate::tensor::BatchNormMode,
        slot: usize,
    ) -> Result<Var> {
        g.batchnorm3d(x, p[self.gamma], p[self.beta], store.buffer_mut(self.stats[slot]), mode)
    }
}
