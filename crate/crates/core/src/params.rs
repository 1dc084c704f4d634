//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;

use gridcast_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors. Insertion order is stable
/// and defines the layout of gradients and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Sum of scalar counts for parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter on `graph` as a leaf. With `trainable` the
    /// leaves are differentiable.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { graph, vars }
    }
}

/// Parameters of a [`ParamStore`] placed on one graph.
pub struct Bound<'g, T: Scalar> {
    graph: &'g Graph<T>,
    vars: Vec<Var>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    /// Wraps vars created elsewhere, one per parameter in store order.
    pub fn from_vars(graph: &'g Graph<T>, vars: Vec<Var>) -> Self {
        Bound { graph, vars }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients after `graph.backward`, zero-filled for untouched parameters.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| {
                self.graph
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(&self.graph.shape(v)))
            })
            .collect()
    }
}

/// Random initializers.
pub struct Init<'r, R: Rng> {
    rng: &'r mut R,
}

impl<'r, R: Rng> Init<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Init { rng }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(self.rng)))
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        if bound == 0.0 {
            return Tensor::zeros(shape);
        }
        let dist = Uniform::new(-bound, bound).expect("valid range");
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(self.rng)))
    }

    /// Convolution weight `[c_out, c_in, k, k]`, uniform in ±1/√(c_in·k²).
    pub fn conv<T: Scalar>(&mut self, c_out: usize, c_in: usize, k: usize) -> Tensor<T> {
        let fan_in = (c_in * k * k).max(1) as f64;
        self.uniform(&[c_out, c_in, k, k], 1.0 / fan_in.sqrt())
    }
}

/// Weight and optional bias of a same-padded convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        with_bias: bool,
    ) -> Self {
        let weight = store.insert(format!("{name}.w"), init.conv(c_out, c_in, k));
        let bias = with_bias.then(|| store.insert(format!("{name}.b"), Tensor::zeros(&[c_out])));
        ConvParams { weight, bias }
    }

    pub fn apply<T: Scalar>(&self, b: &Bound<'_, T>, x: Var) -> gridcast_tensor::Result<Var> {
        b.graph()
            .conv2d(x, b.var(self.weight), self.bias.map(|p| b.var(p)))
    }
}
