use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{c, Scalar, Tensor};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn id(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[self.id(name)]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }

    /// Flat view addressing: (tensor, element) for a global element index.
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (i, flat);
            }
            flat -= t.len();
        }
        panic!("flat index out of range");
    }
}

/// Maps parameters into one graph, binding each at most once so that
/// reused parameters accumulate a single gradient.
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        Self { vars: vec![None; store.len()] }
    }

    pub fn bind<T: Scalar>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Var {
        let id = store.id(name);
        *self.vars[id].get_or_insert_with(|| g.param(store.tensors[id].clone()))
    }

    /// Parameter ids and their graph variables, for gradient extraction.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    pub fn is_bound<T: Scalar>(&self, store: &ParamStore<T>, name: &str) -> bool {
        self.vars[store.id(name)].is_some()
    }
}

/// Deterministic initializers.
pub struct Init {
    pub rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: Vec<usize>, a: f64) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| c(self.rng.gen_range(-a..=a))).collect())
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.uniform(vec![fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    /// He-uniform conv weight `[cout, cin·k·k]`.
    pub fn conv<T: Scalar>(&mut self, cout: usize, cin: usize, k: usize) -> Tensor<T> {
        self.uniform(vec![cout, cin * k * k], (6.0 / (cin * k * k) as f64).sqrt())
    }
}
