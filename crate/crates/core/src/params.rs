use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::{Scalar, Tensor};

/// Named trainable arrays, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with std `gain / sqrt(fan_in)`; fan-in is the product of all but the last axis.
    FanIn(f64),
    /// Square identity (or rectangular with ones on the leading diagonal).
    Identity,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data_mut().iter_mut().for_each(|x| *x = T::one()),
            Init::Const(c) => t.data_mut().iter_mut().for_each(|x| *x = T::lit(c)),
            Init::FanIn(gain) => {
                let fan_in: usize = shape[..shape.len().saturating_sub(1)].iter().product();
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                t.data_mut().iter_mut().for_each(|x| *x = T::lit(normal.sample(rng)));
            }
            Init::Identity => {
                let (r, c) = (shape[0], shape[shape.len() - 1]);
                for i in 0..r.min(c) {
                    t.data_mut()[i * c + i] = T::one();
                }
            }
        }
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Zeroes every array whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Gradients keyed by parameter name.
pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

/// A forward-pass context: a fresh [`Graph`] plus lazy binding of store
/// parameters as graph leaves.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { g: Graph::new(), store, bound: HashMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let Some(t) = self.store.get(name) else {
            return invalid(format!("unknown parameter `{name}`"));
        };
        let v = self.g.leaf(t.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.g.value(v)
    }

    /// Backward from a scalar and collect gradients of every bound parameter.
    pub fn param_grads(&self, loss: Var) -> ParamGrads<T> {
        let mut grads = self.g.backward(loss);
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.g.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}
