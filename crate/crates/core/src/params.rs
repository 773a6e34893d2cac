//! Named parameter tensors with a stable flat index.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

/// Collects tensor specs in registration order.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn add(&mut self, name: impl Into<String>, shape: (usize, usize), init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    /// `fan_in x fan_out` weight with a `1 x fan_out` bias, both uniform in `±1/√fan_in`.
    pub fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (
            self.add(
                format!("{name}.weight"),
                (fan_in, fan_out),
                Init::Uniform(bound),
            ),
            self.add(format!("{name}.bias"), (1, fan_out), Init::Uniform(bound)),
        )
    }

    pub fn norm(&mut self, name: &str, width: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{name}.scale"), (1, width), Init::Ones),
            self.add(format!("{name}.offset"), (1, width), Init::Zeros),
        )
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Parameter tensors in registration order. The flat index walks tensors in
/// order and each tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn zeros(specs: Vec<ParamSpec>) -> ParamStore {
        let tensors = specs.iter().map(|s| Array2::zeros(s.shape)).collect();
        ParamStore { specs, tensors }
    }

    /// Draws every tensor from its [`Init`] with a seeded generator.
    pub fn initialized(specs: Vec<ParamSpec>, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Array2::zeros(s.shape),
                Init::Ones => Array2::ones(s.shape),
                Init::Uniform(bound) => {
                    Array2::from_shape_simple_fn(s.shape, || rng.random_range(-bound..=bound))
                }
            })
            .collect();
        ParamStore { specs, tensors }
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter values, got {}",
                self.len(),
                values.len()
            )));
        }
        let mut rest = values;
        for t in &mut self.tensors {
            let (head, tail) = rest.split_at(t.len());
            for (dst, &src) in t.iter_mut().zip(head) {
                *dst = src;
            }
            rest = tail;
        }
        Ok(())
    }

    /// `(tensor name, row, col)` of a flat index.
    pub fn locate(&self, mut flat: usize) -> Option<(&str, usize, usize)> {
        for (spec, t) in self.specs.iter().zip(&self.tensors) {
            if flat < t.len() {
                let cols = t.ncols();
                return Some((&spec.name, flat / cols, flat % cols));
            }
            flat -= t.len();
        }
        None
    }

    /// Registers every tensor as a parameter leaf; the result is indexed by [`ParamId`].
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(i, t))
                .collect(),
        )
    }
}

/// Tape handles for every tensor of a store.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
