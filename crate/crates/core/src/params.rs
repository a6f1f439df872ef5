//! Named parameter storage shared by the encoder, the fusion module and the optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter matrices. Biases and norm scales are 1×n rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix<T>] {
        &self.values
    }

    /// Replaces every value; shapes must match.
    pub fn set_values(&mut self, values: Vec<Matrix<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Config(format!(
                "expected {} parameter values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::dim("set_values", self.values[i].shape(), v.shape()));
            }
        }
        self.values = values;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
        }
    }

    /// Registers every parameter as a borrowed leaf. The returned vars are
    /// indexed by [`ParamId`].
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        Bound(self.values.iter().map(|m| tape.leaf_ref(m)).collect())
    }

    /// Gradients for the selected parameters, zero-filled where untouched.
    pub fn collect_grads(&self, grads: &Grads<T>, bound: &Bound, select: &[ParamId]) -> GradRecord<T> {
        GradRecord {
            entries: select
                .iter()
                .map(|&id| (id, grads.get_or_zeros(bound[id], self.values[id.0].shape())))
                .collect(),
        }
    }
}

/// Tape vars for every parameter of a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Per-parameter gradients, keyed by id, each shaped like its parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord<T> {
    pub entries: Vec<(ParamId, Matrix<T>)>,
}

impl<T: Real> GradRecord<T> {
    pub fn global_norm(&self) -> T {
        self.entries.iter().map(|(_, g)| g.sq_norm()).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for (_, g) in &mut self.entries {
            g.scale_assign(s);
        }
    }

    /// Adds `other` entrywise; both records must cover the same ids in the same order.
    pub fn accumulate(&mut self, other: &GradRecord<T>) {
        for ((a, ga), (b, gb)) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(*a, *b);
            ga.add_assign(gb);
        }
    }
}

/// Weight matrix drawn from N(0, 1/fan_in).
pub fn init_weight<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix<T> {
    init_normal(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

pub fn init_normal<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}
