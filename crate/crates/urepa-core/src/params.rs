//! Ordered, named parameter storage. Layout structs hold typed indices
//! ([`PId`]) into a [`ParamSet`]; the set itself owns the tensors. Building a
//! layout twice from the same seed yields identical names, shapes, and
//! values, which is what checkpointing and the optimizer rely on.

use crate::error::{Error, Result};
use crate::numerics::{seeded_init, InitScheme, Scalar, SeededRng, TensorSpec};
use ndarray::ArrayD;

/// Index of one named tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub(crate) usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn empty() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, id: PId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<T> {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut ArrayD<T> {
        &mut self.values[i]
    }

    pub fn set_value_at(&mut self, i: usize, v: ArrayD<T>) -> Result<()> {
        if v.shape() != self.values[i].shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.names[i],
                self.values[i].shape(),
                v.shape()
            )));
        }
        self.values[i] = v;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f64(x.to_f64())))
                .collect(),
        }
    }

    /// Append every entry of `other`, returning the index offset at which
    /// they start. Names must stay unique.
    pub fn append(&mut self, other: ParamSet<T>) -> usize {
        let offset = self.values.len();
        self.names.extend(other.names);
        self.values.extend(other.values);
        offset
    }

    /// Rebuild a set from named tensors in order (checkpoint deserialization).
    pub fn from_parts(parts: Vec<(String, ArrayD<T>)>) -> ParamSet<T> {
        let (names, values) = parts.into_iter().unzip();
        ParamSet { names, values }
    }
}

/// Builds a [`ParamSet`] in declaration order, drawing initial values from a
/// dedicated RNG stream.
pub struct ParamBuilder<'a, T: Scalar> {
    set: ParamSet<T>,
    rng: &'a mut SeededRng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(rng: &'a mut SeededRng) -> Self {
        ParamBuilder { set: ParamSet::empty(), rng }
    }

    pub fn tensor(&mut self, name: impl Into<String>, shape: &[usize], scheme: InitScheme) -> PId {
        let name = name.into();
        debug_assert!(
            !self.set.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let spec = TensorSpec::new(shape.to_vec(), T::DTYPE).expect("valid parameter shape");
        let value = seeded_init(&spec, scheme, self.rng).expect("valid init scheme");
        self.set.names.push(name);
        self.set.values.push(value);
        PId(self.set.values.len() - 1)
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}

/// Walks shapes in the same order a builder would, without allocating.
/// Used for parameter counting straight from a config.
pub struct ShapeCounter {
    count: usize,
    per_name: Vec<(String, usize)>,
}

impl ShapeCounter {
    pub fn new() -> Self {
        ShapeCounter { count: 0, per_name: Vec::new() }
    }

    pub fn tensor(&mut self, name: impl Into<String>, shape: &[usize]) {
        let n: usize = shape.iter().product();
        self.count += n;
        self.per_name.push((name.into(), n));
    }

    pub fn total(&self) -> usize {
        self.count
    }

    /// Sum over parameters whose name contains `needle`.
    pub fn total_matching(&self, needle: &str) -> usize {
        self.per_name
            .iter()
            .filter(|(n, _)| n.contains(needle))
            .map(|(_, c)| c)
            .sum()
    }
}

impl Default for ShapeCounter {
    fn default() -> Self {
        Self::new()
    }
}
