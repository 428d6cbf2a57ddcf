use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Mat;
use crate::error::{Error, Result};

/// Named learnable matrices, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
    lookup: HashMap<String, usize>,
}

/// Serialized form of one tensor: name, shape and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter `{name}`");
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Adds a `rows x cols` matrix drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let m = Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no parameter named `{name}`")))
    }

    pub fn value(&self, idx: usize) -> &Mat {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Mat {
        &mut self.values[idx]
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        Ok(&self.values[self.index(name)?])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.iter()
            .map(|(name, m)| TensorRecord {
                name: name.to_string(),
                shape: [m.nrows(), m.ncols()],
                values: m.iter().copied().collect(),
            })
            .collect()
    }

    pub fn from_records(records: &[TensorRecord]) -> Result<Self> {
        let mut set = ParamSet::new();
        for r in records {
            if r.values.len() != r.shape[0] * r.shape[1] {
                return Err(Error::param(format!(
                    "tensor `{}` declares shape {:?} but has {} values",
                    r.name,
                    r.shape,
                    r.values.len()
                )));
            }
            if set.lookup.contains_key(&r.name) {
                return Err(Error::param(format!("duplicate tensor `{}`", r.name)));
            }
            let m = Mat::from_shape_vec((r.shape[0], r.shape[1]), r.values.clone())
                .map_err(|e| Error::param(e.to_string()))?;
            set.add(r.name.clone(), m);
        }
        Ok(set)
    }

    /// Checks that `other` has the same names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.dim() == b.dim())
    }
}

/// One gradient matrix per parameter, aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Mat>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            values: params.values.iter().map(|m| Mat::zeros(m.raw_dim())).collect(),
        }
    }

    pub(crate) fn accumulate(&mut self, idx: usize, delta: &Mat) {
        self.values[idx] += delta;
    }

    pub fn get(&self, idx: usize) -> &Mat {
        &self.values[idx]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mat> {
        self.values.iter()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.values {
            m.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|m| m.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn has_non_finite(&self) -> bool {
        self.values.iter().any(|m| m.iter().any(|v| !v.is_finite()))
    }
}
