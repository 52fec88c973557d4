//! Flat real vectors partitioned into contiguous layers.
//!
//! Model state, update vectors and their estimators all live in a single
//! `Vec<f64>`; a [`LayerPartition`] records where each layer starts so that
//! per-layer compressors and step sizes can address their block.

use std::ops::Range;

use crate::error::{Error, Result};

/// Layer boundaries of a flat vector: `offsets[i]..offsets[i + 1]` is layer `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerPartition {
    offsets: Vec<usize>,
}

impl LayerPartition {
    /// Builds a partition from explicit offsets (`l + 1` entries, first is 0).
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.len() < 2 {
            return Err(Error::usage("a partition needs at least one layer"));
        }
        if offsets[0] != 0 {
            return Err(Error::usage("partition offsets must start at 0"));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::usage("partition offsets must be strictly increasing"));
        }
        Ok(Self { offsets })
    }

    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        let mut acc = 0;
        for &s in sizes {
            acc += s;
            offsets.push(acc);
        }
        Self::from_offsets(offsets)
    }

    /// One layer spanning all `dim` coordinates.
    pub fn single(dim: usize) -> Result<Self> {
        Self::from_sizes(&[dim])
    }

    /// `layers` layers of (nearly) equal size; the first `dim % layers` layers get one extra entry.
    pub fn uniform(dim: usize, layers: usize) -> Result<Self> {
        if layers == 0 || layers > dim {
            return Err(Error::usage(format!(
                "cannot split dimension {dim} into {layers} non-empty layers"
            )));
        }
        let base = dim / layers;
        let extra = dim % layers;
        let sizes: Vec<usize> = (0..layers).map(|i| base + usize::from(i < extra)).collect();
        Self::from_sizes(&sizes)
    }

    pub fn num_layers(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total dimension `d`.
    pub fn dim(&self) -> usize {
        *self.offsets.last().expect("non-empty offsets")
    }

    pub fn layer_dim(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    fn check_layer(&self, i: usize) -> Result<()> {
        if i >= self.num_layers() {
            return Err(Error::usage(format!(
                "layer index {i} out of range for {} layers",
                self.num_layers()
            )));
        }
        Ok(())
    }
}

/// A dense vector together with its layer partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredVector {
    values: Vec<f64>,
    partition: LayerPartition,
}

impl LayeredVector {
    pub fn new(values: Vec<f64>, partition: LayerPartition) -> Result<Self> {
        if values.len() != partition.dim() {
            return Err(Error::usage(format!(
                "vector length {} does not match partition dimension {}",
                values.len(),
                partition.dim()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite entry at index {j}")));
        }
        Ok(Self { values, partition })
    }

    pub fn zeros(partition: &LayerPartition) -> Self {
        Self {
            values: vec![0.0; partition.dim()],
            partition: partition.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[cfg(test)]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Copy of layer `i`'s block.
    pub fn layer_slice(&self, i: usize) -> Result<Vec<f64>> {
        self.partition.check_layer(i)?;
        Ok(self.values[self.partition.range(i)].to_vec())
    }

    /// Borrowed view of layer `i`; panics on an out-of-range index.
    pub fn layer(&self, i: usize) -> &[f64] {
        &self.values[self.partition.range(i)]
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.partition.range(i);
        &mut self.values[r]
    }

    pub fn sq_norm(&self) -> f64 {
        sq_norm(&self.values)
    }

    pub fn layer_sq_norm(&self, i: usize) -> f64 {
        sq_norm(self.layer(i))
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.partition != other.partition {
            return Err(Error::usage("layer partitions differ"));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| s * v).collect(),
            partition: self.partition.clone(),
        }
    }

    /// `a * x + self`.
    pub fn axpy(&self, a: f64, x: &Self) -> Result<Self> {
        self.zip_with(x, |y, x| a * x + y)
    }

    /// In-place `self += a * x`.
    pub fn axpy_assign(&mut self, a: f64, x: &Self) -> Result<()> {
        self.check_same(x)?;
        for (y, x) in self.values.iter_mut().zip(&x.values) {
            *y += a * x;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            partition: self.partition.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
