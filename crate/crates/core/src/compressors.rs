//! Sparsifying compressors with exact bit-cost accounting.
//!
//! Cost model: a sparse entry costs `value_bits + ceil(log2(layer_dim))`
//! bits (value plus index); a dense layer costs `layer_dim * value_bits`.
//! There is no entropy coding.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LayerPartition, LayeredVector};

pub const DEFAULT_VALUE_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompressorKind {
    TopK,
    RandK,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompressorSpec {
    pub kind: CompressorKind,
    /// Retained entries; ignored for `Identity`.
    pub k: usize,
    /// Seed of the RandK index stream.
    pub seed: u64,
    /// RandK only: scale kept entries by `d/k` (unbiased). Disabled in the
    /// contractive view used by error feedback.
    pub rescale: bool,
}

impl CompressorSpec {
    pub fn top_k(k: usize) -> Self {
        Self {
            kind: CompressorKind::TopK,
            k,
            seed: 0,
            rescale: false,
        }
    }

    pub fn rand_k(k: usize, seed: u64) -> Self {
        Self {
            kind: CompressorKind::RandK,
            k,
            seed,
            rescale: true,
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: CompressorKind::Identity,
            k: 0,
            seed: 0,
            rescale: false,
        }
    }

    /// The same compressor with any unbiasing rescale removed.
    pub fn contractive(self) -> Self {
        Self {
            rescale: false,
            ..self
        }
    }

    /// Entries kept on a layer of dimension `dim`.
    pub fn retained(&self, dim: usize) -> usize {
        match self.kind {
            CompressorKind::Identity => dim,
            _ => self.k,
        }
    }

    pub fn is_lossless_for(&self, dim: usize) -> bool {
        match self.kind {
            CompressorKind::Identity => true,
            CompressorKind::TopK => self.k >= dim,
            CompressorKind::RandK => self.k >= dim && !self.rescale,
        }
    }
}

/// Sparse or dense payload of one compressed layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerPayload {
    /// `(index, value)` pairs, indices strictly increasing.
    Sparse { indices: Vec<u32>, values: Vec<f64> },
    Dense(Vec<f64>),
}

impl LayerPayload {
    pub fn nnz(&self) -> usize {
        match self {
            LayerPayload::Sparse { indices, .. } => indices.len(),
            LayerPayload::Dense(v) => v.len(),
        }
    }

    /// Writes the payload into a zeroed dense buffer.
    pub fn scatter_into(&self, out: &mut [f64]) {
        match self {
            LayerPayload::Sparse { indices, values } => {
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
            }
            LayerPayload::Dense(v) => out.copy_from_slice(v),
        }
    }

    /// `out += payload`.
    pub fn add_into(&self, out: &mut [f64]) {
        match self {
            LayerPayload::Sparse { indices, values } => {
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] += v;
                }
            }
            LayerPayload::Dense(v) => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += x;
                }
            }
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.scatter_into(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub payload: LayerPayload,
    pub dim: usize,
    pub bit_cost: u64,
}

/// Per-layer compressed payloads of a whole [`LayeredVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub layers: Vec<CompressedLayer>,
    pub partition: LayerPartition,
    pub bit_cost: u64,
}

/// `ceil(log2(dim))`, the width of one index into a layer of `dim` entries.
pub fn index_bits(dim: usize) -> u32 {
    if dim <= 1 {
        0
    } else {
        usize::BITS - (dim - 1).leading_zeros()
    }
}

/// Bits per transmitted sparse entry.
pub fn entry_bits(dim: usize, value_bits: u32) -> u64 {
    u64::from(value_bits) + u64::from(index_bits(dim))
}

/// Encoded size of `spec` applied to a layer of `dim` entries.
pub fn bit_cost(spec: &CompressorSpec, dim: usize, value_bits: u32) -> u64 {
    match spec.kind {
        CompressorKind::Identity => dim as u64 * u64::from(value_bits),
        _ => spec.k as u64 * entry_bits(dim, value_bits),
    }
}

/// Largest `k` whose sparse encoding fits in `budget_bits`, clamped to `1..=dim`.
///
/// A budget too small for one entry still yields `k = 1` (minimum progress).
pub fn k_for_budget(budget_bits: f64, layer_dim: usize, value_bits: u32) -> usize {
    let per_entry = entry_bits(layer_dim, value_bits) as f64;
    let affordable = (budget_bits.max(0.0) / per_entry).floor();
    if affordable >= layer_dim as f64 {
        layer_dim
    } else {
        (affordable as usize).max(1)
    }
}

/// Contraction parameter `alpha` of `spec` on a `dim`-dimensional layer.
///
/// RandK is reported in its contractive (unscaled) view.
pub fn contraction_alpha(spec: &CompressorSpec, dim: usize) -> f64 {
    match spec.kind {
        CompressorKind::Identity => 1.0,
        _ => (spec.k.min(dim) as f64) / dim as f64,
    }
}

/// Indices of the `k` largest-magnitude entries, ascending. Ties go to the lower index.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..v.len() as u32).collect();
    let by_magnitude = |a: &u32, b: &u32| {
        v[*b as usize]
            .abs()
            .total_cmp(&v[*a as usize].abs())
            .then(a.cmp(b))
    };
    if k < v.len() {
        order.select_nth_unstable_by(k, by_magnitude);
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

/// Compresses one layer.
pub fn compress(spec: &CompressorSpec, v: &[f64], value_bits: u32) -> Result<CompressedLayer> {
    let dim = v.len();
    if dim == 0 {
        return Err(Error::usage("cannot compress an empty vector"));
    }
    let payload = match spec.kind {
        CompressorKind::Identity => LayerPayload::Dense(v.to_vec()),
        CompressorKind::TopK | CompressorKind::RandK => {
            if spec.k == 0 || spec.k > dim {
                return Err(Error::usage(format!(
                    "k = {} is outside 1..={dim}",
                    spec.k
                )));
            }
            if spec.kind == CompressorKind::TopK {
                let indices = top_k_indices(v, spec.k);
                let values = indices.iter().map(|&i| v[i as usize]).collect();
                LayerPayload::Sparse { indices, values }
            } else {
                let mut rng = rng::stream(spec.seed, &[rng::TAG_RANDK]);
                let mut indices: Vec<u32> = index::sample(&mut rng, dim, spec.k)
                    .into_iter()
                    .map(|i| i as u32)
                    .collect();
                indices.sort_unstable();
                let scale = if spec.rescale {
                    dim as f64 / spec.k as f64
                } else {
                    1.0
                };
                let values = indices.iter().map(|&i| scale * v[i as usize]).collect();
                LayerPayload::Sparse { indices, values }
            }
        }
    };
    Ok(CompressedLayer {
        payload,
        dim,
        bit_cost: bit_cost(spec, dim, value_bits),
    })
}

/// Compresses every layer of `v` with its own spec.
pub fn compress_layered(
    specs: &[CompressorSpec],
    v: &LayeredVector,
    value_bits: u32,
) -> Result<CompressedMessage> {
    let partition = v.partition();
    if specs.len() != partition.num_layers() {
        return Err(Error::usage(format!(
            "{} compressor specs for {} layers",
            specs.len(),
            partition.num_layers()
        )));
    }
    let layers = specs
        .iter()
        .enumerate()
        .map(|(i, s)| compress(s, v.layer(i), value_bits))
        .collect::<Result<Vec<_>>>()?;
    let bit_cost = layers.iter().map(|l| l.bit_cost).sum();
    Ok(CompressedMessage {
        layers,
        partition: partition.clone(),
        bit_cost,
    })
}

/// Dense vector with the payload entries placed and zeros elsewhere.
pub fn decompress(msg: &CompressedMessage, partition: &LayerPartition) -> Result<LayeredVector> {
    if &msg.partition != partition || msg.layers.len() != partition.num_layers() {
        return Err(Error::usage("message partition does not match"));
    }
    let mut out = LayeredVector::zeros(partition);
    for (i, layer) in msg.layers.iter().enumerate() {
        if layer.dim != partition.layer_dim(i) {
            return Err(Error::usage(format!("layer {i} dimension mismatch")));
        }
        if let LayerPayload::Sparse { indices, .. } = &layer.payload {
            if indices.iter().any(|&j| j as usize >= layer.dim) {
                return Err(Error::usage(format!("layer {i} index out of bounds")));
            }
        }
        layer.payload.scatter_into(out.layer_mut(i));
    }
    Ok(out)
}
