//! Layer-wise bidirectional EF21.
//!
//! Both endpoints keep the same estimators, `x_hat` for the model and one
//! `u_hat` per worker for its update. A message carries a compressed
//! difference `C(target - estimate)` and both sides fold it into their copy
//! through [`apply_update`], so the copies stay bit-identical.
//!
//! A layer compressed losslessly with [`CompressorKind::Identity`] is sent as
//! [`LayerUpdate::Replace`]: the receiver overwrites instead of adding the
//! difference, which is the same value in exact arithmetic but avoids the
//! rounding of `e + (t - e)`.

pub mod theory;

use crate::compressors::{compress, CompressedLayer, CompressorKind, CompressorSpec, LayerPayload};
use crate::error::{Error, Result};
use crate::tensor::LayeredVector;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerUpdate {
    Delta(CompressedLayer),
    Replace(CompressedLayer),
}

impl LayerUpdate {
    pub fn layer(&self) -> &CompressedLayer {
        match self {
            LayerUpdate::Delta(c) | LayerUpdate::Replace(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ef21Message {
    pub layers: Vec<LayerUpdate>,
    pub bit_cost: u64,
}

impl Ef21Message {
    /// Per-layer retained entry counts.
    pub fn entries(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer().payload.nnz()).collect()
    }
}

/// Compresses `target - estimate` layer by layer.
pub fn encode_update(
    target: &LayeredVector,
    estimate: &LayeredVector,
    specs: &[CompressorSpec],
    value_bits: u32,
) -> Result<Ef21Message> {
    let p = target.partition();
    if estimate.partition() != p {
        return Err(Error::usage("target and estimate partitions differ"));
    }
    if specs.len() != p.num_layers() {
        return Err(Error::usage(format!(
            "{} compressor specs for {} layers",
            specs.len(),
            p.num_layers()
        )));
    }
    let mut layers = Vec::with_capacity(specs.len());
    let mut bit_cost = 0;
    for (i, spec) in specs.iter().enumerate() {
        let update = if spec.kind == CompressorKind::Identity {
            LayerUpdate::Replace(compress(spec, target.layer(i), value_bits)?)
        } else {
            let diff: Vec<f64> = target
                .layer(i)
                .iter()
                .zip(estimate.layer(i))
                .map(|(t, e)| t - e)
                .collect();
            LayerUpdate::Delta(compress(spec, &diff, value_bits)?)
        };
        bit_cost += update.layer().bit_cost;
        layers.push(update);
    }
    Ok(Ef21Message { layers, bit_cost })
}

/// Folds a message into an estimator.
pub fn apply_update(estimate: &mut LayeredVector, msg: &Ef21Message) -> Result<()> {
    let p = estimate.partition().clone();
    if msg.layers.len() != p.num_layers() {
        return Err(Error::usage(format!(
            "message has {} layers, estimator {}",
            msg.layers.len(),
            p.num_layers()
        )));
    }
    for (i, update) in msg.layers.iter().enumerate() {
        let layer = update.layer();
        if layer.dim != p.layer_dim(i) {
            return Err(Error::usage(format!(
                "layer {i}: message dimension {} vs {}",
                layer.dim,
                p.layer_dim(i)
            )));
        }
        if let LayerPayload::Sparse { indices, .. } = &layer.payload {
            if indices.iter().any(|&j| j as usize >= layer.dim) {
                return Err(Error::usage(format!("layer {i}: index out of range")));
            }
        }
        let out = estimate.layer_mut(i);
        match update {
            LayerUpdate::Delta(c) => c.payload.add_into(out),
            LayerUpdate::Replace(c) => c.payload.scatter_into(out),
        }
    }
    if !estimate.is_finite() {
        return Err(Error::Numeric("estimator became non-finite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ef21WorkerState {
    pub u_hat: LayeredVector,
    pub x_hat: LayeredVector,
}

impl Ef21WorkerState {
    pub fn new(x_hat: LayeredVector, u_hat: LayeredVector) -> Result<Self> {
        if x_hat.partition() != u_hat.partition() {
            return Err(Error::usage("worker estimators have different partitions"));
        }
        Ok(Self { u_hat, x_hat })
    }

    pub fn receive(&mut self, msg: &Ef21Message) -> Result<()> {
        apply_update(&mut self.x_hat, msg)
    }

    /// Sends `C(u - u_hat)` and advances `u_hat` by the same amount.
    pub fn upload(&mut self, u: &LayeredVector, specs: &[CompressorSpec], value_bits: u32) -> Result<Ef21Message> {
        let msg = encode_update(u, &self.u_hat, specs, value_bits)?;
        apply_update(&mut self.u_hat, &msg)?;
        Ok(msg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ef21ServerState {
    pub x: LayeredVector,
    pub x_hat: LayeredVector,
    pub u_hats: Vec<LayeredVector>,
}

impl Ef21ServerState {
    pub fn new(x: LayeredVector, x_hat: LayeredVector, u_hats: Vec<LayeredVector>) -> Result<Self> {
        if u_hats.is_empty() {
            return Err(Error::usage("server needs at least one worker"));
        }
        let p = x.partition();
        if x_hat.partition() != p || u_hats.iter().any(|u| u.partition() != p) {
            return Err(Error::usage("server state partitions differ"));
        }
        Ok(Self { x, x_hat, u_hats })
    }

    pub fn workers(&self) -> usize {
        self.u_hats.len()
    }

    /// Sends `C(x - x_hat)` and advances `x_hat`.
    pub fn broadcast(&mut self, specs: &[CompressorSpec], value_bits: u32) -> Result<Ef21Message> {
        let msg = encode_update(&self.x, &self.x_hat, specs, value_bits)?;
        apply_update(&mut self.x_hat, &msg)?;
        Ok(msg)
    }

    /// Folds one message per worker into the `u_hat` copies.
    pub fn absorb(&mut self, messages: &[Ef21Message]) -> Result<()> {
        if messages.len() != self.u_hats.len() {
            return Err(Error::Protocol(format!(
                "expected {} worker messages, got {}",
                self.u_hats.len(),
                messages.len()
            )));
        }
        for (u_hat, msg) in self.u_hats.iter_mut().zip(messages) {
            apply_update(u_hat, msg)?;
        }
        Ok(())
    }

    /// `sum_m w_m u_hat_m`, accumulated in worker order.
    pub fn aggregate(&self, weights: &[f64]) -> Result<LayeredVector> {
        if weights.len() != self.u_hats.len() {
            return Err(Error::usage("one weight per worker required"));
        }
        if self.u_hats.len() == 1 && weights[0] == 1.0 {
            return Ok(self.u_hats[0].clone());
        }
        let mut g = LayeredVector::zeros(self.x.partition());
        for (u, &w) in self.u_hats.iter().zip(weights) {
            g.axpy_assign(w, u)?;
        }
        Ok(g)
    }

    /// Absorbs the messages, then steps `x_i -= gammas[i] * sum_m w_m u_hat_m,i`.
    pub fn aggregate_and_step(&mut self, messages: &[Ef21Message], weights: &[f64], gammas: &[f64]) -> Result<()> {
        self.absorb(messages)?;
        let g = self.aggregate(weights)?;
        self.x = layerwise_gd_step(&self.x, &g, gammas)?;
        Ok(())
    }
}

/// `x_i - gammas[i] * u_i` for every layer.
pub fn layerwise_gd_step(x: &LayeredVector, u: &LayeredVector, gammas: &[f64]) -> Result<LayeredVector> {
    let p = x.partition();
    if u.partition() != p {
        return Err(Error::usage("model and update partitions differ"));
    }
    if gammas.len() != p.num_layers() {
        return Err(Error::usage(format!("{} step sizes for {} layers", gammas.len(), p.num_layers())));
    }
    if gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
        return Err(Error::usage("step sizes must be finite and non-negative"));
    }
    let mut out = x.clone();
    for (i, &g) in gammas.iter().enumerate() {
        for (o, u) in out.layer_mut(i).iter_mut().zip(u.layer(i)) {
            *o -= g * u;
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric("model diverged to non-finite values".into()));
    }
    Ok(out)
}
