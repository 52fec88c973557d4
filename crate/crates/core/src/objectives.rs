//! Synthetic objectives with known smoothness constants.
//!
//! [`QuadraticObjective`] is `f(x) = 1/2 * sum_j a_j x_j^2`, so the layer and
//! global smoothness constants are the largest `a_j` per layer and overall,
//! and `f_inf = 0`. [`LayeredLsqObjective`] is a layer-separable least-squares
//! model whose samples are sharded across workers, giving stochastic
//! mini-batch gradients with a layered structure.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LayerPartition, LayeredVector};

/// Smoothness constants: `global` bounds the gradient's Lipschitz constant,
/// `layers[i]` the curvature along layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothness {
    pub global: f64,
    pub layers: Vec<f64>,
}

pub trait Objective: Send + Sync {
    fn partition(&self) -> &LayerPartition;

    fn value(&self, x: &LayeredVector) -> Result<f64>;

    fn grad(&self, x: &LayeredVector) -> Result<LayeredVector>;

    /// Update computed by `worker` at round seed `round_seed`. Deterministic in
    /// `(round_seed, worker)`; its expectation is the worker's local gradient.
    fn worker_grad(&self, worker: usize, x: &LayeredVector, round_seed: u64) -> Result<LayeredVector>;

    fn smoothness(&self) -> Smoothness;

    /// A lower bound on `f`.
    fn lower_bound(&self) -> f64;
}

fn check_dim(p: &LayerPartition, x: &LayeredVector) -> Result<()> {
    if x.partition() != p {
        return Err(Error::usage(format!(
            "point has dimension {} / {} layers, objective expects {} / {}",
            x.dim(),
            x.partition().num_layers(),
            p.dim(),
            p.num_layers()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    a: Vec<f64>,
    partition: LayerPartition,
}

impl QuadraticObjective {
    pub fn new(a: Vec<f64>, partition: LayerPartition) -> Result<Self> {
        if a.len() != partition.dim() {
            return Err(Error::usage("coefficient count does not match the partition"));
        }
        if a.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config("quadratic coefficients must be positive"));
        }
        Ok(Self { a, partition })
    }

    /// Coefficients log-uniform in `[a_min, a_max]`.
    pub fn log_uniform(partition: LayerPartition, a_min: f64, a_max: f64, seed: u64) -> Result<Self> {
        if !(a_min > 0.0 && a_max >= a_min) {
            return Err(Error::config(format!("invalid coefficient range [{a_min}, {a_max}]")));
        }
        let mut r = rng::stream(seed, &[rng::TAG_OBJECTIVE]);
        let (lo, hi) = (a_min.ln(), a_max.ln());
        let a = (0..partition.dim())
            .map(|_| (lo + (hi - lo) * r.random::<f64>()).exp())
            .collect();
        Self::new(a, partition)
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.a
    }
}

impl Objective for QuadraticObjective {
    fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    fn value(&self, x: &LayeredVector) -> Result<f64> {
        check_dim(&self.partition, x)?;
        Ok(0.5 * self.a.iter().zip(x.values()).map(|(a, x)| a * x * x).sum::<f64>())
    }

    fn grad(&self, x: &LayeredVector) -> Result<LayeredVector> {
        check_dim(&self.partition, x)?;
        let g = self.a.iter().zip(x.values()).map(|(a, x)| a * x).collect();
        LayeredVector::new(g, self.partition.clone())
    }

    fn worker_grad(&self, _worker: usize, x: &LayeredVector, _round_seed: u64) -> Result<LayeredVector> {
        self.grad(x)
    }

    fn smoothness(&self) -> Smoothness {
        let layers: Vec<f64> = (0..self.partition.num_layers())
            .map(|i| self.a[self.partition.range(i)].iter().copied().fold(0.0, f64::max))
            .collect();
        let global = layers.iter().copied().fold(0.0, f64::max);
        Smoothness { global, layers }
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }
}

/// One layer's block of the least-squares model: `n x d_i` design (row-major) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LsqLayer {
    pub design: Vec<f64>,
    pub targets: Vec<f64>,
}

/// `f(x) = sum_i 1/(2n) * ||A_i x_i - y_i||^2`.
///
/// The `n` samples are split into equal contiguous shards, one per worker;
/// worker `m` draws mini-batches from its shard, so `f` is the uniform
/// average of the shard objectives.
#[derive(Debug, Clone)]
pub struct LayeredLsqObjective {
    partition: LayerPartition,
    samples: usize,
    layers: Vec<LsqLayer>,
    workers: usize,
    batch_size: usize,
    /// Per worker: its shard's rows in a fixed shuffled order; batch `b` is
    /// the `b`-th chunk of `batch_size` rows.
    batch_order: Vec<Vec<usize>>,
    smoothness: Smoothness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSpec {
    pub layer_sizes: Vec<usize>,
    pub samples: usize,
    pub batch_size: usize,
    /// Column scale of each layer's design, log-spaced from first to last.
    pub scale_range: (f64, f64),
    pub noise_std: f64,
}

impl Default for LsqSpec {
    fn default() -> Self {
        Self {
            layer_sizes: vec![100; 10],
            samples: 400,
            batch_size: 40,
            scale_range: (0.2, 2.0),
            noise_std: 0.1,
        }
    }
}

impl LayeredLsqObjective {
    pub fn from_parts(
        partition: LayerPartition,
        samples: usize,
        layers: Vec<LsqLayer>,
        workers: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if layers.len() != partition.num_layers() {
            return Err(Error::usage("one design block per layer required"));
        }
        if samples == 0 || workers == 0 || !samples.is_multiple_of(workers) {
            return Err(Error::config(format!(
                "{samples} samples cannot be split evenly across {workers} workers"
            )));
        }
        let shard = samples / workers;
        if batch_size == 0 || batch_size > shard {
            return Err(Error::config(format!(
                "batch size {batch_size} must be in 1..={shard} (shard size)"
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.design.len() != samples * partition.layer_dim(i) || l.targets.len() != samples {
                return Err(Error::usage(format!("layer {i} data has the wrong shape")));
            }
            if !l.design.iter().chain(&l.targets).all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} data is not finite")));
            }
        }
        let batch_order = (0..workers)
            .map(|m| {
                let mut rows: Vec<usize> = (m * shard..(m + 1) * shard).collect();
                rows.shuffle(&mut rng::stream(seed, &[rng::TAG_BATCH, m as u64]));
                rows
            })
            .collect();
        let smoothness = {
            let per_layer: Vec<f64> = layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let g = gram(&l.design, samples, partition.layer_dim(i));
                    power_iteration(&g, partition.layer_dim(i), 1e-10)
                })
                .collect();
            // block-diagonal Hessian: the global constant is the largest block's
            Smoothness {
                global: per_layer.iter().copied().fold(0.0, f64::max),
                layers: per_layer,
            }
        };
        Ok(Self {
            partition,
            samples,
            layers,
            workers,
            batch_size,
            batch_order,
            smoothness,
        })
    }

    /// Random instance: Gaussian designs with per-layer column scales, targets
    /// from a hidden Gaussian model plus noise.
    pub fn generate(spec: &LsqSpec, workers: usize, seed: u64) -> Result<Self> {
        let partition = LayerPartition::from_sizes(&spec.layer_sizes)?;
        let n = spec.samples;
        let l = spec.layer_sizes.len();
        let (s0, s1) = spec.scale_range;
        if !(s0 > 0.0 && s1 > 0.0) {
            return Err(Error::config("layer scales must be positive"));
        }
        let mut r = rng::stream(seed, &[rng::TAG_OBJECTIVE]);
        let mut normal = || -> f64 { StandardNormal.sample(&mut r) };
        let layers = spec
            .layer_sizes
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let t = if l > 1 { i as f64 / (l - 1) as f64 } else { 0.0 };
                let scale = (s0.ln() + t * (s1.ln() - s0.ln())).exp();
                let design: Vec<f64> = (0..n * d).map(|_| scale * normal()).collect();
                let hidden: Vec<f64> = (0..d).map(|_| normal()).collect();
                let targets = (0..n)
                    .map(|row| {
                        let a = &design[row * d..(row + 1) * d];
                        a.iter().zip(&hidden).map(|(a, h)| a * h).sum::<f64>()
                            + spec.noise_std * normal()
                    })
                    .collect();
                LsqLayer { design, targets }
            })
            .collect();
        Self::from_parts(partition, n, layers, workers, spec.batch_size, seed)
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn batches_per_worker(&self) -> usize {
        let shard = self.samples / self.workers;
        shard.div_ceil(self.batch_size)
    }

    fn shard_rows(&self, worker: usize) -> std::ops::Range<usize> {
        let shard = self.samples / self.workers;
        worker * shard..(worker + 1) * shard
    }

    /// Mean per-sample gradient over `rows`.
    fn grad_rows(&self, x: &LayeredVector, rows: impl Iterator<Item = usize> + Clone) -> Result<LayeredVector> {
        let mut out = LayeredVector::zeros(&self.partition);
        let count = rows.clone().count() as f64;
        for (i, layer) in self.layers.iter().enumerate() {
            let d = self.partition.layer_dim(i);
            let xi = x.layer(i);
            let gi = out.layer_mut(i);
            for row in rows.clone() {
                let a = &layer.design[row * d..(row + 1) * d];
                let resid = a.iter().zip(xi).map(|(a, x)| a * x).sum::<f64>() - layer.targets[row];
                for (g, a) in gi.iter_mut().zip(a) {
                    *g += resid * a;
                }
            }
            for g in gi.iter_mut() {
                *g /= count;
            }
        }
        Ok(out)
    }

    /// Gradient on batch `batch` of `worker`'s shard.
    pub fn batch_grad(&self, worker: usize, x: &LayeredVector, batch: usize) -> Result<LayeredVector> {
        check_dim(&self.partition, x)?;
        if worker >= self.workers || batch >= self.batches_per_worker() {
            return Err(Error::usage(format!("no batch {batch} for worker {worker}")));
        }
        let order = &self.batch_order[worker];
        let start = batch * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        self.grad_rows(x, order[start..end].iter().copied())
    }

    /// Exact gradient of worker `worker`'s shard objective.
    pub fn shard_grad(&self, worker: usize, x: &LayeredVector) -> Result<LayeredVector> {
        check_dim(&self.partition, x)?;
        self.grad_rows(x, self.shard_rows(worker))
    }

    pub fn shard_value(&self, worker: usize, x: &LayeredVector) -> Result<f64> {
        check_dim(&self.partition, x)?;
        let rows = self.shard_rows(worker);
        Ok(self.value_rows(x, rows.clone()) / rows.len() as f64)
    }

    fn value_rows(&self, x: &LayeredVector, rows: std::ops::Range<usize>) -> f64 {
        let mut total = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            let d = self.partition.layer_dim(i);
            let xi = x.layer(i);
            for row in rows.clone() {
                let a = &layer.design[row * d..(row + 1) * d];
                let r = a.iter().zip(xi).map(|(a, x)| a * x).sum::<f64>() - layer.targets[row];
                total += 0.5 * r * r;
            }
        }
        total
    }
}

impl Objective for LayeredLsqObjective {
    fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    fn value(&self, x: &LayeredVector) -> Result<f64> {
        check_dim(&self.partition, x)?;
        Ok(self.value_rows(x, 0..self.samples) / self.samples as f64)
    }

    fn grad(&self, x: &LayeredVector) -> Result<LayeredVector> {
        check_dim(&self.partition, x)?;
        self.grad_rows(x, 0..self.samples)
    }

    fn worker_grad(&self, worker: usize, x: &LayeredVector, round_seed: u64) -> Result<LayeredVector> {
        if worker >= self.workers {
            return Err(Error::usage(format!("no worker {worker}")));
        }
        let shard = self.samples / self.workers;
        if self.batch_size >= shard {
            return self.shard_grad(worker, x);
        }
        let batch = rng::stream(round_seed, &[rng::TAG_BATCH, worker as u64])
            .random_range(0..self.batches_per_worker());
        self.batch_grad(worker, x, batch)
    }

    fn smoothness(&self) -> Smoothness {
        self.smoothness.clone()
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }
}

/// `A^T A / n` for a row-major `n x d` matrix.
fn gram(a: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut g = vec![0.0; d * d];
    for row in 0..n {
        let r = &a[row * d..(row + 1) * d];
        for p in 0..d {
            let rp = r[p];
            if rp == 0.0 {
                continue;
            }
            for q in 0..d {
                g[p * d + q] += rp * r[q];
            }
        }
    }
    for v in &mut g {
        *v /= n as f64;
    }
    g
}

/// Largest eigenvalue of a symmetric PSD `d x d` matrix.
fn power_iteration(m: &[f64], d: usize, tol: f64) -> f64 {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 1e-3 * i as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let w: Vec<f64> = (0..d)
            .map(|p| m[p * d..(p + 1) * d].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            return next;
        }
        lambda = next;
    }
    lambda
}
