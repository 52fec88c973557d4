//! Layer-wise budget allocation.
//!
//! Each layer offers a few compression choices, each with a bit cost and the
//! squared error it leaves behind. We pick one choice per layer minimizing the
//! summed error subject to the summed cost fitting in the budget. This is a
//! multiple-choice knapsack; [`allocate_dp`] solves it over a discretized cost
//! axis (`D` bins of width `budget / D`, costs rounded up so any selection
//! the DP accepts also fits the real budget), and [`allocate_bruteforce`]
//! enumerates every selection as a test oracle.

use serde::{Deserialize, Serialize};

use crate::compressors::{self, CompressorSpec, DEFAULT_VALUE_BITS};
use crate::error::{Error, Result};
use crate::tensor::{sq_dist, LayeredVector};

pub const DEFAULT_DISCRETIZATION: usize = 1000;

/// Largest selection count `allocate_bruteforce` will enumerate.
pub const BRUTEFORCE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Entries kept (compression parameter); informational for the solver.
    #[serde(default)]
    pub k: usize,
    pub cost_bits: u64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub layers: Vec<Vec<Candidate>>,
    pub budget_bits: f64,
    #[serde(default = "default_discretization")]
    pub discretization: usize,
}

fn default_discretization() -> usize {
    DEFAULT_DISCRETIZATION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Index into each layer's candidate list.
    pub choices: Vec<usize>,
    pub total_error: f64,
    pub total_cost_bits: u64,
}

impl AllocationProblem {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::usage("allocation problem has no layers"));
        }
        if self.discretization == 0 {
            return Err(Error::usage("discretization factor must be >= 1"));
        }
        if !(self.budget_bits > 0.0 && self.budget_bits.is_finite()) {
            return Err(Error::usage(format!("budget {} must be positive", self.budget_bits)));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.is_empty() {
                return Err(Error::usage(format!("layer {i} has no candidates")));
            }
            for c in layer {
                if c.cost_bits == 0 {
                    return Err(Error::usage(format!("layer {i} has a zero-cost candidate")));
                }
                if !(c.error >= 0.0 && c.error.is_finite()) {
                    return Err(Error::usage(format!("layer {i} has invalid error {}", c.error)));
                }
            }
        }
        let cheapest: u64 = self
            .layers
            .iter()
            .map(|l| l.iter().map(|c| c.cost_bits).min().unwrap_or(0))
            .sum();
        if cheapest as f64 > self.budget_bits {
            return Err(Error::Allocation(format!(
                "cheapest selection costs {cheapest} bits, budget is {}",
                self.budget_bits
            )));
        }
        Ok(())
    }

    /// Cost in budget bins, rounded up.
    pub fn bins(&self, cost_bits: u64) -> usize {
        let b = (cost_bits as f64 * self.discretization as f64 / self.budget_bits).ceil();
        if b > self.discretization as f64 {
            usize::MAX
        } else {
            b as usize
        }
    }

    fn totals(&self, choices: &[usize]) -> (f64, u64) {
        let mut err = 0.0;
        let mut cost = 0u64;
        for (layer, &j) in self.layers.iter().zip(choices) {
            err += layer[j].error;
            cost += layer[j].cost_bits;
        }
        (err, cost)
    }

    fn allocation(&self, choices: Vec<usize>) -> Allocation {
        let (total_error, total_cost_bits) = self.totals(&choices);
        Allocation {
            choices,
            total_error,
            total_cost_bits,
        }
    }
}

/// Squared error left by compressing `u_layer` with `spec`.
pub fn layer_error(u_layer: &[f64], spec: &CompressorSpec) -> Result<f64> {
    let c = compressors::compress(spec, u_layer, DEFAULT_VALUE_BITS)?;
    Ok(sq_dist(&c.payload.to_dense(u_layer.len()), u_layer))
}

/// Top-K error for every `k` in `0..=d`: entry `k` is the sum of the squares
/// dropped when the `k` largest-magnitude entries are kept.
fn top_k_error_profile(u_layer: &[f64]) -> Vec<f64> {
    let mut sq: Vec<f64> = u_layer.iter().map(|x| x * x).collect();
    sq.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut out = vec![0.0; sq.len() + 1];
    for k in (0..sq.len()).rev() {
        out[k] = out[k + 1] + sq[k];
    }
    out
}

/// The default ratio grid `{0.01, 0.03, ..., 0.99}`.
pub fn default_ratio_grid() -> Vec<f64> {
    (0..50).map(|k| 0.01 + 0.02 * k as f64).collect()
}

/// `max(1, round(ratio * dim))`, capped at `dim`.
pub fn k_for_ratio(ratio: f64, dim: usize) -> usize {
    ((ratio * dim as f64).round() as usize).clamp(1, dim)
}

/// Candidate tables for Top-K at the given ratios. Ratios mapping to the same
/// `k` on a layer produce a single candidate.
pub fn build_tables(
    u: &LayeredVector,
    ratio_grid: &[f64],
    budget_bits: f64,
    discretization: usize,
    value_bits: u32,
) -> Result<AllocationProblem> {
    if let Some(r) = ratio_grid.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::usage(format!("compression ratio {r} not in (0, 1]")));
    }
    let p = u.partition();
    let ks: Vec<Vec<usize>> = (0..p.num_layers())
        .map(|i| {
            ratio_grid
                .iter()
                .map(|&r| k_for_ratio(r, p.layer_dim(i)))
                .collect()
        })
        .collect();
    build_tables_for_ks(u, &ks, budget_bits, discretization, value_bits)
}

/// Candidate tables for explicit per-layer Top-K sizes (deduplicated, ascending).
pub fn build_tables_for_ks(
    u: &LayeredVector,
    ks: &[Vec<usize>],
    budget_bits: f64,
    discretization: usize,
    value_bits: u32,
) -> Result<AllocationProblem> {
    let p = u.partition();
    if ks.len() != p.num_layers() {
        return Err(Error::usage("one k list per layer required"));
    }
    let layers = ks
        .iter()
        .enumerate()
        .map(|(i, layer_ks)| {
            let d = p.layer_dim(i);
            let mut layer_ks: Vec<usize> = layer_ks.iter().map(|&k| k.clamp(1, d)).collect();
            layer_ks.sort_unstable();
            layer_ks.dedup();
            let profile = top_k_error_profile(u.layer(i));
            layer_ks
                .into_iter()
                .map(|k| Candidate {
                    k,
                    cost_bits: compressors::bit_cost(&CompressorSpec::top_k(k), d, value_bits),
                    error: profile[k],
                })
                .collect()
        })
        .collect();
    Ok(AllocationProblem {
        layers,
        budget_bits,
        discretization,
    })
}

/// DP solution plus the number of inner-loop relaxations it performed.
pub fn allocate_dp_counted(problem: &AllocationProblem) -> Result<(Allocation, u64)> {
    problem.validate()?;
    let n = problem.layers.len();
    let width = problem.discretization + 1;
    let bins: Vec<Vec<usize>> = problem
        .layers
        .iter()
        .map(|l| l.iter().map(|c| problem.bins(c.cost_bits)).collect())
        .collect();

    // table[i][j]: least error over layers 0..=i with discretized cost exactly j
    let mut table = vec![vec![f64::INFINITY; width]; n];
    let mut pred = vec![vec![usize::MAX; width]; n];
    let mut ops = 0u64;

    for (c, cand) in problem.layers[0].iter().enumerate() {
        let b = bins[0][c];
        ops += 1;
        if b < width && cand.error < table[0][b] {
            table[0][b] = cand.error;
            pred[0][b] = c;
        }
    }
    for i in 1..n {
        let (done, rest) = table.split_at_mut(i);
        let prev = &done[i - 1];
        let row = &mut rest[0];
        for (c, cand) in problem.layers[i].iter().enumerate() {
            let b = bins[i][c];
            if b >= width {
                continue;
            }
            for j in b..width {
                ops += 1;
                let t = prev[j - b] + cand.error;
                if t < row[j] {
                    row[j] = t;
                    pred[i][j] = c;
                }
            }
        }
    }

    let last = &table[n - 1];
    let mut order: Vec<usize> = (0..width).filter(|&j| last[j].is_finite()).collect();
    order.sort_by(|&a, &b| last[a].total_cmp(&last[b]).then(a.cmp(&b)));

    for end in order {
        let mut choices = vec![0; n];
        let mut j = end;
        for i in (0..n).rev() {
            let c = pred[i][j];
            choices[i] = c;
            j -= bins[i][c];
        }
        let alloc = problem.allocation(choices);
        if alloc.total_cost_bits as f64 <= problem.budget_bits {
            return Ok((alloc, ops));
        }
    }
    // Ceiling rounding can push even the cheapest selection past D bins
    // while its true cost still fits.
    let cheapest: Vec<usize> = problem
        .layers
        .iter()
        .map(|l| {
            (0..l.len())
                .min_by(|&a, &b| {
                    l[a].cost_bits
                        .cmp(&l[b].cost_bits)
                        .then(l[a].error.total_cmp(&l[b].error))
                })
                .unwrap_or(0)
        })
        .collect();
    let alloc = problem.allocation(cheapest);
    if alloc.total_cost_bits as f64 <= problem.budget_bits {
        return Ok((alloc, ops));
    }
    Err(Error::Allocation(format!(
        "no selection fits the budget of {} bits",
        problem.budget_bits
    )))
}

pub fn allocate_dp(problem: &AllocationProblem) -> Result<Allocation> {
    allocate_dp_counted(problem).map(|(a, _)| a)
}

/// Exhaustive search: least error, then least cost, then lexicographically
/// smallest choice vector.
pub fn allocate_bruteforce(problem: &AllocationProblem) -> Result<Allocation> {
    problem.validate()?;
    let size = problem
        .layers
        .iter()
        .try_fold(1u64, |acc, l| acc.checked_mul(l.len() as u64))
        .filter(|&s| s <= BRUTEFORCE_LIMIT)
        .ok_or_else(|| Error::usage("instance too large for exhaustive search"))?;

    let n = problem.layers.len();
    let mut choices = vec![0usize; n];
    let mut best: Option<Allocation> = None;
    for _ in 0..size {
        let (err, cost) = problem.totals(&choices);
        if cost as f64 <= problem.budget_bits {
            let better = match &best {
                None => true,
                Some(b) => err < b.total_error || (err == b.total_error && cost < b.total_cost_bits),
            };
            if better {
                best = Some(Allocation {
                    choices: choices.clone(),
                    total_error: err,
                    total_cost_bits: cost,
                });
            }
        }
        // odometer, last layer fastest
        for i in (0..n).rev() {
            choices[i] += 1;
            if choices[i] < problem.layers[i].len() {
                break;
            }
            choices[i] = 0;
        }
    }
    best.ok_or_else(|| Error::Allocation("no feasible selection".into()))
}
