//! Per-round CSV records and the run summary.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{RoundMetrics, SimConfig};

pub const COLUMNS: [&str; 12] = [
    "round",
    "sim_time_s",
    "loss",
    "weighted_grad_sq",
    "eps_k",
    "budget_bits_mean",
    "bits_up_total",
    "bits_down_total",
    "bw_true_mean",
    "bw_est_mean",
    "k_mean",
    "overrun",
];

/// One row of `rounds.csv`. Per-worker quantities are averaged (`*_mean`,
/// `eps_k`) or summed (`*_total`); `k_mean` is the mean over workers of the
/// entries sent across all layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub sim_time_s: f64,
    pub loss: f64,
    pub weighted_grad_sq: f64,
    pub eps_k: f64,
    pub budget_bits_mean: f64,
    pub bits_up_total: u64,
    pub bits_down_total: u64,
    pub bw_true_mean: f64,
    pub bw_est_mean: f64,
    pub k_mean: f64,
    pub overrun: u8,
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        0.0
    } else {
        v.sum::<f64>() / n as f64
    }
}

impl From<&RoundMetrics> for RoundRecord {
    fn from(m: &RoundMetrics) -> Self {
        Self {
            round: m.round,
            sim_time_s: m.sim_time_s,
            loss: m.loss,
            weighted_grad_sq: m.weighted_grad_sq,
            eps_k: m.eps_mean(),
            budget_bits_mean: mean(m.uplink_budget_bits.iter().copied()),
            bits_up_total: m.bits_up.iter().sum(),
            bits_down_total: m.bits_down.iter().sum(),
            bw_true_mean: mean(m.bw_true_up.iter().copied()),
            bw_est_mean: mean(m.bw_est_up.iter().copied()),
            k_mean: mean(m.ks.iter().map(|ks| ks.iter().sum::<usize>() as f64)),
            overrun: m.overrun as u8,
        }
    }
}

pub fn to_records(metrics: &[RoundMetrics]) -> Vec<RoundRecord> {
    metrics.iter().map(RoundRecord::from).collect()
}

pub fn write_records<W: Write>(out: W, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(COLUMNS).map_err(|e| Error::Io(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_file(path: &Path, records: &[RoundRecord]) -> Result<()> {
    write_records(File::create(path)?, records)
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RoundRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::input(1, e.to_string()))?.clone();
    if let Some(missing) = COLUMNS.iter().find(|c| !header.iter().any(|h| h == **c)) {
        return Err(Error::input(1, format!("missing column '{missing}'")));
    }
    if header.len() != COLUMNS.len() {
        return Err(Error::input(1, format!("expected {} columns, found {}", COLUMNS.len(), header.len())));
    }
    r.deserialize()
        .map(|row| {
            row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                Error::input(line, e.to_string())
            })
        })
        .collect()
}

pub fn read_records_file(path: &Path) -> Result<Vec<RoundRecord>> {
    read_records(File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub seed: u64,
    pub workers: usize,
    pub rounds: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub total_sim_time_s: f64,
    pub mean_step_time_s: f64,
    pub total_bits_up: u64,
    pub total_bits_down: u64,
    /// Messages sent at `k = 1` although the budget could not pay for them.
    pub clamped_messages: u64,
    pub overrun_rounds: u64,
}

pub fn summarize(config: &SimConfig, metrics: &[RoundMetrics]) -> Summary {
    let first = metrics.first();
    let last = metrics.last();
    let rounds = last.map_or(0, |m| m.round);
    let total_time = last.map_or(0.0, |m| m.sim_time_s);
    Summary {
        mode: config.mode.name().to_string(),
        seed: config.seed,
        workers: config.workers,
        rounds,
        initial_loss: first.map_or(f64::NAN, |m| m.loss),
        final_loss: last.map_or(f64::NAN, |m| m.loss),
        total_sim_time_s: total_time,
        mean_step_time_s: if rounds == 0 { 0.0 } else { total_time / rounds as f64 },
        total_bits_up: metrics.iter().flat_map(|m| &m.bits_up).sum(),
        total_bits_down: metrics.iter().flat_map(|m| &m.bits_down).sum(),
        clamped_messages: metrics.iter().flat_map(|m| &m.clamped).filter(|c| **c).count() as u64,
        overrun_rounds: metrics.iter().filter(|m| m.overrun).count() as u64,
    }
}

pub fn write_summary_file(path: &Path, summary: &Summary) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, summary).map_err(|e| Error::Io(e.to_string()))?;
    f.write_all(b"\n")?;
    Ok(())
}
