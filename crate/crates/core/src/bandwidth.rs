//! Link bandwidth: ground-truth traces and the per-endpoint estimator.
//!
//! All rates are in bits per second and all times in simulated seconds.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Sinusoidal noise is clamped to this many standard deviations.
pub const NOISE_CLAMP_SIGMAS: f64 = 3.0;

/// Floor applied to a noisy sinusoid, as a fraction of its offset.
const MIN_RATE_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthTrace {
    /// `eta * sin(theta * t)^2 + delta`, plus Gaussian noise that is
    /// piecewise constant over buckets of `noise_dt` seconds.
    Sinusoidal {
        eta: f64,
        theta: f64,
        delta: f64,
        noise_std: f64,
        noise_dt: f64,
        seed: u64,
    },
    /// `low` on even periods, `high` on odd ones.
    TwoLevel { low: f64, high: f64, period: f64 },
    Constant(f64),
    /// Linear interpolation over `(time, rate)` samples; held flat past both ends.
    Samples(Vec<(f64, f64)>),
}

impl BandwidthTrace {
    pub fn sinusoidal(eta: f64, theta: f64, delta: f64) -> Result<Self> {
        Self::Sinusoidal {
            eta,
            theta,
            delta,
            noise_std: 0.0,
            noise_dt: 1.0,
            seed: 0,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        let ok = match &self {
            BandwidthTrace::Sinusoidal {
                eta,
                theta,
                delta,
                noise_std,
                noise_dt,
                ..
            } => {
                *eta >= 0.0
                    && theta.is_finite()
                    && *delta > 0.0
                    && *noise_std >= 0.0
                    && *noise_dt > 0.0
                    && eta.is_finite()
                    && delta.is_finite()
            }
            BandwidthTrace::TwoLevel { low, high, period } => {
                *low > 0.0 && *high > 0.0 && *period > 0.0
            }
            BandwidthTrace::Constant(b) => *b > 0.0 && b.is_finite(),
            BandwidthTrace::Samples(s) => {
                !s.is_empty()
                    && s.iter().all(|&(_, b)| b > 0.0 && b.is_finite())
                    && s.windows(2).all(|w| w[1].0 > w[0].0)
            }
        };
        if ok {
            Ok(self)
        } else {
            Err(Error::config(format!("invalid bandwidth trace {self:?}")))
        }
    }

    /// Same pattern with an independent noise stream (no-op for noiseless kinds).
    pub fn with_noise_seed(&self, seed: u64) -> Self {
        match self {
            BandwidthTrace::Sinusoidal {
                eta,
                theta,
                delta,
                noise_std,
                noise_dt,
                ..
            } => BandwidthTrace::Sinusoidal {
                eta: *eta,
                theta: *theta,
                delta: *delta,
                noise_std: *noise_std,
                noise_dt: *noise_dt,
                seed,
            },
            other => other.clone(),
        }
    }

    /// True rate at `time_s` (negative times are treated as 0).
    pub fn at(&self, time_s: f64) -> f64 {
        let t = time_s.max(0.0);
        match self {
            BandwidthTrace::Sinusoidal {
                noise_std,
                noise_dt,
                seed,
                delta,
                ..
            } => {
                let base = self.base_at(t);
                if *noise_std == 0.0 {
                    return base;
                }
                let bucket = (t / noise_dt).floor() as u64;
                let mut r = rng::stream(*seed, &[rng::TAG_LINK_NOISE, bucket]);
                let normal = Normal::new(0.0, *noise_std).expect("validated std");
                let limit = NOISE_CLAMP_SIGMAS * noise_std;
                let noise = normal.sample(&mut r).clamp(-limit, limit);
                (base + noise).max(delta * MIN_RATE_FRACTION)
            }
            _ => self.base_at(t),
        }
    }

    /// Noise-free pattern value.
    pub fn base_at(&self, time_s: f64) -> f64 {
        let t = time_s.max(0.0);
        match self {
            BandwidthTrace::Sinusoidal {
                eta, theta, delta, ..
            } => {
                let s = (theta * t).sin();
                eta * s * s + delta
            }
            BandwidthTrace::TwoLevel { low, high, period } => {
                if ((t / period).floor() as u64).is_multiple_of(2) {
                    *low
                } else {
                    *high
                }
            }
            BandwidthTrace::Constant(b) => *b,
            BandwidthTrace::Samples(s) => interpolate(s, t),
        }
    }

    /// Time average of the noise-free pattern over `[0, window_s]` (midpoint rule).
    pub fn average(&self, window_s: f64) -> f64 {
        if window_s <= 0.0 {
            return self.base_at(0.0);
        }
        const STEPS: usize = 10_000;
        let h = window_s / STEPS as f64;
        (0..STEPS)
            .map(|i| self.base_at((i as f64 + 0.5) * h))
            .sum::<f64>()
            / STEPS as f64
    }

    /// Seconds to move `bits` starting at `start_s`, with the rate frozen at the start.
    pub fn transfer_duration(&self, bits: u64, start_s: f64) -> f64 {
        bits as f64 / self.at(start_s)
    }
}

fn interpolate(samples: &[(f64, f64)], t: f64) -> f64 {
    let first = samples[0];
    let last = samples[samples.len() - 1];
    if t <= first.0 {
        return first.1;
    }
    if t >= last.0 {
        return last.1;
    }
    let hi = samples.partition_point(|&(ts, _)| ts <= t);
    let (t0, b0) = samples[hi - 1];
    let (t1, b1) = samples[hi];
    b0 + (b1 - b0) * (t - t0) / (t1 - t0)
}

/// Parsed contents of a trace file.
///
/// Lines are `time_seconds,bits_per_second`, optionally prefixed by a
/// `worker_id,` column. Blank lines and lines starting with `#` are skipped.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceFile {
    Shared(BandwidthTrace),
    PerWorker(BTreeMap<usize, BandwidthTrace>),
}

impl TraceFile {
    pub fn trace_for(&self, worker: usize) -> Result<BandwidthTrace> {
        match self {
            TraceFile::Shared(t) => Ok(t.clone()),
            TraceFile::PerWorker(m) => m
                .get(&worker)
                .cloned()
                .ok_or_else(|| Error::config(format!("trace file has no samples for worker {worker}"))),
        }
    }
}

pub fn ingest_trace_file(path: &Path) -> Result<TraceFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_trace(&text)
}

pub fn parse_trace(text: &str) -> Result<TraceFile> {
    let mut with_worker: Option<bool> = None;
    let mut series: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    let mut lines_seen = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        lines_seen = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let has_worker = match fields.len() {
            2 => false,
            3 => true,
            n => {
                return Err(Error::input(
                    line_no,
                    format!("expected 2 or 3 comma-separated fields, found {n}"),
                ))
            }
        };
        match with_worker {
            None => with_worker = Some(has_worker),
            Some(w) if w != has_worker => {
                return Err(Error::input(line_no, "inconsistent column count"))
            }
            _ => {}
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::input(line_no, format!("invalid {what} {s:?}")))
        };
        let (worker, t, b) = if has_worker {
            let w = fields[0]
                .parse::<usize>()
                .map_err(|_| Error::input(line_no, format!("invalid worker id {:?}", fields[0])))?;
            (w, num(fields[1], "time")?, num(fields[2], "bandwidth")?)
        } else {
            (0, num(fields[0], "time")?, num(fields[1], "bandwidth")?)
        };
        if t < 0.0 {
            return Err(Error::input(line_no, "negative timestamp"));
        }
        if b <= 0.0 {
            return Err(Error::input(line_no, "bandwidth must be positive"));
        }
        let s = series.entry(worker).or_default();
        if let Some(&(prev, _)) = s.last() {
            if t <= prev {
                return Err(Error::input(line_no, "timestamps must be strictly increasing"));
            }
        }
        s.push((t, b));
    }
    if series.is_empty() {
        return Err(Error::input(lines_seen.max(1), "trace file has no samples"));
    }
    if with_worker == Some(true) {
        Ok(TraceFile::PerWorker(
            series
                .into_iter()
                .map(|(w, s)| (w, BandwidthTrace::Samples(s)))
                .collect(),
        ))
    } else {
        let s = series.into_values().next().expect("one series");
        Ok(TraceFile::Shared(BandwidthTrace::Samples(s)))
    }
}

/// Exponentially weighted moving average of observed transfer throughput.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthEstimator {
    lambda: f64,
    estimate: Option<f64>,
    prior: Option<f64>,
    observations: u64,
}

pub const DEFAULT_EWMA_LAMBDA: f64 = 0.3;

impl BandwidthEstimator {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::config(format!("EWMA lambda {lambda} not in (0, 1]")));
        }
        Ok(Self {
            lambda,
            estimate: None,
            prior: None,
            observations: 0,
        })
    }

    /// Estimator that reports `prior` until its first observation.
    pub fn with_prior(lambda: f64, prior: f64) -> Result<Self> {
        if !(prior > 0.0 && prior.is_finite()) {
            return Err(Error::config(format!("bandwidth prior {prior} must be positive")));
        }
        let mut e = Self::new(lambda)?;
        e.prior = Some(prior);
        Ok(e)
    }

    pub fn observe(&mut self, bits: f64, duration_s: f64) -> Result<()> {
        if !(bits > 0.0 && duration_s > 0.0) {
            return Err(Error::usage(format!(
                "observation needs positive bits and duration, got {bits} bits in {duration_s} s"
            )));
        }
        let sample = bits / duration_s;
        self.estimate = Some(match self.estimate {
            None => sample,
            Some(prev) => self.lambda * sample + (1.0 - self.lambda) * prev,
        });
        self.observations += 1;
        Ok(())
    }

    pub fn estimate(&self) -> Result<f64> {
        self.estimate
            .or(self.prior)
            .ok_or_else(|| Error::usage("bandwidth estimator has no observation and no prior"))
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}
