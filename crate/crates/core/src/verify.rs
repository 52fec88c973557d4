//! Self-checks behind `kimad verify`: randomized property suites and the
//! theory inequalities at a size that runs in a few seconds.

use rand::Rng;

use crate::allocator::{allocate_bruteforce, allocate_dp, layer_error, AllocationProblem, Candidate};
use crate::bandwidth::BandwidthTrace;
use crate::ef21::theory::{max_stepsize, run_recursion, TheoryParams};
use crate::error::Result;
use crate::objectives::{Objective, QuadraticObjective};
use crate::records::{to_records, write_records};
use crate::rng;
use crate::simulator::{
    run, select_compressor, Simulation, DownlinkMode, EstimatorMode, LinkSpec, Mode, ObjectiveSpec, SelectionParams, SimConfig,
    StepSize, TComp, UHatInit,
};
use crate::tensor::{LayerPartition, LayeredVector};

const TAG_VERIFY: u64 = 0x7665_7269;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(u64) -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 6] = [
    ("allocator matches exhaustive search", allocator_oracle),
    ("budgets are respected", budget_compliance),
    ("theory inequalities hold", theory_inequalities),
    ("identity compression equals gradient descent", gd_equivalence),
    ("kimad+ error never exceeds kimad", kimad_plus_dominance),
    ("runs are deterministic", determinism),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let (passed, detail) = check(seed).unwrap_or_else(|e| (false, e.to_string()));
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn random_sizes(r: &mut impl Rng, dim: usize, max_layers: usize) -> Vec<usize> {
    let n = r.random_range(1..=max_layers);
    let mut cuts: Vec<usize> = rand::seq::index::sample(r, dim - 1, n - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    cuts.push(dim);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let s = c - prev;
            prev = c;
            s
        })
        .collect()
}

fn allocator_oracle(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[TAG_VERIFY, 1]);
    let problems = 200;
    let mut mismatches = 0;
    for _ in 0..problems {
        // costs are whole multiples of the bin width, so the DP is exact
        let unit = r.random_range(1..=50u64);
        let layers: Vec<Vec<Candidate>> = (0..r.random_range(1..=4))
            .map(|_| {
                (0..r.random_range(1..=5))
                    .map(|_| Candidate {
                        k: 0,
                        cost_bits: unit * r.random_range(1..=400u64),
                        error: r.random_range(0.0..10.0),
                    })
                    .collect()
            })
            .collect();
        let cheapest: u64 = layers.iter().map(|l| l.iter().map(|c| c.cost_bits).min().unwrap_or(0)).sum();
        let bins = r.random_range(cheapest / unit..=1000.max(cheapest / unit));
        let p = AllocationProblem {
            layers,
            budget_bits: (unit * bins.max(1)) as f64,
            discretization: bins.max(1) as usize,
        };
        if p.validate().is_err() {
            continue;
        }
        if allocate_dp(&p)?.total_error != allocate_bruteforce(&p)?.total_error {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches in {problems} problems")))
}

fn budget_compliance(seed: u64) -> Result<(bool, String)> {
    let link = LinkSpec::Trace(BandwidthTrace::Sinusoidal {
        eta: 4e4,
        theta: 0.3,
        delta: 5e3,
        noise_std: 2e3,
        noise_dt: 0.5,
        seed: 0,
    });
    let base = SimConfig {
        objective: ObjectiveSpec::Quadratic { layer_sizes: vec![10, 20, 30], a_min: 1.0, a_max: 10.0 },
        workers: 3,
        uplink: link.clone(),
        downlink: link,
        downlink_mode: DownlinkMode::Compressed,
        t_comp: TComp::Seconds(0.2),
        alpha_down: 2.0,
        rounds: 300,
        seed,
        ..SimConfig::default()
    };
    let mut over_budget = 0;
    for mode in [Mode::Kimad, Mode::KimadPlus] {
        let m = run(SimConfig { mode, ..base.clone() })?;
        over_budget += m
            .iter()
            .skip(1)
            .flat_map(|r| r.bits_up.iter().zip(&r.uplink_budget_bits).zip(&r.clamped))
            .filter(|((bits, budget), clamped)| !**clamped && **bits as f64 > **budget)
            .count();
    }
    let m = run(SimConfig { estimator: EstimatorMode::Oracle, ..base })?;
    let overruns = m.iter().filter(|r| r.overrun).count();
    Ok((
        over_budget == 0 && overruns == 0,
        format!("{over_budget} messages over budget, {overruns} overruns with exact estimates"),
    ))
}

fn theory_inequalities(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[TAG_VERIFY, 3]);
    let runs = 5;
    let mut failures = 0;
    for i in 0..runs {
        let sizes = random_sizes(&mut r, 30, 5);
        let part = LayerPartition::from_sizes(&sizes)?;
        let f = QuadraticObjective::log_uniform(part.clone(), 1.0, 100.0, rng::derive_seed(seed, &[TAG_VERIFY, 3, i]))?;
        let ks: Vec<usize> = sizes.iter().map(|&d| r.random_range(1..=d)).collect();
        let alpha = ks.iter().zip(&sizes).map(|(&k, &d)| k as f64 / d as f64).collect();
        let sm = f.smoothness();
        let p = TheoryParams::new(alpha, sm.layers, sm.global)?;
        let gamma = max_stepsize(&p)?;
        let x0 = LayeredVector::new((0..30).map(|_| r.random_range(-1.0..1.0)).collect(), part.clone())?;
        let rep = run_recursion(&f, &x0, &LayeredVector::zeros(&part), &ks, &p, gamma, 2000)?;
        if !rep.bound_holds() || rep.contraction_violations > 0 || rep.descent_violations > 0 {
            failures += 1;
        }
    }
    Ok((failures == 0, format!("{failures} of {runs} runs violated a bound")))
}

fn gd_equivalence(seed: u64) -> Result<(bool, String)> {
    let sizes = vec![5, 10, 15];
    let gamma = 0.01;
    let c = SimConfig {
        mode: Mode::Uncompressed,
        objective: ObjectiveSpec::Quadratic { layer_sizes: sizes.clone(), a_min: 1.0, a_max: 50.0 },
        step_size: StepSize::Constant(gamma),
        u_hat_init: UHatInit::Gradient,
        rounds: 100,
        seed,
        ..SimConfig::default()
    };
    let part = LayerPartition::from_sizes(&sizes)?;
    let f = QuadraticObjective::log_uniform(part, 1.0, 50.0, seed)?;
    let sim = Simulation::with_objective(c, Box::new(f.clone()))?;
    let mut x = sim.server().x.clone();
    let m = sim.run()?;
    let mut mismatched = 0;
    for row in m.iter().skip(1) {
        let g = f.grad(&x)?;
        let next: Vec<f64> = x.values().iter().zip(g.values()).map(|(xi, gi)| xi - gamma * gi).collect();
        x = LayeredVector::new(next, x.partition().clone())?;
        if f.value(&x)?.to_bits() != row.loss.to_bits() {
            mismatched += 1;
        }
    }
    Ok((mismatched == 0, format!("{mismatched} of {} rounds differ", m.len() - 1)))
}

fn kimad_plus_dominance(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[TAG_VERIFY, 5]);
    let params = SelectionParams::from_config(&SimConfig::default());
    let trials = 200;
    let mut worse = 0;
    for _ in 0..trials {
        let sizes = random_sizes(&mut r, 60, 4);
        let part = LayerPartition::from_sizes(&sizes)?;
        let scales: Vec<f64> = sizes.iter().map(|_| 10f64.powf(r.random_range(-2.0..2.0))).collect();
        let values = (0..part.num_layers())
            .flat_map(|i| (0..part.layer_dim(i)).map(|_| scales[i] * r.random_range(-1.0..1.0)).collect::<Vec<_>>())
            .collect();
        let u = LayeredVector::new(values, part.clone())?;
        let budget = r.random_range(200.0..3000.0);
        let error = |mode| -> Result<Option<f64>> {
            let sel = select_compressor(mode, budget, &u, &params, 0)?;
            if sel.clamped {
                return Ok(None);
            }
            let mut e = 0.0;
            for (i, spec) in sel.specs.iter().enumerate() {
                e += layer_error(u.layer(i), spec)?;
            }
            Ok(Some(e))
        };
        if let (Some(a), Some(b)) = (error(Mode::Kimad)?, error(Mode::KimadPlus)?) {
            if b > a * (1.0 + 1e-12) {
                worse += 1;
            }
        }
    }
    Ok((worse == 0, format!("{worse} of {trials} selections worse than kimad")))
}

fn determinism(seed: u64) -> Result<(bool, String)> {
    let c = SimConfig {
        mode: Mode::KimadPlus,
        workers: 2,
        objective: ObjectiveSpec::Lsq(crate::objectives::LsqSpec {
            layer_sizes: vec![8, 16],
            samples: 64,
            batch_size: 8,
            ..Default::default()
        }),
        uplink: LinkSpec::Trace(BandwidthTrace::Sinusoidal {
            eta: 5e3,
            theta: 0.5,
            delta: 1e3,
            noise_std: 300.0,
            noise_dt: 1.0,
            seed: 0,
        }),
        t_comp: TComp::Seconds(0.3),
        rounds: 50,
        seed,
        ..SimConfig::default()
    };
    let csv = |c: SimConfig| -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_records(&mut buf, &to_records(&run(c)?))?;
        Ok(buf)
    };
    let same = csv(c.clone())? == csv(c)?;
    Ok((same, if same { "identical records".into() } else { "records differ".into() }))
}
