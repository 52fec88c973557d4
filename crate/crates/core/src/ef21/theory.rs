//! Convergence constants for layer-wise EF21 and a single-node runner that
//! checks the per-step inequalities behind the rate.

use crate::compressors::CompressorSpec;
use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::tensor::LayeredVector;

use super::{apply_update, encode_update, layerwise_gd_step};

/// `(theta, beta)` for contraction `alpha` and Young parameter `zeta`.
pub fn theta_beta(alpha: f64, zeta: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("alpha {alpha} outside (0, 1]")));
    }
    if !(zeta > 0.0 && zeta.is_finite()) {
        return Err(Error::Parameter(format!("zeta {zeta} must be positive")));
    }
    if alpha == 1.0 {
        return Ok((1.0, 0.0));
    }
    let theta = 1.0 - (1.0 - alpha) * (1.0 + zeta);
    if theta <= 0.0 {
        return Err(Error::Parameter(format!(
            "theta = {theta} <= 0 for alpha {alpha}, zeta {zeta}"
        )));
    }
    Ok((theta, (1.0 - alpha) * (1.0 + 1.0 / zeta)))
}

pub fn default_zeta(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!(
            "default zeta needs alpha in (0, 1), got {alpha}"
        )));
    }
    Ok(1.0 / (1.0 - alpha).sqrt() - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryParams {
    pub alpha: Vec<f64>,
    pub zeta: Vec<f64>,
    pub delta: Vec<f64>,
    pub w: Vec<f64>,
    pub l_layers: Vec<f64>,
    pub l_global: f64,
}

impl TheoryParams {
    /// Unit `delta` and `w`, default `zeta` (1 where `alpha = 1`).
    pub fn new(alpha: Vec<f64>, l_layers: Vec<f64>, l_global: f64) -> Result<Self> {
        let zeta = alpha
            .iter()
            .map(|&a| if a == 1.0 { Ok(1.0) } else { default_zeta(a) })
            .collect::<Result<Vec<_>>>()?;
        let n = alpha.len();
        let p = Self {
            alpha,
            zeta,
            delta: vec![1.0; n],
            w: vec![1.0; n],
            l_layers,
            l_global,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn layers(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.alpha.len();
        if n == 0 {
            return Err(Error::Parameter("no layers".into()));
        }
        if [self.zeta.len(), self.delta.len(), self.w.len(), self.l_layers.len()]
            .iter()
            .any(|&m| m != n)
        {
            return Err(Error::Parameter("per-layer parameter lengths differ".into()));
        }
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !positive(&self.delta) || !positive(&self.w) {
            return Err(Error::Parameter("delta and w must be positive".into()));
        }
        if !positive(&self.l_layers) || !(self.l_global > 0.0 && self.l_global.is_finite()) {
            return Err(Error::Parameter("smoothness constants must be positive".into()));
        }
        self.theta_beta().map(|_| ())
    }

    pub fn theta_beta(&self) -> Result<Vec<(f64, f64)>> {
        self.alpha
            .iter()
            .zip(&self.zeta)
            .map(|(&a, &z)| theta_beta(a, z))
            .collect()
    }

    /// `min_i theta_i`.
    pub fn theta(&self) -> Result<f64> {
        Ok(self.theta_beta()?.iter().map(|t| t.0).fold(f64::INFINITY, f64::min))
    }

    fn max_w_over_delta(&self) -> f64 {
        self.w.iter().zip(&self.delta).map(|(w, d)| w / d).fold(0.0, f64::max)
    }
}

/// Largest `gamma` with `A_i gamma^2 + B_i gamma <= 1` for every layer.
pub fn max_stepsize(p: &TheoryParams) -> Result<f64> {
    p.validate()?;
    let tb = p.theta_beta()?;
    let theta = p.theta()?;
    let max_db = p
        .delta
        .iter()
        .zip(&tb)
        .map(|(d, (_, b))| d * b)
        .fold(0.0, f64::max);
    let common = p.max_w_over_delta() * max_db * p.l_global * p.l_global / theta;
    let gamma = (0..p.layers())
        .map(|i| {
            let a = p.w[i] * common;
            let b = p.l_layers[i] * p.w[i];
            // positive root of a g^2 + b g - 1, in a form that is exact at a = 0
            2.0 / (b + (b * b + 4.0 * a).sqrt())
        })
        .fold(f64::INFINITY, f64::min);
    Ok(gamma)
}

/// `sum_i delta_i ||u_hat_i - grad_i||^2`.
pub fn gap_metric(u_hat: &LayeredVector, grad: &LayeredVector, delta: &[f64]) -> Result<f64> {
    let diff = u_hat.sub(grad)?;
    if delta.len() != diff.partition().num_layers() {
        return Err(Error::usage("one delta per layer required"));
    }
    Ok(delta
        .iter()
        .enumerate()
        .map(|(i, d)| d * diff.layer_sq_norm(i))
        .sum())
}

/// Right-hand side of the rate: `2 (f0 - f_inf) / (gamma K) + max(w/delta) G0 / (theta K)`.
pub fn rate_bound(p: &TheoryParams, gamma: f64, f0: f64, f_inf: f64, gap0: f64, rounds: usize) -> Result<f64> {
    p.validate()?;
    if rounds == 0 || !(gamma > 0.0) {
        return Err(Error::usage("bound needs rounds >= 1 and gamma > 0"));
    }
    let k = rounds as f64;
    Ok(2.0 * (f0 - f_inf) / (gamma * k) + p.max_w_over_delta() * gap0 / (p.theta()? * k))
}

/// Relative tolerance for the per-step checks.
pub const STEP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionReport {
    pub rounds: usize,
    pub gamma: f64,
    /// `(1/K) sum_k sum_i w_i ||grad_i f(x^k)||^2`.
    pub lhs: f64,
    pub rhs: f64,
    /// Layer-steps where the 3PC contraction failed beyond tolerance.
    pub contraction_violations: usize,
    /// Steps where the descent bound failed beyond tolerance.
    pub descent_violations: usize,
    /// Largest `(lhs - rhs) / scale` seen in each check; negative means slack.
    pub worst_contraction: f64,
    pub worst_descent: f64,
    pub final_value: f64,
}

impl RecursionReport {
    pub fn bound_holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

/// Runs `x_i <- x_i - gamma w_i u_hat_i`, `u_hat_i <- u_hat_i + TopK_{k_i}(grad_i f(x) - u_hat_i)`
/// for `rounds` steps, checking both per-step inequalities.
pub fn run_recursion(
    f: &dyn Objective,
    x0: &LayeredVector,
    u_hat0: &LayeredVector,
    ks: &[usize],
    p: &TheoryParams,
    gamma: f64,
    rounds: usize,
) -> Result<RecursionReport> {
    p.validate()?;
    let part = f.partition();
    if ks.len() != part.num_layers() || p.layers() != part.num_layers() {
        return Err(Error::usage("one k and one parameter set per layer required"));
    }
    let specs: Vec<CompressorSpec> = ks.iter().map(|&k| CompressorSpec::top_k(k)).collect();
    let tb = p.theta_beta()?;
    let ls = &p.l_layers;
    let gammas: Vec<f64> = p.w.iter().map(|w| gamma * w).collect();
    let layers = part.num_layers();

    let mut x = x0.clone();
    let mut u_hat = u_hat0.clone();
    let mut g = f.grad(&x)?;
    let mut fx = f.value(&x)?;
    let f0 = fx;
    let gap0 = gap_metric(&u_hat, &g, &p.delta)?;

    let mut lhs_sum = 0.0;
    let mut report = RecursionReport {
        rounds,
        gamma,
        lhs: 0.0,
        rhs: 0.0,
        contraction_violations: 0,
        descent_violations: 0,
        worst_contraction: f64::NEG_INFINITY,
        worst_descent: f64::NEG_INFINITY,
        final_value: fx,
    };

    for _ in 0..rounds {
        let x1 = layerwise_gd_step(&x, &u_hat, &gammas)?;
        let fx1 = f.value(&x1)?;
        let err = u_hat.sub(&g)?;
        let step = x1.sub(&x)?;

        let mut bound = fx;
        let mut scale = fx.abs() + fx1.abs();
        for i in 0..layers {
            let gi = gammas[i];
            let terms = [
                -0.5 * gi * g.layer_sq_norm(i),
                -(0.5 / gi - 0.5 * ls[i]) * step.layer_sq_norm(i),
                0.5 * gi * err.layer_sq_norm(i),
            ];
            bound += terms.iter().sum::<f64>();
            scale += terms.iter().map(|t| t.abs()).sum::<f64>();
        }
        let excess = (fx1 - bound) / scale.max(f64::MIN_POSITIVE);
        report.worst_descent = report.worst_descent.max(excess);
        if excess > STEP_TOLERANCE {
            report.descent_violations += 1;
        }

        lhs_sum += (0..layers).map(|i| p.w[i] * g.layer_sq_norm(i)).sum::<f64>();

        let g1 = f.grad(&x1)?;
        let msg = encode_update(&g1, &u_hat, &specs, crate::compressors::DEFAULT_VALUE_BITS)?;
        let mut u_hat1 = u_hat.clone();
        apply_update(&mut u_hat1, &msg)?;

        let err1 = u_hat1.sub(&g1)?;
        let drift = g1.sub(&g)?;
        for (i, &(theta, beta)) in tb.iter().enumerate() {
            let lhs = err1.layer_sq_norm(i);
            let rhs = (1.0 - theta) * err.layer_sq_norm(i) + beta * drift.layer_sq_norm(i);
            let excess = (lhs - rhs) / (lhs + rhs).max(f64::MIN_POSITIVE);
            report.worst_contraction = report.worst_contraction.max(excess);
            if excess > STEP_TOLERANCE {
                report.contraction_violations += 1;
            }
        }

        x = x1;
        u_hat = u_hat1;
        g = g1;
        fx = fx1;
    }

    report.lhs = lhs_sum / rounds.max(1) as f64;
    report.rhs = rate_bound(p, gamma, f0, f.lower_bound(), gap0, rounds.max(1))?;
    report.final_value = fx;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::QuadraticObjective;
    use crate::tensor::LayerPartition;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn theta_beta_examples() {
        let (t, b) = theta_beta(0.5, 0.2).unwrap();
        assert!(close(t, 0.4, 1e-15) && close(b, 3.0, 1e-15));
        assert_eq!(theta_beta(1.0, 0.2).unwrap(), (1.0, 0.0));
        assert_eq!(theta_beta(1.0, 50.0).unwrap(), (1.0, 0.0));
        assert!(matches!(theta_beta(0.5, 1.0), Err(Error::Parameter(_))));
        assert!(theta_beta(0.0, 0.5).is_err());
    }

    #[test]
    fn default_zeta_examples() {
        assert!(close(default_zeta(0.75).unwrap(), 1.0, 1e-15));
        assert!(default_zeta(1e-12).unwrap() < 1e-11);
        assert!(close(default_zeta(0.5).unwrap(), 2f64.sqrt() - 1.0, 1e-15));
        assert!((default_zeta(0.5).unwrap() - 0.41421).abs() < 1e-5);
        assert!(default_zeta(1.0).is_err());
        // default zeta always leaves theta > 0
        for a in [0.01, 0.1, 0.5, 0.9, 0.999] {
            assert!(theta_beta(a, default_zeta(a).unwrap()).unwrap().0 > 0.0);
        }
    }

    /// Step-size condition left side, written out from the raw definitions.
    fn stepsize_lhs(gamma: f64, alpha: &[f64], zeta: &[f64], w: &[f64], delta: &[f64], ls: &[f64], l: f64, i: usize) -> f64 {
        let theta: Vec<f64> = alpha.iter().zip(zeta).map(|(a, z)| if *a == 1.0 { 1.0 } else { 1.0 - (1.0 - a) * (1.0 + z) }).collect();
        let beta: Vec<f64> = alpha.iter().zip(zeta).map(|(a, z)| (1.0 - a) * (1.0 + 1.0 / z)).collect();
        let th = theta.iter().cloned().fold(f64::INFINITY, f64::min);
        let mwd = w.iter().zip(delta).map(|(w, d)| w / d).fold(f64::MIN, f64::max);
        let mdb = delta.iter().zip(&beta).map(|(d, b)| d * b).fold(f64::MIN, f64::max);
        gamma * gamma * w[i] * mwd * mdb * l * l / th + gamma * ls[i] * w[i]
    }

    fn bisect(mut lo: f64, mut hi: f64, ok: impl Fn(f64) -> bool) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn stepsize_single_layer_example() {
        let p = TheoryParams::new(vec![0.5], vec![1.0], 1.0).unwrap();
        let (t, b) = p.theta_beta().unwrap()[0];
        assert!((t - 0.29289).abs() < 1e-5 && (b - 1.70711).abs() < 1e-5);
        let g = max_stepsize(&p).unwrap();
        assert!((g - 0.3372).abs() < 1e-4, "{g}");
        let z = 2f64.sqrt() - 1.0;
        let oracle = bisect(0.0, 10.0, |x| stepsize_lhs(x, &[0.5], &[z], &[1.0], &[1.0], &[1.0], 1.0, 0) <= 1.0);
        assert!(close(g, oracle, 1e-12), "{g} vs {oracle}");
    }

    #[test]
    fn stepsize_linear_case() {
        let p = TheoryParams::new(vec![1.0], vec![2.0], 2.0).unwrap();
        assert_eq!(max_stepsize(&p).unwrap(), 0.5);
    }

    #[test]
    fn stepsize_matches_bisection_on_multilayer_params() {
        let mut p = TheoryParams::new(vec![0.1, 0.5, 1.0, 0.03], vec![3.0, 1.0, 7.0, 0.5], 9.0).unwrap();
        p.w = vec![1.0, 2.0, 0.5, 1.5];
        p.delta = vec![0.7, 1.0, 2.0, 0.3];
        p.zeta[0] = 0.05;
        let g = max_stepsize(&p).unwrap();
        let all_ok = |x: f64| {
            (0..4).all(|i| stepsize_lhs(x, &p.alpha, &p.zeta, &p.w, &p.delta, &p.l_layers, p.l_global, i) <= 1.0)
        };
        let oracle = bisect(0.0, 10.0, all_ok);
        assert!(close(g, oracle, 1e-12), "{g} vs {oracle}");
        let binding = (0..4)
            .map(|i| stepsize_lhs(g, &p.alpha, &p.zeta, &p.w, &p.delta, &p.l_layers, p.l_global, i))
            .fold(0.0, f64::max);
        assert!(close(binding, 1.0, 1e-12));
    }

    #[test]
    fn stepsize_scales_inversely_with_weights() {
        let mut p = TheoryParams::new(vec![0.9, 0.99], vec![1e3, 2e3], 2e3).unwrap();
        let g = max_stepsize(&p).unwrap();
        for s in [0.5, 3.0, 10.0] {
            p.w = vec![s, s];
            assert!(close(max_stepsize(&p).unwrap() * s, g, 1e-12));
        }
    }

    #[test]
    fn gap_metric_examples() {
        let part = LayerPartition::from_sizes(&[1, 1]).unwrap();
        let g = LayeredVector::new(vec![1.0, -2.0], part.clone()).unwrap();
        assert_eq!(gap_metric(&g, &g, &[1.0, 1.0]).unwrap(), 0.0);
        let u = LayeredVector::new(vec![4.0, 2.0], part).unwrap();
        assert_eq!(gap_metric(&u, &g, &[1.0, 1.0]).unwrap(), 25.0);
        assert_eq!(gap_metric(&u, &g, &[1.0, 2.0]).unwrap(), 41.0);
    }

    #[test]
    fn bound_examples() {
        let p = TheoryParams::new(vec![0.5], vec![1.0], 1.0).unwrap();
        assert_eq!(rate_bound(&p, 0.3, 0.0, 0.0, 0.0, 10).unwrap(), 0.0);
        let b1 = rate_bound(&p, 0.3, 5.0, 1.0, 2.0, 10).unwrap();
        let b2 = rate_bound(&p, 0.3, 5.0, 1.0, 2.0, 20).unwrap();
        assert!(close(b2, b1 / 2.0, 1e-15));
        let theta = 1.0 - 0.5 * 2f64.sqrt();
        assert!(close(b1, 2.0 * 4.0 / 3.0 + 2.0 / (theta * 10.0), 1e-14));
    }

    #[test]
    fn converged_start_has_zero_bound() {
        let part = LayerPartition::from_sizes(&[2, 3]).unwrap();
        let f = QuadraticObjective::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], part.clone()).unwrap();
        let x0 = LayeredVector::zeros(&part);
        let p = TheoryParams::new(vec![0.5, 1.0 / 3.0], vec![2.0, 5.0], 5.0).unwrap();
        let gamma = max_stepsize(&p).unwrap();
        let r = run_recursion(&f, &x0, &x0, &[1, 1], &p, gamma, 5).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        assert!(r.bound_holds());
    }

    #[test]
    fn quadratic_run_satisfies_all_inequalities() {
        let part = LayerPartition::from_sizes(&[10, 12, 8]).unwrap();
        let f = QuadraticObjective::log_uniform(part.clone(), 1.0, 100.0, 3).unwrap();
        let sm = f.smoothness();
        let ks = [2, 5, 8];
        let alpha: Vec<f64> = ks.iter().zip(part.layer_dims()).map(|(&k, d)| k as f64 / d as f64).collect();
        let p = TheoryParams::new(alpha, sm.layers.clone(), sm.global).unwrap();
        let gamma = max_stepsize(&p).unwrap();
        let x0 = LayeredVector::new((0..30).map(|j| 1.0 - 0.05 * j as f64).collect(), part.clone()).unwrap();
        let r = run_recursion(&f, &x0, &LayeredVector::zeros(&part), &ks, &p, gamma, 2000).unwrap();
        assert!(r.bound_holds(), "{r:?}");
        assert_eq!(r.contraction_violations, 0, "{r:?}");
        assert_eq!(r.descent_violations, 0, "{r:?}");
        assert!(r.final_value < f.value(&x0).unwrap());
    }
}
