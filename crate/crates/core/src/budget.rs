//! Round time model and the compression budget derived from it.
//!
//! A worker's round is `downlink + computation + uplink`. The uplink gets
//! `1 / (1 + alpha)` of the communication window and the downlink carries
//! `alpha` times the uplink's bits, so that with an exact bandwidth estimate
//! the round lasts exactly `t_budget_s`. With `alpha = 1` this is the
//! symmetric half/half split.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeModel {
    /// User time budget `t` for one round.
    pub t_budget_s: f64,
    /// Per-round computation time, constant over a run.
    pub t_comp_s: f64,
    /// Broadcast congestion coefficient.
    pub alpha_down: f64,
}

impl TimeModel {
    pub fn new(t_budget_s: f64, t_comp_s: f64, alpha_down: f64) -> Result<Self> {
        let tm = Self {
            t_budget_s,
            t_comp_s,
            alpha_down,
        };
        tm.validate()?;
        Ok(tm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_comp_s >= 0.0 && self.t_comp_s.is_finite()) {
            return Err(Error::config(format!("t_comp {} must be >= 0", self.t_comp_s)));
        }
        if !(self.t_budget_s > self.t_comp_s && self.t_budget_s.is_finite()) {
            return Err(Error::config(format!(
                "time budget {} s must exceed computation time {} s",
                self.t_budget_s, self.t_comp_s
            )));
        }
        if !(self.alpha_down > 0.0 && self.alpha_down.is_finite()) {
            return Err(Error::config(format!("alpha {} must be > 0", self.alpha_down)));
        }
        Ok(())
    }

    /// Seconds available for communication.
    pub fn comm_window_s(&self) -> f64 {
        self.t_budget_s - self.t_comp_s
    }
}

/// Bits each direction may carry in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub uplink_bits: f64,
    pub downlink_bits: f64,
}

pub fn compression_budget(b_est: f64, tm: &TimeModel) -> Result<Budget> {
    tm.validate()?;
    if !(b_est > 0.0 && b_est.is_finite()) {
        return Err(Error::usage(format!("bandwidth estimate {b_est} must be positive")));
    }
    let uplink_bits = b_est * tm.comm_window_s() / (1.0 + tm.alpha_down);
    Ok(Budget {
        uplink_bits,
        downlink_bits: tm.alpha_down * uplink_bits,
    })
}

/// Budget when the downlink costs nothing and the whole window goes to the uplink.
pub fn uplink_only_budget(b_est: f64, tm: &TimeModel) -> Result<f64> {
    tm.validate()?;
    if !(b_est > 0.0 && b_est.is_finite()) {
        return Err(Error::usage(format!("bandwidth estimate {b_est} must be positive")));
    }
    Ok(b_est * tm.comm_window_s())
}

/// Wall time of one round given the true link rates.
pub fn round_time(bits_up: f64, bits_down: f64, b_up_true: f64, b_down_true: f64, tm: &TimeModel) -> f64 {
    let down = if bits_down > 0.0 { bits_down / b_down_true } else { 0.0 };
    let up = if bits_up > 0.0 { bits_up / b_up_true } else { 0.0 };
    down + tm.t_comp_s + up
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symmetric_budget() {
        let tm = TimeModel::new(1.0, 0.5, 1.0).unwrap();
        let b = compression_budget(100e6, &tm).unwrap();
        assert_eq!(b.uplink_bits, 25e6);
        assert_eq!(b.downlink_bits, 25e6);
    }

    #[test]
    fn budget_vanishes_with_window() {
        let tm = TimeModel::new(0.5 + 1e-12, 0.5, 1.0).unwrap();
        let b = compression_budget(100e6, &tm).unwrap();
        assert!(b.uplink_bits < 1e-3);
        assert!(TimeModel::new(0.5, 0.5, 1.0).is_err());
        assert!(TimeModel::new(0.4, 0.5, 1.0).is_err());
    }

    #[test]
    fn congested_downlink_split() {
        // T_u + 3 T_u = 0.5 s at 100e6 b/s
        let t_up = 0.5 / 4.0;
        let expect_up = t_up * 100e6;
        let tm = TimeModel::new(1.0, 0.5, 3.0).unwrap();
        let b = compression_budget(100e6, &tm).unwrap();
        assert_eq!(b.uplink_bits, expect_up);
        assert_eq!(b.uplink_bits, 12.5e6);
        assert_eq!(b.downlink_bits, 37.5e6);
        assert!((b.uplink_bits / 100e6 + b.downlink_bits / 100e6 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn round_time_examples() {
        let tm = TimeModel::new(3.0, 0.5, 1.0).unwrap();
        assert_eq!(round_time(1e6, 1e6, 1e6, 1e6, &tm), 2.5);
        assert_eq!(round_time(0.0, 0.0, 1e6, 1e6, &tm), 0.5);
    }

    #[test]
    fn bad_estimate_rejected() {
        let tm = TimeModel::new(1.0, 0.5, 1.0).unwrap();
        assert!(compression_budget(0.0, &tm).is_err());
        assert!(uplink_only_budget(-1.0, &tm).is_err());
    }

    proptest! {
        #[test]
        fn budget_time_inverse(b in 1e-3f64..1e12, t in 0.01f64..100.0, frac in 0.0f64..0.99, alpha in 0.05f64..20.0) {
            let tm = TimeModel::new(t, t * frac, alpha).unwrap();
            let c = compression_budget(b, &tm).unwrap();
            let rt = round_time(c.uplink_bits, c.downlink_bits, b, b, &tm);
            prop_assert!((rt - t).abs() <= 1e-9 * t.max(1.0));
            let up_only = uplink_only_budget(b, &tm).unwrap();
            prop_assert!((round_time(up_only, 0.0, b, b, &tm) - t).abs() <= 1e-9 * t.max(1.0));
        }

        #[test]
        fn budget_monotone(b in 1.0f64..1e9, db in 1e-3f64..1e3, t in 1.0f64..10.0, frac in 0.0f64..0.9) {
            let tm = TimeModel::new(t, t * frac, 1.0).unwrap();
            let lo = compression_budget(b, &tm).unwrap().uplink_bits;
            let hi = compression_budget(b * (1.0 + db), &tm).unwrap().uplink_bits;
            prop_assert!(hi > lo);
            let wider = TimeModel::new(t * 1.5, t * frac, 1.0).unwrap();
            prop_assert!(compression_budget(b, &wider).unwrap().uplink_bits > lo);
        }
    }
}
