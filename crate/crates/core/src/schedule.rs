//! Variance-preserving time parameterization and exponential-integrator coefficients.
//!
//! Times are forward-process times unless a function says otherwise. The
//! reverse process at reverse time `t` sits at forward time `T - t`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct VpSchedule {
    t_end: f64,
    t0: f64,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    #[serde(rename = "T")]
    t_end: f64,
    #[serde(rename = "T0")]
    t0: f64,
    #[serde(rename = "K")]
    k: usize,
}

impl TryFrom<ScheduleRepr> for VpSchedule {
    type Error = Error;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        VpSchedule::new(r.t_end, r.t0, r.k)
    }
}

impl From<VpSchedule> for ScheduleRepr {
    fn from(s: VpSchedule) -> Self {
        ScheduleRepr { t_end: s.t_end, t0: s.t0, k: s.k }
    }
}

impl VpSchedule {
    /// `T0 = 0` is accepted so a full partition of `[0, T]` can be built.
    pub fn new(t_end: f64, t0: f64, k: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return domain(format!("terminal time must be positive, got {t_end}"));
        }
        if !(t0.is_finite() && t0 >= 0.0 && t0 < t_end) {
            return domain(format!("early stop must lie in [0, T), got {t0}"));
        }
        if k == 0 {
            return domain("step count must be at least 1");
        }
        Ok(Self { t_end, t0, k })
    }

    pub fn terminal_time(&self) -> f64 {
        self.t_end
    }

    pub fn early_stop(&self) -> f64 {
        self.t0
    }

    pub fn steps(&self) -> usize {
        self.k
    }

    pub fn step_size(&self) -> f64 {
        (self.t_end - self.t0) / self.k as f64
    }

    /// Reverse times `t_k = k·h`, `k = 0..=K`, with the last point pinned to `T - T0`.
    pub fn time_grid(&self) -> Vec<f64> {
        let h = self.step_size();
        let mut g: Vec<f64> = (0..=self.k).map(|k| k as f64 * h).collect();
        g[self.k] = self.t_end - self.t0;
        g
    }

    /// Forward time of the marginal visited at reverse grid index `k`.
    pub fn forward_time_at(&self, k: usize) -> f64 {
        if k == self.k {
            self.t0
        } else {
            self.t_end - k as f64 * self.step_size()
        }
    }
}

/// `(μ_t, σ_t²) = (e^{-t}, 1 - e^{-2t})`.
pub fn mu_sigma(t: f64) -> Result<(f64, f64)> {
    if !(t >= 0.0) {
        return domain(format!("time must be nonnegative, got {t}"));
    }
    Ok(mu_sigma_unchecked(t))
}

#[inline]
pub(crate) fn mu_sigma_unchecked(t: f64) -> (f64, f64) {
    ((-t).exp(), -(-2.0 * t).exp_m1())
}

/// `φ(z) = sqrt(e^z - 1)`.
pub fn phi(z: f64) -> Result<f64> {
    if !(z >= 0.0) {
        return domain(format!("phi needs z >= 0, got {z}"));
    }
    Ok(z.exp_m1().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mu_sigma_values() {
        assert_eq!(mu_sigma(0.0).unwrap(), (1.0, 0.0));
        let (m, s) = mu_sigma(50.0).unwrap();
        assert!(m < 1e-20 && (s - 1.0).abs() < 1e-12);
        let (m, s) = mu_sigma(2f64.ln()).unwrap();
        assert!((m - 0.5).abs() < 1e-15 && (s - 0.75).abs() < 1e-15);
        assert!(mu_sigma(-1e-9).is_err());
        assert!(mu_sigma(f64::NAN).is_err());
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.0).unwrap(), 0.0);
        assert!((phi(2f64.ln()).unwrap() - 1.0).abs() < 1e-15);
        // sqrt(e^0.1 - 1) to 17 digits
        assert!((phi(0.1).unwrap() - 0.324_300_659_998_785_1).abs() < 1e-15);
        assert!(phi(-0.1).is_err());
    }

    #[test]
    fn grids() {
        let g = VpSchedule::new(1.0, 0.0, 4).unwrap().time_grid();
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = VpSchedule::new(2.0, 0.5, 3).unwrap().time_grid();
        assert_eq!(g, vec![0.0, 0.5, 1.0, 1.5]);
        let g = VpSchedule::new(3.0, 0.1, 1).unwrap().time_grid();
        assert_eq!(g, vec![0.0, 3.0 - 0.1]);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(VpSchedule::new(0.0, 0.0, 1).is_err());
        assert!(VpSchedule::new(1.0, 1.0, 1).is_err());
        assert!(VpSchedule::new(1.0, -0.1, 1).is_err());
        assert!(VpSchedule::new(1.0, 0.1, 0).is_err());
    }

    #[test]
    fn serde_uses_short_names() {
        let s = VpSchedule::new(6.0, 0.01, 128).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"T":6.0,"T0":0.01,"K":128}"#);
        let back: VpSchedule = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<VpSchedule>(r#"{"T":1.0,"T0":2.0,"K":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn variance_preserving(t in 0.0f64..60.0) {
            let (m, s) = mu_sigma(t).unwrap();
            prop_assert!((m * m + s - 1.0).abs() < 1e-12);
            prop_assert!(m > 0.0 && m <= 1.0 && (0.0..=1.0).contains(&s));
        }

        #[test]
        fn grid_uniform(t_end in 0.1f64..20.0, frac in 0.0f64..0.9, k in 1usize..400) {
            let s = VpSchedule::new(t_end, frac * t_end, k).unwrap();
            let g = s.time_grid();
            prop_assert_eq!(g.len(), k + 1);
            prop_assert_eq!(g[k], t_end - frac * t_end);
            for w in g.windows(2) {
                prop_assert!(w[1] > w[0]);
                prop_assert!((w[1] - w[0] - s.step_size()).abs() < 1e-12);
            }
            for (i, &t) in g.iter().enumerate() {
                prop_assert!((s.forward_time_at(i) - (t_end - t)).abs() < 1e-12);
            }
        }

        #[test]
        fn phi_squared(h in 0.0f64..10.0) {
            let p = phi(2.0 * h).unwrap();
            let rel = (p * p - (2.0 * h).exp_m1()).abs() / (2.0 * h).exp_m1().max(1.0);
            prop_assert!(rel < 1e-12);
        }
    }
}
