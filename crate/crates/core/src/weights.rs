//! Weight functions that tilt the reference into the target `q0 ∝ w·p0`.
//!
//! Conjugate weights are exponentials of quadratics, `log w = -½xᵀJx + hᵀx + c0`,
//! which is what makes the tilted target and the exact h-function closed-form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_mat, symmetrize};
use crate::reference::GaussianMixture;

pub const DEFAULT_FLOOR: f64 = 1e-3;

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSpec {
    /// `max(floor, exp(-‖y - Ax‖²/(2σ²)))`; the Gaussian normalizing prefactor is dropped so `w ≤ 1`.
    GaussianLikelihood {
        #[serde(rename = "A", with = "serde_mat")]
        a: DMatrix<f64>,
        #[serde(with = "serde_mat::vector")]
        y: DVector<f64>,
        sigma_noise: f64,
        #[serde(default = "default_floor")]
        floor: f64,
    },
    /// `exp(r(x)/α)` with `r(x) = -½xᵀQx + bᵀx + c`.
    #[serde(rename = "exp_reward")]
    ExpQuadReward {
        #[serde(rename = "Q", with = "serde_mat")]
        q: DMatrix<f64>,
        #[serde(with = "serde_mat::vector")]
        b: DVector<f64>,
        c: f64,
        alpha: f64,
    },
    /// `q0(x)/p0(x)`; `reference` is bound to the experiment's `p0` when omitted in configs.
    DensityRatio {
        target: GaussianMixture,
        #[serde(default)]
        reference: Option<GaussianMixture>,
    },
    Constant {
        c: f64,
    },
}

/// Coefficients of `log w(x) = -½xᵀJx + hᵀx + c0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogQuadratic {
    pub j: DMatrix<f64>,
    pub h: DVector<f64>,
    pub c0: f64,
}

/// Result of integrating `exp(log w)` against `N(m, C)`.
#[derive(Debug, Clone)]
pub struct GaussianTilt {
    pub log_z: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LogQuadratic {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x.dot(&(&self.j * x)) + self.h.dot(x) + self.c0
    }

    /// `∫ exp(log w) dN(m, C)` and the normalized tilted Gaussian.
    ///
    /// Works without inverting `C`: with `M = I + CJ`, the tilted covariance is
    /// `S = M⁻¹C` and `log Z = c0 + hᵀm - ½mᵀJm - ½log det M + ½gᵀSg`, `g = h - Jm`.
    pub fn tilt(&self, m: &DVector<f64>, c: &DMatrix<f64>) -> Result<GaussianTilt> {
        let d = m.len();
        let mm = DMatrix::identity(d, d) + c * &self.j;
        let lu = mm.lu();
        let det = lu.determinant();
        if !(det > 0.0) {
            return Err(Error::Singular("I + CJ is singular".into()));
        }
        let s = symmetrize(&lu.solve(c).ok_or_else(|| Error::Singular("I + CJ is singular".into()))?);
        let g = &self.h - &self.j * m;
        let sg = &s * &g;
        let log_z = self.c0 + self.h.dot(m) - 0.5 * m.dot(&(&self.j * m)) - 0.5 * det.ln() + 0.5 * g.dot(&sg);
        Ok(GaussianTilt { log_z, mean: m + sg, cov: s })
    }
}

impl WeightSpec {
    pub fn constant(c: f64) -> Self {
        WeightSpec::Constant { c }
    }

    /// `w(x) = exp((-½xᵀQx + bᵀx + c)/α)`.
    pub fn exp_reward(q: DMatrix<f64>, b: DVector<f64>, c: f64, alpha: f64) -> Self {
        WeightSpec::ExpQuadReward { q, b, c, alpha }
    }

    /// `w(x) = exp(bᵀx)`.
    pub fn exp_linear(b: DVector<f64>) -> Self {
        let d = b.len();
        Self::exp_reward(DMatrix::zeros(d, d), b, 0.0, 1.0)
    }

    pub fn gaussian_likelihood(a: DMatrix<f64>, y: DVector<f64>, sigma_noise: f64, floor: f64) -> Self {
        WeightSpec::GaussianLikelihood { a, y, sigma_noise, floor }
    }

    pub fn density_ratio(target: GaussianMixture, reference: GaussianMixture) -> Self {
        WeightSpec::DensityRatio { target, reference: Some(reference) }
    }

    /// Fill in the reference of a density ratio that was configured without one.
    pub fn bind_reference(self, p0: &GaussianMixture) -> Self {
        match self {
            WeightSpec::DensityRatio { target, reference: None } => {
                WeightSpec::DensityRatio { target, reference: Some(p0.clone()) }
            }
            other => other,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self {
            WeightSpec::GaussianLikelihood { a, y, sigma_noise, floor } => {
                if a.ncols() != d || a.nrows() != y.len() || a.nrows() == 0 {
                    return bad("likelihood operator A must be m x d with y of length m");
                }
                if !(*sigma_noise > 0.0) || !(*floor >= 0.0) {
                    return bad("likelihood needs sigma_noise > 0 and floor >= 0");
                }
            }
            WeightSpec::ExpQuadReward { q, b, alpha, c } => {
                if q.nrows() != d || q.ncols() != d || b.len() != d {
                    return bad("reward needs Q of size d x d and b of length d");
                }
                if (q - q.transpose()).abs().max() > 1e-10 || linalg::min_eigenvalue(q) < -1e-10 {
                    return bad("reward Q must be symmetric positive semi-definite");
                }
                if !(*alpha > 0.0) || !c.is_finite() {
                    return bad("reward needs alpha > 0 and finite c");
                }
            }
            WeightSpec::DensityRatio { target, reference } => {
                if target.dim() != d || reference.as_ref().is_some_and(|r| r.dim() != d) {
                    return bad("density ratio mixtures must match the reference dimension");
                }
            }
            WeightSpec::Constant { c } => {
                if !(*c > 0.0 && c.is_finite()) {
                    return bad("constant weight must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self {
            WeightSpec::Constant { c } => Some(*c),
            _ => None,
        }
    }

    pub fn log_quadratic(&self) -> Option<LogQuadratic> {
        match self {
            WeightSpec::GaussianLikelihood { a, y, sigma_noise, floor } if *floor == 0.0 => {
                let s2 = sigma_noise * sigma_noise;
                Some(LogQuadratic {
                    j: a.transpose() * a / s2,
                    h: a.transpose() * y / s2,
                    c0: -y.norm_squared() / (2.0 * s2),
                })
            }
            WeightSpec::ExpQuadReward { q, b, c, alpha } => {
                Some(LogQuadratic { j: q / *alpha, h: b / *alpha, c0: c / alpha })
            }
            WeightSpec::Constant { c } => {
                Some(LogQuadratic { j: DMatrix::zeros(0, 0), h: DVector::zeros(0), c0: c.ln() })
            }
            _ => None,
        }
    }

    /// Quadratic form sized for dimension `d` (the constant variant is dimension-free).
    pub fn log_quadratic_dim(&self, d: usize) -> Option<LogQuadratic> {
        self.log_quadratic().map(|mut lq| {
            if lq.h.len() != d {
                lq.j = DMatrix::zeros(d, d);
                lq.h = DVector::zeros(d);
            }
            lq
        })
    }

    pub fn is_conjugate(&self) -> bool {
        self.log_quadratic().is_some()
    }

    pub fn eval(&self, x: &DVector<f64>) -> Result<f64> {
        if !linalg::is_finite(x) {
            return Err(Error::Domain(format!("non-finite point {:?}", x.as_slice())));
        }
        Ok(match self {
            WeightSpec::GaussianLikelihood { a, y, sigma_noise, floor } => {
                let r = (y - a * x).norm_squared();
                (-r / (2.0 * sigma_noise * sigma_noise)).exp().max(*floor)
            }
            WeightSpec::ExpQuadReward { q, b, c, alpha } => ((-0.5 * x.dot(&(q * x)) + b.dot(x) + c) / alpha).exp(),
            WeightSpec::DensityRatio { target, reference } => {
                let p0 =
                    reference.as_ref().ok_or_else(|| Error::Config("density ratio has no reference bound".into()))?;
                let lp = p0.log_density(x)?;
                if lp == f64::NEG_INFINITY {
                    return Err(Error::Domain(format!("reference density underflows at {:?}", x.as_slice())));
                }
                (target.log_density(x)? - lp).exp()
            }
            WeightSpec::Constant { c } => *c,
        })
    }

    /// Certified `(B_lo, B_hi)` with `B_lo ≤ w ≤ B_hi` on `‖x‖ ≤ r_s`.
    pub fn bounds_on_support(&self, r_s: f64) -> Result<(f64, f64)> {
        if !(r_s > 0.0) {
            return Err(Error::Domain(format!("support radius must be positive, got {r_s}")));
        }
        match self {
            WeightSpec::GaussianLikelihood { a, y, sigma_noise, floor } => {
                if *floor > 0.0 {
                    Ok((*floor, 1.0))
                } else {
                    let worst = y.norm() + linalg::spectral_norm(a) * r_s;
                    let lo = (-worst * worst / (2.0 * sigma_noise * sigma_noise)).exp();
                    if lo > 0.0 {
                        Ok((lo, 1.0))
                    } else {
                        Err(Error::Unsupported("likelihood underflows on the support ball; set floor > 0".into()))
                    }
                }
            }
            WeightSpec::ExpQuadReward { q, b, c, alpha } => {
                let lmax = linalg::max_eigenvalue(q).max(0.0);
                let lmin = linalg::min_eigenvalue(q).max(0.0);
                let bn = b.norm();
                let r_lo = c - 0.5 * lmax * r_s * r_s - bn * r_s;
                let rho = if lmin > 0.0 { (bn / lmin).min(r_s) } else { r_s };
                let r_hi = c - 0.5 * lmin * rho * rho + bn * rho;
                Ok(((r_lo / alpha).exp(), (r_hi / alpha).exp()))
            }
            WeightSpec::DensityRatio { .. } => {
                Err(Error::Unsupported("density ratio bounds are not certified; supply them explicitly".into()))
            }
            WeightSpec::Constant { c } => Ok((*c, *c)),
        }
    }

    /// Exact tilted mixture `q0 ∝ w·p0` for conjugate weights.
    pub fn tilted_target(&self, p0: &GaussianMixture) -> Result<GaussianMixture> {
        if self.constant_value().is_some() {
            return Ok(p0.clone());
        }
        let lq = self.log_quadratic().ok_or_else(|| {
            Error::Unsupported("tilted target needs a conjugate weight; use the Monte Carlo oracle".into())
        })?;
        let mut logw = Vec::with_capacity(p0.n_components());
        let mut means = Vec::with_capacity(p0.n_components());
        let mut covs = Vec::with_capacity(p0.n_components());
        for ((pi, m), c) in p0.weights().iter().zip(p0.means()).zip(p0.covs()) {
            let t = lq.tilt(m, c)?;
            logw.push(pi.ln() + t.log_z);
            means.push(t.mean);
            covs.push(t.cov);
        }
        let w = linalg::softmax(&logw);
        let total: f64 = w.iter().sum();
        GaussianMixture::new(w.iter().map(|v| v / total).collect(), means, covs)
    }

    /// The same weight multiplied by `factor > 0`, where the variant can express it.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        match self {
            WeightSpec::ExpQuadReward { q, b, c, alpha } => {
                Ok(WeightSpec::ExpQuadReward { q: q.clone(), b: b.clone(), c: c + alpha * factor.ln(), alpha: *alpha })
            }
            WeightSpec::Constant { c } => Ok(WeightSpec::Constant { c: c * factor }),
            _ => Err(Error::Unsupported("rescaling is only expressible for rewards and constants".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn eval_examples() {
        assert_eq!(WeightSpec::constant(1.0).eval(&v(&[3.0])).unwrap(), 1.0);
        let x = v(&[0.3, -0.2]);
        let lik = WeightSpec::gaussian_likelihood(DMatrix::identity(2, 2), x.clone(), 0.5, 0.0);
        assert_eq!(lik.eval(&x).unwrap(), 1.0);
        let r = WeightSpec::exp_reward(DMatrix::zeros(1, 1), v(&[0.0]), 2.0, 2.0);
        assert!((r.eval(&v(&[5.0])).unwrap() - std::f64::consts::E).abs() < 1e-15);
        let floored = WeightSpec::gaussian_likelihood(DMatrix::identity(1, 1), v(&[0.0]), 0.1, 1e-3);
        assert_eq!(floored.eval(&v(&[10.0])).unwrap(), 1e-3);
    }

    #[test]
    fn bounds_examples() {
        assert_eq!(WeightSpec::constant(2.0).bounds_on_support(7.0).unwrap(), (2.0, 2.0));
        let lik = WeightSpec::gaussian_likelihood(DMatrix::identity(1, 1), v(&[0.0]), 0.1, 0.05);
        assert_eq!(lik.bounds_on_support(3.0).unwrap(), (0.05, 1.0));
        let r = WeightSpec::exp_linear(v(&[1.0, 0.0]));
        let (lo, hi) = r.bounds_on_support(2.0).unwrap();
        assert!((lo - (-2f64).exp()).abs() < 1e-15 && (hi - 2f64.exp()).abs() < 1e-14);
        // grid search over the boundary circle
        let (mut gmin, mut gmax) = (f64::INFINITY, 0.0f64);
        for k in 0..10_000 {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 10_000.0;
            let w = r.eval(&v(&[2.0 * a.cos(), 2.0 * a.sin()])).unwrap();
            gmin = gmin.min(w);
            gmax = gmax.max(w);
        }
        assert!((gmin - lo).abs() < 1e-6 && (gmax - hi).abs() < 1e-6);
        let ratio = WeightSpec::density_ratio(GaussianMixture::standard(1), GaussianMixture::standard(1));
        assert!(matches!(ratio.bounds_on_support(1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn floored_weights_respect_bounds_in_ball() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, -1.0, 2.0]);
        let lik = WeightSpec::gaussian_likelihood(a, v(&[0.3, -0.4]), 0.3, 0.01);
        let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.0, 0.0, 0.0, 0.1]);
        let rew = WeightSpec::exp_reward(q, v(&[0.5, -1.0, 0.2]), 0.3, 2.0);
        let floorless = WeightSpec::gaussian_likelihood(DMatrix::identity(3, 3), v(&[0.1, 0.0, 0.2]), 0.7, 0.0);
        let r_s = 2.5;
        let mut r = rng::stream(4, &[]);
        for spec in [lik, rew, floorless] {
            let (lo, hi) = spec.bounds_on_support(r_s).unwrap();
            for _ in 0..10_000 {
                let dir = rng::normals(&mut r, 3).normalize();
                let rad = r_s * rand::Rng::random::<f64>(&mut r).powf(1.0 / 3.0);
                let w = spec.eval(&(dir * rad)).unwrap();
                assert!(w >= lo * (1.0 - 1e-12) && w <= hi * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn exponential_tilt_shifts_mean() {
        let p0 = GaussianMixture::standard(1);
        let q0 = WeightSpec::exp_linear(v(&[1.0])).tilted_target(&p0).unwrap();
        assert!((q0.means()[0][0] - 1.0).abs() < 1e-14);
        assert!((q0.covs()[0][(0, 0)] - 1.0).abs() < 1e-14);
        assert_eq!(WeightSpec::constant(3.0).tilted_target(&p0).unwrap(), p0);
        let floored = WeightSpec::gaussian_likelihood(DMatrix::identity(1, 1), v(&[0.0]), 0.1, 1e-3);
        assert!(matches!(floored.tilted_target(&p0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn likelihood_tilt_matches_importance_sampling() {
        let p0 = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![v(&[-0.5]), v(&[0.6])],
            vec![DMatrix::from_element(1, 1, 0.04), DMatrix::from_element(1, 1, 0.09)],
        )
        .unwrap();
        let spec = WeightSpec::gaussian_likelihood(DMatrix::identity(1, 1), v(&[0.5]), 0.3, 0.0);
        let q0 = spec.tilted_target(&p0).unwrap();
        let draws = p0.sample(1_000_000, 21);
        let ws: Vec<f64> = draws.iter().map(|x| spec.eval(x).unwrap()).collect();
        let sw: f64 = ws.iter().sum();
        let m1 = draws.iter().zip(&ws).map(|(x, w)| w * x[0]).sum::<f64>() / sw;
        let m2 = draws.iter().zip(&ws).map(|(x, w)| w * x[0] * x[0]).sum::<f64>() / sw;
        let var = m2 - m1 * m1;
        let se = |f: &dyn Fn(f64) -> f64, est: f64| {
            (draws.iter().zip(&ws).map(|(x, w)| (w * (f(x[0]) - est)).powi(2)).sum::<f64>()).sqrt() / sw
        };
        let se_m = se(&|x| x, m1);
        let se_v = se(&|x| (x - m1) * (x - m1), var);
        let want_m = q0.mean()[0];
        let want_v = q0.covariance()[(0, 0)];
        assert!((m1 - want_m).abs() < 3.0 * se_m, "{m1} vs {want_m}");
        assert!((var - want_v).abs() < 3.0 * se_v, "{var} vs {want_v}");
    }

    #[test]
    fn density_ratio_reproduces_conjugate_weight() {
        let p0 = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![v(&[-0.3, 0.2]), v(&[0.4, 0.1])],
            vec![DMatrix::identity(2, 2) * 0.05, DMatrix::from_row_slice(2, 2, &[0.06, 0.01, 0.01, 0.03])],
        )
        .unwrap();
        let specs = [
            WeightSpec::gaussian_likelihood(DMatrix::from_row_slice(1, 2, &[1.0, -0.5]), v(&[0.2]), 0.4, 0.0),
            WeightSpec::exp_reward(DMatrix::identity(2, 2) * 0.5, v(&[1.0, -1.0]), 0.2, 1.5),
        ];
        let mut r = rng::stream(8, &[]);
        for s in specs {
            let q0 = s.tilted_target(&p0).unwrap();
            let ratio = WeightSpec::density_ratio(q0.clone(), p0.clone());
            let vals: Vec<f64> = (0..100)
                .map(|_| {
                    let x = rng::normals(&mut r, 2) * 0.5;
                    (s.eval(&x).unwrap().ln() - ratio.eval(&x).unwrap().ln()).exp()
                })
                .collect();
            let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 1e-8 * vals[0].abs().max(1.0), "spread {spread}");
        }
    }

    #[test]
    fn toml_config_forms() {
        let s: WeightSpec =
            toml::from_str("kind = \"exp_reward\"\nQ = [[0.0]]\nb = [1.0]\nc = 0.0\nalpha = 1.0\n").unwrap();
        assert_eq!(s, WeightSpec::exp_linear(v(&[1.0])));
        let s: WeightSpec =
            toml::from_str("kind = \"gaussian_likelihood\"\nA = [[1.0, 0.0]]\ny = [0.5]\nsigma_noise = 0.3\n").unwrap();
        assert!(matches!(s, WeightSpec::GaussianLikelihood { floor, .. } if floor == DEFAULT_FLOOR));
        let s: WeightSpec = toml::from_str("kind = \"constant\"\nc = 2.0\n").unwrap();
        assert_eq!(s.constant_value(), Some(2.0));
    }

    proptest! {
        #[test]
        fn tilt_normalizer_matches_direct_integral_1d(m in -1.0f64..1.0, c in 0.01f64..2.0, j in 0.0f64..3.0, h in -2.0f64..2.0) {
            let lq = LogQuadratic { j: DMatrix::from_element(1, 1, j), h: v(&[h]), c0: 0.1 };
            let t = lq.tilt(&v(&[m]), &DMatrix::from_element(1, 1, c)).unwrap();
            // trapezoid on a wide grid
            let sd = c.sqrt();
            let n = 20_000;
            let (a, b) = (m - 12.0 * sd, m + 12.0 * sd);
            let dx = (b - a) / n as f64;
            let mut z = 0.0;
            let mut zm = 0.0;
            for i in 0..=n {
                let x = a + i as f64 * dx;
                let f = (-(x - m).powi(2) / (2.0 * c)).exp() / (2.0 * std::f64::consts::PI * c).sqrt()
                    * (-0.5 * j * x * x + h * x + 0.1).exp();
                let wt = if i == 0 || i == n { 0.5 } else { 1.0 };
                z += wt * f * dx;
                zm += wt * f * x * dx;
            }
            prop_assert!((t.log_z - z.ln()).abs() < 1e-8);
            prop_assert!((t.mean[0] - zm / z).abs() < 1e-8);
        }
    }
}
