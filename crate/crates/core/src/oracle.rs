//! Exact Doob h-function `h*(t, x) = E[w(X0) | X_{T-t} = x]` and its guidance.
//!
//! Closed form is available when `log w` is quadratic: each posterior component
//! of `X0 | X_{T-t}` is Gaussian, so the tilt integral, the tilted mean and hence
//! `∇h* = (μ/σ²) Cov(X0, w(X0) | x)` are analytic. Otherwise the oracle averages
//! over exact draws from the posterior mixture.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{self, logsumexp, symmetrize};
use crate::reference::{GaussianMixture, PosteriorMap, SubspaceEmbedding};
use crate::rng::{self, tag};
use crate::schedule::VpSchedule;
use crate::weights::{LogQuadratic, WeightSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OracleMode {
    ClosedForm,
    MonteCarlo { n_mc: usize, seed: u64 },
}

/// A value with its Monte Carlo standard error (zero in closed form).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone)]
pub struct DoobOracle {
    p0: GaussianMixture,
    sched: VpSchedule,
    spec: WeightSpec,
    mode: OracleMode,
}

/// Oracle state precomputed for one forward time.
#[derive(Debug, Clone)]
pub struct OracleSlice {
    post: PosteriorMap,
    spec: WeightSpec,
    kind: SliceKind,
}

#[derive(Debug, Clone)]
enum SliceKind {
    Constant(f64),
    Closed {
        lq: LogQuadratic,
        // (I + S_i J)⁻¹ S_i and ½ log det(I + S_i J) per component
        tilt_covs: Vec<DMatrix<f64>>,
        half_log_dets: Vec<f64>,
    },
    MonteCarlo {
        n_mc: usize,
        seed: u64,
        t_bits: u64,
        factors: Vec<DMatrix<f64>>,
    },
}

/// Value and guidance at one point, plus Monte Carlo byproducts.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub h: Estimate,
    pub grad: DVector<f64>,
    pub guidance: DVector<f64>,
}

impl OracleSlice {
    pub fn eval(&self, x: &DVector<f64>) -> Result<PointEval> {
        let d = x.len();
        let (mu, s2) = self.post.mu_sigma2();
        let pref = mu / s2;
        match &self.kind {
            SliceKind::Constant(c) => {
                linalg::is_finite(x).then_some(()).ok_or_else(|| Error::Domain("non-finite point".into()))?;
                Ok(PointEval {
                    h: Estimate { value: *c, se: 0.0 },
                    grad: DVector::zeros(d),
                    guidance: DVector::zeros(d),
                })
            }
            SliceKind::Closed { lq, tilt_covs, half_log_dets } => {
                let (logp, means) = self.post.components(x)?;
                let lse = logsumexp(&logp);
                let mut log_terms = Vec::with_capacity(means.len());
                let mut tilted = Vec::with_capacity(means.len());
                let mut post_mean = DVector::zeros(d);
                for i in 0..means.len() {
                    let m = &means[i];
                    let g = &lq.h - &lq.j * m;
                    let sg = &tilt_covs[i] * &g;
                    let log_z = lq.c0 + lq.h.dot(m) - 0.5 * m.dot(&(&lq.j * m)) - half_log_dets[i] + 0.5 * g.dot(&sg);
                    let lr = logp[i] - lse;
                    log_terms.push(lr + log_z);
                    post_mean.axpy(lr.exp(), m, 1.0);
                    tilted.push(m + sg);
                }
                let log_h = logsumexp(&log_terms);
                let mut tilted_mean = DVector::zeros(d);
                for (lt, mt) in log_terms.iter().zip(&tilted) {
                    tilted_mean.axpy((lt - log_h).exp(), mt, 1.0);
                }
                let guidance = (tilted_mean - post_mean) * pref;
                let h = log_h.exp();
                Ok(PointEval { h: Estimate { value: h, se: 0.0 }, grad: &guidance * h, guidance })
            }
            SliceKind::MonteCarlo { n_mc, seed, t_bits, factors } => {
                let (logp, means) = self.post.components(x)?;
                let r = linalg::softmax(&logp);
                let mut st = rng::stream(*seed, &[tag::ORACLE_MC, *t_bits, rng::hash_f64s(x.as_slice())]);
                let n = *n_mc;
                let mut ws = Vec::with_capacity(n);
                let mut xs = Vec::with_capacity(n);
                for _ in 0..n {
                    let u: f64 = st.random();
                    let mut acc = 0.0;
                    let mut k = r.len() - 1;
                    for (i, ri) in r.iter().enumerate() {
                        acc += ri;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    let x0 = &means[k] + &factors[k] * rng::normals(&mut st, d);
                    ws.push(self.spec.eval(&x0)?);
                    xs.push(x0);
                }
                let (wbar, se) = linalg::mean_se(&ws);
                let xbar = xs.iter().fold(DVector::zeros(d), |a, v| a + v) / n as f64;
                let mut cov = DVector::zeros(d);
                for (x0, w) in xs.iter().zip(&ws) {
                    cov.axpy(w - wbar, &(x0 - &xbar), 1.0);
                }
                let grad = cov * (pref / (n as f64 - 1.0).max(1.0));
                let guidance = &grad / wbar;
                Ok(PointEval { h: Estimate { value: wbar, se }, grad, guidance })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub t: f64,
    pub n_points: usize,
    pub b_lo: f64,
    pub b_hi: f64,
    pub min_h: f64,
    pub max_h: f64,
    pub max_grad: f64,
    pub grad_bound: f64,
    pub max_hessian: f64,
    pub hessian_bound: f64,
    /// `min_h / b_lo`, `max_h / b_hi`, `max_grad / grad_bound`, `max_hessian / hessian_bound`.
    pub ratio_lower: f64,
    pub ratio_upper: f64,
    pub ratio_grad: f64,
    pub ratio_hessian: f64,
    pub values_ok: bool,
    pub grad_ok: bool,
    pub hessian_ok: bool,
}

impl RegularityReport {
    pub fn passed(&self) -> bool {
        self.values_ok && self.grad_ok && self.hessian_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowDimCheck {
    pub max_deviation: f64,
    /// Largest deviation in units of the joint standard error (Monte Carlo mode only).
    pub max_z: f64,
    pub passed: bool,
}

const HESSIAN_STEP: f64 = 1e-4;
const LOWDIM_TOL: f64 = 1e-6;

impl DoobOracle {
    pub fn new(p0: GaussianMixture, sched: VpSchedule, spec: WeightSpec, mode: OracleMode) -> Result<Self> {
        let spec = spec.bind_reference(&p0);
        spec.validate(p0.dim())?;
        if mode == OracleMode::ClosedForm && !spec.is_conjugate() {
            return Err(Error::Unsupported("closed-form oracle needs a conjugate weight; use Monte Carlo mode".into()));
        }
        if let OracleMode::MonteCarlo { n_mc, .. } = mode {
            if n_mc < 2 {
                return Err(Error::Config("Monte Carlo oracle needs n_mc >= 2".into()));
            }
        }
        Ok(Self { p0, sched, spec, mode })
    }

    pub fn closed_form(p0: GaussianMixture, sched: VpSchedule, spec: WeightSpec) -> Result<Self> {
        Self::new(p0, sched, spec, OracleMode::ClosedForm)
    }

    pub fn with_mode(&self, mode: OracleMode) -> Result<Self> {
        Self::new(self.p0.clone(), self.sched, self.spec.clone(), mode)
    }

    pub fn p0(&self) -> &GaussianMixture {
        &self.p0
    }

    pub fn schedule(&self) -> &VpSchedule {
        &self.sched
    }

    pub fn spec(&self) -> &WeightSpec {
        &self.spec
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    /// Precompute the oracle at forward time `s > 0`.
    pub fn slice_forward(&self, s: f64) -> Result<OracleSlice> {
        let post = PosteriorMap::new(&self.p0, s)?;
        let kind = if let Some(c) = self.spec.constant_value() {
            SliceKind::Constant(c)
        } else {
            match self.mode {
                OracleMode::ClosedForm => {
                    let d = self.p0.dim();
                    let lq = self.spec.log_quadratic_dim(d).expect("checked at construction");
                    let mut tilt_covs = Vec::new();
                    let mut half_log_dets = Vec::new();
                    for sc in post.component_covs() {
                        let m = DMatrix::identity(d, d) + sc * &lq.j;
                        let lu = m.lu();
                        half_log_dets.push(0.5 * lu.determinant().ln());
                        let g = lu.solve(sc).ok_or_else(|| Error::Singular("I + SJ is singular".into()))?;
                        tilt_covs.push(symmetrize(&g));
                    }
                    SliceKind::Closed { lq, tilt_covs, half_log_dets }
                }
                OracleMode::MonteCarlo { n_mc, seed } => SliceKind::MonteCarlo {
                    n_mc,
                    seed,
                    t_bits: s.to_bits(),
                    factors: post.component_covs().iter().map(linalg::sqrt_psd).collect(),
                },
            }
        };
        Ok(OracleSlice { post, spec: self.spec.clone(), kind })
    }

    /// Precompute the oracle at reverse time `t ∈ (0, T)`.
    pub fn slice(&self, t: f64) -> Result<OracleSlice> {
        let big_t = self.sched.terminal_time();
        if !(t > 0.0 && t < big_t) {
            return domain(format!("reverse time must lie in (0, {big_t}), got {t}"));
        }
        self.slice_forward(big_t - t)
    }

    pub fn h_star(&self, t: f64, x: &DVector<f64>) -> Result<Estimate> {
        Ok(self.slice(t)?.eval(x)?.h)
    }

    pub fn grad_h_star(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.slice(t)?.eval(x)?.grad)
    }

    pub fn guidance_star(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.slice(t)?.eval(x)?.guidance)
    }

    /// Check the value, gradient and Hessian bounds of `h*` on `grid` given weight bounds.
    pub fn verify_regularity(&self, t: f64, grid: &[DVector<f64>], bounds: (f64, f64)) -> Result<RegularityReport> {
        let sl = self.slice(t)?;
        let (_, s2) = crate::schedule::mu_sigma(self.sched.terminal_time() - t)?;
        let (b_lo, b_hi) = bounds;
        let grad_bound = 2.0 * b_hi / s2;
        let hessian_bound = 6.0 * b_hi / (s2 * s2);
        let (mut min_h, mut max_h, mut max_g, mut max_hess) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
        for x in grid {
            let e = sl.eval(x)?;
            min_h = min_h.min(e.h.value);
            max_h = max_h.max(e.h.value);
            max_g = max_g.max(e.grad.amax());
            for l in 0..x.len() {
                let mut a = x.clone();
                let mut b = x.clone();
                a[l] += HESSIAN_STEP;
                b[l] -= HESSIAN_STEP;
                let col = (sl.eval(&a)?.grad - sl.eval(&b)?.grad) / (2.0 * HESSIAN_STEP);
                max_hess = max_hess.max(col.amax());
            }
        }
        // relative slack for round-off in a bound that is attained with equality (constant weights)
        let slack = 1e-12;
        Ok(RegularityReport {
            t,
            n_points: grid.len(),
            b_lo,
            b_hi,
            min_h,
            max_h,
            max_grad: max_g,
            grad_bound,
            max_hessian: max_hess,
            hessian_bound,
            ratio_lower: min_h / b_lo,
            ratio_upper: max_h / b_hi,
            ratio_grad: max_g / grad_bound,
            ratio_hessian: max_hess / hessian_bound,
            values_ok: min_h >= b_lo * (1.0 - slack) && max_h <= b_hi * (1.0 + slack),
            grad_ok: max_g <= grad_bound,
            hessian_ok: max_hess <= hessian_bound,
        })
    }

    /// Compare `h*` on pairs of points that share their projection onto `range(P)`.
    pub fn check_lowdim_representation(&self, t: f64, pairs: &[(DVector<f64>, DVector<f64>)]) -> Result<LowDimCheck> {
        let sl = self.slice(t)?;
        let (mut max_dev, mut max_z) = (0.0f64, 0.0f64);
        for (a, b) in pairs {
            let ea = sl.eval(a)?.h;
            let eb = sl.eval(b)?.h;
            let dev = (ea.value - eb.value).abs();
            max_dev = max_dev.max(dev);
            let se = (ea.se * ea.se + eb.se * eb.se).sqrt();
            if se > 0.0 {
                max_z = max_z.max(dev / se);
            }
        }
        let passed = match self.mode {
            OracleMode::ClosedForm => max_dev < LOWDIM_TOL,
            OracleMode::MonteCarlo { .. } => max_z < 4.0,
        };
        Ok(LowDimCheck { max_deviation: max_dev, max_z, passed })
    }
}

/// Pairs `(x, x + v)` with `v ⊥ range(P)`, or with `v` inside `range(P)` when `broken`.
pub fn lowdim_pairs(
    e: &SubspaceEmbedding,
    n: usize,
    scale: f64,
    broken: bool,
    seed: u64,
) -> Vec<(DVector<f64>, DVector<f64>)> {
    let d = e.ambient_dim();
    let p = e.matrix();
    let proj = p * p.transpose();
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[tag::EVAL, i as u64]);
            let x = rng::normals(&mut r, d) * scale;
            let raw = rng::normals(&mut r, d);
            let v = if broken { &proj * raw } else { &raw - &proj * &raw };
            let v = v.normalize() * scale;
            let x2 = &x + v;
            (x, x2)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::mu_sigma;

    fn sched() -> VpSchedule {
        VpSchedule::new(3.0, 0.01, 64).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    fn mix2d() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.4, 0.6],
            vec![v(&[-0.4, 0.3]), v(&[0.5, -0.2])],
            vec![DMatrix::identity(2, 2) * 0.03, DMatrix::from_row_slice(2, 2, &[0.05, 0.01, 0.01, 0.02])],
        )
        .unwrap()
    }

    fn specs2d() -> Vec<WeightSpec> {
        vec![
            WeightSpec::gaussian_likelihood(DMatrix::from_row_slice(1, 2, &[1.0, 0.5]), v(&[0.3]), 0.4, 0.0),
            WeightSpec::exp_reward(DMatrix::identity(2, 2) * 0.8, v(&[1.0, -0.5]), 0.1, 1.3),
        ]
    }

    fn fd<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(x.len(), |k, _| {
            let mut a = x.clone();
            let mut b = x.clone();
            a[k] += h;
            b[k] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
    }

    #[test]
    fn constant_weight() {
        let o = DoobOracle::closed_form(mix2d(), sched(), WeightSpec::constant(2.5)).unwrap();
        let x = v(&[0.3, 1.0]);
        assert_eq!(o.h_star(1.0, &x).unwrap().value, 2.5);
        assert_eq!(o.grad_h_star(1.0, &x).unwrap(), DVector::zeros(2));
        assert_eq!(o.guidance_star(1.0, &x).unwrap(), DVector::zeros(2));
        assert!(o.h_star(0.0, &x).is_err());
        assert!(o.h_star(3.0, &x).is_err());
    }

    #[test]
    fn exponential_tilt_of_standard_gaussian() {
        let o =
            DoobOracle::closed_form(GaussianMixture::standard(1), sched(), WeightSpec::exp_linear(v(&[1.0]))).unwrap();
        for (t, x) in [(0.5, -0.7), (1.5, 0.2), (2.9, 1.4)] {
            let s = 3.0 - t;
            let (mu, s2) = mu_sigma(s).unwrap();
            let (pm, pv) = (mu * x, s2);
            let want = (pm + 0.5 * pv).exp();
            let got = o.h_star(t, &v(&[x])).unwrap().value;
            assert!((got - want).abs() < 1e-12 * want);
            // guidance of exp(μx + const) is μ
            assert!((o.guidance_star(t, &v(&[x])).unwrap()[0] - mu).abs() < 1e-12);
        }
        let mc = o.with_mode(OracleMode::MonteCarlo { n_mc: 1_000_000, seed: 3 }).unwrap();
        let e = mc.h_star(1.0, &v(&[0.4])).unwrap();
        let want = o.h_star(1.0, &v(&[0.4])).unwrap().value;
        assert!((e.value - want).abs() < 3.0 * e.se);
    }

    #[test]
    fn gradient_and_guidance_match_finite_differences() {
        for spec in specs2d() {
            let o = DoobOracle::closed_form(mix2d(), sched(), spec).unwrap();
            for (t, x) in [(0.6, v(&[0.2, -0.5])), (1.7, v(&[-1.0, 0.4])), (2.8, v(&[0.3, 0.9]))] {
                let g = o.grad_h_star(t, &x).unwrap();
                let gfd = fd(|y| o.h_star(t, y).unwrap().value, &x);
                assert!((&g - &gfd).norm() <= 1e-4 * g.norm().max(1e-8), "{g} {gfd}");
                let q = o.guidance_star(t, &x).unwrap();
                let qfd = fd(|y| o.h_star(t, y).unwrap().value.ln(), &x);
                assert!((&q - &qfd).norm() <= 1e-4 * q.norm().max(1e-8));
            }
        }
    }

    #[test]
    fn gradient_vanishes_when_signal_is_gone() {
        let big = VpSchedule::new(40.0, 0.01, 8).unwrap();
        let o = DoobOracle::closed_form(mix2d(), big, specs2d().remove(0)).unwrap();
        let g = o.grad_h_star(1e-3, &v(&[0.5, 0.5])).unwrap();
        assert!(g.norm() < 1e-14);
    }

    #[test]
    fn guidance_is_scale_invariant() {
        let spec = specs2d().remove(1);
        let a = DoobOracle::closed_form(mix2d(), sched(), spec.clone()).unwrap();
        let b = DoobOracle::closed_form(mix2d(), sched(), spec.scaled(7.5).unwrap()).unwrap();
        let x = v(&[0.1, -0.3]);
        let ga = a.guidance_star(1.2, &x).unwrap();
        let gb = b.guidance_star(1.2, &x).unwrap();
        assert!((ga - gb).norm() < 1e-10);
    }

    #[test]
    fn closed_form_agrees_with_monte_carlo() {
        for spec in specs2d() {
            let o = DoobOracle::closed_form(mix2d(), sched(), spec).unwrap();
            let mc = o.with_mode(OracleMode::MonteCarlo { n_mc: 20_000, seed: 5 }).unwrap();
            let mut r = rng::stream(2, &[]);
            for _ in 0..50 {
                let t = 0.1 + 2.8 * r.random::<f64>();
                let x = rng::normals(&mut r, 2);
                let exact = o.h_star(t, &x).unwrap().value;
                let est = mc.h_star(t, &x).unwrap();
                assert!((est.value - exact).abs() <= 4.0 * est.se + 1e-12, "{} vs {exact} se {}", est.value, est.se);
            }
        }
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let o = DoobOracle::new(mix2d(), sched(), specs2d().remove(0), OracleMode::MonteCarlo { n_mc: 100, seed: 9 })
            .unwrap();
        let x = v(&[0.2, 0.1]);
        assert_eq!(o.h_star(1.0, &x).unwrap(), o.h_star(1.0, &x).unwrap());
    }

    #[test]
    fn floored_likelihood_needs_monte_carlo() {
        let spec = WeightSpec::gaussian_likelihood(DMatrix::identity(2, 2), v(&[0.0, 0.0]), 0.5, 1e-3);
        assert!(matches!(DoobOracle::closed_form(mix2d(), sched(), spec.clone()), Err(Error::Unsupported(_))));
        assert!(DoobOracle::new(mix2d(), sched(), spec, OracleMode::MonteCarlo { n_mc: 10, seed: 0 }).is_ok());
    }

    #[test]
    fn regularity_constant_and_near_terminal() {
        let o = DoobOracle::closed_form(mix2d(), sched(), WeightSpec::constant(1.0)).unwrap();
        let grid: Vec<_> = (0..10).map(|i| v(&[i as f64 * 0.1, -0.2])).collect();
        let r = o.verify_regularity(1.5, &grid, (1.0, 1.0)).unwrap();
        assert!(r.passed());
        assert_eq!(r.max_grad, 0.0);
        assert_eq!(r.max_hessian, 0.0);
        let spec = specs2d().remove(0);
        let bounds = spec.bounds_on_support(4.0).unwrap();
        let o = DoobOracle::closed_form(mix2d(), sched(), spec).unwrap();
        let r = o.verify_regularity(3.0 - 1e-6, &grid, bounds).unwrap();
        assert!(r.grad_bound > 1e5 && r.grad_ok);
    }

    #[test]
    fn lowdim_pairs_and_negative_control() {
        let latent = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![v(&[-0.4]), v(&[0.4])],
            vec![DMatrix::from_element(1, 1, 0.02), DMatrix::from_element(1, 1, 0.02)],
        )
        .unwrap();
        let e = SubspaceEmbedding::random(3, latent, 4).unwrap();
        let p0 = e.embed();
        let p = e.matrix().clone();
        let spec = WeightSpec::gaussian_likelihood(p.transpose(), v(&[0.3]), 0.5, 0.0);
        let o = DoobOracle::closed_form(p0, sched(), spec).unwrap();
        let same: Vec<_> = lowdim_pairs(&e, 20, 1.0, false, 1).into_iter().map(|(a, _)| (a.clone(), a)).collect();
        assert_eq!(o.check_lowdim_representation(1.0, &same).unwrap().max_deviation, 0.0);
        let good = lowdim_pairs(&e, 20, 1.0, false, 1);
        for (a, b) in &good {
            assert!((e.project(a) - e.project(b)).norm() < 1e-12);
        }
        let c = o.check_lowdim_representation(1.0, &good).unwrap();
        assert!(c.passed && c.max_deviation < 1e-8);
        let bad = lowdim_pairs(&e, 20, 1.0, true, 1);
        let c = o.check_lowdim_representation(1.0, &bad).unwrap();
        assert!(!c.passed);
    }
}
