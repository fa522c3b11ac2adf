//! Doob matching: least-squares regression of `w(X0)` on `X_{T-t}`.
//!
//! The hypothesis class is the span of Gaussian RBF features plus a constant.
//! Both the vanilla and the gradient-regularized objectives are convex
//! quadratics in the coefficients and are solved exactly through their normal
//! equations. The plug-in guidance is `∇ĥ / max(ĥ, B_lo)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_mat};
use crate::oracle::DoobOracle;
use crate::quadrature::MixtureQuadrature;
use crate::reference::GaussianMixture;
use crate::rng::{self, tag};
use crate::schedule::VpSchedule;
use crate::weights::WeightSpec;

pub const DEFAULT_RIDGE: f64 = 1e-8;
const BANDWIDTH_FLOOR: f64 = 1e-3;
// rows per block when assembling normal equations; fixed so sums do not depend on thread count
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    /// One center per row.
    #[serde(with = "serde_mat")]
    pub centers: DMatrix<f64>,
    pub bandwidth: f64,
    pub include_constant: bool,
}

impl FeatureMap {
    pub fn new(centers: DMatrix<f64>, bandwidth: f64, include_constant: bool) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if centers.nrows() == 0 && !include_constant {
            return Err(Error::Config("feature map has no features".into()));
        }
        Ok(Self { centers, bandwidth, include_constant })
    }

    pub fn constant_only(d: usize) -> Self {
        Self { centers: DMatrix::zeros(0, d), bandwidth: 1.0, include_constant: true }
    }

    /// Centers on a uniform 1D grid over `[lo, hi]`.
    pub fn grid_1d(lo: f64, hi: f64, m: usize, bandwidth: f64) -> Result<Self> {
        let c =
            DMatrix::from_fn(
                m,
                1,
                |i, _| if m == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * i as f64 / (m - 1) as f64 },
            );
        Self::new(c, bandwidth, true)
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn n_rbf(&self) -> usize {
        self.centers.nrows()
    }

    pub fn len(&self) -> usize {
        self.n_rbf() + usize::from(self.include_constant)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        let mut f = DVector::zeros(self.len());
        for j in 0..self.n_rbf() {
            let r2: f64 = (0..x.len()).map(|k| (x[k] - self.centers[(j, k)]).powi(2)).sum();
            f[j] = (-r2 * inv).exp();
        }
        if self.include_constant {
            f[self.n_rbf()] = 1.0;
        }
        f
    }

    /// Features and Jacobian `Dφ(x)` (one row per feature, constant row zero).
    pub fn features_and_jacobian(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let f = self.features(x);
        let l2 = self.bandwidth * self.bandwidth;
        let d = x.len();
        let mut jac = DMatrix::zeros(self.len(), d);
        for j in 0..self.n_rbf() {
            for k in 0..d {
                jac[(j, k)] = -(x[k] - self.centers[(j, k)]) / l2 * f[j];
            }
        }
        (f, jac)
    }
}

/// Subsample `m` training inputs as centers; bandwidth is the median pairwise center distance.
pub fn build_features(train_xt: &[DVector<f64>], m: usize, seed: u64) -> Result<FeatureMap> {
    let n = train_xt.len();
    if m == 0 || m > n {
        return Err(Error::Config(format!("need 1 <= M <= n, got M = {m}, n = {n}")));
    }
    let d = train_xt[0].len();
    let mut r = rng::stream(seed, &[tag::FEATURES]);
    let idx = sample(&mut r, n, m);
    let centers = DMatrix::from_fn(m, d, |i, k| train_xt[idx.index(i)][k]);
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            dists.push((centers.row(i) - centers.row(j)).norm());
        }
    }
    let bw = if dists.is_empty() { 1.0 } else { linalg::median(&dists) };
    FeatureMap::new(centers, bw.max(BANDWIDTH_FLOOR), true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HEstimator {
    #[serde(flatten)]
    pub features: FeatureMap,
    #[serde(with = "serde_mat::vector")]
    pub theta: DVector<f64>,
    pub lambda: f64,
    pub clamp: (f64, f64),
    /// Reverse time the estimator was fitted for.
    pub t: f64,
}

/// A candidate h-function: value and gradient.
pub trait HFunction {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl HEstimator {
    pub fn new(features: FeatureMap, theta: DVector<f64>, lambda: f64, clamp: (f64, f64), t: f64) -> Result<Self> {
        if theta.len() != features.len() {
            return Err(Error::Config("coefficient length does not match the feature map".into()));
        }
        if !(clamp.0 > 0.0 && clamp.0 <= clamp.1) {
            return Err(Error::Config(format!("clamp must satisfy 0 < lo <= hi, got {clamp:?}")));
        }
        Ok(Self { features, theta, lambda, clamp, t })
    }

    pub fn raw(&self, x: &DVector<f64>) -> f64 {
        self.theta.dot(&self.features.features(x))
    }

    pub fn raw_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.features.features_and_jacobian(x).1.tr_mul(&self.theta)
    }

    pub fn eval_h(&self, x: &DVector<f64>) -> f64 {
        self.raw(x).clamp(self.clamp.0, self.clamp.1)
    }

    /// Unclamped gradient over the raw value floored at `B_lo`.
    pub fn eval_guidance(&self, x: &DVector<f64>) -> DVector<f64> {
        let (f, jac) = self.features.features_and_jacobian(x);
        let denom = self.theta.dot(&f).max(self.clamp.0);
        jac.tr_mul(&self.theta) / denom
    }
}

impl HFunction for HEstimator {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.eval_h(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.raw_gradient(x)
    }
}

/// Settings shared by the fitting routines.
#[derive(Debug, Clone, Copy)]
pub struct FitSettings {
    pub t: f64,
    pub clamp: (f64, f64),
    pub ridge: f64,
}

/// Normal-equation blocks `(ΦᵀΦ, Σ_k G_kᵀG_k, Φᵀw)`.
fn normal_blocks(
    xt: &[DVector<f64>],
    responses: &[f64],
    fm: &FeatureMap,
    with_grad: bool,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let p = fm.len();
    let d = fm.dim();
    let parts: Vec<_> = xt
        .par_chunks(CHUNK)
        .zip(responses.par_chunks(CHUNK))
        .map(|(xs, ws)| {
            let mut phi = DMatrix::zeros(xs.len(), p);
            let mut gs: Vec<DMatrix<f64>> = if with_grad { vec![DMatrix::zeros(xs.len(), p); d] } else { Vec::new() };
            for (i, x) in xs.iter().enumerate() {
                let (f, jac) = fm.features_and_jacobian(x);
                phi.row_mut(i).copy_from(&f.transpose());
                for (k, g) in gs.iter_mut().enumerate() {
                    g.row_mut(i).copy_from(&jac.column(k).transpose());
                }
            }
            let w = DVector::from_column_slice(ws);
            let a = phi.tr_mul(&phi);
            let b = gs.iter().fold(DMatrix::zeros(p, p), |acc, g| acc + g.tr_mul(g));
            (a, b, phi.tr_mul(&w))
        })
        .collect();
    parts
        .into_iter()
        .fold((DMatrix::zeros(p, p), DMatrix::zeros(p, p), DVector::zeros(p)), |(a, b, c), (pa, pb, pc)| {
            (a + pa, b + pb, c + pc)
        })
}

/// Solve `(ΦᵀΦ + λΣG_kᵀG_k + nεI)θ = Φᵀy` for arbitrary responses `y`.
pub fn fit_responses(
    xt: &[DVector<f64>],
    responses: &[f64],
    fm: &FeatureMap,
    lambda: f64,
    s: &FitSettings,
) -> Result<HEstimator> {
    let n = xt.len();
    if n == 0 || responses.len() != n {
        return Err(Error::Config("need matching nonempty inputs and responses".into()));
    }
    if !(lambda >= 0.0) || !(s.ridge >= 0.0) {
        return Err(Error::Config("lambda and ridge must be nonnegative".into()));
    }
    let (a, b, c) = normal_blocks(xt, responses, fm, lambda > 0.0);
    let p = fm.len();
    let sys = linalg::symmetrize(&(a + b * lambda + DMatrix::identity(p, p) * (n as f64 * s.ridge)));
    let theta = sys.cholesky().map(|ch| ch.solve(&c)).ok_or_else(|| {
        Error::Singular(if s.ridge == 0.0 {
            "normal equations are singular; use a positive ridge".into()
        } else {
            "normal equations are not positive definite; increase the ridge".into()
        })
    })?;
    HEstimator::new(fm.clone(), theta, lambda, s.clamp, s.t)
}

fn responses(pairs: &[(DVector<f64>, DVector<f64>)], spec: &WeightSpec) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
    let xt = pairs.iter().map(|p| p.1.clone()).collect();
    let w = pairs.iter().map(|p| spec.eval(&p.0)).collect::<Result<Vec<_>>>()?;
    Ok((xt, w))
}

/// Least-squares Doob matching over `span(features)`.
pub fn fit_vanilla(
    pairs: &[(DVector<f64>, DVector<f64>)],
    spec: &WeightSpec,
    fm: &FeatureMap,
    s: &FitSettings,
) -> Result<HEstimator> {
    let (xt, w) = responses(pairs, spec)?;
    fit_responses(&xt, &w, fm, 0.0, s)
}

/// Gradient-regularized Doob matching: adds `λ·mean ‖∇h(xt_i)‖²` to the risk.
pub fn fit_gradient_regularized(
    pairs: &[(DVector<f64>, DVector<f64>)],
    spec: &WeightSpec,
    fm: &FeatureMap,
    lambda: f64,
    s: &FitSettings,
) -> Result<HEstimator> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("gradient regularization needs lambda > 0, got {lambda}")));
    }
    let (xt, w) = responses(pairs, spec)?;
    fit_responses(&xt, &w, fm, lambda, s)
}

/// `(1/n)Σ(y_i - θᵀφ_i)² + λ(1/n)Σ‖Dφ_iᵀθ‖² + ε‖θ‖²`, the objective minimized by `fit_responses`.
pub fn empirical_objective(
    theta: &DVector<f64>,
    xt: &[DVector<f64>],
    responses: &[f64],
    fm: &FeatureMap,
    lambda: f64,
    ridge: f64,
) -> f64 {
    let n = xt.len() as f64;
    let mut acc = 0.0;
    for (x, y) in xt.iter().zip(responses) {
        let (f, jac) = fm.features_and_jacobian(x);
        acc += (y - theta.dot(&f)).powi(2) + lambda * jac.tr_mul(theta).norm_squared();
    }
    acc / n + ridge * theta.norm_squared()
}

/// `λ = c·n^{-2/(d+8)}`.
pub fn auto_lambda(n: usize, d: usize, c: f64) -> f64 {
    c * (n as f64).powf(-2.0 / (d as f64 + 8.0))
}

/// Population problem for a 1D reference at reverse time `t`, discretized by quadrature.
#[derive(Debug, Clone)]
pub struct Population1d {
    pub quad: MixtureQuadrature,
    pub h_star: Vec<f64>,
    pub h_star_grad: Vec<f64>,
    pub t: f64,
}

impl Population1d {
    pub fn new(oracle: &DoobOracle, t: f64, order: usize) -> Result<Self> {
        if oracle.p0().dim() != 1 {
            return Err(Error::Unsupported("population fitting is one-dimensional".into()));
        }
        let sl = oracle.slice(t)?;
        let marginal = oracle.p0().marginal_at(oracle.schedule().terminal_time() - t)?;
        let quad = MixtureQuadrature::new(&marginal, order)?;
        let mut h_star = Vec::with_capacity(quad.nodes.len());
        let mut h_star_grad = Vec::with_capacity(quad.nodes.len());
        for &x in &quad.nodes {
            let e = sl.eval(&DVector::from_element(1, x))?;
            h_star.push(e.h.value);
            h_star_grad.push(e.grad[0]);
        }
        Ok(Self { quad, h_star, h_star_grad, t })
    }

    fn values(&self, fm: &FeatureMap, theta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        self.quad
            .nodes
            .iter()
            .map(|&x| {
                let (f, j) = fm.features_and_jacobian(&DVector::from_element(1, x));
                (theta.dot(&f), j.tr_mul(theta)[0])
            })
            .unzip()
    }

    /// `(∫φφᵀ, ∫φ'φ'ᵀ, ∫φh*)` under the marginal.
    pub fn moments(&self, fm: &FeatureMap) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let p = fm.len();
        let mut a = DMatrix::zeros(p, p);
        let mut b = DMatrix::zeros(p, p);
        let mut c = DVector::zeros(p);
        for ((&x, &w), &h) in self.quad.nodes.iter().zip(&self.quad.weights).zip(&self.h_star) {
            let (f, j) = fm.features_and_jacobian(&DVector::from_element(1, x));
            let g = j.column(0).into_owned();
            a.ger(w, &f, &f, 1.0);
            b.ger(w, &g, &g, 1.0);
            c.axpy(w * h, &f, 1.0);
        }
        (a, b, c)
    }

    /// Population objective up to the constant `E[Var(w|x)]`: `‖h - h*‖² + λ‖h'‖²`.
    pub fn objective(&self, fm: &FeatureMap, theta: &DVector<f64>, lambda: f64) -> f64 {
        let (v, g) = self.values(fm, theta);
        self.quad
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * ((v[i] - self.h_star[i]).powi(2) + lambda * g[i] * g[i]))
            .sum()
    }

    /// `(‖h - h*‖_{L²}, ‖h' - h*'‖_{L²})`.
    pub fn gaps(&self, fm: &FeatureMap, theta: &DVector<f64>) -> (f64, f64) {
        let (v, g) = self.values(fm, theta);
        let mut l2 = 0.0;
        let mut gl2 = 0.0;
        for (i, w) in self.quad.weights.iter().enumerate() {
            l2 += w * (v[i] - self.h_star[i]).powi(2);
            gl2 += w * (g[i] - self.h_star_grad[i]).powi(2);
        }
        (l2.sqrt(), gl2.sqrt())
    }

    /// `(‖f‖²_{L²}, ‖f'‖²_{L²})` for `f = θ_1ᵀφ - θ_2ᵀφ`.
    pub fn sq_norms_of_difference(&self, fm: &FeatureMap, a: &DVector<f64>, b: &DVector<f64>) -> (f64, f64) {
        let (v, g) = self.values(fm, &(a - b));
        let n0 = self.quad.weights.iter().zip(&v).map(|(w, x)| w * x * x).sum();
        let n1 = self.quad.weights.iter().zip(&g).map(|(w, x)| w * x * x).sum();
        (n0, n1)
    }

    pub fn gradient_energy(&self, fm: &FeatureMap, theta: &DVector<f64>) -> f64 {
        let (_, g) = self.values(fm, theta);
        self.quad.weights.iter().zip(&g).map(|(w, x)| w * x * x).sum()
    }

    /// Minimizer of the population objective over `span(fm)` (`ridge·I` added for conditioning).
    pub fn fit(&self, fm: &FeatureMap, lambda: f64, ridge: f64, clamp: (f64, f64)) -> Result<HEstimator> {
        let (a, b, c) = self.moments(fm);
        let p = fm.len();
        let sys = linalg::symmetrize(&(a + b * lambda + DMatrix::identity(p, p) * ridge));
        let theta = sys
            .cholesky()
            .map(|ch| ch.solve(&c))
            .ok_or_else(|| Error::Singular("population normal equations are singular; add a ridge".into()))?;
        HEstimator::new(fm.clone(), theta, lambda, clamp, self.t)
    }
}

/// Population minimizer of the regularized matching objective in 1D.
#[allow(clippy::too_many_arguments)]
pub fn population_fit_1d(
    p0: &GaussianMixture,
    sched: &VpSchedule,
    spec: &WeightSpec,
    t: f64,
    fm: &FeatureMap,
    lambda: f64,
    order: usize,
    ridge: f64,
) -> Result<HEstimator> {
    if p0.dim() != 1 {
        return Err(Error::Unsupported("population fitting is one-dimensional".into()));
    }
    let oracle = DoobOracle::closed_form(p0.clone(), *sched, spec.clone())?;
    let pop = Population1d::new(&oracle, t, order)?;
    let clamp = (f64::MIN_POSITIVE, f64::MAX);
    pop.fit(fm, lambda, ridge, clamp)
}

/// Monte Carlo H¹ error of a candidate against the oracle on `points`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H1Error {
    pub l2: f64,
    pub l2_se: f64,
    pub grad_l2: f64,
    pub grad_l2_se: f64,
}

fn root_mean_with_se(sq: &[f64]) -> (f64, f64) {
    let (m, se) = linalg::mean_se(sq);
    let r = m.sqrt();
    (r, if r > 0.0 { se / (2.0 * r) } else { 0.0 })
}

pub fn h1_error(
    est: &(impl HFunction + Sync),
    oracle: &DoobOracle,
    t: f64,
    points: &[DVector<f64>],
) -> Result<H1Error> {
    let sl = oracle.slice(t)?;
    let terms = points
        .par_iter()
        .map(|x| {
            let e = sl.eval(x)?;
            Ok(((est.value(x) - e.h.value).powi(2), (est.gradient(x) - e.grad).norm_squared()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (a, b): (Vec<f64>, Vec<f64>) = terms.into_iter().unzip();
    let (l2, l2_se) = root_mean_with_se(&a);
    let (grad_l2, grad_l2_se) = root_mean_with_se(&b);
    Ok(H1Error { l2, l2_se, grad_l2, grad_l2_se })
}

/// Monte Carlo `‖ĝ - ∇log h*‖_{L²}` with standard error.
pub fn guidance_error(est: &HEstimator, oracle: &DoobOracle, t: f64, points: &[DVector<f64>]) -> Result<(f64, f64)> {
    let sl = oracle.slice(t)?;
    let sq = points
        .par_iter()
        .map(|x| Ok((est.eval_guidance(x) - sl.eval(x)?.guidance).norm_squared()))
        .collect::<Result<Vec<_>>>()?;
    Ok(root_mean_with_se(&sq))
}

/// Regularization strength for a fit: fixed, the automatic `n^{-2/(d+8)}` scaling, or none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaChoice {
    Fixed(f64),
    Named(LambdaName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaName {
    Auto,
    Vanilla,
}

impl LambdaChoice {
    pub fn resolve(&self, n: usize, d: usize, scale: f64) -> f64 {
        match self {
            LambdaChoice::Fixed(l) => *l,
            LambdaChoice::Named(LambdaName::Auto) => auto_lambda(n, d, scale),
            LambdaChoice::Named(LambdaName::Vanilla) => 0.0,
        }
    }
}

/// Parameters for fitting one estimator per anchor time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorParams {
    #[serde(rename = "M", default = "EstimatorParams::default_m")]
    pub m_features: usize,
    #[serde(default = "EstimatorParams::default_lambda")]
    pub lambda: LambdaChoice,
    #[serde(default = "EstimatorParams::default_lambda_scale")]
    pub lambda_scale: f64,
    #[serde(default = "EstimatorParams::default_ridge")]
    pub ridge: f64,
    #[serde(default = "EstimatorParams::default_n_train")]
    pub n_train: usize,
    /// Number of evenly spaced anchor grid indices; `None` anchors every sampler grid time.
    #[serde(default)]
    pub anchors: Option<usize>,
    /// Radius of the ball on which the clamp bounds are certified.
    #[serde(default = "EstimatorParams::default_support_radius")]
    pub support_radius: f64,
}

impl EstimatorParams {
    fn default_m() -> usize {
        50
    }
    fn default_lambda() -> LambdaChoice {
        LambdaChoice::Named(LambdaName::Auto)
    }
    fn default_lambda_scale() -> f64 {
        1.0
    }
    fn default_ridge() -> f64 {
        DEFAULT_RIDGE
    }
    fn default_n_train() -> usize {
        10_000
    }
    fn default_support_radius() -> f64 {
        4.0
    }
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            m_features: Self::default_m(),
            lambda: Self::default_lambda(),
            lambda_scale: Self::default_lambda_scale(),
            ridge: Self::default_ridge(),
            n_train: Self::default_n_train(),
            anchors: None,
            support_radius: Self::default_support_radius(),
        }
    }
}

/// Reverse anchor times: `count` evenly spaced sampler grid points among `t_0..t_{K-1}`.
pub fn anchor_times(sched: &VpSchedule, count: Option<usize>) -> Vec<f64> {
    let grid = sched.time_grid();
    let k = sched.steps();
    match count {
        None => grid[..k].to_vec(),
        Some(c) => {
            let c = c.clamp(1, k);
            let mut idx: Vec<usize> = (0..c)
                .map(|i| if c == 1 { 0 } else { ((i as f64) * (k - 1) as f64 / (c - 1) as f64).round() as usize })
                .collect();
            idx.dedup();
            idx.into_iter().map(|i| grid[i]).collect()
        }
    }
}

/// Clamp bounds from the weight's certificate, or the response range if none exists.
pub fn clamp_bounds(spec: &WeightSpec, support_radius: f64, responses: &[f64]) -> (f64, f64) {
    match spec.bounds_on_support(support_radius) {
        Ok(b) => b,
        Err(_) => {
            let lo = responses.iter().cloned().fold(f64::INFINITY, f64::min).max(f64::MIN_POSITIVE);
            let hi = responses.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo);
            (lo, hi)
        }
    }
}

/// Fit one estimator per anchor time from fresh forward pairs at forward time `T - t`.
pub fn fit_anchor_estimators(
    p0: &GaussianMixture,
    sched: &VpSchedule,
    spec: &WeightSpec,
    params: &EstimatorParams,
    seed: u64,
) -> Result<Vec<HEstimator>> {
    let anchors = anchor_times(sched, params.anchors);
    let lambda = params.lambda.resolve(params.n_train, p0.dim(), params.lambda_scale);
    anchors
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let s = sched.terminal_time() - t;
            let sub = rng::splitmix64(seed ^ rng::splitmix64(i as u64 + 1));
            let pairs = p0.sample_x0_xt_pairs(s, params.n_train, sub)?;
            let (xt, w) = responses(&pairs, spec)?;
            let fm = build_features(&xt, params.m_features.min(xt.len()), sub)?;
            let settings = FitSettings { t, clamp: clamp_bounds(spec, params.support_radius, &w), ridge: params.ridge };
            fit_responses(&xt, &w, &fm, lambda, &settings)
        })
        .collect()
}

/// Estimators indexed by anchor time with nearest-anchor lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSet {
    pub estimators: Vec<HEstimator>,
}

impl EstimatorSet {
    pub fn new(mut estimators: Vec<HEstimator>) -> Result<Self> {
        if estimators.is_empty() {
            return Err(Error::Config("estimator set is empty".into()));
        }
        estimators.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self { estimators })
    }

    /// Check that every requested anchor time has an estimator.
    pub fn covers(&self, anchors: &[f64]) -> Result<()> {
        for &a in anchors {
            if !self.estimators.iter().any(|e| (e.t - a).abs() <= 1e-9 * a.abs().max(1.0)) {
                return Err(Error::MissingAnchor(a));
            }
        }
        Ok(())
    }

    pub fn nearest(&self, t: f64) -> &HEstimator {
        let i = self.estimators.partition_point(|e| e.t < t);
        if i == 0 {
            &self.estimators[0]
        } else if i == self.estimators.len() {
            &self.estimators[i - 1]
        } else {
            let (a, b) = (&self.estimators[i - 1], &self.estimators[i]);
            if t - a.t <= b.t - t {
                a
            } else {
                b
            }
        }
    }
}
