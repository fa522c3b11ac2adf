//! Gaussian-mixture reference distributions.
//!
//! Marginals of the VP forward process stay Gaussian mixtures, so the score,
//! the forward transition and the Bayes posterior of `X0` given `X_t` are all
//! closed-form. Responsibilities are computed in log-space throughout.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{self, cholesky_jitter, log_det, logsumexp, symmetrize};
use crate::rng::{self, tag};
use crate::schedule::mu_sigma;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MixtureRepr> for GaussianMixture {
    type Error = Error;
    fn try_from(r: MixtureRepr) -> Result<Self> {
        let d = r.means.first().map(|m| m.len()).unwrap_or(0);
        let means = r.means.into_iter().map(DVector::from_vec).collect();
        let mut covs = Vec::with_capacity(r.covs.len());
        for c in r.covs {
            if c.len() != d || c.iter().any(|row| row.len() != d) {
                return Err(Error::Config(format!("covariance must be {d}x{d}")));
            }
            covs.push(DMatrix::from_fn(d, d, |i, j| c[i][j]));
        }
        GaussianMixture::new(r.weights, means, covs)
    }
}

impl From<GaussianMixture> for MixtureRepr {
    fn from(g: GaussianMixture) -> Self {
        MixtureRepr {
            weights: g.weights,
            means: g.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covs: g.covs.iter().map(|c| (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect()).collect(),
        }
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || covs.len() != m {
            return Err(Error::Config(format!(
                "mixture needs matching nonempty weights/means/covs, got {}/{}/{}",
                m,
                means.len(),
                covs.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("mixture weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        for (mu, c) in means.iter().zip(&covs) {
            if mu.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(Error::Config("inconsistent component dimensions".into()));
            }
            if !linalg::is_finite(mu) || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("non-finite component parameters".into()));
            }
            if (c - c.transpose()).abs().max() > 1e-10 {
                return Err(Error::Config("covariance is not symmetric".into()));
            }
            if linalg::min_eigenvalue(c) < -1e-10 {
                return Err(Error::Config("covariance is not positive semi-definite".into()));
            }
        }
        let g = Self { weights, means, covs };
        if !g.within_unit_box() {
            tracing::warn!("mixture mass is not concentrated in the unit box; tail constants are only indicative");
        }
        Ok(g)
    }

    fn from_parts(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Self {
        Self { weights, means, covs }
    }

    pub fn standard(d: usize) -> Self {
        Self::from_parts(vec![1.0], vec![DVector::zeros(d)], vec![DMatrix::identity(d, d)])
    }

    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Equal-weight components on a `per_axis^d` grid spanning `[-half_width, half_width]^d`.
    pub fn grid(d: usize, per_axis: usize, half_width: f64, var: f64) -> Result<Self> {
        if d == 0 || per_axis == 0 || !(var > 0.0) {
            return Err(Error::Config("grid mixture needs d, per_axis >= 1 and var > 0".into()));
        }
        let n = per_axis.pow(d as u32);
        let coord = |i: usize| {
            if per_axis == 1 {
                0.0
            } else {
                -half_width + 2.0 * half_width * i as f64 / (per_axis - 1) as f64
            }
        };
        let means = (0..n)
            .map(|mut idx| {
                DVector::from_fn(d, |_, _| {
                    let c = coord(idx % per_axis);
                    idx /= per_axis;
                    c
                })
            })
            .collect();
        Self::new(vec![1.0 / n as f64; n], means, vec![DMatrix::identity(d, d) * var; n])
    }

    /// Two equal wells at `±separation/2 · e1`.
    pub fn two_wells(d: usize, separation: f64, var: f64) -> Result<Self> {
        if d == 0 || !(var > 0.0) {
            return Err(Error::Config("two_wells needs d >= 1 and var > 0".into()));
        }
        let mut a = DVector::zeros(d);
        a[0] = 0.5 * separation;
        let b = -a.clone();
        Self::new(vec![0.5, 0.5], vec![b, a], vec![DMatrix::identity(d, d) * var; 2])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn mean(&self) -> DVector<f64> {
        self.weights.iter().zip(&self.means).fold(DVector::zeros(self.dim()), |acc, (w, m)| acc + m * *w)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mbar = self.mean();
        let d = self.dim();
        self.weights.iter().zip(&self.means).zip(&self.covs).fold(DMatrix::zeros(d, d), |acc, ((w, m), c)| {
            let dm = m - &mbar;
            acc + (c + &dm * dm.transpose()) * *w
        })
    }

    /// Means and a 3σ envelope of every component inside `‖·‖∞ ≤ 1`.
    pub fn within_unit_box(&self) -> bool {
        self.means
            .iter()
            .zip(&self.covs)
            .all(|(m, c)| (0..m.len()).all(|j| m[j].abs() + 3.0 * c[(j, j)].max(0.0).sqrt() <= 1.0))
    }

    /// Law of `X_t = μ_t X0 + σ_t ε`.
    pub fn marginal_at(&self, t: f64) -> Result<Self> {
        let (mu, s2) = mu_sigma(t)?;
        let d = self.dim();
        Ok(Self::from_parts(
            self.weights.clone(),
            self.means.iter().map(|m| m * mu).collect(),
            self.covs.iter().map(|c| c * (mu * mu) + DMatrix::identity(d, d) * s2).collect(),
        ))
    }

    pub fn prepare(&self) -> Result<PreparedMixture> {
        PreparedMixture::new(self)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.prepare()?.log_density(x)
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.prepare()?.score(x)
    }

    /// Bayes posterior of `X0` given `X_t = x`.
    pub fn posterior_x0_given_xt(&self, t: f64, x: &DVector<f64>) -> Result<Self> {
        PosteriorMap::new(self, t)?.posterior(x)
    }

    fn draw_factors(&self) -> Vec<DMatrix<f64>> {
        self.covs.iter().map(linalg::sqrt_psd).collect()
    }

    fn draw_with(&self, factors: &[DMatrix<f64>], rng: &mut rng::Stream) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = rng::normals(rng, self.dim());
        &self.means[k] + &factors[k] * z
    }

    /// `n` i.i.d. draws; draw `i` uses substream `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let f = self.draw_factors();
        (0..n).into_par_iter().map(|i| self.draw_with(&f, &mut rng::stream(seed, &[tag::MIXTURE, i as u64]))).collect()
    }

    /// Forward pairs `(x0, μ_t x0 + σ_t ε)`.
    pub fn sample_x0_xt_pairs(&self, t: f64, n: usize, seed: u64) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
        let (mu, s2) = mu_sigma(t)?;
        let s = s2.sqrt();
        let f = self.draw_factors();
        Ok((0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, &[tag::PAIRS, i as u64]);
                let x0 = self.draw_with(&f, &mut r);
                let xt = if t == 0.0 { x0.clone() } else { &x0 * mu + rng::normals(&mut r, x0.len()) * s };
                (x0, xt)
            })
            .collect())
    }
}

/// Cached Cholesky factors of a mixture for density and score evaluation.
#[derive(Debug, Clone)]
pub struct PreparedMixture {
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    chols: Vec<Cholesky<f64, Dyn>>,
    log_norms: Vec<f64>,
}

impl PreparedMixture {
    pub fn new(g: &GaussianMixture) -> Result<Self> {
        let d = g.dim() as f64;
        let mut chols = Vec::with_capacity(g.n_components());
        let mut log_norms = Vec::with_capacity(g.n_components());
        for c in &g.covs {
            let ch = cholesky_jitter(&symmetrize(c), "component covariance")?;
            log_norms.push(-0.5 * (d * LN_2PI + log_det(&ch)));
            chols.push(ch);
        }
        Ok(Self { log_weights: g.weights.iter().map(|w| w.ln()).collect(), means: g.means.clone(), chols, log_norms })
    }

    fn check(x: &DVector<f64>) -> Result<()> {
        if linalg::is_finite(x) {
            Ok(())
        } else {
            domain(format!("non-finite point {:?}", x.as_slice()))
        }
    }

    fn component_terms(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
        let mut logp = Vec::with_capacity(self.means.len());
        let mut prec_diff = Vec::with_capacity(self.means.len());
        for i in 0..self.means.len() {
            let diff = x - &self.means[i];
            let l = self.chols[i].l_dirty();
            let y = l.solve_lower_triangular(&diff).expect("triangular solve");
            logp.push(self.log_weights[i] + self.log_norms[i] - 0.5 * y.norm_squared());
            prec_diff.push(self.chols[i].solve(&diff));
        }
        (logp, prec_diff)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Self::check(x)?;
        Ok(logsumexp(&self.component_terms(x).0))
    }

    /// `∇log p(x) = -Σ r_i C_i⁻¹(x - m_i)`.
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Self::check(x)?;
        let (logp, prec_diff) = self.component_terms(x);
        let r = linalg::softmax(&logp);
        let mut s = DVector::zeros(x.len());
        for (ri, pd) in r.iter().zip(&prec_diff) {
            s.axpy(-*ri, pd, 1.0);
        }
        Ok(s)
    }
}

/// Per-component Gaussian Bayes update of `X0` given `X_t = x`, precomputed for one `t`.
///
/// With `A_i = μ²C_i + σ²I`, the component posterior is
/// `N(m_i + μC_iA_i⁻¹(x - μm_i), C_i - μ²C_iA_i⁻¹C_i)`; this form stays valid for singular `C_i`.
#[derive(Debug, Clone)]
pub struct PosteriorMap {
    mu: f64,
    sigma2: f64,
    prior_means: Vec<DVector<f64>>,
    marginal: PreparedMixture,
    gains: Vec<DMatrix<f64>>,
    covs: Vec<DMatrix<f64>>,
}

impl PosteriorMap {
    pub fn new(p0: &GaussianMixture, t: f64) -> Result<Self> {
        let (mu, sigma2) = mu_sigma(t)?;
        if t == 0.0 {
            return domain("posterior of X0 given X_0 is degenerate (t = 0)");
        }
        let marginal = p0.marginal_at(t)?;
        let prepared = PreparedMixture::new(&marginal)?;
        let mut gains = Vec::with_capacity(p0.n_components());
        let mut covs = Vec::with_capacity(p0.n_components());
        for (c, ch) in p0.covs.iter().zip(&prepared.chols) {
            let gain = ch.solve(c).transpose() * mu;
            let s = symmetrize(&(c - &gain * c * mu));
            gains.push(gain);
            covs.push(s);
        }
        Ok(Self { mu, sigma2, prior_means: p0.means.clone(), marginal: prepared, gains, covs })
    }

    pub fn mu_sigma2(&self) -> (f64, f64) {
        (self.mu, self.sigma2)
    }

    pub fn component_covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// Unnormalized log responsibilities and component posterior means.
    pub fn components(&self, x: &DVector<f64>) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
        PreparedMixture::check(x)?;
        let (logp, _) = self.marginal.component_terms(x);
        let means = self.prior_means.iter().zip(&self.gains).map(|(m, k)| m + k * (x - m * self.mu)).collect();
        Ok((logp, means))
    }

    pub fn posterior(&self, x: &DVector<f64>) -> Result<GaussianMixture> {
        let (logp, means) = self.components(x)?;
        Ok(GaussianMixture::from_parts(linalg::softmax(&logp), means, self.covs.clone()))
    }

    pub fn posterior_mean(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.posterior(x)?.mean())
    }

    pub fn marginal_score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.marginal.score(x)
    }
}

/// Linear embedding of a `d*`-dimensional latent mixture into `R^d`.
#[derive(Debug, Clone)]
pub struct SubspaceEmbedding {
    p: DMatrix<f64>,
    latent: GaussianMixture,
}

impl SubspaceEmbedding {
    pub fn new(p: DMatrix<f64>, latent: GaussianMixture) -> Result<Self> {
        let (d, k) = p.shape();
        if k == 0 || k > d || latent.dim() != k {
            return Err(Error::Config(format!("embedding matrix is {d}x{k} but latent dimension is {}", latent.dim())));
        }
        let gram = p.transpose() * &p;
        if (gram - DMatrix::identity(k, k)).abs().max() > 1e-10 {
            return Err(Error::Config("embedding matrix columns are not orthonormal".into()));
        }
        if !latent.within_unit_box() {
            tracing::warn!("latent mixture is not concentrated in the unit box");
        }
        Ok(Self { p, latent })
    }

    /// Orthonormal columns from the QR factor of a seeded Gaussian matrix.
    pub fn random(d: usize, latent: GaussianMixture, seed: u64) -> Result<Self> {
        let k = latent.dim();
        let mut r = rng::stream(seed, &[tag::MIXTURE, u64::MAX]);
        let g = DMatrix::from_fn(d, k, |_, _| rng::normal(&mut r));
        let q = g.qr().q();
        Self::new(q.columns(0, k).into_owned(), latent)
    }

    pub fn ambient_dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.p.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn latent(&self) -> &GaussianMixture {
        &self.latent
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.p.transpose() * x
    }

    pub fn embed(&self) -> GaussianMixture {
        GaussianMixture::from_parts(
            self.latent.weights.clone(),
            self.latent.means.iter().map(|m| &self.p * m).collect(),
            self.latent.covs.iter().map(|c| symmetrize(&(&self.p * c * self.p.transpose()))).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_comp_1d() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.3, 0.7],
            vec![DVector::from_element(1, -0.6), DVector::from_element(1, 0.4)],
            vec![DMatrix::from_element(1, 1, 0.05), DMatrix::from_element(1, 1, 0.1)],
        )
        .unwrap()
    }

    fn two_comp_2d() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-0.5, 0.2]), DVector::from_vec(vec![0.4, -0.3])],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.02]),
                DMatrix::from_row_slice(2, 2, &[0.03, -0.005, -0.005, 0.05]),
            ],
        )
        .unwrap()
    }

    fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, step: f64) -> DVector<f64> {
        DVector::from_fn(x.len(), |k, _| {
            let mut a = x.clone();
            let mut b = x.clone();
            a[k] += step;
            b[k] -= step;
            (f(&a) - f(&b)) / (2.0 * step)
        })
    }

    #[test]
    fn rejects_invalid_mixtures() {
        let m = vec![DVector::zeros(1)];
        assert!(GaussianMixture::new(vec![0.5], m.clone(), vec![DMatrix::identity(1, 1)]).is_err());
        assert!(GaussianMixture::new(vec![1.0], m.clone(), vec![-DMatrix::identity(1, 1)]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianMixture::new(vec![1.0], vec![DVector::zeros(2)], vec![asym]).is_err());
    }

    #[test]
    fn standard_gaussian_is_stationary() {
        let g = GaussianMixture::standard(3);
        for t in [0.0, 0.3, 2.0] {
            let m = g.marginal_at(t).unwrap();
            assert!(m.means()[0].norm() == 0.0);
            assert!((&m.covs()[0] - DMatrix::identity(3, 3)).abs().max() < 1e-15);
        }
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert!((g.score(&x).unwrap() + &x).norm() < 1e-14);
        assert!(g.marginal_at(-1.0).is_err());
    }

    #[test]
    fn single_component_score() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let m = DVector::from_vec(vec![1.0, -1.0]);
        let g = GaussianMixture::gaussian(m.clone(), c.clone()).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.7]);
        let want = -c.try_inverse().unwrap() * (&x - &m);
        assert!((g.score(&x).unwrap() - want).norm() < 1e-12);
        assert!(g.score(&DVector::from_vec(vec![f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn score_matches_finite_difference_1d() {
        let g = two_comp_1d();
        let x = DVector::from_element(1, 0.3);
        let fd = fd_grad(|y| g.log_density(y).unwrap(), &x, 1e-5);
        assert!((g.score(&x).unwrap() - fd).norm() < 1e-6);
    }

    #[test]
    fn score_matches_finite_difference_across_times() {
        for g in [two_comp_1d(), two_comp_2d()] {
            for t in [0.1, 0.5, 1.0, 2.0] {
                let m = g.marginal_at(t).unwrap();
                let p = m.prepare().unwrap();
                let mut r = rng::stream(3, &[t.to_bits()]);
                for _ in 0..20 {
                    let x = rng::normals(&mut r, g.dim()) * 1.5;
                    let s = p.score(&x).unwrap();
                    let fd = fd_grad(|y| p.log_density(y).unwrap(), &x, 1e-5);
                    assert!((&s - &fd).norm() <= 1e-5 * s.norm().max(1e-3), "t={t}");
                }
            }
        }
    }

    #[test]
    fn near_point_mass_marginal_matches_forward_simulation() {
        let m0 = DVector::from_vec(vec![0.8, -0.4]);
        let g = GaussianMixture::gaussian(m0.clone(), DMatrix::identity(2, 2) * 1e-12).unwrap();
        let t = 2f64.ln();
        let marg = g.marginal_at(t).unwrap();
        assert!((&marg.means()[0] - &m0 * 0.5).norm() < 1e-15);
        assert!((&marg.covs()[0] - DMatrix::identity(2, 2) * 0.75).abs().max() < 1e-12);
        let n = 100_000;
        let pairs = g.sample_x0_xt_pairs(t, n, 5).unwrap();
        let mean = pairs.iter().fold(DVector::zeros(2), |a, (_, xt)| a + xt) / n as f64;
        let tol = 3.0 * 0.75f64.sqrt() / (n as f64).sqrt();
        assert!((mean - &m0 * 0.5).amax() < tol);
    }

    #[test]
    fn pairs_properties() {
        let g = two_comp_2d();
        let p = g.sample_x0_xt_pairs(0.0, 10, 1).unwrap();
        assert!(p.iter().all(|(a, b)| a == b));
        let a = g.sample_x0_xt_pairs(0.7, 50, 9).unwrap();
        let b = g.sample_x0_xt_pairs(0.7, 50, 9).unwrap();
        assert_eq!(a, b);
        let n = 100_000;
        let t = 0.7;
        let (mu, s2) = mu_sigma(t).unwrap();
        let big = g.sample_x0_xt_pairs(t, n, 2).unwrap();
        let mean = big.iter().fold(DVector::zeros(2), |a, (_, xt)| a + xt) / n as f64;
        let sd = (g.covariance().diagonal() * (mu * mu)).map(|v| (v + s2).sqrt());
        for k in 0..2 {
            assert!((mean[k] - mu * g.mean()[k]).abs() < 4.0 * sd[k] / (n as f64).sqrt());
        }
    }

    #[test]
    fn posterior_of_standard_gaussian() {
        let g = GaussianMixture::standard(2);
        let t = 0.8;
        let (mu, _) = mu_sigma(t).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let m = g.posterior_x0_given_xt(t, &x).unwrap().mean();
        assert!((m - &x * mu).norm() < 1e-14);
        assert!(g.posterior_x0_given_xt(0.0, &x).is_err());
    }

    #[test]
    fn tweedie_identity() {
        let g = two_comp_2d();
        let mut r = rng::stream(11, &[]);
        for _ in 0..50 {
            let t = 0.05 + 3.0 * rand::Rng::random::<f64>(&mut r);
            let x = rng::normals(&mut r, 2) * 2.0;
            let pm = PosteriorMap::new(&g, t).unwrap();
            let (mu, s2) = pm.mu_sigma2();
            let lhs = pm.posterior_mean(&x).unwrap() * (mu / s2) - &x / s2;
            let rhs = g.marginal_at(t).unwrap().score(&x).unwrap();
            assert!((&lhs - &rhs).norm() <= 1e-8 * rhs.norm().max(1.0));
        }
    }

    #[test]
    fn posterior_mean_matches_importance_sampling() {
        let g = two_comp_1d();
        let t = 0.6;
        let (mu, s2) = mu_sigma(t).unwrap();
        let x = DVector::from_element(1, 0.1);
        let draws = g.sample(1_000_000, 17);
        let (mut sw, mut swx, mut sw2, mut sw2x, mut sw2x2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for x0 in &draws {
            let w = (-(x[0] - mu * x0[0]).powi(2) / (2.0 * s2)).exp();
            sw += w;
            swx += w * x0[0];
            sw2 += w * w;
            sw2x += w * w * x0[0];
            sw2x2 += w * w * x0[0] * x0[0];
        }
        let est = swx / sw;
        // delta-method SE of a self-normalized ratio
        let var = (sw2x2 - 2.0 * est * sw2x + est * est * sw2) / (sw * sw);
        let want = g.posterior_x0_given_xt(t, &x).unwrap().mean()[0];
        assert!((est - want).abs() < 3.0 * var.sqrt(), "{est} vs {want}");
    }

    #[test]
    fn embedding_examples() {
        let latent =
            GaussianMixture::gaussian(DVector::from_element(1, 0.5), DMatrix::from_element(1, 1, 0.01)).unwrap();
        let p = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let e = SubspaceEmbedding::new(p, latent.clone()).unwrap();
        let g = e.embed();
        assert_eq!(g.means()[0], DVector::from_vec(vec![0.5, 0.0, 0.0]));
        let mut want = DMatrix::zeros(3, 3);
        want[(0, 0)] = 0.01;
        assert_eq!(g.covs()[0], want);

        let id = SubspaceEmbedding::new(DMatrix::identity(1, 1), latent.clone()).unwrap();
        assert_eq!(id.embed(), latent);

        let lat2 = two_comp_2d();
        let e = SubspaceEmbedding::random(5, lat2, 3).unwrap();
        let gram = e.matrix().transpose() * e.matrix();
        assert!((gram - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        let t = 0.4;
        let (_, s2) = mu_sigma(t).unwrap();
        let marg = e.embed().marginal_at(t).unwrap();
        for c in marg.covs() {
            assert!(linalg::min_eigenvalue(c) >= s2 - 1e-12);
        }
        assert!(SubspaceEmbedding::new(DMatrix::from_element(2, 1, 1.0), latent).is_err());
    }

    #[test]
    fn generators() {
        let g = GaussianMixture::grid(2, 3, 0.5, 0.01).unwrap();
        assert_eq!(g.n_components(), 9);
        assert!(g.mean().norm() < 1e-15);
        let w = GaussianMixture::two_wells(2, 1.0, 0.02).unwrap();
        assert_eq!(w.means()[1], DVector::from_vec(vec![0.5, 0.0]));
    }

    #[test]
    fn serde_round_trip() {
        let g = two_comp_2d();
        let j = serde_json::to_string(&g).unwrap();
        let back: GaussianMixture = serde_json::from_str(&j).unwrap();
        assert_eq!(back, g);
    }

    proptest! {
        #[test]
        fn marginal_at_zero_is_identity(m in -1.0f64..1.0, v in 0.01f64..2.0, s in 0.0f64..3.0) {
            let g = GaussianMixture::gaussian(DVector::from_element(1, m), DMatrix::from_element(1, 1, v)).unwrap();
            let a = g.marginal_at(0.0).unwrap().marginal_at(s).unwrap();
            let b = g.marginal_at(s).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn responsibilities_survive_far_tails(x in -1e3f64..1e3) {
            let g = two_comp_1d();
            let s = g.score(&DVector::from_element(1, x)).unwrap();
            prop_assert!(s[0].is_finite());
        }
    }
}
