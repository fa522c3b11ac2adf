//! Exponential-integrator simulation of the reference and guided reverse SDEs.
//!
//! One step maps `z ↦ e^h z + 2(e^h - 1)(s + g) + sqrt(e^{2h} - 1) ξ`, with the
//! score `s` and guidance `g` evaluated at the left grid point. Every particle
//! owns its substreams (initial draw, diffusion noise, score noise), so outputs
//! do not depend on scheduling or thread count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::matching::{anchor_times, EstimatorSet, HEstimator};
use crate::oracle::{DoobOracle, OracleMode, OracleSlice};
use crate::reference::{GaussianMixture, PreparedMixture};
use crate::rng::{self, tag};
use crate::schedule::{mu_sigma, VpSchedule};
use crate::weights::WeightSpec;

pub const DEFAULT_EPS_TARGET: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Oracle {
        /// Posterior draws per evaluation when the weight is not conjugate.
        #[serde(default = "default_oracle_mc")]
        n_mc: usize,
    },
    Estimator {
        /// Number of anchor times; every grid time when absent.
        #[serde(default)]
        anchors: Option<usize>,
    },
}

fn default_oracle_mc() -> usize {
    256
}

impl GuidanceMode {
    pub fn label(&self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Oracle { .. } => "oracle",
            GuidanceMode::Estimator { .. } => "estimator",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreMode {
    Exact,
    /// Adds `N(0, eps_ref²/d · I)` to the score at every step.
    Noisy {
        eps_ref: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Postprocess {
    pub enabled: bool,
    /// Truncation radius; defaults to the tail-bound prescription when absent.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_eps_target")]
    pub eps_target: f64,
}

fn default_eps_target() -> f64 {
    DEFAULT_EPS_TARGET
}

impl Postprocess {
    pub fn off() -> Self {
        Self { enabled: false, radius: None, eps_target: DEFAULT_EPS_TARGET }
    }

    pub fn on() -> Self {
        Self { enabled: true, radius: None, eps_target: DEFAULT_EPS_TARGET }
    }
}

/// `R² = (4dμ_{T0}² + 8σ_{T0}²)·log(1/ε_target)`.
pub fn default_radius(d: usize, t0: f64, eps_target: f64) -> f64 {
    let (mu, s2) = mu_sigma(t0).unwrap_or((1.0, 0.0));
    ((4.0 * d as f64 * mu * mu + 8.0 * s2) * (1.0 / eps_target).ln()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(rename = "schedule")]
    pub sched: VpSchedule,
    pub n_particles: usize,
    pub seed: u64,
    pub guidance: GuidanceMode,
    pub score_mode: ScoreMode,
    pub postprocess: Postprocess,
}

impl SamplerConfig {
    /// Reference configuration: no guidance, exact score, no post-processing.
    pub fn reference(sched: VpSchedule, n_particles: usize, seed: u64) -> Self {
        Self {
            sched,
            n_particles,
            seed,
            guidance: GuidanceMode::None,
            score_mode: ScoreMode::Exact,
            postprocess: Postprocess::off(),
        }
    }

    /// Guided configuration; post-processing defaults on.
    pub fn guided(sched: VpSchedule, n_particles: usize, seed: u64, guidance: GuidanceMode) -> Self {
        Self { guidance, postprocess: Postprocess::on(), ..Self::reference(sched, n_particles, seed) }
    }

    pub fn radius(&self, d: usize) -> f64 {
        self.postprocess
            .radius
            .unwrap_or_else(|| default_radius(d, self.sched.early_stop(), self.postprocess.eps_target))
    }

    fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be positive".into()));
        }
        if let ScoreMode::Noisy { eps_ref } = self.score_mode {
            if !(eps_ref >= 0.0 && eps_ref.is_finite()) {
                return Err(Error::Config("eps_ref must be finite and nonnegative".into()));
            }
        }
        if self.postprocess.enabled {
            if let Some(r) = self.postprocess.radius {
                if !(r > 0.0) {
                    return Err(Error::Config("postprocess radius must be positive".into()));
                }
            }
            if !(self.postprocess.eps_target > 0.0 && self.postprocess.eps_target < 1.0) {
                return Err(Error::Config("eps_target must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub config_hash: String,
    pub seed: u64,
    pub guidance_mode: String,
    pub n: usize,
    pub d: usize,
    pub truncated: usize,
    pub schedule: VpSchedule,
    /// Excluded from determinism checks.
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// One particle per row.
    pub points: DMatrix<f64>,
    pub meta: BatchMeta,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    /// Writes `<path>` as CSV and `<path>.meta.json` beside it.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_points_csv(path, &self.points)?;
        std::fs::write(meta_path(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// CSV with header `x0,x1,...`, one row per particle.
pub fn write_points_csv(path: &Path, points: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..points.ncols()).map(|k| format!("x{k}")))?;
    for i in 0..points.nrows() {
        w.write_record(points.row(i).iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let d = r.headers()?.len();
    let mut vals = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != d {
            return Err(Error::Config(format!("{}: ragged row {}", path.display(), n + 1)));
        }
        for f in rec.iter() {
            vals.push(f.trim().parse::<f64>().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?);
        }
        n += 1;
    }
    Ok(DMatrix::from_row_slice(n, d, &vals))
}

/// `e^h z + 2(e^h - 1)(s + g) + sqrt(e^{2h} - 1) ξ`.
pub fn step(z: &DVector<f64>, s: &DVector<f64>, g: &DVector<f64>, h: f64, xi: &DVector<f64>) -> DVector<f64> {
    let drift = s + g;
    z * h.exp() + drift * (2.0 * h.exp_m1()) + xi * (2.0 * h).exp_m1().sqrt()
}

fn step_no_guidance(z: &DVector<f64>, s: &DVector<f64>, h: f64, xi: &DVector<f64>) -> DVector<f64> {
    z * h.exp() + s * (2.0 * h.exp_m1()) + xi * (2.0 * h).exp_m1().sqrt()
}

/// `z ↦ μ_{T0}⁻¹ z 1{‖z‖ ≤ R}`; returns the map's output and the truncated count.
pub fn postprocess(points: &DMatrix<f64>, radius: f64, mu_t0: f64) -> (DMatrix<f64>, usize) {
    let mut out = points.clone();
    let mut truncated = 0;
    for mut row in out.row_iter_mut() {
        if row.norm() <= radius {
            row /= mu_t0;
        } else {
            row.fill(0.0);
            truncated += 1;
        }
    }
    (out, truncated)
}

/// Guidance source for a guided run.
pub enum Guidance<'a> {
    Oracle,
    Estimators(&'a EstimatorSet),
}

enum Drift<'a> {
    Zero,
    Oracle(Vec<OracleSlice>),
    Estimator(Vec<&'a HEstimator>),
}

struct Plan<'a> {
    sched: VpSchedule,
    scores: Vec<PreparedMixture>,
    drift: Drift<'a>,
    noise_sd: Option<f64>,
    seed: u64,
    d: usize,
}

impl Plan<'_> {
    fn particle(&self, i: u64) -> Result<DVector<f64>> {
        let h = self.sched.step_size();
        let mut z = rng::normals(&mut rng::stream(self.seed, &[tag::INIT, i]), self.d);
        for k in 0..self.sched.steps() {
            let mut s = self.scores[k].score(&z)?;
            if let Some(sd) = self.noise_sd {
                s += rng::normals(&mut rng::stream(self.seed, &[tag::SCORE_NOISE, i, k as u64]), self.d) * sd;
            }
            let xi = rng::normals(&mut rng::stream(self.seed, &[tag::DIFFUSION, i, k as u64]), self.d);
            z = match &self.drift {
                Drift::Zero => step_no_guidance(&z, &s, h, &xi),
                Drift::Oracle(slices) => step(&z, &s, &slices[k].eval(&z)?.guidance, h, &xi),
                Drift::Estimator(ests) => step(&z, &s, &ests[k].eval_guidance(&z), h, &xi),
            };
            if !linalg::is_finite(&z) {
                return Err(Error::Domain(format!("particle {i} diverged at step {k}")));
            }
        }
        Ok(z)
    }
}

fn config_hash(p0: &GaussianMixture, spec: Option<&WeightSpec>, cfg: &SamplerConfig) -> String {
    let doc = serde_json::json!({ "p0": p0, "weight": spec, "sampler": cfg });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))[..16].to_string()
}

fn build_plan<'a>(
    p0: &GaussianMixture,
    spec: Option<&WeightSpec>,
    cfg: &SamplerConfig,
    guidance: Option<Guidance<'a>>,
) -> Result<Plan<'a>> {
    cfg.validate()?;
    let sched = cfg.sched;
    let k = sched.steps();
    let scores = (0..k)
        .into_par_iter()
        .map(|j| p0.marginal_at(sched.forward_time_at(j))?.prepare())
        .collect::<Result<Vec<_>>>()?;
    let constant = spec.is_some_and(|s| s.constant_value().is_some());
    let drift = match (&cfg.guidance, guidance) {
        (GuidanceMode::None, _) => Drift::Zero,
        (GuidanceMode::Oracle { n_mc }, Some(Guidance::Oracle)) => {
            let spec = spec.ok_or_else(|| Error::Config("guided sampling needs a weight".into()))?;
            if constant {
                Drift::Zero
            } else {
                let mode = if spec.is_conjugate() {
                    OracleMode::ClosedForm
                } else {
                    OracleMode::MonteCarlo { n_mc: *n_mc, seed: cfg.seed }
                };
                let oracle = DoobOracle::new(p0.clone(), sched, spec.clone(), mode)?;
                Drift::Oracle(
                    (0..k)
                        .into_par_iter()
                        .map(|j| oracle.slice_forward(sched.forward_time_at(j)))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        }
        (GuidanceMode::Estimator { anchors }, Some(Guidance::Estimators(set))) => {
            set.covers(&anchor_times(&sched, *anchors))?;
            if constant {
                Drift::Zero
            } else {
                let grid = sched.time_grid();
                Drift::Estimator((0..k).map(|j| set.nearest(grid[j])).collect())
            }
        }
        (mode, _) => {
            return Err(Error::Config(format!("guidance mode {} needs a matching guidance source", mode.label())))
        }
    };
    let noise_sd = match cfg.score_mode {
        ScoreMode::Exact => None,
        ScoreMode::Noisy { eps_ref } => Some(eps_ref / (p0.dim() as f64).sqrt()),
    };
    Ok(Plan { sched, scores, drift, noise_sd, seed: cfg.seed, d: p0.dim() })
}

/// Simulate the particles with the given substream indices, one output row each.
pub fn simulate(
    p0: &GaussianMixture,
    spec: Option<&WeightSpec>,
    cfg: &SamplerConfig,
    guidance: Option<Guidance<'_>>,
    indices: &[u64],
) -> Result<DMatrix<f64>> {
    let plan = build_plan(p0, spec, cfg, guidance)?;
    let rows = indices.par_iter().map(|&i| plan.particle(i)).collect::<Result<Vec<_>>>()?;
    let d = p0.dim();
    Ok(DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k]))
}

fn run(
    p0: &GaussianMixture,
    spec: Option<&WeightSpec>,
    cfg: &SamplerConfig,
    guidance: Option<Guidance<'_>>,
) -> Result<SampleBatch> {
    let start = Instant::now();
    let indices: Vec<u64> = (0..cfg.n_particles as u64).collect();
    let mut points = simulate(p0, spec, cfg, guidance, &indices)?;
    let mut truncated = 0;
    if cfg.postprocess.enabled {
        let (mu_t0, _) = mu_sigma(cfg.sched.early_stop())?;
        let (p, t) = postprocess(&points, cfg.radius(p0.dim()), mu_t0);
        points = p;
        truncated = t;
    }
    Ok(SampleBatch {
        meta: BatchMeta {
            config_hash: config_hash(p0, spec, cfg),
            seed: cfg.seed,
            guidance_mode: cfg.guidance.label().to_string(),
            n: points.nrows(),
            d: points.ncols(),
            truncated,
            schedule: cfg.sched,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
        points,
    })
}

/// Reference time reversal from `N(0, I)` to forward time `T0`.
pub fn reference_sample(p0: &GaussianMixture, cfg: &SamplerConfig) -> Result<SampleBatch> {
    if cfg.guidance != GuidanceMode::None {
        return Err(Error::Config("reference sampling needs guidance mode none".into()));
    }
    run(p0, None, cfg, None)
}

/// Guided sampling toward `q0 ∝ w·p0` with oracle or estimated guidance.
pub fn guided_sample(
    p0: &GaussianMixture,
    spec: &WeightSpec,
    cfg: &SamplerConfig,
    estimators: Option<&EstimatorSet>,
) -> Result<SampleBatch> {
    let spec = spec.clone().bind_reference(p0);
    spec.validate(p0.dim())?;
    let g = match &cfg.guidance {
        GuidanceMode::None => {
            return Err(Error::Config("guided sampling needs guidance mode oracle or estimator".into()))
        }
        GuidanceMode::Oracle { .. } => Guidance::Oracle,
        GuidanceMode::Estimator { .. } => Guidance::Estimators(
            estimators.ok_or_else(|| Error::Config("estimator guidance needs fitted estimators".into()))?,
        ),
    };
    run(p0, Some(&spec), cfg, Some(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::FeatureMap;
    use crate::metrics;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn step_examples() {
        let z = v(&[0.7, -1.2]);
        let zero = DVector::zeros(2);
        let h = 0.3;
        assert_eq!(step(&z, &zero, &zero, h, &zero), &z * h.exp());
        let s = v(&[0.1, 0.4]);
        let xi = v(&[1.0, -0.5]);
        assert_eq!(step(&z, &s, &zero, h, &xi), step_no_guidance(&z, &s, h, &xi));
        let out = step(&v(&[0.0]), &v(&[0.4]), &v(&[0.6]), 2f64.ln(), &v(&[0.0]));
        assert!((out[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn postprocess_examples() {
        let p = DMatrix::from_row_slice(3, 2, &[3.0, 4.0, 0.3, 0.4, 1.0, 0.0]);
        let (out, t) = postprocess(&p, 2.0, 0.5);
        assert_eq!(t, 1);
        assert_eq!(out.row(0).norm(), 0.0);
        assert_eq!(out.row(1).transpose(), v(&[0.6, 0.8]));
        let (same, t) = postprocess(&p, f64::INFINITY, 1.0);
        assert_eq!((same, t), (p, 0));
    }

    #[test]
    fn default_radius_formula() {
        let r = default_radius(1, 0.01, 1e-4);
        let (mu, s2) = mu_sigma(0.01).unwrap();
        assert!((r * r - (4.0 * mu * mu + 8.0 * s2) * 1e4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reference_is_deterministic_and_index_keyed() {
        let p0 = GaussianMixture::two_wells(2, 1.0, 0.05).unwrap();
        let sched = VpSchedule::new(2.0, 0.01, 16).unwrap();
        let cfg = SamplerConfig::reference(sched, 40, 3);
        let a = reference_sample(&p0, &cfg).unwrap();
        let b = reference_sample(&p0, &cfg).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.meta.config_hash, b.meta.config_hash);
        let idx: Vec<u64> = (0..40).rev().collect();
        let rev = simulate(&p0, None, &cfg, None, &idx).unwrap();
        for i in 0..40 {
            assert_eq!(rev.row(i), a.points.row(39 - i));
        }
        let c = reference_sample(&p0, &SamplerConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn constant_weight_reproduces_reference_bitwise() {
        let p0 = GaussianMixture::two_wells(1, 1.0, 0.05).unwrap();
        let sched = VpSchedule::new(3.0, 0.01, 32).unwrap();
        let reference = reference_sample(&p0, &SamplerConfig::reference(sched, 64, 9)).unwrap();
        let mut cfg = SamplerConfig::guided(sched, 64, 9, GuidanceMode::Oracle { n_mc: 16 });
        cfg.postprocess = Postprocess::off();
        let spec = WeightSpec::constant(2.0);
        let guided = guided_sample(&p0, &spec, &cfg, None).unwrap();
        assert_eq!(guided.points, reference.points);
        let est = HEstimator::new(FeatureMap::constant_only(1), v(&[2.0]), 0.0, (2.0, 2.0), 0.0).unwrap();
        let set = EstimatorSet::new(vec![est]).unwrap();
        cfg.guidance = GuidanceMode::Estimator { anchors: Some(1) };
        assert_eq!(guided_sample(&p0, &spec, &cfg, Some(&set)).unwrap().points, reference.points);
    }

    #[test]
    fn missing_anchor_is_named() {
        let p0 = GaussianMixture::standard(1);
        let sched = VpSchedule::new(1.0, 0.0, 4).unwrap();
        let est = HEstimator::new(FeatureMap::constant_only(1), v(&[1.0]), 0.0, (1.0, 1.0), 0.0).unwrap();
        let set = EstimatorSet::new(vec![est]).unwrap();
        let cfg = SamplerConfig::guided(sched, 4, 0, GuidanceMode::Estimator { anchors: None });
        let err = guided_sample(&p0, &WeightSpec::exp_linear(v(&[1.0])), &cfg, Some(&set)).unwrap_err();
        assert!(matches!(err, Error::MissingAnchor(t) if t == 0.25));
    }

    #[test]
    fn standard_gaussian_is_preserved() {
        let p0 = GaussianMixture::standard(2);
        let sched = VpSchedule::new(4.0, 0.01, 512).unwrap();
        let n = 4000;
        let out = reference_sample(&p0, &SamplerConfig::reference(sched, n, 1)).unwrap();
        let gen = |n: usize, seed: u64| {
            let s = p0.sample(n, seed);
            DMatrix::from_fn(n, 2, |i, k| s[i][k])
        };
        let thr = metrics::same_distribution_threshold(n, 2, 32, 5, &gen);
        let fresh = gen(n, 12345);
        let (sw, _) = metrics::sliced_w2(&out.points, &fresh, 32, 5).unwrap();
        assert!(sw < thr, "{sw} vs threshold {thr}");
    }

    #[test]
    fn batch_csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("doob-batch-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p0 = GaussianMixture::standard(3);
        let b = reference_sample(&p0, &SamplerConfig::reference(VpSchedule::new(1.0, 0.1, 4).unwrap(), 7, 1)).unwrap();
        let path = dir.join("batch.csv");
        b.write(&path).unwrap();
        assert_eq!(read_points_csv(&path).unwrap(), b.points);
        let meta: BatchMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(&path)).unwrap()).unwrap();
        assert_eq!(meta.n, 7);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn guidance_enters_linearly(z in -3.0f64..3.0, s in -3.0f64..3.0, g in -3.0f64..3.0, h in 1e-3f64..1.0, xi in -3.0f64..3.0) {
            let (z, s, g, xi) = (v(&[z]), v(&[s]), v(&[g]), v(&[xi]));
            let diff = step(&z, &s, &g, h, &xi) - step(&z, &s, &DVector::zeros(1), h, &xi);
            let want = &g * (2.0 * h.exp_m1());
            prop_assert!((diff - want).norm() <= 1e-12 * (1.0 + z.norm() + s.norm() + g.norm() + xi.norm()));
        }

        #[test]
        fn postprocess_radial_bounds(xs in proptest::collection::vec(-5.0f64..5.0, 2..40), r in 0.5f64..5.0, mu in 0.1f64..1.0) {
            let n = xs.len() / 2;
            let p = DMatrix::from_row_slice(n, 2, &xs[..2 * n]);
            let (out, _) = postprocess(&p, r, mu);
            for row in out.row_iter() {
                let nrm = row.norm();
                prop_assert!(nrm == 0.0 || nrm <= r / mu * (1.0 + 1e-12));
            }
        }
    }
}
