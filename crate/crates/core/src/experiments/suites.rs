use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::benchmarks;
use super::{
    loglog_slope, medians_by_param, sub_seed, to_matrix, Check, ReferenceSpec, Resolved, Row, SamplerParams, Suite,
    SuiteOutput,
};
use crate::error::{Error, Result};
use crate::matching::{
    build_features, clamp_bounds, fit_anchor_estimators, fit_responses, guidance_error, h1_error, EstimatorParams,
    EstimatorSet, FeatureMap, FitSettings, HEstimator, LambdaChoice, LambdaName, Population1d,
};
use crate::metrics;
use crate::oracle::{lowdim_pairs, DoobOracle, OracleMode};
use crate::reference::{GaussianMixture, SubspaceEmbedding};
use crate::rng::{self, tag};
use crate::sampler::{guided_sample, reference_sample, GuidanceMode, Postprocess, SamplerConfig, ScoreMode};
use crate::schedule::VpSchedule;
use crate::weights::WeightSpec;

const FIT: u64 = 0x0066_6974;
const TARGET: u64 = 0x0074_6774;

pub(super) struct Defaults {
    pub p0: ReferenceSpec,
    pub weight: WeightSpec,
    pub schedule: VpSchedule,
    pub estimator: EstimatorParams,
    pub sampler: SamplerParams,
}

fn sched(t: f64, t0: f64, k: usize) -> VpSchedule {
    VpSchedule::new(t, t0, k).expect("valid default schedule")
}

pub(super) fn defaults(suite: Suite) -> Defaults {
    let (p1, w1) = benchmarks::exp_tilt_1d();
    let base = Defaults {
        p0: ReferenceSpec::Mixture(p1),
        weight: w1,
        schedule: sched(6.0, 0.01, 128),
        estimator: EstimatorParams::default(),
        sampler: SamplerParams::default(),
    };
    match suite {
        Suite::IdentityCheck => {
            let (p0, _) = benchmarks::two_component_posterior_2d();
            Defaults {
                p0: ReferenceSpec::Mixture(p0),
                weight: WeightSpec::constant(1.0),
                schedule: sched(4.0, 0.01, 64),
                estimator: EstimatorParams { m_features: 20, n_train: 2000, anchors: Some(8), ..Default::default() },
                sampler: SamplerParams { n_particles: 2000, postprocess: Postprocess::off(), ..Default::default() },
            }
        }
        Suite::PosteriorGaussian => {
            Defaults { estimator: EstimatorParams { anchors: Some(32), ..Default::default() }, ..base }
        }
        Suite::RateSweepN => Defaults { estimator: EstimatorParams { m_features: 40, ..Default::default() }, ..base },
        Suite::RegularizationGap => base,
        Suite::VanillaVsRegularized => {
            Defaults { estimator: EstimatorParams { m_features: 80, n_train: 8000, ..Default::default() }, ..base }
        }
        Suite::LowdimAdaptivity => {
            let (latent, w) = benchmarks::lowdim_latent();
            Defaults { p0: ReferenceSpec::Mixture(latent), weight: w, schedule: sched(3.0, 0.01, 64), ..base }
        }
        Suite::DiscretizationSweep => Defaults {
            p0: ReferenceSpec::Mixture(benchmarks::ablation_reference()),
            weight: WeightSpec::constant(1.0),
            sampler: SamplerParams { n_particles: 100_000, postprocess: Postprocess::off(), ..Default::default() },
            ..base
        },
    }
}

fn parse<T: DeserializeOwned + Serialize>(v: &serde_json::Value) -> Result<(T, serde_json::Value)> {
    let t: T = serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("suite params: {e}")))?;
    let back = serde_json::to_value(&t)?;
    Ok((t, back))
}

pub(super) fn resolve_params(suite: Suite, v: &serde_json::Value) -> Result<serde_json::Value> {
    let v = if v.is_null() { &serde_json::Value::Object(Default::default()) } else { v };
    Ok(match suite {
        Suite::IdentityCheck => parse::<IdentityParams>(v)?.1,
        Suite::PosteriorGaussian => parse::<PosteriorParams>(v)?.1,
        Suite::RateSweepN => parse::<RateParams>(v)?.1,
        Suite::RegularizationGap => parse::<GapParams>(v)?.1,
        Suite::VanillaVsRegularized => parse::<VvrParams>(v)?.1,
        Suite::LowdimAdaptivity => parse::<LowDimParams>(v)?.1,
        Suite::DiscretizationSweep => parse::<DiscretizationParams>(v)?.1,
    })
}

pub(super) fn run(suite: Suite, r: &Resolved) -> Result<SuiteOutput> {
    let p = &r.config.params;
    match suite {
        Suite::IdentityCheck => identity(r, &parse(p)?.0),
        Suite::PosteriorGaussian => posterior(r, &parse(p)?.0),
        Suite::RateSweepN => rate_sweep(r, &parse(p)?.0),
        Suite::RegularizationGap => regularization_gap(r, &parse(p)?.0),
        Suite::VanillaVsRegularized => vanilla_vs_regularized(r, &parse(p)?.0),
        Suite::LowdimAdaptivity => lowdim(r, &parse(p)?.0),
        Suite::DiscretizationSweep => discretization(r, &parse(p)?.0),
    }
}

fn default_modes() -> Vec<String> {
    vec!["oracle".into(), "estimator".into()]
}

fn guidance_for(mode: &str, r: &Resolved) -> Result<GuidanceMode> {
    match mode {
        "oracle" => Ok(match r.sampler.guidance {
            GuidanceMode::Oracle { n_mc } => GuidanceMode::Oracle { n_mc },
            _ => GuidanceMode::Oracle { n_mc: 256 },
        }),
        "estimator" => Ok(GuidanceMode::Estimator { anchors: r.estimator.anchors }),
        other => Err(Error::Config(format!("unknown guidance mode `{other}`; expected oracle or estimator"))),
    }
}

fn estimators(r: &Resolved, spec: &WeightSpec, seed: u64) -> Result<EstimatorSet> {
    EstimatorSet::new(fit_anchor_estimators(&r.p0, &r.sched, spec, &r.estimator, sub_seed(seed, &[FIT]))?)
}

fn guided_batch(r: &Resolved, spec: &WeightSpec, cfg: &SamplerConfig, seed: u64) -> Result<DMatrix<f64>> {
    let set = match cfg.guidance {
        GuidanceMode::Estimator { .. } => Some(estimators(r, spec, seed)?),
        _ => None,
    };
    Ok(guided_sample(&r.p0, spec, cfg, set.as_ref())?.points)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentityParams {
    #[serde(default = "default_modes")]
    modes: Vec<String>,
}

/// Guided runs with the configured weight against reference runs at the same seed, compared bit for bit.
fn identity(r: &Resolved, p: &IdentityParams) -> Result<SuiteOutput> {
    let spec = r.weight()?;
    let mut rows = Vec::new();
    for &seed in r.seeds() {
        let rcfg = SamplerConfig {
            postprocess: Postprocess::off(),
            ..SamplerConfig::reference(r.sched, r.sampler.n_particles, seed)
        };
        let rcfg = SamplerConfig { score_mode: r.sampler.score_mode, ..rcfg };
        let reference = reference_sample(&r.p0, &rcfg)?.points;
        for mode in &p.modes {
            let gcfg = SamplerConfig { guidance: guidance_for(mode, r)?, ..rcfg.clone() };
            let guided = guided_batch(r, spec, &gcfg, seed)?;
            let equal = guided.shape() == reference.shape()
                && guided.iter().zip(reference.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            let max_diff =
                if guided.shape() == reference.shape() { (&guided - &reference).amax() } else { f64::INFINITY };
            rows.push(Row::new(mode, 0.0, seed, &[("bitwise_equal", equal as u8 as f64), ("max_abs_diff", max_diff)]));
        }
    }
    let unequal = rows.iter().filter(|r| r.values["bitwise_equal"] != 1.0).count();
    let checks = vec![Check::new(
        "bitwise_identity",
        unequal == 0,
        unequal as f64,
        0.0,
        format!("{unequal} of {} guided runs differ from the reference run", rows.len()),
    )];
    Ok(SuiteOutput { rows, checks, ..Default::default() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosteriorParams {
    #[serde(default = "PosteriorParams::floor")]
    threshold_floor: f64,
    #[serde(default = "PosteriorParams::margin")]
    estimator_margin: f64,
    #[serde(default = "default_modes")]
    modes: Vec<String>,
}

impl PosteriorParams {
    fn floor() -> f64 {
        0.05
    }
    fn margin() -> f64 {
        0.05
    }
}

/// Guided samplers against exact tilted-target samples, scored by squared sliced W2.
fn posterior(r: &Resolved, p: &PosteriorParams) -> Result<SuiteOutput> {
    let spec = r.weight()?;
    let target = spec.tilted_target(&r.p0)?;
    let m = r.metric();
    let n = r.sampler.n_particles;
    let d = r.p0.dim();
    let gen = |k: usize, s: u64| to_matrix(&target.sample(k, s));
    let thr = metrics::same_distribution_threshold(n, d, m.n_proj, m.seed, &gen);
    let bound = p.threshold_floor.max(thr * thr);
    let mut rows = Vec::new();
    for &seed in r.seeds() {
        let tgt = gen(n, sub_seed(seed, &[TARGET]));
        for mode in &p.modes {
            let cfg = r.sampler.config(r.sched, seed);
            let cfg = SamplerConfig { guidance: guidance_for(mode, r)?, ..cfg };
            let pts = guided_batch(r, spec, &cfg, seed)?;
            let (w, se) = metrics::sliced_w2(&pts, &tgt, m.n_proj, m.seed)?;
            rows.push(Row::new(mode, 0.0, seed, &[("sliced_w2", w), ("sliced_w2_se", se), ("sliced_w2_sq", w * w)]));
        }
    }
    let med = |g: &str| medians_by_param(&rows, g, "sliced_w2_sq").first().map(|x| x.1);
    let mut checks = Vec::new();
    if let Some(o) = med("oracle") {
        checks.push(Check::new(
            "oracle_below_threshold",
            o < bound,
            o,
            bound,
            format!(
                "median squared sliced W2 {o:.3e}; calibrated threshold² {:.3e}, floor {}",
                thr * thr,
                p.threshold_floor
            ),
        ));
        if let Some(e) = med("estimator") {
            checks.push(Check::new(
                "estimator_within_margin",
                e <= o + p.estimator_margin,
                e,
                o + p.estimator_margin,
                format!("estimator {e:.3e} vs oracle {o:.3e} + {}", p.estimator_margin),
            ));
        }
    }
    Ok(SuiteOutput { rows, checks, ..Default::default() })
}

fn default_ns() -> Vec<usize> {
    vec![500, 2000, 8000, 32000]
}
fn half() -> f64 {
    0.5
}
fn default_n_eval() -> usize {
    20_000
}
fn default_level() -> f64 {
    0.9
}
fn default_n_boot() -> usize {
    1000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateParams {
    #[serde(default = "default_ns")]
    ns: Vec<usize>,
    /// Reverse time as a fraction of `T`.
    #[serde(default = "half")]
    t_fraction: f64,
    #[serde(default = "default_n_eval")]
    n_eval: usize,
    #[serde(default = "default_level")]
    band_level: f64,
    #[serde(default = "default_n_boot")]
    n_boot: usize,
}

fn oracle_for(r: &Resolved, spec: &WeightSpec, seed: u64) -> Result<DoobOracle> {
    let mode = if spec.is_conjugate() {
        OracleMode::ClosedForm
    } else {
        let n_mc = match r.sampler.guidance {
            GuidanceMode::Oracle { n_mc } => n_mc,
            _ => 256,
        };
        OracleMode::MonteCarlo { n_mc, seed }
    };
    DoobOracle::new(r.p0.clone(), r.sched, spec.clone(), mode)
}

fn reverse_time(r: &Resolved, fraction: f64) -> Result<f64> {
    let t = fraction * r.sched.terminal_time();
    if !(t > 0.0 && t < r.sched.terminal_time()) {
        return Err(Error::Config(format!("time fraction {fraction} must lie in (0, 1)")));
    }
    Ok(t)
}

struct Training {
    xt: Vec<DVector<f64>>,
    w: Vec<f64>,
    fm: FeatureMap,
}

fn training(r: &Resolved, spec: &WeightSpec, t: f64, n: usize, m: usize, seed: u64) -> Result<Training> {
    let s = r.sched.terminal_time() - t;
    let pairs = r.p0.sample_x0_xt_pairs(s, n, seed)?;
    let w = pairs.iter().map(|p| spec.eval(&p.0)).collect::<Result<Vec<_>>>()?;
    let xt: Vec<_> = pairs.into_iter().map(|p| p.1).collect();
    let fm = build_features(&xt, m.min(n), seed)?;
    Ok(Training { xt, w, fm })
}

fn fit(r: &Resolved, spec: &WeightSpec, tr: &Training, responses: &[f64], lambda: f64, t: f64) -> Result<HEstimator> {
    let clamp = clamp_bounds(spec, r.estimator.support_radius, &tr.w);
    fit_responses(&tr.xt, responses, &tr.fm, lambda, &FitSettings { t, clamp, ridge: r.estimator.ridge })
}

fn eval_points(r: &Resolved, t: f64, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    Ok(r.p0.marginal_at(r.sched.terminal_time() - t)?.sample(n, sub_seed(seed, &[tag::EVAL])))
}

fn error_values(
    est: &HEstimator,
    o: &DoobOracle,
    t: f64,
    pts: &[DVector<f64>],
    lambda: f64,
) -> Result<Vec<(&'static str, f64)>> {
    let (g, g_se) = guidance_error(est, o, t, pts)?;
    let h = h1_error(est, o, t, pts)?;
    Ok(vec![
        ("guidance_l2", g),
        ("guidance_l2_se", g_se),
        ("l2", h.l2),
        ("grad_l2", h.grad_l2),
        ("h1", (h.l2 * h.l2 + h.grad_l2 * h.grad_l2).sqrt()),
        ("lambda", lambda),
    ])
}

/// Error of the gradient-regularized estimator as the sample size grows.
fn rate_sweep(r: &Resolved, p: &RateParams) -> Result<SuiteOutput> {
    let spec = r.weight()?;
    let t = reverse_time(r, p.t_fraction)?;
    if p.ns.len() < 2 || p.ns.contains(&0) {
        return Err(Error::Config("rate sweep needs at least two positive sample sizes".into()));
    }
    let d = r.p0.dim();
    let jobs: Vec<(usize, u64)> = p.ns.iter().flat_map(|&n| r.seeds().iter().map(move |&s| (n, s))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(n, seed)| {
            let o = oracle_for(r, spec, seed)?;
            let tr = training(r, spec, t, n, r.estimator.m_features, sub_seed(seed, &[FIT, n as u64]))?;
            let lambda = r.estimator.lambda.resolve(n, d, r.estimator.lambda_scale);
            let est = fit(r, spec, &tr, &tr.w, lambda, t)?;
            let pts = eval_points(r, t, p.n_eval, seed)?;
            Ok(Row::new("regularized", n as f64, seed, &error_values(&est, &o, t, &pts, lambda)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let seed = r.metric().seed;
    let slopes = ["guidance_l2", "h1", "l2", "grad_l2"]
        .iter()
        .map(|m| loglog_slope(&rows, "regularized", m, p.band_level, p.n_boot, seed))
        .collect::<Result<Vec<_>>>()?;
    let med = medians_by_param(&rows, "regularized", "guidance_l2");
    let decreasing = med.windows(2).all(|w| w[1].1 < w[0].1);
    let g = &slopes[0];
    let checks = vec![
        Check::new(
            "median_guidance_error_strictly_decreasing",
            decreasing,
            med.last().map_or(f64::NAN, |x| x.1),
            med.first().map_or(f64::NAN, |x| x.1),
            format!("medians {:?}", med.iter().map(|x| x.1).collect::<Vec<_>>()),
        ),
        Check::new(
            "guidance_slope_negative",
            g.band[1] < 0.0,
            g.slope,
            0.0,
            format!("slope {:.3}, {:.0}% band [{:.3}, {:.3}]", g.slope, 100.0 * g.level, g.band[0], g.band[1]),
        ),
    ];
    Ok(SuiteOutput { rows, slopes, checks })
}

fn default_gap_lambdas() -> Vec<f64> {
    (0..7).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GapParams {
    #[serde(default = "half")]
    t_fraction: f64,
    #[serde(default = "default_gap_lambdas")]
    lambdas: Vec<f64>,
    #[serde(default = "GapParams::n_features")]
    n_features: usize,
    #[serde(default = "GapParams::lo")]
    lo: f64,
    #[serde(default = "GapParams::hi")]
    hi: f64,
    #[serde(default = "GapParams::bandwidth")]
    bandwidth: f64,
    #[serde(default = "GapParams::order")]
    order: usize,
    #[serde(default = "GapParams::ridge")]
    ridge: f64,
    #[serde(default = "GapParams::l2_band")]
    l2_band: [f64; 2],
    #[serde(default = "GapParams::grad_band")]
    grad_band: [f64; 2],
    #[serde(default = "GapParams::sandwich_lambdas")]
    sandwich_lambdas: Vec<f64>,
    #[serde(default = "GapParams::n_sandwich")]
    n_sandwich: usize,
    #[serde(default = "GapParams::slack")]
    sandwich_slack: f64,
    /// The sandwich uses its own basis, well conditioned enough to solve without a ridge.
    #[serde(default = "GapParams::sandwich_n_features")]
    sandwich_n_features: usize,
    #[serde(default = "GapParams::sandwich_lo")]
    sandwich_lo: f64,
    #[serde(default = "GapParams::sandwich_hi")]
    sandwich_hi: f64,
    #[serde(default = "GapParams::sandwich_bandwidth")]
    sandwich_bandwidth: f64,
}

impl GapParams {
    fn n_features() -> usize {
        60
    }
    fn lo() -> f64 {
        -6.0
    }
    fn hi() -> f64 {
        6.0
    }
    fn bandwidth() -> f64 {
        0.4
    }
    fn order() -> usize {
        120
    }
    fn ridge() -> f64 {
        1e-12
    }
    fn l2_band() -> [f64; 2] {
        [0.8, 1.2]
    }
    fn grad_band() -> [f64; 2] {
        [0.3, 0.7]
    }
    fn sandwich_lambdas() -> Vec<f64> {
        vec![0.1, 1.0, 10.0]
    }
    fn n_sandwich() -> usize {
        20
    }
    fn slack() -> f64 {
        1e-8
    }
    fn sandwich_n_features() -> usize {
        20
    }
    fn sandwich_lo() -> f64 {
        -4.0
    }
    fn sandwich_hi() -> f64 {
        4.0
    }
    fn sandwich_bandwidth() -> f64 {
        0.6
    }
}

/// Population λ-sweep on a 1D reference: regularization gaps, penalty monotonicity and the H¹ sandwich.
fn regularization_gap(r: &Resolved, p: &GapParams) -> Result<SuiteOutput> {
    let spec = r.weight()?;
    if !spec.is_conjugate() {
        return Err(Error::Unsupported("the population sweep needs a conjugate weight".into()));
    }
    let t = reverse_time(r, p.t_fraction)?;
    let o = DoobOracle::closed_form(r.p0.clone(), r.sched, spec.clone())?;
    let pop = Population1d::new(&o, t, p.order)?;
    let fm = FeatureMap::grid_1d(p.lo, p.hi, p.n_features, p.bandwidth)?;
    let clamp = (f64::MIN_POSITIVE, f64::MAX);
    let mut lambdas = p.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    if lambdas.len() < 2 || lambdas[0] <= 0.0 {
        return Err(Error::Config("the gap sweep needs at least two positive lambdas".into()));
    }
    let mut rows = Vec::new();
    let mut energies = Vec::new();
    for &l in &lambdas {
        let est = pop.fit(&fm, l, p.ridge, clamp)?;
        let (g0, g1) = pop.gaps(&fm, &est.theta);
        let e = pop.gradient_energy(&fm, &est.theta);
        energies.push(e);
        rows.push(Row::new("gap", l, 0, &[("l2_gap", g0), ("grad_gap", g1), ("gradient_energy", e)]));
    }
    let seed = r.seeds()[0];
    let sfm = FeatureMap::grid_1d(p.sandwich_lo, p.sandwich_hi, p.sandwich_n_features, p.sandwich_bandwidth)?;
    let mut min_slack = f64::INFINITY;
    for &l in &p.sandwich_lambdas {
        // no ridge: the bound is sharp at λ = 1 and holds only for the exact minimizer
        let h_l = pop.fit(&sfm, l, 0.0, clamp)?.theta;
        let j_l = pop.objective(&sfm, &h_l, l);
        for i in 0..p.n_sandwich {
            let dir = rng::normals(&mut rng::stream(seed, &[tag::EVAL, l.to_bits(), i as u64]), sfm.len());
            let h = &h_l + dir;
            let excess = pop.objective(&sfm, &h, l) - j_l;
            let (a, b) = pop.sq_norms_of_difference(&sfm, &h, &h_l);
            let mid = a + b;
            let lower = excess / l.max(1.0);
            let upper = excess / l.min(1.0);
            let slack = (mid - lower).min(upper - mid) / mid.abs().max(f64::MIN_POSITIVE);
            min_slack = min_slack.min(slack);
            rows.push(Row::new(
                "sandwich",
                l,
                i as u64,
                &[("h1_sq", mid), ("lower", lower), ("upper", upper), ("relative_slack", slack)],
            ));
        }
    }
    let slopes: Vec<_> =
        ["l2_gap", "grad_gap"].iter().map(|m| loglog_slope(&rows, "gap", m, 1.0, 0, seed)).collect::<Result<_>>()?;
    let band_check = |name: &str, s: f64, band: [f64; 2]| {
        Check::new(
            name,
            s >= band[0] && s <= band[1],
            s,
            band[1],
            format!("log-log slope {s:.3}, required [{}, {}]", band[0], band[1]),
        )
    };
    let monotone = energies.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    let checks = vec![
        band_check("l2_gap_slope", slopes[0].slope, p.l2_band),
        band_check("grad_gap_slope", slopes[1].slope, p.grad_band),
        Check::new(
            "penalty_monotone",
            monotone,
            energies.last().copied().unwrap_or(f64::NAN),
            energies[0],
            "∫|h'|² over the sweep",
        ),
        Check::new(
            "h1_sandwich",
            min_slack >= -p.sandwich_slack,
            min_slack,
            -p.sandwich_slack,
            format!("minimum relative slack over {} elements", p.n_sandwich * p.sandwich_lambdas.len()),
        ),
    ];
    Ok(SuiteOutput { rows, slopes, checks })
}

fn default_vvr_ns() -> Vec<usize> {
    vec![2000, 8000]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VvrParams {
    #[serde(default = "default_vvr_ns")]
    ns: Vec<usize>,
    #[serde(default = "VvrParams::frequency")]
    frequency: f64,
    /// Contamination amplitude; `1/frequency` when absent.
    #[serde(default)]
    amplitude: Option<f64>,
    #[serde(default = "half")]
    t_fraction: f64,
    #[serde(default = "default_n_eval")]
    n_eval: usize,
}

impl VvrParams {
    fn frequency() -> f64 {
        8.0
    }
}

/// Least squares with and without the gradient penalty on oscillation-contaminated responses.
fn vanilla_vs_regularized(r: &Resolved, p: &VvrParams) -> Result<SuiteOutput> {
    let spec = r.weight()?;
    let t = reverse_time(r, p.t_fraction)?;
    let amp = p.amplitude.unwrap_or(1.0 / p.frequency);
    let d = r.p0.dim();
    let reg_choice = match r.estimator.lambda {
        LambdaChoice::Named(LambdaName::Vanilla) => LambdaChoice::Named(LambdaName::Auto),
        c => c,
    };
    let jobs: Vec<(usize, u64)> = p.ns.iter().flat_map(|&n| r.seeds().iter().map(move |&s| (n, s))).collect();
    let rows: Vec<Row> = jobs
        .par_iter()
        .map(|&(n, seed)| {
            let o = oracle_for(r, spec, seed)?;
            let tr = training(r, spec, t, n, r.estimator.m_features, sub_seed(seed, &[FIT, n as u64]))?;
            let y = benchmarks::contaminate(&tr.xt, &tr.w, p.frequency, amp);
            let pts = eval_points(r, t, p.n_eval, seed)?;
            let lambda = reg_choice.resolve(n, d, r.estimator.lambda_scale);
            let van = fit(r, spec, &tr, &y, 0.0, t)?;
            let reg = fit(r, spec, &tr, &y, lambda, t)?;
            Ok(vec![
                Row::new("vanilla", n as f64, seed, &error_values(&van, &o, t, &pts, 0.0)?),
                Row::new("regularized", n as f64, seed, &error_values(&reg, &o, t, &pts, lambda)?),
            ])
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let n_max =
        *p.ns.iter().max().ok_or_else(|| Error::Config("vanilla_vs_regularized needs sample sizes".into()))? as f64;
    let at =
        |g: &str| medians_by_param(&rows, g, "grad_l2").into_iter().find(|x| x.0 == n_max).map_or(f64::NAN, |x| x.1);
    let (v, g) = (at("vanilla"), at("regularized"));
    let checks = vec![Check::new(
        "regularized_gradient_error_not_worse",
        g <= v,
        g,
        v,
        format!("median gradient L² error at n = {n_max}: regularized {g:.4e}, vanilla {v:.4e}"),
    )];
    Ok(SuiteOutput { rows, checks, ..Default::default() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LowDimParams {
    #[serde(default = "LowDimParams::ambient_dim")]
    ambient_dim: usize,
    #[serde(default = "LowDimParams::n_pairs")]
    n_pairs: usize,
    #[serde(default = "LowDimParams::t_fractions")]
    t_fractions: Vec<f64>,
    #[serde(default = "LowDimParams::scale")]
    scale: f64,
    #[serde(default = "LowDimParams::tolerance")]
    tolerance: f64,
}

impl LowDimParams {
    fn ambient_dim() -> usize {
        3
    }
    fn n_pairs() -> usize {
        100
    }
    fn t_fractions() -> Vec<f64> {
        vec![0.25, 0.5, 0.75]
    }
    fn scale() -> f64 {
        1.0
    }
    fn tolerance() -> f64 {
        1e-8
    }
}

/// `h*` on an embedded reference depends on `Pᵀx` only; pairs moved inside `range(P)` are the negative control.
fn lowdim(r: &Resolved, p: &LowDimParams) -> Result<SuiteOutput> {
    let latent: &GaussianMixture = &r.p0;
    if p.ambient_dim <= latent.dim() {
        return Err(Error::Config("ambient_dim must exceed the latent dimension".into()));
    }
    let mut rows = Vec::new();
    for &seed in r.seeds() {
        let e = SubspaceEmbedding::random(p.ambient_dim, latent.clone(), seed)?;
        let spec = benchmarks::lift_weight(r.weight()?, e.matrix())?;
        let mode =
            if spec.is_conjugate() { OracleMode::ClosedForm } else { OracleMode::MonteCarlo { n_mc: 4096, seed } };
        let o = DoobOracle::new(e.embed(), r.sched, spec, mode)?;
        for &f in &p.t_fractions {
            let t = reverse_time(r, f)?;
            for (group, broken) in [("orthogonal", false), ("in_range", true)] {
                let pairs = lowdim_pairs(&e, p.n_pairs, p.scale, broken, sub_seed(seed, &[tag::EVAL]));
                let c = o.check_lowdim_representation(t, &pairs)?;
                rows.push(Row::new(
                    group,
                    t,
                    seed,
                    &[("max_deviation", c.max_deviation), ("max_z", c.max_z), ("passed", c.passed as u8 as f64)],
                ));
            }
        }
    }
    let worst =
        |g: &str| rows.iter().filter(|r| r.group == g).map(|r| r.values["max_deviation"]).fold(f64::NAN, f64::max);
    let least =
        |g: &str| rows.iter().filter(|r| r.group == g).map(|r| r.values["max_deviation"]).fold(f64::NAN, f64::min);
    let undetected = rows.iter().filter(|r| r.group == "in_range" && r.values["passed"] == 1.0).count();
    let w = worst("orthogonal");
    let checks = vec![
        Check::new(
            "orthogonal_pairs_agree",
            w <= p.tolerance,
            w,
            p.tolerance,
            "max |h*(x) - h*(x + v)| with v ⊥ range(P)",
        ),
        Check::new(
            "negative_control_detected",
            undetected == 0,
            least("in_range"),
            p.tolerance,
            format!("{undetected} in-range pair sets passed the representation check"),
        ),
    ];
    Ok(SuiteOutput { rows, checks, ..Default::default() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscretizationParams {
    #[serde(default = "DiscretizationParams::eps_values")]
    eps_values: Vec<f64>,
    #[serde(default = "DiscretizationParams::ks")]
    ks: Vec<usize>,
    #[serde(default = "DiscretizationParams::ts")]
    ts: Vec<f64>,
    /// The `T` ablation keeps the step size fixed at `1/steps_per_unit`.
    #[serde(default = "DiscretizationParams::steps_per_unit")]
    steps_per_unit: usize,
}

impl DiscretizationParams {
    fn eps_values() -> Vec<f64> {
        vec![0.5, 0.1, 0.0]
    }
    fn ks() -> Vec<usize> {
        vec![8, 32, 128]
    }
    fn ts() -> Vec<f64> {
        vec![2.0, 4.0, 8.0]
    }
    fn steps_per_unit() -> usize {
        32
    }
}

/// Reference-sampler ablations of the score error, step count and terminal time, each in isolation.
fn discretization(r: &Resolved, p: &DiscretizationParams) -> Result<SuiteOutput> {
    let n = r.sampler.n_particles;
    let t0 = r.sched.early_stop();
    let marginal = r.p0.marginal_at(t0)?;
    let mut eps = p.eps_values.clone();
    eps.sort_by(|a, b| b.total_cmp(a));
    let mut ks = p.ks.clone();
    ks.sort_unstable();
    let mut ts = p.ts.clone();
    ts.sort_by(f64::total_cmp);
    let mut runs: Vec<(&str, f64, VpSchedule, ScoreMode)> = Vec::new();
    for &e in &eps {
        let mode = if e > 0.0 { ScoreMode::Noisy { eps_ref: e } } else { ScoreMode::Exact };
        runs.push(("eps_ref", e, r.sched, mode));
    }
    for &k in &ks {
        runs.push(("K", k as f64, VpSchedule::new(r.sched.terminal_time(), t0, k)?, ScoreMode::Exact));
    }
    for &t in &ts {
        let k = (t * p.steps_per_unit as f64).round().max(1.0) as usize;
        runs.push(("T", t, VpSchedule::new(t, t0, k)?, ScoreMode::Exact));
    }
    let m = r.metric();
    let mut rows = Vec::new();
    for &seed in r.seeds() {
        let tgt = to_matrix(&marginal.sample(n, sub_seed(seed, &[TARGET])));
        for (group, value, sched, mode) in &runs {
            let cfg = SamplerConfig { score_mode: *mode, ..SamplerConfig::reference(*sched, n, seed) };
            let pts = reference_sample(&r.p0, &cfg)?.points;
            let (w, _) = metrics::sliced_w2(&pts, &tgt, m.n_proj, m.seed)?;
            rows.push(Row::new(group, *value, seed, &[("w2_sq", w * w)]));
        }
    }
    let mut checks = Vec::new();
    for (group, improving) in
        [("eps_ref", eps.clone()), ("K", ks.iter().map(|&k| k as f64).collect()), ("T", ts.clone())]
    {
        let med = medians_by_param(&rows, group, "w2_sq");
        let ordered: Vec<f64> =
            improving.iter().map(|v| med.iter().find(|x| x.0 == *v).map_or(f64::NAN, |x| x.1)).collect();
        let ok = ordered.windows(2).all(|w| w[1] <= w[0]);
        checks.push(Check::new(
            &format!("{group}_monotone"),
            ok,
            *ordered.last().unwrap_or(&f64::NAN),
            ordered[0],
            format!("median W2² as {group} improves: {ordered:?}"),
        ));
    }
    Ok(SuiteOutput { rows, checks, ..Default::default() })
}

#[cfg(test)]
mod tests {
    use super::super::{run_suite, ExperimentConfig};
    use super::*;

    #[test]
    fn every_suite_has_resolvable_defaults() {
        for s in Suite::ALL {
            let c = ExperimentConfig::for_suite(s).resolve().unwrap();
            assert_eq!(c.suite, Some(s));
            assert!(c.config.params.is_object());
        }
    }

    #[test]
    fn small_identity_suite_passes() {
        let mut c = ExperimentConfig::for_suite(Suite::IdentityCheck);
        c.seeds = vec![1];
        c.sampler = Some(SamplerParams { n_particles: 50, postprocess: Postprocess::off(), ..Default::default() });
        let rep = run_suite(&c).unwrap();
        assert!(rep.passed, "{:?}", rep.checks);
        assert_eq!(rep.rows.len(), 2);
        let mut c2 = c.clone();
        c2.weight = Some(WeightSpec::exp_linear(DVector::from_vec(vec![1.0, 0.0])));
        c2.params = serde_json::json!({ "modes": ["oracle"] });
        assert!(!run_suite(&c2).unwrap().passed);
    }

    #[test]
    fn small_lowdim_suite_passes() {
        let mut c = ExperimentConfig::for_suite(Suite::LowdimAdaptivity);
        c.seeds = vec![2];
        c.params = serde_json::json!({ "n_pairs": 10 });
        let rep = run_suite(&c).unwrap();
        assert!(rep.passed, "{:?}", rep.checks);
    }

    #[test]
    fn small_gap_suite_reports_slopes() {
        let mut c = ExperimentConfig::for_suite(Suite::RegularizationGap);
        c.params = serde_json::json!({ "n_sandwich": 3 });
        let rep = run_suite(&c).unwrap();
        assert!(rep.check("l2_gap_slope").is_some());
        assert!(rep.check("h1_sandwich").unwrap().passed);
        assert!(rep.check("penalty_monotone").unwrap().passed);
    }

    #[test]
    fn unresolvable_params_are_rejected() {
        let mut c = ExperimentConfig::for_suite(Suite::RateSweepN);
        c.params = serde_json::json!({ "ns": [100] });
        assert!(run_suite(&c).is_err());
        let mut c = ExperimentConfig::for_suite(Suite::PosteriorGaussian);
        c.params = serde_json::json!({ "modes": ["nope"] });
        c.seeds = vec![0];
        c.sampler = Some(SamplerParams { n_particles: 20, ..Default::default() });
        assert!(run_suite(&c).is_err());
    }
}
