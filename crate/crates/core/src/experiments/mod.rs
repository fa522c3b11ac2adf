//! Config-driven experiment suites.
//!
//! A TOML (or JSON) config names a suite and optionally overrides the
//! reference, weight, schedule, estimator, sampler and metric settings; any
//! omitted section falls back to the suite's benchmark. The report embeds the
//! fully resolved config, so rerunning from it reproduces every number.
//! Wall-clock data lives only in `timestamps`.

pub mod benchmarks;
pub mod plot;
mod suites;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::matching::{EstimatorParams, LambdaChoice, LambdaName};
use crate::reference::GaussianMixture;
use crate::rng::{self, tag};
use crate::sampler::{GuidanceMode, Postprocess, SamplerConfig, ScoreMode};
use crate::schedule::VpSchedule;
use crate::weights::WeightSpec;

pub const REPORT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    IdentityCheck,
    PosteriorGaussian,
    RateSweepN,
    RegularizationGap,
    VanillaVsRegularized,
    LowdimAdaptivity,
    DiscretizationSweep,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::IdentityCheck,
        Suite::PosteriorGaussian,
        Suite::RateSweepN,
        Suite::RegularizationGap,
        Suite::VanillaVsRegularized,
        Suite::LowdimAdaptivity,
        Suite::DiscretizationSweep,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::IdentityCheck => "identity_check",
            Suite::PosteriorGaussian => "posterior_gaussian",
            Suite::RateSweepN => "rate_sweep_n",
            Suite::RegularizationGap => "regularization_gap",
            Suite::VanillaVsRegularized => "vanilla_vs_regularized",
            Suite::LowdimAdaptivity => "lowdim_adaptivity",
            Suite::DiscretizationSweep => "discretization_sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|x| x.name()).collect();
            Error::Config(format!("unknown suite `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Reference distribution in a config: an explicit mixture or a named family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    Mixture(GaussianMixture),
    Standard { d: usize },
    Grid { d: usize, per_axis: usize, half_width: f64, var: f64 },
    TwoWells { d: usize, separation: f64, var: f64 },
}

impl ReferenceSpec {
    pub fn build(&self) -> Result<GaussianMixture> {
        match self {
            ReferenceSpec::Mixture(g) => Ok(g.clone()),
            ReferenceSpec::Standard { d } => {
                if *d == 0 {
                    return Err(Error::Config("standard reference needs d >= 1".into()));
                }
                Ok(GaussianMixture::standard(*d))
            }
            ReferenceSpec::Grid { d, per_axis, half_width, var } => {
                GaussianMixture::grid(*d, *per_axis, *half_width, *var)
            }
            ReferenceSpec::TwoWells { d, separation, var } => GaussianMixture::two_wells(*d, *separation, *var),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerParams {
    #[serde(default = "SamplerParams::default_n")]
    pub n_particles: usize,
    #[serde(default = "SamplerParams::default_guidance")]
    pub guidance: GuidanceMode,
    #[serde(default = "SamplerParams::default_score_mode")]
    pub score_mode: ScoreMode,
    #[serde(default = "Postprocess::on")]
    pub postprocess: Postprocess,
}

impl SamplerParams {
    fn default_n() -> usize {
        10_000
    }
    fn default_guidance() -> GuidanceMode {
        GuidanceMode::Oracle { n_mc: 256 }
    }
    fn default_score_mode() -> ScoreMode {
        ScoreMode::Exact
    }

    pub fn config(&self, sched: VpSchedule, seed: u64) -> SamplerConfig {
        SamplerConfig {
            sched,
            n_particles: self.n_particles,
            seed,
            guidance: self.guidance.clone(),
            score_mode: self.score_mode,
            postprocess: self.postprocess,
        }
    }
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            n_particles: Self::default_n(),
            guidance: Self::default_guidance(),
            score_mode: Self::default_score_mode(),
            postprocess: Postprocess::on(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricParams {
    #[serde(default = "MetricParams::default_n_proj")]
    pub n_proj: usize,
    #[serde(default)]
    pub seed: u64,
}

impl MetricParams {
    fn default_n_proj() -> usize {
        64
    }
}

impl Default for MetricParams {
    fn default() -> Self {
        Self { n_proj: Self::default_n_proj(), seed: 0 }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_true() -> bool {
    true
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub suite: Option<String>,
    #[serde(default)]
    pub p0: Option<ReferenceSpec>,
    #[serde(default)]
    pub weight: Option<WeightSpec>,
    #[serde(default)]
    pub schedule: Option<VpSchedule>,
    #[serde(default)]
    pub estimator: Option<EstimatorParams>,
    #[serde(default)]
    pub sampler: Option<SamplerParams>,
    #[serde(default)]
    pub metric: MetricParams,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Artifacts are written here when set.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub plot: bool,
    /// Suite-specific parameters; unknown keys are rejected when the suite parses them.
    #[serde(default = "empty_object")]
    pub params: serde_json::Value,
}

impl ExperimentConfig {
    pub fn for_suite(suite: Suite) -> Self {
        Self {
            suite: Some(suite.name().to_string()),
            p0: None,
            weight: None,
            schedule: None,
            estimator: None,
            sampler: None,
            metric: MetricParams::default(),
            seeds: default_seeds(),
            output_dir: None,
            plot: true,
            params: empty_object(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a `.json` config (or a report, whose embedded config is used) or a TOML config.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let inner = v.get("config").filter(|_| v.get("rows").is_some()).cloned().unwrap_or(v);
            serde_json::from_value(inner).map_err(|e| Error::Config(e.to_string()))
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn suite(&self) -> Result<Option<Suite>> {
        self.suite.as_deref().map(Suite::parse).transpose()
    }

    /// Fill every omitted section with the suite's defaults and validate the result.
    pub fn resolve(&self) -> Result<Resolved> {
        let suite = self.suite()?;
        let d = suite.map(suites::defaults);
        let p0_spec = match (&self.p0, &d) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d.p0.clone(),
            (None, None) => return Err(Error::Config("config needs a p0 section".into())),
        };
        let p0 = p0_spec.build()?;
        let weight = self.weight.clone().or_else(|| d.as_ref().map(|d| d.weight.clone()));
        let sched = self.schedule.or(d.as_ref().map(|d| d.schedule)).unwrap_or(VpSchedule::new(6.0, 0.01, 128)?);
        let estimator = self.estimator.clone().or_else(|| d.as_ref().map(|d| d.estimator.clone())).unwrap_or_default();
        let sampler = self.sampler.clone().or_else(|| d.as_ref().map(|d| d.sampler.clone())).unwrap_or_default();
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.metric.n_proj == 0 {
            return Err(Error::Config("metric n_proj must be positive".into()));
        }
        if estimator.m_features == 0 || estimator.n_train == 0 || !(estimator.lambda_scale > 0.0) {
            return Err(Error::Config("estimator needs M >= 1, n_train >= 1 and lambda_scale > 0".into()));
        }
        if let LambdaChoice::Fixed(l) = estimator.lambda {
            if !(l >= 0.0) {
                return Err(Error::Config("fixed lambda must be nonnegative".into()));
            }
        }
        let params = match suite {
            Some(s) => suites::resolve_params(s, &self.params)?,
            None => self.params.clone(),
        };
        let weight = match weight {
            Some(w) => {
                let w = w.bind_reference(&p0);
                w.validate(p0.dim())?;
                Some(w)
            }
            None => None,
        };
        let config = ExperimentConfig {
            suite: suite.map(|s| s.name().to_string()),
            p0: Some(p0_spec),
            weight: weight.clone(),
            schedule: Some(sched),
            estimator: Some(estimator.clone()),
            sampler: Some(sampler.clone()),
            metric: self.metric,
            seeds: self.seeds.clone(),
            output_dir: self.output_dir.clone(),
            plot: self.plot,
            params,
        };
        Ok(Resolved { suite, p0, weight, sched, estimator, sampler, config })
    }

    /// Hash of the resolved numeric content; output location and plotting are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.plot = true;
        let doc = serde_json::to_string(&c).unwrap_or_default();
        hex::encode(Sha256::digest(doc.as_bytes()))[..16].to_string()
    }
}

/// A config with every section resolved and the reference built.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub suite: Option<Suite>,
    pub p0: GaussianMixture,
    pub weight: Option<WeightSpec>,
    pub sched: VpSchedule,
    pub estimator: EstimatorParams,
    pub sampler: SamplerParams,
    pub config: ExperimentConfig,
}

impl Resolved {
    pub fn weight(&self) -> Result<&WeightSpec> {
        self.weight.as_ref().ok_or_else(|| Error::Config("this run needs a weight section".into()))
    }

    pub fn seeds(&self) -> &[u64] {
        &self.config.seeds
    }

    pub fn metric(&self) -> MetricParams {
        self.config.metric
    }
}

/// Derived seed for one purpose within a run.
pub fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(rng::splitmix64(seed), |acc, p| rng::splitmix64(acc ^ rng::splitmix64(*p)))
}

/// One measurement: a group (method, knob), a swept parameter and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub group: String,
    pub param: f64,
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
}

impl Row {
    pub fn new(group: &str, param: f64, seed: u64, values: &[(&str, f64)]) -> Self {
        Self {
            group: group.to_string(),
            param,
            seed,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: String,
    pub param: f64,
    pub metric: String,
    pub median: f64,
    pub n_seeds: usize,
}

/// OLS slope of `log median` against `log param`, with a seed-resampling band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub group: String,
    pub metric: String,
    pub slope: f64,
    pub intercept: f64,
    pub band: [f64; 2],
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, value: f64, bound: f64, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, value, bound, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub doob_core: String,
    pub report_format: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix_secs: u64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub suite: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub versions: Versions,
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
    pub slopes: Vec<SlopeFit>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub timestamps: Timestamps,
}

impl ExperimentReport {
    /// The report without its timestamps; identical across reruns of the same config.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).unwrap_or_default();
        if let Some(o) = v.as_object_mut() {
            o.remove("timestamps");
        }
        serde_json::to_string_pretty(&v).unwrap_or_default()
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn median(&self, group: &str, param: f64, metric: &str) -> Option<f64> {
        self.aggregates.iter().find(|a| a.group == group && a.param == param && a.metric == metric).map(|a| a.median)
    }

    pub fn slope(&self, group: &str, metric: &str) -> Option<&SlopeFit> {
        self.slopes.iter().find(|s| s.group == group && s.metric == metric)
    }

    /// Write `report.json`, `rows.csv`, `aggregates.csv` and, if enabled, one SVG per swept metric.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        write_rows_csv(&dir.join("rows.csv"), &self.rows)?;
        let mut w = csv::Writer::from_path(dir.join("aggregates.csv"))?;
        w.write_record(["group", "param", "metric", "median", "n_seeds"])?;
        for a in &self.aggregates {
            w.write_record([
                a.group.clone(),
                a.param.to_string(),
                a.metric.clone(),
                a.median.to_string(),
                a.n_seeds.to_string(),
            ])?;
        }
        w.flush()?;
        if self.config.plot {
            for (metric, svg) in self.plots() {
                std::fs::write(dir.join(format!("{metric}.svg")), svg)?;
            }
        }
        Ok(())
    }

    /// Median-versus-parameter charts for every metric swept over more than one parameter value.
    pub fn plots(&self) -> Vec<(String, String)> {
        let metrics: BTreeSet<&str> = self.aggregates.iter().map(|a| a.metric.as_str()).collect();
        let mut out = Vec::new();
        for m in metrics {
            let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
            for a in self.aggregates.iter().filter(|a| a.metric == m) {
                series.entry(&a.group).or_default().push((a.param, a.median));
            }
            if series.values().all(|p| p.len() < 2) {
                continue;
            }
            let all_pos = |f: fn(&(f64, f64)) -> f64| series.values().flatten().all(|p| f(p) > 0.0);
            let (log_x, log_y) = (all_pos(|p| p.0), all_pos(|p| p.1));
            let series: Vec<plot::Series> = series
                .into_iter()
                .map(|(name, mut points)| {
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    plot::Series { name: name.to_string(), points }
                })
                .collect();
            out.push((
                m.to_string(),
                plot::line_chart(&format!("{}: {m}", self.suite), "parameter", m, &series, log_x, log_y),
            ));
        }
        out
    }
}

/// CSV with columns `group,param,seed` followed by the union of value names.
pub fn write_rows_csv(path: &Path, rows: &[Row]) -> Result<()> {
    let keys: BTreeSet<&str> = rows.iter().flat_map(|r| r.values.keys().map(|k| k.as_str())).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["group", "param", "seed"];
    header.extend(keys.iter().copied());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.group.clone(), r.param.to_string(), r.seed.to_string()];
        rec.extend(keys.iter().map(|k| r.values.get(*k).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Medians over seeds for every `(group, param, metric)`, in first-appearance order.
pub fn aggregate(rows: &[Row]) -> Vec<Aggregate> {
    let mut order: Vec<(String, u64, String)> = Vec::new();
    let mut vals: BTreeMap<(String, u64, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        for (k, v) in &r.values {
            let key = (r.group.clone(), r.param.to_bits(), k.clone());
            if !vals.contains_key(&key) {
                order.push(key.clone());
            }
            vals.entry(key).or_default().push(*v);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let v = &vals[&key];
            Aggregate {
                group: key.0,
                param: f64::from_bits(key.1),
                metric: key.2,
                median: linalg::median(v),
                n_seeds: v.len(),
            }
        })
        .collect()
}

/// Per-parameter medians of `metric` within `group`, sorted by parameter.
pub fn medians_by_param(rows: &[Row], group: &str, metric: &str) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = per_param(rows, group, metric)
        .into_iter()
        .map(|(p, v)| (p, linalg::median(&v.into_iter().map(|x| x.1).collect::<Vec<_>>())))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn per_param(rows: &[Row], group: &str, metric: &str) -> Vec<(f64, Vec<(u64, f64)>)> {
    let mut m: BTreeMap<u64, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.group == group) {
        if let Some(v) = r.values.get(metric) {
            m.entry(r.param.to_bits()).or_default().push((r.seed, *v));
        }
    }
    let mut out: Vec<_> = m.into_iter().map(|(p, v)| (f64::from_bits(p), v)).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Log-log slope of seed medians against the parameter, with a percentile band from
/// resampling the seed set with replacement (the same resample at every parameter).
pub fn loglog_slope(rows: &[Row], group: &str, metric: &str, level: f64, n_boot: usize, seed: u64) -> Result<SlopeFit> {
    let table = per_param(rows, group, metric);
    if table.len() < 2 {
        return Err(Error::Config(format!("slope of {metric} in {group} needs two parameter values")));
    }
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = table[0].1.iter().map(|x| x.0).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let lookup = |p: usize, s: u64| table[p].1.iter().find(|x| x.0 == s).map(|x| x.1);
    let xs: Vec<f64> = table.iter().map(|t| t.0.ln()).collect();
    let fit = |pick: &[u64]| -> Option<(f64, f64)> {
        let ys: Option<Vec<f64>> = (0..table.len())
            .map(|p| {
                let v: Option<Vec<f64>> = pick.iter().map(|&s| lookup(p, s)).collect();
                v.map(|v| linalg::median(&v).ln())
            })
            .collect();
        ys.map(|ys| linalg::ols(&xs, &ys))
    };
    let (slope, intercept) =
        fit(&seeds).ok_or_else(|| Error::Config(format!("{metric} in {group} is missing seeds at some parameter")))?;
    let mut boots = Vec::with_capacity(n_boot);
    for b in 0..n_boot {
        let mut r = rng::stream(seed, &[tag::EVAL, b as u64]);
        let pick: Vec<u64> = (0..seeds.len()).map(|_| seeds[rand::Rng::random_range(&mut r, 0..seeds.len())]).collect();
        if let Some((s, _)) = fit(&pick) {
            boots.push(s);
        }
    }
    let a = (1.0 - level) / 2.0;
    let band = if boots.is_empty() {
        [slope, slope]
    } else {
        [linalg::quantile(&boots, a), linalg::quantile(&boots, 1.0 - a)]
    };
    Ok(SlopeFit { group: group.to_string(), metric: metric.to_string(), slope, intercept, band, level })
}

pub(crate) fn to_matrix(points: &[DVector<f64>]) -> DMatrix<f64> {
    linalg::stack_rows(points)
}

/// Rows, slopes and checks produced by one suite.
#[derive(Debug, Default)]
pub(crate) struct SuiteOutput {
    pub rows: Vec<Row>,
    pub slopes: Vec<SlopeFit>,
    pub checks: Vec<Check>,
}

/// Execute the configured suite, write artifacts if an output directory is set, and return the report.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let r = cfg.resolve()?;
    let suite = r.suite.ok_or_else(|| Error::Config("config does not name a suite".into()))?;
    tracing::info!(suite = suite.name(), "running suite");
    let out = suites::run(suite, &r)?;
    let report = ExperimentReport {
        suite: suite.name().to_string(),
        config_hash: r.config.hash(),
        config: r.config.clone(),
        versions: Versions { doob_core: env!("CARGO_PKG_VERSION").to_string(), report_format: REPORT_FORMAT },
        aggregates: aggregate(&out.rows),
        passed: out.checks.iter().all(|c| c.passed),
        rows: out.rows,
        slopes: out.slopes,
        checks: out.checks,
        timestamps: Timestamps { started_unix_secs: started, wall_secs: clock.elapsed().as_secs_f64() },
    };
    if let Some(dir) = &r.config.output_dir {
        report.write_artifacts(dir)?;
    }
    Ok(report)
}

/// Parse a lambda given on the command line: a number, `auto` or `vanilla`.
pub fn parse_lambda(s: &str) -> Result<LambdaChoice> {
    match s {
        "auto" => Ok(LambdaChoice::Named(LambdaName::Auto)),
        "vanilla" => Ok(LambdaChoice::Named(LambdaName::Vanilla)),
        _ => s
            .parse::<f64>()
            .map(LambdaChoice::Fixed)
            .map_err(|_| Error::Config(format!("lambda must be a number, auto or vanilla, got `{s}`"))),
    }
}
