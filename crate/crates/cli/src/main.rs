//! `doob`: run samplers, fit estimators, evaluate the oracle, compare batches and run experiment suites.
//!
//! Exit status is 0 on success, 1 on any configuration or runtime error, and 2
//! when `experiment --check` finds a failed acceptance check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use doob_core::experiments::{self, plot, ExperimentConfig, ExperimentReport};
use doob_core::matching::{anchor_times, fit_anchor_estimators, EstimatorSet};
use doob_core::metrics::{self, MetricReport};
use doob_core::sampler::{self, GuidanceMode, SampleBatch};
use doob_core::DoobOracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricKind {
    SlicedW2,
    #[value(name = "w2-1d")]
    W21d,
}

#[derive(Debug, Parser)]
#[command(name = "doob", version, about = "Doob h-transform guidance for diffusion samplers")]
struct Cli {
    /// Experiment or sampler config (TOML, or JSON such as an earlier report).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the config's seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; never changes numeric output.
    #[arg(long, global = true, env = "DOOB_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured sampler and write the batch.
    Sample {
        /// Fitted estimators for estimator guidance; fitted on the fly when absent.
        #[arg(long)]
        estimators: Option<PathBuf>,
    },
    /// Fit one estimator per anchor time and write them as JSON.
    FitH,
    /// Evaluate h*, its gradient and the guidance on a regular grid (d ≤ 2).
    Oracle {
        /// Reverse time in (0, T).
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
        hi: f64,
        /// Grid points per axis.
        #[arg(long, default_value_t = 41)]
        n: usize,
    },
    /// Compare two batch CSV files.
    Metric {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value = "sliced-w2")]
        metric: MetricKind,
        #[arg(long, default_value_t = 64)]
        n_proj: usize,
    },
    /// Run the configured experiment suite.
    Experiment {
        /// Exit with status 2 if any acceptance check fails.
        #[arg(long)]
        check: bool,
    },
    /// Render a CSV (experiment rows or a sample batch) to SVG.
    Plot {
        input: PathBuf,
        /// Destination; defaults to the input with an `.svg` extension.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

enum Outcome {
    Ok,
    ChecksFailed,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Sample { estimators } => sample(&cli, estimators.as_deref()),
        Command::FitH => fit_h(&cli),
        Command::Oracle { t, lo, hi, n } => oracle(&cli, *t, *lo, *hi, *n),
        Command::Metric { a, b, metric: kind, n_proj } => metric(&cli, a, b, *kind, *n_proj),
        Command::Experiment { check } => experiment(&cli, *check),
        Command::Plot { input, output } => plot_csv(input, output.as_deref()),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("this command needs --config")?;
    Ok(ExperimentConfig::load(path)?)
}

fn base_seed(cli: &Cli, cfg: &ExperimentConfig) -> u64 {
    cli.seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0))
}

fn create_out(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(&cli.out)
}

fn sample(cli: &Cli, estimators: Option<&Path>) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let r = cfg.resolve()?;
    let seed = base_seed(cli, &cfg);
    let scfg = r.sampler.config(r.sched, seed);
    let batch = match &scfg.guidance {
        GuidanceMode::None => sampler::reference_sample(&r.p0, &scfg)?,
        GuidanceMode::Oracle { .. } => sampler::guided_sample(&r.p0, r.weight()?, &scfg, None)?,
        GuidanceMode::Estimator { .. } => {
            let set = match estimators {
                Some(p) => read_estimators(p)?,
                None => EstimatorSet::new(fit_anchor_estimators(&r.p0, &r.sched, r.weight()?, &r.estimator, seed)?)?,
            };
            sampler::guided_sample(&r.p0, r.weight()?, &scfg, Some(&set))?
        }
    };
    let dir = create_out(cli)?;
    let path = write_batch(dir, &batch, cli.format)?;
    println!("{}", path.display());
    Ok(Outcome::Ok)
}

fn write_batch(dir: &Path, batch: &SampleBatch, format: Format) -> Result<PathBuf> {
    match format {
        Format::Csv => {
            let p = dir.join("samples.csv");
            batch.write(&p)?;
            Ok(p)
        }
        Format::Json => {
            let p = dir.join("samples.json");
            let rows: Vec<Vec<f64>> = (0..batch.len()).map(|i| batch.row(i).iter().copied().collect()).collect();
            let doc = serde_json::json!({ "meta": batch.meta, "points": rows });
            std::fs::write(&p, serde_json::to_string_pretty(&doc)?)?;
            Ok(p)
        }
    }
}

fn read_estimators(path: &Path) -> Result<EstimatorSet> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing estimators in {}", path.display()))
}

fn fit_h(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let r = cfg.resolve()?;
    let seed = base_seed(cli, &cfg);
    let set = EstimatorSet::new(fit_anchor_estimators(&r.p0, &r.sched, r.weight()?, &r.estimator, seed)?)?;
    set.covers(&anchor_times(&r.sched, r.estimator.anchors))?;
    let path = create_out(cli)?.join("estimators.json");
    std::fs::write(&path, serde_json::to_string(&set)?)?;
    println!("{}", path.display());
    Ok(Outcome::Ok)
}

fn oracle(cli: &Cli, t: f64, lo: f64, hi: f64, n: usize) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let r = cfg.resolve()?;
    let d = r.p0.dim();
    if d > 2 {
        bail!("grid evaluation supports d <= 2, got d = {d}");
    }
    if n < 2 || !(hi > lo) {
        bail!("grid needs n >= 2 and hi > lo");
    }
    let spec = r.weight()?.clone();
    let mode = if spec.is_conjugate() {
        doob_core::OracleMode::ClosedForm
    } else {
        doob_core::OracleMode::MonteCarlo { n_mc: 4096, seed: base_seed(cli, &cfg) }
    };
    let o = DoobOracle::new(r.p0.clone(), r.sched, spec, mode)?;
    let sl = o.slice(t)?;
    let axis: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let points: Vec<DVector<f64>> = if d == 1 {
        axis.iter().map(|&x| DVector::from_element(1, x)).collect()
    } else {
        axis.iter().flat_map(|&x| axis.iter().map(move |&y| DVector::from_vec(vec![x, y]))).collect()
    };
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    header.extend(["h".to_string(), "h_se".to_string()]);
    header.extend((0..d).map(|k| format!("grad{k}")));
    header.extend((0..d).map(|k| format!("guidance{k}")));
    let mut records = Vec::with_capacity(points.len());
    for x in &points {
        let e = sl.eval(x)?;
        let mut rec: Vec<f64> = x.iter().copied().collect();
        rec.extend([e.h.value, e.h.se]);
        rec.extend(e.grad.iter().copied());
        rec.extend(e.guidance.iter().copied());
        records.push(rec);
    }
    let dir = create_out(cli)?;
    let path = match cli.format {
        Format::Csv => {
            let p = dir.join("oracle.csv");
            let mut w = csv::Writer::from_path(&p)?;
            w.write_record(&header)?;
            for rec in &records {
                w.write_record(rec.iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
            p
        }
        Format::Json => {
            let p = dir.join("oracle.json");
            let rows: Vec<serde_json::Value> = records
                .iter()
                .map(|rec| {
                    serde_json::Value::Object(
                        header.iter().cloned().zip(rec.iter().map(|v| serde_json::json!(v))).collect(),
                    )
                })
                .collect();
            std::fs::write(&p, serde_json::to_string_pretty(&serde_json::json!({ "t": t, "rows": rows }))?)?;
            p
        }
    };
    println!("{}", path.display());
    Ok(Outcome::Ok)
}

fn metric(cli: &Cli, a: &Path, b: &Path, kind: MetricKind, n_proj: usize) -> Result<Outcome> {
    let pa = sampler::read_points_csv(a).with_context(|| format!("reading {}", a.display()))?;
    let pb = sampler::read_points_csv(b).with_context(|| format!("reading {}", b.display()))?;
    let seed = cli.seed.unwrap_or(0);
    let report = match kind {
        MetricKind::SlicedW2 => {
            let (value, se) = metrics::sliced_w2(&pa, &pb, n_proj, seed)?;
            MetricReport {
                name: "sliced_w2".into(),
                value,
                standard_error: se,
                n_a: pa.nrows(),
                n_b: pb.nrows(),
                seed: Some(seed),
            }
        }
        MetricKind::W21d => {
            if pa.ncols() != 1 || pb.ncols() != 1 {
                bail!("w2-1d needs one-dimensional batches");
            }
            let value = metrics::w2_1d(pa.as_slice(), pb.as_slice())?;
            MetricReport {
                name: "w2_1d".into(),
                value,
                standard_error: 0.0,
                n_a: pa.nrows(),
                n_b: pb.nrows(),
                seed: None,
            }
        }
    };
    match cli.format {
        Format::Json => println!("{}", serde_json::to_string(&report)?),
        Format::Csv => {
            println!("name,value,standard_error,n_a,n_b,seed");
            println!(
                "{},{},{},{},{},{}",
                report.name,
                report.value,
                report.standard_error,
                report.n_a,
                report.n_b,
                report.seed.map(|s| s.to_string()).unwrap_or_default()
            );
        }
    }
    Ok(Outcome::Ok)
}

fn experiment(cli: &Cli, check: bool) -> Result<Outcome> {
    let mut cfg = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.seeds = (0..cfg.seeds.len().max(1) as u64).map(|i| s.wrapping_add(i)).collect();
    }
    cfg.output_dir = Some(cli.out.clone());
    let report = experiments::run_suite(&cfg)?;
    print_summary(&report, cli.format)?;
    Ok(if check && !report.passed { Outcome::ChecksFailed } else { Outcome::Ok })
}

fn print_summary(report: &ExperimentReport, format: Format) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string(&report.checks)?),
        Format::Csv => {
            println!("check,passed,value,bound,detail");
            for c in &report.checks {
                println!("{},{},{},{},\"{}\"", c.name, c.passed, c.value, c.bound, c.detail.replace('"', "'"));
            }
        }
    }
    Ok(())
}

fn plot_csv(input: &Path, output: Option<&Path>) -> Result<Outcome> {
    let mut rdr = csv::Reader::from_path(input).with_context(|| format!("reading {}", input.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let title = input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let svg = if header.first().map(String::as_str) == Some("group") {
        let rows: Vec<experiments::Row> = read_rows(&mut rdr, &header)?;
        let aggregates = experiments::aggregate(&rows);
        let metric = header.get(3).context("rows file has no value columns")?;
        let mut series: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
        for a in aggregates.iter().filter(|a| &a.metric == metric) {
            series.entry(a.group.clone()).or_default().push((a.param, a.median));
        }
        let series: Vec<plot::Series> = series
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                plot::Series { name, points }
            })
            .collect();
        let pos = |f: fn(&(f64, f64)) -> f64| series.iter().flat_map(|s| &s.points).all(|p| f(p) > 0.0);
        plot::line_chart(&title, "parameter", metric, &series, pos(|p| p.0), pos(|p| p.1))
    } else {
        let pts = sampler::read_points_csv(input)?;
        match pts.ncols() {
            1 => plot::histogram(&title, &header[0], pts.as_slice(), 60),
            _ => {
                let xy: Vec<(f64, f64)> = (0..pts.nrows()).map(|i| (pts[(i, 0)], pts[(i, 1)])).collect();
                plot::scatter(&title, &header[0], &header[1], &xy)
            }
        }
    };
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("svg"));
    std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
    println!("{}", out.display());
    Ok(Outcome::Ok)
}

fn read_rows(rdr: &mut csv::Reader<std::fs::File>, header: &[String]) -> Result<Vec<experiments::Row>> {
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let values = header[3..]
            .iter()
            .zip(rec.iter().skip(3))
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| Ok((k.clone(), v.parse::<f64>()?)))
            .collect::<Result<_>>()?;
        rows.push(experiments::Row {
            group: rec.get(0).unwrap_or_default().to_string(),
            param: rec.get(1).unwrap_or("0").parse()?,
            seed: rec.get(2).unwrap_or("0").parse()?,
            values,
        });
    }
    Ok(rows)
}
