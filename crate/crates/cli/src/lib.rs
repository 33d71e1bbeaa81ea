//! Command-line driver: parses flags, resolves the layered configuration, runs
//! one experiment and writes `report.csv`, `chart.svg` and `config.echo.json`.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 numerical failure,
//! 3 usage error.

pub mod config;
pub mod svg;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use sketchvar::active_learning::{run_active_learning, ActiveLearningConfig, HistoryRecord};
use sketchvar::experiments::{
    assumption_trials, derive_seed, flatten, gap_sweep_m, gap_sweep_n, gap_sweep_sigma, generate, load_csv_dataset,
    mean_and_half_width, timing_benchmark, write_csv, GapReport, SweepCell, SweepSetup, SyntheticSpec,
};
use sketchvar::{fit, sketched_fit, Dataset, Error, KernelMatrix, SketchMatrix};

use config::{FlagOverrides, RunConfig};
use svg::Series;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Numerical(String),
    Io(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Usage(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if matches!(e, Error::Io(_)) {
            CliError::Io(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "sketchvar", version, about = "Sketched predictive-variance experiments for kernel ridge regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Gap sup|V1 - V2| versus the training size n.
    GapN(CommonArgs),
    /// Gap versus the projection dimension m(c) at fixed n.
    GapM(CommonArgs),
    /// Gap versus the noise level at fixed data and sketch.
    GapSigma(CommonArgs),
    /// Variance-weighted versus uniform active learning.
    ActiveLearn(CommonArgs),
    /// Sketch-condition diagnostics over seeds.
    AssumptionCheck(CommonArgs),
    /// Wall-clock comparison of the exact and sketched variance paths.
    Bench(CommonArgs),
    /// V1, V2 and V3 for an explicit kernel matrix and query section.
    V2Point(CommonArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: fig1a..fig1f, sim1, sim2.
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated seed list.
    #[arg(long = "seed")]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the experiment pool.
    #[arg(long, env = "SKETCHVAR_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long = "n-list")]
    n_list: Option<String>,
    #[arg(long = "c-list")]
    c_list: Option<String>,
    #[arg(long = "sigma-list")]
    sigma_list: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    /// Fixed projection dimension.
    #[arg(long)]
    m: Option<String>,
    /// Fixed regularization.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long = "grid-size")]
    grid_size: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long = "batch-size")]
    batch_size: Option<String>,
    #[arg(long = "initial-size")]
    initial_size: Option<String>,
    #[arg(long = "pool-size")]
    pool_size: Option<String>,
    #[arg(long)]
    queries: Option<String>,
    /// gaussian, sobolev_first_order or sobolev_cubic.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    bandwidth: Option<String>,
    /// uniform_quadratic, clustered or gaussian_mixture.
    #[arg(long)]
    generator: Option<String>,
    #[arg(long = "c-prime")]
    c_prime: Option<String>,
    /// Record wall times in the report (makes reports run-dependent).
    #[arg(long = "record-timing")]
    record_timing: bool,
}

impl CommonArgs {
    fn overrides(&self) -> FlagOverrides {
        FlagOverrides {
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            n: self.n.clone(),
            n_list: self.n_list.clone(),
            c_list: self.c_list.clone(),
            sigma_list: self.sigma_list.clone(),
            sigma: self.sigma.clone(),
            m: self.m.clone(),
            lambda: self.lambda.clone(),
            grid_size: self.grid_size.clone(),
            iterations: self.iterations.clone(),
            batch_size: self.batch_size.clone(),
            initial_size: self.initial_size.clone(),
            pool_size: self.pool_size.clone(),
            queries: self.queries.clone(),
            kernel: self.kernel.clone(),
            bandwidth: self.bandwidth.clone(),
            generator: self.generator.clone(),
            c_prime: self.c_prime.clone(),
            record_timing: self.record_timing,
        }
    }
}

impl Command {
    fn parts(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::GapN(a) => ("gap-n", a),
            Command::GapM(a) => ("gap-m", a),
            Command::GapSigma(a) => ("gap-sigma", a),
            Command::ActiveLearn(a) => ("active-learn", a),
            Command::AssumptionCheck(a) => ("assumption-check", a),
            Command::Bench(a) => ("bench", a),
            Command::V2Point(a) => ("v2-point", a),
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("sketchvar: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let (command, args) = cli.command.parts();
    if let Some(threads) = args.threads {
        if threads == 0 {
            return Err(CliError::Config("threads: must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let cfg = config::resolve(command, args.preset.as_deref(), args.config.as_deref(), &args.overrides())?;
    match command {
        "v2-point" => v2_point(&cfg),
        _ => {
            let out = prepare_out(&cfg.out)?;
            write_atomic(&out.join("config.echo.json"), cfg.echo().as_bytes())?;
            match command {
                "gap-n" | "gap-m" | "gap-sigma" => gap(&cfg, &out),
                "active-learn" => active(&cfg, &out),
                "assumption-check" => assumption(&cfg, &out),
                "bench" => bench(&cfg, &out),
                _ => unreachable!("commands are validated"),
            }
        }
    }
}

fn prepare_out(dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

/// Writes through a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    Ok(buf)
}

fn sweep_setup(cfg: &RunConfig) -> SweepSetup {
    SweepSetup {
        kernel: cfg.kernel,
        generator: cfg.generator,
        sigma: cfg.sigma,
        grid_size: cfg.grid_size,
        seeds: cfg.seeds.clone(),
        distribution: cfg.distribution,
        record_timing: cfg.record_timing,
    }
}

#[derive(Serialize)]
struct SigmaRow {
    n: usize,
    m: usize,
    sigma: f64,
    lambda: f64,
    kernel: String,
    seed: u64,
    sup_gap: f64,
    mean_gap: f64,
    grid_size: usize,
    exact_time_ms: f64,
    sketched_time_ms: f64,
    ratio: f64,
}

impl SigmaRow {
    fn new(r: &GapReport, ratio: f64) -> Self {
        Self {
            n: r.n,
            m: r.m,
            sigma: r.sigma,
            lambda: r.lambda,
            kernel: r.kernel.clone(),
            seed: r.seed,
            sup_gap: r.sup_gap,
            mean_gap: r.mean_gap,
            grid_size: r.grid_size,
            exact_time_ms: r.exact_time_ms,
            sketched_time_ms: r.sketched_time_ms,
            ratio,
        }
    }
}

fn gap(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let setup = sweep_setup(cfg);
    let (cells, x_label): (Vec<SweepCell>, &str) = match cfg.command.as_str() {
        "gap-n" => (gap_sweep_n(&setup, &cfg.n_list, cfg.m_rule, cfg.lambda_rule)?, "n"),
        "gap-m" => (gap_sweep_m(&setup, cfg.n, cfg.m_family, &cfg.c_list, cfg.lambda_rule)?, "c"),
        _ => (gap_sweep_sigma(&setup, cfg.n, cfg.m_rule, cfg.lambda_rule, &cfg.sigma_list)?, "sigma"),
    };
    let csv = if cfg.command == "gap-sigma" {
        let rows: Vec<SigmaRow> = cells
            .iter()
            .flat_map(|c| c.reports.iter().zip(&c.ratios).map(|(r, &q)| SigmaRow::new(r, q)))
            .collect();
        csv_bytes(&rows)?
    } else {
        csv_bytes(&flatten(&cells))?
    };
    write_atomic(&out.join("report.csv"), &csv)?;

    let points: Vec<(f64, f64, f64)> = cells
        .iter()
        .map(|c| {
            let s = c.summary();
            (s.x, s.mean, s.half_width)
        })
        .collect();
    let title = format!("{} ({}, {} seeds)", cfg.command, cfg.kernel.tag(), cfg.seeds.len());
    let chart = svg::line_chart(
        &title,
        x_label,
        "mean sup |V1 - V2|",
        &[Series {
            label: "sup gap".into(),
            points: points.clone(),
        }],
    );
    write_atomic(&out.join("chart.svg"), chart.as_bytes())?;
    for (x, mean, hw) in points {
        println!("{x_label}={x} mean_sup_gap={mean:e} half_width={hw:e}");
    }
    Ok(())
}

fn load_source(src: &config::CsvSource) -> Result<(Dataset, Option<sketchvar::experiments::Standardization>), CliError> {
    let loaded = load_csv_dataset(&src.path, &src.response, &src.features, src.standardize)?;
    Ok((loaded.dataset, loaded.standardization))
}

fn active_data(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset), CliError> {
    let a = &cfg.active;
    match (&a.pool_csv, &a.test_csv) {
        (Some(pool_src), Some(test_src)) => {
            let (pool, st) = load_source(pool_src)?;
            let mut test = load_csv_dataset(&test_src.path, &test_src.response, &test_src.features, false)?.dataset;
            if let Some(st) = st {
                st.apply(&mut test)?;
            }
            Ok((pool, test))
        }
        (None, None) => {
            let spec = |n, stream| SyntheticSpec {
                generator: cfg.generator,
                n,
                sigma: cfg.sigma,
                seed: derive_seed(seed, stream),
            };
            Ok((generate(&spec(a.pool_size, 100))?, generate(&spec(a.test_size, 101))?))
        }
        _ => Err(CliError::Config(
            "active.pool_csv and active.test_csv must be given together".into(),
        )),
    }
}

fn active(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let a = &cfg.active;
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..a.acquisitions.len()).map(move |k| (s, k)))
        .collect();
    let runs: Vec<(Vec<HistoryRecord>, bool)> = jobs
        .par_iter()
        .map(|&(seed, k)| {
            let (pool, test) = active_data(cfg, seed)?;
            let al = ActiveLearningConfig {
                kernel: cfg.kernel,
                initial_size: a.initial_size,
                batch_size: a.batch_size,
                iterations: a.iterations,
                sketch_rule: cfg.m_rule,
                lambda_rule: cfg.lambda_rule,
                acquisition: a.acquisitions[k],
                distribution: cfg.distribution,
                rescale_on_grow: a.rescale_on_grow,
                sigma: a.sigma_source,
                early_stop: a.early_stop,
                seed,
                record_timing: cfg.record_timing,
            };
            let run = run_active_learning(&pool, &test, &al)?;
            Ok((run.history, run.truncated))
        })
        .collect::<Result<_, CliError>>()?;
    if runs.iter().any(|r| r.1) {
        eprintln!("sketchvar: unlabeled pool exhausted before the iteration budget in some runs");
    }
    let rows: Vec<HistoryRecord> = runs.iter().flat_map(|r| r.0.iter().cloned()).collect();
    write_atomic(&out.join("report.csv"), &csv_bytes(&rows)?)?;

    let series: Vec<Series> = a
        .acquisitions
        .iter()
        .map(|mode| {
            let mine: Vec<&HistoryRecord> = rows.iter().filter(|r| r.acquisition_mode == mode.tag()).collect();
            let last = mine.iter().map(|r| r.iteration).max().unwrap_or(0);
            let points = (0..=last)
                .filter_map(|it| {
                    let v: Vec<f64> = mine.iter().filter(|r| r.iteration == it).map(|r| r.test_mse).collect();
                    if v.is_empty() {
                        return None;
                    }
                    let (mean, hw) = mean_and_half_width(&v);
                    Some((it as f64, mean, hw))
                })
                .collect();
            Series {
                label: mode.tag().to_string(),
                points,
            }
        })
        .collect();
    let chart = svg::line_chart(
        &format!("active learning ({} seeds)", cfg.seeds.len()),
        "iteration",
        "test MSE",
        &series,
    );
    write_atomic(&out.join("chart.svg"), chart.as_bytes())?;
    for s in &series {
        if let Some(&(it, mean, hw)) = s.points.last() {
            println!("{} final_iteration={it} mean_test_mse={mean:e} half_width={hw:e}", s.label);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AssumptionRow {
    n: usize,
    m: usize,
    seed: u64,
    lambda: f64,
    s_lambda: usize,
    smin: f64,
    smax: f64,
    tail_opnorm: f64,
    c_prime: f64,
    passed: bool,
}

fn assumption(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let trials = assumption_trials(&sweep_setup(cfg), cfg.n, cfg.m_rule, cfg.lambda_rule, cfg.c_prime)?;
    let rows: Vec<AssumptionRow> = trials
        .iter()
        .map(|t| AssumptionRow {
            n: t.n,
            m: t.m,
            seed: t.seed,
            lambda: t.report.lambda,
            s_lambda: t.report.s_lambda,
            smin: t.report.smin,
            smax: t.report.smax,
            tail_opnorm: t.report.tail_opnorm,
            c_prime: t.report.c_prime,
            passed: t.report.passed,
        })
        .collect();
    write_atomic(&out.join("report.csv"), &csv_bytes(&rows)?)?;
    let passed = rows.iter().filter(|r| r.passed).count();
    println!("passed {passed} of {} seeds", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    n: usize,
    m: usize,
    queries: usize,
    exact_factor_ms: f64,
    exact_query_ms: f64,
    exact_total_ms: f64,
    sketched_setup_ms: f64,
    sketched_query_ms: f64,
    sketched_total_ms: f64,
    speedup: f64,
}

fn bench(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let lambda = cfg.lambda_rule.evaluate(cfg.n)?;
    let m = cfg.m_rule.dimension(cfg.n, None)?;
    let t = timing_benchmark(&cfg.kernel, cfg.n, m, lambda, cfg.queries, cfg.seeds[0])?;
    let row = BenchRow {
        n: t.n,
        m: t.m,
        queries: t.queries,
        exact_factor_ms: t.exact_factor_ms,
        exact_query_ms: t.exact_query_ms,
        exact_total_ms: t.exact_total_ms(),
        sketched_setup_ms: t.sketched_setup_ms,
        sketched_query_ms: t.sketched_query_ms,
        sketched_total_ms: t.sketched_total_ms(),
        speedup: t.speedup(),
    };
    write_atomic(&out.join("report.csv"), &csv_bytes(&[row])?)?;
    println!(
        "n={} m={} exact={:.1}ms sketched={:.1}ms speedup={:.2}",
        t.n,
        t.m,
        t.exact_total_ms(),
        t.sketched_total_ms(),
        t.speedup()
    );
    Ok(())
}

fn matrix_from_rows(key: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config(format!("{key}: must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Shortest representation after rounding to 15 significant digits.
fn significant(v: f64) -> f64 {
    format!("{v:.14e}").parse().unwrap_or(v)
}

fn v2_point(cfg: &RunConfig) -> Result<(), CliError> {
    let p = &cfg.v2_point;
    let k = KernelMatrix::from_matrix(matrix_from_rows("v2_point.kernel_matrix", &p.kernel_matrix)?)?;
    let n = k.n();
    if p.k_x.len() != n {
        return Err(CliError::Config(format!("v2_point.k_x: expected {n} entries, got {}", p.k_x.len())));
    }
    let sketch = match &p.sketch {
        Some(rows) => SketchMatrix::from_matrix(matrix_from_rows("v2_point.sketch", rows)?)?,
        None => SketchMatrix::identity(n)?,
    };
    let k_x = DVector::from_column_slice(&p.k_x);
    let exact = fit(&k, &DVector::zeros(n), p.lambda)?;
    let sf = sketched_fit(&k, &sketch, p.lambda)?;
    println!("V1={}", significant(exact.variance_at(&k_x, p.sigma)?.value));
    println!("V2={}", significant(sf.variance_v2(&k_x, p.sigma)?.value));
    println!("V3={}", significant(sf.variance_v3(&k_x, p.sigma)?.value));
    Ok(())
}
