//! Synthetic generators, sweep drivers over `n`, `m` and `sigma`, timing
//! benchmarks and CSV ingestion.
//!
//! Sweep cells are independent jobs run on the rayon pool; results are always
//! returned in configuration order so reports are reproducible regardless of
//! scheduling.

use std::io;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_krr::{check_lambda, check_sigma, fit, Estimator, VarianceEstimate};
use crate::kernels::{build_kernel_matrix, cross_kernel, decompose, effective_dimension, Dataset, KernelSpec};
use crate::sketch::{check_assumption, AssumptionReport, SketchDistribution, SketchMatrix};
use crate::sketched_krr::{gap_diagnostics_batch, sketched_fit};

/// Regression function shared by all generators.
pub fn target(x: f64) -> f64 {
    -1.0 + 2.0 * x * x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// `X ~ U[0, 1]`.
    UniformQuadratic,
    /// `ceil(sqrt(n))` points from `U[0, 1/2]`, the rest at `1 + N(0, 1/n)`.
    Clustered,
    /// Equal mixture of `N(0.5, 0.5^2)` and `N(5, 5^2)`.
    GaussianMixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
}

/// Draws `y_i = -1 + 2 x_i^2 + eps_i`, `eps_i ~ N(0, sigma^2)`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n < 2 {
        return Err(Error::InvalidInput(format!("n must be at least 2, got {}", spec.n)));
    }
    check_sigma(spec.sigma)?;
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let xs: Vec<f64> = match spec.generator {
        Generator::UniformQuadratic => (0..n).map(|_| rng.random::<f64>()).collect(),
        Generator::Clustered => {
            let k = (n as f64).sqrt().ceil() as usize;
            let spread = (1.0 / n as f64).sqrt();
            (0..n)
                .map(|i| {
                    if i < k {
                        0.5 * rng.random::<f64>()
                    } else {
                        1.0 + spread * rng.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect()
        }
        Generator::GaussianMixture => (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                if rng.random::<bool>() {
                    0.5 + 0.5 * z
                } else {
                    5.0 + 5.0 * z
                }
            })
            .collect(),
    };
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| target(x) + spec.sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::univariate(&xs, &ys)?.with_noise_scale(spec.sigma)
}

/// Regularization as a function of the sample size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LambdaRule {
    Fixed { value: f64 },
    /// `scale * n^exponent`
    Power { scale: f64, exponent: f64 },
    /// `scale * (ln n)^power / n`
    LogPower { scale: f64, power: f64 },
}

impl LambdaRule {
    pub fn evaluate(&self, n: usize) -> Result<f64> {
        let nf = n as f64;
        let lambda = match *self {
            LambdaRule::Fixed { value } => value,
            LambdaRule::Power { scale, exponent } => scale * nf.powf(exponent),
            LambdaRule::LogPower { scale, power } => scale * nf.ln().powf(power) / nf,
        };
        check_lambda(lambda)?;
        Ok(lambda)
    }
}

/// Projection dimension as a function of the sample size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SketchRule {
    Fixed { m: usize },
    /// `ceil(scale * n^exponent)`
    Power { scale: f64, exponent: f64 },
    /// `ceil(scale * (ln n)^power)`
    LogPower { scale: f64, power: f64 },
    /// `ceil(factor * s_lambda)`
    EffectiveDimension { factor: f64 },
    FullRank,
}

impl SketchRule {
    pub fn needs_spectrum(&self) -> bool {
        matches!(self, SketchRule::EffectiveDimension { .. })
    }

    /// `s_lambda` is only consulted by [`SketchRule::EffectiveDimension`]. The
    /// result is clamped to at least 1.
    pub fn dimension(&self, n: usize, s_lambda: Option<usize>) -> Result<usize> {
        let nf = n as f64;
        let raw = match *self {
            SketchRule::Fixed { m } => m as f64,
            SketchRule::Power { scale, exponent } => (scale * nf.powf(exponent)).ceil(),
            SketchRule::LogPower { scale, power } => (scale * nf.ln().powf(power)).ceil(),
            SketchRule::EffectiveDimension { factor } => {
                let s = s_lambda.ok_or_else(|| {
                    Error::InvalidInput("effective-dimension sketch rule needs the spectrum".into())
                })?;
                (factor * s as f64).ceil()
            }
            SketchRule::FullRank => nf,
        };
        if !raw.is_finite() || raw < 0.0 {
            return Err(Error::InvalidInput(format!("sketch rule gives m = {raw}")));
        }
        Ok((raw as usize).max(1))
    }
}

/// Projection dimension indexed by an exponent multiplier `c`, as in the
/// `m`-sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DimensionFamily {
    /// `ceil(scale * n^{c / (2 alpha + 1)})`
    Polynomial { scale: f64, alpha: f64 },
    /// `ceil(scale * (ln n)^{c / p})`
    Logarithmic { scale: f64, p: f64 },
}

impl DimensionFamily {
    pub fn rule(&self, c: f64) -> SketchRule {
        match *self {
            DimensionFamily::Polynomial { scale, alpha } => SketchRule::Power {
                scale,
                exponent: c / (2.0 * alpha + 1.0),
            },
            DimensionFamily::Logarithmic { scale, p } => SketchRule::LogPower { scale, power: c / p },
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for an independent random stream of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

fn data_seed(seed: u64, n: usize) -> u64 {
    derive_seed(seed, 2 * n as u64)
}

fn sketch_seed(seed: u64, n: usize) -> u64 {
    derive_seed(seed, 2 * n as u64 + 1)
}

/// One `(n, m, sigma, seed)` cell of a sweep. Column order is the CSV order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n: usize,
    pub m: usize,
    pub sigma: f64,
    pub lambda: f64,
    pub kernel: String,
    pub seed: u64,
    pub sup_gap: f64,
    pub mean_gap: f64,
    pub grid_size: usize,
    pub exact_time_ms: f64,
    pub sketched_time_ms: f64,
}

/// Shared sweep configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSetup {
    pub kernel: KernelSpec,
    pub generator: Generator,
    pub sigma: f64,
    pub grid_size: usize,
    pub seeds: Vec<u64>,
    pub distribution: SketchDistribution,
    /// When false the timing columns are written as 0 so reports are bit-reproducible.
    pub record_timing: bool,
}

impl SweepSetup {
    fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        check_sigma(self.sigma)?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput("seed list must be non-empty".into()));
        }
        if self.grid_size == 0 {
            return Err(Error::InvalidInput("grid size must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        generate(&SyntheticSpec {
            generator: self.generator,
            n,
            sigma: self.sigma,
            seed: data_seed(seed, n),
        })
    }

    pub fn sketch(&self, m: usize, n: usize, seed: u64) -> Result<SketchMatrix> {
        SketchMatrix::generate(self.distribution, sketch_seed(seed, n), m, n)
    }
}

/// Equispaced evaluation grid: `[0, 1]` for uniform data, the sample range otherwise.
pub fn test_grid(generator: Generator, data: &Dataset, size: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = match generator {
        Generator::UniformQuadratic => (0.0, 1.0),
        _ => data.points().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[0]), hi.max(p[0]))
        }),
    };
    if size == 1 {
        return vec![vec![0.5 * (lo + hi)]];
    }
    let step = (hi - lo) / (size - 1) as f64;
    (0..size).map(|i| vec![lo + step * i as f64]).collect()
}

/// Unit-noise `V1` and `V2` on a grid plus the time spent on each path.
#[derive(Clone, Debug)]
pub struct GridVariances {
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub exact_ms: f64,
    pub sketched_ms: f64,
}

impl GridVariances {
    /// `(sup, mean)` of `|V1 - V2|` at noise level `sigma`.
    pub fn gaps(&self, sigma: f64) -> Result<(f64, f64)> {
        let mut sup = 0.0f64;
        let mut sum = 0.0;
        for (&b1, &b2) in self.v1.iter().zip(&self.v2) {
            let v1 = VarianceEstimate::scaled(b1, sigma, Estimator::V1)?.value;
            let v2 = VarianceEstimate::scaled(b2, sigma, Estimator::V2)?.value;
            let gap = (v1 - v2).abs();
            sup = sup.max(gap);
            sum += gap;
        }
        Ok((sup, sum / self.v1.len() as f64))
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Evaluates both variances on `grid`. The kernel matrix and the cross-kernel
/// block are shared and excluded from the timings.
pub fn grid_variances(
    kernel: &KernelSpec,
    data: &Dataset,
    k: &crate::kernels::KernelMatrix,
    sketch: &SketchMatrix,
    lambda: f64,
    grid: &[Vec<f64>],
) -> Result<GridVariances> {
    let cross = cross_kernel(kernel, data, grid)?;

    let start = Instant::now();
    let exact = fit(k, data.responses(), lambda)?;
    let v1 = exact.unit_variance_batch(&cross)?;
    let exact_ms = elapsed_ms(start);

    let start = Instant::now();
    let sf = sketched_fit(k, sketch, lambda)?;
    let v2 = sf.unit_v2_batch(&cross)?;
    let sketched_ms = elapsed_ms(start);

    Ok(GridVariances {
        v1,
        v2,
        exact_ms,
        sketched_ms,
    })
}

/// All reports for one value of the swept variable, one per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub x: f64,
    pub reports: Vec<GapReport>,
    /// `sup_gap(sigma) / sup_gap(1)` per seed; filled by the sigma sweep only.
    pub ratios: Vec<f64>,
}

/// Seed mean with its 95% half-width `1.96 sd / sqrt(k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub x: f64,
    pub mean: f64,
    pub half_width: f64,
    pub count: usize,
}

/// Sample mean and 95% half-width; the half-width is 0 for a single value.
pub fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, 1.96 * var.sqrt() / (k as f64).sqrt())
}

impl SweepCell {
    pub fn summary(&self) -> SeedSummary {
        self.summary_of(|r| r.sup_gap)
    }

    pub fn summary_of(&self, f: impl Fn(&GapReport) -> f64) -> SeedSummary {
        let values: Vec<f64> = self.reports.iter().map(f).collect();
        let (mean, half_width) = mean_and_half_width(&values);
        SeedSummary {
            x: self.x,
            mean,
            half_width,
            count: values.len(),
        }
    }

    pub fn mean_sup_gap(&self) -> f64 {
        self.summary().mean
    }
}

struct Job {
    cell: usize,
    n: usize,
    seed: u64,
}

fn run_jobs<T: Send>(jobs: Vec<Job>, work: impl Fn(&Job) -> Result<T> + Sync) -> Result<Vec<(usize, T)>> {
    jobs.par_iter()
        .map(|job| work(job).map(|out| (job.cell, out)))
        .collect()
}

fn group_cells(xs: &[f64], results: Vec<(usize, Vec<GapReport>, Vec<f64>)>) -> Vec<SweepCell> {
    let mut cells: Vec<SweepCell> = xs
        .iter()
        .map(|&x| SweepCell {
            x,
            reports: Vec::new(),
            ratios: Vec::new(),
        })
        .collect();
    for (cell, reports, ratios) in results {
        cells[cell].reports.extend(reports);
        cells[cell].ratios.extend(ratios);
    }
    cells
}

struct PreparedCell {
    data: Dataset,
    k: crate::kernels::KernelMatrix,
    s_lambda: Option<usize>,
}

fn prepare(setup: &SweepSetup, n: usize, seed: u64, lambda: f64, needs_spectrum: bool) -> Result<PreparedCell> {
    let data = setup.dataset(n, seed)?;
    let k = build_kernel_matrix(&setup.kernel, &data)?;
    let s_lambda = if needs_spectrum {
        let spectral = decompose(&k)?;
        Some(effective_dimension(spectral.eigenvalues().as_slice(), lambda)?)
    } else {
        None
    };
    Ok(PreparedCell { data, k, s_lambda })
}

fn report(
    setup: &SweepSetup,
    n: usize,
    m: usize,
    sigma: f64,
    lambda: f64,
    seed: u64,
    grid: &GridVariances,
) -> Result<GapReport> {
    let (sup_gap, mean_gap) = grid.gaps(sigma)?;
    let (exact_time_ms, sketched_time_ms) = if setup.record_timing {
        (grid.exact_ms, grid.sketched_ms)
    } else {
        (0.0, 0.0)
    };
    Ok(GapReport {
        n,
        m,
        sigma,
        lambda,
        kernel: setup.kernel.tag(),
        seed,
        sup_gap,
        mean_gap,
        grid_size: grid.v1.len(),
        exact_time_ms,
        sketched_time_ms,
    })
}

/// Gap versus the training size `n`.
pub fn gap_sweep_n(
    setup: &SweepSetup,
    n_list: &[usize],
    m_rule: SketchRule,
    lambda_rule: LambdaRule,
) -> Result<Vec<SweepCell>> {
    setup.validate()?;
    let jobs = n_list
        .iter()
        .enumerate()
        .flat_map(|(cell, &n)| setup.seeds.iter().map(move |&seed| Job { cell, n, seed }))
        .collect();
    let results = run_jobs(jobs, |job| {
        let lambda = lambda_rule.evaluate(job.n)?;
        let prepared = prepare(setup, job.n, job.seed, lambda, m_rule.needs_spectrum())?;
        let m = m_rule.dimension(job.n, prepared.s_lambda)?;
        let sketch = setup.sketch(m, job.n, job.seed)?;
        let grid = test_grid(setup.generator, &prepared.data, setup.grid_size);
        let vars = grid_variances(&setup.kernel, &prepared.data, &prepared.k, &sketch, lambda, &grid)?;
        Ok(vec![report(setup, job.n, m, setup.sigma, lambda, job.seed, &vars)?])
    })?;
    let xs: Vec<f64> = n_list.iter().map(|&n| n as f64).collect();
    Ok(group_cells(&xs, results.into_iter().map(|(c, r)| (c, r, Vec::new())).collect()))
}

/// Gap versus the projection dimension `m(c)` at fixed `n`. Each seed reuses one
/// dataset and one sketch seed across all `c`.
pub fn gap_sweep_m(
    setup: &SweepSetup,
    n: usize,
    family: DimensionFamily,
    c_list: &[f64],
    lambda_rule: LambdaRule,
) -> Result<Vec<SweepCell>> {
    setup.validate()?;
    let lambda = lambda_rule.evaluate(n)?;
    let jobs = setup.seeds.iter().map(|&seed| Job { cell: 0, n, seed }).collect();
    let per_seed = run_jobs(jobs, |job| {
        let prepared = prepare(setup, n, job.seed, lambda, false)?;
        let grid = test_grid(setup.generator, &prepared.data, setup.grid_size);
        c_list
            .iter()
            .map(|&c| {
                let m = family.rule(c).dimension(n, None)?;
                let sketch = setup.sketch(m, n, job.seed)?;
                let vars = grid_variances(&setup.kernel, &prepared.data, &prepared.k, &sketch, lambda, &grid)?;
                report(setup, n, m, setup.sigma, lambda, job.seed, &vars)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut cells: Vec<SweepCell> = c_list
        .iter()
        .map(|&c| SweepCell {
            x: c,
            reports: Vec::new(),
            ratios: Vec::new(),
        })
        .collect();
    for (_, reports) in per_seed {
        for (cell, r) in cells.iter_mut().zip(reports) {
            cell.reports.push(r);
        }
    }
    Ok(cells)
}

/// Gap versus the noise level at fixed data and sketch. The unit-noise variances
/// are computed once per seed and scaled, so `ratios` checks `sigma^2` homogeneity.
pub fn gap_sweep_sigma(
    setup: &SweepSetup,
    n: usize,
    m_rule: SketchRule,
    lambda_rule: LambdaRule,
    sigma_list: &[f64],
) -> Result<Vec<SweepCell>> {
    setup.validate()?;
    for &sigma in sigma_list {
        check_sigma(sigma)?;
    }
    let lambda = lambda_rule.evaluate(n)?;
    let jobs = setup.seeds.iter().map(|&seed| Job { cell: 0, n, seed }).collect();
    let per_seed = run_jobs(jobs, |job| {
        let prepared = prepare(setup, n, job.seed, lambda, m_rule.needs_spectrum())?;
        let m = m_rule.dimension(n, prepared.s_lambda)?;
        let sketch = setup.sketch(m, n, job.seed)?;
        let grid = test_grid(setup.generator, &prepared.data, setup.grid_size);
        let vars = grid_variances(&setup.kernel, &prepared.data, &prepared.k, &sketch, lambda, &grid)?;
        let (unit_sup, _) = vars.gaps(1.0)?;
        sigma_list
            .iter()
            .map(|&sigma| {
                let r = report(setup, n, m, sigma, lambda, job.seed, &vars)?;
                let ratio = r.sup_gap / unit_sup;
                Ok((r, ratio))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut cells: Vec<SweepCell> = sigma_list
        .iter()
        .map(|&sigma| SweepCell {
            x: sigma,
            reports: Vec::new(),
            ratios: Vec::new(),
        })
        .collect();
    for (_, rows) in per_seed {
        for (cell, (r, ratio)) in cells.iter_mut().zip(rows) {
            cell.reports.push(r);
            cell.ratios.push(ratio);
        }
    }
    Ok(cells)
}

/// Largest `T1^2 / lambda` and `T2^2 / lambda` over the grid for one `(n, seed)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiagnosticsRecord {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub lambda: f64,
    pub max_ratio1: f64,
    pub max_ratio2: f64,
}

pub fn diagnostics_sweep(
    setup: &SweepSetup,
    n_list: &[usize],
    m_rule: SketchRule,
    lambda_rule: LambdaRule,
) -> Result<Vec<DiagnosticsRecord>> {
    setup.validate()?;
    let jobs = n_list
        .iter()
        .enumerate()
        .flat_map(|(cell, &n)| setup.seeds.iter().map(move |&seed| Job { cell, n, seed }))
        .collect();
    let out = run_jobs(jobs, |job| {
        let lambda = lambda_rule.evaluate(job.n)?;
        let data = setup.dataset(job.n, job.seed)?;
        let k = build_kernel_matrix(&setup.kernel, &data)?;
        let spectral = decompose(&k)?;
        let s_lambda = effective_dimension(spectral.eigenvalues().as_slice(), lambda)?;
        let m = m_rule.dimension(job.n, Some(s_lambda))?;
        let sketch = setup.sketch(m, job.n, job.seed)?;
        let sf = sketched_fit(&k, &sketch, lambda)?;
        let grid = test_grid(setup.generator, &data, setup.grid_size);
        let cross = cross_kernel(&setup.kernel, &data, &grid)?;
        let diags = gap_diagnostics_batch(&spectral, &sf, &cross)?;
        Ok(DiagnosticsRecord {
            n: job.n,
            m,
            seed: job.seed,
            lambda,
            max_ratio1: diags.iter().map(|d| d.ratio1).fold(0.0, f64::max),
            max_ratio2: diags.iter().map(|d| d.ratio2).fold(0.0, f64::max),
        })
    })?;
    Ok(out.into_iter().map(|(_, r)| r).collect())
}

/// Sketch-condition diagnostics for one `(n, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionTrial {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub report: AssumptionReport,
}

pub fn assumption_trials(
    setup: &SweepSetup,
    n: usize,
    m_rule: SketchRule,
    lambda_rule: LambdaRule,
    c_prime: f64,
) -> Result<Vec<AssumptionTrial>> {
    setup.validate()?;
    let lambda = lambda_rule.evaluate(n)?;
    let jobs = setup.seeds.iter().map(|&seed| Job { cell: 0, n, seed }).collect();
    let out = run_jobs(jobs, |job| {
        let data = setup.dataset(n, job.seed)?;
        let k = build_kernel_matrix(&setup.kernel, &data)?;
        let spectral = decompose(&k)?;
        let s_lambda = effective_dimension(spectral.eigenvalues().as_slice(), lambda)?;
        let m = m_rule.dimension(n, Some(s_lambda))?;
        let sketch = setup.sketch(m, n, job.seed)?;
        let report = check_assumption(&sketch, &spectral, lambda, c_prime)?;
        Ok(AssumptionTrial {
            n,
            m,
            seed: job.seed,
            report,
        })
    })?;
    Ok(out.into_iter().map(|(_, r)| r).collect())
}

/// Wall-clock comparison of the exact and sketched variance paths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub n: usize,
    pub m: usize,
    pub queries: usize,
    pub exact_factor_ms: f64,
    pub exact_query_ms: f64,
    pub sketched_setup_ms: f64,
    pub sketched_query_ms: f64,
}

impl TimingReport {
    pub fn exact_total_ms(&self) -> f64 {
        self.exact_factor_ms + self.exact_query_ms
    }

    pub fn sketched_total_ms(&self) -> f64 {
        self.sketched_setup_ms + self.sketched_query_ms
    }

    pub fn speedup(&self) -> f64 {
        self.exact_total_ms() / self.sketched_total_ms()
    }
}

/// Times both paths on uniform data, answering `queries` variance queries one at
/// a time. Kernel evaluation is excluded from both totals.
pub fn timing_benchmark(
    kernel: &KernelSpec,
    n: usize,
    m: usize,
    lambda: f64,
    queries: usize,
    seed: u64,
) -> Result<TimingReport> {
    let data = generate(&SyntheticSpec {
        generator: Generator::UniformQuadratic,
        n,
        sigma: 1.0,
        seed: derive_seed(seed, 0),
    })?;
    let k = build_kernel_matrix(kernel, &data)?;
    let mut qrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let grid: Vec<Vec<f64>> = (0..queries).map(|_| vec![qrng.random::<f64>()]).collect();
    let sections: Vec<DVector<f64>> = cross_kernel(kernel, &data, &grid)?
        .column_iter()
        .map(|c| c.into_owned())
        .collect();
    let sketch = SketchMatrix::generate(SketchDistribution::Gaussian, derive_seed(seed, 2), m, n)?;

    let start = Instant::now();
    let exact = fit(&k, data.responses(), lambda)?;
    let exact_factor_ms = elapsed_ms(start);
    let start = Instant::now();
    for g in &sections {
        std::hint::black_box(exact.variance_at(g, 1.0)?);
    }
    let exact_query_ms = elapsed_ms(start);

    let start = Instant::now();
    let sf = sketched_fit(&k, &sketch, lambda)?;
    let sketched_setup_ms = elapsed_ms(start);
    let start = Instant::now();
    for g in &sections {
        std::hint::black_box(sf.variance_v2(g, 1.0)?);
    }
    let sketched_query_ms = elapsed_ms(start);

    Ok(TimingReport {
        n,
        m,
        queries,
        exact_factor_ms,
        exact_query_ms,
        sketched_setup_ms,
        sketched_query_ms,
    })
}

/// Median time of `repeats` Cholesky factorizations of `K + lambda I`.
pub fn exact_factor_time(kernel: &KernelSpec, n: usize, lambda: f64, repeats: usize, seed: u64) -> Result<f64> {
    let data = generate(&SyntheticSpec {
        generator: Generator::UniformQuadratic,
        n,
        sigma: 1.0,
        seed,
    })?;
    let k = build_kernel_matrix(kernel, &data)?;
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        std::hint::black_box(fit(&k, data.responses(), lambda)?);
        times.push(elapsed_ms(start));
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Per-feature centering and scaling fitted on one split and reusable on others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    /// Column means and sample standard deviations; constant columns get scale 1.
    pub fn fit(data: &Dataset) -> Self {
        let n = data.n() as f64;
        let d = data.dim();
        let mut means = vec![0.0; d];
        for p in data.points() {
            for (m, v) in means.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let mut scales = vec![0.0; d];
        for p in data.points() {
            for j in 0..d {
                scales[j] += (p[j] - means[j]).powi(2);
            }
        }
        for s in &mut scales {
            let sd = (*s / (n - 1.0).max(1.0)).sqrt();
            *s = if sd > 0.0 { sd } else { 1.0 };
        }
        Self { means, scales }
    }

    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        if data.dim() != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                found: data.dim(),
            });
        }
        let (inputs, d) = data.inputs_mut();
        for row in inputs.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.means[j]) / self.scales[j];
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub standardization: Option<Standardization>,
}

/// Reads a headed CSV file. Data rows are numbered from 1, excluding the header.
pub fn load_csv_dataset(
    path: &Path,
    response_column: &str,
    feature_columns: &[String],
    standardize: bool,
) -> Result<LoadedData> {
    let file = std::fs::File::open(path)?;
    read_csv_dataset(file, response_column, feature_columns, standardize)
}

pub fn read_csv_dataset<R: io::Read>(
    reader: R,
    response_column: &str,
    feature_columns: &[String],
    standardize: bool,
) -> Result<LoadedData> {
    if feature_columns.is_empty() {
        return Err(Error::InvalidInput("at least one feature column is required".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_col = position(response_column)?;
    let x_cols = feature_columns.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::CsvRow {
            row,
            message: e.to_string(),
        })?;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).map(str::trim).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::CsvRow {
                    row,
                    message: format!("missing value in column `{}`", &headers[col]),
                });
            }
            let v: f64 = raw.parse().map_err(|_| Error::CsvRow {
                row,
                message: format!("non-numeric value `{raw}` in column `{}`", &headers[col]),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvRow {
                    row,
                    message: format!("non-finite value in column `{}`", &headers[col]),
                });
            }
            Ok(v)
        };
        ys.push(cell(y_col)?);
        rows.push(x_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?);
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile);
    }
    let mut dataset = Dataset::from_rows(&rows, &ys)?;
    let standardization = if standardize {
        let st = Standardization::fit(&dataset);
        st.apply(&mut dataset)?;
        Some(st)
    } else {
        None
    };
    Ok(LoadedData {
        dataset,
        standardization,
    })
}

/// Writes serializable rows as CSV with a header taken from the field names.
pub fn write_csv<W: io::Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Flattens sweep cells into CSV rows in configuration order.
pub fn flatten(cells: &[SweepCell]) -> Vec<GapReport> {
    cells.iter().flat_map(|c| c.reports.iter().cloned()).collect()
}

/// Dense sanity path: explicit `(K + lambda I)^{-1}` and explicit
/// `(S (lambda K + K^2) S^T)^{-1}`, for small instances only.
pub fn naive_sup_gap(
    k: &DMatrix<f64>,
    s: &DMatrix<f64>,
    lambda: f64,
    sections: &DMatrix<f64>,
    sigma: f64,
) -> Option<f64> {
    let n = k.nrows();
    let nf = n as f64;
    let mut shifted = k.clone();
    for i in 0..n {
        shifted[(i, i)] += lambda;
    }
    let inv = shifted.try_inverse()?;
    let m_inv = (s * (k * lambda + k * k) * s.transpose()).try_inverse()?;
    let proj = DMatrix::identity(n, n) - k * s.transpose() * m_inv * s * k;
    let mut sup = 0.0f64;
    for g in sections.column_iter() {
        let v1 = sigma * sigma / (nf * nf) * (&inv * g).norm_squared();
        let v2 = sigma * sigma / (nf * nf * lambda * lambda) * (&proj * g).norm_squared();
        sup = sup.max((v1 - v2).abs());
    }
    Some(sup)
}
