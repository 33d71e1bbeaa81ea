//! Variance-weighted active learning on sketched KRR.
//!
//! Each iteration fits the sketched model on the labeled set, scores the
//! unlabeled pool by `V2`, draws a batch with probability proportional to the
//! scores and moves it into the labeled set. The sketch product is maintained
//! incrementally: after `n_s` points are added and the sketch grows from `m1` to
//! `m2` rows,
//!
//! ```text
//! [ S_1   S_12 ] [ K_1   K_12 ]   [ S_1 K_1 + S_12 K_21    S_1 K_12 + S_12 K_2  ]
//! [ S_21  S_2  ] [ K_21  K_2  ] = [ S_21 K_1 + S_2 K_21    S_21 K_12 + S_2 K_2  ]
//! ```
//!
//! and `S_1 K_1` is reused from the previous step.
//!
//! The cache holds `S G` for the unscaled Gram matrix `G`, since the `1/n`
//! scaling of `K` changes with every acquisition; `A = S G / n_0`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_krr::{check_sigma, estimate_sigma, fit, Estimator, VarianceEstimate};
use crate::experiments::{derive_seed, LambdaRule, SketchRule};
use crate::kernels::{build_kernel_matrix, cross_kernel, decompose, effective_dimension, gram_block, Dataset, KernelMatrix, KernelSpec};
use crate::sketch::{SketchDistribution, SketchMatrix};
use crate::sketched_krr::SketchedFit;

/// Points drawn in one iteration and the scores they were drawn with.
#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionBatch {
    /// Positions into the candidate list, in draw order.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Sequential draws without replacement, each with probability proportional to
/// the weight among the remaining candidates. Falls back to uniform draws once
/// no remaining candidate has positive weight.
pub fn weighted_sample_without_replacement(weights: &[f64], n_s: usize, seed: u64) -> Result<AcquisitionBatch> {
    if n_s > weights.len() {
        return Err(Error::PoolTooSmall {
            requested: n_s,
            available: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput("acquisition weights must be finite and nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut chosen = Vec::with_capacity(n_s);
    for _ in 0..n_s {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let pos = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (p, &i) in remaining.iter().enumerate() {
                acc += weights[i];
                if weights[i] > 0.0 && target < acc {
                    pick = Some(p);
                    break;
                }
            }
            // rounding can leave target just above the last partial sum
            pick.unwrap_or_else(|| remaining.iter().rposition(|&i| weights[i] > 0.0).unwrap())
        } else {
            rng.random_range(0..remaining.len())
        };
        chosen.push(remaining.remove(pos));
    }
    Ok(AcquisitionBatch {
        weights: chosen.iter().map(|&i| weights[i]).collect(),
        indices: chosen,
    })
}

/// New kernel blocks for one update: `G_12` (`n0 x ns`), `G_21` (`ns x n0`) and
/// `G_2` (`ns x ns`).
#[derive(Clone, Debug)]
pub struct KernelBlocks {
    pub k12: DMatrix<f64>,
    pub k21: DMatrix<f64>,
    pub k2: DMatrix<f64>,
}

/// Sketch blocks of the grown matrix. `s1` is the retained block after any
/// rescaling, and `retained_scale` is the factor it was rescaled by.
#[derive(Clone, Debug)]
pub struct SketchBlocks {
    pub s1: DMatrix<f64>,
    pub s12: DMatrix<f64>,
    pub s21: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub retained_scale: f64,
}

impl SketchBlocks {
    /// Splits an `m2 x n2` sketch at `(m1, n0)`.
    pub fn split(sketch: &SketchMatrix, m1: usize, n0: usize, retained_scale: f64) -> Result<Self> {
        let s = sketch.matrix();
        let (m2, n2) = s.shape();
        if m1 > m2 || n0 > n2 {
            return Err(Error::ShapeMismatch {
                what: "sketch split",
                expected: (m1, n0),
                found: (m2, n2),
            });
        }
        Ok(Self {
            s1: s.view((0, 0), (m1, n0)).into_owned(),
            s12: s.view((0, n0), (m1, n2 - n0)).into_owned(),
            s21: s.view((m1, 0), (m2 - m1, n0)).into_owned(),
            s2: s.view((m1, n0), (m2 - m1, n2 - n0)).into_owned(),
            retained_scale,
        })
    }
}

fn check_shape(what: &'static str, m: &DMatrix<f64>, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(Error::ShapeMismatch {
            what,
            expected,
            found: m.shape(),
        });
    }
    Ok(())
}

fn product_cost(a: &DMatrix<f64>, b: &DMatrix<f64>) -> u64 {
    (a.nrows() * a.ncols() * b.ncols()) as u64
}

/// Block update of the cached product `S_1 G_1` (`m1 x n0`) to the `m2 x (n0 + ns)`
/// product of the grown sketch and Gram matrix. `g1` is only read by the new rows
/// `S_21 G_1`. Multiply-adds are added to `flops`.
pub fn incremental_sk(
    cache: &DMatrix<f64>,
    g1: &DMatrix<f64>,
    blocks: &KernelBlocks,
    sketch: &SketchBlocks,
    flops: &mut u64,
) -> Result<DMatrix<f64>> {
    let (m1, n0) = cache.shape();
    let ns = blocks.k2.nrows();
    let dm = sketch.s21.nrows();
    check_shape("G_1", g1, (n0, n0))?;
    check_shape("G_12", &blocks.k12, (n0, ns))?;
    check_shape("G_21", &blocks.k21, (ns, n0))?;
    check_shape("G_2", &blocks.k2, (ns, ns))?;
    check_shape("S_1", &sketch.s1, (m1, n0))?;
    check_shape("S_12", &sketch.s12, (m1, ns))?;
    check_shape("S_21", &sketch.s21, (dm, n0))?;
    check_shape("S_2", &sketch.s2, (dm, ns))?;

    let mut out = DMatrix::zeros(m1 + dm, n0 + ns);
    let mut top_left = cache.clone();
    if sketch.retained_scale != 1.0 {
        top_left *= sketch.retained_scale;
        *flops += (m1 * n0) as u64;
    }
    if ns > 0 {
        top_left += &sketch.s12 * &blocks.k21;
        let top_right = &sketch.s1 * &blocks.k12 + &sketch.s12 * &blocks.k2;
        *flops += product_cost(&sketch.s12, &blocks.k21)
            + product_cost(&sketch.s1, &blocks.k12)
            + product_cost(&sketch.s12, &blocks.k2);
        out.view_mut((0, n0), (m1, ns)).copy_from(&top_right);
    }
    out.view_mut((0, 0), (m1, n0)).copy_from(&top_left);
    if dm > 0 {
        let mut bottom_left = &sketch.s21 * g1;
        *flops += product_cost(&sketch.s21, g1);
        if ns > 0 {
            bottom_left += &sketch.s2 * &blocks.k21;
            let bottom_right = &sketch.s21 * &blocks.k12 + &sketch.s2 * &blocks.k2;
            *flops += product_cost(&sketch.s2, &blocks.k21)
                + product_cost(&sketch.s21, &blocks.k12)
                + product_cost(&sketch.s2, &blocks.k2);
            out.view_mut((m1, n0), (dm, ns)).copy_from(&bottom_right);
        }
        out.view_mut((m1, 0), (dm, n0)).copy_from(&bottom_left);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    /// Draw proportionally to the sketched variance.
    V2,
    /// Uniform draws, the baseline.
    Uniform,
}

impl Acquisition {
    pub fn tag(self) -> &'static str {
        match self {
            Acquisition::V2 => "v2",
            Acquisition::Uniform => "uniform",
        }
    }
}

/// Noise level used to scale the acquisition scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SigmaSource {
    Fixed { value: f64 },
    /// Re-estimated from an exact fit on the labeled set each iteration.
    Estimated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveLearningConfig {
    pub kernel: KernelSpec,
    pub initial_size: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub sketch_rule: SketchRule,
    pub lambda_rule: LambdaRule,
    pub acquisition: Acquisition,
    pub distribution: SketchDistribution,
    pub rescale_on_grow: bool,
    pub sigma: SigmaSource,
    /// Stop when the test MSE improves by less than `1e-4` over 3 iterations.
    pub early_stop: bool,
    pub seed: u64,
    /// When false `wall_time_ms` is written as 0 so histories are bit-reproducible.
    pub record_timing: bool,
}

impl ActiveLearningConfig {
    fn validate(&self, pool: usize) -> Result<()> {
        self.kernel.validate()?;
        if self.initial_size < 2 {
            return Err(Error::InvalidInput("initial labeled set needs at least 2 points".into()));
        }
        if self.initial_size > pool {
            return Err(Error::PoolTooSmall {
                requested: self.initial_size,
                available: pool,
            });
        }
        if let SigmaSource::Fixed { value } = self.sigma {
            check_sigma(value)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub n_labeled: usize,
    pub m: usize,
    pub lambda: f64,
    pub test_mse: f64,
    pub acquisition_mode: String,
    pub seed: u64,
    pub wall_time_ms: f64,
}

/// Per-update accounting of the incremental product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateCost {
    pub n0: usize,
    pub ns: usize,
    pub m1: usize,
    pub m2: usize,
    pub flops: u64,
}

impl UpdateCost {
    /// Multiply-adds of recomputing `S G` from scratch.
    pub fn full_recompute(&self) -> u64 {
        (self.m2 * (self.n0 + self.ns) * (self.n0 + self.ns)) as u64
    }

    /// Multiply-adds spent on the new rows `S_21 G_1`, which no block reuse avoids.
    pub fn new_row_cost(&self) -> u64 {
        ((self.m2 - self.m1) * (self.n0 + self.ns) * (self.n0 + self.ns)) as u64
    }
}

#[derive(Clone, Debug)]
pub struct ActiveLearningRun {
    pub history: Vec<HistoryRecord>,
    pub costs: Vec<UpdateCost>,
    /// Set when the pool ran out before the iteration budget.
    pub truncated: bool,
    pub stopped_early: bool,
    pub state: ActiveLearningState,
}

/// Labeled/unlabeled split with the cached sketch product over the labeled set.
#[derive(Clone, Debug)]
pub struct ActiveLearningState {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    gram: DMatrix<f64>,
    sk_cache: DMatrix<f64>,
    sketch: SketchMatrix,
}

impl ActiveLearningState {
    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn sketch(&self) -> &SketchMatrix {
        &self.sketch
    }

    /// `S G` over the labeled set, with `G` the unscaled Gram matrix.
    pub fn sk_cache(&self) -> &DMatrix<f64> {
        &self.sk_cache
    }

    /// Largest entry deviation between the cache and a from-scratch `S G`.
    pub fn cache_deviation(&self, kernel: &KernelSpec, master: &Dataset) -> f64 {
        let g = gram_block(kernel, master, &self.labeled, &self.labeled);
        (self.sketch.matrix() * g - &self.sk_cache).amax()
    }

    fn spot_check(&self, rng: &mut ChaCha8Rng) {
        let j = rng.random_range(0..self.gram.ncols());
        let col = self.sketch.matrix() * self.gram.column(j);
        let dev = (col - self.sk_cache.column(j)).amax();
        let scale = self.sk_cache.amax().max(1.0);
        debug_assert!(dev <= 1e-10 * scale, "incremental S K column {j} off by {dev}");
    }
}

fn test_mse(
    kernel: &KernelSpec,
    labeled: &Dataset,
    test: &Dataset,
    sf: &SketchedFit,
) -> Result<f64> {
    let weights = sf.mean_weights(labeled.responses())?;
    let queries: Vec<Vec<f64>> = test.points().map(<[f64]>::to_vec).collect();
    let cross = cross_kernel(kernel, labeled, &queries)?;
    let pred = cross.transpose() * weights;
    Ok((pred - test.responses()).norm_squared() / test.n() as f64)
}

fn sketch_dimension(rule: SketchRule, kernel: &KernelSpec, data: &Dataset, n: usize, lambda: f64) -> Result<usize> {
    let s_lambda = if rule.needs_spectrum() {
        let k = build_kernel_matrix(kernel, data)?;
        let spectral = decompose(&k)?;
        Some(effective_dimension(spectral.eigenvalues().as_slice(), lambda)?)
    } else {
        None
    };
    rule.dimension(n, s_lambda)
}

fn acquisition_sigma(config: &ActiveLearningConfig, gram: &DMatrix<f64>, labeled: &Dataset, lambda: f64) -> Result<f64> {
    match config.sigma {
        SigmaSource::Fixed { value } => Ok(value),
        SigmaSource::Estimated => {
            let n = gram.nrows() as f64;
            let k = KernelMatrix::from_matrix(gram / n)?;
            let exact = fit(&k, labeled.responses(), lambda)?;
            Ok(estimate_sigma(&exact, labeled)?.sigma())
        }
    }
}

/// Runs the acquisition loop on the pool `master`, reporting MSE on `test`.
pub fn run_active_learning(master: &Dataset, test: &Dataset, config: &ActiveLearningConfig) -> Result<ActiveLearningRun> {
    config.validate(master.n())?;
    if test.dim() != master.dim() {
        return Err(Error::DimensionMismatch {
            expected: master.dim(),
            found: test.dim(),
        });
    }
    let kernel = &config.kernel;
    kernel.check_dataset(master)?;
    kernel.check_dataset(test)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
    let labeled: Vec<usize> = index::sample(&mut init_rng, master.n(), config.initial_size).into_vec();
    let mut in_labeled = vec![false; master.n()];
    for &i in &labeled {
        in_labeled[i] = true;
    }
    let unlabeled: Vec<usize> = (0..master.n()).filter(|&i| !in_labeled[i]).collect();

    let n0 = labeled.len();
    let mut lambda = config.lambda_rule.evaluate(n0)?;
    let labeled_data = master.subset(&labeled)?;
    let m = sketch_dimension(config.sketch_rule, kernel, &labeled_data, n0, lambda)?;
    let sketch = SketchMatrix::generate(config.distribution, derive_seed(config.seed, 1), m, n0)?;
    let gram = gram_block(kernel, master, &labeled, &labeled);
    let sk_cache = sketch.matrix() * &gram;
    let mut state = ActiveLearningState {
        labeled,
        unlabeled,
        gram,
        sk_cache,
        sketch,
    };

    let mut check_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
    let mut history = Vec::new();
    let mut costs = Vec::new();
    let mut truncated = false;
    let mut stopped_early = false;

    for iteration in 0..=config.iterations {
        let start = Instant::now();
        let n0 = state.labeled.len();
        let labeled_data = master.subset(&state.labeled)?;
        let sf = leading_fit(&state.sk_cache, &state.sketch, lambda)?;
        let mse = test_mse(kernel, &labeled_data, test, &sf)?;

        let last = iteration == config.iterations;
        if !last && state.unlabeled.is_empty() {
            truncated = true;
        }
        let mut batch = None;
        if !last && !truncated {
            let ns = config.batch_size.min(state.unlabeled.len());
            truncated = ns < config.batch_size;
            let weights = match config.acquisition {
                Acquisition::Uniform => vec![1.0; state.unlabeled.len()],
                Acquisition::V2 => {
                    let sigma = acquisition_sigma(config, &state.gram, &labeled_data, lambda)?;
                    let sections = gram_block(kernel, master, &state.labeled, &state.unlabeled);
                    sf.unit_v2_batch(&sections)?
                        .into_iter()
                        .map(|b| VarianceEstimate::scaled(b, sigma, Estimator::V2).map(|v| v.value))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let draw_seed = derive_seed(config.seed, 1000 + iteration as u64);
            batch = Some(weighted_sample_without_replacement(&weights, ns, draw_seed)?);
        }

        if let Some(batch) = batch {
            let chosen: Vec<usize> = batch.indices.iter().map(|&p| state.unlabeled[p]).collect();
            let cost = grow(&mut state, master, config, &chosen, iteration)?;
            costs.push(cost);
            lambda = config.lambda_rule.evaluate(state.labeled.len())?;
            if cfg!(debug_assertions) {
                state.spot_check(&mut check_rng);
            }
        }

        history.push(HistoryRecord {
            iteration,
            n_labeled: n0,
            m: sf.m(),
            lambda: sf.lambda(),
            test_mse: mse,
            acquisition_mode: config.acquisition.tag().to_string(),
            seed: config.seed,
            wall_time_ms: if config.record_timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        });

        if truncated {
            break;
        }
        if config.early_stop && history.len() >= 4 {
            let t = history.len() - 1;
            if history[t - 3].test_mse - history[t].test_mse < 1e-4 {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(ActiveLearningRun {
        history,
        costs,
        truncated,
        stopped_early,
        state,
    })
}

/// Sketched fit from the cached `S G`. When the full system is ill-conditioned the
/// fit falls back to the largest leading block of sketch rows that passes the
/// condition probe; the nested rows keep the estimator a valid sketch of smaller `m`.
fn leading_fit(cache: &DMatrix<f64>, sketch: &SketchMatrix, lambda: f64) -> Result<SketchedFit> {
    let (m, n0) = cache.shape();
    let scale = 1.0 / n0 as f64;
    let first = match SketchedFit::from_product(cache * scale, sketch, lambda) {
        Err(Error::IllConditioned { condition }) => condition,
        other => return other,
    };
    for rows in (1..m).rev() {
        let leading = SketchMatrix::from_matrix(sketch.matrix().rows(0, rows).into_owned())?;
        match SketchedFit::from_product(cache.rows(0, rows) * scale, &leading, lambda) {
            Err(Error::IllConditioned { .. }) => continue,
            Ok(sf) => {
                log::warn!("sketched system with m={m} has condition {first:.3e}; using the leading {rows} rows");
                return Ok(sf);
            }
            err => return err,
        }
    }
    Err(Error::IllConditioned { condition: first })
}

/// Moves `chosen` into the labeled set and updates the sketch and cache.
fn grow(
    state: &mut ActiveLearningState,
    master: &Dataset,
    config: &ActiveLearningConfig,
    chosen: &[usize],
    iteration: usize,
) -> Result<UpdateCost> {
    let kernel = &config.kernel;
    let (m1, n0) = state.sk_cache.shape();
    let ns = chosen.len();
    let n2 = n0 + ns;
    let lambda2 = config.lambda_rule.evaluate(n2)?;
    let mut labeled2 = state.labeled.clone();
    labeled2.extend_from_slice(chosen);
    let m2 = if config.sketch_rule.needs_spectrum() {
        sketch_dimension(config.sketch_rule, kernel, &master.subset(&labeled2)?, n2, lambda2)?
    } else {
        config.sketch_rule.dimension(n2, None)?
    }
    .max(m1);

    let growth_seed = derive_seed(config.seed, 2000 + iteration as u64);
    let sketch2 = state.sketch.extend(m2, n2, growth_seed, config.rescale_on_grow)?;
    let retained_scale = if config.rescale_on_grow && m2 != m1 {
        (m1 as f64 / m2 as f64).sqrt()
    } else {
        1.0
    };
    let k12 = gram_block(kernel, master, &state.labeled, chosen);
    let k2 = gram_block(kernel, master, chosen, chosen);
    let blocks = KernelBlocks {
        k21: k12.transpose(),
        k12,
        k2,
    };
    let sblocks = SketchBlocks::split(&sketch2, m1, n0, retained_scale)?;
    let mut flops = 0;
    let cache2 = incremental_sk(&state.sk_cache, &state.gram, &blocks, &sblocks, &mut flops)?;

    let mut gram2 = DMatrix::zeros(n2, n2);
    gram2.view_mut((0, 0), (n0, n0)).copy_from(&state.gram);
    gram2.view_mut((0, n0), (n0, ns)).copy_from(&blocks.k12);
    gram2.view_mut((n0, 0), (ns, n0)).copy_from(&blocks.k21);
    gram2.view_mut((n0, n0), (ns, ns)).copy_from(&blocks.k2);

    let taken: std::collections::HashSet<usize> = chosen.iter().copied().collect();
    state.unlabeled.retain(|i| !taken.contains(i));
    state.labeled = labeled2;
    state.gram = gram2;
    state.sk_cache = cache2;
    state.sketch = sketch2;
    Ok(UpdateCost {
        n0,
        ns,
        m1,
        m2,
        flops,
    })
}

/// Unit-noise `V2` of every pool point under the current state, for inspection.
pub fn pool_scores(state: &ActiveLearningState, master: &Dataset, kernel: &KernelSpec, lambda: f64) -> Result<DVector<f64>> {
    let sf = leading_fit(&state.sk_cache, &state.sketch, lambda)?;
    let sections = gram_block(kernel, master, &state.labeled, &state.unlabeled);
    Ok(DVector::from_vec(sf.unit_v2_batch(&sections)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{generate, Generator, SyntheticSpec};

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn exhaustive_draw() {
        let b = weighted_sample_without_replacement(&[1.0; 5], 5, 3).unwrap();
        let mut idx = b.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn degenerate_mass() {
        for seed in 0..50 {
            let b = weighted_sample_without_replacement(&[1.0, 0.0, 0.0], 1, seed).unwrap();
            assert_eq!(b.indices, vec![0]);
            assert_eq!(b.weights, vec![1.0]);
        }
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let b = weighted_sample_without_replacement(&[0.0; 4], 4, 1).unwrap();
        assert_eq!(b.indices.len(), 4);
        let b = weighted_sample_without_replacement(&[1.0, 0.0, 0.0], 3, 2).unwrap();
        assert_eq!(b.indices[0], 0);
    }

    #[test]
    fn pool_too_small() {
        assert!(matches!(
            weighted_sample_without_replacement(&[1.0, 1.0], 3, 0),
            Err(Error::PoolTooSmall { requested: 3, available: 2 })
        ));
        assert!(weighted_sample_without_replacement(&[1.0, -1.0], 1, 0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let w = [0.3, 1.2, 0.1, 2.0, 0.7];
        assert_eq!(
            weighted_sample_without_replacement(&w, 3, 42).unwrap(),
            weighted_sample_without_replacement(&w, 3, 42).unwrap()
        );
    }

    #[test]
    fn first_draw_frequency() {
        let trials = 100_000;
        let hits = (0..trials)
            .filter(|&t| weighted_sample_without_replacement(&[2.0, 1.0, 1.0], 1, t).unwrap().indices[0] == 0)
            .count();
        let freq = hits as f64 / trials as f64;
        assert!((0.49..=0.51).contains(&freq), "{freq}");
    }

    #[test]
    fn equal_weights_are_uniform() {
        // all 20 three-subsets of a pool of 6 are equally likely
        let trials = 10_000u64;
        let mut counts = std::collections::HashMap::new();
        for t in 0..trials {
            let mut idx = weighted_sample_without_replacement(&[1.0; 6], 3, t).unwrap().indices;
            idx.sort();
            *counts.entry(idx).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 20);
        let expected = trials as f64 / 20.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square with 19 degrees of freedom: P(X > 43.82) = 0.001
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    fn random_update(n0: usize, ns: usize, m1: usize, dm: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_matrix(n0 + ns, n0 + ns, &mut rng);
        let g = &b * b.transpose();
        let s = random_matrix(m1 + dm, n0 + ns, &mut rng);
        let cache = s.view((0, 0), (m1, n0)) * g.view((0, 0), (n0, n0));
        (g, s, cache)
    }

    #[test]
    fn block_update_matches_full_product() {
        let (n0, ns, m1, dm) = (50, 10, 6, 2);
        let (g, s, cache) = random_update(n0, ns, m1, dm, 5);
        let blocks = KernelBlocks {
            k12: g.view((0, n0), (n0, ns)).into_owned(),
            k21: g.view((n0, 0), (ns, n0)).into_owned(),
            k2: g.view((n0, n0), (ns, ns)).into_owned(),
        };
        let sketch = SketchMatrix::from_matrix(s.clone()).unwrap();
        let sb = SketchBlocks::split(&sketch, m1, n0, 1.0).unwrap();
        let mut flops = 0;
        let g1 = g.view((0, 0), (n0, n0)).into_owned();
        let out = incremental_sk(&cache, &g1, &blocks, &sb, &mut flops).unwrap();
        assert!((out - &s * &g).amax() <= 1e-10);
        let expected = m1 * ns * n0 * 2 + m1 * ns * ns + dm * n0 * n0 + 2 * dm * ns * n0 + dm * ns * ns;
        assert_eq!(flops, expected as u64);
    }

    #[test]
    fn empty_update_is_identity() {
        let (n0, m1) = (12, 3);
        let (g, _, cache) = random_update(n0, 0, m1, 0, 6);
        let blocks = KernelBlocks {
            k12: DMatrix::zeros(n0, 0),
            k21: DMatrix::zeros(0, n0),
            k2: DMatrix::zeros(0, 0),
        };
        let sb = SketchBlocks {
            s1: DMatrix::zeros(m1, n0),
            s12: DMatrix::zeros(m1, 0),
            s21: DMatrix::zeros(0, n0),
            s2: DMatrix::zeros(0, 0),
            retained_scale: 1.0,
        };
        let mut flops = 0;
        assert_eq!(incremental_sk(&cache, &g, &blocks, &sb, &mut flops).unwrap(), cache);
        assert_eq!(flops, 0);
    }

    #[test]
    fn zero_sketch_blocks() {
        let (n0, ns, m1, dm) = (10, 4, 3, 2);
        let (g, s, cache) = random_update(n0, ns, m1, dm, 7);
        let s1 = s.view((0, 0), (m1, n0)).into_owned();
        let k12 = g.view((0, n0), (n0, ns)).into_owned();
        let blocks = KernelBlocks {
            k21: k12.transpose(),
            k12: k12.clone(),
            k2: g.view((n0, n0), (ns, ns)).into_owned(),
        };
        let sb = SketchBlocks {
            s1: s1.clone(),
            s12: DMatrix::zeros(m1, ns),
            s21: DMatrix::zeros(dm, n0),
            s2: DMatrix::zeros(dm, ns),
            retained_scale: 1.0,
        };
        let g1 = g.view((0, 0), (n0, n0)).into_owned();
        let out = incremental_sk(&cache, &g1, &blocks, &sb, &mut 0).unwrap();
        assert_eq!(out.view((0, 0), (m1, n0)), cache);
        assert!((out.view((0, n0), (m1, ns)) - &s1 * &k12).amax() <= 1e-12);
        assert_eq!(out.view((m1, 0), (dm, n0 + ns)).amax(), 0.0);
    }

    #[test]
    fn shape_errors() {
        let blocks = KernelBlocks {
            k12: DMatrix::zeros(3, 1),
            k21: DMatrix::zeros(1, 3),
            k2: DMatrix::zeros(1, 1),
        };
        let sb = SketchBlocks {
            s1: DMatrix::zeros(2, 3),
            s12: DMatrix::zeros(2, 2),
            s21: DMatrix::zeros(0, 3),
            s2: DMatrix::zeros(0, 1),
            retained_scale: 1.0,
        };
        let err = incremental_sk(&DMatrix::zeros(2, 3), &DMatrix::zeros(3, 3), &blocks, &sb, &mut 0);
        assert!(matches!(err, Err(Error::ShapeMismatch { what: "S_12", .. })));
    }

    #[test]
    fn rank_deficient_gram_uses_leading_rows() {
        let xs: Vec<f64> = (0..40).map(|i| 1.0 + 1e-3 * i as f64).collect();
        let data = Dataset::univariate(&xs, &vec![0.0; 40]).unwrap();
        let idx: Vec<usize> = (0..40).collect();
        let kernel = KernelSpec::Gaussian { bandwidth: 0.25 };
        let g = gram_block(&kernel, &data, &idx, &idx);
        let sketch = SketchMatrix::generate(SketchDistribution::Gaussian, 3, 6, 40).unwrap();
        let cache = sketch.matrix() * &g;
        let lambda = 1e-3;
        assert!(matches!(
            SketchedFit::from_product(&cache / 40.0, &sketch, lambda),
            Err(Error::IllConditioned { .. })
        ));
        let sf = leading_fit(&cache, &sketch, lambda).unwrap();
        let rows = sf.m();
        assert!((1..6).contains(&rows));
        assert!(sf.condition() <= crate::sketched_krr::MAX_CONDITION);
        let leading = SketchMatrix::from_matrix(sketch.matrix().rows(0, rows).into_owned()).unwrap();
        let direct = SketchedFit::from_product(leading.matrix() * &g / 40.0, &leading, lambda).unwrap();
        let sections = gram_block(&kernel, &data, &idx, &[0, 39]);
        for (a, b) in sf.unit_v2_batch(&sections).unwrap().iter().zip(direct.unit_v2_batch(&sections).unwrap()) {
            assert!((a - b).abs() <= 1e-4 * b, "{a} vs {b}");
        }
    }

    fn sim_config(acquisition: Acquisition, iterations: usize) -> ActiveLearningConfig {
        ActiveLearningConfig {
            kernel: KernelSpec::Gaussian { bandwidth: 0.25 },
            initial_size: 40,
            batch_size: 10,
            iterations,
            sketch_rule: SketchRule::LogPower { scale: 1.0, power: 1.0 },
            lambda_rule: LambdaRule::LogPower { scale: 1.0, power: 0.5 },
            acquisition,
            distribution: SketchDistribution::Gaussian,
            rescale_on_grow: true,
            sigma: SigmaSource::Fixed { value: 1.0 },
            early_stop: false,
            seed: 11,
            record_timing: false,
        }
    }

    fn pool(n: usize, seed: u64) -> Dataset {
        generate(&SyntheticSpec {
            generator: Generator::Clustered,
            n,
            sigma: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn zero_budget_records_initial_fit() {
        let run = run_active_learning(&pool(200, 1), &pool(100, 2), &sim_config(Acquisition::V2, 0)).unwrap();
        assert_eq!(run.history.len(), 1);
        assert_eq!(run.history[0].n_labeled, 40);
        assert!(run.costs.is_empty());
        assert!(!run.truncated);
    }

    #[test]
    fn loop_keeps_sets_disjoint_and_cache_exact() {
        let master = pool(300, 3);
        let run = run_active_learning(&master, &pool(100, 4), &sim_config(Acquisition::V2, 6)).unwrap();
        let state = &run.state;
        assert_eq!(state.labeled().len(), 40 + 6 * 10);
        let mut all: Vec<usize> = state.labeled().iter().chain(state.unlabeled()).copied().collect();
        all.sort();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        let sizes: Vec<usize> = run.history.iter().map(|h| h.n_labeled).collect();
        assert_eq!(sizes, (0..=6).map(|i| 40 + 10 * i).collect::<Vec<_>>());
        let kernel = KernelSpec::Gaussian { bandwidth: 0.25 };
        let scale = state.sk_cache().amax();
        assert!(state.cache_deviation(&kernel, &master) <= 1e-10 * scale);
        assert_eq!(state.sketch().regenerate().unwrap(), *state.sketch());
        for c in &run.costs {
            assert!(c.flops - c.new_row_cost().min(c.flops) <= 3 * (c.m2 * (c.n0 + c.ns) * c.ns) as u64);
        }
    }

    #[test]
    fn pool_exhaustion_truncates() {
        let master = pool(70, 5);
        let run = run_active_learning(&master, &pool(50, 6), &sim_config(Acquisition::Uniform, 10)).unwrap();
        assert!(run.truncated);
        assert!(run.state.unlabeled().is_empty());
        assert_eq!(run.history.len(), 4);
        assert_eq!(run.history.last().unwrap().n_labeled, 70);
        assert_eq!(run.state.labeled().len(), 70);
    }

    #[test]
    fn acquisition_is_sigma_invariant() {
        let master = pool(250, 7);
        let test = pool(80, 8);
        let base = run_active_learning(&master, &test, &sim_config(Acquisition::V2, 4)).unwrap();
        let mut cfg = sim_config(Acquisition::V2, 4);
        cfg.sigma = SigmaSource::Fixed { value: 3.0 };
        let scaled = run_active_learning(&master, &test, &cfg).unwrap();
        assert_eq!(base.state.labeled(), scaled.state.labeled());
        assert_eq!(base.history, scaled.history);
    }

    #[test]
    fn estimated_sigma_runs() {
        let mut cfg = sim_config(Acquisition::V2, 2);
        cfg.sigma = SigmaSource::Estimated;
        let run = run_active_learning(&pool(200, 9), &pool(60, 10), &cfg).unwrap();
        assert_eq!(run.history.len(), 3);
    }

    #[test]
    fn early_stop_on_flat_curve() {
        let mut cfg = sim_config(Acquisition::Uniform, 30);
        cfg.early_stop = true;
        cfg.batch_size = 1;
        let run = run_active_learning(&pool(400, 11), &pool(100, 12), &cfg).unwrap();
        if run.stopped_early {
            let h = &run.history;
            let t = h.len() - 1;
            assert!(h[t - 3].test_mse - h[t].test_mse < 1e-4);
        } else {
            assert_eq!(run.history.len(), 31);
        }
    }

    #[test]
    fn pool_scores_are_nonnegative() {
        let master = pool(150, 13);
        let run = run_active_learning(&master, &pool(50, 14), &sim_config(Acquisition::V2, 1)).unwrap();
        let lambda = sim_config(Acquisition::V2, 1).lambda_rule.evaluate(50).unwrap();
        let scores = pool_scores(&run.state, &master, &KernelSpec::Gaussian { bandwidth: 0.25 }, lambda).unwrap();
        assert_eq!(scores.len(), 100);
        assert!(scores.iter().all(|&s| s >= 0.0));
    }
}
