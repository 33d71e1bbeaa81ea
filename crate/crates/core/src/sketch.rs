//! Sub-Gaussian sketch matrices.
//!
//! Entries are i.i.d. with variance `1/m`. Every row of every block is drawn from
//! its own ChaCha8 stream: the base matrix uses stream `row`, and the blocks added
//! by [`SketchMatrix::extend`] use stream `(block << 32) | row` with `block` 1 for
//! `S_12`, 2 for `S_21` and 3 for `S_2`. Generation is therefore independent of
//! evaluation order and thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpectralDecomposition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchDistribution {
    Gaussian,
    Rademacher,
    /// Caller-supplied entries (identity sketches, test fixtures).
    Fixed,
}

impl SketchDistribution {
    fn tag(self) -> u64 {
        match self {
            SketchDistribution::Gaussian => 0,
            SketchDistribution::Rademacher => 1,
            SketchDistribution::Fixed => 2,
        }
    }

    fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(SketchDistribution::Gaussian),
            1 => Ok(SketchDistribution::Rademacher),
            2 => Ok(SketchDistribution::Fixed),
            other => Err(Error::MalformedSketch(format!("unknown distribution tag {other}"))),
        }
    }
}

/// One growth step applied by [`SketchMatrix::extend`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Growth {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub rescale_on_grow: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SketchMatrix {
    entries: DMatrix<f64>,
    distribution: SketchDistribution,
    seed: u64,
    base: (usize, usize),
    growth: Vec<Growth>,
}

fn row_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_row(distribution: SketchDistribution, rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    match distribution {
        SketchDistribution::Gaussian => (0..len)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect(),
        SketchDistribution::Rademacher => (0..len)
            .map(|_| if rng.random::<bool>() { scale } else { -scale })
            .collect(),
        SketchDistribution::Fixed => unreachable!("fixed sketches are never drawn"),
    }
}

/// Fills `rows x cols` with rows drawn from streams `(block << 32) | row`.
fn draw_block(
    distribution: SketchDistribution,
    seed: u64,
    block: u64,
    rows: usize,
    cols: usize,
    scale: f64,
) -> DMatrix<f64> {
    let data: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut rng = row_stream(seed, (block << 32) | r as u64);
            draw_row(distribution, &mut rng, cols, scale)
        })
        .collect();
    DMatrix::from_fn(rows, cols, |i, j| data[i][j])
}

impl SketchMatrix {
    /// Draws an `m x n` sketch with entries of variance `1/m`.
    pub fn generate(distribution: SketchDistribution, seed: u64, m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidInput(format!("sketch dimensions must be positive, got {m} x {n}")));
        }
        if distribution == SketchDistribution::Fixed {
            return Err(Error::InvalidInput("fixed sketches are built with from_matrix".into()));
        }
        if m > n {
            log::warn!("oversketching: projection dimension m={m} exceeds n={n}");
        }
        let scale = 1.0 / (m as f64).sqrt();
        let entries = draw_block(distribution, seed, 0, m, n, scale);
        Ok(Self {
            entries,
            distribution,
            seed,
            base: (m, n),
            growth: Vec::new(),
        })
    }

    /// Wraps a caller-supplied matrix.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidInput("sketch must be non-empty".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sketch entries"));
        }
        let base = entries.shape();
        Ok(Self {
            entries,
            distribution: SketchDistribution::Fixed,
            seed: 0,
            base,
            growth: Vec::new(),
        })
    }

    /// The `n x n` identity, for which the sketched estimators reduce to the exact ones.
    pub fn identity(n: usize) -> Result<Self> {
        Self::from_matrix(DMatrix::identity(n, n))
    }

    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n(&self) -> usize {
        self.entries.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn distribution(&self) -> SketchDistribution {
        self.distribution
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn growth(&self) -> &[Growth] {
        &self.growth
    }

    pub fn is_oversketched(&self) -> bool {
        self.m() > self.n()
    }

    /// Grows the sketch to `m2 x n2` by appending the blocks
    ///
    /// ```text
    /// [ S_1   S_12 ]
    /// [ S_21  S_2  ]
    /// ```
    ///
    /// drawn from `seed` at scale `1/sqrt(m2)`. With `rescale_on_grow` the retained
    /// block `S_1` is multiplied by `sqrt(m/m2)` so all entries share variance `1/m2`;
    /// otherwise it is kept verbatim.
    pub fn extend(&self, m2: usize, n2: usize, seed: u64, rescale_on_grow: bool) -> Result<Self> {
        let (m, n) = (self.m(), self.n());
        if m2 < m || n2 < n {
            return Err(Error::ShrinkingSketch { m, n, m2, n2 });
        }
        if (m2, n2) == (m, n) {
            return Ok(self.clone());
        }
        if self.distribution == SketchDistribution::Fixed {
            return Err(Error::InvalidInput("fixed sketches cannot be extended".into()));
        }
        if m2 > n2 {
            log::warn!("oversketching: projection dimension m={m2} exceeds n={n2}");
        }
        let scale = 1.0 / (m2 as f64).sqrt();
        let mut entries = DMatrix::zeros(m2, n2);
        let retained = if rescale_on_grow && m2 != m {
            &self.entries * (m as f64 / m2 as f64).sqrt()
        } else {
            self.entries.clone()
        };
        entries.view_mut((0, 0), (m, n)).copy_from(&retained);
        if n2 > n {
            let s12 = draw_block(self.distribution, seed, 1, m, n2 - n, scale);
            entries.view_mut((0, n), (m, n2 - n)).copy_from(&s12);
        }
        if m2 > m {
            let s21 = draw_block(self.distribution, seed, 2, m2 - m, n, scale);
            entries.view_mut((m, 0), (m2 - m, n)).copy_from(&s21);
            if n2 > n {
                let s2 = draw_block(self.distribution, seed, 3, m2 - m, n2 - n, scale);
                entries.view_mut((m, n), (m2 - m, n2 - n)).copy_from(&s2);
            }
        }
        let mut growth = self.growth.clone();
        growth.push(Growth {
            m: m2,
            n: n2,
            seed,
            rescale_on_grow,
        });
        Ok(Self {
            entries,
            distribution: self.distribution,
            seed: self.seed,
            base: self.base,
            growth,
        })
    }

    /// Rebuilds this matrix from its base seed and growth history.
    pub fn regenerate(&self) -> Result<Self> {
        if self.distribution == SketchDistribution::Fixed {
            return Ok(self.clone());
        }
        let mut s = Self::generate(self.distribution, self.seed, self.base.0, self.base.1)?;
        for g in &self.growth {
            s = s.extend(g.m, g.n, g.seed, g.rescale_on_grow)?;
        }
        Ok(s)
    }

    /// Little-endian layout: distribution tag, seed, m, n as `u64`, then the
    /// `m * n` entries as `f64` in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, n) = (self.m(), self.n());
        let mut out = Vec::with_capacity(32 + 8 * m * n);
        for word in [self.distribution.tag(), self.seed, m as u64, n as u64] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for i in 0..m {
            for j in 0..n {
                out.extend_from_slice(&self.entries[(i, j)].to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes). Growth history is not stored, so the
    /// result is treated as a base matrix.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::MalformedSketch(format!("header needs 32 bytes, got {}", bytes.len())));
        }
        let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
        let distribution = SketchDistribution::from_tag(word(0))?;
        let seed = word(1);
        let (m, n) = (word(2) as usize, word(3) as usize);
        let expected = m
            .checked_mul(n)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(32))
            .ok_or_else(|| Error::MalformedSketch("dimensions overflow".into()))?;
        if bytes.len() != expected || m == 0 || n == 0 {
            return Err(Error::MalformedSketch(format!(
                "expected {expected} bytes for a {m} x {n} sketch, got {}",
                bytes.len()
            )));
        }
        let body = &bytes[32..];
        let entries = DMatrix::from_fn(m, n, |i, j| {
            let at = 8 * (i * n + j);
            f64::from_le_bytes(body[at..at + 8].try_into().unwrap())
        });
        Ok(Self {
            entries,
            distribution,
            seed,
            base: (m, n),
            growth: Vec::new(),
        })
    }
}

/// Diagnostics for the two sketch conditions: singular values of `S U_1` inside
/// `[1/2, 3/2]`, and `||S U_2 D_2^{1/2}||_op <= c' sqrt(lambda)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub smin: f64,
    pub smax: f64,
    pub tail_opnorm: f64,
    pub lambda: f64,
    pub s_lambda: usize,
    pub c_prime: f64,
    pub passed: bool,
}

pub const DEFAULT_C_PRIME: f64 = 2.0;

/// Evaluates both sketch conditions with the split taken at `lambda`.
///
/// With `s_lambda = 0`, `S U_1` is empty and `smin = smax = 1` by convention. With
/// `s_lambda > m`, `S U_1` has a nontrivial kernel and `smin = 0`.
pub fn check_assumption(
    sketch: &SketchMatrix,
    spectral: &SpectralDecomposition,
    lambda: f64,
    c_prime: f64,
) -> Result<AssumptionReport> {
    let n = spectral.eigenvalues().len();
    if sketch.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: sketch.n(),
        });
    }
    let spectral = spectral.clone().split_at(lambda)?;
    let s = spectral.split();
    let su1 = sketch.matrix() * spectral.leading_vectors();
    let (smin, smax) = if s == 0 {
        (1.0, 1.0)
    } else {
        let sv = su1.singular_values();
        let smax = sv.max();
        let smin = if s > sketch.m() { 0.0 } else { sv.min() };
        (smin, smax)
    };
    let tail_opnorm = if s == n {
        0.0
    } else {
        let root: DVector<f64> = spectral.tail_eigenvalues().map(f64::sqrt);
        let mut b = sketch.matrix() * spectral.tail_vectors();
        for (j, mut col) in b.column_iter_mut().enumerate() {
            col *= root[j];
        }
        if b.amax() == 0.0 {
            0.0
        } else {
            b.singular_values().max()
        }
    };
    let passed = smin >= 0.5 && smax <= 1.5 && tail_opnorm <= c_prime * lambda.sqrt();
    Ok(AssumptionReport {
        smin,
        smax,
        tail_opnorm,
        lambda,
        s_lambda: s,
        c_prime,
        passed,
    })
}
