//! Exact kernel ridge regression and its predictive variance.
//!
//! The weights solve `(K + lambda I) w = y / n` through a Cholesky factor of
//! `K + lambda I`; nothing here forms an explicit inverse.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{build_kernel_matrix, kernel_vector, Dataset, KernelMatrix, KernelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    V1,
    V2,
    V3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceEstimate {
    pub value: f64,
    pub estimator: Estimator,
}

static CLAMPED: AtomicUsize = AtomicUsize::new(0);

/// Number of variance values clamped from a small negative to zero so far.
pub fn clamped_variance_count() -> usize {
    CLAMPED.load(Ordering::Relaxed)
}

impl VarianceEstimate {
    /// Computes `sigma^2 * base`. Negative `base` within `1e-12` is clamped to 0;
    /// anything more negative is an error.
    pub fn scaled(base: f64, sigma: f64, estimator: Estimator) -> Result<Self> {
        if !base.is_finite() {
            return Err(Error::NonFinite("variance"));
        }
        let value = sigma * sigma * base;
        if base < 0.0 {
            if base < -1e-12 {
                return Err(Error::NegativeVariance { value });
            }
            CLAMPED.fetch_add(1, Ordering::Relaxed);
            return Ok(Self { value: 0.0, estimator });
        }
        Ok(Self { value, estimator })
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")))
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")))
    }
}

/// Fitted exact KRR: `w = (K + lambda I)^{-1} y / n`.
#[derive(Clone, Debug)]
pub struct ExactFit {
    weights: DVector<f64>,
    responses: DVector<f64>,
    lambda: f64,
    factor: Cholesky<f64, Dyn>,
}

pub fn fit(k: &KernelMatrix, y: &DVector<f64>, lambda: f64) -> Result<ExactFit> {
    check_lambda(lambda)?;
    let n = k.n();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("responses"));
    }
    let mut shifted = k.matrix().clone();
    for i in 0..n {
        shifted[(i, i)] += lambda;
    }
    let factor = Cholesky::new(shifted).ok_or(Error::FactorizationFailed("K + lambda I"))?;
    let weights = factor.solve(y) / n as f64;
    Ok(ExactFit {
        weights,
        responses: y.clone(),
        lambda,
        factor,
    })
}

impl ExactFit {
    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn factor(&self) -> &Cholesky<f64, Dyn> {
        &self.factor
    }

    /// `y_hat(x) = k(x)^T w`.
    pub fn mean_at(&self, k_x: &DVector<f64>) -> Result<f64> {
        self.check_section(k_x)?;
        Ok(k_x.dot(&self.weights))
    }

    /// `||(K + lambda I)^{-1} k(x)||^2 / n^2`, the variance at unit noise.
    pub fn unit_variance_at(&self, k_x: &DVector<f64>) -> Result<f64> {
        self.check_section(k_x)?;
        let z = self.factor.solve(k_x);
        let n = self.n() as f64;
        Ok(z.norm_squared() / (n * n))
    }

    /// Unit-noise variance for every column of an `n x q` block of kernel sections.
    pub fn unit_variance_batch(&self, sections: &DMatrix<f64>) -> Result<Vec<f64>> {
        if sections.nrows() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: sections.nrows(),
            });
        }
        if sections.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel section"));
        }
        let z = self.factor.solve(sections);
        let n = self.n() as f64;
        Ok(z.column_iter().map(|c| c.norm_squared() / (n * n)).collect())
    }

    /// `V1(x) = sigma^2 / n^2 * k(x)^T (K + lambda I)^{-2} k(x)`.
    pub fn variance_at(&self, k_x: &DVector<f64>, sigma: f64) -> Result<VarianceEstimate> {
        check_sigma(sigma)?;
        VarianceEstimate::scaled(self.unit_variance_at(k_x)?, sigma, Estimator::V1)
    }

    /// Fitted values at the training inputs, `n K w = y - n lambda w`.
    pub fn fitted_values(&self) -> DVector<f64> {
        let n = self.n() as f64;
        &self.responses - &self.weights * (n * self.lambda)
    }

    fn check_section(&self, k_x: &DVector<f64>) -> Result<()> {
        if k_x.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: k_x.len(),
            });
        }
        if k_x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel section"));
        }
        Ok(())
    }
}

/// Exact KRR bundled with its kernel and training data, so predictions take raw points.
#[derive(Clone, Debug)]
pub struct ExactKrr {
    kernel: KernelSpec,
    data: Dataset,
    fit: ExactFit,
}

impl ExactKrr {
    pub fn fit(kernel: KernelSpec, data: Dataset, lambda: f64) -> Result<Self> {
        let k = build_kernel_matrix(&kernel, &data)?;
        let fit = fit(&k, data.responses(), lambda)?;
        Ok(Self { kernel, data, fit })
    }

    pub fn exact_fit(&self) -> &ExactFit {
        &self.fit
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        self.fit.mean_at(&kernel_vector(&self.kernel, &self.data, x)?)
    }

    pub fn variance_v1(&self, x: &[f64], sigma: f64) -> Result<VarianceEstimate> {
        self.fit.variance_at(&kernel_vector(&self.kernel, &self.data, x)?, sigma)
    }
}

/// Result of the binomial-inverse route to `(K + lambda I)^{-1}`.
#[derive(Clone, Debug)]
pub struct WoodburyInverse {
    pub matrix: DMatrix<f64>,
    /// Set when `lambda K + K^2` was numerically singular and a pseudo-inverse was used.
    pub degraded: bool,
}

/// `(1/lambda) (I - K (lambda K + K^2)^{-1} K)`, which equals `(K + lambda I)^{-1}`
/// whenever `K` is nonsingular.
pub fn woodbury_rhs(k: &KernelMatrix, lambda: f64) -> Result<WoodburyInverse> {
    check_lambda(lambda)?;
    let n = k.n();
    let km = k.matrix();
    let mut gram = km * km + km * lambda;
    gram = (&gram + gram.transpose()) * 0.5;

    let solved = Cholesky::new(gram.clone()).and_then(|chol| {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        // (max L_ii / min L_ii)^2 bounds cond(G) from below
        if lo > 0.0 && (hi / lo).powi(2) <= 1e12 {
            Some(chol.solve(km))
        } else {
            None
        }
    });
    let (correction, degraded) = match solved {
        Some(x) => (x, false),
        None => {
            log::warn!("lambda K + K^2 is numerically singular; using pseudo-inverse");
            let eps = 1e-12 * gram.amax().max(f64::MIN_POSITIVE);
            let pinv = gram
                .pseudo_inverse(eps)
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            (pinv * km, true)
        }
    };
    let matrix = (DMatrix::identity(n, n) - km * correction) / lambda;
    Ok(WoodburyInverse { matrix, degraded })
}

/// Residual-based noise estimate `||y - y_hat||^2 / (n - tr(H))`, `H = K (K + lambda I)^{-1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseEstimate {
    /// Estimated noise variance `sigma^2`.
    pub variance: f64,
    pub hat_trace: f64,
    pub dof: f64,
}

impl NoiseEstimate {
    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }
}

pub fn estimate_sigma(fit: &ExactFit, data: &Dataset) -> Result<NoiseEstimate> {
    let n = fit.n();
    if data.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: data.n(),
        });
    }
    // tr(H) = n - lambda tr((K + lambda I)^{-1}) and tr(A^{-1}) = ||L^{-1}||_F^2
    let l_inv = fit
        .factor
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::FactorizationFailed("K + lambda I"))?;
    let hat_trace = n as f64 - fit.lambda * l_inv.norm_squared();
    let dof = n as f64 - hat_trace;
    if !(dof > 0.0) {
        return Err(Error::DegreesOfFreedom { dof });
    }
    // y - y_hat = n lambda w
    let residual = &fit.weights * (n as f64 * fit.lambda);
    Ok(NoiseEstimate {
        variance: residual.norm_squared() / dof,
        hat_trace,
        dof,
    })
}
