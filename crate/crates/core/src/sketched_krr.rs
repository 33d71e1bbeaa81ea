//! Sketched KRR: the projected replacement of `(K + lambda I)^{-1}`,
//!
//! ```text
//! (1/lambda) (I - K S^T M^{-1} S K),   M = lambda S K S^T + S K^2 S^T,
//! ```
//!
//! and the variance estimators built on it. `A = S K` is formed once; `M` is
//! assembled as `lambda A S^T + A A^T`, so `K^2` is never materialized. Per query
//! the cost is `O(nm + m^2)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::exact_krr::{check_lambda, check_sigma, Estimator, VarianceEstimate};
use crate::kernels::{KernelMatrix, SpectralDecomposition};
use crate::sketch::SketchMatrix;

/// Largest condition number of `M` accepted before a fit is declared singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug)]
enum Factor {
    Cholesky(Cholesky<f64, Dyn>),
    // fallback when rounding leaves M slightly indefinite along a direction
    Eigen(SymmetricEigen<f64, Dyn>),
}

#[derive(Clone, Debug)]
pub struct SketchedFit {
    a: DMatrix<f64>,
    system: DMatrix<f64>,
    factor: Factor,
    condition: f64,
    lambda: f64,
}

/// Builds `A = S K` and factorizes `M = lambda A S^T + A A^T`.
pub fn sketched_fit(k: &KernelMatrix, sketch: &SketchMatrix, lambda: f64) -> Result<SketchedFit> {
    if sketch.n() != k.n() {
        return Err(Error::DimensionMismatch {
            expected: k.n(),
            found: sketch.n(),
        });
    }
    // row i of S K is (K s_i)^T since K is symmetric; this needs only O(n) scratch
    let (m, n) = sketch.matrix().shape();
    let mut a = DMatrix::zeros(m, n);
    let mut row = DVector::zeros(n);
    let mut out = DVector::zeros(n);
    for i in 0..m {
        for (dst, src) in row.iter_mut().zip(sketch.matrix().row(i).iter()) {
            *dst = *src;
        }
        out.gemv_tr(1.0, k.matrix(), &row, 0.0);
        for (dst, src) in a.row_mut(i).iter_mut().zip(out.iter()) {
            *dst = *src;
        }
    }
    SketchedFit::from_product(a, sketch, lambda)
}

impl SketchedFit {
    /// Completes a fit from a precomputed `A = S K` (e.g. an incrementally
    /// maintained product).
    pub fn from_product(a: DMatrix<f64>, sketch: &SketchMatrix, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if a.shape() != sketch.matrix().shape() {
            return Err(Error::ShapeMismatch {
                what: "S K",
                expected: sketch.matrix().shape(),
                found: a.shape(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("S K"));
        }
        if sketch.m() > sketch.n() {
            log::warn!("sketched fit with m={} > n={}", sketch.m(), sketch.n());
        }
        // row dot products keep the assembly free of n x m transposed copies
        let s = sketch.matrix();
        let m = a.nrows();
        let mut system = DMatrix::from_fn(m, m, |i, j| lambda * a.row(i).dot(&s.row(j)) + a.row(i).dot(&a.row(j)));
        system = (&system + system.transpose()) * 0.5;

        let eig = system.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::IllConditioned { condition });
        }
        let factor = match Cholesky::new(system.clone()) {
            Some(chol) => Factor::Cholesky(chol),
            None => Factor::Eigen(SymmetricEigen::new(system.clone())),
        };
        Ok(Self {
            a,
            system,
            factor,
            condition,
            lambda,
        })
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `A = S K`.
    pub fn product(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// `M = lambda S K S^T + S K^2 S^T`.
    pub fn system(&self) -> &DMatrix<f64> {
        &self.system
    }

    /// Eigenvalue ratio of `M`, measured during the fit.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `max |M - L L^T|` (or the eigen-reconstruction error on the fallback path).
    pub fn factor_residual(&self) -> f64 {
        let rebuilt = match &self.factor {
            Factor::Cholesky(c) => {
                let l = c.l();
                &l * l.transpose()
            }
            Factor::Eigen(e) => e.recompose(),
        };
        (&self.system - rebuilt).amax()
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            Factor::Cholesky(c) => c.solve(b),
            Factor::Eigen(e) => {
                let mut coef = e.eigenvectors.transpose() * b;
                for (i, mut row) in coef.row_iter_mut().enumerate() {
                    row /= e.eigenvalues[i];
                }
                &e.eigenvectors * coef
            }
        }
    }

    fn check_sections(&self, rows: usize) -> Result<()> {
        if rows != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: rows,
            });
        }
        Ok(())
    }

    /// `R = G - A^T M^{-1} A G` for a block of kernel sections `G` (`n x q`).
    pub fn residuals(&self, sections: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_sections(sections.nrows())?;
        if sections.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel section"));
        }
        let projected = self.solve(&(&self.a * sections));
        Ok(sections - self.a.transpose() * projected)
    }

    /// `V2` at unit noise for every column of `sections`.
    pub fn unit_v2_batch(&self, sections: &DMatrix<f64>) -> Result<Vec<f64>> {
        let r = self.residuals(sections)?;
        let n = self.n() as f64;
        let denom = n * n * self.lambda * self.lambda;
        Ok(r.column_iter().map(|c| c.norm_squared() / denom).collect())
    }

    /// `V3` at unit noise for every column of `sections`.
    pub fn unit_v3_batch(&self, sections: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_sections(sections.nrows())?;
        let w = self.solve(&(&self.a * sections));
        let n = self.n() as f64;
        let back = self.a.transpose() * w;
        Ok(back.column_iter().map(|c| c.norm_squared() / (n * n)).collect())
    }

    /// `V2(x) = sigma^2 / (n^2 lambda^2) ||k(x) - A^T M^{-1} A k(x)||^2`.
    pub fn variance_v2(&self, k_x: &DVector<f64>, sigma: f64) -> Result<VarianceEstimate> {
        check_sigma(sigma)?;
        let base = self.unit_v2_batch(&column(k_x))?[0];
        VarianceEstimate::scaled(base, sigma, Estimator::V2)
    }

    /// `V3(x) = sigma^2 / n^2 (A k)^T M^{-1} A A^T M^{-1} (A k)`, evaluated as
    /// `||A^T M^{-1} A k||^2`. Comparison estimator only.
    pub fn variance_v3(&self, k_x: &DVector<f64>, sigma: f64) -> Result<VarianceEstimate> {
        check_sigma(sigma)?;
        let base = self.unit_v3_batch(&column(k_x))?[0];
        VarianceEstimate::scaled(base, sigma, Estimator::V3)
    }

    /// Sketched dual weights `alpha = M^{-1} A y / n`.
    pub fn alpha(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_sections(y.len())?;
        let w = self.solve(&column(&(&self.a * y)));
        Ok(DVector::from_column_slice(w.as_slice()) / self.n() as f64)
    }

    /// Coefficients `c = (y - A^T M^{-1} A y) / (n lambda)` such that the sketched
    /// mean is `k(x)^T c`.
    pub fn mean_weights(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.residuals(&column(y))?;
        let scale = 1.0 / (self.n() as f64 * self.lambda);
        Ok(DVector::from_column_slice(r.as_slice()) * scale)
    }

    /// `y_sk(x) = k(x)^T (I - A^T M^{-1} A) y / (n lambda)`.
    pub fn predict_mean(&self, y: &DVector<f64>, k_x: &DVector<f64>) -> Result<f64> {
        self.check_sections(k_x.len())?;
        Ok(k_x.dot(&self.mean_weights(y)?))
    }
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Proof quantities for one query: `T1 = ||g - K (lambda K + K^2)^{-1} K g|| / sqrt(n)`
/// and `T2 = ||g - A^T M^{-1} A g|| / sqrt(n)` with `g = k(x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapDiagnostics {
    pub t1: f64,
    pub t2: f64,
    pub lambda: f64,
    /// `T1^2 / lambda`
    pub ratio1: f64,
    /// `T2^2 / lambda`
    pub ratio2: f64,
}

/// `T1` uses the eigensystem: `g - K (lambda K + K^2)^+ K g = U diag(lambda / (mu + lambda)) U^T g`.
pub fn gap_diagnostics(
    spectral: &SpectralDecomposition,
    sf: &SketchedFit,
    k_x: &DVector<f64>,
) -> Result<GapDiagnostics> {
    Ok(gap_diagnostics_batch(spectral, sf, &column(k_x))?[0])
}

pub fn gap_diagnostics_batch(
    spectral: &SpectralDecomposition,
    sf: &SketchedFit,
    sections: &DMatrix<f64>,
) -> Result<Vec<GapDiagnostics>> {
    let n = sf.n();
    if spectral.eigenvalues().len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: spectral.eigenvalues().len(),
        });
    }
    let lambda = sf.lambda();
    let mut coords = spectral.eigenvectors().transpose() * sections;
    for (i, mut row) in coords.row_iter_mut().enumerate() {
        row *= lambda / (spectral.eigenvalues()[i] + lambda);
    }
    let r2 = sf.residuals(sections)?;
    let root_n = (n as f64).sqrt();
    Ok(coords
        .column_iter()
        .zip(r2.column_iter())
        .map(|(c1, c2)| {
            let t1 = c1.norm() / root_n;
            let t2 = c2.norm() / root_n;
            GapDiagnostics {
                t1,
                t2,
                lambda,
                ratio1: t1 * t1 / lambda,
                ratio2: t2 * t2 / lambda,
            }
        })
        .collect())
}
