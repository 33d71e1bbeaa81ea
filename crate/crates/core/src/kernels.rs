//! Kernel functions, the `1/n`-scaled kernel matrix and its eigensystem.
//!
//! Throughout the crate the kernel matrix carries the `1/n` factor,
//! `K_ij = K(X_i, X_j) / n`, while kernel sections `k(x)_i = K(x, X_i)` do not.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression sample: `n` covariate vectors of dimension `d` plus `n` responses.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    // row-major n x d
    inputs: Vec<f64>,
    dim: usize,
    responses: DVector<f64>,
    noise_scale: Option<f64>,
}

impl Dataset {
    pub fn new(inputs: &DMatrix<f64>, responses: DVector<f64>) -> Result<Self> {
        let n = inputs.nrows();
        let dim = inputs.ncols();
        let mut flat = Vec::with_capacity(n * dim);
        for i in 0..n {
            flat.extend(inputs.row(i).iter().copied());
        }
        Self::from_flat(flat, dim, responses)
    }

    /// Builds a dataset of scalar covariates.
    pub fn univariate(xs: &[f64], ys: &[f64]) -> Result<Self> {
        Self::from_flat(xs.to_vec(), 1, DVector::from_column_slice(ys))
    }

    pub fn from_rows(rows: &[Vec<f64>], responses: &[f64]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(flat, dim, DVector::from_column_slice(responses))
    }

    fn from_flat(inputs: Vec<f64>, dim: usize, responses: DVector<f64>) -> Result<Self> {
        let n = responses.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset must contain at least one sample".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidInput("covariates must have dimension >= 1".into()));
        }
        if inputs.len() != n * dim {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: inputs.len() / dim,
            });
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        if responses.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset responses"));
        }
        Ok(Self {
            inputs,
            dim,
            responses,
            noise_scale: None,
        })
    }

    pub fn with_noise_scale(mut self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("noise scale must be positive, got {sigma}")));
        }
        self.noise_scale = Some(sigma);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.chunks_exact(self.dim)
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    pub fn noise_scale(&self) -> Option<f64> {
        self.noise_scale
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("subset must be non-empty".into()));
        }
        let mut flat = Vec::with_capacity(indices.len() * self.dim);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n() {
                return Err(Error::InvalidInput(format!("index {i} out of range for n={}", self.n())));
            }
            flat.extend_from_slice(self.point(i));
            ys.push(self.responses[i]);
        }
        Ok(Self {
            inputs: flat,
            dim: self.dim,
            responses: DVector::from_vec(ys),
            noise_scale: self.noise_scale,
        })
    }

    /// Same covariates, different responses.
    pub fn with_responses(&self, responses: DVector<f64>) -> Result<Self> {
        if responses.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: responses.len(),
            });
        }
        if responses.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset responses"));
        }
        Ok(Self {
            responses,
            ..self.clone()
        })
    }

    pub(crate) fn inputs_mut(&mut self) -> (&mut [f64], usize) {
        (&mut self.inputs, self.dim)
    }
}

/// Eigenvalue decay law of an [`KernelSpec::ExplicitSpectrum`] kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decay", rename_all = "snake_case")]
pub enum SpectrumDecay {
    /// `mu_j = j^(-2 alpha)`
    Polynomial { alpha: f64 },
    /// `mu_j = exp(-rate * j^power)`
    Exponential { rate: f64, power: f64 },
}

impl SpectrumDecay {
    pub fn eigenvalue(&self, j: usize) -> f64 {
        let j = j as f64;
        match *self {
            SpectrumDecay::Polynomial { alpha } => j.powf(-2.0 * alpha),
            SpectrumDecay::Exponential { rate, power } => (-rate * j.powf(power)).exp(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(-|u - v|^2 / (2 h^2))`
    Gaussian { bandwidth: f64 },
    /// `1 + min(u, v)` on `[0, 1]`; eigenvalues decay like `k^-2`.
    SobolevFirstOrder,
    /// Cubic-spline kernel `1 + uv + min(u,v)^2 (3 max(u,v) - min(u,v)) / 6` on `[0, 1]`;
    /// eigenvalues decay like `k^-4`.
    SobolevCubic,
    /// Mercer kernel `sum_j mu_j phi_{j-1}(u) phi_{j-1}(v)` over the cosine basis
    /// `phi_0 = 1`, `phi_k = sqrt(2) cos(k pi x)`, truncated at `terms`.
    ///
    /// On the midpoint grid `x_i = (i - 1/2)/n` with `n >= terms` the scaled kernel
    /// matrix has eigenvalues exactly `mu_1, ..., mu_terms` followed by zeros.
    ExplicitSpectrum { decay: SpectrumDecay, terms: usize },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => Err(
                Error::InvalidInput(format!("gaussian bandwidth must be positive, got {bandwidth}")),
            ),
            KernelSpec::ExplicitSpectrum { terms: 0, .. } => {
                Err(Error::InvalidInput("explicit spectrum needs at least one term".into()))
            }
            KernelSpec::ExplicitSpectrum { decay, .. } => {
                let ok = match decay {
                    SpectrumDecay::Polynomial { alpha } => alpha > 0.0,
                    SpectrumDecay::Exponential { rate, power } => rate > 0.0 && power > 0.0,
                };
                if ok {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(format!("invalid spectrum parameters {decay:?}")))
                }
            }
            _ => Ok(()),
        }
    }

    /// Short identifier used in reports.
    pub fn tag(&self) -> String {
        match *self {
            KernelSpec::Gaussian { bandwidth } => format!("gaussian(h={bandwidth})"),
            KernelSpec::SobolevFirstOrder => "sobolev1".to_string(),
            KernelSpec::SobolevCubic => "sobolev_cubic".to_string(),
            KernelSpec::ExplicitSpectrum {
                decay: SpectrumDecay::Polynomial { alpha },
                terms,
            } => format!("spectrum_poly(alpha={alpha},J={terms})"),
            KernelSpec::ExplicitSpectrum {
                decay: SpectrumDecay::Exponential { rate, power },
                terms,
            } => format!("spectrum_exp(a={rate},p={power},J={terms})"),
        }
    }

    fn domain_name(&self) -> Option<&'static str> {
        match self {
            KernelSpec::Gaussian { .. } => None,
            KernelSpec::SobolevFirstOrder => Some("sobolev_first_order"),
            KernelSpec::SobolevCubic => Some("sobolev_cubic"),
            KernelSpec::ExplicitSpectrum { .. } => Some("explicit_spectrum"),
        }
    }

    /// Checks that a point lies in the kernel's domain.
    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel argument"));
        }
        if let Some(kernel) = self.domain_name() {
            if x.len() != 1 {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    found: x.len(),
                });
            }
            if !(0.0..=1.0).contains(&x[0]) {
                return Err(Error::OutOfDomain { kernel, value: x[0] });
            }
        }
        Ok(())
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        data.points().try_for_each(|x| self.check_point(x))
    }

    /// Kernel value without argument validation.
    #[inline]
    pub fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { bandwidth } => {
                let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::SobolevFirstOrder => 1.0 + u[0].min(v[0]),
            KernelSpec::SobolevCubic => {
                let (s, t) = (u[0], v[0]);
                let lo = s.min(t);
                let hi = s.max(t);
                1.0 + s * t + lo * lo * (3.0 * hi - lo) / 6.0
            }
            KernelSpec::ExplicitSpectrum { decay, terms } => spectral_sum(decay, terms, u[0], v[0]),
        }
    }
}

// phi_k(u) phi_k(v) = cos(k pi (u - v)) + cos(k pi (u + v)) for k >= 1; both cosines
// are advanced with the Chebyshev recurrence.
fn spectral_sum(decay: SpectrumDecay, terms: usize, u: f64, v: f64) -> f64 {
    let theta_d = std::f64::consts::PI * (u - v);
    let theta_s = std::f64::consts::PI * (u + v);
    let (cd, cs) = (theta_d.cos(), theta_s.cos());
    let mut sum = decay.eigenvalue(1);
    let (mut d_prev, mut d_cur) = (1.0, cd);
    let (mut s_prev, mut s_cur) = (1.0, cs);
    for k in 1..terms {
        sum += decay.eigenvalue(k + 1) * (d_cur + s_cur);
        let d_next = 2.0 * cd * d_cur - d_prev;
        let s_next = 2.0 * cs * s_cur - s_prev;
        d_prev = d_cur;
        d_cur = d_next;
        s_prev = s_cur;
        s_cur = s_next;
    }
    sum
}

/// Evaluates `K(u, v)` with full argument validation.
pub fn evaluate_kernel(spec: &KernelSpec, u: &[f64], v: &[f64]) -> Result<f64> {
    spec.validate()?;
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    spec.check_point(u)?;
    spec.check_point(v)?;
    Ok(spec.eval(u, v))
}

/// Symmetric `1/n`-scaled kernel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
}

impl KernelMatrix {
    /// Wraps an explicit matrix. It must be square and symmetric to within
    /// `1e-12` of its largest entry; the result is exactly symmetrized.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() || entries.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                what: "kernel matrix",
                expected: (entries.nrows(), entries.nrows()),
                found: entries.shape(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel matrix"));
        }
        let scale = entries.amax().max(f64::MIN_POSITIVE);
        let asym = (&entries - entries.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidInput(format!("kernel matrix is not symmetric (max |K - K^T| = {asym:e})")));
        }
        let entries = (&entries + entries.transpose()) * 0.5;
        Ok(Self { entries })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }
}

/// Builds `K_ij = K(X_i, X_j) / n`. Each unordered pair is evaluated once, so the
/// result is exactly symmetric and independent of the number of threads.
pub fn build_kernel_matrix(spec: &KernelSpec, data: &Dataset) -> Result<KernelMatrix> {
    spec.check_dataset(data)?;
    let n = data.n();
    let inv_n = 1.0 / n as f64;
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = data.point(i);
            (i..n).map(|j| spec.eval(xi, data.point(j)) * inv_n).collect()
        })
        .collect();
    let mut entries = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (offset, &value) in row.iter().enumerate() {
            let j = i + offset;
            entries[(i, j)] = value;
            entries[(j, i)] = value;
        }
    }
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel matrix"));
    }
    Ok(KernelMatrix { entries })
}

/// Unscaled Gram block `G_ij = K(A_i, B_j)` between two index lists of `data`.
pub fn gram_block(spec: &KernelSpec, data: &Dataset, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    let columns: Vec<Vec<f64>> = cols
        .par_iter()
        .map(|&j| {
            let xj = data.point(j);
            rows.iter().map(|&i| spec.eval(data.point(i), xj)).collect()
        })
        .collect();
    let mut out = DMatrix::zeros(rows.len(), cols.len());
    for (c, col) in columns.iter().enumerate() {
        out.column_mut(c).copy_from_slice(col);
    }
    out
}

/// Kernel section `k(x)_i = K(x, X_i)`; carries no `1/n` factor.
pub fn kernel_vector(spec: &KernelSpec, data: &Dataset, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: x.len(),
        });
    }
    spec.check_point(x)?;
    Ok(DVector::from_iterator(data.n(), data.points().map(|xi| spec.eval(x, xi))))
}

/// Matrix whose column `j` is `k(queries[j])`, shape `n x q`.
pub fn cross_kernel(spec: &KernelSpec, data: &Dataset, queries: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    for q in queries {
        if q.len() != data.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                found: q.len(),
            });
        }
        spec.check_point(q)?;
    }
    let columns: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|q| data.points().map(|xi| spec.eval(q, xi)).collect())
        .collect();
    let mut out = DMatrix::zeros(data.n(), queries.len());
    for (c, col) in columns.iter().enumerate() {
        out.column_mut(c).copy_from_slice(col);
    }
    Ok(out)
}

/// Eigensystem `K = U D U^T` with eigenvalues sorted in non-increasing order.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    eigenvectors: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    split: usize,
}

impl SpectralDecomposition {
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Number of leading columns in `U_1`.
    pub fn split(&self) -> usize {
        self.split
    }

    /// Sets the split to the effective dimension at `lambda`.
    pub fn split_at(mut self, lambda: f64) -> Result<Self> {
        self.split = effective_dimension(self.eigenvalues.as_slice(), lambda)?;
        Ok(self)
    }

    pub fn leading_vectors(&self) -> DMatrix<f64> {
        self.eigenvectors.columns(0, self.split).into_owned()
    }

    pub fn tail_vectors(&self) -> DMatrix<f64> {
        let n = self.eigenvectors.ncols();
        self.eigenvectors.columns(self.split, n - self.split).into_owned()
    }

    pub fn tail_eigenvalues(&self) -> DVector<f64> {
        let n = self.eigenvalues.len();
        self.eigenvalues.rows(self.split, n - self.split).into_owned()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.eigenvectors.nrows(), self.eigenvectors.ncols(), |i, j| {
            self.eigenvectors[(i, j)] * self.eigenvalues[j]
        });
        scaled * self.eigenvectors.transpose()
    }
}

/// Symmetric eigendecomposition of a kernel matrix.
///
/// Rejects matrices whose smallest eigenvalue is below `-1e-10 * mu_1`; remaining
/// negative eigenvalues (rounding noise) are clamped to zero. The initial split is 0.
pub fn decompose(k: &KernelMatrix) -> Result<SpectralDecomposition> {
    let n = k.n();
    let eig = SymmetricEigen::try_new(k.matrix().clone(), f64::EPSILON, 200 * n.max(10))
        .ok_or(Error::EigenSolverFailed)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let bottom = eig.eigenvalues[order[n - 1]];
    if bottom < -1e-10 * top.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotPositiveSemidefinite { min: bottom, max: top });
    }
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SpectralDecomposition {
        eigenvectors,
        eigenvalues,
        split: 0,
    })
}

/// Effective dimension `s_lambda`: the number of eigenvalues strictly greater than
/// `lambda`. Ties count as "at or below lambda"; when every eigenvalue exceeds
/// `lambda` the result is `n`.
pub fn effective_dimension(eigenvalues: &[f64], lambda: f64) -> Result<usize> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    if eigenvalues.iter().any(|&v| !(v >= 0.0)) || eigenvalues.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::UnsortedEigenvalues);
    }
    Ok(eigenvalues.partition_point(|&mu| mu > lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect()
    }

    #[test]
    fn gaussian_values() {
        let k = KernelSpec::Gaussian { bandwidth: 0.25 };
        assert_eq!(evaluate_kernel(&k, &[0.0], &[0.0]).unwrap(), 1.0);
        let v = evaluate_kernel(&k, &[0.0], &[1.0]).unwrap();
        assert_relative_eq!(v, (-8.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(v, 3.3546e-4, max_relative = 1e-4);
    }

    #[test]
    fn sobolev_values() {
        let k = KernelSpec::SobolevFirstOrder;
        assert_relative_eq!(evaluate_kernel(&k, &[0.3], &[0.7]).unwrap(), 1.3, epsilon = 1e-15);
        // cubic: 1 + 0.21 + 0.09 * (2.1 - 0.3) / 6 = 1.237
        let c = KernelSpec::SobolevCubic;
        assert_relative_eq!(evaluate_kernel(&c, &[0.3], &[0.7]).unwrap(), 1.237, epsilon = 1e-14);
    }

    #[test]
    fn kernel_argument_errors() {
        let k = KernelSpec::SobolevFirstOrder;
        assert!(matches!(
            evaluate_kernel(&k, &[1.5], &[0.2]),
            Err(Error::OutOfDomain { .. })
        ));
        let g = KernelSpec::Gaussian { bandwidth: 1.0 };
        assert!(matches!(
            evaluate_kernel(&g, &[0.0, 1.0], &[0.2]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(evaluate_kernel(&KernelSpec::Gaussian { bandwidth: 0.0 }, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn kernel_matrix_small_cases() {
        let g = KernelSpec::Gaussian { bandwidth: 0.7 };
        let data = Dataset::univariate(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let k = build_kernel_matrix(&g, &data).unwrap();
        assert_eq!(k.matrix(), &DMatrix::from_element(2, 2, 0.5));

        let g = KernelSpec::Gaussian { bandwidth: 0.25 };
        let data = Dataset::univariate(&[0.4], &[1.0]).unwrap();
        assert_eq!(build_kernel_matrix(&g, &data).unwrap().matrix()[(0, 0)], 1.0);

        let data = Dataset::univariate(&[0.0, 0.5, 1.0], &[0.0; 3]).unwrap();
        let k = build_kernel_matrix(&g, &data).unwrap();
        let m = k.matrix();
        assert_relative_eq!(m[(0, 1)], (-2.0f64).exp() / 3.0, max_relative = 1e-14);
        assert_relative_eq!(m[(1, 2)], (-2.0f64).exp() / 3.0, max_relative = 1e-14);
        assert_relative_eq!(m[(0, 2)], (-8.0f64).exp() / 3.0, max_relative = 1e-14);
        for i in 0..3 {
            assert_eq!(m[(i, i)], 1.0 / 3.0);
        }
    }

    #[test]
    fn trace_matches_diagonal_sum() {
        let spec = KernelSpec::SobolevCubic;
        let xs = grid(17);
        let data = Dataset::univariate(&xs, &xs).unwrap();
        let k = build_kernel_matrix(&spec, &data).unwrap();
        let diag: f64 = xs.iter().map(|&x| spec.eval(&[x], &[x])).sum::<f64>() / 17.0;
        assert_relative_eq!(k.trace(), diag, max_relative = 1e-14);
    }

    #[test]
    fn decompose_trivial_matrices() {
        let k = KernelMatrix::from_matrix(DMatrix::identity(2, 2) * 0.5).unwrap();
        let d = decompose(&k).unwrap();
        assert_relative_eq!(d.eigenvalues()[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(d.eigenvalues()[1], 0.5, epsilon = 1e-15);

        let k = KernelMatrix::from_matrix(DMatrix::from_element(2, 2, 0.5)).unwrap();
        let d = decompose(&k).unwrap();
        assert_relative_eq!(d.eigenvalues()[0], 1.0, epsilon = 1e-15);
        assert_eq!(d.eigenvalues()[1], 0.0);
        let u1 = d.eigenvectors().column(0);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(u1[0].abs(), r, epsilon = 1e-12);
        assert_relative_eq!(u1[1].abs(), r, epsilon = 1e-12);
        assert!(u1[0] * u1[1] > 0.0);
    }

    #[test]
    fn decompose_reconstructs_random_psd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let b = DMatrix::from_fn(20, 20, |_, _| rng.random::<f64>() - 0.5);
        let k = KernelMatrix::from_matrix(&b * b.transpose() / 20.0).unwrap();
        let d = decompose(&k).unwrap();
        let mu1 = d.eigenvalues()[0];
        assert!((d.reconstruct() - k.matrix()).amax() <= 1e-8 * mu1);
        let u = d.eigenvectors();
        assert!((u.transpose() * u - DMatrix::identity(20, 20)).amax() <= 1e-8);
        assert!(d.eigenvalues().as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn decompose_rejects_indefinite() {
        let k = KernelMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert!(matches!(decompose(&k), Err(Error::NotPositiveSemidefinite { .. })));
    }

    #[test]
    fn effective_dimension_cases() {
        let d = [1.0, 0.5, 0.01];
        assert_eq!(effective_dimension(&d, 0.1).unwrap(), 2);
        assert_eq!(effective_dimension(&d, 2.0).unwrap(), 0);
        assert_eq!(effective_dimension(&d, 0.001).unwrap(), 3);
        // ties are excluded
        assert_eq!(effective_dimension(&d, 0.5).unwrap(), 1);
        assert!(matches!(
            effective_dimension(&[0.1, 0.5], 0.2),
            Err(Error::UnsortedEigenvalues)
        ));
        assert!(effective_dimension(&d, 0.0).is_err());
    }

    #[test]
    fn gaussian_spectrum_decays_fast() {
        let n = 500;
        let xs = grid(n);
        let data = Dataset::univariate(&xs, &xs).unwrap();
        let k = build_kernel_matrix(&KernelSpec::Gaussian { bandwidth: 0.25 }, &data).unwrap();
        let d = decompose(&k).unwrap();
        let mu = d.eigenvalues();
        assert!(mu[19] < 1e-6 * mu[0], "mu_20 / mu_1 = {:e}", mu[19] / mu[0]);
    }

    #[test]
    fn explicit_spectrum_is_exact_on_midpoint_grid() {
        let n = 64;
        let terms = 40;
        let decay = SpectrumDecay::Polynomial { alpha: 1.0 };
        let spec = KernelSpec::ExplicitSpectrum { decay, terms };
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let data = Dataset::univariate(&xs, &xs).unwrap();
        let d = decompose(&build_kernel_matrix(&spec, &data).unwrap()).unwrap();
        for j in 0..terms {
            assert_relative_eq!(d.eigenvalues()[j], decay.eigenvalue(j + 1), epsilon = 1e-12);
        }
        assert!(d.eigenvalues()[terms] < 1e-12);
    }

    #[test]
    fn psd_on_random_datasets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (spec, n) in [
            (KernelSpec::Gaussian { bandwidth: 0.25 }, 100),
            (KernelSpec::SobolevFirstOrder, 80),
            (KernelSpec::SobolevCubic, 60),
        ] {
            let xs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let data = Dataset::univariate(&xs, &xs).unwrap();
            let k = build_kernel_matrix(&spec, &data).unwrap();
            let eig = k.matrix().clone().symmetric_eigenvalues();
            let max = eig.max();
            assert!(eig.min() >= -1e-10 * max, "{spec:?}: {}", eig.min());
        }
    }

    proptest! {
        #[test]
        fn kernels_are_symmetric(u in 0.0f64..1.0, v in 0.0f64..1.0, h in 0.05f64..2.0) {
            for spec in [
                KernelSpec::Gaussian { bandwidth: h },
                KernelSpec::SobolevFirstOrder,
                KernelSpec::SobolevCubic,
                KernelSpec::ExplicitSpectrum { decay: SpectrumDecay::Exponential { rate: 0.5, power: 2.0 }, terms: 16 },
            ] {
                prop_assert_eq!(spec.eval(&[u], &[v]), spec.eval(&[v], &[u]));
            }
        }

        #[test]
        fn effective_dimension_matches_brute_force(
            mut d in proptest::collection::vec(0.0f64..2.0, 1..40),
            l1 in 1e-4f64..2.0,
            l2 in 1e-4f64..2.0,
        ) {
            d.sort_by(|a, b| b.total_cmp(a));
            let (lo, hi) = if l1 < l2 { (l1, l2) } else { (l2, l1) };
            let s_lo = effective_dimension(&d, lo).unwrap();
            let s_hi = effective_dimension(&d, hi).unwrap();
            prop_assert_eq!(s_lo, d.iter().filter(|&&mu| mu > lo).count());
            prop_assert!(s_hi <= s_lo);
        }
    }
}
