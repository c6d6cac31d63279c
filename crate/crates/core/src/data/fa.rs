//! Iterated principal-axis factor analysis with regression factor scores.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{DataError, StandardizedCube};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaOptions {
    pub max_iterations: usize,
    /// Stop once the largest communality change falls below this.
    pub tolerance: f64,
}

impl Default for FaOptions {
    fn default() -> Self {
        Self { max_iterations: 100, tolerance: 1e-4 }
    }
}

/// Factor scores for every pixel plus the fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedCube {
    pub rows: usize,
    pub cols: usize,
    pub factors: usize,
    /// `M x N x B` scores, pixel-interleaved.
    pub data: Vec<f64>,
    /// `R x B` loadings, row-major.
    pub loadings: Vec<f64>,
    pub uniquenesses: Vec<f64>,
    pub band_means: Vec<f64>,
    pub band_stds: Vec<f64>,
    pub iterations: usize,
    /// Communalities that exceeded 1 and were clamped.
    pub heywood_cases: usize,
    pub final_delta: f64,
}

impl ReducedCube {
    pub fn source_bands(&self) -> usize {
        self.uniquenesses.len()
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        &self.data[(r * self.cols + c) * self.factors..][..self.factors]
    }

    pub fn loading(&self, band: usize, factor: usize) -> f64 {
        self.loadings[band * self.factors + factor]
    }
}

/// Inverse of a symmetric positive semi-definite matrix, via Cholesky when
/// possible and an eigenvalue pseudo-inverse otherwise.
fn spd_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(ch) = m.clone().cholesky() {
        return (ch.inverse(), true);
    }
    let eig = SymmetricEigen::new(m.clone());
    let cutoff = eig.eigenvalues.amax() * 1e-12 * m.nrows() as f64;
    let inv_vals = eig.eigenvalues.map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&inv_vals) * v.transpose(), false)
}

/// Fits a `factors`-factor model to the band correlation matrix and returns
/// regression-method factor scores for every pixel.
pub fn factor_analysis(cube: &StandardizedCube, factors: usize, opts: FaOptions) -> Result<ReducedCube, DataError> {
    let src = cube.cube();
    let bands = src.bands();
    let pixels = src.rows() * src.cols();
    if factors == 0 || factors >= bands {
        return Err(DataError::InvalidArgument(format!("need 0 < factors < bands, got {factors} of {bands}")));
    }
    let z = DMatrix::from_row_slice(pixels, bands, src.data());
    let corr = (z.transpose() * &z) / pixels as f64;

    let (corr_inv, invertible) = spd_inverse(&corr);
    let mut communality: Vec<f64> = (0..bands)
        .map(|i| {
            let d = corr_inv[(i, i)];
            if invertible && d.is_finite() && d >= 1.0 {
                1.0 - 1.0 / d
            } else {
                (0..bands).filter(|&j| j != i).map(|j| corr[(i, j)].abs()).fold(0.0, f64::max)
            }
        })
        .collect();

    let mut loadings = DMatrix::<f64>::zeros(bands, factors);
    let mut delta = f64::INFINITY;
    let mut iterations = 0;
    let mut heywood = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut reduced = corr.clone();
        for (i, &h) in communality.iter().enumerate() {
            reduced[(i, i)] = h;
        }
        let eig = SymmetricEigen::new(reduced);
        let mut order: Vec<usize> = (0..bands).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (k, &idx) in order.iter().take(factors).enumerate() {
            let scale = eig.eigenvalues[idx].max(0.0).sqrt();
            for i in 0..bands {
                loadings[(i, k)] = eig.eigenvectors[(i, idx)] * scale;
            }
        }
        heywood = 0;
        delta = 0.0;
        for (i, h) in communality.iter_mut().enumerate() {
            let mut next: f64 = (0..factors).map(|k| loadings[(i, k)].powi(2)).sum();
            if next > 1.0 {
                next = 1.0;
                heywood += 1;
            }
            delta = delta.max((next - *h).abs());
            *h = next;
        }
        if !delta.is_finite() {
            return Err(DataError::Numeric("communalities became non-finite".into()));
        }
        if delta < opts.tolerance {
            break;
        }
    }
    if delta >= opts.tolerance {
        return Err(DataError::NonConvergence { iterations, delta });
    }

    // Orient each factor so its loadings sum to a non-negative value.
    for k in 0..factors {
        if loadings.column(k).sum() < 0.0 {
            loadings.column_mut(k).neg_mut();
        }
    }

    let weights = &corr_inv * &loadings;
    let scores = &z * &weights;
    let mut data = Vec::with_capacity(pixels * factors);
    for p in 0..pixels {
        for k in 0..factors {
            data.push(scores[(p, k)]);
        }
    }
    let mut flat_loadings = Vec::with_capacity(bands * factors);
    for i in 0..bands {
        for k in 0..factors {
            flat_loadings.push(loadings[(i, k)]);
        }
    }
    Ok(ReducedCube {
        rows: src.rows(),
        cols: src.cols(),
        factors,
        data,
        loadings: flat_loadings,
        uniquenesses: communality.iter().map(|h| 1.0 - h).collect(),
        band_means: cube.band_means.clone(),
        band_stds: cube.band_stds.clone(),
        iterations,
        heywood_cases: heywood,
        final_delta: delta,
    })
}
