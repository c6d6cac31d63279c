//! Hyperspectral cubes: loading, per-band standardization, factor-analysis
//! band reduction, patch extraction and stratified splitting.

mod fa;
mod patches;

pub use fa::{factor_analysis, FaOptions, ReducedCube};
pub use patches::{extract_patches, stratified_split, PatchSet, Split};

use std::path::Path;

use thiserror::Error;

use crate::npy::{self, NpyError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Npy { path: String, source: NpyError },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("labels must be non-negative integers, found {0}")]
    NonIntegerLabel(f64),
    #[error("class {0} has no labeled pixels")]
    EmptyClass(usize),
    #[error("band {0} is constant and cannot be standardized")]
    ConstantBand(usize),
    #[error("factor analysis did not converge after {iterations} iterations (max communality change {delta:.3e})")]
    NonConvergence { iterations: usize, delta: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no labeled pixels")]
    NoLabeledPixels,
    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// `M x N` pixels with `R` bands (band-interleaved-by-pixel) and an `M x N`
/// label map where 0 marks unlabeled background.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    rows: usize,
    cols: usize,
    bands: usize,
    data: Vec<f64>,
    labels: Vec<u32>,
    class_count: usize,
    pub wavelength_range: Option<(f64, f64)>,
}

impl HsiCube {
    pub fn new(rows: usize, cols: usize, bands: usize, data: Vec<f64>, labels: Vec<u32>) -> Result<Self, DataError> {
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(DataError::Shape(format!("empty cube {rows}x{cols}x{bands}")));
        }
        if data.len() != rows * cols * bands {
            return Err(DataError::Shape(format!("{} values for a {rows}x{cols}x{bands} cube", data.len())));
        }
        if labels.len() != rows * cols {
            return Err(DataError::Shape(format!("{} labels for {rows}x{cols} pixels", labels.len())));
        }
        let class_count = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; class_count + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=class_count).find(|&c| !seen[c]) {
            return Err(DataError::EmptyClass(missing));
        }
        Ok(Self { rows, cols, bands, data, labels, class_count, wavelength_range: None })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        &self.data[(r * self.cols + c) * self.bands..][..self.bands]
    }

    pub fn label(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.cols + c]
    }
}

fn read_npy(path: &Path) -> Result<npy::NpyArray, DataError> {
    npy::read_file(path).map_err(|source| DataError::Npy { path: path.display().to_string(), source })
}

/// Loads an `(M, N, R)` data array and an `(M, N)` integer label array.
pub fn load_cube(data_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<HsiCube, DataError> {
    let data = read_npy(data_path.as_ref())?;
    let labels = read_npy(labels_path.as_ref())?;
    let (m, n, r) = match *data.shape.as_slice() {
        [m, n, r] => (m, n, r),
        ref s => return Err(DataError::Shape(format!("data must be (M, N, R), got {s:?}"))),
    };
    if labels.shape != [m, n] {
        return Err(DataError::Shape(format!("labels {:?} do not match data ({m}, {n}, {r})", labels.shape)));
    }
    let labels = labels
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
                Ok(v as u32)
            } else {
                Err(DataError::NonIntegerLabel(v))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    HsiCube::new(m, n, r, data.data, labels)
}

/// A cube whose bands each have zero mean and unit population variance.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedCube {
    cube: HsiCube,
    pub band_means: Vec<f64>,
    pub band_stds: Vec<f64>,
}

impl StandardizedCube {
    pub fn cube(&self) -> &HsiCube {
        &self.cube
    }
}

pub fn standardize_bands(cube: &HsiCube) -> Result<StandardizedCube, DataError> {
    let pixels = cube.rows * cube.cols;
    let b = cube.bands;
    let mut means = vec![0.0; b];
    for px in cube.data.chunks_exact(b) {
        for (m, v) in means.iter_mut().zip(px) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= pixels as f64);
    let mut vars = vec![0.0; b];
    for px in cube.data.chunks_exact(b) {
        for ((s, v), m) in vars.iter_mut().zip(px).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    let stds: Vec<f64> = vars.iter().map(|s| (s / pixels as f64).sqrt()).collect();
    for (i, (&s, &m)) in stds.iter().zip(&means).enumerate() {
        // Relative threshold: a constant band still picks up rounding noise in its variance.
        if s.is_nan() || s <= 1e-12 * m.abs().max(1.0) {
            return Err(DataError::ConstantBand(i));
        }
    }
    let mut data = cube.data.clone();
    for px in data.chunks_exact_mut(b) {
        for ((v, m), s) in px.iter_mut().zip(&means).zip(&stds) {
            *v = (*v - m) / s;
        }
    }
    let mut out = cube.clone();
    out.data = data;
    Ok(StandardizedCube { cube: out, band_means: means, band_stds: stds })
}
