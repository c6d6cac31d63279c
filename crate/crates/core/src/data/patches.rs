use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, ReducedCube};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One `S x S x B` window per labeled pixel.
///
/// Windows are cut from the reduced cube on demand, so the set stays small
/// even when thousands of 64x64 patches overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    size: usize,
    bands: usize,
    rows: usize,
    cols: usize,
    source: Vec<f64>,
    coords: Vec<(usize, usize)>,
    labels: Vec<usize>,
    class_count: usize,
    split: Option<Vec<Split>>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.size
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Zero-based class of each patch.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn split(&self) -> Option<&[Split]> {
        self.split.as_deref()
    }

    pub fn set_split(&mut self, split: Vec<Split>) -> Result<(), DataError> {
        if split.len() != self.len() {
            return Err(DataError::Shape(format!("{} split tags for {} patches", split.len(), self.len())));
        }
        self.split = Some(split);
        Ok(())
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        match &self.split {
            Some(tags) => tags.iter().enumerate().filter(|(_, &t)| t == which).map(|(i, _)| i).collect(),
            None => Vec::new(),
        }
    }

    /// Value of the zero-padded source at a signed pixel position.
    fn padded(&self, r: isize, c: isize, b: usize) -> f64 {
        if r < 0 || c < 0 || r as usize >= self.rows || c as usize >= self.cols {
            0.0
        } else {
            self.source[(r as usize * self.cols + c as usize) * self.bands + b]
        }
    }

    fn origin(&self, i: usize) -> (isize, isize) {
        let (r, c) = self.coords[i];
        let half = (self.size / 2) as isize;
        (r as isize - half, c as isize - half)
    }

    /// Patch `i` in `S x S x B` order.
    pub fn patch(&self, i: usize) -> Vec<f64> {
        let (r0, c0) = self.origin(i);
        let mut out = Vec::with_capacity(self.size * self.size * self.bands);
        for dy in 0..self.size as isize {
            for dx in 0..self.size as isize {
                for b in 0..self.bands {
                    out.push(self.padded(r0 + dy, c0 + dx, b));
                }
            }
        }
        out
    }

    /// Patch `i` as a channel-first `[B, S, S]` tensor.
    pub fn patch_chw(&self, i: usize) -> Tensor {
        let (r0, c0) = self.origin(i);
        let s = self.size;
        let mut out = Vec::with_capacity(s * s * self.bands);
        for b in 0..self.bands {
            for dy in 0..s as isize {
                for dx in 0..s as isize {
                    out.push(self.padded(r0 + dy, c0 + dx, b));
                }
            }
        }
        Tensor::new(vec![self.bands, s, s], out).expect("consistent shape")
    }

    /// Stacks the selected patches into `[N, B, S, S]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * self.bands * s * s);
        for &i in indices {
            data.extend(self.patch_chw(i).into_data());
        }
        let t = Tensor::new(vec![indices.len(), self.bands, s, s], data).expect("consistent shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Emits a window for every pixel with a non-zero label, in row-major pixel order.
///
/// The window for pixel `(r, c)` spans rows `r - S/2 ..= r + S/2 - 1` (and the
/// same for columns); positions outside the cube read as zero. Labels `1..=C`
/// become classes `0..C`.
pub fn extract_patches(reduced: &ReducedCube, labels: &[u32], size: usize) -> Result<PatchSet, DataError> {
    let (rows, cols) = (reduced.rows, reduced.cols);
    if size == 0 || !size.is_multiple_of(2) {
        return Err(DataError::InvalidArgument(format!("patch size {size} must be even and positive")));
    }
    if size > 2 * rows.min(cols) {
        return Err(DataError::InvalidArgument(format!("patch size {size} too large for a {rows}x{cols} cube")));
    }
    if labels.len() != rows * cols {
        return Err(DataError::Shape(format!("{} labels for {rows}x{cols} pixels", labels.len())));
    }
    let mut coords = Vec::new();
    let mut classes = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let l = labels[r * cols + c];
            if l > 0 {
                coords.push((r, c));
                classes.push(l as usize - 1);
            }
        }
    }
    if coords.is_empty() {
        return Err(DataError::NoLabeledPixels);
    }
    let class_count = labels.iter().copied().max().unwrap_or(0) as usize;
    Ok(PatchSet {
        size,
        bands: reduced.factors,
        rows,
        cols,
        source: reduced.data.clone(),
        coords,
        labels: classes,
        class_count,
        split: None,
    })
}

/// Per class, `max(1, round_half_up(fraction * count))` patches go to training,
/// chosen by a seeded shuffle; the rest are test.
pub fn stratified_split(patches: &PatchSet, train_fraction: f64, seed: u64) -> Result<Vec<Split>, DataError> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(DataError::InvalidArgument(format!("train fraction {train_fraction} outside (0, 1]")));
    }
    let mut by_class = vec![Vec::new(); patches.class_count];
    for (i, &l) in patches.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(DataError::EmptyClass(empty + 1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Test; patches.len()];
    for members in &mut by_class {
        let n = members.len();
        let take = ((train_fraction * n as f64 + 0.5).floor() as usize).clamp(1, n);
        members.shuffle(&mut rng);
        for &i in &members[..take] {
            tags[i] = Split::Train;
        }
    }
    Ok(tags)
}

impl PatchSet {
    /// Rebuilds a patch set from a cached coordinate index.
    pub fn from_parts(
        reduced: &ReducedCube,
        size: usize,
        coords: Vec<(usize, usize)>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self, DataError> {
        if coords.len() != labels.len() {
            return Err(DataError::Shape(format!("{} coordinates for {} labels", coords.len(), labels.len())));
        }
        if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= reduced.rows || c >= reduced.cols) {
            return Err(DataError::Shape(format!("coordinate ({r}, {c}) outside the cube")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::Shape(format!("class {l} outside 0..{class_count}")));
        }
        Ok(Self {
            size,
            bands: reduced.factors,
            rows: reduced.rows,
            cols: reduced.cols,
            source: reduced.data.clone(),
            coords,
            labels,
            class_count,
            split: None,
        })
    }
}
