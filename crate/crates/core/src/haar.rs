//! Unnormalized 2D Haar analysis and synthesis, and the multi-level pyramid.
//!
//! The forward transform correlates each channel with four 2x2 kernels at
//! stride 2 without any scaling, so the approximation band is the plain sum of
//! each 2x2 block. The inverse carries the factor 1/4.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HaarError {
    #[error("image extent {height}x{width} is not even")]
    OddExtent { height: usize, width: usize },
    #[error("{height}x{width} cannot be halved {levels} times; at most {max_levels} levels are possible")]
    TooManyLevels { height: usize, width: usize, levels: usize, max_levels: usize },
    #[error("subband shapes disagree: {0}")]
    SubbandMismatch(String),
    #[error("expected an image of shape [C,H,W], got {0:?}")]
    BadRank(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const F_LL: [[i32; 2]; 2] = [[1, 1], [1, 1]];
pub const F_LH: [[i32; 2]; 2] = [[-1, -1], [1, 1]];
pub const F_HL: [[i32; 2]; 2] = [[-1, 1], [-1, 1]];
pub const F_HH: [[i32; 2]; 2] = [[1, -1], [-1, 1]];

/// The four analysis kernels in subband order LL, LH, HL, HH.
pub const KERNELS: [[[i32; 2]; 2]; 4] = [F_LL, F_LH, F_HL, F_HH];

/// Kernels as a `[4, 1, 2, 2]` tensor, usable with `Graph::conv2d`.
pub fn kernel_tensor() -> Tensor {
    let data = KERNELS.iter().flat_map(|k| k.iter().flatten().map(|&v| f64::from(v))).collect();
    Tensor::new(vec![4, 1, 2, 2], data).expect("static shape")
}

/// One level of decomposition; each band is `[C, H/2, W/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl Subbands {
    pub fn bands(&self) -> [&Tensor; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn shape(&self) -> &[usize] {
        self.ll.shape()
    }

    /// Sum of squares across all four bands.
    pub fn energy(&self) -> f64 {
        self.bands().iter().flat_map(|b| b.data()).map(|v| v * v).sum()
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize), HaarError> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(HaarError::BadRank(s.to_vec())),
    }
}

/// Number of times `h` and `w` can both be halved exactly.
pub fn max_levels(height: usize, width: usize) -> usize {
    if height == 0 || width == 0 {
        return 0;
    }
    (height.trailing_zeros().min(width.trailing_zeros())) as usize
}

/// Single-level analysis of a `[C,H,W]` image.
pub fn haar_forward(image: &Tensor) -> Result<Subbands, HaarError> {
    let (c, h, w) = dims(image)?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(HaarError::OddExtent { height: h, width: w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = image.data();
    let mut bands: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; c * oh * ow]);
    for ch in 0..c {
        let plane = &x[ch * h * w..][..h * w];
        for i in 0..oh {
            for j in 0..ow {
                let block = [
                    [plane[2 * i * w + 2 * j], plane[2 * i * w + 2 * j + 1]],
                    [plane[(2 * i + 1) * w + 2 * j], plane[(2 * i + 1) * w + 2 * j + 1]],
                ];
                let o = (ch * oh + i) * ow + j;
                for (band, kernel) in bands.iter_mut().zip(&KERNELS) {
                    // Same accumulation order as conv2d: row-major over the kernel.
                    let mut acc = 0.0;
                    for (krow, brow) in kernel.iter().zip(&block) {
                        for (&k, &v) in krow.iter().zip(brow) {
                            acc += v * f64::from(k);
                        }
                    }
                    band[o] = acc;
                }
            }
        }
    }
    let [ll, lh, hl, hh] = bands.map(|b| Tensor::new(vec![c, oh, ow], b).expect("consistent shape"));
    Ok(Subbands { ll, lh, hl, hh })
}

/// Exact inverse of [`haar_forward`].
pub fn haar_inverse(bands: &Subbands) -> Result<Tensor, HaarError> {
    let shape = bands.ll.shape().to_vec();
    for (name, b) in ["LH", "HL", "HH"].iter().zip([&bands.lh, &bands.hl, &bands.hh]) {
        if b.shape() != shape.as_slice() {
            return Err(HaarError::SubbandMismatch(format!("LL {:?} vs {name} {:?}", shape, b.shape())));
        }
    }
    let (c, oh, ow) = match *shape.as_slice() {
        [c, oh, ow] => (c, oh, ow),
        _ => return Err(HaarError::BadRank(shape)),
    };
    let (h, w) = (2 * oh, 2 * ow);
    let src = bands.bands().map(|b| b.data());
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let o = (ch * oh + i) * ow + j;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let mut acc = 0.0;
                        for (kernel, band) in KERNELS.iter().zip(&src) {
                            acc += f64::from(kernel[dy][dx]) * band[o];
                        }
                        out[(ch * h + 2 * i + dy) * w + 2 * j + dx] = acc / 4.0;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}

/// Subbands for levels `1..=T`; level `t+1` decomposes level `t`'s LL band.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    source_shape: [usize; 3],
    levels: Vec<Subbands>,
}

impl WaveletPyramid {
    pub fn levels(&self) -> &[Subbands] {
        &self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn source_shape(&self) -> [usize; 3] {
        self.source_shape
    }

    /// Level `t` (1-based).
    pub fn level(&self, t: usize) -> Option<&Subbands> {
        t.checked_sub(1).and_then(|i| self.levels.get(i))
    }

    /// Reconstructs the source image from the coarsest level upwards.
    pub fn reconstruct(&self) -> Result<Tensor, HaarError> {
        let mut levels = self.levels.iter().rev();
        let coarsest = levels.next().ok_or_else(|| HaarError::SubbandMismatch("empty pyramid".into()))?;
        let mut image = haar_inverse(coarsest)?;
        for level in levels {
            let bands = Subbands { ll: image, lh: level.lh.clone(), hl: level.hl.clone(), hh: level.hh.clone() };
            image = haar_inverse(&bands)?;
        }
        Ok(image)
    }
}

pub fn haar_pyramid(image: &Tensor, levels: usize) -> Result<WaveletPyramid, HaarError> {
    let (c, h, w) = dims(image)?;
    let max = max_levels(h, w);
    if levels == 0 || levels > max {
        return Err(HaarError::TooManyLevels { height: h, width: w, levels, max_levels: max });
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = haar_forward(image)?;
    for _ in 1..levels {
        let next = haar_forward(&current.ll)?;
        out.push(current);
        current = next;
    }
    out.push(current);
    Ok(WaveletPyramid { source_shape: [c, h, w], levels: out })
}
