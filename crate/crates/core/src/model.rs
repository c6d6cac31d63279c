//! The staged wavelet-fused CNN.
//!
//! ```text
//! input [N,B,S,S] -> stem conv3x3 -> BN -> ReLU
//!   stage t: conv3x3/2 -> BN -> ReLU ---------+
//!            level-t subbands [N,4B,S/2^t,..] |-> fuse (concat | add) -> + 1x1/2 projection of stage input
//!              -> conv3x3 -> BN -> ReLU ------+
//! -> global mean pool -> dropout -> dense -> ReLU -> dropout -> dense(C)
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::haar::{self, HaarError, WaveletPyramid};
use crate::tensor::{BatchNormStats, Graph, Mode, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Haar(#[from] HaarError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Stack wavelet-branch channels after the stage features.
    Concat,
    /// Add wavelet-branch features to the stage features.
    Add,
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "add" => Ok(FusionMode::Add),
            other => Err(format!("unknown fusion mode {other:?} (expected concat or add)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub input_bands: usize,
    pub class_count: usize,
    pub stage_channels: Vec<usize>,
    /// Stages `1..=wavelet_levels` fuse the matching pyramid level; 0 disables fusion.
    pub wavelet_levels: usize,
    pub dense_width: usize,
    /// After global pooling, and after the dense ReLU.
    pub dropout_rates: [f64; 2],
    pub fusion_mode: FusionMode,
}

impl ModelConfig {
    pub const DEFAULT_STAGES: [usize; 4] = [64, 128, 256, 256];

    pub fn new(patch_size: usize, input_bands: usize, class_count: usize) -> Self {
        let stages = Self::DEFAULT_STAGES.to_vec();
        let levels = Self::default_levels(patch_size, stages.len());
        Self {
            patch_size,
            input_bands,
            class_count,
            stage_channels: stages,
            wavelet_levels: levels,
            dense_width: 128,
            dropout_rates: [0.4, 0.4],
            fusion_mode: FusionMode::Concat,
        }
    }

    /// Deepest pyramid the patch size allows, capped at 4 and at the stage count.
    pub fn default_levels(patch_size: usize, stages: usize) -> usize {
        haar::max_levels(patch_size, patch_size).min(4).min(stages)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.patch_size == 0 || self.input_bands == 0 || self.class_count == 0 || self.dense_width == 0 {
            return fail("patch size, bands, classes and dense width must be positive".into());
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return fail(format!("stage channels {:?} must be non-empty and positive", self.stage_channels));
        }
        if self.wavelet_levels > self.stage_channels.len() {
            return fail(format!(
                "{} wavelet levels but only {} stride-2 stages",
                self.wavelet_levels,
                self.stage_channels.len()
            ));
        }
        if !self.patch_size.is_multiple_of(1 << self.wavelet_levels) {
            return fail(format!("patch size {} is not divisible by 2^{}", self.patch_size, self.wavelet_levels));
        }
        if let Some(r) = self.dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return fail(format!("dropout rate {r} outside [0, 1)"));
        }
        Ok(())
    }

    /// Spatial extent of each stage's output.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut s = self.patch_size;
        self.stage_channels
            .iter()
            .map(|_| {
                s = s.div_ceil(2);
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Fusion,
    Projection,
    GlobalPool,
    Dense,
}

/// Structural description of one layer, for audits and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output spatial extent (1 for dense layers).
    pub spatial: usize,
}

#[derive(Debug, Clone)]
struct ConvBn {
    kernel: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Stage {
    main: ConvBn,
    branch: Option<ConvBn>,
    projection: usize,
    size: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvBn,
    stages: Vec<Stage>,
    dense: (usize, usize),
    head: (usize, usize),
}

/// Parameter variables recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor>,
    names: Vec<String>,
    bn: Vec<BatchNormStats>,
    bn_names: Vec<String>,
    descriptors: Vec<LayerDescriptor>,
    mode: Mode,
}

struct Builder<'a, R: Rng + ?Sized> {
    rng: &'a mut R,
    params: Vec<Tensor>,
    names: Vec<String>,
    bn: Vec<BatchNormStats>,
    bn_names: Vec<String>,
    descriptors: Vec<LayerDescriptor>,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut *self.rng)).collect();
        self.push(name, Tensor::parameter(shape, data).expect("consistent shape"))
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> usize {
        let n = shape.iter().product();
        self.push(name, Tensor::parameter(shape, vec![value; n]).expect("consistent shape"))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn describe(&mut self, name: &str, kind: LayerKind, in_channels: usize, out_channels: usize, spatial: usize) {
        self.descriptors.push(LayerDescriptor { name: name.to_string(), kind, in_channels, out_channels, spatial });
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, stride: usize, spatial: usize) -> ConvBn {
        let kernel = self.he(format!("{name}.conv.weight"), vec![cout, cin, 3, 3], cin * 9);
        self.describe(&format!("{name}.conv"), LayerKind::Conv, cin, cout, spatial);
        let gamma = self.constant(format!("{name}.bn.gamma"), vec![cout], 1.0);
        let beta = self.constant(format!("{name}.bn.beta"), vec![cout], 0.0);
        self.bn.push(BatchNormStats::new(cout));
        self.bn_names.push(format!("{name}.bn"));
        self.describe(&format!("{name}.bn"), LayerKind::BatchNorm, cout, cout, spatial);
        ConvBn { kernel, gamma, beta, stats: self.bn.len() - 1, stride }
    }
}

/// Builds the network with He-scaled normal weights, unit BN scales and zero biases.
pub fn build_model<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Network, ModelError> {
    config.validate()?;
    let mut b = Builder {
        rng,
        params: Vec::new(),
        names: Vec::new(),
        bn: Vec::new(),
        bn_names: Vec::new(),
        descriptors: Vec::new(),
    };
    let bands = config.input_bands;
    let stem_width = config.stage_channels[0];
    let stem = b.conv_bn("stem", bands, stem_width, 1, config.patch_size);

    let mut channels = stem_width;
    let mut stages = Vec::new();
    for (t, (&width, size)) in config.stage_channels.iter().zip(config.stage_sizes()).enumerate() {
        let name = format!("stage{}", t + 1);
        let main = b.conv_bn(&format!("{name}.main"), channels, width, 2, size);
        let branch =
            (t < config.wavelet_levels).then(|| b.conv_bn(&format!("{name}.wavelet"), 4 * bands, width, 1, size));
        let fused = match (&branch, config.fusion_mode) {
            (Some(_), FusionMode::Concat) => 2 * width,
            _ => width,
        };
        if branch.is_some() {
            b.describe(&format!("{name}.fusion"), LayerKind::Fusion, width, fused, size);
        }
        let projection = b.he(format!("{name}.projection.weight"), vec![fused, channels, 1, 1], channels);
        b.describe(&format!("{name}.projection"), LayerKind::Projection, channels, fused, size);
        stages.push(Stage { main, branch, projection, size });
        channels = fused;
    }
    b.describe("pool", LayerKind::GlobalPool, channels, channels, 1);
    let dw = b.he("dense.weight".into(), vec![channels, config.dense_width], channels);
    let db = b.constant("dense.bias".into(), vec![config.dense_width], 0.0);
    b.describe("dense", LayerKind::Dense, channels, config.dense_width, 1);
    let hw = b.he("head.weight".into(), vec![config.dense_width, config.class_count], config.dense_width);
    let hb = b.constant("head.bias".into(), vec![config.class_count], 0.0);
    b.describe("head", LayerKind::Dense, config.dense_width, config.class_count, 1);

    Ok(Network {
        config: config.clone(),
        layout: Layout { stem, stages, dense: (dw, db), head: (hw, hb) },
        params: b.params,
        names: b.names,
        bn: b.bn,
        bn_names: b.bn_names,
        descriptors: b.descriptors,
        mode: Mode::Train,
    })
}

/// Batch-norm statistics, writable in train mode.
enum Stats<'a> {
    Train(&'a mut [BatchNormStats]),
    Eval(&'a [BatchNormStats]),
}

/// Stacks level-`t` subbands of every sample into `[N, 4B, s, s]`
/// (all LL bands, then LH, HL, HH).
fn subband_batch(pyramids: &[WaveletPyramid], level: usize) -> Result<(Vec<usize>, Vec<f64>), ModelError> {
    let mut shape = None;
    let mut data = Vec::new();
    for p in pyramids {
        let sub = p
            .level(level)
            .ok_or_else(|| ModelError::Shape(format!("pyramid has {} levels, level {level} needed", p.depth())))?;
        let s = sub.shape().to_vec();
        match &shape {
            None => shape = Some(s),
            Some(prev) if *prev != s => {
                return Err(ModelError::Shape(format!("level {level} subbands {s:?} vs {prev:?}")));
            }
            _ => {}
        }
        for band in sub.bands() {
            data.extend_from_slice(band.data());
        }
    }
    let s = shape.ok_or_else(|| ModelError::Shape("empty batch".into()))?;
    Ok((vec![pyramids.len(), 4 * s[0], s[1], s[2]], data))
}

impl Layout {
    fn conv_bn<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        layer: &ConvBn,
        vars: &[Var],
        stats: &mut Stats<'_>,
        _rng: &mut R,
    ) -> Result<Var, ModelError> {
        let y = g.conv2d(x, vars[layer.kernel], None, layer.stride, 1)?;
        let y = match stats {
            Stats::Train(s) => {
                g.batch_norm(y, vars[layer.gamma], vars[layer.beta], &mut s[layer.stats], Mode::Train)?
            }
            Stats::Eval(s) => g.batch_norm_eval(y, vars[layer.gamma], vars[layer.beta], &s[layer.stats])?,
        };
        Ok(g.relu(y)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn record<R: Rng + ?Sized>(
        &self,
        config: &ModelConfig,
        g: &mut Graph,
        params: &[Tensor],
        batch: &Tensor,
        pyramids: &[WaveletPyramid],
        mut stats: Stats<'_>,
        rng: &mut R,
    ) -> Result<Forward, ModelError> {
        let expected = [config.input_bands, config.patch_size, config.patch_size];
        let n = match batch.shape() {
            [n, rest @ ..] if rest == expected && *n > 0 => *n,
            s => return Err(ModelError::Shape(format!("batch {s:?}, expected [N, {expected:?}]"))),
        };
        if config.wavelet_levels > 0 && pyramids.len() != n {
            return Err(ModelError::Shape(format!("{} pyramids for {n} samples", pyramids.len())));
        }
        let mode = if matches!(stats, Stats::Train(_)) { Mode::Train } else { Mode::Eval };
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
        let input = g.leaf(batch);
        let mut x = self.conv_bn(g, input, &self.stem, &vars, &mut stats, rng)?;
        for (t, stage) in self.stages.iter().enumerate() {
            let main = self.conv_bn(g, x, &stage.main, &vars, &mut stats, rng)?;
            let fused = match &stage.branch {
                Some(branch) => {
                    let (shape, data) = subband_batch(pyramids, t + 1)?;
                    if shape[2] != stage.size || shape[3] != stage.size {
                        return Err(ModelError::Shape(format!(
                            "level {} subbands are {}x{}, stage {} features are {}x{}",
                            t + 1,
                            shape[2],
                            shape[3],
                            t + 1,
                            stage.size,
                            stage.size
                        )));
                    }
                    let sub = g.constant(shape, data)?;
                    let w = self.conv_bn(g, sub, branch, &vars, &mut stats, rng)?;
                    match config.fusion_mode {
                        FusionMode::Concat => g.concat_channels(&[main, w])?,
                        FusionMode::Add => g.add(main, w)?,
                    }
                }
                None => main,
            };
            let shortcut = g.conv2d(x, vars[stage.projection], None, 2, 0)?;
            x = g.add(fused, shortcut)?;
        }
        let pooled = g.global_avg_pool(x)?;
        let pooled = g.dropout(pooled, config.dropout_rates[0], mode, rng)?;
        let hidden = g.affine(pooled, vars[self.dense.0], vars[self.dense.1])?;
        let hidden = g.relu(hidden)?;
        let hidden = g.dropout(hidden, config.dropout_rates[1], mode, rng)?;
        let logits = g.affine(hidden, vars[self.head.0], vars[self.head.1])?;
        Ok(Forward { logits, params: vars })
    }
}

/// Pyramids of every sample in a `[N, B, S, S]` batch.
pub fn batch_pyramids(batch: &Tensor, levels: usize) -> Result<Vec<WaveletPyramid>, ModelError> {
    if levels == 0 {
        return Ok(Vec::new());
    }
    let s = batch.shape();
    if s.len() != 4 {
        return Err(ModelError::Shape(format!("batch must be rank 4, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    batch
        .data()
        .chunks_exact(per)
        .map(|chunk| {
            let img = Tensor::new(vec![s[1], s[2], s[3]], chunk.to_vec())?;
            Ok(haar::haar_pyramid(&img, levels)?)
        })
        .collect()
}

impl Network {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn batch_norm_stats(&self) -> &[BatchNormStats] {
        &self.bn
    }

    pub fn batch_norm_stats_mut(&mut self) -> &mut [BatchNormStats] {
        &mut self.bn
    }

    pub fn batch_norm_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn layers(&self) -> &[LayerDescriptor] {
        &self.descriptors
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records a forward pass in the current mode. Train mode updates the
    /// batch-norm running statistics and samples dropout masks from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        batch: &Tensor,
        pyramids: &[WaveletPyramid],
        rng: &mut R,
    ) -> Result<Forward, ModelError> {
        let stats = match self.mode {
            Mode::Train => Stats::Train(&mut self.bn),
            Mode::Eval => Stats::Eval(&self.bn),
        };
        self.layout.record(&self.config, g, &self.params, batch, pyramids, stats, rng)
    }

    /// Eval-mode forward pass; a pure function of parameters and input.
    pub fn forward_eval(
        &self,
        g: &mut Graph,
        batch: &Tensor,
        pyramids: &[WaveletPyramid],
    ) -> Result<Forward, ModelError> {
        // Dropout is the identity in eval mode and never draws from this.
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        self.layout.record(&self.config, g, &self.params, batch, pyramids, Stats::Eval(&self.bn), &mut unused)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the graph's parameter gradients into the parameter tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, forward: &Forward) -> Result<(), ModelError> {
        for (p, &v) in self.params.iter_mut().zip(&forward.params) {
            g.accumulate_into(v, p)?;
        }
        Ok(())
    }
}
