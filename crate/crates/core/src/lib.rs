//! Hyperspectral image classification with a wavelet-fused 2D CNN.
//!
//! Pipeline: load an `M x N x R` cube, standardize bands, reduce to `B`
//! factors, cut `S x S x B` patches around labeled pixels, and train a
//! staged CNN whose stride-2 stages are fused with matching Haar pyramid
//! levels. Everything runs on a small f64 reverse-mode autodiff engine with
//! a fixed summation order, so a seed reproduces a run bit for bit.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod haar;
pub mod metrics;
pub mod model;
pub mod npy;
pub mod tensor;
pub mod train;

pub use checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, CheckpointError, Manifest};
pub use data::{
    extract_patches, factor_analysis, load_cube, standardize_bands, stratified_split, DataError, FaOptions, HsiCube,
    PatchSet, ReducedCube, Split, StandardizedCube,
};
pub use haar::{haar_forward, haar_inverse, haar_pyramid, max_levels, HaarError, Subbands, WaveletPyramid};
pub use metrics::{
    confusion_to_metrics, render_report, ConfusionMatrix, MetricsError, MetricsReport, RenderedReport,
    INDIAN_PINES_CLASSES,
};
pub use model::{
    batch_pyramids, build_model, FusionMode, LayerDescriptor, LayerKind, ModelConfig, ModelError, Network,
};
pub use tensor::{Graph, Mode, Sgd, Tensor, TensorError, Var};
pub use train::{eval_threads, evaluate, fit, Evaluation, TrainConfig, TrainError, TrainingHistory};
