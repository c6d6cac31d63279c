//! Checkpoint directories: `manifest.json` plus one NPY per tensor.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{build_model, ModelConfig, ModelError, Network};
use crate::npy::{self, NpyError};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Npy { path: String, source: NpyError },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("checkpoint {field} is {found}, configuration expects {expected}")]
    Mismatch { field: String, expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormEntry {
    pub name: String,
    pub channels: usize,
    /// Mean and variance files; absent for layers that never saw a batch.
    pub running: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<TensorEntry>,
    pub batch_norm: Vec<BatchNormEntry>,
    pub hash: String,
}

impl Manifest {
    /// Errors naming the first field where the checkpoint and `expected` disagree.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let (e, f) = (expected, &self.config);
        let fields: [(&str, String, String); 8] = [
            ("class count", e.class_count.to_string(), f.class_count.to_string()),
            ("input bands", e.input_bands.to_string(), f.input_bands.to_string()),
            ("patch size", e.patch_size.to_string(), f.patch_size.to_string()),
            ("stage channels", format!("{:?}", e.stage_channels), format!("{:?}", f.stage_channels)),
            ("wavelet levels", e.wavelet_levels.to_string(), f.wavelet_levels.to_string()),
            ("dense width", e.dense_width.to_string(), f.dense_width.to_string()),
            ("fusion mode", format!("{:?}", e.fusion_mode), format!("{:?}", f.fusion_mode)),
            ("dropout rates", format!("{:?}", e.dropout_rates), format!("{:?}", f.dropout_rates)),
        ];
        match fields.into_iter().find(|(_, a, b)| a != b) {
            Some((field, expected, found)) => Err(CheckpointError::Mismatch { field: field.into(), expected, found }),
            None => Ok(()),
        }
    }
}

/// SHA-256 over every parameter's name, shape and little-endian bytes, then
/// every batch-norm layer's running statistics.
pub fn checkpoint_hash(net: &Network) -> String {
    let mut h = Sha256::new();
    for (name, p) in net.param_names().iter().zip(net.params()) {
        h.update(name.as_bytes());
        h.update([0]);
        for &d in p.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    for (name, s) in net.batch_norm_names().iter().zip(net.batch_norm_stats()) {
        h.update(name.as_bytes());
        h.update([0]);
        if let Some((mean, var)) = s.running() {
            for v in mean.iter().chain(var) {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

fn npy_err(path: &Path) -> impl FnOnce(NpyError) -> CheckpointError + '_ {
    move |source| CheckpointError::Npy { path: path.display().to_string(), source }
}

/// Writes the network into `dir` (created if missing).
pub fn save_checkpoint(net: &Network, dir: &Path, seed: u64, epoch: usize) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut params = Vec::new();
    for (name, p) in net.param_names().iter().zip(net.params()) {
        let file = format!("{name}.npy");
        let path = dir.join(&file);
        npy::write_f64_file(&path, p.shape(), p.data()).map_err(io_err(&path))?;
        params.push(TensorEntry { name: name.clone(), shape: p.shape().to_vec(), file });
    }
    let mut batch_norm = Vec::new();
    for (name, s) in net.batch_norm_names().iter().zip(net.batch_norm_stats()) {
        let running = match s.running() {
            Some((mean, var)) => {
                let files = (format!("{name}.running_mean.npy"), format!("{name}.running_var.npy"));
                for (file, values) in [(&files.0, mean), (&files.1, var)] {
                    let path = dir.join(file);
                    npy::write_f64_file(&path, &[values.len()], values).map_err(io_err(&path))?;
                }
                Some(files)
            }
            None => None,
        };
        batch_norm.push(BatchNormEntry { name: name.clone(), channels: s.channels(), running });
    }
    let manifest = Manifest {
        format: FORMAT,
        config: net.config().clone(),
        seed,
        epoch,
        params,
        batch_norm,
        hash: checkpoint_hash(net),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Manifest(format!("unsupported format {}", manifest.format)));
    }
    Ok(manifest)
}

fn read_values(dir: &Path, file: &str, shape: &[usize]) -> Result<Vec<f64>, CheckpointError> {
    let path = dir.join(file);
    let arr = npy::read_file(&path).map_err(npy_err(&path))?;
    if arr.shape != shape {
        return Err(CheckpointError::Manifest(format!("{file} has shape {:?}, expected {shape:?}", arr.shape)));
    }
    Ok(arr.data)
}

/// Rebuilds the network stored in `dir` and verifies its content hash.
pub fn load_checkpoint(dir: &Path) -> Result<(Network, Manifest), CheckpointError> {
    let manifest = read_manifest(dir)?;
    // Initial values are all overwritten below.
    let mut net = build_model(&manifest.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names = net.param_names().to_vec();
    if names.len() != manifest.params.len() {
        return Err(CheckpointError::Manifest(format!(
            "{} parameter tensors stored, configuration has {}",
            manifest.params.len(),
            names.len()
        )));
    }
    for ((name, p), entry) in names.iter().zip(net.params_mut()).zip(&manifest.params) {
        if *name != entry.name || p.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Manifest(format!(
                "stored {} {:?} where {} {:?} was expected",
                entry.name,
                entry.shape,
                name,
                p.shape()
            )));
        }
        let values = read_values(dir, &entry.file, &entry.shape)?;
        p.data_mut().copy_from_slice(&values);
    }
    let bn_names = net.batch_norm_names().to_vec();
    if bn_names.len() != manifest.batch_norm.len() {
        return Err(CheckpointError::Manifest("batch-norm layer count differs from configuration".into()));
    }
    for ((name, s), entry) in bn_names.iter().zip(net.batch_norm_stats_mut()).zip(&manifest.batch_norm) {
        if *name != entry.name || s.channels() != entry.channels {
            return Err(CheckpointError::Manifest(format!(
                "stored batch-norm layer {} where {name} was expected",
                entry.name
            )));
        }
        if let Some((mean_file, var_file)) = &entry.running {
            let mean = read_values(dir, mean_file, &[entry.channels])?;
            let var = read_values(dir, var_file, &[entry.channels])?;
            s.set_running(mean, var).map_err(ModelError::from)?;
        }
    }
    let hash = checkpoint_hash(&net);
    if hash != manifest.hash {
        return Err(CheckpointError::Mismatch {
            field: "content hash".into(),
            expected: manifest.hash.clone(),
            found: hash,
        });
    }
    Ok((net, manifest))
}
