//! The four pipeline stages. Each validates its inputs before touching the
//! run directory, builds outputs in a staging directory and moves them into
//! place only once everything succeeded.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use spectralnet::npy;
use spectralnet::{
    build_model, checkpoint_hash, confusion_to_metrics, eval_threads, evaluate, extract_patches, factor_analysis, fit,
    haar_pyramid, load_checkpoint, load_cube, max_levels, render_report, save_checkpoint, standardize_bands,
    stratified_split, FaOptions, PatchSet, ReducedCube, Split, Tensor,
};

use crate::config::RunConfig;
use crate::run_dir::{sha256_file, sha256_str, RunDir};

pub const PREPROCESS: &str = "preprocess";
pub const TRAIN: &str = "train";
pub const EVALUATE: &str = "evaluate";
pub const DECOMPOSE: &str = "decompose";

/// An artifact that disagrees with the configuration (exit code 5).
#[derive(Debug)]
pub struct Mismatch(pub String);

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Mismatch {}

/// Everything about the preprocessing cache except the arrays themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    /// Hash of the inputs and every setting that shapes the cache.
    pub key: String,
    pub data_sha256: String,
    pub labels_sha256: String,
    pub rows: usize,
    pub cols: usize,
    pub source_bands: usize,
    pub bands: usize,
    pub patch: usize,
    pub class_count: usize,
    pub patch_count: usize,
    pub iterations: usize,
    pub heywood_cases: usize,
    pub final_delta: f64,
    pub loadings: Vec<f64>,
    pub uniquenesses: Vec<f64>,
    pub band_means: Vec<f64>,
    pub band_stds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PatchIndex {
    size: usize,
    class_count: usize,
    coords: Vec<(usize, usize)>,
    labels: Vec<usize>,
}

fn cache_key(data_sha: &str, labels_sha: &str, cfg: &RunConfig, fa: &FaOptions) -> String {
    sha256_str(&format!(
        "{data_sha}\n{labels_sha}\nbands={}\npatch={}\nfa={}/{:?}",
        cfg.bands, cfg.patch, fa.max_iterations, fa.tolerance
    ))
}

pub fn preprocess(cfg: &RunConfig) -> anyhow::Result<()> {
    let (data, labels) = cfg.inputs()?;
    let data_sha = sha256_file(data)?;
    let labels_sha = sha256_file(labels)?;
    let fa_opts = FaOptions::default();
    let key = cache_key(&data_sha, &labels_sha, cfg, &fa_opts);
    let cube = load_cube(data, labels)?;

    let run = RunDir::open(&cfg.out)?;
    if let Ok(existing) = read_sidecar(&run) {
        if existing.key == key {
            println!("cache hit: {}", run.path(PREPROCESS).display());
            run.log("preprocess: cache hit");
            return Ok(());
        }
    }

    let standardized = standardize_bands(&cube)?;
    let reduced = factor_analysis(&standardized, cfg.bands, fa_opts)?;
    let patches = extract_patches(&reduced, cube.labels(), cfg.patch)?;

    let staging = run.stage(PREPROCESS)?;
    npy::write_f64_file(staging.join("reduced.npy"), &[reduced.rows, reduced.cols, reduced.factors], &reduced.data)?;
    let label_map: Vec<i32> = cube.labels().iter().map(|&l| l as i32).collect();
    npy::write_i32_file(staging.join("labels.npy"), &[cube.rows(), cube.cols()], &label_map)?;
    let index = PatchIndex {
        size: cfg.patch,
        class_count: patches.class_count(),
        coords: patches.coords().to_vec(),
        labels: patches.labels().to_vec(),
    };
    fs::write(staging.join("patches.json"), serde_json::to_string(&index)?)?;
    let sidecar = Sidecar {
        key,
        data_sha256: data_sha.clone(),
        labels_sha256: labels_sha.clone(),
        rows: reduced.rows,
        cols: reduced.cols,
        source_bands: reduced.source_bands(),
        bands: reduced.factors,
        patch: cfg.patch,
        class_count: patches.class_count(),
        patch_count: patches.len(),
        iterations: reduced.iterations,
        heywood_cases: reduced.heywood_cases,
        final_delta: reduced.final_delta,
        loadings: reduced.loadings.clone(),
        uniquenesses: reduced.uniquenesses.clone(),
        band_means: reduced.band_means.clone(),
        band_stds: reduced.band_stds.clone(),
    };
    fs::write(staging.join("fa.json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    let dir = run.commit(PREPROCESS, &staging)?;

    run.record(PREPROCESS, json!({ "config": cfg, "inputs": { "data": data_sha, "labels": labels_sha } }))?;
    run.log(&format!("preprocess: {} patches, FA converged in {} iterations", patches.len(), reduced.iterations));
    println!(
        "reduced {}x{}x{} -> {} factors ({} FA iterations); {} patches of {}x{} over {} classes in {}",
        cube.rows(),
        cube.cols(),
        cube.bands(),
        reduced.factors,
        reduced.iterations,
        patches.len(),
        cfg.patch,
        cfg.patch,
        patches.class_count(),
        dir.display()
    );
    Ok(())
}

fn read_sidecar(run: &RunDir) -> anyhow::Result<Sidecar> {
    let path = run.path(PREPROCESS).join("fa.json");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("no preprocessing cache at {}; run `preprocess` first", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Loads the cached patch set and the effective config with B and S taken
/// from the cache. Explicitly requested values must agree with it.
fn load_cache(
    run: &RunDir,
    cfg: &RunConfig,
    explicit: (Option<usize>, Option<usize>),
) -> anyhow::Result<(PatchSet, Sidecar, RunConfig)> {
    let side = read_sidecar(run)?;
    if let Some(b) = explicit.0.filter(|&b| b != side.bands) {
        return Err(Mismatch(format!(
            "cache holds {} factor bands, --bands asks for {b}; rerun preprocess",
            side.bands
        ))
        .into());
    }
    if let Some(s) = explicit.1.filter(|&s| s != side.patch) {
        return Err(Mismatch(format!(
            "cache holds {}x{0} patches, --patch asks for {s}; rerun preprocess",
            side.patch
        ))
        .into());
    }
    let dir = run.path(PREPROCESS);
    let arr = npy::read_file(dir.join("reduced.npy")).context("reading cached reduced cube")?;
    if arr.shape != [side.rows, side.cols, side.bands] {
        bail!(
            "cached reduced cube has shape {:?}, sidecar says ({}, {}, {})",
            arr.shape,
            side.rows,
            side.cols,
            side.bands
        );
    }
    let reduced = ReducedCube {
        rows: side.rows,
        cols: side.cols,
        factors: side.bands,
        data: arr.data,
        loadings: side.loadings.clone(),
        uniquenesses: side.uniquenesses.clone(),
        band_means: side.band_means.clone(),
        band_stds: side.band_stds.clone(),
        iterations: side.iterations,
        heywood_cases: side.heywood_cases,
        final_delta: side.final_delta,
    };
    let index: PatchIndex =
        serde_json::from_str(&fs::read_to_string(dir.join("patches.json"))?).context("parsing patches.json")?;
    let patches = PatchSet::from_parts(&reduced, index.size, index.coords, index.labels, index.class_count)?;
    let effective = RunConfig { bands: side.bands, patch: side.patch, ..cfg.clone() };
    Ok((patches, side, effective))
}

pub fn train(cfg: &RunConfig, explicit: (Option<usize>, Option<usize>)) -> anyhow::Result<()> {
    let run = RunDir::open(&cfg.out)?;
    let (mut patches, side, cfg) = load_cache(&run, cfg, explicit)?;
    let model_cfg = cfg.model_config(side.class_count);
    let train_cfg = cfg.train_config();
    model_cfg.validate()?;
    train_cfg.validate()?;

    let split = stratified_split(&patches, cfg.fraction, cfg.seed)?;
    patches.set_split(split.clone())?;
    let train_idx = patches.indices(Split::Train);
    let mut net = build_model(&model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    println!(
        "training {} parameters on {} of {} patches for {} epochs",
        net.count_parameters(),
        train_idx.len(),
        patches.len(),
        cfg.epochs
    );
    let history = fit(&mut net, &patches, &train_idx, &train_cfg)?;

    let staging = run.stage(TRAIN)?;
    let manifest = save_checkpoint(&net, &staging.join("checkpoint"), cfg.seed, cfg.epochs)?;
    fs::write(staging.join("history.csv"), history.to_csv())?;
    fs::write(staging.join("split.json"), serde_json::to_string(&split)?)?;
    let dir = run.commit(TRAIN, &staging)?;

    run.record(TRAIN, json!({ "config": cfg, "cache": side.key, "checkpoint_hash": manifest.hash }))?;
    let last = history.last().context("training ran no epochs")?;
    run.log(&format!("train: {} epochs, final loss {:?}", history.epochs.len(), last.loss));
    println!("final train accuracy {:.4} (loss {:.6})", last.train_accuracy, last.loss);
    println!("checkpoint {} in {}", manifest.hash, dir.display());
    Ok(())
}

pub fn evaluate_cmd(
    cfg: &RunConfig,
    explicit: (Option<usize>, Option<usize>),
    checkpoint: Option<&Path>,
) -> anyhow::Result<()> {
    let run = RunDir::open(&cfg.out)?;
    let (mut patches, side, cfg) = load_cache(&run, cfg, explicit)?;
    let ckpt_dir = checkpoint.map_or_else(|| run.path(TRAIN).join("checkpoint"), Path::to_path_buf);
    let (net, manifest) = load_checkpoint(&ckpt_dir)?;
    manifest.check_config(&cfg.model_config(side.class_count))?;

    let split_path = run.path(TRAIN).join("split.json");
    let split: Vec<Split> = serde_json::from_str(
        &fs::read_to_string(&split_path)
            .with_context(|| format!("reading {}; run `train` first", split_path.display()))?,
    )?;
    if split.len() != patches.len() {
        return Err(Mismatch(format!("split covers {} patches, cache holds {}", split.len(), patches.len())).into());
    }
    patches.set_split(split)?;
    let test_idx = patches.indices(Split::Test);
    if test_idx.is_empty() {
        bail!("the split leaves no test patches (train fraction {})", cfg.fraction);
    }
    let names = cfg.class_names(side.class_count)?;

    let eval = evaluate(&net, &patches, &test_idx, eval_threads())?;
    let mut report = confusion_to_metrics(&eval.confusion)?;
    report.test_loss = Some(eval.loss);
    let rendered = render_report(&report, &names)?;

    let staging = run.stage(EVALUATE)?;
    fs::write(staging.join("metrics.json"), rendered.json.clone() + "\n")?;
    fs::write(staging.join("report.txt"), &rendered.table)?;
    fs::write(staging.join("confusion.csv"), &rendered.confusion_csv)?;
    run.commit(EVALUATE, &staging)?;

    run.record(
        EVALUATE,
        json!({ "config": cfg, "cache": side.key, "checkpoint": ckpt_dir, "checkpoint_hash": checkpoint_hash(&net) }),
    )?;
    run.log(&format!("evaluate: OA {:?} on {} patches", report.overall_accuracy, test_idx.len()));
    print!("{}", rendered.table);
    Ok(())
}

/// Reads an `(H, W)` or `(H, W, C)` array as a `[C, H, W]` image.
pub fn read_image(path: &Path) -> anyhow::Result<Tensor> {
    let arr = npy::read_file(path).with_context(|| format!("reading {}", path.display()))?;
    let (h, w, c) = match *arr.shape.as_slice() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        ref s => bail!("{}: expected an (H, W) or (H, W, C) array, got {s:?}", path.display()),
    };
    let mut chw = vec![0.0; arr.data.len()];
    for (p, px) in arr.data.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            chw[ch * h * w + p] = v;
        }
    }
    Ok(Tensor::new(vec![c, h, w], chw)?)
}

/// 8-bit binary PGM, min-max scaled over the whole band; channels stack
/// vertically. A constant band maps to 0 when it is zero and 255 otherwise.
pub fn pgm(band: &Tensor) -> Vec<u8> {
    let &[c, h, w] = band.shape() else { unreachable!("subbands are [C,H,W]") };
    let data = band.data();
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let mut out = format!("P5\n{w} {}\n255\n", c * h).into_bytes();
    out.extend(data.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else if v == 0.0 {
            0
        } else {
            255
        }
    }));
    out
}

pub fn decompose(input: &Path, levels: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let image = read_image(input)?;
    let &[c, h, w] = image.shape() else { unreachable!() };
    let levels = levels.unwrap_or_else(|| max_levels(h, w).min(4));
    let pyramid = haar_pyramid(&image, levels)?;
    let input_sha = sha256_file(input)?;

    let run = RunDir::open(out)?;
    let staging = run.stage(DECOMPOSE)?;
    for (t, bands) in pyramid.levels().iter().enumerate() {
        for (name, band) in ["LL", "LH", "HL", "HH"].iter().zip(bands.bands()) {
            let stem = staging.join(format!("level{}_{name}", t + 1));
            npy::write_f64_file(stem.with_extension("npy"), band.shape(), band.data())?;
            fs::write(stem.with_extension("pgm"), pgm(band))?;
        }
    }
    let dir = run.commit(DECOMPOSE, &staging)?;
    let input_path: PathBuf = input.to_path_buf();
    run.record(
        DECOMPOSE,
        json!({ "input": input_path, "input_sha256": input_sha, "levels": levels, "shape": [c, h, w] }),
    )?;
    run.log(&format!("decompose: {levels} levels"));
    println!("{} subbands over {levels} levels of a {c}x{h}x{w} image in {}", 4 * levels, dir.display());
    Ok(())
}
