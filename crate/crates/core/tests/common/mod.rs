//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance runner. Nothing here calls the code path it is used to check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use spectralnet::gradcheck::{check_gradient, GradCheckReport, Probe, Tolerance};
use spectralnet::tensor::BatchNormStats;
use spectralnet::{
    build_model, checkpoint_hash, evaluate, extract_patches, factor_analysis, fit, save_checkpoint, standardize_bands,
    stratified_split, FaOptions, FusionMode, Graph, HsiCube, Mode, ModelConfig, Split, Tensor, TrainConfig, Var,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

// ---------------------------------------------------------------- convolution

/// Direct-definition 2D cross-correlation. Terms are summed in (channel, ky, kx)
/// order and the bias is added last.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [f, _, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * f * oh * ow);
    for b in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                acc += xv * k[((fi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(match bias {
                        Some(bv) => acc + bv[fi],
                        None => acc,
                    });
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone)]
pub struct PairMetrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

/// Metrics from an explicit list of `(truth, predicted)` pairs, counting
/// marginals directly from the pairs.
pub fn pair_metrics(pairs: &[(usize, usize)], classes: usize) -> PairMetrics {
    let n = pairs.len() as f64;
    let agree = pairs.iter().filter(|(t, p)| t == p).count() as f64;
    let mut chance = 0.0;
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut f1 = Vec::new();
    let mut recalls_present = Vec::new();
    for k in 0..classes {
        let truth_k = pairs.iter().filter(|(t, _)| *t == k).count() as f64;
        let pred_k = pairs.iter().filter(|(_, p)| *p == k).count() as f64;
        let hit_k = pairs.iter().filter(|(t, p)| *t == k && *p == k).count() as f64;
        chance += (truth_k / n) * (pred_k / n);
        let pr = if pred_k > 0.0 { hit_k / pred_k } else { 0.0 };
        let rc = if truth_k > 0.0 { hit_k / truth_k } else { 0.0 };
        if truth_k > 0.0 {
            recalls_present.push(rc);
        }
        precision.push(pr);
        recall.push(rc);
        f1.push(if pr + rc > 0.0 { 2.0 * pr * rc / (pr + rc) } else { 0.0 });
    }
    let oa = agree / n;
    let kappa = if chance == 1.0 {
        if oa == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - chance) / (1.0 - chance)
    };
    PairMetrics {
        oa,
        aa: recalls_present.iter().sum::<f64>() / recalls_present.len() as f64,
        kappa,
        precision,
        recall,
        f1,
    }
}

pub fn expand_pairs(counts: &[u64], classes: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for t in 0..classes {
        for p in 0..classes {
            for _ in 0..counts[t * classes + p] {
                pairs.push((t, p));
            }
        }
    }
    pairs
}

/// A random non-empty confusion matrix with some empty rows and columns.
pub fn random_counts(rng: &mut ChaCha8Rng, classes: usize) -> Vec<u64> {
    loop {
        let dense = rng.random_bool(0.5);
        let counts: Vec<u64> = (0..classes * classes)
            .map(|i| {
                let diag = i / classes == i % classes;
                if !dense && rng.random_bool(0.4) {
                    0
                } else if diag {
                    rng.random_range(0..40)
                } else {
                    rng.random_range(0..8)
                }
            })
            .collect();
        if counts.iter().any(|&c| c > 0) {
            return counts;
        }
    }
}

// ---------------------------------------------------------------- op gradient checks

fn leaves(g: &mut Graph, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| g.leaf(t)).collect()
}

/// Checks every coordinate of every input of the scalar function `build`.
pub fn check_op<F>(inputs: &[Tensor], build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars = leaves(&mut g, inputs);
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(inputs)
        .flat_map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let eval = |x: &[f64]| {
        let mut offset = 0;
        let perturbed: Vec<Tensor> = inputs
            .iter()
            .map(|t| {
                let data = x[offset..offset + t.numel()].to_vec();
                offset += t.numel();
                Tensor::parameter(t.shape().to_vec(), data).unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let vars = leaves(&mut g, &perturbed);
        let loss = build(&mut g, &vars);
        Probe { loss: g.value(loss)[0], kinks: g.relu_pattern() }
    };
    let all: Vec<usize> = (0..point.len()).collect();
    check_gradient(eval, &point, &analytic, &all, Tolerance::default())
}

/// Random linear read-out of a rank-4 value followed by cross-entropy, so every
/// element of `y` influences the loss with its own weight.
fn head4(g: &mut Graph, y: Var, seed: u64) -> Var {
    let [n, c, h, w] = <[usize; 4]>::try_from(g.shape(y)).unwrap();
    let mut r = rng(seed);
    // Unit-scale logits keep the softmax out of saturation.
    let fan_in = c * h * w;
    let probe = g.constant(vec![3, c, h, w], normal_vec(&mut r, 3 * fan_in, 1.0 / (fan_in as f64).sqrt())).unwrap();
    let z = g.conv2d(y, probe, None, 1, 0).unwrap();
    let z = g.global_avg_pool(z).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    g.softmax_cross_entropy(z, &labels).unwrap()
}

fn head2(g: &mut Graph, y: Var, seed: u64) -> Var {
    let [n, d] = <[usize; 2]>::try_from(g.shape(y)).unwrap();
    let mut r = rng(seed);
    let w = g.constant(vec![d, 3], normal_vec(&mut r, 3 * d, 1.0 / (d as f64).sqrt())).unwrap();
    let b = g.constant(vec![3], vec![0.0; 3]).unwrap();
    let z = g.affine(y, w, b).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    g.softmax_cross_entropy(z, &labels).unwrap()
}

fn param(r: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::parameter(shape, normal_vec(r, n, scale)).unwrap()
}

pub const OPS: [&str; 11] = [
    "conv2d",
    "affine",
    "relu",
    "batch_norm(train)",
    "batch_norm(eval)",
    "dropout",
    "global_avg_pool",
    "concat_channels",
    "add",
    "sum",
    "softmax_cross_entropy",
];

/// Gradient check of one random instance of `op`.
pub fn check_op_instance(op: &str, seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let n = r.random_range(1..=2);
    let c = r.random_range(1..=3);
    let h = r.random_range(2..=5);
    let w = r.random_range(2..=5);
    let x4 = param(&mut r, vec![n, c, h, w], 1.0);
    match op {
        "conv2d" => {
            let f = r.random_range(1..=3);
            let k = r.random_range(1..=3.min(h).min(w));
            let stride = r.random_range(1..=2);
            let padding = r.random_range(0..=1);
            let with_bias = r.random_bool(0.5);
            let kernel = param(&mut r, vec![f, c, k, k], 0.7);
            let mut inputs = vec![x4, kernel];
            if with_bias {
                inputs.push(param(&mut r, vec![f], 0.5));
            }
            check_op(&inputs, |g, v| {
                let y = g.conv2d(v[0], v[1], v.get(2).copied(), stride, padding).unwrap();
                head4(g, y, seed)
            })
        }
        "affine" => {
            let d = r.random_range(1..=6);
            let m = r.random_range(1..=5);
            let inputs =
                [param(&mut r, vec![n + 1, d], 1.0), param(&mut r, vec![d, m], 0.7), param(&mut r, vec![m], 0.5)];
            check_op(&inputs, |g, v| {
                let y = g.affine(v[0], v[1], v[2]).unwrap();
                head2(g, y, seed)
            })
        }
        "relu" => check_op(&[x4], |g, v| {
            let y = g.relu(v[0]).unwrap();
            head4(g, y, seed)
        }),
        "batch_norm(train)" => {
            let inputs = [x4, param(&mut r, vec![c], 1.0), param(&mut r, vec![c], 1.0)];
            check_op(&inputs, |g, v| {
                let mut stats = BatchNormStats::new(c);
                let y = g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train).unwrap();
                head4(g, y, seed)
            })
        }
        "batch_norm(eval)" => {
            let mut stats = BatchNormStats::new(c);
            let mean = normal_vec(&mut r, c, 1.0);
            let var = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
            stats.set_running(mean, var).unwrap();
            let inputs = [x4, param(&mut r, vec![c], 1.0), param(&mut r, vec![c], 1.0)];
            check_op(&inputs, |g, v| {
                let y = g.batch_norm_eval(v[0], v[1], v[2], &stats).unwrap();
                head4(g, y, seed)
            })
        }
        "dropout" => {
            let rate = r.random_range(0.1..0.6);
            check_op(&[x4], |g, v| {
                // Reseeded per evaluation so every probe sees the same mask.
                let y = g.dropout(v[0], rate, Mode::Train, &mut rng(seed ^ 0xD0)).unwrap();
                head4(g, y, seed)
            })
        }
        "global_avg_pool" => check_op(&[x4], |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            head2(g, y, seed)
        }),
        "concat_channels" => {
            let c2 = r.random_range(1..=3);
            let other = param(&mut r, vec![n, c2, h, w], 1.0);
            check_op(&[x4, other], |g, v| {
                let y = g.concat_channels(&[v[0], v[1]]).unwrap();
                head4(g, y, seed)
            })
        }
        "add" => {
            let other = param(&mut r, vec![n, c, h, w], 1.0);
            check_op(&[x4, other], |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                head4(g, y, seed)
            })
        }
        "sum" => check_op(&[x4], |g, v| {
            let y = g.relu(v[0]).unwrap();
            let y = g.add(y, v[0]).unwrap();
            g.sum(y).unwrap()
        }),
        "softmax_cross_entropy" => {
            let k = r.random_range(1..=6);
            let rows = r.random_range(1..=4);
            let logits = param(&mut r, vec![rows, k], 3.0);
            let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..k)).collect();
            check_op(&[logits], |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap())
        }
        other => panic!("unknown op {other}"),
    }
}

// ---------------------------------------------------------------- network gradient check

/// Full-network check on one random `24 x 24 x 3` patch with 4 classes.
/// Samples `ceil(fraction * numel)` coordinates of every parameter tensor.
pub fn check_network(seed: u64, fraction: f64) -> (GradCheckReport, usize) {
    let cfg = ModelConfig {
        stage_channels: vec![4, 6, 8],
        wavelet_levels: 3,
        dense_width: 8,
        dropout_rates: [0.25, 0.25],
        ..ModelConfig::new(24, 3, 4)
    };
    let mut r = rng(seed);
    let net = build_model(&cfg, &mut r).unwrap();
    let batch = Tensor::new(vec![1, 3, 24, 24], normal_vec(&mut r, 3 * 24 * 24, 1.0)).unwrap();
    let label = [r.random_range(0..4)];
    let pyramids = spectralnet::batch_pyramids(&batch, 3).unwrap();

    let run = |params: &[f64]| {
        let mut net = net.clone();
        let mut offset = 0;
        for p in net.params_mut() {
            let len = p.numel();
            p.data_mut().copy_from_slice(&params[offset..offset + len]);
            offset += len;
        }
        let mut g = Graph::new();
        let fwd = net.forward(&mut g, &batch, &pyramids, &mut rng(seed ^ 0xF00D)).unwrap();
        let loss = g.softmax_cross_entropy(fwd.logits, &label).unwrap();
        (net, g, fwd, loss)
    };

    let point: Vec<f64> = net.params().iter().flat_map(|p| p.data().iter().copied()).collect();
    let (mut trained, mut g, fwd, loss) = run(&point);
    g.backward(loss).unwrap();
    trained.zero_grad();
    trained.accumulate_grads(&g, &fwd).unwrap();
    let analytic: Vec<f64> = trained.params().iter().flat_map(|p| p.grad().unwrap().iter().copied()).collect();

    let mut indices = Vec::new();
    let mut offset = 0;
    for p in net.params() {
        let take = ((p.numel() as f64 * fraction).ceil() as usize).max(1);
        let mut picks: Vec<usize> = (0..p.numel()).collect();
        rand::seq::SliceRandom::shuffle(picks.as_mut_slice(), &mut r);
        indices.extend(picks[..take].iter().map(|i| offset + i));
        offset += p.numel();
    }
    let eval = |x: &[f64]| {
        let (_, g, _, loss) = run(x);
        Probe { loss: g.value(loss)[0], kinks: g.relu_pattern() }
    };
    (check_gradient(eval, &point, &analytic, &indices, Tolerance::default()), point.len())
}

// ---------------------------------------------------------------- factor analysis

/// Noise level of the factor-recovery scenes, in loading units.
pub const FA_NOISE: f64 = 0.3;

/// `R`-band cube generated by `k` standard-normal factors plus noise, with
/// arbitrary per-band offsets and gains; returns the cube and the true factors.
///
/// Each band loads on one factor (contiguous blocks) and the blocks differ in
/// strength. Factor models are only identified up to rotation; this simple
/// structure with distinct block eigenvalues is what makes the unrotated
/// principal axes line up with the generators.
pub fn factor_scene(bands: usize, pixels: usize, k: usize, noise: f64, seed: u64) -> (HsiCube, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let strengths: Vec<f64> = (0..k).map(|j| 0.9 - 0.45 * j as f64 / k as f64).collect();
    // Block j gets a share of bands proportional to k - j, so blocks shrink
    // along with their strength and the eigenvalue gaps stay wide.
    let weight_total = (k * (k + 1) / 2) as f64;
    let mut owner = Vec::with_capacity(bands);
    let mut cumulative = 0.0;
    for j in 0..k {
        cumulative += (k - j) as f64 / weight_total;
        let end = if j + 1 == k { bands } else { (bands as f64 * cumulative).round() as usize };
        owner.resize(end, j);
    }
    let loadings: Vec<Vec<f64>> = (0..bands)
        .map(|b| {
            let sign = if r.random_bool(0.8) { 1.0 } else { -1.0 };
            let jitter = r.random_range(-0.05..0.05);
            (0..k).map(|j| if owner[b] == j { sign * (strengths[j] + jitter) } else { 0.0 }).collect()
        })
        .collect();
    let offsets: Vec<f64> = (0..bands).map(|_| r.random_range(100.0..4000.0)).collect();
    let scales: Vec<f64> = (0..bands).map(|_| r.random_range(10.0..300.0)).collect();
    let mut truth = vec![Vec::with_capacity(pixels); k];
    let mut data = Vec::with_capacity(pixels * bands);
    for _ in 0..pixels {
        let f = normal_vec(&mut r, k, 1.0);
        for (t, v) in truth.iter_mut().zip(&f) {
            t.push(*v);
        }
        for b in 0..bands {
            let e: f64 = StandardNormal.sample(&mut r);
            let v = loadings[b].iter().zip(&f).map(|(l, x)| l * x).sum::<f64>() + noise * e;
            data.push(offsets[b] + scales[b] * v);
        }
    }
    (HsiCube::new(40, pixels / 40, bands, data, vec![1; pixels]).unwrap(), truth)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Best `|rho|` per true factor over every assignment of recovered factors.
pub fn best_assignment(corr: &[Vec<f64>]) -> Vec<f64> {
    fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(i);
            for mut p in permutations(rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }
    let k = corr.len();
    permutations((0..k).collect())
        .into_iter()
        .map(|perm| perm.iter().enumerate().map(|(t, &e)| corr[t][e].abs()).collect::<Vec<f64>>())
        .max_by(|a, b| a.iter().sum::<f64>().total_cmp(&b.iter().sum::<f64>()))
        .unwrap()
}

// ---------------------------------------------------------------- synthetic scene

/// `32 x 32 x 8` scene: four quadrants, each with its own spectral signature,
/// plus per-band Gaussian noise of `0.2 x` the smallest signature separation.
///
/// Pixels on row 16 or column 16 are left unlabeled: a 16-pixel window
/// centred there (rows `r-8 ..= r+7`) holds equal areas of two classes, so
/// its label is not recoverable from the window contents.
pub fn quadrant_scene(seed: u64) -> (HsiCube, f64) {
    let (side, bands) = (32usize, 8usize);
    let mut r = rng(seed);
    let signatures: Vec<Vec<f64>> = (0..4).map(|_| (0..bands).map(|_| r.random_range(0.0..1.0)).collect()).collect();
    let mut separation = f64::INFINITY;
    for i in 0..4 {
        for j in i + 1..4 {
            let d: f64 = signatures[i].iter().zip(&signatures[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            separation = separation.min(d);
        }
    }
    let sigma = 0.2 * separation;
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut data = Vec::with_capacity(side * side * bands);
    let mut labels = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let class = usize::from(row >= 16) * 2 + usize::from(col >= 16);
            for &v in &signatures[class] {
                data.push(v + noise.sample(&mut r));
            }
            labels.push(if row == 16 || col == 16 { 0 } else { class as u32 + 1 });
        }
    }
    (HsiCube::new(side, side, bands, data, labels).unwrap(), sigma)
}

pub struct EndToEnd {
    pub history_csv: String,
    pub checkpoint_hash: String,
    pub train_oa: f64,
    pub test_oa: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub epochs: usize,
}

pub const END_TO_END_EPOCHS: usize = 60;

/// FA to 3 factors, 16 x 16 patches, 2 stages fused with 2 pyramid levels,
/// 30% stratified split, SGD with the default learning rate and momentum.
pub fn end_to_end(seed: u64, checkpoint_dir: &std::path::Path) -> EndToEnd {
    let (cube, _) = quadrant_scene(seed);
    let standardized = standardize_bands(&cube).unwrap();
    let reduced = factor_analysis(&standardized, 3, FaOptions::default()).unwrap();
    let mut patches = extract_patches(&reduced, cube.labels(), 16).unwrap();
    let split = stratified_split(&patches, 0.3, seed).unwrap();
    patches.set_split(split).unwrap();
    let train_idx = patches.indices(Split::Train);
    let test_idx = patches.indices(Split::Test);

    let cfg = ModelConfig {
        stage_channels: vec![8, 16],
        wavelet_levels: 2,
        dense_width: 32,
        dropout_rates: [0.1, 0.1],
        fusion_mode: FusionMode::Concat,
        ..ModelConfig::new(16, 3, 4)
    };
    let mut net = build_model(&cfg, &mut rng(seed)).unwrap();
    let train_cfg = TrainConfig { epochs: END_TO_END_EPOCHS, batch_size: 32, seed, ..TrainConfig::default() };
    let history = fit(&mut net, &patches, &train_idx, &train_cfg).unwrap();
    net.set_mode(Mode::Eval);
    let oa = |idx: &[usize]| {
        let e = evaluate(&net, &patches, idx, 2).unwrap();
        (0..4).map(|k| e.confusion.get(k, k)).sum::<u64>() as f64 / e.confusion.total() as f64
    };
    let train_oa = oa(&train_idx);
    let test_oa = oa(&test_idx);
    save_checkpoint(&net, checkpoint_dir, seed, END_TO_END_EPOCHS).unwrap();
    EndToEnd {
        history_csv: history.to_csv(),
        checkpoint_hash: checkpoint_hash(&net),
        train_oa,
        test_oa,
        train_count: train_idx.len(),
        test_count: test_idx.len(),
        epochs: history.epochs.len(),
    }
}

/// Largest absolute difference between the library metrics and the pair
/// oracle over `trials` random matrices with 1..=16 classes.
pub fn metrics_worst_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let classes = r.random_range(1..=16);
        let counts = random_counts(&mut r, classes);
        let cm = spectralnet::ConfusionMatrix::from_counts(classes, counts.clone()).unwrap();
        let got = spectralnet::confusion_to_metrics(&cm).unwrap();
        let want = pair_metrics(&expand_pairs(&counts, classes), classes);
        let mut diffs = vec![got.overall_accuracy - want.oa, got.average_accuracy - want.aa, got.kappa - want.kappa];
        for (k, m) in got.per_class.iter().enumerate() {
            diffs.extend([m.precision - want.precision[k], m.recall - want.recall[k], m.f1 - want.f1[k]]);
        }
        worst = diffs.iter().fold(worst, |w, d| w.max(d.abs()));
    }
    worst
}
