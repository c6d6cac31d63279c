use rand::Rng;

use super::{Result, Tensor, TensorError};

pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    channels: usize,
    running: Option<(Vec<f64>, Vec<f64>)>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self { channels, running: None }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn running(&self) -> Option<(&[f64], &[f64])> {
        self.running.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_running(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.channels || var.len() != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("running stats of length {}/{} for {} channels", mean.len(), var.len(), self.channels),
            });
        }
        self.running = Some((mean, var));
        Ok(())
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        match &mut self.running {
            None => self.running = Some((mean.to_vec(), var.to_vec())),
            Some((rm, rv)) => {
                for c in 0..self.channels {
                    rm[c] = BATCH_NORM_MOMENTUM * rm[c] + (1.0 - BATCH_NORM_MOMENTUM) * mean[c];
                    rv[c] = BATCH_NORM_MOMENTUM * rv[c] + (1.0 - BATCH_NORM_MOMENTUM) * var[c];
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize },
    Affine { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Dropout { input: Var, mask: Vec<f64> },
    GlobalAvgPool { input: Var },
    Concat { inputs: Vec<Var> },
    Add { lhs: Var, rhs: Var },
    Sum { input: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            Op::Affine { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Relu { input } | Op::Dropout { input, .. } | Op::GlobalAvgPool { input } | Op::Sum { input } => {
                vec![*input]
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Concat { inputs } => inputs.clone(),
            Op::Add { lhs, rhs } => vec![*lhs, *rhs],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Summary of one backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    /// Nodes whose vector-Jacobian product was evaluated.
    pub visited: usize,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order: every
/// operation can only reference nodes that already exist.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Output extent of a strided, padded window sweep.
pub(crate) fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `o` for which `o * stride + k - padding` lands in `[0, extent)`.
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, padding: usize) -> std::ops::Range<usize> {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi = if extent + padding > k { ((extent + padding - k - 1) / stride + 1).min(out) } else { 0 };
    lo.min(hi)..hi
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf. Trainable tensors receive gradients.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            requires_grad: tensor.requires_grad(),
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (non-differentiable) input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradient of `v` (if any) into `tensor`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => tensor.accumulate_grad(g),
            None if tensor.requires_grad() => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
            None => Ok(()),
        }
    }

    /// Sign pattern (`x > 0`) of every ReLU input, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { input } = node.op {
                pattern.extend(self.nodes[input.0].value.iter().map(|&x| x > 0.0));
            }
        }
        pattern
    }

    fn shape4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match self.shape(v) {
            &[a, b, c, d] => Ok([a, b, c, d]),
            s => Err(mismatch(op, format!("expected a rank-4 tensor, got {s:?}"))),
        }
    }

    /// 2D cross-correlation: `input [N,C,H,W]` with `kernel [F,C,kh,kw]`, plus optional `bias [F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = self.shape4(OP, input)?;
        let [f, kc, kh, kw] = self.shape4(OP, kernel)?;
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be positive".into()));
        }
        if kc != c {
            return Err(mismatch(OP, format!("input has {c} channels, kernel expects {kc}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(mismatch(OP, format!("bias shape {:?} for {f} filters", self.shape(b))));
            }
        }
        let (oh, ow) = match (conv_out_extent(h, kh, stride, padding), conv_out_extent(w, kw, stride, padding)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 && n > 0 && f > 0 => (oh, ow),
            _ => return Err(TensorError::EmptyOutput { op: OP }),
        };
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let mut out = vec![0.0; n * f * oh * ow];
        for b in 0..n {
            for fi in 0..f {
                let plane = &mut out[(b * f + fi) * oh * ow..][..oh * ow];
                for ci in 0..c {
                    let xplane = &x[(b * c + ci) * h * w..][..h * w];
                    for ky in 0..kh {
                        let rows = valid_range(oh, h, ky, stride, padding);
                        for kx in 0..kw {
                            let wv = k[((fi * c + ci) * kh + ky) * kw + kx];
                            let cols = valid_range(ow, w, kx, stride, padding);
                            for oy in rows.clone() {
                                let iy = oy * stride + ky - padding;
                                let xrow = &xplane[iy * w..][..w];
                                let orow = &mut plane[oy * ow..][..ow];
                                for ox in cols.clone() {
                                    orow[ox] += xrow[ox * stride + kx - padding] * wv;
                                }
                            }
                        }
                    }
                }
                if let Some(bv) = bias {
                    let bias_v = self.nodes[bv.0].value[fi];
                    plane.iter_mut().for_each(|o| *o += bias_v);
                }
            }
        }
        check_finite(OP, &out)?;
        Ok(self.push(vec![n, f, oh, ow], out, Op::Conv2d { input, kernel, bias, stride, padding }))
    }

    /// `input [N,D] · weight [D,K] + bias [K]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "affine";
        let (n, d) = match self.shape(input) {
            &[n, d] => (n, d),
            s => return Err(mismatch(OP, format!("input must be rank 2, got {s:?}"))),
        };
        let k = match self.shape(weight) {
            &[wd, k] if wd == d => k,
            s => return Err(mismatch(OP, format!("weight {s:?} does not accept {d} inputs"))),
        };
        if self.shape(bias) != [k] {
            return Err(mismatch(OP, format!("bias {:?} for {k} outputs", self.shape(bias))));
        }
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let bs = &self.nodes[bias.0].value;
        let mut out = vec![0.0; n * k];
        for r in 0..n {
            let orow = &mut out[r * k..][..k];
            for di in 0..d {
                let xv = x[r * d + di];
                let wrow = &wt[di * k..][..k];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
            for (o, b) in orow.iter_mut().zip(bs) {
                *o += b;
            }
        }
        check_finite(OP, &out)?;
        Ok(self.push(vec![n, k], out, Op::Affine { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(input).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        Ok(self.push(self.shape(input).to_vec(), out, Op::Relu { input }))
    }

    /// Per-channel batch normalization of `[N,C,H,W]`.
    ///
    /// Train mode normalizes with the batch statistics and folds them into
    /// `stats`; eval mode uses the stored running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (out, mean, var) = self.batch_norm_impl(input, gamma, beta, None)?;
                stats.update(&mean, &var);
                Ok(out)
            }
            Mode::Eval => self.batch_norm_eval(input, gamma, beta, stats),
        }
    }

    /// Eval-mode batch normalization with read-only statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, stats: &BatchNormStats) -> Result<Var> {
        let (mean, var) = stats.running().ok_or(TensorError::MissingRunningStats)?;
        let (mean, var) = (mean.to_vec(), var.to_vec());
        self.batch_norm_impl(input, gamma, beta, Some((&mean, &var))).map(|(v, _, _)| v)
    }

    fn batch_norm_impl(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        const OP: &str = "batch_norm";
        let [n, c, h, w] = self.shape4(OP, input)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(OP, format!("gamma/beta must have shape [{c}]")));
        }
        if let Some((m, _)) = running {
            if m.len() != c {
                return Err(mismatch(OP, format!("running stats for {} channels, input has {c}", m.len())));
            }
        }
        let count = n * h * w;
        if count == 0 {
            return Err(TensorError::EmptyOutput { op: OP });
        }
        let plane = h * w;
        let x = &self.nodes[input.0].value;
        let g = &self.nodes[gamma.0].value;
        let bt = &self.nodes[beta.0].value;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match running {
            Some((rm, rv)) => {
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
            None => {
                for ci in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        for v in &x[(b * c + ci) * plane..][..plane] {
                            s += v;
                        }
                    }
                    let mu = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        for v in &x[(b * c + ci) * plane..][..plane] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = ss / count as f64;
                }
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ci in 0..c {
                let base = (b * c + ci) * plane;
                for i in base..base + plane {
                    let xh = (x[i] - mean[ci]) * inv_std[ci];
                    normalized[i] = xh;
                    out[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        check_finite(OP, &out)?;
        let train = running.is_none();
        let v = self.push(vec![n, c, h, w], out, Op::BatchNorm { input, gamma, beta, normalized, inv_std, train });
        Ok((v, mean, var))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` at train time.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - rate);
        let x = &self.nodes[input.0].value;
        let mask: Vec<f64> = (0..x.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale }).collect();
        let out = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
        Ok(self.push(self.shape(input).to_vec(), out, Op::Dropout { input, mask }))
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool";
        let [n, c, h, w] = self.shape4(OP, input)?;
        if h == 0 || w == 0 {
            return Err(TensorError::EmptyOutput { op: OP });
        }
        let plane = h * w;
        let x = &self.nodes[input.0].value;
        let out = (0..n * c).map(|i| x[i * plane..][..plane].iter().sum::<f64>() / plane as f64).collect();
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool { input }))
    }

    /// Stacks `[N,Ci,H,W]` inputs along the channel axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs.first().ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let [n, _, h, w] = self.shape4(OP, first)?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vn, vc, vh, vw] = self.shape4(OP, v)?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(mismatch(OP, format!("{:?} vs {:?}", self.shape(v), self.shape(first))));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&v, &vc) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.nodes[v.0].value[b * vc * plane..][..vc * plane]);
            }
        }
        Ok(self.push(vec![n, total, h, w], out, Op::Concat { inputs: inputs.to_vec() }))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.shape(lhs), self.shape(rhs))));
        }
        let out: Vec<f64> = self.value(lhs).iter().zip(self.value(rhs)).map(|(a, b)| a + b).collect();
        check_finite("add", &out)?;
        Ok(self.push(self.shape(lhs).to_vec(), out, Op::Add { lhs, rhs }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).iter().sum::<f64>();
        check_finite("sum", &[s])?;
        Ok(self.push(Vec::new(), vec![s], Op::Sum { input }))
    }

    /// Batch-mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let (n, k) = match self.shape(logits) {
            &[n, k] if n > 0 && k > 0 => (n, k),
            s => return Err(mismatch(OP, format!("logits must be non-empty rank 2, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(mismatch(OP, format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let x = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for r in 0..n {
            let row = &x[r * k..][..k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[r * k..][..k].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            probs[r * k..][..k].iter_mut().for_each(|p| *p /= z);
            total += m + z.ln() - row[labels[r]];
        }
        let loss = total / n as f64;
        check_finite(OP, &[loss])?;
        Ok(self.push(Vec::new(), vec![loss], Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Reverse sweep from a scalar `loss`. Gradients add into any already present.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        add_into(&mut self.grads[loss.0], &[1.0]);
        let mut visited = 0;
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.grads[id].take() else { continue };
            visited += 1;
            let contributions = self.vjp(id, &upstream);
            self.grads[id] = Some(upstream);
            for (var, g) in contributions {
                assert!(var.0 < id, "graph is not topologically ordered");
                if self.nodes[var.0].requires_grad {
                    add_into(&mut self.grads[var.0], &g);
                }
            }
        }
        Ok(BackwardReport { visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `id` for each of its inputs.
    fn vjp(&self, id: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Relu { input } => {
                let x = &self.nodes[input.0].value;
                let g = x.iter().zip(gy).map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 }).collect();
                vec![(*input, g)]
            }
            Op::Add { lhs, rhs } => vec![(*lhs, gy.to_vec()), (*rhs, gy.to_vec())],
            Op::Sum { input } => vec![(*input, vec![gy[0]; self.nodes[input.0].value.len()])],
            Op::Dropout { input, mask } => vec![(*input, gy.iter().zip(mask).map(|(g, m)| g * m).collect())],
            Op::GlobalAvgPool { input } => {
                let s = &self.nodes[input.0].shape;
                let plane = s[2] * s[3];
                let scale = 1.0 / plane as f64;
                let mut g = vec![0.0; s.iter().product()];
                for (i, &gv) in gy.iter().enumerate() {
                    g[i * plane..][..plane].iter_mut().for_each(|v| *v = gv * scale);
                }
                vec![(*input, g)]
            }
            Op::Concat { inputs } => {
                let [n, total, h, w] = <[usize; 4]>::try_from(node.shape.as_slice()).expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let vc = self.nodes[v.0].shape[1];
                    let mut g = Vec::with_capacity(n * vc * plane);
                    for b in 0..n {
                        g.extend_from_slice(&gy[(b * total + offset) * plane..][..vc * plane]);
                    }
                    offset += vc;
                    out.push((v, g));
                }
                out
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gy[0] / n as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * k + l] -= scale;
                }
                vec![(*logits, g)]
            }
            Op::Affine { input, weight, bias } => {
                let (n, d) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let k = self.nodes[bias.0].shape[0];
                let x = &self.nodes[input.0].value;
                let wt = &self.nodes[weight.0].value;
                let mut out = Vec::new();
                if self.wants(*input) {
                    let mut gx = vec![0.0; n * d];
                    for r in 0..n {
                        for di in 0..d {
                            let mut s = 0.0;
                            for ki in 0..k {
                                s += gy[r * k + ki] * wt[di * k + ki];
                            }
                            gx[r * d + di] = s;
                        }
                    }
                    out.push((*input, gx));
                }
                if self.wants(*weight) {
                    let mut gw = vec![0.0; d * k];
                    for r in 0..n {
                        for di in 0..d {
                            let xv = x[r * d + di];
                            for ki in 0..k {
                                gw[di * k + ki] += xv * gy[r * k + ki];
                            }
                        }
                    }
                    out.push((*weight, gw));
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; k];
                    for r in 0..n {
                        for ki in 0..k {
                            gb[ki] += gy[r * k + ki];
                        }
                    }
                    out.push((*bias, gb));
                }
                out
            }
            Op::BatchNorm { input, gamma, beta, normalized, inv_std, train } => {
                let s = &self.nodes[input.0].shape;
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let count = (n * plane) as f64;
                let gamma_v = &self.nodes[gamma.0].value;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ci in 0..c {
                        let base = (b * c + ci) * plane;
                        for i in base..base + plane {
                            sum_g[ci] += gy[i];
                            sum_gx[ci] += gy[i] * normalized[i];
                        }
                    }
                }
                let mut out = Vec::new();
                if self.wants(*input) {
                    let mut gx = vec![0.0; gy.len()];
                    for b in 0..n {
                        for ci in 0..c {
                            let base = (b * c + ci) * plane;
                            let a = gamma_v[ci] * inv_std[ci];
                            for i in base..base + plane {
                                gx[i] = if *train {
                                    a / count * (count * gy[i] - sum_g[ci] - normalized[i] * sum_gx[ci])
                                } else {
                                    a * gy[i]
                                };
                            }
                        }
                    }
                    out.push((*input, gx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.wants(*beta) {
                    out.push((*beta, sum_g));
                }
                out
            }
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                let (stride, padding) = (*stride, *padding);
                let [n, c, h, w] = <[usize; 4]>::try_from(self.nodes[input.0].shape.as_slice()).expect("rank 4");
                let [f, _, kh, kw] = <[usize; 4]>::try_from(self.nodes[kernel.0].shape.as_slice()).expect("rank 4");
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let want_x = self.wants(*input);
                let want_k = self.wants(*kernel);
                let mut gx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut gk = if want_k { vec![0.0; k.len()] } else { Vec::new() };
                for b in 0..n {
                    for fi in 0..f {
                        let gplane = &gy[(b * f + fi) * oh * ow..][..oh * ow];
                        for ci in 0..c {
                            let xoff = (b * c + ci) * h * w;
                            for ky in 0..kh {
                                let rows = valid_range(oh, h, ky, stride, padding);
                                for kx in 0..kw {
                                    let kidx = ((fi * c + ci) * kh + ky) * kw + kx;
                                    let wv = k[kidx];
                                    let cols = valid_range(ow, w, kx, stride, padding);
                                    let mut acc = 0.0;
                                    for oy in rows.clone() {
                                        let iy = oy * stride + ky - padding;
                                        let grow = &gplane[oy * ow..][..ow];
                                        let xbase = xoff + iy * w + kx;
                                        for ox in cols.clone() {
                                            let xi = xbase + ox * stride - padding;
                                            if want_x {
                                                gx[xi] += grow[ox] * wv;
                                            }
                                            acc += grow[ox] * x[xi];
                                        }
                                    }
                                    if want_k {
                                        gk[kidx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                let mut out = Vec::new();
                if want_x {
                    out.push((*input, gx));
                }
                if want_k {
                    out.push((*kernel, gk));
                }
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        let mut gb = vec![0.0; f];
                        for b in 0..n {
                            for (fi, g) in gb.iter_mut().enumerate() {
                                *g += gy[(b * f + fi) * oh * ow..][..oh * ow].iter().sum::<f64>();
                            }
                        }
                        out.push((*bv, gb));
                    }
                }
                out
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
