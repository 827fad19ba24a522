//! Small fully connected policy network: tanh hidden layers, linear output,
//! MSE loss, backpropagation and ADAM.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default architecture: 310 inputs, two hidden layers of 32, 3 outputs.
pub const POLICY_SIZES: [usize; 4] = [310, 32, 32, 3];

/// Affine layer `y = W x + b`; `W` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self { w: DMatrix::zeros(self.w.nrows(), self.w.ncols()), b: DVector::zeros(self.b.len()) }
    }
}

/// Affine standardisation applied on entry (`(x - mean) / scale`) and
/// undone on exit.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub in_mean: DVector<f64>,
    pub in_scale: DVector<f64>,
    pub out_mean: DVector<f64>,
    pub out_scale: DVector<f64>,
}

impl Normalization {
    pub fn identity(n_in: usize, n_out: usize) -> Self {
        Self {
            in_mean: DVector::zeros(n_in),
            in_scale: DVector::from_element(n_in, 1.0),
            out_mean: DVector::zeros(n_out),
            out_scale: DVector::from_element(n_out, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpPolicy {
    pub sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub norm: Normalization,
}

/// Parameter gradients, shaped like the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

/// Values kept from the forward pass for backpropagation. `acts[0]` is the
/// (normalised) input and `acts[l + 1]` the output of layer `l`.
struct Trace {
    acts: Vec<DMatrix<f64>>,
}

impl MlpPolicy {
    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(())
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|p| Layer { w: DMatrix::zeros(p[1], p[0]), b: DVector::zeros(p[1]) })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
            norm: Normalization::identity(sizes[0], *sizes.last().unwrap()),
        })
    }

    /// Glorot-uniform weights, zero biases, identity normalisation.
    pub fn glorot(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let (fan_out, fan_in) = layer.w.shape();
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in layer.w.iter_mut() {
                *v = rng.random_range(-lim..lim);
            }
        }
        Ok(net)
    }

    pub fn n_in(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_out(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward pass in normalised space; columns are samples.
    fn trace(&self, x: DMatrix<f64>) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        Trace { acts }
    }

    /// Network output for normalised inputs (columns are samples).
    pub fn forward_normalized(&self, x: DMatrix<f64>) -> DMatrix<f64> {
        self.trace(x).acts.pop().unwrap()
    }

    /// Policy output in physical units for a single input.
    pub fn forward(&self, input: &[f64]) -> Result<DVector<f64>> {
        let out = self.forward_batch(&[input])?;
        Ok(out.column(0).into_owned())
    }

    /// Policy outputs for several inputs; column `i` belongs to `inputs[i]`.
    pub fn forward_batch(&self, inputs: &[&[f64]]) -> Result<DMatrix<f64>> {
        let n_in = self.n_in();
        let mut x = DMatrix::zeros(n_in, inputs.len());
        for (c, inp) in inputs.iter().enumerate() {
            if inp.len() != n_in {
                return Err(Error::DimensionMismatch { expected: n_in, got: inp.len() });
            }
            if inp.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("policy input is not finite".into()));
            }
            for r in 0..n_in {
                x[(r, c)] = (inp[r] - self.norm.in_mean[r]) / self.norm.in_scale[r];
            }
        }
        let mut y = self.forward_normalized(x);
        for mut col in y.column_iter_mut() {
            col.component_mul_assign(&self.norm.out_scale);
            col += &self.norm.out_mean;
        }
        Ok(y)
    }

    /// Mean over the batch of `||f(x) - y||^2` and its parameter gradient.
    /// Inputs and targets are in the network's (normalised) space, one
    /// sample per column.
    pub fn mse_and_gradient(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Gradients) {
        let batch = x.ncols().max(1) as f64;
        let trace = self.trace(x.clone());
        let out = trace.acts.last().unwrap();
        let diff = out - y;
        let loss = diff.norm_squared() / batch;

        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let mut delta = diff * (2.0 / batch);
        for l in (0..self.layers.len()).rev() {
            let a_prev = &trace.acts[l];
            grads[l].w = &delta * a_prev.transpose();
            grads[l].b = delta.column_sum();
            if l > 0 {
                let mut back = self.layers[l].w.tr_mul(&delta);
                back.zip_apply(a_prev, |d: &mut f64, a: f64| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        (loss, Gradients { layers: grads })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("#mlpfmt=1\n");
        let line = |v: &mut dyn Iterator<Item = f64>| -> String {
            v.map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ") + "\n"
        };
        s.push_str(&self.sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" "));
        s.push('\n');
        for layer in &self.layers {
            for r in 0..layer.w.nrows() {
                s.push_str(&line(&mut layer.w.row(r).iter().copied()));
            }
            s.push_str(&line(&mut layer.b.iter().copied()));
        }
        for v in [&self.norm.in_mean, &self.norm.in_scale, &self.norm.out_mean, &self.norm.out_scale] {
            s.push_str(&line(&mut v.iter().copied()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::FormatVersionMismatch(m);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("#mlpfmt=1") {
            return Err(bad("expected '#mlpfmt=1' header".into()));
        }
        let sizes: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("missing layer sizes".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("layer sizes: {e}")))?;
        Self::check_sizes(&sizes).map_err(|e| bad(e.to_string()))?;
        let mut row = |expect: usize, what: &str| -> Result<Vec<f64>> {
            let l = lines.next().ok_or_else(|| bad(format!("truncated file at {what}")))?;
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("{what}: {e}")))?;
            if v.len() != expect {
                return Err(bad(format!("{what}: expected {expect} values, found {}", v.len())));
            }
            Ok(v)
        };
        let mut net = Self::zeros(&sizes)?;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (n_out, n_in) = layer.w.shape();
            for r in 0..n_out {
                let v = row(n_in, &format!("layer {l} weight row {r}"))?;
                layer.w.set_row(r, &nalgebra::RowDVector::from_vec(v));
            }
            layer.b = DVector::from_vec(row(n_out, &format!("layer {l} bias"))?);
        }
        let (n_in, n_out) = (net.n_in(), net.n_out());
        net.norm.in_mean = DVector::from_vec(row(n_in, "input mean")?);
        net.norm.in_scale = DVector::from_vec(row(n_in, "input scale")?);
        net.norm.out_mean = DVector::from_vec(row(n_out, "output mean")?);
        net.norm.out_scale = DVector::from_vec(row(n_out, "output scale")?);
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing data after normalization vectors".into()));
        }
        if net.norm.in_scale.iter().chain(net.norm.out_scale.iter()).any(|s| !(*s > 0.0)) {
            return Err(bad("normalization scales must be positive".into()));
        }
        Ok(net)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Cosine decay from `lr` to this value over the run; constant `lr`
    /// when absent.
    pub lr_final: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Standardise inputs and targets with dataset statistics.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, lr_final: Some(1e-5), epochs: 15, batch_size: 256, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 1, normalize: true }
    }
}

/// First and second moment estimates of ADAM.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
    pub t: u64,
}

impl AdamState {
    pub fn new(net: &MlpPolicy) -> Self {
        let z: Vec<Layer> = net.layers.iter().map(Layer::zeros_like).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }
}

/// Bias-corrected ADAM update of every parameter.
pub fn adam_step(net: &mut MlpPolicy, grads: &Gradients, st: &mut AdamState, cfg: &TrainConfig) {
    st.t += 1;
    let t = st.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    };
    for l in 0..net.layers.len() {
        let (layer, g) = (&mut net.layers[l], &grads.layers[l]);
        update(layer.w.as_mut_slice(), g.w.as_slice(), st.m[l].w.as_mut_slice(), st.v[l].w.as_mut_slice());
        update(layer.b.as_mut_slice(), g.b.as_slice(), st.m[l].b.as_mut_slice(), st.v[l].b.as_mut_slice());
    }
}

/// Row access to a supervised data set without materialising it.
pub trait Samples {
    fn len(&self) -> usize;
    fn n_in(&self) -> usize;
    fn n_out(&self) -> usize;
    fn write_input(&self, i: usize, out: &mut [f64]);
    fn write_target(&self, i: usize, out: &mut [f64]);
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Plain in-memory rows.
#[derive(Clone, Debug, Default)]
pub struct DenseSamples {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Samples for DenseSamples {
    fn len(&self) -> usize {
        self.inputs.len()
    }
    fn n_in(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
    fn n_out(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }
    fn write_input(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.inputs[i]);
    }
    fn write_target(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.targets[i]);
    }
}

/// Per-feature mean and standard deviation; scales below `1e-8` are
/// replaced by one so constant features pass through unchanged.
pub fn dataset_normalization(data: &dyn Samples) -> Normalization {
    let (n_in, n_out) = (data.n_in(), data.n_out());
    let mut sum_in = DVector::zeros(n_in);
    let mut sq_in = DVector::zeros(n_in);
    let mut sum_out = DVector::zeros(n_out);
    let mut sq_out = DVector::zeros(n_out);
    let mut xi = vec![0.0; n_in];
    let mut yi = vec![0.0; n_out];
    for i in 0..data.len() {
        data.write_input(i, &mut xi);
        data.write_target(i, &mut yi);
        for (k, v) in xi.iter().enumerate() {
            sum_in[k] += v;
            sq_in[k] += v * v;
        }
        for (k, v) in yi.iter().enumerate() {
            sum_out[k] += v;
            sq_out[k] += v * v;
        }
    }
    let n = data.len().max(1) as f64;
    let stats = |sum: DVector<f64>, sq: DVector<f64>| {
        let mean = sum / n;
        let var = (sq / n) - mean.component_mul(&mean);
        let scale = var.map(|v| {
            let s = v.max(0.0).sqrt();
            if s < 1e-8 {
                1.0
            } else {
                s
            }
        });
        (mean, scale)
    };
    let (in_mean, in_scale) = stats(sum_in, sq_in);
    let (out_mean, out_scale) = stats(sum_out, sq_out);
    Normalization { in_mean, in_scale, out_mean, out_scale }
}

/// Normalised input and target matrices for the given rows.
pub fn normalized_batch(net: &MlpPolicy, data: &dyn Samples, rows: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n_in, n_out) = (net.n_in(), net.n_out());
    let mut x = DMatrix::zeros(n_in, rows.len());
    let mut y = DMatrix::zeros(n_out, rows.len());
    let mut xi = vec![0.0; n_in];
    let mut yi = vec![0.0; n_out];
    for (c, &i) in rows.iter().enumerate() {
        data.write_input(i, &mut xi);
        data.write_target(i, &mut yi);
        for r in 0..n_in {
            x[(r, c)] = (xi[r] - net.norm.in_mean[r]) / net.norm.in_scale[r];
        }
        for r in 0..n_out {
            y[(r, c)] = (yi[r] - net.norm.out_mean[r]) / net.norm.out_scale[r];
        }
    }
    (x, y)
}

/// Mean loss over the whole data set in the network's output space.
pub fn dataset_loss(net: &MlpPolicy, data: &dyn Samples, batch: usize) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = normalized_batch(net, data, chunk);
        total += (net.forward_normalized(x) - y).norm_squared();
    }
    total / data.len().max(1) as f64
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Learning rate of ADAM step `step` out of `total`.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.lr_final {
        None => cfg.lr,
        Some(end) => {
            let frac = step as f64 / total.max(1) as f64;
            end + 0.5 * (cfg.lr - end) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Trains `net` in place with shuffled minibatches. The loss is measured
/// in the normalised output space.
pub fn train_from(net: &mut MlpPolicy, data: &dyn Samples, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.n_in() != net.n_in() || data.n_out() != net.n_out() {
        return Err(Error::DimensionMismatch { expected: net.n_in(), got: data.n_in() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut st = AdamState::new(net);
    let mut report = TrainReport { initial_loss: dataset_loss(net, data, cfg.batch_size), ..Default::default() };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total = cfg.epochs * data.len().div_ceil(cfg.batch_size.max(1));
    let mut step_cfg = cfg.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, y) = normalized_batch(net, data, chunk);
            let (loss, grads) = net.mse_and_gradient(&x, &y);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(epoch));
            }
            step_cfg.lr = learning_rate(cfg, report.steps, total);
            adam_step(net, &grads, &mut st, &step_cfg);
            sum += loss * chunk.len() as f64;
            report.steps += 1;
        }
        report.epoch_losses.push(sum / data.len() as f64);
    }
    report.final_loss = dataset_loss(net, data, cfg.batch_size);
    if !report.final_loss.is_finite() {
        return Err(Error::NonFiniteLoss(cfg.epochs));
    }
    Ok(report)
}

/// Fresh network of the given sizes trained on `data`.
pub fn train(data: &dyn Samples, sizes: &[usize], cfg: &TrainConfig) -> Result<(MlpPolicy, TrainReport)> {
    let mut net = MlpPolicy::glorot(sizes, cfg.seed)?;
    if cfg.normalize {
        net.norm = dataset_normalization(data);
    }
    let report = train_from(&mut net, data, cfg)?;
    Ok((net, report))
}

/// Largest relative error between the backpropagated gradient and central
/// differences with step `h`, per layer. The relative error of an entry is
/// `|g - fd| / max(|g| + |fd|, 1e-7)`.
pub fn gradient_check(net: &MlpPolicy, x: &DMatrix<f64>, y: &DMatrix<f64>, h: f64) -> Vec<f64> {
    let (_, grads) = net.mse_and_gradient(x, y);
    let loss_at = |n: &MlpPolicy| n.mse_and_gradient(x, y).0;
    let mut out = Vec::new();
    for l in 0..net.layers.len() {
        let mut worst: f64 = 0.0;
        let mut probe = net.clone();
        let n_w = net.layers[l].w.len();
        for i in 0..n_w + net.layers[l].b.len() {
            let get = |n: &mut MlpPolicy| -> *mut f64 {
                if i < n_w {
                    &mut n.layers[l].w.as_mut_slice()[i] as *mut f64
                } else {
                    &mut n.layers[l].b.as_mut_slice()[i - n_w] as *mut f64
                }
            };
            let ptr = get(&mut probe);
            // SAFETY: `ptr` points into `probe`, which outlives this block
            // and is not otherwise borrowed while the pointer is used.
            let orig = unsafe { *ptr };
            unsafe { *ptr = orig + h };
            let lp = loss_at(&probe);
            unsafe { *ptr = orig - h };
            let lm = loss_at(&probe);
            unsafe { *ptr = orig };
            let fd = (lp - lm) / (2.0 * h);
            let g = if i < n_w { grads.layers[l].w.as_slice()[i] } else { grads.layers[l].b[i - n_w] };
            let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        out.push(worst);
    }
    out
}
