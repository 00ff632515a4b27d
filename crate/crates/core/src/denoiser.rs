//! Time-conditioned MLP noise predictor.
//!
//! `[x, emb(t)] → Linear → SiLU → … → Linear → ε̂`, trained on the squeezed
//! noise target with mean squared error. Gradients are accumulated by hand
//! (reverse mode over the layer stack); the optimizer is Adam with bias
//! correction, and an EMA shadow of the weights is kept for sampling.
//!
//! All parameters live in one flat vector in layer order: for each layer the
//! weight matrix (out × in, row-major) followed by its bias.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::diffusion::{make_training_pair, DiffusionConfig, TrainingPair};
use crate::linalg::Matrix;
use crate::rng::{self, NoiseRng};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SQDMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Substream reserved for weight initialization; training step k uses substream k.
const INIT_STREAM: u64 = u64::MAX;

/// Anything that predicts squeezed noise from a squeezed state.
///
/// `t` is the training timestep (1-based) and `total_steps` the training T.
pub trait NoisePredictor {
    fn predict(&self, x: &[f64], t: usize, total_steps: usize) -> Result<Vec<f64>>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&[f64], usize, usize) -> Vec<f64>,
{
    fn predict(&self, x: &[f64], t: usize, total_steps: usize) -> Result<Vec<f64>> {
        Ok(self(x, t, total_steps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// x · sigmoid(x)
    Silu,
}

impl Activation {
    fn tag(self) -> u32 {
        match self {
            Activation::Silu => 0,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Silu),
            _ => None,
        }
    }

    #[inline]
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// State dimension D (also the output dimension).
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Sinusoidal time-embedding width (even).
    pub time_dim: usize,
    pub activation: Activation,
}

impl DenoiserConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        let c = Self { input_dim, hidden, time_dim: 32, activation: Activation::Silu };
        c.validate()?;
        Ok(c)
    }

    pub fn with_time_dim(mut self, time_dim: usize) -> Result<Self> {
        self.time_dim = time_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("denoiser input dimension must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("denoiser needs at least one nonempty hidden layer".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("time embedding width must be even and positive, got {}", self.time_dim)));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of each linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim + self.time_dim];
        dims.extend(&self.hidden);
        dims.push(self.input_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Sinusoidal embedding of the normalized time t/T.
///
/// The position is 1000·t/T so that schedules of different lengths share a
/// frequency range; the first half holds sines, the second cosines.
pub fn time_embedding(t: usize, total_steps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let pos = 1000.0 * t as f64 / total_steps.max(1) as f64;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (pos * freq).sin();
        out[half + k] = (pos * freq).cos();
    }
    out
}

/// Borrowed view of one weight set (live or EMA).
#[derive(Debug, Clone, Copy)]
pub struct Mlp<'a> {
    config: &'a DenoiserConfig,
    weights: &'a [f64],
}

struct Trace {
    // inputs to each layer (layer 0 input is [x, emb])
    inputs: Vec<Vec<f64>>,
    // pre-activations of hidden layers
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl<'a> Mlp<'a> {
    pub fn new(config: &'a DenoiserConfig, weights: &'a [f64]) -> Result<Self> {
        if weights.len() != config.num_params() {
            return Err(Error::DimensionMismatch { expected: config.num_params(), actual: weights.len() });
        }
        Ok(Self { config, weights })
    }

    fn run(&self, x: &[f64], t: usize, total_steps: usize) -> Result<Trace> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch { expected: self.config.input_dim, actual: x.len() });
        }
        let mut input = x.to_vec();
        input.extend(time_embedding(t, total_steps, self.config.time_dim));
        let shapes = self.config.layer_shapes();
        let last = shapes.len() - 1;
        let mut inputs = Vec::with_capacity(shapes.len());
        let mut pre = Vec::with_capacity(last);
        let mut offset = 0;
        for (layer, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.weights[offset..offset + fan_in * fan_out];
            let b = &self.weights[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let z: Vec<f64> = w
                .chunks_exact(fan_in)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(&input).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer });
            }
            inputs.push(input);
            if layer == last {
                return Ok(Trace { inputs, pre, output: z });
            }
            input = z.iter().map(|&v| self.config.activation.eval(v)).collect();
            pre.push(z);
        }
        unreachable!("layer stack is never empty")
    }

    pub fn forward(&self, x: &[f64], t: usize, total_steps: usize) -> Result<Vec<f64>> {
        Ok(self.run(x, t, total_steps)?.output)
    }

    /// Backpropagates `cotangent` (∂L/∂output) through one forward pass,
    /// accumulating parameter gradients into `grads` and returning ∂L/∂x.
    fn backward(&self, trace: &Trace, cotangent: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let shapes = self.config.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(i, o) in &shapes {
            offsets.push(acc);
            acc += i * o + o;
        }
        let mut delta = cotangent.to_vec();
        for layer in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[layer];
            let off = offsets[layer];
            let input = &trace.inputs[layer];
            {
                let (gw, gb) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            let w = &self.weights[off..off + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for (o, &d) in delta.iter().enumerate() {
                for (p, &wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += wv * d;
                }
            }
            if layer > 0 {
                for (p, &z) in prev.iter_mut().zip(&trace.pre[layer - 1]) {
                    *p *= self.config.activation.derivative(z);
                }
            }
            delta = prev;
        }
        delta.truncate(self.config.input_dim);
        delta
    }

    /// uᵀ J_x f(x, t): the vector-Jacobian product with respect to the input.
    pub fn input_vjp(&self, x: &[f64], t: usize, total_steps: usize, u: &[f64]) -> Result<Vec<f64>> {
        let trace = self.run(x, t, total_steps)?;
        if u.len() != trace.output.len() {
            return Err(Error::DimensionMismatch { expected: trace.output.len(), actual: u.len() });
        }
        let mut scratch = vec![0.0; self.weights.len()];
        Ok(self.backward(&trace, u, &mut scratch))
    }

    /// Mean squared error over batch and dimensions, and its gradient with
    /// respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[TrainingPair], total_steps: usize) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let d = self.config.input_dim;
        let norm = 1.0 / (batch.len() * d) as f64;
        let mut grads = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        for pair in batch {
            if pair.target.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: pair.target.len() });
            }
            let trace = self.run(&pair.x_t_sq, pair.t, total_steps)?;
            let mut cot = vec![0.0; d];
            for ((c, p), y) in cot.iter_mut().zip(&trace.output).zip(&pair.target) {
                let r = p - y;
                loss += r * r;
                *c = 2.0 * r * norm;
            }
            self.backward(&trace, &cot, &mut grads);
        }
        Ok((loss * norm, grads))
    }
}

impl NoisePredictor for Mlp<'_> {
    fn predict(&self, x: &[f64], t: usize, total_steps: usize) -> Result<Vec<f64>> {
        self.forward(x, t, total_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Live weights, EMA shadow, Adam moments and the optimizer step count.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    weights: Vec<f64>,
    ema: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step: u64,
}

impl DenoiserParams {
    /// Glorot-uniform weights from substream `u64::MAX` of `seed`, zero biases.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, INIT_STREAM);
        let mut weights = Vec::with_capacity(config.num_params());
        for (fan_in, fan_out) in config.layer_shapes() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.extend((0..fan_in * fan_out).map(|_| r.random_range(-limit..limit)));
            weights.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self::from_weights(config, weights))
    }

    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_params();
        Ok(Self::from_weights(config, vec![0.0; n]))
    }

    fn from_weights(config: DenoiserConfig, weights: Vec<f64>) -> Self {
        let n = weights.len();
        Self { config, ema: weights.clone(), weights, adam_m: vec![0.0; n], adam_v: vec![0.0; n], step: 0 }
    }

    /// Replaces the live weights (shadow untouched).
    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::DimensionMismatch { expected: self.weights.len(), actual: weights.len() });
        }
        self.weights = weights;
        Ok(())
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ema_weights(&self) -> &[f64] {
        &self.ema
    }

    pub fn adam_moments(&self) -> (&[f64], &[f64]) {
        (&self.adam_m, &self.adam_v)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn live(&self) -> Mlp<'_> {
        Mlp { config: &self.config, weights: &self.weights }
    }

    pub fn ema(&self) -> Mlp<'_> {
        Mlp { config: &self.config, weights: &self.ema }
    }

    /// One Adam update. Refuses (and leaves everything untouched) if any
    /// gradient is non-finite.
    pub fn adam_step(&mut self, grads: &[f64], lr: f64, adam: AdamConfig) -> Result<()> {
        if grads.len() != self.weights.len() {
            return Err(Error::DimensionMismatch { expected: self.weights.len(), actual: grads.len() });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let bc1 = 1.0 - adam.beta1.powf(self.step as f64);
        let bc2 = 1.0 - adam.beta2.powf(self.step as f64);
        for (((w, m), v), &g) in self.weights.iter_mut().zip(&mut self.adam_m).zip(&mut self.adam_v).zip(grads) {
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + adam.eps);
        }
        Ok(())
    }

    /// shadow ← decay·shadow + (1 − decay)·live
    pub fn ema_update(&mut self, decay: f64) {
        for (s, &w) in self.ema.iter_mut().zip(&self.weights) {
            *s = decay * *s + (1.0 - decay) * w;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.weights.len();
        let mut out = Vec::with_capacity(40 + 4 * self.config.hidden.len() + 32 * p);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.time_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.config.activation.tag().to_le_bytes());
        out.extend_from_slice(&(self.config.hidden.len() as u32).to_le_bytes());
        for &h in &self.config.hidden {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&(p as u64).to_le_bytes());
        for block in [&self.weights, &self.ema, &self.adam_m, &self.adam_v] {
            for x in block.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::parse(path, 0, "not a denoiser checkpoint (bad magic)"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                path,
                8,
                format!("checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let input_dim = cur.u32()? as usize;
        let time_dim = cur.u32()? as usize;
        let tag_pos = cur.pos as u64;
        let activation = Activation::from_tag(cur.u32()?)
            .ok_or_else(|| Error::parse(path, tag_pos, "unknown activation tag"))?;
        let layers = cur.u32()? as usize;
        let hidden = (0..layers).map(|_| cur.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
        let config = DenoiserConfig { input_dim, hidden, time_dim, activation };
        config.validate().map_err(|e| Error::parse(path, 12, e.to_string()))?;
        let count_pos = cur.pos as u64;
        let p = cur.u64()? as usize;
        if p != config.num_params() {
            return Err(Error::parse(
                path,
                count_pos,
                format!("parameter count {p} does not match config ({})", config.num_params()),
            ));
        }
        let mut block = || -> Result<Vec<f64>> { (0..p).map(|_| cur.f64()).collect() };
        let weights = block()?;
        let ema = block()?;
        let adam_m = block()?;
        let adam_v = block()?;
        let step = cur.u64()?;
        if cur.pos != bytes.len() {
            return Err(Error::parse(path, cur.pos as u64, format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self { config, weights, ema, adam_m, adam_v, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.path,
                self.pos as u64,
                format!("truncated: need {n} more bytes, {} available", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Total optimizer steps; training resumes from the params' step count.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Upper bound of the warmed-up EMA decay, see [`ema_decay_at`].
    pub ema_decay: f64,
    /// Trace granularity: one (step, mean loss over the window) entry per `log_every` steps.
    pub log_every: u64,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            ema_decay: 0.9999,
            log_every: 100,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub trace: Vec<(u64, f64)>,
}

/// EMA decay used after optimizer step `step`: `min(max_decay, (1 + step)/(10 + step))`.
///
/// The warmup keeps short runs from sampling with weights that are still
/// mostly the random initialization.
pub fn ema_decay_at(max_decay: f64, step: u64) -> f64 {
    max_decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

/// Trains a freshly initialized denoiser (init seed = `opts.seed`).
pub fn train(
    dataset: &Matrix,
    diffusion: &DiffusionConfig,
    config: DenoiserConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let params = DenoiserParams::init(config, opts.seed)?;
    resume_training(params, dataset, diffusion, opts)
}

/// Continues training `params` until `opts.steps` total optimizer steps.
///
/// Step k draws everything (batch rows, timesteps, noise) from substream k of
/// `opts.seed`, so stopping and resuming from a checkpoint reproduces an
/// uninterrupted run bit for bit.
pub fn resume_training(
    mut params: DenoiserParams,
    dataset: &Matrix,
    diffusion: &DiffusionConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let d = diffusion.data_dim();
    if dataset.cols() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: dataset.cols() });
    }
    if params.config.input_dim != d {
        return Err(Error::DimensionMismatch { expected: d, actual: params.config.input_dim });
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let total = diffusion.schedule().len();
    let log_every = opts.log_every.max(1);
    let mut trace = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0u64;
    while params.step < opts.steps {
        let k = params.step + 1;
        let mut r: NoiseRng = rng::stream(opts.seed, k);
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let row = r.random_range(0..dataset.rows());
            let t = r.random_range(1..=total);
            batch.push(make_training_pair(diffusion, dataset.row(row), t, &mut r)?);
        }
        let (loss, grads) = match params.live().loss_and_grad(&batch, total) {
            Ok(v) => v,
            Err(Error::NonFiniteActivation { .. }) => (f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step: k, loss, trace });
        }
        match params.adam_step(&grads, opts.lr, opts.adam) {
            Err(Error::NonFiniteGradient) => return Err(Error::Diverged { step: k, loss, trace }),
            other => other?,
        }
        params.ema_update(ema_decay_at(opts.ema_decay, k));
        window += loss;
        window_len += 1;
        if k.is_multiple_of(log_every) || k == opts.steps {
            trace.push((k, window / window_len as f64));
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome { params, trace })
}
