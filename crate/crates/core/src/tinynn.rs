//! Fully connected networks with rectifier hidden units, exact reverse-mode
//! gradients, AdamW with a step learning-rate schedule, and a flat binary
//! checkpoint format.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One affine map `y = W x + b`, with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer inputs recorded by [`Mlp::forward_cached`]. Entry `l` is the
/// input of layer `l`, i.e. the rectified output of layer `l - 1`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
    pub input: Array2<f64>,
}

impl Mlp {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = rng::rng(seed);
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    rng.random_range(-limit..=limit)
                });
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|d| Layer::zeros(d[0], d[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dims("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::dims(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(Error::dims(format!("layer {i}: input width mismatch")));
            }
            if !l.is_finite() {
                return Err(Error::Numerical(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(Self { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims(format!(
                "input width {} does not match network input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = affine(&self.layers[0], x);
        for layer in &self.layers[1..] {
            relu_inplace(&mut a);
            a = affine(layer, a.view());
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        let mut a = affine(&self.layers[0], x);
        for layer in &self.layers[1..] {
            relu_inplace(&mut a);
            let next = affine(layer, a.view());
            inputs.push(a);
            a = next;
        }
        Ok((a, ForwardCache { inputs }))
    }

    /// Parameter and input gradients given `dL/d(output)` for the cached batch.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<Gradients> {
        let batch = cache.inputs[0].nrows();
        if upstream.nrows() != batch || upstream.ncols() != self.output_dim() {
            return Err(Error::dims(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.nrows(),
                upstream.ncols(),
                batch,
                self.output_dim()
            )));
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[l];
            let weight = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Layer { weight, bias });
            let mut prev = delta.dot(&layer.weight);
            if l > 0 {
                Zip::from(&mut prev).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = prev;
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: delta,
        })
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.param_count() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let dims = self.dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let meta = CheckpointMeta {
            dims,
            ..meta.clone()
        };
        let text = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
        std::fs::write(&sidecar, text + "\n").map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
        let mut cur = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad checkpoint magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let n = u32_at(take(4)?) as usize;
        if !(2..=64).contains(&n) {
            return Err(bad("bad layer count"));
        }
        let dims = (0..n)
            .map(|_| take(4).map(|b| u32_at(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        check_dims(&dims).map_err(|_| bad("zero-width layer"))?;
        let mut layers = Vec::with_capacity(n - 1);
        for d in dims.windows(2) {
            let (fan_in, fan_out) = (d[0], d[1]);
            let mut read = |count: usize| -> Result<Vec<f64>> {
                let raw = take(count * 8)?;
                Ok(raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            };
            let weight = Array2::from_shape_vec((fan_out, fan_in), read(fan_in * fan_out)?)
                .expect("shape matches element count");
            let bias = Array1::from(read(fan_out)?);
            layers.push(Layer { weight, bias });
        }
        if !take(1).is_err() {
            return Err(bad("trailing bytes after parameters"));
        }
        Self::from_layers(layers)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::dims(format!("invalid layer widths {dims:?}")));
    }
    Ok(())
}

fn affine(layer: &Layer, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Forward pass on a freshly built cache followed by backward.
pub fn mlp_backward(net: &Mlp, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Gradients> {
    let (_, cache) = net.forward_cached(x)?;
    net.backward(&cache, upstream)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UOISMLP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// JSON sidecar written next to every checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// What the network computes, e.g. `"hdnet"` or `"hpg-head"`.
    pub kind: String,
    #[serde(default)]
    pub dims: Vec<usize>,
    pub train: TrainConfig,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub best_val_loss: Option<f64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let path = sidecar_path(checkpoint);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Fraction of samples held out for checkpoint selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 0.1,
            decay_every: 10,
            epochs: 30,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return bad("decay_every and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Step schedule: `lr * lr_decay^floor(epoch / decay_every)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m: Vec<Layer>,
    v: Vec<Layer>,
    step: u64,
}

impl AdamWState {
    pub fn new(net: &Mlp) -> Self {
        let zeros: Vec<Layer> = net
            .layers
            .iter()
            .map(|l| Layer::zeros(l.input_dim(), l.output_dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay applied to every parameter.
pub fn adamw_step(
    state: &mut AdamWState,
    net: &mut Mlp,
    grads: &[Layer],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != net.layers.len()
        || grads.iter().zip(&net.layers).any(|(g, l)| {
            g.weight.dim() != l.weight.dim() || g.bias.len() != l.bias.len()
        })
    {
        return Err(Error::dims("gradient shapes do not match the network"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient in layer {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps, wd) = (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr * wd * *p - lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((layer, m), v), g) in net
        .layers
        .iter_mut()
        .zip(&mut state.m)
        .zip(&mut state.v)
        .zip(grads)
    {
        Zip::from(&mut layer.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .and(&g.weight)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut layer.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}

/// A supervised problem that [`fit`] can minimise.
pub trait Objective {
    /// Number of training items; batches are index subsets of `0..train_len()`.
    fn train_len(&self) -> usize;

    /// Mean loss and its parameter gradients over `items`. `seed` drives any
    /// per-batch sampling.
    fn batch(&self, net: &Mlp, items: &[usize], seed: u64) -> Result<(f64, Vec<Layer>)>;

    fn validation_loss(&self, net: &Mlp) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub net: Mlp,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Mini-batch AdamW training with the step schedule, keeping the
/// lowest-validation-loss parameters (earliest epoch on ties).
pub fn fit(mut net: Mlp, objective: &impl Objective, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = objective.train_len();
    if n == 0 {
        return Err(Error::Sampling("no training items".into()));
    }
    let finite = |v: f64, what: &str| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!("{what} diverged ({v})")))
        }
    };
    let initial_val_loss = finite(objective.validation_loss(&net)?, "validation loss")?;
    let mut state = AdamWState::new(&net);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(usize, f64, Mlp)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let epoch_seed = rng::derive(cfg.seed, epoch as u64);
        order.shuffle(&mut rng::rng(epoch_seed));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, items) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = objective.batch(&net, items, rng::derive(epoch_seed, b as u64))?;
            total += finite(loss, "training loss")?;
            batches += 1;
            adamw_step(&mut state, &mut net, &grads, cfg, lr)?;
        }
        let train_loss = total / batches as f64;
        let val_loss = finite(objective.validation_loss(&net)?, "validation loss")?;
        log::debug!("epoch {epoch} lr {lr:e} train {train_loss:.6} val {val_loss:.6}");
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_loss < *v) {
            best = Some((epoch, val_loss, net.clone()));
        }
    }
    let (best_epoch, best_val_loss, net) = match best {
        Some(b) => b,
        None => (0, initial_val_loss, net),
    };
    Ok(TrainOutcome {
        net,
        best_epoch,
        best_val_loss,
        initial_val_loss,
        log,
    })
}

/// Seeded `(train, validation)` index split; validation gets
/// `round(n * fraction)` items but never all of them.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(seed));
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}
