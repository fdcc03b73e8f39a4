//! Small classifier architectures, per-model SGD with momentum, and the
//! binary checkpoint format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Flatten → Dense(256) → ReLU → Dense(128) → ReLU → Dense(K)
    Mlp,
    /// Conv(16) → ReLU → Conv(16) → ReLU → Flatten → Dense(K)
    Cnn,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "cnn" => Ok(Arch::Cnn),
            other => Err(Error::config(format!("unsupported architecture `{other}` (expected mlp or cnn)"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `y = x·W + b` with `W` stored as `[in × out]`.
    Dense { weight: Tensor, bias: Tensor },
    /// 3×3 same-padding convolution, kernel `[F × C × 3 × 3]`, no bias.
    Conv { kernel: Tensor },
    Relu,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

#[derive(Clone, Copy)]
enum Params<'a> {
    Fresh(bool),
    Shared(&'a [Var]),
}

/// Output of [`Model::forward`]: the logits node and one node per parameter
/// tensor, in [`Model::params`] order.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl Model {
    /// Builds one of the reference architectures with He-normal weights.
    pub fn init(arch: Arch, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        match arch {
            Arch::Mlp => Self::mlp(input_shape, &[256, 128], num_classes, seed),
            Arch::Cnn => Self::cnn(input_shape, &[16, 16], num_classes, seed),
        }
    }

    /// Flatten followed by `hidden` Dense+ReLU blocks and a Dense head.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![Layer::Flatten];
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            layers.push(dense(&mut rng, width, h)?);
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(dense(&mut rng, width, num_classes)?);
        Self::from_layers(layers, input_shape.to_vec(), num_classes)
    }

    /// Conv+ReLU blocks with the given channel counts, then Flatten and a
    /// Dense head. `input_shape` must be `[C, H, W]`.
    pub fn cnn(input_shape: &[usize], channels: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let [c, h, w] = *input_shape else {
            return Err(Error::config(format!(
                "cnn needs a [C, H, W] input shape, got {input_shape:?}"
            )));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_ch = c;
        for &f in channels {
            let fan_in = in_ch * 9;
            let kernel = he_normal(&mut rng, vec![f, in_ch, 3, 3], fan_in)?;
            layers.push(Layer::Conv { kernel });
            layers.push(Layer::Relu);
            in_ch = f;
        }
        layers.push(Layer::Flatten);
        layers.push(dense(&mut rng, in_ch * h * w, num_classes)?);
        Self::from_layers(layers, input_shape.to_vec(), num_classes)
    }

    /// Validates that `layers` compose from `input_shape` to `num_classes` logits.
    pub fn from_layers(layers: Vec<Layer>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = match layer {
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Relu => shape,
                Layer::Dense { weight, bias } => {
                    let [fan_in, out] = *weight.shape() else {
                        return Err(Error::dim(format!("layer {i}: dense weight must be 2-D")));
                    };
                    if shape != [fan_in] || bias.shape() != [out] {
                        return Err(Error::dim(format!(
                            "layer {i}: dense {:?}+{:?} does not accept input {shape:?}",
                            weight.shape(),
                            bias.shape()
                        )));
                    }
                    vec![out]
                }
                Layer::Conv { kernel } => match (kernel.shape(), shape.as_slice()) {
                    (&[f, kc, 3, 3], &[c, h, w]) if kc == c => vec![f, h, w],
                    _ => {
                        return Err(Error::dim(format!(
                            "layer {i}: conv kernel {:?} does not accept input {shape:?}",
                            kernel.shape()
                        )))
                    }
                },
            };
        }
        if shape != [num_classes] {
            return Err(Error::dim(format!(
                "model output {shape:?} does not match {num_classes} classes"
            )));
        }
        let model = Self {
            layers,
            input_shape,
            num_classes,
        };
        if !model.params().all(Tensor::all_finite) {
            return Err(Error::input("model parameters must be finite"));
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| match l {
            Layer::Dense { weight, bias } => vec![weight, bias],
            Layer::Conv { kernel } => vec![kernel],
            Layer::Relu | Layer::Flatten => vec![],
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| match l {
            Layer::Dense { weight, bias } => vec![weight, bias],
            Layer::Conv { kernel } => vec![kernel],
            Layer::Relu | Layer::Flatten => vec![],
        })
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params().flat_map(|p| p.values()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Records the forward pass of `x` (shape `[N, ..input_shape]`) on `g`.
    /// With `track_params`, parameters become gradient-tracked leaves.
    pub fn forward(&self, g: &mut Graph, x: Var, track_params: bool) -> Result<Forward> {
        self.forward_impl(g, x, Params::Fresh(track_params))
    }

    /// Forward pass reusing parameter nodes from an earlier [`Model::forward`]
    /// on the same graph, so gradients from both passes accumulate together.
    pub fn forward_with(&self, g: &mut Graph, x: Var, params: &[Var]) -> Result<Var> {
        let count = self.params().count();
        if params.len() != count {
            return Err(Error::usage(format!(
                "{} parameter nodes for a model with {count} parameter tensors",
                params.len()
            )));
        }
        Ok(self.forward_impl(g, x, Params::Shared(params))?.logits)
    }

    fn forward_impl(&self, g: &mut Graph, x: Var, source: Params<'_>) -> Result<Forward> {
        let xs = g.shape(x);
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "input {:?} does not match model input [N, {:?}]",
                xs, self.input_shape
            )));
        }
        let n = xs[0];
        let mut params = Vec::new();
        let mut param = |g: &mut Graph, t: &Tensor| {
            let v = match source {
                Params::Shared(shared) => shared[params.len()],
                Params::Fresh(track) => {
                    let copy = Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("same shape");
                    if track {
                        g.leaf(copy.with_requires_grad(true))
                    } else {
                        g.constant(copy)
                    }
                }
            };
            params.push(v);
            v
        };
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Flatten => {
                    let width = g.value(h).len() / n.max(1);
                    g.reshape(h, vec![n, width])?
                }
                Layer::Relu => g.relu(h),
                Layer::Dense { weight, bias } => {
                    let w = param(g, weight);
                    let b = param(g, bias);
                    let z = g.matmul(h, w)?;
                    g.add_bias(z, b)?
                }
                Layer::Conv { kernel } => {
                    let k = param(g, kernel);
                    g.conv2d(h, k)?
                }
            };
        }
        Ok(Forward { logits: h, params })
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Moves gradients computed on `g` into the parameters' `grad` slots.
    pub fn absorb_grads(&mut self, g: &mut Graph, params: &[Var]) -> Result<()> {
        let count = self.params().count();
        if params.len() != count {
            return Err(Error::usage(format!(
                "{} parameter nodes for a model with {count} parameter tensors",
                params.len()
            )));
        }
        for (p, &v) in self.params_mut().zip(params) {
            let grad = g
                .take_grad(v)
                .ok_or_else(|| Error::usage("parameter node has no gradient; was backward run?"))?;
            p.set_grad(grad)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Encodes the model in the little-endian checkpoint layout:
    /// `"CEAT"`, `u32` version, `u32` layer count, then per layer a `u8` tag,
    /// `u32` rank, `u32` dims and raw `f64` data, then a CRC32 of all
    /// preceding bytes.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.layers.len() as u32);
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    out.push(TAG_DENSE);
                    put_dims(&mut out, weight.shape());
                    put_f64s(&mut out, weight.values());
                    put_f64s(&mut out, bias.values());
                    shape = vec![weight.shape()[1]];
                }
                Layer::Conv { kernel } => {
                    out.push(TAG_CONV);
                    put_dims(&mut out, kernel.shape());
                    put_f64s(&mut out, kernel.values());
                    shape[0] = kernel.shape()[0];
                }
                Layer::Relu => {
                    out.push(TAG_RELU);
                    put_dims(&mut out, &[]);
                }
                Layer::Flatten => {
                    out.push(TAG_FLATTEN);
                    put_dims(&mut out, &shape);
                    shape = vec![shape.iter().product()];
                }
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format(format!(
                "checkpoint truncated at byte offset {}: header needs 16 bytes",
                bytes.len()
            )));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("bad checkpoint magic at byte offset 0"));
        }
        let version_at = r.pos;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version} at byte offset {version_at} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        let mut flatten_dims = Vec::new();
        for _ in 0..count {
            let tag_at = r.pos;
            let tag = r.take(1)?[0];
            let dims = r.dims()?;
            let layer = match tag {
                TAG_DENSE => {
                    let [fan_in, out] = *dims.as_slice() else {
                        return Err(Error::format(format!("dense layer at byte offset {tag_at} has rank {}", dims.len())));
                    };
                    let weight = Tensor::new(dims.clone(), r.f64s(fan_in * out)?)?;
                    let bias = Tensor::new(vec![out], r.f64s(out)?)?;
                    Layer::Dense { weight, bias }
                }
                TAG_CONV => {
                    let n = dims.iter().product();
                    Layer::Conv {
                        kernel: Tensor::new(dims, r.f64s(n)?)?,
                    }
                }
                TAG_RELU => Layer::Relu,
                TAG_FLATTEN => {
                    if flatten_dims.is_empty() {
                        flatten_dims = dims;
                    }
                    Layer::Flatten
                }
                other => {
                    return Err(Error::format(format!("unknown layer tag {other} at byte offset {tag_at}")));
                }
            };
            layers.push(layer);
        }
        if r.pos != body.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after layer data at byte offset {}",
                body.len() - r.pos,
                r.pos
            )));
        }
        let actual = crc32fast::hash(body);
        if actual != stored {
            return Err(Error::format(format!(
                "checkpoint CRC mismatch at byte offset {}: stored {stored:08x}, computed {actual:08x}",
                body.len()
            )));
        }
        let input_shape = match layers.first() {
            Some(Layer::Flatten) => flatten_dims,
            Some(Layer::Conv { kernel }) => match flatten_dims.as_slice() {
                [_, h, w] => vec![kernel.shape()[1], *h, *w],
                _ => return Err(Error::format("conv model without a spatial flatten layer")),
            },
            _ => return Err(Error::format("checkpoint must start with a flatten or conv layer")),
        };
        let num_classes = match layers.iter().rev().find_map(|l| match l {
            Layer::Dense { bias, .. } => Some(bias.len()),
            _ => None,
        }) {
            Some(k) => k,
            None => return Err(Error::format("checkpoint has no dense output layer")),
        };
        Self::from_layers(layers, input_shape, num_classes)
            .map_err(|e| Error::format(format!("inconsistent checkpoint layers: {e}")))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CEAT";
const CHECKPOINT_VERSION: u32 = 1;
const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_FLATTEN: u8 = 4;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(format!(
                "checkpoint truncated at byte offset {}: needed {n} more bytes",
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let at = self.pos;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(format!("implausible rank {rank} at byte offset {at}")));
        }
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format("layer size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::input(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

fn dense(rng: &mut ChaCha8Rng, fan_in: usize, out: usize) -> Result<Layer> {
    Ok(Layer::Dense {
        weight: he_normal(rng, vec![fan_in, out], fan_in)?,
        bias: Tensor::zeros(&[out]),
    })
}

/// SGD with heavy-ball momentum and a milestone learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
    schedule: Vec<(usize, f64)>,
    epoch: usize,
    clip_norm: Option<f64>,
}

impl SgdState {
    pub fn new(model: &Model, learning_rate: f64, momentum: f64, schedule: Vec<(usize, f64)>) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: model.params().map(|p| vec![0.0; p.len()]).collect(),
            schedule,
            epoch: 0,
            clip_norm: None,
        })
    }

    /// Rescales each step's gradient so its global L2 norm is at most `max_norm`.
    pub fn with_clip_norm(mut self, max_norm: Option<f64>) -> Result<Self> {
        if let Some(c) = max_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("gradient clip norm must be positive, got {c}")));
            }
        }
        self.clip_norm = max_norm;
        Ok(self)
    }

    pub fn clip_norm(&self) -> Option<f64> {
        self.clip_norm
    }

    pub fn base_learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Base rate times every schedule factor whose milestone is `<= epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(milestone, _)| *milestone <= epoch)
            .fold(self.learning_rate, |lr, (_, f)| lr * f)
    }

    /// `v ← momentum·v + g; w ← w − lr·v`, then clears the gradients.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        let lr = self.lr_at_epoch(self.epoch);
        if model.params().any(|p| p.grad().is_none()) {
            return Err(Error::usage("sgd step called before gradients were populated"));
        }
        if self.velocity.len() != model.params().count() {
            return Err(Error::usage("optimizer state does not belong to this model"));
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = model
                    .params()
                    .map(|p| p.grad().expect("checked above").iter().map(|g| g * g).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for (p, v) in model.params_mut().zip(self.velocity.iter_mut()) {
            let g = p.take_grad().expect("checked above");
            for ((w, vel), gv) in p.values_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = self.momentum * *vel + scale * gv;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

/// ×0.1 decays at 75% and 95% of the run.
pub fn proportional_schedule(epochs: usize) -> Vec<(usize, f64)> {
    [0.75, 0.95]
        .iter()
        .map(|frac| ((frac * epochs as f64).round() as usize, 0.1))
        .collect()
}
