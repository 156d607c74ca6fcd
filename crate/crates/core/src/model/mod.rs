//! ResNet-34 embedding network, pooling and the two-layer classifier.
//!
//! Input chunks are `[N, 1, T, F]` (frames × feature bins). The body is a
//! 3×3 stride-1 stem followed by four stages of basic blocks; the frequency
//! axis of the last stage is averaged away, giving `T′ × d` frame-level
//! activations for the pooling layer. The classifier is
//! `FC1 → mish → FC2 → mish → out → softmax`.
//!
//! In [`StitchMode::Stitched`] the output of the first dense layer (after its
//! mish) is fed directly to the output layer, skipping FC2 and its
//! activation. Stitching is inference-only.

mod checkpoint;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{join_list, ConfigError, KeyValues};
use crate::features::Matrix;
use crate::nn::{
    scoped, BatchNorm2d, Conv2d, Dense, Identity, Layer, Mish, NnError, NnResult, Phase, Relu, Scalar,
    Softmax, Tensor,
};
use crate::pooling::{Pooling, PoolingConfig, PoolingKind};

pub const NUM_CLASSES: usize = 2;
/// Index of the "fake" class in the output layer.
pub const FAKE_CLASS: usize = 1;
const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("stitched mode is inference-only")]
    StitchedTrainForbidden,
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StitchMode {
    Normal,
    Stitched,
}

impl FromStr for StitchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Self::Normal),
            "stitched" => Ok(Self::Stitched),
            other => Err(format!("unknown mode {other:?} (expected normal or stitched)")),
        }
    }
}

/// Activation after FC2. `Identity` exists for composition tests only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fc2Activation {
    Mish,
    Identity,
}

impl FromStr for Fc2Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mish" => Ok(Self::Mish),
            "identity" => Ok(Self::Identity),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

impl fmt::Display for Fc2Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mish => "mish",
            Self::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub block_counts: [usize; 4],
    pub channel_widths: [usize; 4],
    /// `input_dim` must equal the last channel width.
    pub pooling: PoolingConfig,
    pub fc1_dim: usize,
    pub fc2_dim: usize,
    /// Time kernel and stride 1 throughout, so frames never mix. Used to
    /// test that the embedding inherits the pooling's order invariance.
    pub flat_time: bool,
    pub fc2_activation: Fc2Activation,
}

impl ModelConfig {
    /// Narrow widths `[8, 16, 32, 64]`, FC dims 32.
    pub fn desk(kind: PoolingKind) -> Self {
        Self::with_widths([8, 16, 32, 64], 32, kind)
    }

    /// Full ResNet-34 widths, FC dims 256.
    pub fn paper(kind: PoolingKind) -> Self {
        Self::with_widths([64, 128, 256, 512], 256, kind)
    }

    pub fn with_widths(widths: [usize; 4], fc_dim: usize, kind: PoolingKind) -> Self {
        Self {
            block_counts: [3, 4, 6, 3],
            channel_widths: widths,
            pooling: PoolingConfig::new(kind, widths[3]),
            fc1_dim: fc_dim,
            fc2_dim: fc_dim,
            flat_time: false,
            fc2_activation: Fc2Activation::Mish,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.pooling.output_dim()
    }

    pub fn validate(&self) -> ModelResult<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.channel_widths.contains(&0) || self.block_counts.contains(&0) {
            return bad(format!(
                "widths {:?} and block counts {:?} must be positive",
                self.channel_widths, self.block_counts
            ));
        }
        if self.fc1_dim == 0 || self.fc1_dim != self.fc2_dim {
            return bad(format!(
                "fc1_dim ({}) and fc2_dim ({}) must be equal and positive",
                self.fc1_dim, self.fc2_dim
            ));
        }
        if self.pooling.input_dim != self.channel_widths[3] {
            return bad(format!(
                "pooling input_dim {} does not match last width {}",
                self.pooling.input_dim, self.channel_widths[3]
            ));
        }
        self.pooling.validate().map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("model.block_counts", join_list(&self.block_counts));
        kv.set("model.channel_widths", join_list(&self.channel_widths));
        kv.set("model.fc1_dim", self.fc1_dim);
        kv.set("model.fc2_dim", self.fc2_dim);
        kv.set("model.flat_time", self.flat_time);
        kv.set("model.fc2_activation", self.fc2_activation);
        let p = &self.pooling;
        kv.set("pooling.kind", p.kind);
        kv.set("pooling.heads", p.heads);
        kv.set("pooling.dict_size", p.dict_size);
        kv.set("pooling.attention_hidden", p.attention_hidden);
        kv.set("pooling.resolutions", join_list(&p.resolutions));
        kv
    }

    /// Consumes `model.*` and `pooling.*` keys, starting from the desk
    /// defaults for anything absent.
    pub fn from_kv(kv: &mut KeyValues) -> ModelResult<Self> {
        let kind = kv.take_parsed::<String>("pooling.kind")?;
        let kind = match kind {
            Some(k) => k.parse().map_err(|e: NnError| ModelError::InvalidConfig(e.to_string()))?,
            None => PoolingKind::St,
        };
        let mut cfg = Self::desk(kind);
        if let Some(v) = kv.take_list::<usize>("model.block_counts")? {
            cfg.block_counts = four(&v, "model.block_counts")?;
        }
        if let Some(v) = kv.take_list::<usize>("model.channel_widths")? {
            cfg.channel_widths = four(&v, "model.channel_widths")?;
            cfg.pooling.input_dim = cfg.channel_widths[3];
        }
        kv.take_into("model.fc1_dim", &mut cfg.fc1_dim)?;
        kv.take_into("model.fc2_dim", &mut cfg.fc2_dim)?;
        kv.take_into("model.flat_time", &mut cfg.flat_time)?;
        kv.take_into("model.fc2_activation", &mut cfg.fc2_activation)?;
        kv.take_into("pooling.heads", &mut cfg.pooling.heads)?;
        kv.take_into("pooling.dict_size", &mut cfg.pooling.dict_size)?;
        kv.take_into("pooling.attention_hidden", &mut cfg.pooling.attention_hidden)?;
        if let Some(r) = kv.take_list::<f64>("pooling.resolutions")? {
            cfg.pooling.resolutions = r;
        }
        Ok(cfg)
    }
}

fn four(v: &[usize], key: &str) -> ModelResult<[usize; 4]> {
    v.try_into()
        .map_err(|_| ModelError::InvalidConfig(format!("{key} needs exactly 4 values, got {}", v.len())))
}

/// Two 3×3 convolutions with batchnorm and a residual connection; the
/// shortcut is a 1×1 convolution + batchnorm when the shape changes.
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu_out: Relu<T>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new(cin: usize, cout: usize, stride: usize, flat_time: bool, rng: &mut ChaCha8Rng) -> Self {
        let (kernel, pad, s) = conv_geometry(stride, flat_time);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(cin, cout, (1, 1), s, (0, 0), false, &mut *rng),
                BatchNorm2d::new(cout),
            )
        });
        Self {
            conv1: Conv2d::new(cin, cout, kernel, s, pad, false, &mut *rng),
            bn1: BatchNorm2d::new(cout),
            relu1: Relu::new(),
            conv2: Conv2d::new(cout, cout, kernel, (1, 1), pad, false, &mut *rng),
            bn2: BatchNorm2d::new(cout),
            shortcut,
            relu_out: Relu::new(),
        }
    }
}

/// Kernel, padding and stride for a 3×3 convolution (1×3 in the flat
/// variant, which never strides along time).
fn conv_geometry(stride: usize, flat_time: bool) -> ((usize, usize), (usize, usize), (usize, usize)) {
    if flat_time {
        ((1, 3), (0, 1), (1, stride))
    } else {
        ((3, 3), (1, 1), (stride, stride))
    }
}

impl<T: Scalar> Layer<T> for BasicBlock<T> {
    fn forward(&mut self, input: &Tensor<T>, phase: Phase) -> NnResult<Tensor<T>> {
        let h = self.conv1.forward(input, phase)?;
        let h = self.bn1.forward(&h, phase)?;
        let h = self.relu1.forward(&h, phase)?;
        let h = self.conv2.forward(&h, phase)?;
        let mut h = self.bn2.forward(&h, phase)?;
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(input, phase)?;
                bn.forward(&s, phase)?
            }
            None => input.clone(),
        };
        skip.expect_shape(h.shape(), "residual")?;
        h.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += *b);
        self.relu_out.forward(&h, phase)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let g = self.relu_out.backward(upstream)?;
        let m = self.bn2.backward(&g)?;
        let m = self.conv2.backward(&m)?;
        let m = self.relu1.backward(&m)?;
        let m = self.bn1.backward(&m)?;
        let mut dx = self.conv1.backward(&m)?;
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = bn.backward(&g)?;
                conv.backward(&s)?
            }
            None => g,
        };
        dx.data.iter_mut().zip(&skip.data).for_each(|(a, b)| *a += *b);
        Ok(dx)
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = scoped("conv1", self.conv1.named_params());
        v.extend(scoped("bn1", self.bn1.named_params()));
        v.extend(scoped("conv2", self.conv2.named_params()));
        v.extend(scoped("bn2", self.bn2.named_params()));
        if let Some((c, b)) = &self.shortcut {
            v.extend(scoped("shortcut.conv", c.named_params()));
            v.extend(scoped("shortcut.bn", b.named_params()));
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = scoped("conv1", self.conv1.named_params_mut());
        v.extend(scoped("bn1", self.bn1.named_params_mut()));
        v.extend(scoped("conv2", self.conv2.named_params_mut()));
        v.extend(scoped("bn2", self.bn2.named_params_mut()));
        if let Some((c, b)) = &mut self.shortcut {
            v.extend(scoped("shortcut.conv", c.named_params_mut()));
            v.extend(scoped("shortcut.bn", b.named_params_mut()));
        }
        v
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = scoped("bn1", self.bn1.named_buffers());
        v.extend(scoped("bn2", self.bn2.named_buffers()));
        if let Some((_, b)) = &self.shortcut {
            v.extend(scoped("shortcut.bn", b.named_buffers()));
        }
        v
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = scoped("bn1", self.bn1.named_buffers_mut());
        v.extend(scoped("bn2", self.bn2.named_buffers_mut()));
        if let Some((_, b)) = &mut self.shortcut {
            v.extend(scoped("shortcut.bn", b.named_buffers_mut()));
        }
        v
    }
}

/// `[N, C, T, F]` → `[N, T, C]` by averaging over `F`.
#[derive(Debug, Clone, Default)]
pub struct FrequencyAverage {
    shape: Option<[usize; 4]>,
}

impl<T: Scalar> Layer<T> for FrequencyAverage {
    fn forward(&mut self, input: &Tensor<T>, _phase: Phase) -> NnResult<Tensor<T>> {
        input.expect_rank(4, "frequency average input")?;
        let s = input.shape();
        let (n, c, t, f) = (s[0], s[1], s[2], s[3]);
        let inv = T::lit(1.0 / f as f64);
        let mut out = vec![T::zero(); n * t * c];
        for b in 0..n {
            for ch in 0..c {
                for ti in 0..t {
                    let base = ((b * c + ch) * t + ti) * f;
                    let sum: T = input.data[base..base + f].iter().copied().sum();
                    out[(b * t + ti) * c + ch] = sum * inv;
                }
            }
        }
        self.shape = Some([n, c, t, f]);
        Tensor::from_vec(&[n, t, c], out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let [n, c, t, f] = self.shape.ok_or(NnError::BackwardBeforeForward)?;
        upstream.expect_shape(&[n, t, c], "frequency average upstream")?;
        let inv = T::lit(1.0 / f as f64);
        let mut dx = vec![T::zero(); n * c * t * f];
        for b in 0..n {
            for ch in 0..c {
                for ti in 0..t {
                    let g = upstream.data[(b * t + ti) * c + ch] * inv;
                    let base = ((b * c + ch) * t + ti) * f;
                    dx[base..base + f].iter_mut().for_each(|v| *v = g);
                }
            }
        }
        Tensor::from_vec(&[n, c, t, f], dx)
    }
}

#[derive(Debug, Clone)]
enum Fc2Act<T> {
    Mish(Mish<T>),
    Identity(Identity),
}

impl<T: Scalar> Fc2Act<T> {
    fn layer(&mut self) -> &mut dyn Layer<T> {
        match self {
            Self::Mish(m) => m,
            Self::Identity(i) => i,
        }
    }
}

/// The full detector. `T` is `f32` for training and `f64` for gradient
/// checks; both are built from the same seeded draws.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stem_relu: Relu<T>,
    blocks: Vec<(String, BasicBlock<T>)>,
    freq_avg: FrequencyAverage,
    pub pool: Pooling<T>,
    pub fc1: Dense<T>,
    act1: Mish<T>,
    pub fc2: Dense<T>,
    act2: Fc2Act<T>,
    pub out: Dense<T>,
    softmax: Softmax<T>,
    last_mode: Option<StitchMode>,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> ModelResult<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.channel_widths;
        let (kernel, pad, _) = conv_geometry(1, config.flat_time);
        let stem_conv = Conv2d::new(1, w[0], kernel, (1, 1), pad, false, &mut rng);
        let mut blocks = Vec::new();
        let mut cin = w[0];
        for stage in 0..4 {
            for b in 0..config.block_counts[stage] {
                let stride = if b == 0 { STAGE_STRIDES[stage] } else { 1 };
                let block = BasicBlock::new(cin, w[stage], stride, config.flat_time, &mut rng);
                blocks.push((format!("layer{}.{b}", stage + 1), block));
                cin = w[stage];
            }
        }
        let pool = Pooling::new(config.pooling.clone(), &mut rng)?;
        let emb = config.embedding_dim();
        let fc1 = Dense::new(emb, config.fc1_dim, &mut rng);
        let fc2 = Dense::new(config.fc1_dim, config.fc2_dim, &mut rng);
        let out = Dense::new(config.fc2_dim, NUM_CLASSES, &mut rng);
        let act2 = match config.fc2_activation {
            Fc2Activation::Mish => Fc2Act::Mish(Mish::new()),
            Fc2Activation::Identity => Fc2Act::Identity(Identity::default()),
        };
        Ok(Self {
            config,
            stem_conv,
            stem_bn: BatchNorm2d::new(w[0]),
            stem_relu: Relu::new(),
            blocks,
            freq_avg: FrequencyAverage::default(),
            pool,
            fc1,
            act1: Mish::new(),
            fc2,
            act2,
            out,
            softmax: Softmax::new(),
            last_mode: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(x: &Tensor<T>) -> NnResult<()> {
        x.expect_rank(4, "model input")?;
        if x.shape()[1] != 1 || x.shape()[2] == 0 || x.shape()[3] == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "model expects [N, 1, frames, dim], got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Pooled utterance embedding `[N, P]`, before the classifier.
    pub fn embed(&mut self, x: &Tensor<T>, phase: Phase) -> ModelResult<Tensor<T>> {
        Self::check_input(x)?;
        let h = self.stem_conv.forward(x, phase)?;
        let h = self.stem_bn.forward(&h, phase)?;
        let mut h = self.stem_relu.forward(&h, phase)?;
        for (_, block) in &mut self.blocks {
            h = block.forward(&h, phase)?;
        }
        let frames = self.freq_avg.forward(&h, phase)?;
        Ok(self.pool.forward(&frames, phase)?)
    }

    pub fn forward_logits(&mut self, x: &Tensor<T>, mode: StitchMode, phase: Phase) -> ModelResult<Tensor<T>> {
        if phase == Phase::Train && mode == StitchMode::Stitched {
            return Err(ModelError::StitchedTrainForbidden);
        }
        let e = self.embed(x, phase)?;
        let h = self.fc1.forward(&e, phase)?;
        let mut h = self.act1.forward(&h, phase)?;
        if mode == StitchMode::Normal {
            h = self.fc2.forward(&h, phase)?;
            h = self.act2.layer().forward(&h, phase)?;
        }
        self.last_mode = Some(mode);
        Ok(self.out.forward(&h, phase)?)
    }

    /// Class probabilities `[N, 2]`; column [`FAKE_CLASS`] is P(fake).
    pub fn forward(&mut self, x: &Tensor<T>, mode: StitchMode, phase: Phase) -> ModelResult<Tensor<T>> {
        let z = self.forward_logits(x, mode, phase)?;
        Ok(self.softmax.forward(&z, phase)?)
    }

    /// Backpropagates a logit gradient through the last normal-mode forward.
    pub fn backward_logits(&mut self, d_logits: &Tensor<T>) -> ModelResult<Tensor<T>> {
        match self.last_mode {
            None => return Err(NnError::BackwardBeforeForward.into()),
            Some(StitchMode::Stitched) => return Err(ModelError::StitchedTrainForbidden),
            Some(StitchMode::Normal) => {}
        }
        let g = self.out.backward(d_logits)?;
        let g = self.act2.layer().backward(&g)?;
        let g = self.fc2.backward(&g)?;
        let g = self.act1.backward(&g)?;
        let g = self.fc1.backward(&g)?;
        let g = self.pool.backward(&g)?;
        let mut g = self.freq_avg.backward(&g)?;
        for (_, block) in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        let g = self.stem_relu.backward(&g)?;
        let g = self.stem_bn.backward(&g)?;
        Ok(self.stem_conv.backward(&g)?)
    }

    /// Parameters and batchnorm statistics, in checkpoint order.
    pub fn named_state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.named_params();
        v.extend(self.named_buffers());
        v
    }
}

impl<T: Scalar> Layer<T> for Model<T> {
    /// Normal-mode probabilities.
    fn forward(&mut self, input: &Tensor<T>, phase: Phase) -> NnResult<Tensor<T>> {
        self.forward(input, StitchMode::Normal, phase).map_err(|e| match e {
            ModelError::Nn(e) => e,
            other => NnError::InvalidConfig(other.to_string()),
        })
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> NnResult<Tensor<T>> {
        let g = self.softmax.backward(upstream)?;
        self.backward_logits(&g).map_err(|e| match e {
            ModelError::Nn(e) => e,
            other => NnError::InvalidConfig(other.to_string()),
        })
    }

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = scoped("stem.conv", self.stem_conv.named_params());
        v.extend(scoped("stem.bn", self.stem_bn.named_params()));
        for (name, block) in &self.blocks {
            v.extend(scoped(name, block.named_params()));
        }
        v.extend(scoped("pool", self.pool.named_params()));
        v.extend(scoped("fc1", self.fc1.named_params()));
        v.extend(scoped("fc2", self.fc2.named_params()));
        v.extend(scoped("out", self.out.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = scoped("stem.conv", self.stem_conv.named_params_mut());
        v.extend(scoped("stem.bn", self.stem_bn.named_params_mut()));
        for (name, block) in &mut self.blocks {
            v.extend(scoped(name, block.named_params_mut()));
        }
        v.extend(scoped("pool", self.pool.named_params_mut()));
        v.extend(scoped("fc1", self.fc1.named_params_mut()));
        v.extend(scoped("fc2", self.fc2.named_params_mut()));
        v.extend(scoped("out", self.out.named_params_mut()));
        v
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = scoped("stem.bn", self.stem_bn.named_buffers());
        for (name, block) in &self.blocks {
            v.extend(scoped(name, block.named_buffers()));
        }
        v
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = scoped("stem.bn", self.stem_bn.named_buffers_mut());
        for (name, block) in &mut self.blocks {
            v.extend(scoped(name, block.named_buffers_mut()));
        }
        v
    }
}

/// Stacks equally sized feature chunks (`frames × dim`) into `[N, 1, frames, dim]`.
pub fn chunk_batch<T: Scalar>(chunks: &[&Matrix]) -> NnResult<Tensor<T>> {
    let first = chunks.first().ok_or(NnError::EmptyInput)?;
    let (t, f) = (first.rows, first.cols);
    let mut data = Vec::with_capacity(chunks.len() * t * f);
    for c in chunks {
        if (c.rows, c.cols) != (t, f) {
            return Err(NnError::ShapeMismatch(format!(
                "chunk {}×{} in a batch of {t}×{f}",
                c.rows, c.cols
            )));
        }
        data.extend(c.data.iter().map(|&v| T::lit(v)));
    }
    Tensor::from_vec(&[chunks.len(), 1, t, f], data)
}
