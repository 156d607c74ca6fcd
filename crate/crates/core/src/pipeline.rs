//! Manifests, chunking, the training and fine-tuning loops, and
//! utterance-level scoring.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{read_wav, write_wav, AudioClip, AudioError};
use crate::augment::{lowpass_taps, spec_augment_matrix, AugmentError, SpecAugmentConfig};
use crate::config::{ConfigError, KeyValues};
use crate::features::{
    mean_normalize, read_feature_file, Extractor, FeatureConfig, FeatureError, FeatureKind, FeatureMatrix, Matrix,
};
use crate::metrics::{compute_eer, Label, MetricsError, ScoreRecord};
use crate::model::{chunk_batch, Model, ModelConfig, ModelError, StitchMode, FAKE_CLASS, NUM_CLASSES};
use crate::nn::{
    focal_loss_from_logits, FocalLossConfig, Layer, NnError, Optimizer, OptimizerConfig, Phase,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("feature matrix has no frames")]
    EmptyFeatures,
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("manifest needs both bonafide and fake utterances")]
    SingleClassManifest,
    #[error("validation count {requested} must be below the {total} available segments")]
    CountTooLarge { requested: usize, total: usize },
    #[error("duplicate utterance id {0:?}")]
    DuplicateUtterance(String),
    #[error("{path}:{line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite training loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type PipelineResult<T> = Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub path: PathBuf,
    pub label: Label,
}

/// Reads `utt_id<TAB>path<TAB>label` lines. Relative paths resolve against
/// the manifest's directory; `#` lines and blank lines are skipped.
pub fn read_manifest(path: &Path) -> PipelineResult<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")), &path.display().to_string())
}

pub fn parse_manifest(text: &str, base: &Path, name: &str) -> PipelineResult<Vec<ManifestEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| PipelineError::Manifest {
            path: name.to_string(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 tab-separated columns, got {}", cols.len())));
        }
        let label: Label = cols[2].trim().parse().map_err(err)?;
        let utt_id = cols[0].trim().to_string();
        if utt_id.is_empty() {
            return Err(err("empty utterance id".into()));
        }
        if !seen.insert(utt_id.clone()) {
            return Err(PipelineError::DuplicateUtterance(utt_id));
        }
        let p = PathBuf::from(cols[1].trim());
        out.push(ManifestEntry {
            utt_id,
            path: if p.is_absolute() { p } else { base.join(p) },
            label,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> PipelineResult<()> {
    let text: String = entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.utt_id, e.path.display(), e.label))
        .collect();
    Ok(fs::write(path, text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadPolicy {
    /// Tile the frames until the chunk is full.
    Repeat,
    Zero,
    /// Utterances shorter than one chunk yield nothing.
    DropShort,
}

impl FromStr for PadPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "repeat" => Ok(Self::Repeat),
            "zero" => Ok(Self::Zero),
            "drop_short" => Ok(Self::DropShort),
            other => Err(format!("unknown pad policy {other:?}")),
        }
    }
}

impl fmt::Display for PadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Repeat => "repeat",
            Self::Zero => "zero",
            Self::DropShort => "drop_short",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkSpec {
    pub chunk_ms: u32,
    pub overlap_ratio: f64,
    pub pad_policy: PadPolicy,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        Self {
            chunk_ms: 600,
            overlap_ratio: 0.5,
            pad_policy: PadPolicy::Repeat,
        }
    }
}

impl ChunkSpec {
    /// Chunk length in frames; `chunk_ms` must be a whole number of hops.
    pub fn frames(&self, hop_ms: f64) -> PipelineResult<usize> {
        let l = self.chunk_ms as f64 / hop_ms;
        if self.chunk_ms == 0 || (l - l.round()).abs() > 1e-9 {
            return Err(PipelineError::InvalidConfig(format!(
                "chunk of {} ms is not a whole number of {hop_ms} ms hops",
                self.chunk_ms
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(PipelineError::InvalidConfig(format!(
                "overlap ratio {} not in [0, 1)",
                self.overlap_ratio
            )));
        }
        Ok(l.round() as usize)
    }

    /// `round(L · (1 − overlap))`, at least one frame.
    pub fn hop_frames(&self, chunk_frames: usize) -> usize {
        ((chunk_frames as f64 * (1.0 - self.overlap_ratio)).round() as usize).max(1)
    }
}

/// Window starts `0, hop, 2·hop, …`, with a final window anchored at
/// `frames − len` when the regular grid would leave a tail uncovered.
pub fn chunk_starts(frames: usize, len: usize, hop: usize) -> Vec<usize> {
    if frames <= len {
        return vec![0];
    }
    let last = frames - len;
    let mut starts: Vec<usize> = (0..=last).step_by(hop).collect();
    if *starts.last().expect("non-empty") != last {
        starts.push(last);
    }
    starts
}

/// Cuts a `frames × dim` matrix into fixed-length chunks.
pub fn segment(features: &Matrix, spec: &ChunkSpec, hop_ms: f64) -> PipelineResult<Vec<Matrix>> {
    if features.rows == 0 || features.cols == 0 {
        return Err(PipelineError::EmptyFeatures);
    }
    let len = spec.frames(hop_ms)?;
    let hop = spec.hop_frames(len);
    let d = features.cols;
    if features.rows < len {
        let padded = match spec.pad_policy {
            PadPolicy::DropShort => return Ok(Vec::new()),
            PadPolicy::Repeat => {
                let data = (0..len).flat_map(|r| features.row(r % features.rows).iter().copied()).collect();
                Matrix { rows: len, cols: d, data }
            }
            PadPolicy::Zero => {
                let mut data = features.data.clone();
                data.resize(len * d, 0.0);
                Matrix { rows: len, cols: d, data }
            }
        };
        return Ok(vec![padded]);
    }
    Ok(chunk_starts(features.rows, len, hop)
        .into_iter()
        .map(|s| Matrix {
            rows: len,
            cols: d,
            data: features.data[s * d..(s + len) * d].to_vec(),
        })
        .collect())
}

/// Seeded train/validation split of `n` items. Returns sorted index lists.
pub fn make_splits(n: usize, validation_count: usize, seed: u64) -> PipelineResult<(Vec<usize>, Vec<usize>)> {
    if validation_count == 0 {
        return Ok(((0..n).collect(), Vec::new()));
    }
    if validation_count >= n {
        return Err(PipelineError::CountTooLarge {
            requested: validation_count,
            total: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = sample(&mut rng, n, validation_count).into_vec();
    val.sort_unstable();
    let in_val: HashSet<usize> = val.iter().copied().collect();
    let train = (0..n).filter(|i| !in_val.contains(i)).collect();
    Ok((train, val))
}

/// Strict variant: whole groups (utterances) go to validation, in seeded
/// random order, until at least `validation_count` items are held out.
pub fn make_group_splits(
    groups: &[usize],
    validation_count: usize,
    seed: u64,
) -> PipelineResult<(Vec<usize>, Vec<usize>)> {
    let n = groups.len();
    if validation_count == 0 {
        return Ok(((0..n).collect(), Vec::new()));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut held = HashSet::new();
    let mut count = 0;
    for g in ids {
        if count >= validation_count {
            break;
        }
        held.insert(g);
        count += groups.iter().filter(|&&x| x == g).count();
    }
    if count >= n {
        return Err(PipelineError::CountTooLarge {
            requested: validation_count,
            total: n,
        });
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| held.contains(&groups[i]));
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub focal: FocalLossConfig,
    pub spec_augment: SpecAugmentConfig,
    pub chunk: ChunkSpec,
    pub validation_segments: usize,
    /// Hold out whole utterances instead of individual segments.
    pub strict_split: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            focal: FocalLossConfig::default(),
            spec_augment: SpecAugmentConfig::default(),
            chunk: ChunkSpec::default(),
            validation_segments: 0,
            strict_split: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> PipelineResult<()> {
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig("batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.focal.validate()?;
        self.spec_augment.validate()?;
        Ok(())
    }

    /// Fine-tuning protocol: 70% chunk overlap and a learning rate 100 times
    /// smaller, everything else unchanged.
    pub fn for_finetune(&self) -> Self {
        let mut cfg = self.clone();
        cfg.chunk.overlap_ratio = 0.7;
        cfg.optimizer.learning_rate = self.optimizer.learning_rate / 100.0;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
    /// Mean of per-chunk log-odds, mapped back to a probability.
    LogitMean,
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "logit_mean" => Ok(Self::LogitMean),
            other => Err(format!("unknown aggregation {other:?}")),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::LogitMean => "logit_mean",
        })
    }
}

pub fn aggregate(chunk_scores: &[f64], how: Aggregation) -> f64 {
    let n = chunk_scores.len() as f64;
    match how {
        Aggregation::Mean => chunk_scores.iter().sum::<f64>() / n,
        Aggregation::Max => chunk_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::LogitMean => {
            let eps = 1e-12;
            let z = chunk_scores
                .iter()
                .map(|p| {
                    let p = p.clamp(eps, 1.0 - eps);
                    (p / (1.0 - p)).ln()
                })
                .sum::<f64>()
                / n;
            1.0 / (1.0 + (-z).exp())
        }
    }
}

/// Everything a training or inference run is configured with. Parsed
/// from `key = value` text with the namespaces `features.`, `model.`,
/// `pooling.`, `train.`, `optim.`, `focal.`, `specaug.`, `chunk.` and
/// `infer.`; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub aggregation: Aggregation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::lfcc(20, 512),
            model: ModelConfig::desk(crate::pooling::PoolingKind::St),
            train: TrainConfig::default(),
            aggregation: Aggregation::Mean,
        }
    }
}

pub fn feature_config_to_kv(cfg: &FeatureConfig) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("features.kind", cfg.kind);
    kv.set("features.dim", cfg.dim);
    kv.set("features.nfft", cfg.nfft);
    kv.set("features.win_ms", cfg.win_ms);
    kv.set("features.hop_ms", cfg.hop_ms);
    kv.set("features.sample_rate", cfg.sample_rate);
    kv.set("features.n_filters", cfg.n_filters);
    kv.set("features.log_floor", cfg.log_floor);
    kv
}

/// Consumes `features.*` keys. Kind, dim and nfft select the base
/// configuration; the other keys override it.
pub fn feature_config_from_kv(kv: &mut KeyValues, base: &FeatureConfig) -> PipelineResult<FeatureConfig> {
    let kind: FeatureKind = kv.take_parsed("features.kind")?.unwrap_or(base.kind);
    let nfft: usize = kv.take_parsed("features.nfft")?.unwrap_or(base.nfft);
    let dim: Option<usize> = kv.take_parsed("features.dim")?;
    let mut cfg = match kind {
        FeatureKind::Lfcc => FeatureConfig::lfcc(dim.unwrap_or(base.dim), nfft),
        FeatureKind::Llfb => FeatureConfig::llfb(dim.unwrap_or(base.dim), nfft),
        FeatureKind::DctDftSpec => {
            let mut c = FeatureConfig::dct_dft(nfft);
            if let Some(d) = dim {
                c.dim = d;
            }
            c
        }
    };
    if kind == base.kind && dim.is_none() && nfft == base.nfft {
        cfg = base.clone();
    }
    kv.take_into("features.win_ms", &mut cfg.win_ms)?;
    kv.take_into("features.hop_ms", &mut cfg.hop_ms)?;
    kv.take_into("features.sample_rate", &mut cfg.sample_rate)?;
    kv.take_into("features.n_filters", &mut cfg.n_filters)?;
    kv.take_into("features.log_floor", &mut cfg.log_floor)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn chunk_to_kv(chunk: &ChunkSpec) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("chunk.ms", chunk.chunk_ms);
    kv.set("chunk.overlap", chunk.overlap_ratio);
    kv.set("chunk.pad", chunk.pad_policy);
    kv
}

impl RunConfig {
    pub fn parse(text: &str) -> PipelineResult<Self> {
        Self::from_kv(KeyValues::parse(text)?)
    }

    pub fn load(path: &Path) -> PipelineResult<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn from_kv(mut kv: KeyValues) -> PipelineResult<Self> {
        let d = Self::default();
        let features = feature_config_from_kv(&mut kv, &d.features)?;
        let mut model_kv = kv.split_namespace("model");
        model_kv.merge(kv.split_namespace("pooling"));
        let model = if model_kv.is_empty() {
            d.model
        } else {
            let m = ModelConfig::from_kv(&mut model_kv)?;
            model_kv.finish()?;
            m
        };
        model.validate()?;

        let mut t = d.train;
        kv.take_into("train.epochs", &mut t.epochs)?;
        kv.take_into("train.batch_size", &mut t.batch_size)?;
        kv.take_into("train.validation_segments", &mut t.validation_segments)?;
        kv.take_into("train.strict_split", &mut t.strict_split)?;
        kv.take_into("train.seed", &mut t.seed)?;
        kv.take_into("train.lr", &mut t.optimizer.learning_rate)?;
        if let Some(kind) = kv.take("optim.kind") {
            let lr = t.optimizer.learning_rate;
            t.optimizer = match kind.as_str() {
                "adam" => OptimizerConfig::default(),
                "sgd" => OptimizerConfig::sgd(lr, 0.9),
                other => {
                    return Err(ConfigError::Invalid {
                        key: "optim.kind".into(),
                        value: other.into(),
                        msg: "expected adam or sgd".into(),
                    }
                    .into())
                }
            };
            t.optimizer.learning_rate = lr;
        }
        kv.take_into("optim.beta1", &mut t.optimizer.beta1)?;
        kv.take_into("optim.momentum", &mut t.optimizer.beta1)?;
        kv.take_into("optim.beta2", &mut t.optimizer.beta2)?;
        kv.take_into("optim.eps", &mut t.optimizer.eps)?;
        kv.take_into("optim.weight_decay", &mut t.optimizer.weight_decay)?;
        kv.take_into("focal.alpha", &mut t.focal.alpha)?;
        kv.take_into("focal.gamma", &mut t.focal.gamma)?;
        kv.take_into("specaug.f_pct", &mut t.spec_augment.f_pct)?;
        kv.take_into("specaug.t_pct", &mut t.spec_augment.t_pct)?;
        kv.take_into("specaug.rows", &mut t.spec_augment.rows)?;
        kv.take_into("specaug.cols", &mut t.spec_augment.cols)?;
        kv.take_into("specaug.fill_value", &mut t.spec_augment.fill_value)?;
        kv.take_into("chunk.ms", &mut t.chunk.chunk_ms)?;
        kv.take_into("chunk.overlap", &mut t.chunk.overlap_ratio)?;
        kv.take_into("chunk.pad", &mut t.chunk.pad_policy)?;
        let mut aggregation = d.aggregation;
        kv.take_into("infer.aggregation", &mut aggregation)?;
        kv.finish()?;
        t.validate()?;
        t.chunk.frames(features.hop_ms)?;
        Ok(Self {
            features,
            model,
            train: t,
            aggregation,
        })
    }
}

/// One mean-normalized utterance ready for chunking.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub label: Label,
    pub features: Matrix,
}

/// Features for every manifest entry, either read from `<dir>/<utt_id>.feat`
/// or extracted from audio. Utterances are processed in parallel; the
/// result keeps manifest order.
pub fn load_utterances(
    entries: &[ManifestEntry],
    cfg: &FeatureConfig,
    feature_dir: Option<&Path>,
) -> PipelineResult<Vec<Utterance>> {
    let extractor = Extractor::new(cfg)?;
    entries
        .par_iter()
        .map(|e| {
            let raw = match feature_dir {
                Some(dir) => read_feature_file(&dir.join(format!("{}.feat", e.utt_id)), cfg)?,
                None => extractor.extract(&read_wav(&e.path)?)?,
            };
            if raw.frames() == 0 {
                return Err(PipelineError::EmptyFeatures);
            }
            Ok(Utterance {
                utt_id: e.utt_id.clone(),
                label: e.label,
                features: mean_normalize(&raw).values,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    utt: usize,
    label: Label,
    values: Matrix,
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Bonafide => 1 - FAKE_CLASS,
        Label::Fake => FAKE_CLASS,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// `None` without validation segments or when they hold one class.
    pub val_eer: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let eer = self.val_eer.map_or("nan".to_string(), |e| format!("{e:.6}"));
        write!(f, "{}\t{:.6}\t{:.6}\t{eer}", self.epoch, self.loss, self.accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were returned (0 = the initial model).
    pub best_epoch: usize,
    /// Segment-level validation scores per epoch, as used for `val_eer`.
    pub validation_scores: Vec<Vec<ScoreRecord>>,
}

fn segments_for(utts: &[Utterance], chunk: &ChunkSpec, hop_ms: f64) -> PipelineResult<Vec<Segment>> {
    let mut out = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        for values in segment(&u.features, chunk, hop_ms)? {
            out.push(Segment {
                utt: i,
                label: u.label,
                values,
            });
        }
    }
    Ok(out)
}

/// Fake-class probability of each chunk, in infer phase.
fn chunk_fake_probs(model: &mut Model<f32>, chunks: &[&Matrix], mode: StitchMode, batch: usize) -> PipelineResult<Vec<f64>> {
    let mut out = Vec::with_capacity(chunks.len());
    for group in chunks.chunks(batch.max(1)) {
        let x = chunk_batch::<f32>(group)?;
        let p = model.forward(&x, mode, Phase::Infer)?;
        out.extend(p.data.chunks(NUM_CLASSES).map(|r| r[FAKE_CLASS] as f64));
    }
    Ok(out)
}

/// Trains `model` with focal loss on seeded, SpecAugment-ed chunk batches
/// and returns the weights with the best validation EER (later epochs win
/// ties; without validation data, the final weights).
pub fn train(
    utterances: &[Utterance],
    hop_ms: f64,
    cfg: &TrainConfig,
    model: Model<f32>,
) -> PipelineResult<(Model<f32>, TrainReport)> {
    cfg.validate()?;
    if utterances.is_empty() {
        return Err(PipelineError::EmptyManifest);
    }
    let has = |l: Label| utterances.iter().any(|u| u.label == l);
    if !has(Label::Bonafide) || !has(Label::Fake) {
        return Err(PipelineError::SingleClassManifest);
    }
    let segments = segments_for(utterances, &cfg.chunk, hop_ms)?;
    let (mut train_idx, val_idx) = if cfg.strict_split {
        let groups: Vec<usize> = segments.iter().map(|s| s.utt).collect();
        make_group_splits(&groups, cfg.validation_segments, cfg.seed)?
    } else {
        make_splits(segments.len(), cfg.validation_segments, cfg.seed)?
    };
    if train_idx.is_empty() {
        return Err(PipelineError::CountTooLarge {
            requested: cfg.validation_segments,
            total: segments.len(),
        });
    }

    let mut model = model;
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut report = TrainReport {
        log: Vec::new(),
        best_epoch: 0,
        validation_scores: Vec::new(),
    };

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in train_idx.chunks(cfg.batch_size) {
            let masked: Vec<Matrix> = batch
                .iter()
                .map(|&i| spec_augment_matrix(&segments[i].values, &cfg.spec_augment, &mut rng))
                .collect();
            let refs: Vec<&Matrix> = masked.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| class_index(segments[i].label)).collect();
            let x = chunk_batch::<f32>(&refs)?;
            model.zero_grad();
            let logits = model.forward_logits(&x, StitchMode::Normal, Phase::Train)?;
            let (loss, grad) = focal_loss_from_logits(&logits, &labels, &cfg.focal)?;
            if !loss.is_finite() {
                return Err(PipelineError::Diverged { epoch });
            }
            model.backward_logits(&grad)?;
            optimizer.step(model.named_params_mut())?;
            loss_sum += loss * batch.len() as f64;
            for (row, &y) in logits.data.chunks(NUM_CLASSES).zip(&labels) {
                let pred = if row[FAKE_CLASS] > row[1 - FAKE_CLASS] { FAKE_CLASS } else { 1 - FAKE_CLASS };
                correct += usize::from(pred == y);
            }
        }
        let n = train_idx.len() as f64;

        let mut val_eer = None;
        let mut records = Vec::new();
        if !val_idx.is_empty() {
            let chunks: Vec<&Matrix> = val_idx.iter().map(|&i| &segments[i].values).collect();
            let probs = chunk_fake_probs(&mut model, &chunks, StitchMode::Normal, cfg.batch_size)?;
            records = val_idx
                .iter()
                .zip(probs)
                .map(|(&i, p)| ScoreRecord {
                    utt_id: format!("{}#{i}", utterances[segments[i].utt].utt_id),
                    score: p,
                    label: Some(segments[i].label),
                })
                .collect();
            val_eer = compute_eer(&records).ok().map(|r| r.eer);
        }
        report.log.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
            val_eer,
        });
        report.validation_scores.push(records);

        if let Some(eer) = val_eer {
            if best.as_ref().is_none_or(|(b, _, _)| eer <= *b) {
                best = Some((eer, epoch, model.clone()));
            }
        }
    }
    match best {
        Some((_, epoch, m)) => {
            report.best_epoch = epoch;
            Ok((m, report))
        }
        None => {
            report.best_epoch = cfg.epochs;
            Ok((model, report))
        }
    }
}

/// Continues training under [`TrainConfig::for_finetune`].
pub fn finetune(
    utterances: &[Utterance],
    hop_ms: f64,
    cfg: &TrainConfig,
    model: Model<f32>,
) -> PipelineResult<(Model<f32>, TrainReport)> {
    train(utterances, hop_ms, &cfg.for_finetune(), model)
}

/// Mean focal loss over every chunk of `utterances`, in infer phase and
/// without augmentation.
pub fn evaluate_loss(
    model: &mut Model<f32>,
    utterances: &[Utterance],
    hop_ms: f64,
    chunk: &ChunkSpec,
    focal: &FocalLossConfig,
) -> PipelineResult<f64> {
    let segments = segments_for(utterances, chunk, hop_ms)?;
    let mut total = 0.0;
    for group in segments.chunks(32) {
        let refs: Vec<&Matrix> = group.iter().map(|s| &s.values).collect();
        let labels: Vec<usize> = group.iter().map(|s| class_index(s.label)).collect();
        let logits = model.forward_logits(&chunk_batch::<f32>(&refs)?, StitchMode::Normal, Phase::Infer)?;
        total += focal_loss_from_logits(&logits, &labels, focal)?.0 * group.len() as f64;
    }
    Ok(total / segments.len() as f64)
}

/// Scores one mean-normalized utterance: every chunk goes through the
/// model in one infer-phase batch and the fake probabilities are
/// aggregated.
pub fn score_features(
    model: &mut Model<f32>,
    features: &Matrix,
    hop_ms: f64,
    chunk: &ChunkSpec,
    mode: StitchMode,
    how: Aggregation,
) -> PipelineResult<f64> {
    let chunks = segment(features, chunk, hop_ms)?;
    if chunks.is_empty() {
        return Err(PipelineError::EmptyFeatures);
    }
    let refs: Vec<&Matrix> = chunks.iter().collect();
    let probs = chunk_fake_probs(model, &refs, mode, refs.len())?;
    Ok(aggregate(&probs, how))
}

/// Extract → mean-normalize → segment → forward → aggregate.
pub fn score_utterance(
    model: &mut Model<f32>,
    utt_id: &str,
    clip: &AudioClip,
    features: &FeatureConfig,
    chunk: &ChunkSpec,
    mode: StitchMode,
    how: Aggregation,
) -> PipelineResult<ScoreRecord> {
    let extracted: FeatureMatrix = Extractor::new(features)?.extract(clip)?;
    let normalized = mean_normalize(&extracted);
    let score = score_features(model, &normalized.values, features.hop_ms, chunk, mode, how)?;
    Ok(ScoreRecord {
        utt_id: utt_id.to_string(),
        score,
        label: None,
    })
}

/// Scores every utterance. The model is cloned per worker so utterances
/// can be processed in parallel; results keep input order.
pub fn score_all(
    model: &Model<f32>,
    utterances: &[Utterance],
    hop_ms: f64,
    chunk: &ChunkSpec,
    mode: StitchMode,
    how: Aggregation,
) -> PipelineResult<Vec<ScoreRecord>> {
    utterances
        .par_iter()
        .map_init(
            || model.clone(),
            |m, u| {
                Ok(ScoreRecord {
                    utt_id: u.utt_id.clone(),
                    score: score_features(m, &u.features, hop_ms, chunk, mode, how)?,
                    label: Some(u.label),
                })
            },
        )
        .collect()
}

/// Writes a separable two-class corpus of one-second 16 kHz clips and
/// its manifest: bona fide clips are low-passed white noise with a random
/// cutoff, fake clips are single pure tones. Returns the manifest path.
pub fn write_toy_corpus(dir: &Path, per_class: usize, seed: u64, prefix: &str) -> PipelineResult<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = 16000u32;
    let n = rate as usize;
    let mut entries = Vec::new();
    for i in 0..per_class {
        let cutoff = rng.gen_range(2000.0..6000.0);
        let taps = lowpass_taps(cutoff, rate, 32);
        let white: Vec<f64> = (0..n + taps.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut noise: Vec<f64> = (0..n)
            .map(|j| taps.iter().enumerate().map(|(k, t)| t * white[j + k]).sum())
            .collect();
        let rms = (noise.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let target = rng.gen_range(0.05..0.2);
        noise.iter_mut().for_each(|v| *v *= target / rms);
        let id = format!("{prefix}bona{i:03}");
        let path = dir.join(format!("{id}.wav"));
        write_wav(&AudioClip::new(noise, rate), &path)?;
        entries.push(ManifestEntry {
            utt_id: id,
            path,
            label: Label::Bonafide,
        });

        let freq = rng.gen_range(200.0..4000.0);
        let amp = rng.gen_range(0.2..0.6);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let tone = (0..n)
            .map(|j| amp * (std::f64::consts::TAU * freq * j as f64 / rate as f64 + phase).sin())
            .collect();
        let id = format!("{prefix}fake{i:03}");
        let path = dir.join(format!("{id}.wav"));
        write_wav(&AudioClip::new(tone, rate), &path)?;
        entries.push(ManifestEntry {
            utt_id: id,
            path,
            label: Label::Fake,
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
