//! Waveform augmentation (additive noise, reverberation, gain, lossy
//! compression) and feature-domain SpecAugment.
//!
//! Augmentation is planned up front: [`build_plan`] draws one concrete
//! [`Disturbance`] per output utterance, and the plan is then executed
//! entry by entry. Every utterance's draws come from an RNG keyed on
//! `(seed, part, utt_id, k)`, so a plan does not depend on manifest order.

use std::env;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{
    apply_gain, convolve_rir, kaiser, mix_at_snr, read_wav, resample, write_wav, AudioClip, AudioError,
    RoomImpulseResponse, KAISER_BETA,
};
use crate::features::{FeatureMatrix, Matrix};

pub const CODEC_DIR_ENV: &str = "STITCHGUARD_CODEC_DIR";
pub const SURROGATE_CUTOFF_HZ: f64 = 3400.0;
pub const SURROGATE_LEVELS: u32 = 1 << 10;
const SURROGATE_HALF_TAPS: usize = 64;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("clean manifest is empty")]
    EmptyManifest,
    #[error("{part} budget {budget} exceeds the {candidates} available candidates")]
    BudgetExceedsCandidates {
        part: &'static str,
        budget: usize,
        candidates: usize,
    },
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
    #[error("encoder not found: {0}")]
    EncoderNotFound(String),
    #[error("encoder {program} failed ({status}): {stderr}")]
    EncoderFailed {
        program: String,
        status: String,
        stderr: String,
    },
    #[error("plan line {line}: {msg}")]
    PlanParse { line: usize, msg: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type AugmentResult<T> = Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Noise,
    Music,
    Babble,
    Reverb,
    Volume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub snr_db_range: (f64, f64),
    pub gain_db_range: (f64, f64),
    /// Noise recordings (noise kinds) or impulse responses (reverb).
    pub sources: Vec<PathBuf>,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, sources: Vec<PathBuf>) -> Self {
        Self {
            kind,
            snr_db_range: (0.0, 20.0),
            gain_db_range: (-10.0, 20.0),
            sources,
        }
    }

    pub fn validate(&self) -> AugmentResult<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.snr_db_range) || !ordered(self.gain_db_range) {
            return Err(AugmentError::InvalidSpec(format!("unordered range in {self:?}")));
        }
        if self.kind != DistortionKind::Volume && self.sources.is_empty() {
            return Err(AugmentError::InvalidSpec(format!("{:?} needs a non-empty manifest", self.kind)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    Mp3,
    Ogg,
    Aac,
    Opus,
    Telephony,
    Surrogate,
}

impl Codec {
    pub fn is_external(self) -> bool {
        !matches!(self, Self::Telephony | Self::Surrogate)
    }

    fn extension(self) -> &'static str {
        match self {
            Self::Mp3 => "mp3",
            Self::Ogg => "ogg",
            Self::Aac => "m4a",
            Self::Opus => "opus",
            Self::Telephony | Self::Surrogate => "wav",
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mp3 => "mp3",
            Self::Ogg => "ogg",
            Self::Aac => "aac",
            Self::Opus => "opus",
            Self::Telephony => "telephony",
            Self::Surrogate => "surrogate",
        })
    }
}

impl FromStr for Codec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "mp3" => Self::Mp3,
            "ogg" => Self::Ogg,
            "aac" => Self::Aac,
            "opus" => Self::Opus,
            "telephony" => Self::Telephony,
            "surrogate" => Self::Surrogate,
            other => return Err(format!("unknown codec {other:?}")),
        })
    }
}

/// An external codec round trip is described by argument templates with
/// `{in}`, `{out}`, `{bitrate}` and `{codec}` placeholders. Without a decoder
/// template the encoder must itself produce a WAV file at `{out}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionSpec {
    pub codec: Codec,
    pub encoder_command: Option<Vec<String>>,
    pub decoder_command: Option<Vec<String>>,
    /// kbit/s.
    pub bitrate_choices: Vec<u32>,
}

impl CompressionSpec {
    pub fn builtin(codec: Codec) -> Self {
        Self {
            codec,
            encoder_command: None,
            decoder_command: None,
            bitrate_choices: vec![32, 64, 128],
        }
    }

    pub fn external(codec: Codec, encoder: Vec<String>, decoder: Option<Vec<String>>) -> Self {
        Self {
            encoder_command: Some(encoder),
            decoder_command: decoder,
            ..Self::builtin(codec)
        }
    }

    pub fn validate(&self) -> AugmentResult<()> {
        if self.codec.is_external() && self.encoder_command.as_ref().is_none_or(|c| c.is_empty()) {
            return Err(AugmentError::InvalidSpec(format!("{} needs an encoder command", self.codec)));
        }
        if self.bitrate_choices.is_empty() {
            return Err(AugmentError::InvalidSpec("no bitrate choices".into()));
        }
        Ok(())
    }
}

/// One concrete, fully sampled disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Disturbance {
    /// Additive noise, music or babble.
    Noise {
        kind: DistortionKind,
        source: PathBuf,
        snr_db: f64,
        /// Seeds the crop offset into longer noise recordings.
        seed: u64,
    },
    Reverb { rir: PathBuf },
    Volume { gain_db: f64 },
    Compression { codec: Codec, bitrate_kbps: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub out_id: String,
    pub src_id: String,
    pub disturbance: Disturbance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub seed: u64,
    pub entries: Vec<PlanEntry>,
}

fn keyed_rng(seed: u64, part: &str, utt_id: &str, k: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(part.as_bytes());
    h.update([0]);
    h.update(utt_id.as_bytes());
    h.update([0]);
    h.update((k as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn sample_distortion<R: Rng>(spec: &DistortionSpec, rng: &mut R) -> Disturbance {
    let pick = |rng: &mut R| spec.sources[rng.gen_range(0..spec.sources.len())].clone();
    match spec.kind {
        DistortionKind::Noise | DistortionKind::Music | DistortionKind::Babble => Disturbance::Noise {
            kind: spec.kind,
            source: pick(rng),
            snr_db: uniform(rng, spec.snr_db_range),
            seed: rng.gen(),
        },
        DistortionKind::Reverb => Disturbance::Reverb { rir: pick(rng) },
        DistortionKind::Volume => Disturbance::Volume {
            gain_db: uniform(rng, spec.gain_db_range),
        },
    }
}

fn sample_compression<R: Rng>(spec: &CompressionSpec, rng: &mut R) -> Disturbance {
    Disturbance::Compression {
        codec: spec.codec,
        bitrate_kbps: spec.bitrate_choices[rng.gen_range(0..spec.bitrate_choices.len())],
    }
}

/// Generates `expansion` candidates per clean utterance for each part and
/// keeps a uniformly random `budget`-sized subset of each. Entries are
/// ordered distortion part first, then by output id.
pub fn build_plan(
    clean_ids: &[String],
    distortions: &[DistortionSpec],
    compressions: &[CompressionSpec],
    expansion: usize,
    distortion_budget: usize,
    compression_budget: usize,
    seed: u64,
) -> AugmentResult<AugmentPlan> {
    if clean_ids.is_empty() {
        return Err(AugmentError::EmptyManifest);
    }
    distortions.iter().try_for_each(DistortionSpec::validate)?;
    compressions.iter().try_for_each(CompressionSpec::validate)?;

    let mut entries = Vec::new();
    let parts: [(&'static str, char, usize, usize); 2] = [
        ("distortion", 'd', distortion_budget, distortions.len()),
        ("compression", 'c', compression_budget, compressions.len()),
    ];
    for (part, tag, budget, n_specs) in parts {
        let candidates = if n_specs == 0 { 0 } else { expansion * clean_ids.len() };
        if budget > candidates {
            return Err(AugmentError::BudgetExceedsCandidates {
                part,
                budget,
                candidates,
            });
        }
        if budget == 0 {
            continue;
        }
        let mut pool = Vec::with_capacity(candidates);
        for utt in clean_ids {
            for k in 0..expansion {
                let mut rng = keyed_rng(seed, part, utt, k);
                let priority: u64 = rng.gen();
                let idx = rng.gen_range(0..n_specs);
                let disturbance = if tag == 'd' {
                    sample_distortion(&distortions[idx], &mut rng)
                } else {
                    sample_compression(&compressions[idx], &mut rng)
                };
                let out_id = format!("{utt}-{tag}{k}");
                pool.push((priority, PlanEntry {
                    out_id,
                    src_id: utt.clone(),
                    disturbance,
                }));
            }
        }
        pool.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.out_id.cmp(&b.1.out_id)));
        let mut chosen: Vec<PlanEntry> = pool.into_iter().take(budget).map(|(_, e)| e).collect();
        chosen.sort_by(|a, b| a.out_id.cmp(&b.out_id));
        entries.extend(chosen);
    }
    Ok(AugmentPlan { seed, entries })
}

impl AugmentPlan {
    /// `# seed = S` header, then `out_id<TAB>src_id<TAB>json` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("# seed = {}\n", self.seed);
        for e in &self.entries {
            let json = serde_json::to_string(&e.disturbance).expect("disturbances always serialize");
            s.push_str(&format!("{}\t{}\t{json}\n", e.out_id, e.src_id));
        }
        s
    }

    pub fn parse(text: &str) -> AugmentResult<Self> {
        let mut seed = 0;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| AugmentError::PlanParse { line: i + 1, msg };
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed =") {
                    seed = v.trim().parse().map_err(|_| err(format!("bad seed {v:?}")))?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.splitn(3, '\t');
            let (Some(out_id), Some(src_id), Some(json)) = (cols.next(), cols.next(), cols.next()) else {
                return Err(err("expected out_id, src_id and disturbance".into()));
            };
            let disturbance = serde_json::from_str(json).map_err(|e| err(e.to_string()))?;
            entries.push(PlanEntry {
                out_id: out_id.to_string(),
                src_id: src_id.to_string(),
                disturbance,
            });
        }
        Ok(Self { seed, entries })
    }

    pub fn save(&self, path: &Path) -> AugmentResult<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> AugmentResult<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn fit_rate(clip: AudioClip, rate: u32) -> AugmentResult<AudioClip> {
    if clip.sample_rate == rate {
        Ok(clip)
    } else {
        Ok(resample(&clip, rate)?)
    }
}

/// Applies a noise, reverb or volume disturbance, reading its source
/// recording from disk. Sources at another rate are resampled first.
pub fn apply_distortion<R: Rng + ?Sized>(
    clip: &AudioClip,
    disturbance: &Disturbance,
    rng: &mut R,
) -> AugmentResult<AudioClip> {
    match disturbance {
        Disturbance::Noise { source, snr_db, .. } => {
            let noise = fit_rate(read_wav(source)?, clip.sample_rate)?;
            Ok(mix_at_snr(clip, &noise, *snr_db, rng)?)
        }
        Disturbance::Reverb { rir } => {
            let mut r = RoomImpulseResponse::from_wav(rir)?;
            if r.sample_rate != clip.sample_rate {
                let c = resample(&AudioClip::new(r.taps, r.sample_rate), clip.sample_rate)?;
                r = RoomImpulseResponse::new(c.samples, c.sample_rate);
            }
            Ok(convolve_rir(clip, &r)?)
        }
        Disturbance::Volume { gain_db } => Ok(apply_gain(clip, *gain_db)),
        Disturbance::Compression { .. } => Err(AugmentError::InvalidSpec(
            "compression entries go through apply_compression".into(),
        )),
    }
}

fn match_length(mut samples: Vec<f64>, len: usize) -> Vec<f64> {
    samples.resize(len, 0.0);
    samples
}

/// 16 kHz → 8 kHz → original rate, trimmed to the input length.
pub fn telephony(clip: &AudioClip) -> AugmentResult<AudioClip> {
    let narrow = resample(clip, 8000)?;
    let back = resample(&narrow, clip.sample_rate)?;
    Ok(AudioClip::new(match_length(back.samples, clip.len()), clip.sample_rate))
}

/// Kaiser-windowed sinc low-pass with unit DC gain.
pub fn lowpass_taps(cutoff_hz: f64, sample_rate: u32, half_taps: usize) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate as f64;
    let m = half_taps as f64;
    let taps: Vec<f64> = (0..=2 * half_taps)
        .map(|i| {
            let x = i as f64 - m;
            let sinc = if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * x).sin() / (std::f64::consts::PI * x)
            };
            sinc * kaiser(x / (m + 1.0), KAISER_BETA)
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Deterministic stand-in for a lossy codec: 3.4 kHz low-pass, then
/// requantization to 2^10 evenly spaced levels on `[-1, 1]`.
pub fn surrogate_codec(clip: &AudioClip) -> AudioClip {
    let taps = lowpass_taps(SURROGATE_CUTOFF_HZ, clip.sample_rate, SURROGATE_HALF_TAPS);
    let h = SURROGATE_HALF_TAPS as isize;
    let n = clip.len() as isize;
    let step = 2.0 / (SURROGATE_LEVELS - 1) as f64;
    let out = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let j = i + k as isize - h;
                if (0..n).contains(&j) {
                    acc += t * clip.samples[j as usize];
                }
            }
            let clipped = acc.clamp(-1.0, 1.0);
            -1.0 + ((clipped + 1.0) / step).round() * step
        })
        .collect();
    AudioClip::new(out, clip.sample_rate)
}

fn resolve_program(program: &str) -> OsString {
    let p = Path::new(program);
    match env::var_os(CODEC_DIR_ENV) {
        Some(dir) if p.is_relative() => Path::new(&dir).join(p).into_os_string(),
        _ => p.as_os_str().to_owned(),
    }
}

fn run_template(template: &[String], subst: &[(&str, String)]) -> AugmentResult<()> {
    let args: Vec<String> = template
        .iter()
        .map(|a| subst.iter().fold(a.clone(), |acc, (k, v)| acc.replace(k, v)))
        .collect();
    let program = resolve_program(&args[0]);
    let output = Command::new(&program).args(&args[1..]).output().map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound || e.kind() == io::ErrorKind::PermissionDenied {
            AugmentError::EncoderNotFound(program.to_string_lossy().into_owned())
        } else {
            AugmentError::Io(e)
        }
    })?;
    if !output.status.success() {
        return Err(AugmentError::EncoderFailed {
            program: program.to_string_lossy().into_owned(),
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    Ok(())
}

/// Runs one compression round trip. External codecs exchange WAV files
/// through `workdir`; the result is resampled to the input rate and
/// trimmed or zero-padded to the input length.
pub fn apply_compression(
    clip: &AudioClip,
    spec: &CompressionSpec,
    bitrate_kbps: u32,
    workdir: &Path,
) -> AugmentResult<AudioClip> {
    spec.validate()?;
    match spec.codec {
        Codec::Telephony => telephony(clip),
        Codec::Surrogate => Ok(surrogate_codec(clip)),
        codec => {
            fs::create_dir_all(workdir)?;
            let input = workdir.join("input.wav");
            let encoded = workdir.join(format!("encoded.{}", codec.extension()));
            let decoded = workdir.join("decoded.wav");
            write_wav(clip, &input)?;
            let common = |i: &Path, o: &Path| {
                vec![
                    ("{in}", i.display().to_string()),
                    ("{out}", o.display().to_string()),
                    ("{bitrate}", bitrate_kbps.to_string()),
                    ("{codec}", codec.to_string()),
                ]
            };
            let encoder = spec.encoder_command.as_deref().unwrap_or_default();
            match &spec.decoder_command {
                Some(decoder) => {
                    run_template(encoder, &common(&input, &encoded))?;
                    run_template(decoder, &common(&encoded, &decoded))?;
                }
                None => run_template(encoder, &common(&input, &decoded))?,
            }
            let out = fit_rate(read_wav(&decoded)?, clip.sample_rate)?;
            Ok(AudioClip::new(match_length(out.samples, clip.len()), clip.sample_rate))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecAugmentConfig {
    /// Maximum width of one frequency mask, percent of the feature dim.
    pub f_pct: f64,
    /// Maximum width of one time mask, percent of the frame count.
    pub t_pct: f64,
    /// Maximum number of frequency masks.
    pub rows: usize,
    /// Maximum number of time masks.
    pub cols: usize,
    pub fill_value: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            f_pct: 10.0,
            t_pct: 10.0,
            rows: 1,
            cols: 1,
            fill_value: 0.0,
        }
    }
}

impl SpecAugmentConfig {
    pub fn disabled() -> Self {
        Self {
            f_pct: 0.0,
            t_pct: 0.0,
            rows: 0,
            cols: 0,
            fill_value: 0.0,
        }
    }

    pub fn validate(&self) -> AugmentResult<()> {
        if !(0.0..=100.0).contains(&self.f_pct) || !(0.0..=100.0).contains(&self.t_pct) {
            return Err(AugmentError::InvalidSpec(format!(
                "mask percentages must be in [0, 100], got f {} t {}",
                self.f_pct, self.t_pct
            )));
        }
        Ok(())
    }
}

fn mask_spans<R: Rng + ?Sized>(len: usize, pct: f64, max_masks: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let max_width = (pct / 100.0 * len as f64).floor() as usize;
    let count = rng.gen_range(0..=max_masks);
    (0..count)
        .map(|_| {
            let width = rng.gen_range(0..=max_width.min(len));
            let start = rng.gen_range(0..=len - width);
            (start, width)
        })
        .collect()
}

/// Masks random frequency bands (columns) and time spans (rows) of a
/// `frames × dim` matrix with `fill_value`. Unmasked cells are untouched.
pub fn spec_augment_matrix<R: Rng + ?Sized>(m: &Matrix, cfg: &SpecAugmentConfig, rng: &mut R) -> Matrix {
    let mut out = m.clone();
    for (start, width) in mask_spans(m.cols, cfg.f_pct, cfg.rows, rng) {
        for r in 0..m.rows {
            out.row_mut(r)[start..start + width].iter_mut().for_each(|v| *v = cfg.fill_value);
        }
    }
    for (start, width) in mask_spans(m.rows, cfg.t_pct, cfg.cols, rng) {
        for r in start..start + width {
            out.row_mut(r).iter_mut().for_each(|v| *v = cfg.fill_value);
        }
    }
    out
}

pub fn spec_augment<R: Rng + ?Sized>(
    features: &FeatureMatrix,
    cfg: &SpecAugmentConfig,
    rng: &mut R,
) -> FeatureMatrix {
    FeatureMatrix {
        values: spec_augment_matrix(&features.values, cfg, rng),
        config: features.config.clone(),
    }
}
