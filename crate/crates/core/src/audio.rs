//! Sample-domain primitives: WAV I/O, resampling, gain, SNR mixing and
//! reverberation.
//!
//! Every function here is pure. Randomness (noise crop offsets) is drawn
//! from a caller-supplied RNG.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

/// Half-width of the resampling kernel; the full kernel spans 64 taps.
const RESAMPLE_HALF_TAPS: i64 = 32;
/// Kaiser window shape used by every windowed-sinc filter in the crate.
pub const KAISER_BETA: f64 = 8.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("noise clip has zero power")]
    ZeroPowerNoise,
    #[error("speech clip has zero power")]
    ZeroPowerSpeech,
    #[error("room impulse response has no nonzero tap")]
    EmptyRir,
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

/// Mono PCM audio with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude over the whole clip.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl RoomImpulseResponse {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Self {
        Self { taps, sample_rate }
    }

    /// Loads a RIR stored as a mono WAV file.
    pub fn from_wav(path: &Path) -> Result<Self, AudioError> {
        let clip = read_wav(path)?;
        Ok(Self::new(clip.samples, clip.sample_rate))
    }
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|s| s * s).sum::<f64>() / x.len() as f64
}

fn hard_clip(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Reads a 16-bit signed PCM mono RIFF/WAVE file.
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let file = io::BufReader::new(fs::File::open(path)?);
    // the file opened, so read failures past this point are malformed data
    let reader = hound::WavReader::new(file).map_err(|e| match map_hound(e) {
        AudioError::Io(io) => AudioError::CorruptHeader(io.to_string()),
        other => other,
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{} channels, expected mono",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{:?} {}-bit samples, expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::CorruptHeader("sample rate is zero".into()));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes a clip as 16-bit mono PCM. Samples are rounded to the nearest
/// quantization level and saturated to the `i16` range.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<(), AudioError> {
    if clip.sample_rate == 0 {
        return Err(AudioError::InvalidRate(0));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)?;
    Ok(())
}

fn map_hound(e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(io) => {
            if io.kind() == io::ErrorKind::UnexpectedEof {
                AudioError::CorruptHeader("unexpected end of file".into())
            } else {
                AudioError::Io(io)
            }
        }
        hound::Error::FormatError(msg) => AudioError::CorruptHeader(msg.to_string()),
        hound::Error::Unsupported => AudioError::UnsupportedFormat("unsupported WAV encoding".into()),
        hound::Error::TooWide => AudioError::UnsupportedFormat("sample width too large".into()),
        hound::Error::InvalidSampleFormat => {
            AudioError::UnsupportedFormat("invalid sample format".into())
        }
        other => AudioError::CorruptHeader(other.to_string()),
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
pub(crate) fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser window evaluated at `u` in `[-1, 1]`; zero outside.
pub(crate) fn kaiser(u: f64, beta: f64) -> f64 {
    if u.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - u * u).sqrt()) / bessel_i0(beta)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited sample-rate conversion with a 64-tap Kaiser-windowed sinc
/// kernel evaluated at the exact fractional phase of every output sample.
///
/// The kernel weights of each output sample are normalized to unit sum, so
/// DC passes unchanged away from the edges.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(0));
    }
    if clip.sample_rate == 0 {
        return Err(AudioError::InvalidRate(0));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = clip.sample_rate as f64;
    let dst = target_rate as f64;
    let n_in = clip.samples.len();
    let n_out = (n_in as f64 * dst / src).round() as usize;
    // cutoff relative to the input Nyquist frequency
    let cutoff = (dst / src).min(1.0);
    let step = src / dst;
    let half = RESAMPLE_HALF_TAPS;

    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out {
        let t = m as f64 * step;
        let centre = t.floor() as i64;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for k in (centre - half + 1)..=(centre + half) {
            let d = t - k as f64;
            let w = cutoff * sinc(cutoff * d) * kaiser(d / half as f64, KAISER_BETA);
            norm += w;
            if k >= 0 && (k as usize) < n_in {
                acc += w * clip.samples[k as usize];
            }
        }
        out.push(if norm.abs() > 1e-12 { acc / norm } else { acc });
    }
    Ok(AudioClip::new(out, target_rate))
}

/// Multiplies by `10^(gain_db/20)` and hard-clips to `[-1, 1]`.
pub fn apply_gain(clip: &AudioClip, gain_db: f64) -> AudioClip {
    let factor = 10f64.powf(gain_db / 20.0);
    AudioClip::new(
        clip.samples.iter().map(|s| hard_clip(s * factor)).collect(),
        clip.sample_rate,
    )
}

/// Fits `noise` to `len` samples: shorter noise is tiled, longer noise is
/// cropped at a random offset.
pub fn fit_noise_length<R: Rng + ?Sized>(noise: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
    if noise.is_empty() || len == 0 {
        return vec![0.0; len];
    }
    if noise.len() > len {
        let offset = rng.gen_range(0..=noise.len() - len);
        noise[offset..offset + len].to_vec()
    } else {
        noise.iter().copied().cycle().take(len).collect()
    }
}

/// Scale factor that brings `noise` to `snr_db` below `speech`, with powers
/// measured over the whole clip.
pub fn snr_scale(speech: &[f64], noise: &[f64], snr_db: f64) -> Result<f64, AudioError> {
    let ps = mean_power(speech);
    let pn = mean_power(noise);
    if pn <= 0.0 {
        return Err(AudioError::ZeroPowerNoise);
    }
    if ps <= 0.0 {
        return Err(AudioError::ZeroPowerSpeech);
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Adds noise at the requested signal-to-noise ratio. The sum is hard-clipped
/// to `[-1, 1]`.
pub fn mix_at_snr<R: Rng + ?Sized>(
    speech: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    rng: &mut R,
) -> Result<AudioClip, AudioError> {
    if speech.sample_rate != noise.sample_rate {
        return Err(AudioError::RateMismatch(speech.sample_rate, noise.sample_rate));
    }
    if mean_power(&noise.samples) <= 0.0 {
        return Err(AudioError::ZeroPowerNoise);
    }
    let fitted = fit_noise_length(&noise.samples, speech.len(), rng);
    let alpha = snr_scale(&speech.samples, &fitted, snr_db)?;
    let mixed = speech
        .samples
        .iter()
        .zip(&fitted)
        .map(|(s, n)| hard_clip(s + alpha * n))
        .collect();
    Ok(AudioClip::new(mixed, speech.sample_rate))
}

/// Convolves with a room impulse response, keeps the first `len` samples
/// and rescales so the output peak equals the input peak.
pub fn convolve_rir(clip: &AudioClip, rir: &RoomImpulseResponse) -> Result<AudioClip, AudioError> {
    if rir.taps.iter().all(|&t| t == 0.0) {
        return Err(AudioError::EmptyRir);
    }
    if rir.sample_rate != clip.sample_rate {
        return Err(AudioError::RateMismatch(clip.sample_rate, rir.sample_rate));
    }
    let n = clip.len();
    let mut out = vec![0.0; n];
    for (k, &h) in rir.taps.iter().enumerate() {
        if h == 0.0 || k >= n {
            continue;
        }
        for (o, &x) in out[k..].iter_mut().zip(&clip.samples) {
            *o += h * x;
        }
    }
    let in_peak = clip.peak();
    let out_peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if out_peak > 0.0 && in_peak > 0.0 {
        let g = in_peak / out_peak;
        // unit gain is left untouched so identity RIRs are exact
        if g != 1.0 {
            out.iter_mut().for_each(|s| *s *= g);
        }
    }
    Ok(AudioClip::new(out, clip.sample_rate))
}

/// Reads a plain-text path list. Blank lines and `#` comments are skipped;
/// relative paths resolve against the manifest's directory.
pub fn read_path_manifest(path: &Path) -> Result<Vec<PathBuf>, AudioError> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let entries: Vec<PathBuf> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(AudioError::Manifest {
            path: path.to_path_buf(),
            msg: "no entries".into(),
        });
    }
    Ok(entries)
}
