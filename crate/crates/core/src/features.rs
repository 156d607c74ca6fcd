//! STFT feature frontends: LFCC, LLFB and DCT-DFT spectra.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError};

/// Magic bytes of a `.feat` file.
pub const FEATURE_MAGIC: &[u8; 4] = b"SGFT";
pub const FEATURE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip of {samples} samples is shorter than one {window}-sample window")]
    ClipTooShort { samples: usize, window: usize },
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("feature file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Lfcc,
    Llfb,
    DctDftSpec,
}

impl FromStr for FeatureKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lfcc" => Ok(Self::Lfcc),
            "llfb" => Ok(Self::Llfb),
            "dctdft" | "dct_dft_spec" | "dct-dft" => Ok(Self::DctDftSpec),
            other => Err(FeatureError::InvalidConfig(format!("unknown feature kind {other:?}"))),
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lfcc => "lfcc",
            Self::Llfb => "llfb",
            Self::DctDftSpec => "dctdft",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub dim: usize,
    pub nfft: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub sample_rate: u32,
    pub n_filters: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::lfcc(80, 1024)
    }
}

impl FeatureConfig {
    /// LFCC with `n_filters = dim`, 25 ms / 10 ms framing at 16 kHz.
    pub fn lfcc(dim: usize, nfft: usize) -> Self {
        Self {
            kind: FeatureKind::Lfcc,
            dim,
            nfft,
            win_ms: 25.0,
            hop_ms: 10.0,
            sample_rate: 16000,
            n_filters: dim,
            log_floor: 1e-10,
        }
    }

    pub fn llfb(dim: usize, nfft: usize) -> Self {
        Self {
            kind: FeatureKind::Llfb,
            ..Self::lfcc(dim, nfft)
        }
    }

    /// DCT of the log magnitude spectrum keeping every bin.
    pub fn dct_dft(nfft: usize) -> Self {
        Self {
            kind: FeatureKind::DctDftSpec,
            dim: nfft / 2 + 1,
            n_filters: nfft / 2 + 1,
            ..Self::lfcc(nfft / 2 + 1, nfft)
        }
    }

    pub fn win_samples(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidConfig(m));
        if self.dim == 0 || self.nfft == 0 || self.n_filters == 0 || self.sample_rate == 0 {
            return bad("dim, nfft, n_filters and sample_rate must be positive".into());
        }
        if self.hop_ms <= 0.0 || self.win_ms < self.hop_ms {
            return bad(format!("need win_ms >= hop_ms > 0, got {} / {}", self.win_ms, self.hop_ms));
        }
        if self.hop_samples() == 0 {
            return bad("hop shorter than one sample".into());
        }
        if self.nfft < self.win_samples() {
            return bad(format!("nfft {} < window {} samples", self.nfft, self.win_samples()));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        match self.kind {
            FeatureKind::Lfcc if self.dim > self.n_filters => {
                bad(format!("LFCC dim {} exceeds n_filters {}", self.dim, self.n_filters))
            }
            FeatureKind::Llfb if self.dim != self.n_filters => {
                bad(format!("LLFB dim {} must equal n_filters {}", self.dim, self.n_filters))
            }
            FeatureKind::DctDftSpec if self.dim > self.n_bins() => {
                bad(format!("DCT-DFT dim {} exceeds {} bins", self.dim, self.n_bins()))
            }
            _ => Ok(()),
        }
    }

    /// Number of frames produced for `n` samples, or `None` when shorter
    /// than one window.
    pub fn frame_count(&self, n: usize) -> Option<usize> {
        let w = self.win_samples();
        (n >= w).then(|| 1 + (n - w) / self.hop_samples())
    }
}

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        assert_eq!(data.len(), rows.len() * cols, "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                for (o, b) in out.row_mut(r).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Applies `self` to a vector: `self · v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Magnitude spectrogram, frames × (nfft/2 + 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Matrix,
    pub frame_hop_ms: f64,
}

/// Frame-level features, frames × dim.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub config: FeatureConfig,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.values.rows
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Hamming-windowed short-time magnitude spectrum.
pub fn stft_magnitude(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Spectrogram, FeatureError> {
    cfg.validate()?;
    let win = cfg.win_samples();
    let hop = cfg.hop_samples();
    let frames = cfg.frame_count(clip.len()).ok_or(FeatureError::ClipTooShort {
        samples: clip.len(),
        window: win,
    })?;
    let window = hamming(win);
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(cfg.nfft);
    let bins = cfg.n_bins();
    let mut values = Matrix::zeros(frames, bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.nfft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..frames {
        let start = f * hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (b, w)) in buf.iter_mut().zip(&window).enumerate() {
            b.re = clip.samples[start + i] * w;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (v, c) in values.row_mut(f).iter_mut().zip(&buf[..bins]) {
            *v = c.norm();
        }
    }
    Ok(Spectrogram {
        values,
        frame_hop_ms: cfg.hop_ms,
    })
}

/// Triangular filters with peaks equally spaced on the linear frequency
/// axis. Filter `i` rises from edge `i` to a unit peak at edge `i + 1` and
/// falls to zero at edge `i + 2`, with `n_filters + 2` edges spanning
/// `[0, Nyquist]`.
pub fn linear_filterbank(cfg: &FeatureConfig) -> Matrix {
    let n = cfg.n_filters;
    let bins = cfg.n_bins();
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let spacing = nyquist / (n + 1) as f64;
    let mut fb = Matrix::zeros(n, bins);
    for i in 0..n {
        let left = i as f64 * spacing;
        let peak = left + spacing;
        let right = peak + spacing;
        for b in 0..bins {
            let freq = b as f64 * cfg.sample_rate as f64 / cfg.nfft as f64;
            let w = if freq > left && freq <= peak {
                (freq - left) / spacing
            } else if freq > peak && freq < right {
                (right - freq) / spacing
            } else {
                0.0
            };
            fb.set(i, b, w.clamp(0.0, 1.0));
        }
    }
    fb
}

/// Orthonormal DCT-II basis, `n_out` rows of length `n_in`.
pub fn dct_matrix(n_in: usize, n_out: usize) -> Matrix {
    assert!(n_out <= n_in, "dct_matrix: n_out {n_out} > n_in {n_in}");
    let mut d = Matrix::zeros(n_out, n_in);
    let n = n_in as f64;
    for k in 0..n_out {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..n_in {
            d.set(k, i, scale * (PI * (i as f64 + 0.5) * k as f64 / n).cos());
        }
    }
    d
}

/// Precomputed filterbank and DCT matrices for one config. Build once and
/// share across utterances.
#[derive(Debug, Clone)]
pub struct Extractor {
    cfg: FeatureConfig,
    filterbank: Option<Matrix>,
    dct: Option<Matrix>,
}

impl Extractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let (filterbank, dct) = match cfg.kind {
            FeatureKind::Lfcc => (
                Some(linear_filterbank(cfg)),
                Some(dct_matrix(cfg.n_filters, cfg.dim)),
            ),
            FeatureKind::Llfb => (Some(linear_filterbank(cfg)), None),
            FeatureKind::DctDftSpec => (None, Some(dct_matrix(cfg.n_bins(), cfg.dim))),
        };
        Ok(Self {
            cfg: cfg.clone(),
            filterbank,
            dct,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix, FeatureError> {
        let cfg = &self.cfg;
        let resampled;
        let clip = if clip.sample_rate != cfg.sample_rate {
            resampled = audio::resample(clip, cfg.sample_rate)?;
            &resampled
        } else {
            clip
        };
        let spec = stft_magnitude(clip, cfg)?;
        let frames = spec.values.rows;
        let mut out = Matrix::zeros(frames, cfg.dim);
        let floor = cfg.log_floor;
        for f in 0..frames {
            let mag = spec.values.row(f);
            let logs: Vec<f64> = match &self.filterbank {
                Some(fb) => {
                    let power: Vec<f64> = mag.iter().map(|m| m * m).collect();
                    fb.apply(&power).into_iter().map(|e| e.max(floor).ln()).collect()
                }
                None => mag.iter().map(|m| m.max(floor).ln()).collect(),
            };
            let row = match &self.dct {
                Some(d) => d.apply(&logs),
                None => logs,
            };
            out.row_mut(f).copy_from_slice(&row);
        }
        Ok(FeatureMatrix {
            values: out,
            config: cfg.clone(),
        })
    }
}

/// Extracts static features for one clip. Clips at another sample rate are
/// resampled first.
pub fn extract(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    Extractor::new(cfg)?.extract(clip)
}

/// Per-utterance column mean subtraction.
pub fn mean_normalize(features: &FeatureMatrix) -> FeatureMatrix {
    let m = &features.values;
    let mut out = m.clone();
    if m.rows == 0 {
        return features.clone();
    }
    for c in 0..m.cols {
        let mean = (0..m.rows).map(|r| m.get(r, c)).sum::<f64>() / m.rows as f64;
        for r in 0..m.rows {
            out.set(r, c, m.get(r, c) - mean);
        }
    }
    FeatureMatrix {
        values: out,
        config: features.config.clone(),
    }
}

/// Writes `<16-byte header><row-major f32 LE>`; the header is magic,
/// format version, frames and dim (u32 LE each).
pub fn write_feature_file(features: &FeatureMatrix, path: &Path) -> Result<(), FeatureError> {
    let m = &features.values;
    let mut buf = Vec::with_capacity(16 + 4 * m.data.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for &v in &m.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a `.feat` file. The stored matrix carries no config, so the
/// caller supplies the one it was extracted with.
pub fn read_feature_file(path: &Path, config: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(FeatureError::BadFile("truncated header".into()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(FeatureError::BadFile("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_FORMAT_VERSION {
        return Err(FeatureError::BadFile(format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(FeatureError::BadFile(format!(
            "expected {} payload bytes, found {}",
            rows * cols * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(FeatureMatrix {
        values: Matrix { rows, cols, data },
        config: config.clone(),
    })
}
