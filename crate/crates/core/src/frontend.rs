//! PCM audio in, normalized log-mel frames out.
//!
//! Per frame: optional pre-emphasis, periodic Hann window, zero-padded FFT,
//! power spectrum, triangular HTK-mel filterbank, natural log floored at
//! `1e-10`. Feature matrices can also be read from and written to a plain
//! text format so that the encoder can be driven without any audio.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, WavError};
use crate::numerics::Matrix;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// Samples scaled into `[-1, 1]`.
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be > 0".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples covering `[start, end)` seconds, clamped to the signal.
    pub fn slice_seconds(&self, start: f64, end: f64) -> Waveform {
        let sr = self.sample_rate as f64;
        let a = ((start * sr).round().max(0.0) as usize).min(self.samples.len());
        let b = ((end * sr).round().max(0.0) as usize).clamp(a, self.samples.len());
        Waveform {
            samples: self.samples[a..b].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Analysis window in samples.
    pub window: usize,
    /// Frame shift in samples.
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Defaults to Nyquist when absent.
    pub f_max: Option<f64>,
    pub pre_emphasis: Option<f64>,
}

impl Default for FrontendConfig {
    /// 16 kHz, 25 ms window, 10 ms shift, 80 mel bins.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            f_min: 0.0,
            f_max: None,
            pre_emphasis: None,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Parameter("sample_rate must be > 0".into()));
        }
        if self.hop == 0 || self.window < self.hop {
            return Err(Error::Parameter(format!(
                "need window >= hop > 0, got window {} hop {}",
                self.window, self.hop
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Parameter("n_mels must be >= 1".into()));
        }
        if self.n_fft < self.window {
            return Err(Error::Parameter(format!(
                "n_fft {} shorter than window {}",
                self.n_fft, self.window
            )));
        }
        let f_max = self.f_max_hz();
        if !(self.f_min >= 0.0 && f_max > self.f_min && f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Parameter(format!(
                "mel band [{}, {}] invalid for sample rate {}",
                self.f_min, f_max, self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn f_max_hz(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn frame_shift_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    pub fn frame_length_seconds(&self) -> f64 {
        self.window as f64 / self.sample_rate as f64
    }

    /// `1 + floor((num_samples - window) / hop)`, or 0 when too short.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.window {
            0
        } else {
            1 + (num_samples - self.window) / self.hop
        }
    }
}

/// T×F feature frames plus their timing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Matrix,
    /// Seconds between frame starts.
    pub frame_shift: f64,
    /// Seconds covered by one frame.
    pub frame_length: f64,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn duration(&self) -> f64 {
        self.num_frames() as f64 * self.frame_shift
    }

    /// Frames whose start time lies in `[start, end)` seconds.
    pub fn slice_seconds(&self, start: f64, end: f64) -> FeatureMatrix {
        let t = self.num_frames();
        let a = ((start / self.frame_shift).round().max(0.0) as usize).min(t);
        let b = ((end / self.frame_shift).round().max(0.0) as usize).clamp(a, t);
        let data = self.frames.data()[a * self.dim()..b * self.dim()].to_vec();
        FeatureMatrix {
            frames: Matrix::new(b - a, self.dim(), data).expect("slice within bounds"),
            frame_shift: self.frame_shift,
            frame_length: self.frame_length,
        }
    }
}

/// Per-dimension global mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics of `f`; a constant dimension gets std 1.
    pub fn from_features(f: &FeatureMatrix) -> Result<Self> {
        let t = f.num_frames();
        if t == 0 {
            return Err(Error::EmptyInput("no frames to compute statistics from".into()));
        }
        let dim = f.dim();
        let mut mean = vec![0.0; dim];
        for row in f.frames.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; dim];
        for row in f.frames.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / t as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

pub fn normalize_global(f: &FeatureMatrix, stats: &NormalizationStats) -> Result<FeatureMatrix> {
    if stats.mean.len() != f.dim() || stats.std.len() != f.dim() {
        return Err(Error::shape(
            "normalize_global",
            &f.frames.shape(),
            &[stats.mean.len(), stats.std.len()],
        ));
    }
    if stats.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Parameter("normalization std must be > 0".into()));
    }
    let mut out = f.clone();
    for i in 0..out.num_frames() {
        for ((v, m), s) in out.frames.row_mut(i).iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, evaluated at the exact frequency
/// of each FFT bin. Shape is `(n_fft/2 + 1) × n_mels`.
pub fn mel_filterbank(n_fft: usize, sample_rate: u32, n_mels: usize, f_min: f64, f_max: f64) -> Matrix {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(bins, n_mels);
    for k in 0..bins {
        let f = k as f64 * sample_rate as f64 / n_fft as f64;
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb.set(k, m, w);
        }
    }
    fb
}

/// Center frequencies (Hz) and edges of each mel triangle.
pub fn mel_band_edges(n_mels: usize, f_min: f64, f_max: f64) -> Vec<(f64, f64, f64)> {
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels).map(|m| (edges[m], edges[m + 1], edges[m + 2])).collect()
}

/// Reusable log-mel extractor; holds the FFT plan, window and filterbank.
pub struct MelFrontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    filterbank: Matrix,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend").field("cfg", &self.cfg).finish()
    }
}

impl MelFrontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filterbank = mel_filterbank(cfg.n_fft, cfg.sample_rate, cfg.n_mels, cfg.f_min, cfg.f_max_hz());
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    /// Windowed, pre-emphasized frame samples ready for the transform.
    fn prepare_frame(&self, frame: &[f64]) -> Vec<f64> {
        let mut x = frame.to_vec();
        if let Some(a) = self.cfg.pre_emphasis {
            for i in (1..x.len()).rev() {
                x[i] -= a * x[i - 1];
            }
            x[0] -= a * x[0];
        }
        for (v, w) in x.iter_mut().zip(&self.window) {
            *v *= w;
        }
        x
    }

    /// Power spectrum `|X_k|^2`, `k = 0..=n_fft/2`.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let x = self.prepare_frame(frame);
        let mut buf: Vec<Complex<f64>> = x
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.cfg.n_fft)
            .collect();
        self.fft.process(&mut buf);
        buf[..self.cfg.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::Parameter(format!(
                "waveform sample rate {} does not match frontend {} (no resampling)",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        let t = self.cfg.num_frames(w.samples.len());
        if t == 0 {
            return Err(Error::EmptyInput(format!(
                "{} samples is shorter than one {}-sample window",
                w.samples.len(),
                self.cfg.window
            )));
        }
        let mut frames = Matrix::zeros(t, self.cfg.n_mels);
        for i in 0..t {
            let start = i * self.cfg.hop;
            let power = self.power_spectrum(&w.samples[start..start + self.cfg.window]);
            let row = frames.row_mut(i);
            for (k, p) in power.iter().enumerate() {
                for (m, out) in row.iter_mut().enumerate() {
                    *out += p * self.filterbank.get(k, m);
                }
            }
            for v in row.iter_mut() {
                *v = v.max(LOG_FLOOR).ln();
            }
        }
        Ok(FeatureMatrix {
            frames,
            frame_shift: self.cfg.frame_shift_seconds(),
            frame_length: self.cfg.frame_length_seconds(),
        })
    }
}

pub fn log_mel_spectrogram(w: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    MelFrontend::new(*cfg)?.compute(w)
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(msg) => WavError::MalformedHeader(msg.to_string()).into(),
        hound::Error::Unsupported => WavError::UnsupportedEncoding("unsupported wav variant".into()).into(),
        other => WavError::UnsupportedEncoding(other.to_string()).into(),
    }
}

/// Reads a 16-bit PCM RIFF/WAVE file, keeping channel `channel`.
pub fn read_wav(path: impl AsRef<Path>, channel: usize) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    wav_from_reader(reader, channel)
}

pub fn read_wav_from<R: std::io::Read>(input: R, channel: usize) -> Result<Waveform> {
    let reader = hound::WavReader::new(input).map_err(map_hound)?;
    wav_from_reader(reader, channel)
}

fn wav_from_reader<R: std::io::Read>(reader: hound::WavReader<R>, channel: usize) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(WavError::UnsupportedEncoding(format!(
            "{:?} {}-bit (only PCM16 is supported)",
            spec.sample_format, spec.bits_per_sample
        ))
        .into());
    }
    let channels = spec.channels as usize;
    if channel >= channels {
        return Err(WavError::Channel {
            requested: channel,
            channels,
        }
        .into());
    }
    let mut samples = Vec::with_capacity(reader.len() as usize / channels);
    for (i, s) in reader.into_samples::<i16>().enumerate() {
        let s = s.map_err(map_hound)?;
        if i % channels == channel {
            samples.push(s as f64 / 32768.0);
        }
    }
    if samples.is_empty() {
        return Err(WavError::EmptyPayload.into());
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono PCM16; samples are rounded to the nearest step and clipped.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

/// Text feature format: a header `T F frame_shift frame_length`, then `T`
/// lines of `F` space-separated reals.
pub fn write_features<W: Write>(out: W, f: &FeatureMatrix) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{} {} {} {}", f.num_frames(), f.dim(), f.frame_shift, f.frame_length)?;
    for row in f.frames.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_features<R: BufRead>(input: R) -> Result<FeatureMatrix> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("feature file is empty".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::Format(format!("bad feature header `{header}`")));
    }
    let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("header `{s}`: {e}")));
    let parse_f64 = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("value `{s}`: {e}")));
    let (t, dim) = (parse_usize(parts[0])?, parse_usize(parts[1])?);
    let (frame_shift, frame_length) = (parse_f64(parts[2])?, parse_f64(parts[3])?);
    if !(frame_shift > 0.0) || !(frame_length > 0.0) {
        return Err(Error::Format("frame timing must be positive".into()));
    }
    let mut data = Vec::with_capacity(t * dim);
    for i in 0..t {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("expected {t} frames, found {i}")))??;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(parse_f64(tok)?);
        }
        if data.len() - before != dim {
            return Err(Error::Format(format!(
                "frame {i} has {} values, expected {dim}",
                data.len() - before
            )));
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite feature value".into()));
    }
    Ok(FeatureMatrix {
        frames: Matrix::new(t, dim, data)?,
        frame_shift,
        frame_length,
    })
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    read_features(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_feature_file(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    write_features(std::fs::File::create(path)?, f)
}
