//! Waveform I/O, magnitude spectrograms and random fixed-length segments.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * c).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

pub fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Reads a mono 16-bit PCM WAV at 16 kHz; samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "{}: unsupported encoding ({:?}, {} bits); expected PCM16",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: {} channels; expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "{}: sample rate {}; expected {SAMPLE_RATE}",
            path.display(),
            spec.sample_rate
        )));
    }
    let declared = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("{}: truncated or corrupt data: {e}", path.display())))?;
    if samples.len() != declared {
        return Err(Error::Audio(format!(
            "{}: truncated ({} of {declared} samples)",
            path.display(),
            samples.len()
        )));
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Writes a mono 16-bit PCM WAV. Values are rounded and clipped to the
/// PCM16 range.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(err)?;
    }
    writer.finalize().map_err(err)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub segment_seconds: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            segment_seconds: 3.0,
        }
    }
}

impl SpectrogramConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as usize
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * f64::from(SAMPLE_RATE)).round() as usize
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for a segment of the configured length.
    pub fn frames(&self) -> usize {
        target_frames(self.segment_samples(), self.hop_samples())
    }

    pub fn validate(&self) -> Result<()> {
        let (win, hop) = (self.window_samples(), self.hop_samples());
        if win == 0 || hop == 0 {
            return Err(Error::Config("window and hop must be at least one sample".into()));
        }
        if self.fft_size < win {
            return Err(Error::Config(format!(
                "fft_size {} is shorter than the {win}-sample window",
                self.fft_size
            )));
        }
        if hop > win {
            return Err(Error::Config(format!("hop {hop} exceeds window {win}")));
        }
        if self.segment_samples() < win {
            return Err(Error::Config("segment shorter than one window".into()));
        }
        Ok(())
    }
}

/// Frames from plain framing without padding.
pub fn raw_frame_count(n: usize, window: usize, hop: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / hop + 1
    }
}

/// Frames after edge padding: one per hop of input.
pub fn target_frames(n: usize, hop: usize) -> usize {
    n / hop
}

/// Magnitude spectrogram `[T, F, 1]` with framing metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor<f32>,
    pub hop: usize,
    pub window: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Short-time Fourier magnitude extractor with a cached FFT plan.
#[derive(Clone)]
pub struct Stft {
    cfg: SpectrogramConfig,
    window: Vec<f64>,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Reflect padding without repeating the edge sample.
fn reflect_pad(x: &[f64], left: usize, right: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let reflect = |i: isize| -> f64 {
        if n == 1 {
            return x[0];
        }
        let period = 2 * (n - 1);
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - j;
        }
        x[j as usize]
    };
    (-(left as isize)..n + right as isize).map(reflect).collect()
}

impl Stft {
    pub fn new(cfg: &SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            window: hamming(cfg.window_samples()),
            hop: cfg.hop_samples(),
            fft,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.cfg
    }

    /// Frames the waveform (reflect-padding the edges so that the frame
    /// count is `len / hop`), applies the window, zero-pads each frame to
    /// the FFT size and keeps the magnitudes of the non-negative bins.
    pub fn magnitude(&self, w: &Waveform) -> Result<Spectrogram> {
        let (win, hop) = (self.window.len(), self.hop);
        let n = w.len();
        if n < win {
            return Err(Error::Audio(format!(
                "{n} samples is shorter than one {win}-sample window"
            )));
        }
        let frames = target_frames(n, hop);
        let required = (frames - 1) * hop + win;
        let pad = required.saturating_sub(n);
        let left = pad / 2;
        let padded = reflect_pad(w.samples(), left, pad - left);

        let bins = self.cfg.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for t in 0..frames {
            let frame = &padded[t * hop..t * hop + win];
            for (b, (&s, &h)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(s * h, 0.0);
            }
            for b in buf[win..].iter_mut() {
                *b = Complex::new(0.0, 0.0);
            }
            self.fft.process(&mut buf);
            out.extend(buf[..bins].iter().map(|c| c.norm() as f32));
        }
        Ok(Spectrogram {
            values: Tensor::new(&[frames, bins, 1], out)?,
            hop,
            window: win,
        })
    }
}

pub fn stft_magnitude(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    Stft::new(cfg)?.magnitude(w)
}

/// Uniformly random crop of `seconds` length; shorter inputs are first
/// loop-padded (repeated end to end) to the required length.
pub fn sample_segment<R: Rng + ?Sized>(w: &Waveform, seconds: f64, rng: &mut R) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::Audio("cannot sample from an empty waveform".into()));
    }
    let len = (seconds * f64::from(w.sample_rate)).round() as usize;
    if len == 0 {
        return Err(Error::Audio("segment length is zero".into()));
    }
    let n = w.len();
    let samples = if n < len {
        w.samples().iter().copied().cycle().take(len).collect()
    } else {
        let offset = if n == len { 0 } else { rng.random_range(0..=n - len) };
        w.samples()[offset..offset + len].to_vec()
    };
    Waveform::new(samples, w.sample_rate)
}
