//! STFT magnitude and mel spectrogram front ends.
//!
//! Frames lie entirely inside the clip (no centre padding), so a clip of
//! `len` samples yields `1 + (len - frame_len) / hop_len` frames. Both front
//! ends finish with `log(1 + 1e4 · x)` compression. The mel scale is the
//! HTK one, `mel = 2595 · log10(1 + f / 700)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

pub const LOG_GAIN: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrogramScale {
    LinearStft,
    Mel,
}

/// `[bins × frames]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f32>,
    pub bins: usize,
    pub frames: usize,
    pub frame_len: usize,
    pub hop_len: usize,
    pub scale: SpectrogramScale,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }
}

pub fn frame_count(len: usize, frame_len: usize, hop_len: usize) -> Result<usize> {
    if frame_len == 0 || hop_len == 0 {
        return Err(Error::Size("frame and hop lengths must be positive".into()));
    }
    if len < frame_len {
        return Err(Error::Size(format!(
            "clip of {len} samples is shorter than one {frame_len}-sample frame"
        )));
    }
    Ok(1 + (len - frame_len) / hop_len)
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Raw (uncompressed) magnitude spectra, `frames × (frame_len/2 + 1)`,
/// frame-major.
pub fn magnitude_frames(
    samples: &[f32],
    frame_len: usize,
    hop_len: usize,
) -> Result<(usize, Vec<f64>)> {
    let frames = frame_count(samples.len(), frame_len, hop_len)?;
    let bins = frame_len / 2 + 1;
    let window = hann(frame_len);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(frame_len);
    let mut out = vec![0.0f64; frames * bins];
    out.par_chunks_mut(bins).enumerate().for_each_init(
        || vec![Complex::new(0.0, 0.0); frame_len],
        |buf, (f, row)| {
            let start = f * hop_len;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(samples[start + i] as f64 * window[i], 0.0);
            }
            fft.process(buf);
            for (k, r) in row.iter_mut().enumerate() {
                *r = buf[k].norm();
            }
        },
    );
    Ok((frames, out))
}

fn compress_log(x: f64) -> f32 {
    (1.0 + LOG_GAIN * x).ln() as f32
}

/// Hann-windowed STFT magnitude with log compression.
pub fn stft_magnitude(clip: &AudioClip, frame_len: usize, hop_len: usize) -> Result<Spectrogram> {
    let (frames, mags) = magnitude_frames(&clip.samples, frame_len, hop_len)?;
    let bins = frame_len / 2 + 1;
    let mut values = vec![0.0f32; bins * frames];
    for f in 0..frames {
        for k in 0..bins {
            values[k * frames + f] = compress_log(mags[f * bins + k]);
        }
    }
    Ok(Spectrogram {
        values,
        bins,
        frames,
        frame_len,
        hop_len,
        scale: SpectrogramScale::LinearStft,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over `[0, fs/2]`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels × bins`, row-major.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub bins: usize,
    /// `(left, centre, right)` edge frequencies of each triangle in Hz.
    pub edges: Vec<(f64, f64, f64)>,
}

impl MelFilterbank {
    /// Centres are equally spaced on the mel scale. Each triangle peaks at 1
    /// at its centre frequency; its half-widths are widened to at least one
    /// FFT bin so that every filter covers at least one bin even when
    /// neighbouring mel centres are closer than the bin spacing.
    pub fn new(n_mels: usize, frame_len: usize, sample_rate: u32) -> Result<Self> {
        let bins = frame_len / 2 + 1;
        if n_mels == 0 || n_mels > bins {
            return Err(Error::Size(format!(
                "{n_mels} mel bands cannot be built from {bins} FFT bins"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let bin_hz = sample_rate as f64 / frame_len as f64;
        let mel_max = hz_to_mel(nyquist);
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * bins];
        let mut edges = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let centre = points[m + 1];
            let left = points[m].min(centre - bin_hz);
            let right = points[m + 2].max(centre + bin_hz);
            edges.push((left, centre, right));
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f <= left || f >= right {
                    0.0
                } else if f <= centre {
                    (f - left) / (centre - left)
                } else {
                    (right - f) / (right - centre)
                };
                weights[m * bins + k] = w;
            }
        }
        Ok(Self {
            weights,
            n_mels,
            bins,
            edges,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// Filter energies for one power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Mel filterbank applied to the power spectrogram, then log compression.
pub fn mel_spectrogram(
    clip: &AudioClip,
    frame_len: usize,
    hop_len: usize,
    n_mels: usize,
) -> Result<Spectrogram> {
    let bank = MelFilterbank::new(n_mels, frame_len, clip.sample_rate)?;
    let (frames, mags) = magnitude_frames(&clip.samples, frame_len, hop_len)?;
    let bins = bank.bins;
    let mut values = vec![0.0f32; n_mels * frames];
    for f in 0..frames {
        let power: Vec<f64> = mags[f * bins..(f + 1) * bins]
            .iter()
            .map(|m| m * m)
            .collect();
        for (m, e) in bank.apply(&power).into_iter().enumerate() {
            values[m * frames + f] = compress_log(e);
        }
    }
    Ok(Spectrogram {
        values,
        bins: n_mels,
        frames,
        frame_len,
        hop_len,
        scale: SpectrogramScale::Mel,
    })
}
