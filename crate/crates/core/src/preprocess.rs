//! Turns clips into model inputs.

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::spectrogram::{mel_spectrogram, stft_magnitude};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Mel,
    Spectrogram,
    Waveform,
}

impl Representation {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mel" | "melgram" => Some(Self::Mel),
            "spectrogram" | "spec" | "stft" => Some(Self::Spectrogram),
            "waveform" | "wave" | "raw" => Some(Self::Waveform),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Mel => "Melgram",
            Self::Spectrogram => "Spectrogram",
            Self::Waveform => "Waveform",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub representation: Representation,
    pub frame_len: usize,
    /// Defaults to `frame_len / 2`.
    pub hop_len: Option<usize>,
    pub n_mels: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            representation: Representation::Mel,
            frame_len: 512,
            hop_len: None,
            n_mels: 128,
        }
    }
}

impl PreprocessConfig {
    pub fn hop(&self) -> usize {
        self.hop_len.unwrap_or(self.frame_len / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.representation == Representation::Waveform {
            return Ok(());
        }
        if !self.frame_len.is_power_of_two() || self.frame_len < 8 {
            return Err(Error::config(
                "preprocess.frame_len",
                format!("{} is not a power of two ≥ 8", self.frame_len),
            ));
        }
        if self.hop() == 0 {
            return Err(Error::config("preprocess.hop_len", "must be positive"));
        }
        if self.representation == Representation::Mel
            && (self.n_mels == 0 || self.n_mels > self.frame_len / 2 + 1)
        {
            return Err(Error::config(
                "preprocess.n_mels",
                format!(
                    "{} mel bands do not fit a {}-sample frame",
                    self.n_mels, self.frame_len
                ),
            ));
        }
        Ok(())
    }
}

/// One model input without the batch axis: `[1, bins, frames]` for
/// spectrograms and `[1, samples]` for waveforms.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn prepare(clip: &AudioClip, cfg: &PreprocessConfig) -> Result<ModelInput> {
    match cfg.representation {
        Representation::Waveform => Ok(ModelInput {
            shape: vec![1, clip.len()],
            data: clip.samples.clone(),
        }),
        Representation::Spectrogram => {
            let s = stft_magnitude(clip, cfg.frame_len, cfg.hop())?;
            Ok(ModelInput {
                shape: vec![1, s.bins, s.frames],
                data: s.values,
            })
        }
        Representation::Mel => {
            let s = mel_spectrogram(clip, cfg.frame_len, cfg.hop(), cfg.n_mels)?;
            Ok(ModelInput {
                shape: vec![1, s.bins, s.frames],
                data: s.values,
            })
        }
    }
}

/// Input shape a clip of `len` samples produces.
pub fn input_shape(len: usize, cfg: &PreprocessConfig) -> Result<Vec<usize>> {
    match cfg.representation {
        Representation::Waveform => Ok(vec![1, len]),
        r => {
            let frames = crate::spectrogram::frame_count(len, cfg.frame_len, cfg.hop())?;
            let bins = if r == Representation::Mel {
                cfg.n_mels
            } else {
                cfg.frame_len / 2 + 1
            };
            Ok(vec![1, bins, frames])
        }
    }
}
