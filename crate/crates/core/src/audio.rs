//! Sample buffers, dB helpers and the seeded loop synthesizer that stands in
//! for a corpus of recorded drum and guitar loops.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_DURATION_S: f64 = 2.0;
/// Peak level of synthesized loops, in dBFS.
pub const LOOP_PEAK_DBFS: f64 = -1.0;

pub fn db_to_linear(level_db: f64) -> f64 {
    10f64.powf(level_db / 20.0)
}

pub fn linear_to_db(amplitude: f64) -> f64 {
    20.0 * amplitude.log10()
}

/// Mono clip. Samples are finite and the buffer is never empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    pub id: String,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, sample_rate: u32, samples: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if sample_rate == 0 {
            return Err(Error::Data(format!("clip `{id}` has sample rate 0")));
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("clip `{id}` is empty")));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!(
                "clip `{id}` has a non-finite sample at {i}"
            )));
        }
        Ok(Self {
            id,
            sample_rate,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Scales the clip so its peak sits at `level_dbfs`. Silent clips are
    /// returned unchanged.
    pub fn normalized_to(&self, level_dbfs: f64) -> Self {
        let peak = self.peak() as f64;
        if peak == 0.0 {
            return self.clone();
        }
        let gain = db_to_linear(level_dbfs) / peak;
        Self {
            id: self.id.clone(),
            sample_rate: self.sample_rate,
            samples: self
                .samples
                .iter()
                .map(|&s| (s as f64 * gain) as f32)
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopKind {
    DrumLike,
    PluckLike,
}

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

fn default_subdivision() -> u32 {
    1
}

/// Everything that determines a synthetic loop. Identical recipes produce
/// bit-identical clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRecipe {
    pub kind: LoopKind,
    pub tempo_bpm: f64,
    pub duration_s: f64,
    pub seed: u64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Events per beat.
    #[serde(default = "default_subdivision")]
    pub subdivision: u32,
}

impl LoopRecipe {
    pub fn new(kind: LoopKind, tempo_bpm: f64, duration_s: f64, seed: u64) -> Self {
        Self {
            kind,
            tempo_bpm,
            duration_s,
            seed,
            sample_rate: DEFAULT_SAMPLE_RATE,
            subdivision: 1,
        }
    }

    pub fn with_sample_rate(mut self, sample_rate: u32) -> Self {
        self.sample_rate = sample_rate;
        self
    }

    fn validate(&self) -> Result<usize> {
        if !(self.tempo_bpm.is_finite() && self.tempo_bpm > 0.0) {
            return Err(Error::InvalidRecipe(format!(
                "tempo_bpm must be positive, got {}",
                self.tempo_bpm
            )));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::InvalidRecipe(format!(
                "duration_s must be positive, got {}",
                self.duration_s
            )));
        }
        if self.sample_rate == 0 || self.subdivision == 0 {
            return Err(Error::InvalidRecipe(
                "sample_rate and subdivision must be non-zero".into(),
            ));
        }
        let len = (self.duration_s * self.sample_rate as f64).round() as usize;
        if len < 1024 {
            return Err(Error::InvalidRecipe(format!(
                "{len} samples is shorter than 1024"
            )));
        }
        Ok(len)
    }

    /// Sample positions of every event on the tempo grid.
    pub fn onsets(&self) -> Result<Vec<usize>> {
        let len = self.validate()?;
        let step = self.sample_rate as f64 * 60.0 / (self.tempo_bpm * self.subdivision as f64);
        Ok((0..)
            .map(|k| (k as f64 * step).round() as usize)
            .take_while(|&pos| pos < len)
            .collect())
    }

    pub fn id(&self) -> String {
        let kind = match self.kind {
            LoopKind::DrumLike => "drum",
            LoopKind::PluckLike => "pluck",
        };
        format!("{kind}_{:.0}bpm_s{}", self.tempo_bpm, self.seed)
    }
}

/// Renders a loop and peak-normalizes it to −1 dBFS.
///
/// Drum-like loops place an exponentially decaying noise burst on every
/// grid position, with a low pitched body on alternate events. Pluck-like
/// loops place decaying harmonic tones (fundamental plus five partials).
pub fn synthesize_loop(recipe: &LoopRecipe) -> Result<AudioClip> {
    let len = recipe.validate()?;
    let fs = recipe.sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut buf = vec![0.0f64; len];

    for (k, &start) in recipe.onsets()?.iter().enumerate() {
        match recipe.kind {
            LoopKind::DrumLike => {
                let amp: f64 = rng.random_range(0.5..1.0);
                let decay_s: f64 = rng.random_range(0.02..0.12);
                let body_hz: f64 = rng.random_range(50.0..90.0);
                let tail = ((6.0 * decay_s.max(0.08)) * fs) as usize;
                // one-pole lowpass coefficient varies the noise colour per hit
                let smooth: f64 = rng.random_range(0.0..0.7);
                let mut lp = 0.0;
                for n in 0..tail.min(len - start) {
                    let t = n as f64 / fs;
                    let white: f64 = rng.random_range(-1.0..1.0);
                    lp = smooth * lp + (1.0 - smooth) * white;
                    let mut v = amp * lp * (-t / decay_s).exp();
                    if k % 2 == 0 {
                        v += 0.8 * amp * (2.0 * PI * body_hz * t).sin() * (-t / 0.08).exp();
                    }
                    buf[start + n] += v;
                }
            }
            LoopKind::PluckLike => {
                const PENTATONIC: [i32; 5] = [0, 2, 4, 7, 9];
                let octave = rng.random_range(0..2);
                let degree = PENTATONIC[rng.random_range(0..PENTATONIC.len())];
                let midi = 48 + 12 * octave + degree;
                let f0 = 440.0 * 2f64.powf((midi - 69) as f64 / 12.0);
                let amp: f64 = rng.random_range(0.6..1.0);
                let decay_s: f64 = rng.random_range(0.15..0.5);
                let tail = ((5.0 * decay_s) * fs) as usize;
                let phase: f64 = rng.random_range(0.0..2.0 * PI);
                let attack = (0.002 * fs).max(1.0);
                for n in 0..tail.min(len - start) {
                    let t = n as f64 / fs;
                    let ramp = (n as f64 / attack).min(1.0);
                    let mut v = 0.0;
                    for p in 1..=6 {
                        let fp = f0 * p as f64;
                        if fp >= fs / 2.0 {
                            break;
                        }
                        let partial_decay = decay_s / (p as f64).sqrt();
                        v += (2.0 * PI * fp * t + phase * p as f64).sin()
                            * (-t / partial_decay).exp()
                            / p as f64;
                    }
                    buf[start + n] += amp * ramp * v;
                }
            }
        }
    }

    let peak = buf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::InvalidRecipe("recipe rendered silence".into()));
    }
    let gain = db_to_linear(LOOP_PEAK_DBFS) / peak;
    let samples = buf.iter().map(|&v| (v * gain) as f32).collect();
    AudioClip::new(recipe.id(), recipe.sample_rate, samples)
}

/// Metadata written next to every stored clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSidecar {
    pub id: String,
    pub recipe: Option<LoopRecipe>,
    pub sample_rate: u32,
}

/// Desk-scale loop set: alternating drum-like and pluck-like recipes with
/// tempos spread over 90–140 bpm, all derived from `seed`.
pub fn desk_recipes(
    n_loops: usize,
    seed: u64,
    sample_rate: u32,
    duration_s: f64,
) -> Vec<LoopRecipe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_loops)
        .map(|i| {
            let kind = if i % 2 == 0 {
                LoopKind::DrumLike
            } else {
                LoopKind::PluckLike
            };
            let tempo = 90.0 + 5.0 * rng.random_range(0..11) as f64;
            let loop_seed = rng.random::<u64>();
            LoopRecipe {
                kind,
                tempo_bpm: tempo,
                duration_s,
                seed: loop_seed,
                sample_rate,
                subdivision: if kind == LoopKind::DrumLike { 2 } else { 1 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn db_examples() {
        assert_eq!(db_to_linear(0.0), 1.0);
        assert!((db_to_linear(-20.0) - 0.1).abs() < 1e-15);
        assert!((db_to_linear(-6.0) - 0.501187).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_recipes() {
        let bad_tempo = LoopRecipe::new(LoopKind::DrumLike, 0.0, 2.0, 1);
        assert!(matches!(
            synthesize_loop(&bad_tempo),
            Err(Error::InvalidRecipe(_))
        ));
        let bad_duration = LoopRecipe::new(LoopKind::DrumLike, 120.0, -1.0, 1);
        assert!(matches!(
            synthesize_loop(&bad_duration),
            Err(Error::InvalidRecipe(_))
        ));
        let too_short = LoopRecipe::new(LoopKind::PluckLike, 120.0, 0.05, 1);
        assert!(matches!(
            synthesize_loop(&too_short),
            Err(Error::InvalidRecipe(_))
        ));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let r = LoopRecipe::new(LoopKind::DrumLike, 120.0, 2.0, 7);
        let a = synthesize_loop(&r).unwrap();
        let b = synthesize_loop(&r).unwrap();
        assert_eq!(a.samples, b.samples);
        let other = synthesize_loop(&LoopRecipe { seed: 8, ..r }).unwrap();
        assert_ne!(a.samples, other.samples);
    }

    #[test]
    fn pluck_peak_is_minus_one_dbfs() {
        for seed in [0, 3, 99] {
            let clip =
                synthesize_loop(&LoopRecipe::new(LoopKind::PluckLike, 120.0, 2.0, seed)).unwrap();
            assert!((clip.peak() as f64 - db_to_linear(-1.0)).abs() < 1e-6);
            assert_eq!(clip.len(), 32_000);
        }
    }

    #[test]
    fn onsets_follow_tempo_grid() {
        let r = LoopRecipe::new(LoopKind::DrumLike, 120.0, 2.0, 7);
        assert_eq!(r.onsets().unwrap(), vec![0, 8000, 16000, 24000]);
        let r2 = LoopRecipe {
            subdivision: 2,
            ..r
        };
        assert_eq!(r2.onsets().unwrap().len(), 8);
    }
}
