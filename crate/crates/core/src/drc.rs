//! Feed-forward dynamic range compressor.
//!
//! Hard knee, peak level detection in the log domain, and one-pole
//! attack/release smoothing applied to the gain reduction.

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Floor added to `|x|` before taking the log.
pub const LEVEL_EPS: f64 = 1e-12;

/// The four compressor parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Thd,
    Ratio,
    Attack,
    Release,
}

impl Param {
    pub const ALL: [Param; 4] = [Param::Thd, Param::Ratio, Param::Attack, Param::Release];

    pub fn key(self) -> &'static str {
        match self {
            Param::Thd => "thd_db",
            Param::Ratio => "ratio",
            Param::Attack => "attack_ms",
            Param::Release => "release_ms",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Param::Thd => "Thd",
            Param::Ratio => "Ratio",
            Param::Attack => "τa",
            Param::Release => "τr",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Param::Thd => "dB",
            Param::Ratio => "",
            Param::Attack | Param::Release => "ms",
        }
    }

    /// Accepted values for [`compress`].
    pub fn domain(self) -> (f64, f64) {
        match self {
            Param::Thd => (0.0, 60.0),
            Param::Ratio => (1.0, 20.0),
            Param::Attack => (0.5, 100.0),
            Param::Release => (5.0, 1000.0),
        }
    }

    /// Reference span used to express errors as a percentage of range.
    pub fn reporting_range(self) -> f64 {
        match self {
            Param::Thd => 49.0,
            Param::Ratio => 19.0,
            Param::Attack => 99.0,
            Param::Release => 999.0,
        }
    }

    pub fn parse(s: &str) -> Option<Param> {
        match s.to_ascii_lowercase().as_str() {
            "thd" | "thd_db" | "threshold" => Some(Param::Thd),
            "ratio" => Some(Param::Ratio),
            "attack" | "attack_ms" | "ta" => Some(Param::Attack),
            "release" | "release_ms" | "tr" => Some(Param::Release),
            _ => None,
        }
    }
}

/// Compressor settings. The threshold is stored as a positive number of dB
/// below full scale; the effective threshold is `-thd_db` dBFS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrcParams {
    pub thd_db: f64,
    pub ratio: f64,
    pub attack_ms: f64,
    pub release_ms: f64,
}

impl Default for DrcParams {
    /// Thd 37.5 dB below full scale, 2:1, 5 ms attack, 200 ms release.
    fn default() -> Self {
        Self {
            thd_db: 37.5,
            ratio: 2.0,
            attack_ms: 5.0,
            release_ms: 200.0,
        }
    }
}

impl DrcParams {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Thd => self.thd_db,
            Param::Ratio => self.ratio,
            Param::Attack => self.attack_ms,
            Param::Release => self.release_ms,
        }
    }

    pub fn set(&mut self, p: Param, value: f64) {
        match p {
            Param::Thd => self.thd_db = value,
            Param::Ratio => self.ratio = value,
            Param::Attack => self.attack_ms = value,
            Param::Release => self.release_ms = value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in Param::ALL {
            let v = self.get(p);
            let (min, max) = p.domain();
            if !(v.is_finite() && v >= min && v <= max) {
                return Err(Error::Domain {
                    param: p.key(),
                    value: v,
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn threshold_dbfs(&self) -> f64 {
        -self.thd_db
    }

    /// Lexicographic order over (thd, ratio, attack, release).
    pub fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        Param::ALL
            .iter()
            .map(|&p| self.get(p).total_cmp(&other.get(p)))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

/// Hard-knee static curve: gain in dB (always ≤ 0) for an input level.
pub fn static_gain_db(level_db: f64, params: &DrcParams) -> f64 {
    let t = params.threshold_dbfs();
    (t + (level_db - t) / params.ratio - level_db).min(0.0)
}

/// Smoothing coefficient `exp(-1 / (fs·τ))` for a time constant in ms.
pub fn smoothing_coeff(time_ms: f64, sample_rate: u32) -> f64 {
    (-1.0 / (sample_rate as f64 * time_ms * 1e-3)).exp()
}

/// Smoothed gain reduction in dB for every sample of `samples`.
pub fn gain_trajectory(samples: &[f32], sample_rate: u32, params: &DrcParams) -> Result<Vec<f64>> {
    params.validate()?;
    let a_att = smoothing_coeff(params.attack_ms, sample_rate);
    let a_rel = smoothing_coeff(params.release_ms, sample_rate);
    let mut gains = Vec::with_capacity(samples.len());
    let mut prev = 0.0f64;
    for (n, &x) in samples.iter().enumerate() {
        let level = 20.0 * ((x as f64).abs() + LEVEL_EPS).log10();
        let target = static_gain_db(level, params);
        let gs = if n == 0 {
            0.0
        } else {
            let alpha = if target < prev { a_att } else { a_rel };
            alpha * prev + (1.0 - alpha) * target
        };
        gains.push(gs);
        prev = gs;
    }
    Ok(gains)
}

/// Applies the compressor. Output length equals input length; no make-up
/// gain, so `|y[n]| ≤ |x[n]|`.
pub fn compress(clip: &AudioClip, params: &DrcParams) -> Result<AudioClip> {
    let gains = gain_trajectory(&clip.samples, clip.sample_rate, params)?;
    let samples = clip
        .samples
        .iter()
        .zip(&gains)
        .map(|(&x, &g)| (x as f64 * 10f64.powf(g / 20.0)) as f32)
        .collect();
    Ok(AudioClip {
        id: clip.id.clone(),
        sample_rate: clip.sample_rate,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(thd_db: f64, ratio: f64) -> DrcParams {
        DrcParams {
            thd_db,
            ratio,
            ..DrcParams::default()
        }
    }

    #[test]
    fn static_curve_examples() {
        assert_eq!(static_gain_db(-50.0, &params(30.0, 4.0)), 0.0);
        assert!((static_gain_db(-20.0, &params(30.0, 2.0)) - -5.0).abs() < 1e-12);
        assert!((static_gain_db(-20.0, &params(30.0, 4.0)) - -7.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain_names_the_parameter() {
        let clip = AudioClip::new("c", 16_000, vec![0.5; 100]).unwrap();
        let bad = DrcParams {
            attack_ms: 0.1,
            ..DrcParams::default()
        };
        match compress(&clip, &bad) {
            Err(Error::Domain { param, .. }) => assert_eq!(param, "attack_ms"),
            other => panic!("{other:?}"),
        }
        assert!(compress(&clip, &params(37.5, 0.4)).is_err());
    }

    #[test]
    fn first_sample_is_untouched() {
        let clip = AudioClip::new("c", 16_000, vec![0.9; 10]).unwrap();
        let out = compress(&clip, &params(40.0, 10.0)).unwrap();
        assert_eq!(out.samples[0], 0.9);
        assert!(out.samples[9] < 0.9);
    }
}
