//! Generic statistical baseline features for a (unprocessed, processed) pair.
//!
//! Six statistics per clip, in [`STAT_NAMES`] order, laid out as
//! `[stats(a), stats(b), stats(b) − stats(a)]` for [`N_BASELINE_FEATURES`]
//! columns in total.

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::spectrogram::magnitude_frames;

pub const STAT_NAMES: [&str; 6] = [
    "rms_db",
    "crest_db",
    "centroid_mean_hz",
    "centroid_std_hz",
    "log_attack_s",
    "env_decay_s",
];
pub const N_BASELINE_FEATURES: usize = 3 * STAT_NAMES.len();

const EPS: f64 = 1e-12;
const CENTROID_FRAME: usize = 1024;
const ENV_WINDOW_S: f64 = 0.005;

fn db(x: f64) -> f64 {
    20.0 * (x + EPS).log10()
}

pub fn rms(samples: &[f32]) -> f64 {
    (samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / samples.len() as f64).sqrt()
}

pub fn rms_db(samples: &[f32]) -> f64 {
    db(rms(samples))
}

/// Peak-to-RMS ratio in dB; 0 dB for silence.
pub fn crest_db(samples: &[f32]) -> f64 {
    let peak = samples.iter().fold(0.0f64, |m, &s| m.max((s as f64).abs()));
    20.0 * ((peak + EPS) / (rms(samples) + EPS)).log10()
}

/// Mean and standard deviation of the per-frame spectral centroid (Hz).
/// Silent frames contribute a centroid of 0.
pub fn centroid_stats(clip: &AudioClip) -> Result<(f64, f64)> {
    let mut frame = CENTROID_FRAME;
    while frame > clip.len() && frame > 2 {
        frame /= 2;
    }
    let (frames, mags) = magnitude_frames(&clip.samples, frame, frame / 2)?;
    let bins = frame / 2 + 1;
    let hz = clip.sample_rate as f64 / frame as f64;
    let c: Vec<f64> = mags
        .chunks(bins)
        .map(|row| {
            let total: f64 = row.iter().sum();
            if total <= EPS {
                0.0
            } else {
                row.iter()
                    .enumerate()
                    .map(|(k, m)| k as f64 * hz * m)
                    .sum::<f64>()
                    / total
            }
        })
        .collect();
    let mean = c.iter().sum::<f64>() / frames as f64;
    let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / frames as f64;
    Ok((mean, var.sqrt()))
}

/// Frame RMS envelope over non-overlapping 5 ms windows.
pub fn envelope(clip: &AudioClip) -> (Vec<f64>, f64) {
    let w = ((clip.sample_rate as f64 * ENV_WINDOW_S).round() as usize).max(1);
    let env = clip.samples.chunks(w).map(rms).collect();
    (env, w as f64 / clip.sample_rate as f64)
}

/// `log10` of the 20%→90% rise time (s) into the peak following the
/// largest envelope increase. Floors at one envelope step.
pub fn log_attack_time(env: &[f64], step_s: f64) -> f64 {
    if env.len() < 2 {
        return step_s.log10();
    }
    let onset = (1..env.len())
        .max_by(|&a, &b| {
            (env[a] - env[a - 1])
                .total_cmp(&(env[b] - env[b - 1]))
                .then(b.cmp(&a))
        })
        .unwrap_or(1);
    let reach = ((0.05 / step_s).ceil() as usize).max(1);
    let end = (onset + reach).min(env.len());
    let peak_i = (onset..end)
        .max_by(|&a, &b| env[a].total_cmp(&env[b]).then(b.cmp(&a)))
        .unwrap_or(onset);
    let peak = env[peak_i];
    if peak <= EPS {
        return step_s.log10();
    }
    let mut hi = peak_i;
    while hi > 0 && env[hi - 1] >= 0.9 * peak {
        hi -= 1;
    }
    let mut lo = hi;
    while lo > 0 && env[lo - 1] >= 0.2 * peak {
        lo -= 1;
    }
    (((hi - lo) as f64 * step_s).max(step_s)).log10()
}

/// Lag (s) at which the mean-removed envelope autocorrelation first drops
/// below `1/e`. Flat envelopes give 0.
pub fn envelope_decay(env: &[f64], step_s: f64) -> f64 {
    let n = env.len();
    let mean = env.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = env.iter().map(|v| v - mean).collect();
    let r0: f64 = d.iter().map(|v| v * v).sum();
    if r0 <= EPS * EPS * n as f64 {
        return 0.0;
    }
    let target = (-1.0f64).exp();
    for lag in 1..n {
        let r: f64 = (0..n - lag).map(|i| d[i] * d[i + lag]).sum::<f64>() / r0;
        if r < target {
            return lag as f64 * step_s;
        }
    }
    n as f64 * step_s
}

pub fn clip_stats(clip: &AudioClip) -> Result<[f64; 6]> {
    let (c_mean, c_std) = centroid_stats(clip)?;
    let (env, step) = envelope(clip);
    Ok([
        rms_db(&clip.samples),
        crest_db(&clip.samples),
        c_mean,
        c_std,
        log_attack_time(&env, step),
        envelope_decay(&env, step),
    ])
}

/// Baseline feature vector for `a` (unprocessed) and `b` (processed).
pub fn baseline_features(a: &AudioClip, b: &AudioClip) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.sample_rate != b.sample_rate {
        return Err(Error::Mismatch(format!(
            "baseline features need equal clips: {} samples @ {} Hz vs {} @ {} Hz",
            a.len(),
            a.sample_rate,
            b.len(),
            b.sample_rate
        )));
    }
    let sa = clip_stats(a)?;
    let sb = clip_stats(b)?;
    let mut out = Vec::with_capacity(N_BASELINE_FEATURES);
    out.extend_from_slice(&sa);
    out.extend_from_slice(&sb);
    out.extend(sb.iter().zip(&sa).map(|(b, a)| b - a));
    Ok(out)
}

/// Column names matching [`baseline_features`].
pub fn baseline_feature_names() -> Vec<String> {
    ["a", "b", "delta"]
        .iter()
        .flat_map(|p| STAT_NAMES.iter().map(move |s| format!("{p}_{s}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_match_count() {
        assert_eq!(baseline_feature_names().len(), N_BASELINE_FEATURES);
    }

    #[test]
    fn silence_has_finite_features() {
        let c = AudioClip::new("z", 16_000, vec![0.0; 4000]).unwrap();
        let f = baseline_features(&c, &c).unwrap();
        assert!(f.iter().all(|v| v.is_finite()));
        assert_eq!(f[1], 0.0);
    }
}
