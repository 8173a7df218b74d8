use drc_core::drc::{gain_trajectory, smoothing_coeff, static_gain_db};
use drc_core::{compress, synthesize_loop, AudioClip, DrcParams, Error, LoopKind, LoopRecipe};
use proptest::prelude::*;

fn params(thd_db: f64, ratio: f64, attack_ms: f64, release_ms: f64) -> DrcParams {
    DrcParams {
        thd_db,
        ratio,
        attack_ms,
        release_ms,
    }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn energy(c: &AudioClip) -> f64 {
    c.samples.iter().map(|&s| (s as f64).powi(2)).sum()
}

fn drum(seed: u64) -> AudioClip {
    synthesize_loop(&LoopRecipe::new(LoopKind::DrumLike, 120.0, 2.0, seed)).unwrap()
}

#[test]
fn static_curve_examples() {
    assert_eq!(static_gain_db(-50.0, &params(30.0, 4.0, 5.0, 200.0)), 0.0);
    assert!((static_gain_db(-20.0, &params(30.0, 2.0, 5.0, 200.0)) + 5.0).abs() < 1e-12);
    assert!((static_gain_db(-20.0, &params(30.0, 4.0, 5.0, 200.0)) + 7.5).abs() < 1e-12);
}

#[test]
fn unity_ratio_is_identity() {
    let clip = drum(3);
    let out = compress(&clip, &params(40.0, 1.0, 5.0, 200.0)).unwrap();
    assert!(max_abs_diff(&out.samples, &clip.samples) < 1e-6);
}

#[test]
fn threshold_above_peak_is_identity() {
    let loud = drum(4);
    let scaled: Vec<f32> = loud.samples.iter().map(|s| s * 0.1 / loud.peak()).collect();
    let clip = AudioClip::new("q", 16_000, scaled).unwrap();
    let out = compress(&clip, &params(10.0, 8.0, 5.0, 200.0)).unwrap();
    assert!(max_abs_diff(&out.samples, &clip.samples) < 1e-6);
}

/// Simulates the one-pole smoother on a constant target and compares the
/// steady-state output level with the closed form `L + g∞`.
#[test]
fn constant_input_settles_on_static_curve() {
    let clip = AudioClip::new("dc", 16_000, vec![0.1; 16_000]).unwrap();
    for ratio in [2.0, 4.0] {
        let p = params(30.0, ratio, 5.0, 200.0);
        let g_inf = -10.0 * (1.0 - 1.0 / ratio);
        let out = compress(&clip, &p).unwrap();
        let start = 50 * 16;
        for &y in &out.samples[start..] {
            let level = 20.0 * (y as f64).log10();
            assert!(
                (level - (-20.0 + g_inf)).abs() < 0.1,
                "ratio {ratio}: {level}"
            );
        }
    }
    let y = compress(&clip, &params(30.0, 2.0, 5.0, 200.0))
        .unwrap()
        .samples[8000] as f64;
    assert!((y - 10f64.powf(-25.0 / 20.0)).abs() < 1e-4);
}

#[test]
fn attack_gap_closes_to_five_percent_in_three_time_constants() {
    let fs = 16_000u32;
    let p = params(30.0, 4.0, 10.0, 200.0);
    let mut x = vec![0.0f32; 4000];
    x.extend(std::iter::repeat_n(0.5f32, 8000));
    let g = gain_trajectory(&x, fs, &p).unwrap();
    let g_inf = static_gain_db(20.0 * 0.5f64.log10(), &p);
    let step = 4000;
    let gap0 = (g[step - 1] - g_inf).abs();
    let n5 = (step..g.len())
        .find(|&n| (g[n] - g_inf).abs() < 0.05 * gap0)
        .unwrap()
        - step;
    let expect = 3.0 * fs as f64 * p.attack_ms * 1e-3;
    assert!(
        (n5 as f64 - expect).abs() <= 1.0 + 1e-9,
        "settled after {n5} samples, expected {expect}"
    );
    assert!((smoothing_coeff(10.0, fs) - (-1.0f64 / 160.0).exp()).abs() < 1e-15);
}

#[test]
fn out_of_domain_parameters_are_named() {
    let clip = drum(1);
    for (p, name) in [
        (params(70.0, 2.0, 5.0, 200.0), "thd_db"),
        (params(30.0, 0.5, 5.0, 200.0), "ratio"),
        (params(30.0, 2.0, 0.1, 200.0), "attack_ms"),
        (params(30.0, 2.0, 5.0, 2000.0), "release_ms"),
    ] {
        match compress(&clip, &p) {
            Err(Error::Domain { param, .. }) => assert_eq!(param, name),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn runs_fast_on_a_two_second_clip() {
    let clip = drum(2);
    let t = std::time::Instant::now();
    compress(&clip, &DrcParams::default()).unwrap();
    assert!(t.elapsed().as_secs_f64() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gain_never_exceeds_unity(seed in 0u64..1000, thd in 0.0f64..60.0, ratio in 1.0f64..20.0,
                                att in 0.5f64..100.0, rel in 5.0f64..1000.0) {
        let clip = synthesize_loop(&LoopRecipe::new(LoopKind::PluckLike, 110.0, 0.5, seed)).unwrap();
        let p = params(thd, ratio, att, rel);
        let g = gain_trajectory(&clip.samples, clip.sample_rate, &p).unwrap();
        prop_assert!(g.iter().all(|&v| v <= 0.0));
        let out = compress(&clip, &p).unwrap();
        prop_assert!(out.samples.iter().zip(&clip.samples).all(|(y, x)| y.abs() <= x.abs()));
        prop_assert_eq!(out.samples, compress(&clip, &p).unwrap().samples);
    }

    #[test]
    fn energy_non_increasing_in_ratio(seed in 0u64..1000, thd in 5.0f64..45.0) {
        let clip = synthesize_loop(&LoopRecipe::new(LoopKind::DrumLike, 120.0, 0.5, seed)).unwrap();
        let mut last = f64::INFINITY;
        for ratio in [1.0, 1.3, 2.0, 4.0, 8.0, 12.0, 20.0] {
            let e = energy(&compress(&clip, &params(thd, ratio, 5.0, 200.0)).unwrap());
            prop_assert!(e <= last * (1.0 + 1e-9), "ratio {}: {} > {}", ratio, e, last);
            last = e;
        }
    }
}
