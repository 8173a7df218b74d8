//! Acceptance report: one PASS/FAIL line per criterion.

use std::path::Path;
use std::time::{Duration, Instant};

use drc_autodiff::{adadelta_update, AdadeltaSlot, Graph, Mode, PoolMode, Tensor, Var};
use drc_core::dataset::{generate_loops, materialize_clips};
use drc_core::drc::gain_trajectory;
use drc_core::eval::make_splits;
use drc_core::pairs::prepare_pairs;
use drc_core::train::{fit_pairs, TrainConfig};
use drc_core::{
    build_grid, compress, evaluate, synthesize_loop, AudioClip, DrcParams, EvalConfig,
    ExperimentConfig, Family, FeatureSource, Forest, ForestConfig, LoopKind, LoopRecipe, ModelSpec,
    MultiForest, Param, Pipeline, PreprocessConfig, Representation, SiameseModel, TableAxis,
    Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;
type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Debug>(e: E) -> String {
    format!("{e:?}")
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn drum(seed: u64, seconds: f64) -> AudioClip {
    synthesize_loop(&LoopRecipe::new(LoopKind::DrumLike, 120.0, seconds, seed)).unwrap()
}

fn params(thd_db: f64, ratio: f64) -> DrcParams {
    DrcParams {
        thd_db,
        ratio,
        ..Default::default()
    }
}

fn criterion_1() -> Check {
    let clip = drum(3, 2.0);
    let unity = compress(&clip, &params(40.0, 1.0)).map_err(err)?;
    let d = max_abs_diff(&unity.samples, &clip.samples);
    ensure(d < 1e-6, format!("unity ratio max diff {d:e}"))?;

    let quiet: Vec<f32> = clip.samples.iter().map(|s| s * 0.1 / clip.peak()).collect();
    let quiet = AudioClip::new("q", clip.sample_rate, quiet).map_err(err)?;
    let d = max_abs_diff(
        &compress(&quiet, &params(10.0, 8.0)).map_err(err)?.samples,
        &quiet.samples,
    );
    ensure(d < 1e-6, format!("threshold above peak max diff {d:e}"))?;

    let dc = AudioClip::new("dc", 16_000, vec![0.1; 16_000]).map_err(err)?;
    let mut worst = 0.0f64;
    for ratio in [2.0, 4.0] {
        let expect = -20.0 - 10.0 * (1.0 - 1.0 / ratio);
        let out = compress(&dc, &params(30.0, ratio)).map_err(err)?;
        for &y in &out.samples[800..] {
            worst = worst.max((20.0 * (y as f64).log10() - expect).abs());
        }
    }
    ensure(worst <= 0.1, format!("steady state off by {worst:.3} dB"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let p = DrcParams {
            thd_db: rng.random_range(0.0..60.0),
            ratio: rng.random_range(1.0..20.0),
            attack_ms: rng.random_range(0.5..100.0),
            release_ms: rng.random_range(5.0..1000.0),
        };
        let g = gain_trajectory(&clip.samples, clip.sample_rate, &p).map_err(err)?;
        ensure(
            g.iter().all(|&v| v <= 0.0),
            format!("positive gain for {p:?}"),
        )?;
    }

    let t = Instant::now();
    compress(&clip, &DrcParams::default()).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 1.0, format!("2 s clip took {secs:.3} s"))?;
    Ok(format!(
        "steady-state error {worst:.4} dB, 2 s clip in {:.1} ms",
        secs * 1e3
    ))
}

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> drc_autodiff::Result<Var>;
type LayerCase = (&'static str, Vec<Tensor<f64>>, Box<Build>);

fn layer_loss(inputs: &[Tensor<f64>], f: &Build, grads: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    let target = random(g.shape(out), &mut ChaCha8Rng::seed_from_u64(99));
    let t = g.constant(target).unwrap();
    let loss = g.mse_loss(out, t).unwrap();
    let value = g.value(loss).data()[0];
    if !grads {
        return (value, Vec::new());
    }
    let gr = g.backward(loss).unwrap();
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            gr.get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    (value, analytic)
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn layer_check(inputs: Vec<Tensor<f64>>, f: &Build) -> f64 {
    let (_, analytic) = layer_loss(&inputs, f, true);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let numeric: Vec<f64> = (0..input.len())
            .map(|i| {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += H;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= H;
                (layer_loss(&plus, f, false).0 - layer_loss(&minus, f, false).0) / (2.0 * H)
            })
            .collect();
        worst = worst.max(rel_error(analytic[k].data(), &numeric));
    }
    worst
}

fn layer_suite() -> Vec<(&'static str, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mask: Vec<f64> = (0..30)
        .map(|i| if i % 3 == 0 { 0.0 } else { 1.5 })
        .collect();
    let cases: Vec<LayerCase> = vec![
        (
            "conv2d",
            vec![random(&[2, 2, 6, 7], &mut r), random(&[3, 2, 3, 2], &mut r)],
            Box::new(|g, v| g.conv2d(v[0], v[1], (1, 1), (1, 0))),
        ),
        (
            "conv1d",
            vec![random(&[2, 2, 11], &mut r), random(&[3, 2, 3], &mut r)],
            Box::new(|g, v| g.conv1d(v[0], v[1], 1, 1)),
        ),
        (
            "channel bias",
            vec![random(&[2, 3, 4, 2], &mut r), random(&[3], &mut r)],
            Box::new(|g, v| g.add_channel_bias(v[0], v[1])),
        ),
        (
            "dense",
            vec![
                random(&[3, 5], &mut r),
                random(&[5, 4], &mut r),
                random(&[4], &mut r),
            ],
            Box::new(|g, v| g.dense(v[0], v[1], v[2])),
        ),
        (
            "relu",
            vec![random(&[4, 6], &mut r)],
            Box::new(|g, v| g.relu(v[0])),
        ),
        (
            "max pool 2d",
            vec![random(&[2, 2, 6, 6], &mut r)],
            Box::new(|g, v| g.pool2d(v[0], (2, 3), PoolMode::Max)),
        ),
        (
            "avg pool 2d",
            vec![random(&[2, 2, 6, 6], &mut r)],
            Box::new(|g, v| g.pool2d(v[0], (3, 2), PoolMode::Avg)),
        ),
        (
            "max pool 1d",
            vec![random(&[2, 3, 9], &mut r)],
            Box::new(|g, v| g.pool1d(v[0], 3, PoolMode::Max)),
        ),
        (
            "global avg pool",
            vec![random(&[2, 3, 7], &mut r)],
            Box::new(|g, v| g.global_avg_pool(v[0])),
        ),
        (
            "batch norm (train)",
            vec![
                random(&[4, 3, 5], &mut r),
                random(&[3], &mut r),
                random(&[3], &mut r),
            ],
            Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-3)?.0)),
        ),
        (
            "batch norm (eval)",
            vec![
                random(&[4, 3, 5], &mut r),
                random(&[3], &mut r),
                random(&[3], &mut r),
            ],
            Box::new(|g, v| {
                g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-3)
            }),
        ),
        (
            "dropout",
            vec![random(&[5, 6], &mut r)],
            Box::new(move |g, v| g.apply_mask(v[0], mask.clone())),
        ),
        (
            "sub / concat / crop / reshape",
            vec![
                random(&[2, 2, 8], &mut r),
                random(&[2, 2, 8], &mut r),
                random(&[2, 1, 6], &mut r),
            ],
            Box::new(|g, v| {
                let d = g.sub(v[0], v[1])?;
                let c = g.crop_last(d, 1, 6)?;
                let j = g.concat(&[c, v[2]])?;
                let s = g.add(j, j)?;
                g.reshape(s, vec![2, 18])
            }),
        ),
        (
            "mse target",
            vec![random(&[3, 2], &mut r), random(&[3, 2], &mut r)],
            Box::new(|g, v| {
                let l = g.mse_loss(v[0], v[1])?;
                g.reshape(l, vec![1, 1])
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| (name, layer_check(inputs, f.as_ref())))
        .collect()
}

/// Full Model 1 in f64 on a 2-pair batch; central differences on a sample
/// of coordinates of every parameter tensor.
fn model1_gradcheck() -> std::result::Result<(f64, usize), String> {
    let spec = ModelSpec::for_variant(Variant::Model1Mel, 2);
    let shape = [1, 96, 96];
    let mut m = SiameseModel::<f64>::new(spec, &shape, 17).map_err(err)?;
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 1, 96, 96], &mut r);
    let b = random(&[2, 1, 96, 96], &mut r);
    let y = random(&[2, 2], &mut r);
    let seed = 3;
    let (_, grads) = m.loss_and_grads(&a, &b, &y, seed).map_err(err)?;
    let ids: Vec<_> = m
        .store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut worst = 0.0f64;
    let mut refined = 0;
    for id in ids {
        let g = grads.get(id).ok_or("parameter without gradient")?.clone();
        let len = g.len();
        let picks: Vec<usize> = if len <= 12 {
            (0..len).collect()
        } else {
            (0..12).map(|_| r.random_range(0..len)).collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in picks {
            let orig = m.store.get(id).data()[i];
            let mut central = |h: f64| -> std::result::Result<f64, String> {
                m.store.get_mut(id).data_mut()[i] = orig + h;
                let lp = m.loss_value(&a, &b, &y, Mode::Train, seed).map_err(err)?;
                m.store.get_mut(id).data_mut()[i] = orig - h;
                let lm = m.loss_value(&a, &b, &y, Mode::Train, seed).map_err(err)?;
                m.store.get_mut(id).data_mut()[i] = orig;
                Ok((lp - lm) / (2.0 * h))
            };
            // A ReLU or max-pool switch inside ±h corrupts the difference;
            // shrink h until two successive estimates agree.
            let mut h = H;
            let mut est = central(h)?;
            for _ in 0..3 {
                let finer = central(h / 10.0)?;
                let settled = (finer - est).abs() <= 1e-7 * (1.0 + est.abs());
                h /= 10.0;
                est = finer;
                if settled {
                    break;
                }
                refined += 1;
            }
            analytic.push(g.data()[i]);
            numeric.push(est);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok((worst, refined))
}

fn criterion_2() -> Check {
    let t = Instant::now();
    let layers = layer_suite();
    let (name, worst_layer) =
        layers
            .iter()
            .cloned()
            .fold(("", 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    for (n, e) in &layers {
        ensure(*e < GRAD_TOL, format!("{n}: relative error {e:e}"))?;
    }
    let (model, refined) = model1_gradcheck()?;
    ensure(
        model < GRAD_TOL,
        format!("Model 1: relative error {model:e}"),
    )?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("suite took {secs:.0} s"))?;
    Ok(format!(
        "{} layer checks (worst {name} {worst_layer:.1e}), Model 1 {model:.1e} ({refined} kink-adjacent steps refined), {secs:.1} s",
        layers.len()
    ))
}

fn criterion_3() -> Check {
    let shape = [1, 64, 64];
    let mut m = SiameseModel::<f32>::new(
        ModelSpec::for_variant(Variant::Model1SpecTuned, 1),
        &shape,
        8,
    )
    .map_err(err)?;
    let n: usize = shape.iter().product();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<Vec<f32>> = (0..8)
        .map(|_| (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect())
        .collect();
    let a = m
        .batch_tensor(&xs[..4].iter().map(|v| v.as_slice()).collect::<Vec<_>>())
        .map_err(err)?;
    let b = m
        .batch_tensor(&xs[4..].iter().map(|v| v.as_slice()).collect::<Vec<_>>())
        .map_err(err)?;
    let y = Tensor::new(vec![4, 1], vec![0.0f32, 0.3, 0.6, 1.0]).map_err(err)?;
    let mut opt = drc_autodiff::Adadelta::new(0.95, 1e-6);
    let steps = 5;
    for step in 0..=steps {
        if step > 0 {
            m.train_step(&mut opt, &a, &b, &y, step).map_err(err)?;
        }
        // Branch A and branch B each read the branch weights through their
        // own pass; the checksum over what each pass sees must agree.
        let before = m.branch_checksum();
        let ea = m.branch_embedding(&a).map_err(err)?;
        let seen_a = m.branch_checksum();
        let eb = m.branch_embedding(&b).map_err(err)?;
        let seen_b = m.branch_checksum();
        ensure(
            before == seen_a && seen_a == seen_b,
            format!("step {step}: branch checksums differ"),
        )?;
        let merged = m
            .with_session(Mode::Infer, 0, |s, p| {
                let (e, _) = p.forward_pair(s, &a, &b)?;
                Ok(s.graph.value(e).data().to_vec())
            })
            .map_err(err)?;
        let separate: Vec<f32> = eb.iter().zip(&ea).map(|(x, y)| x - y).collect();
        ensure(
            merged == separate,
            format!("step {step}: pair pass disagrees with separate branch passes"),
        )?;
        for i in 0..4 {
            let same = m.embed(&xs[i], &xs[i]).map_err(err)?;
            ensure(
                same.iter().all(|&v| v == 0.0),
                format!("step {step}: embed(x, x) ≠ 0"),
            )?;
            let ab = m.embed(&xs[i], &xs[i + 4]).map_err(err)?;
            let ba = m.embed(&xs[i + 4], &xs[i]).map_err(err)?;
            ensure(
                ab.iter().zip(&ba).all(|(p, q)| *p == -*q),
                format!("step {step}: not antisymmetric"),
            )?;
        }
    }
    Ok(format!(
        "exact zero merge, exact antisymmetry and one branch checksum over {steps} Adadelta steps"
    ))
}

fn criterion_4() -> Check {
    let (rho, eps, g) = (0.95f64, 1e-6f64, 1.0f64);
    let eg2 = (1.0 - rho) * g * g;
    let oracle = -(eps.sqrt() / (eg2 + eps).sqrt()) * g;
    let mut x = [0.0f64];
    let mut slot = AdadeltaSlot::zeros(1);
    adadelta_update(&mut x, &[g], &mut slot, rho, eps).map_err(err)?;
    ensure(
        (oracle - (-4.4721e-3)).abs() < 1e-6,
        format!("oracle {oracle:e}"),
    )?;
    ensure(
        (x[0] - oracle).abs() < 1e-6,
        format!("update {:e} vs {oracle:e}", x[0]),
    )?;
    Ok(format!(
        "first update {:.7e} (closed form {oracle:.7e})",
        x[0]
    ))
}

fn criterion_5() -> Check {
    let t = Instant::now();
    let (loops, recipes) = generate_loops(8, 1, 16_000, 2.0).map_err(err)?;
    let grid = build_grid(Family::DS1, 8, 1)
        .map_err(err)?
        .thinned(5)
        .map_err(err)?;
    let (manifest, clips) = materialize_clips(&grid, &loops, &recipes).map_err(err)?;
    let prep = prepare_pairs(
        &manifest,
        &loops,
        |e| Ok(clips[e.index].clone()),
        &PreprocessConfig::default(),
        None,
    )
    .map_err(err)?;
    let pairs: Vec<_> = prep.pairs.iter().step_by(5).take(16).cloned().collect();
    let spec = ModelSpec::for_variant(Variant::Model1Mel, 1);
    let mut model = SiameseModel::<f32>::new(spec, &prep.input_shape, 3).map_err(err)?;
    let cfg = TrainConfig {
        validation_fraction: 0.0,
        max_epochs: 500,
        patience: 500,
        target_train_mse: Some(0.01),
        ..Default::default()
    };
    let log = fit_pairs(&mut model, &pairs, &cfg, 5, |_| {}).map_err(err)?;
    let mse = log.final_train_mse();
    let secs = t.elapsed().as_secs_f64();
    ensure(
        mse < 0.01,
        format!("training MSE {mse:.4} after {} epochs", log.records.len()),
    )?;
    ensure(secs < 600.0, format!("took {secs:.0} s"))?;
    Ok(format!(
        "MSE {mse:.4} after {} epochs on 16 pairs, {secs:.0} s",
        log.records.len()
    ))
}

fn criterion_6(root: &Path) -> Check {
    let t = Instant::now();
    let mut cfg = ExperimentConfig {
        output_dir: root.join("c6"),
        ..Default::default()
    };
    cfg.dataset.family = Family::DS1;
    cfg.dataset.n_loops = 8;
    cfg.dataset.thin = 5;
    cfg.features = FeatureSource::Embedding;
    let p = Pipeline::new(cfg, None).map_err(err)?;
    let report = p.run().map_err(err)?;
    let ds = p.open_dataset().map_err(err)?;
    let labels: Vec<f64> = ds
        .manifest
        .entries
        .iter()
        .map(|e| e.labels.thd_db)
        .collect();
    ensure(labels.len() == 80, format!("{} entries", labels.len()))?;
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let oracle = labels.iter().map(|y| (y - mean).abs()).sum::<f64>() / labels.len() as f64;
    let s = report.score(Param::Thd).ok_or("no Thd score")?;
    let secs = t.elapsed().as_secs_f64();
    let ratio = s.mae / oracle;
    ensure(report.n_splits == 50, "not 50 splits")?;
    ensure(
        ratio <= 0.7,
        format!(
            "MAE {:.3} dB is {:.0}% of mean-predictor {oracle:.3} dB",
            s.mae,
            100.0 * ratio
        ),
    )?;
    ensure(secs < 1800.0, format!("pipeline took {secs:.0} s"))?;
    Ok(format!(
        "Thd MAE {:.3} dB vs mean predictor {oracle:.3} dB ({:.0}% lower), {secs:.0} s",
        s.mae,
        100.0 * (1.0 - ratio)
    ))
}

fn criterion_7() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let mut rows = |n: usize, p: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..p).map(|_| r.random::<f64>()).collect())
            .collect()
    };
    let x = rows(150, 4);
    let y: Vec<Vec<f64>> = rows(150, 2)
        .into_iter()
        .map(|v| vec![v[0] * 40.0 + 3.0, v[1] * v[1]])
        .collect();
    let forest = MultiForest::fit(&x, &y, &ForestConfig::default(), 1).map_err(err)?;
    for q in rows(200, 4)
        .iter()
        .map(|v| v.iter().map(|a| a * 4.0 - 2.0).collect::<Vec<_>>())
    {
        for (j, pred) in forest.predict(&q).into_iter().enumerate() {
            let lo = y.iter().map(|v| v[j]).fold(f64::MAX, f64::min);
            let hi = y.iter().map(|v| v[j]).fold(f64::MIN, f64::max);
            ensure(
                lo <= pred && pred <= hi,
                format!("prediction {pred} outside [{lo}, {hi}]"),
            )?;
        }
    }

    let target: Vec<f64> = y.iter().map(|v| v[0]).collect();
    let deep = ForestConfig {
        n_trees: 1,
        max_depth: None,
        min_samples_leaf: 1,
        features_per_split: Some(4),
        bootstrap: false,
    };
    let tree = Forest::fit(&x, &target, &deep, 2).map_err(err)?;
    ensure(
        x.iter()
            .zip(&target)
            .all(|(row, t)| tree.predict(row) == *t),
        "single tree does not memorize",
    )?;

    let groups: Vec<usize> = (0..150).map(|i| i % 10).collect();
    let cfg = EvalConfig {
        n_splits: 10,
        ..Default::default()
    };
    let run = || {
        evaluate(
            &x,
            &y,
            &groups,
            &[Param::Thd, Param::Ratio],
            &ForestConfig::default(),
            &cfg,
            4,
            5,
            "x",
        )
        .map(|r| r.to_json())
    };
    let (a, b) = (run().map_err(err)?, run().map_err(err)?);
    ensure(a == b, "reports differ between identical runs")?;
    let splits = make_splits(&groups, &cfg, 4).map_err(err)?;
    ensure(
        splits.iter().all(|s| {
            s.test
                .iter()
                .all(|i| s.train.iter().all(|j| groups[*i] != groups[*j]))
        }),
        "a loop straddles train and test",
    )?;
    Ok("bounded predictions, exact memorization, byte-identical report JSON".into())
}

fn criterion_8() -> Check {
    let grid = build_grid(Family::DM1, 8, 0).map_err(err)?;
    let thd = &grid.axes[0];
    let expect: [(usize, f64, f64); 2] = [(0, 10.0, 43.6), (1, 10.6, 44.0)];
    let mut problems = Vec::new();
    for (i, first, last) in expect {
        let v = thd.values_for_loop(i);
        let (f, l) = (v[0], v[v.len() - 1]);
        if (f - first).abs() > 1e-9 || (l - last).abs() > 1e-9 {
            problems.push(format!(
                "loop {i}: {f:.1}…{l:.1} dB, expected {first:.1}…{last:.1} dB"
            ));
        }
    }
    let (loops, recipes) = generate_loops(2, 0, 16_000, 0.25).map_err(err)?;
    let d4p = build_grid(Family::D4P, 2, 0).map_err(err)?;
    let (manifest, _) = materialize_clips(&d4p, &loops, &recipes).map_err(err)?;
    if manifest.entries.len() != 2 * 625 {
        problems.push(format!(
            "D4P has {} entries for 2 loops",
            manifest.entries.len()
        ));
    }
    ensure(problems.is_empty(), problems.join("; "))?;
    Ok("DM1 offsets and D4P count match".into())
}

fn criterion_9(root: &Path) -> Check {
    let mut cfg = ExperimentConfig {
        output_dir: root.join("c9"),
        ..Default::default()
    };
    cfg.dataset.n_loops = 5;
    cfg.dataset.thin = 10;
    cfg.train.batch_size = 2;
    cfg.train.max_epochs = 3;
    cfg.forest.n_trees = 30;
    cfg.eval.n_splits = 5;
    cfg.table.families = vec![Family::DS1];
    let p = Pipeline::new(cfg, None).map_err(err)?;
    let mut notes = Vec::new();
    for (axis, columns) in [
        (TableAxis::FrameSize, vec!["512", "256", "128"]),
        (
            TableAxis::Representation,
            vec![
                Representation::Mel.label(),
                Representation::Spectrogram.label(),
            ],
        ),
    ] {
        let table = p.reproduce_table(axis).map_err(err)?;
        ensure(
            table.columns == columns,
            format!("{}: columns {:?}", axis.key(), table.columns),
        )?;
        ensure(
            table.rows.len() == 1 && table.rows[0].mae.len() == columns.len(),
            format!("{}: {} rows", axis.key(), table.rows.len()),
        )?;
        let text = table.to_text();
        let trend = table.trend.clone().ok_or("no trend line")?;
        ensure(
            text.contains(&trend) && text.contains(columns[0]),
            format!("{}: layout\n{text}", axis.key()),
        )?;
        for ext in ["txt", "csv", "json"] {
            let f = root.join("c9/tables").join(format!("{}.{ext}", axis.key()));
            ensure(f.exists(), format!("missing {}", f.display()))?;
        }
        notes.push(format!("{}: {trend}", axis.key()));
    }
    Ok(notes.join("; "))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        (1, "compressor correctness", Box::new(criterion_1)),
        (2, "gradient integrity", Box::new(criterion_2)),
        (3, "siamese invariants", Box::new(criterion_3)),
        (4, "Adadelta first step", Box::new(criterion_4)),
        (5, "overfit smoke test", Box::new(criterion_5)),
        (
            6,
            "learning signal on DS1",
            Box::new(|| criterion_6(root.path())),
        ),
        (7, "forest properties", Box::new(criterion_7)),
        (8, "dataset protocol", Box::new(criterion_8)),
        (9, "trend report", Box::new(|| criterion_9(root.path()))),
    ];
    let mut failed = 0;
    let total = Instant::now();
    for (n, name, f) in &criteria {
        let t = Instant::now();
        let outcome =
            std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()))
            });
        let took = fmt_secs(t.elapsed());
        match outcome {
            Ok(msg) => println!("criterion {n}: PASS  {name}: {msg} [{took}]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: {msg} [{took}]");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {}",
        criteria.len() - failed,
        fmt_secs(total.elapsed())
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
