use std::path::Path;

use drc_core::config::RESOLVED_CONFIG_FILE;
use drc_core::model::Variant;
use drc_core::{Error, ExperimentConfig, Family, FeatureSource, Param, Pipeline, Representation};

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        output_dir: out.to_path_buf(),
        seed: 5,
        ..Default::default()
    };
    c.dataset.family = Family::DS1;
    c.dataset.n_loops = 5;
    c.dataset.thin = 10;
    c.dataset.duration_s = 1.0;
    c.preprocess.representation = Representation::Spectrogram;
    c.preprocess.frame_len = 256;
    c.model.variant = Variant::Model1SpecTuned;
    c.train.batch_size = 2;
    c.train.max_epochs = 2;
    c.forest.n_trees = 20;
    c.eval.n_splits = 4;
    c
}

#[test]
fn end_to_end_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path()), None).unwrap();
    let report = p.run().unwrap();
    assert_eq!(report.n_entries, 25);
    assert_eq!(report.n_groups, 5);
    assert_eq!(report.n_features, 50);
    let s = report.score(Param::Thd).unwrap();
    assert!(s.mae.is_finite() && s.mae >= 0.0);
    for f in [
        "report.json",
        "report.txt",
        "report.csv",
        RESOLVED_CONFIG_FILE,
    ] {
        assert!(p.eval_dir(FeatureSource::Embedding).join(f).exists(), "{f}");
    }
    assert!(p.model_dir().join("model.drcw").exists());
    assert!(p.features_path(FeatureSource::Embedding).exists());
    let snapshot = std::fs::read_to_string(dir.path().join(RESOLVED_CONFIG_FILE)).unwrap();
    assert_eq!(
        serde_json::from_str::<ExperimentConfig>(&snapshot).unwrap(),
        p.cfg
    );

    let forest = p.fit(FeatureSource::Baseline).unwrap();
    assert_eq!(forest.forests.len(), 1);
    let base = p.evaluate(FeatureSource::Baseline).unwrap();
    assert_eq!(base.n_features, 18);
}

#[test]
fn reruns_are_byte_identical() {
    let run = |d: &Path| {
        let p = Pipeline::new(tiny(d), None).unwrap();
        p.run().unwrap();
        let m = std::fs::read(p.features_path(FeatureSource::Embedding)).unwrap();
        let r = std::fs::read(p.eval_dir(FeatureSource::Embedding).join("report.json")).unwrap();
        (m, r)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn evaluating_without_inputs_reports_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(dir.path()), None).unwrap();
    assert!(matches!(
        p.evaluate(FeatureSource::Baseline),
        Err(Error::MissingInput(_))
    ));
    p.generate().unwrap();
    match p.embed() {
        Err(Error::MissingInput(path)) => {
            assert!(path.ends_with("model.drcw"), "{}", path.display())
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn too_few_loops_is_rejected_by_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.dataset.n_loops = 4;
    match Pipeline::new(c, None) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "dataset.n_loops"),
        Err(e) => panic!("{e:?}"),
        Ok(_) => panic!("accepted 4 loops"),
    }
}
