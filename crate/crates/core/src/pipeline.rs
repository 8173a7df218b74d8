//! Pipeline stages (generate, train, embed, fit, evaluate) and the
//! table sweeps built from them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, FeatureSource};
use crate::dataset::{build_grid, generate_loops, materialize, Dataset, Family, MANIFEST_FILE};
use crate::drc::Param;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::features::{baseline_features, N_BASELINE_FEATURES};
use crate::forest::MultiForest;
use crate::matrix_file::{Matrix, MatrixKind};
use crate::model::{SiameseModel, Variant};
use crate::pairs::prepare_pairs;
use crate::preprocess::Representation;
use crate::train::{self, load_checkpoint, save_checkpoint, CheckpointMeta, EpochRecord, TrainLog};

pub const FOREST_FILE: &str = "forest.json";
const EMBED_CHUNK: usize = 16;

pub type Progress = Arc<dyn Fn(&str) + Send + Sync>;

/// Runs stages for one resolved config. Generated datasets live under
/// `cache/datasets/<key>` when a cache directory is set, otherwise under
/// `<output_dir>/dataset`.
#[derive(Clone)]
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub cache: Option<PathBuf>,
    progress: Option<Progress>,
}

/// Dataset, feature rows, label rows and group ids.
type TableInputs = (Dataset, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>);

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, cache: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            cache,
            progress: None,
        })
    }

    pub fn with_progress(mut self, p: Progress) -> Self {
        self.progress = Some(p);
        self
    }

    fn note(&self, msg: &str) {
        if let Some(p) = &self.progress {
            p(msg);
        }
    }

    fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    /// Content key of the dataset settings and data seed.
    pub fn dataset_key(&self) -> String {
        let text = serde_json::to_string(&(&self.cfg.dataset, self.cfg.data_seed()))
            .expect("serializable");
        Sha256::digest(text.as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn dataset_dir(&self) -> PathBuf {
        let root = match &self.cache {
            Some(c) => c.join("datasets").join(self.dataset_key()),
            None => self.out().join("dataset"),
        };
        root.join(self.cfg.dataset.family.to_string())
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out().join("model")
    }

    pub fn features_path(&self, source: FeatureSource) -> PathBuf {
        self.out()
            .join("features")
            .join(format!("{}.spec", source.key()))
    }

    pub fn forest_path(&self, source: FeatureSource) -> PathBuf {
        self.out()
            .join("forest")
            .join(source.key())
            .join(FOREST_FILE)
    }

    pub fn eval_dir(&self, source: FeatureSource) -> PathBuf {
        self.out().join("eval").join(source.key())
    }

    fn snapshot(&self, dir: &Path) -> Result<()> {
        self.cfg.write_snapshot(dir)
    }

    /// Synthesizes the loops and renders the dataset. A cached dataset
    /// with a manifest is reused as is.
    pub fn generate(&self) -> Result<Dataset> {
        let dir = self.dataset_dir();
        if self.cache.is_some() && dir.join(MANIFEST_FILE).exists() {
            self.note(&format!("reusing cached dataset {}", dir.display()));
            self.snapshot(self.out())?;
            return Dataset::open(&dir);
        }
        let d = &self.cfg.dataset;
        self.note(&format!("generating {} with {} loops", d.family, d.n_loops));
        let (loops, recipes) =
            generate_loops(d.n_loops, self.cfg.data_seed(), d.sample_rate, d.duration_s)?;
        let grid = build_grid(d.family, d.n_loops, self.cfg.data_seed())?.thinned(d.thin)?;
        let root = dir.parent().expect("dataset dir has a parent");
        let (dir, manifest) = materialize(&grid, &loops, &recipes, root, d.encoding)?;
        self.snapshot(&dir)?;
        self.snapshot(self.out())?;
        self.note(&format!(
            "{} entries in {}",
            manifest.entries.len(),
            dir.display()
        ));
        Ok(Dataset { dir, manifest })
    }

    pub fn open_dataset(&self) -> Result<Dataset> {
        Dataset::open(&self.dataset_dir())
    }

    /// Trains the configured variant and writes the checkpoint.
    pub fn train(&self, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainLog> {
        let ds = self.open_dataset()?;
        let loops = ds.load_loops()?;
        let prep = prepare_pairs(
            &ds.manifest,
            &loops,
            |e| ds.load_processed(e),
            &self.cfg.preprocess,
            None,
        )?;
        let spec = self.cfg.model.spec(ds.manifest.varying.len());
        self.note(&format!(
            "training {} on {} pairs, input {:?}",
            spec.variant.key(),
            prep.pairs.len(),
            prep.input_shape
        ));
        let mut model =
            SiameseModel::<f32>::new(spec.clone(), &prep.input_shape, self.cfg.train_seed())?;
        let log = train::train(
            &mut model,
            &prep.pairs,
            &self.cfg.train,
            self.cfg.train_seed(),
            on_epoch,
        )?;
        let meta = CheckpointMeta {
            variant: spec.variant.key().to_string(),
            spec,
            input_shape: prep.input_shape.clone(),
            width: self.cfg.model.width,
            label_ranges: ds.manifest.label_ranges.clone(),
            seed: self.cfg.train_seed(),
            input_norm: prep.norm,
            preprocess: self.cfg.preprocess.clone(),
            sample_rate: ds.manifest.sample_rate,
            clip_len: loops[0].len(),
            best_epoch: log.best_epoch,
        };
        let dir = self.model_dir();
        save_checkpoint(&dir, &model, &meta, &log)?;
        self.snapshot(&dir)?;
        Ok(log)
    }

    /// Merge embeddings `f(processed) − f(unprocessed)` for every entry.
    pub fn embed(&self) -> Result<Matrix> {
        let (mut model, meta) = load_checkpoint(&self.model_dir())?;
        let ds = self.open_dataset()?;
        let params: Vec<Param> = meta.label_ranges.iter().map(|r| r.0).collect();
        if params != ds.manifest.varying {
            return Err(Error::Mismatch(format!(
                "checkpoint predicts {params:?} but the dataset varies {:?}",
                ds.manifest.varying
            )));
        }
        let loops = ds.load_loops()?;
        let prep = prepare_pairs(
            &ds.manifest,
            &loops,
            |e| ds.load_processed(e),
            &meta.preprocess,
            Some(meta.input_norm),
        )?;
        if prep.input_shape != meta.input_shape {
            return Err(Error::Mismatch(format!(
                "checkpoint expects input {:?}, dataset gives {:?}",
                meta.input_shape, prep.input_shape
            )));
        }
        let dim = model.spec.embedding_dim;
        let mut loop_emb: Vec<Option<Vec<f32>>> = vec![None; ds.manifest.loops.len()];
        for p in &prep.pairs {
            if loop_emb[p.group].is_none() {
                let t = model.batch_tensor(&[p.a.as_slice()])?;
                loop_emb[p.group] = Some(model.branch_embedding(&t)?);
            }
        }
        let mut values = Vec::with_capacity(prep.pairs.len() * dim);
        for chunk in prep.pairs.chunks(EMBED_CHUNK) {
            let b: Vec<&[f32]> = chunk.iter().map(|p| p.b.as_slice()).collect();
            let eb = model.branch_embedding(&model.batch_tensor(&b)?)?;
            for (p, row) in chunk.iter().zip(eb.chunks(dim)) {
                let ea = loop_emb[p.group].as_ref().expect("loop embedded");
                values.extend(row.iter().zip(ea).map(|(x, y)| x - y));
            }
        }
        let m = Matrix::new(prep.pairs.len(), dim, MatrixKind::Features, values)?;
        self.save_features(FeatureSource::Embedding, &m)?;
        Ok(m)
    }

    /// Baseline statistics for every entry.
    pub fn baseline(&self) -> Result<Matrix> {
        let ds = self.open_dataset()?;
        let loops = ds.load_loops()?;
        let rows: Vec<Vec<f64>> = ds
            .manifest
            .entries
            .par_iter()
            .map(|e| baseline_features(&loops[e.group], &ds.load_processed(e)?))
            .collect::<Result<_>>()?;
        let values = rows.iter().flatten().map(|&v| v as f32).collect();
        let m = Matrix::new(
            rows.len(),
            N_BASELINE_FEATURES,
            MatrixKind::Features,
            values,
        )?;
        self.save_features(FeatureSource::Baseline, &m)?;
        Ok(m)
    }

    fn save_features(&self, source: FeatureSource, m: &Matrix) -> Result<()> {
        let path = self.features_path(source);
        let dir = path.parent().expect("features path has a parent");
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        m.save(&path)?;
        self.snapshot(dir)
    }

    /// Cached feature matrix, computing it when absent. Embeddings need a
    /// trained checkpoint.
    pub fn features(&self, source: FeatureSource) -> Result<Matrix> {
        let path = self.features_path(source);
        if path.exists() {
            return Matrix::load(&path);
        }
        match source {
            FeatureSource::Embedding => self.embed(),
            FeatureSource::Baseline => self.baseline(),
        }
    }

    fn table_inputs(&self, source: FeatureSource) -> Result<TableInputs> {
        let ds = self.open_dataset()?;
        let m = self.features(source)?;
        if m.rows != ds.manifest.entries.len() {
            return Err(Error::Mismatch(format!(
                "{} has {} rows for {} manifest entries",
                self.features_path(source).display(),
                m.rows,
                ds.manifest.entries.len()
            )));
        }
        let x = (0..m.rows)
            .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
            .collect();
        let y = ds
            .manifest
            .entries
            .iter()
            .map(|e| e.label_vector(&ds.manifest.varying))
            .collect();
        let g = ds.manifest.entries.iter().map(|e| e.group).collect();
        Ok((ds, x, y, g))
    }

    /// One forest per parameter on every entry.
    pub fn fit(&self, source: FeatureSource) -> Result<MultiForest> {
        let (_, x, y, _) = self.table_inputs(source)?;
        let forest = MultiForest::fit(&x, &y, &self.cfg.forest, self.cfg.forest_seed())?;
        let path = self.forest_path(source);
        let dir = path.parent().expect("forest path has a parent");
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let text = serde_json::to_string(&forest).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, text).map_err(Error::io(&path))?;
        self.snapshot(dir)?;
        Ok(forest)
    }

    /// The split protocol on the chosen features; writes
    /// `report.{json,txt,csv}`.
    pub fn evaluate(&self, source: FeatureSource) -> Result<EvalReport> {
        let (ds, x, y, g) = self.table_inputs(source)?;
        self.note(&format!(
            "evaluating {} features over {} splits",
            source.key(),
            self.cfg.eval.n_splits
        ));
        let report = evaluate(
            &x,
            &y,
            &g,
            &ds.manifest.varying,
            &self.cfg.forest,
            &self.cfg.eval,
            self.cfg.split_seed(),
            self.cfg.forest_seed(),
            source.key(),
        )?;
        let dir = self.eval_dir(source);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for (name, text) in [
            ("report.json", report.to_json()),
            ("report.txt", report.to_text()),
            ("report.csv", report.to_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(Error::io(&path))?;
        }
        self.snapshot(&dir)?;
        Ok(report)
    }

    /// generate → train → embed → evaluate with the configured features.
    pub fn run(&self) -> Result<EvalReport> {
        self.generate()?;
        if self.cfg.features == FeatureSource::Embedding {
            self.train(|_| {})?;
            self.embed()?;
        } else {
            self.baseline()?;
        }
        self.evaluate(self.cfg.features)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableAxis {
    Representation,
    FrameSize,
    KernelShape,
    LargeScale,
}

impl TableAxis {
    pub const ALL: [TableAxis; 4] = [
        TableAxis::Representation,
        TableAxis::FrameSize,
        TableAxis::KernelShape,
        TableAxis::LargeScale,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Self::Representation => "representation",
            Self::FrameSize => "frame-size",
            Self::KernelShape => "kernel-shape",
            Self::LargeScale => "large-scale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.key() == s)
    }

    pub fn title(self) -> &'static str {
        match self {
            Self::Representation => "Prediction MAE when changing input representations",
            Self::FrameSize => "Prediction MAE when changing frame size for spectrogram",
            Self::KernelShape => "Prediction MAE when changing kernel shapes for Model 1",
            Self::LargeScale => "Prediction MAE using baseline features and feature embeddings",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub family: Family,
    pub param: Param,
    pub label: String,
    pub mae: Vec<f64>,
    pub pct_of_range: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub axis: TableAxis,
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    /// Whether the desk-scale numbers follow the reference direction.
    pub trend: Option<String>,
    pub config: ExperimentConfig,
}

impl Table {
    pub fn to_text(&self) -> String {
        let with_pct = self.axis == TableAxis::LargeScale;
        let cell = |r: &TableRow, i: usize| {
            if with_pct {
                format!(
                    "{:.3}{} / {:.2}%",
                    r.mae[i],
                    r.param.unit(),
                    r.pct_of_range[i]
                )
            } else {
                format!("{:.3}", r.mae[i])
            }
        };
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.chars().count())
            .max()
            .unwrap_or(0)
            .max(4);
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for r in &self.rows {
            for (i, w) in widths.iter_mut().enumerate() {
                *w = (*w).max(cell(r, i).chars().count());
            }
        }
        let mut s = format!("{}\n", self.title);
        let _ = write!(s, "{:<6} {:<label_w$}", "Data", "Para");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(s, " | {c:>w$}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<6} {:<label_w$}", r.family.to_string(), r.label);
            for (i, w) in widths.iter().enumerate() {
                let _ = write!(s, " | {:>w$}", cell(r, i));
            }
            s.push('\n');
        }
        if let Some(t) = &self.trend {
            let _ = writeln!(s, "\n{t}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,param");
        for c in &self.columns {
            let _ = write!(s, ",{c}_mae,{c}_pct");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.family, r.param.key());
            for (m, p) in r.mae.iter().zip(&r.pct_of_range) {
                let _ = write!(s, ",{m:.6},{p:.4}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<dir>/<axis>.txt`, `.csv` and `.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        for (ext, text) in [
            ("txt", self.to_text()),
            ("csv", self.to_csv()),
            ("json", json),
        ] {
            let path = dir.join(format!("{}.{ext}", self.axis.key()));
            fs::write(&path, text).map_err(Error::io(&path))?;
        }
        Ok(())
    }
}

/// Counts rows where `better(row)` holds.
fn trend_line(rows: &[TableRow], what: &str, better: impl Fn(&TableRow) -> bool) -> String {
    let n = rows.iter().filter(|r| better(r)).count();
    let verdict = if n == rows.len() {
        "holds"
    } else if n == 0 {
        "does not hold"
    } else {
        "holds partially"
    };
    format!(
        "trend ({what}): {verdict} in {n}/{} rows at desk scale",
        rows.len()
    )
}

fn kernel_label(blocks: usize, flat: usize) -> String {
    if flat == 0 {
        format!("{blocks}(3*3)")
    } else {
        format!("{}(3*3)+{flat}(1*3)", blocks - flat)
    }
}

fn row_labels(params: &[Param]) -> Vec<String> {
    if params.len() == 1 {
        return vec![params[0].label().to_string()];
    }
    let joint: Vec<&str> = params.iter().map(|p| p.label()).collect();
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == 0 {
                format!("Joint ({}): {}", joint.join("/"), p.label())
            } else {
                format!("Joint: {}", p.label())
            }
        })
        .collect()
}

impl Pipeline {
    /// Column configs for a sweep axis over one family.
    fn axis_columns(&self, axis: TableAxis, family: Family) -> Vec<(String, ExperimentConfig)> {
        let t = &self.cfg.table;
        let mut base = self.cfg.clone();
        base.dataset.family = family;
        let blocks = base.model.spec(1).conv_blocks.len();
        match axis {
            TableAxis::Representation => [Representation::Mel, Representation::Spectrogram]
                .into_iter()
                .map(|r| {
                    let mut c = base.clone();
                    c.preprocess.representation = r;
                    c.model.variant = Variant::Model1Mel;
                    c.model.flat_tail = 0;
                    (r.label().to_string(), c)
                })
                .collect(),
            TableAxis::FrameSize => t
                .frame_sizes
                .iter()
                .map(|&f| {
                    let mut c = base.clone();
                    c.preprocess.representation = Representation::Spectrogram;
                    c.preprocess.frame_len = f;
                    c.preprocess.hop_len = None;
                    c.model.variant = Variant::Model1SpecTuned;
                    c.model.flat_tail = 0;
                    (f.to_string(), c)
                })
                .collect(),
            TableAxis::KernelShape => t
                .flat_tails
                .iter()
                .map(|&k| {
                    let mut c = base.clone();
                    c.preprocess.representation = Representation::Spectrogram;
                    c.preprocess.frame_len = t.kernel_frame;
                    c.preprocess.hop_len = None;
                    c.model.variant = Variant::Model1SpecTuned;
                    c.model.flat_tail = k;
                    (kernel_label(blocks, k), c)
                })
                .collect(),
            TableAxis::LargeScale => Vec::new(),
        }
    }

    fn cell(
        &self,
        cfg: ExperimentConfig,
        dir: PathBuf,
        source: FeatureSource,
    ) -> Result<EvalReport> {
        let mut cfg = cfg;
        cfg.output_dir = dir;
        cfg.features = source;
        let p = Pipeline {
            cfg,
            cache: self.cache.clone(),
            progress: self.progress.clone(),
        };
        p.cfg.validate()?;
        p.run()
    }

    /// Runs one sweep and writes `<output_dir>/tables/<axis>.{txt,csv,json}`.
    /// Cells share generated datasets through the cache directory, which
    /// defaults to `<output_dir>/tables/cache`.
    pub fn reproduce_table(&self, axis: TableAxis) -> Result<Table> {
        let tables = self.out().join("tables");
        let runner = Pipeline {
            cfg: self.cfg.clone(),
            cache: Some(self.cache.clone().unwrap_or_else(|| tables.join("cache"))),
            progress: self.progress.clone(),
        };
        let mut rows = Vec::new();
        let columns: Vec<String>;
        if axis == TableAxis::LargeScale {
            let mut cfg = self.cfg.clone();
            cfg.dataset.family = Family::D4P;
            let dir = tables.join(axis.key()).join("D4P");
            columns = vec!["Baseline features".into(), "Feature embeddings".into()];
            let reports = [FeatureSource::Baseline, FeatureSource::Embedding]
                .into_iter()
                .map(|s| {
                    runner.note(&format!("{}: D4P / {}", axis.key(), s.key()));
                    runner.cell(cfg.clone(), dir.clone(), s)
                })
                .collect::<Result<Vec<_>>>()?;
            for p in Family::D4P.varying() {
                let scores: Vec<_> = reports
                    .iter()
                    .map(|r| r.score(p).expect("scored"))
                    .collect();
                rows.push(TableRow {
                    family: Family::D4P,
                    param: p,
                    label: p.label().to_string(),
                    mae: scores.iter().map(|s| s.mae).collect(),
                    pct_of_range: scores.iter().map(|s| s.pct_of_range).collect(),
                });
            }
        } else {
            columns = runner
                .axis_columns(axis, self.cfg.table.families[0])
                .into_iter()
                .map(|c| c.0)
                .collect();
            for &family in &self.cfg.table.families {
                let reports = runner
                    .axis_columns(axis, family)
                    .into_iter()
                    .enumerate()
                    .map(|(i, (label, cfg))| {
                        runner.note(&format!("{}: {family} / {label}", axis.key()));
                        let dir = tables
                            .join(axis.key())
                            .join(family.to_string())
                            .join(format!("col{i}"));
                        runner.cell(cfg, dir, FeatureSource::Embedding)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let params = family.varying();
                for (p, label) in params.iter().zip(row_labels(&params)) {
                    let scores: Vec<_> = reports
                        .iter()
                        .map(|r| r.score(*p).expect("scored"))
                        .collect();
                    rows.push(TableRow {
                        family,
                        param: *p,
                        label,
                        mae: scores.iter().map(|s| s.mae).collect(),
                        pct_of_range: scores.iter().map(|s| s.pct_of_range).collect(),
                    });
                }
            }
        }
        let trend = match axis {
            TableAxis::Representation => {
                Some(trend_line(&rows, "spectrogram better than Melgram", |r| {
                    r.mae[1] < r.mae[0]
                }))
            }
            TableAxis::FrameSize => {
                let sizes = &self.cfg.table.frame_sizes;
                let mut order: Vec<usize> = (0..sizes.len()).collect();
                order.sort_by_key(|&i| std::cmp::Reverse(sizes[i]));
                Some(trend_line(&rows, "smaller frames better", |r| {
                    order.windows(2).all(|w| r.mae[w[1]] < r.mae[w[0]])
                }))
            }
            TableAxis::KernelShape => None,
            TableAxis::LargeScale => Some(trend_line(
                &rows,
                "embeddings better than baseline features",
                |r| r.mae[1] < r.mae[0],
            )),
        };
        let table = Table {
            axis,
            title: axis.title().to_string(),
            columns,
            rows,
            trend,
            config: self.cfg.clone(),
        };
        table.save(&tables)?;
        self.cfg.write_snapshot(&tables)?;
        Ok(table)
    }
}
