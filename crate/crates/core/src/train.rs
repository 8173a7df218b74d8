//! Training loop, label normalization and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use drc_autodiff::{checkpoint, Adadelta, Mode, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drc::Param;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, SiameseModel};
use crate::preprocess::PreprocessConfig;

pub const CHECKPOINT_FILE: &str = "model.drcw";
pub const SIDECAR_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Maps each label to `[0, 1]` over its grid range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub ranges: Vec<(Param, f64, f64)>,
}

impl LabelScaler {
    pub fn new(ranges: Vec<(Param, f64, f64)>) -> Self {
        Self { ranges }
    }

    pub fn params(&self) -> Vec<Param> {
        self.ranges.iter().map(|r| r.0).collect()
    }

    pub fn normalize(&self, labels: &[f64]) -> Vec<f64> {
        labels
            .iter()
            .zip(&self.ranges)
            .map(|(&v, &(_, lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    }

    /// Physical values, clamped to each range. The flag reports whether any
    /// value needed clamping.
    pub fn denormalize(&self, values: &[f64]) -> (Vec<f64>, bool) {
        let mut clamped = false;
        let out = values
            .iter()
            .zip(&self.ranges)
            .map(|(&v, &(_, lo, hi))| {
                let x = lo + v * (hi - lo);
                let c = x.clamp(lo, hi);
                clamped |= c != x;
                c
            })
            .collect();
        (out, clamped)
    }
}

/// Affine input scaling `(x − mean) / std`, fitted on training inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl InputNorm {
    pub fn fit<'a>(inputs: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for x in inputs {
            for &v in x {
                n += 1;
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .map(|&v| ((v as f64 - self.mean) / self.std) as f32)
            .collect()
    }
}

/// One training example: normalized inputs for the unprocessed (`a`) and
/// processed (`b`) clip and the normalized target.
#[derive(Clone, Debug)]
pub struct Pair {
    pub a: Arc<Vec<f32>>,
    pub b: Arc<Vec<f32>>,
    pub target: Vec<f64>,
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Stop as soon as the epoch's training MSE falls below this value.
    pub target_train_mse: Option<f64>,
    pub rho: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            validation_fraction: 0.15,
            max_epochs: 60,
            patience: 10,
            target_train_mse: None,
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config(
                "train.validation_fraction",
                "must lie in (0, 1)",
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 {
            return Err(Error::config(
                "train.rho",
                "rho must lie in [0, 1) and eps be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for r in &self.records {
            let val = r.val_mse.map(|v| format!("{v:.8}")).unwrap_or_default();
            s.push_str(&format!("{},{:.8},{val}\n", r.epoch, r.train_mse));
        }
        s
    }

    pub fn final_train_mse(&self) -> f64 {
        self.records.last().map(|r| r.train_mse).unwrap_or(f64::NAN)
    }
}

/// Deterministic disjoint split of `0..n` into (train, validation).
pub fn split_train_val(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction <= 0.0 || n < 2 {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn batch<T: Scalar>(
    model: &SiameseModel<T>,
    pairs: &[Pair],
    idx: &[usize],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let a: Vec<&[f32]> = idx.iter().map(|&i| pairs[i].a.as_slice()).collect();
    let b: Vec<&[f32]> = idx.iter().map(|&i| pairs[i].b.as_slice()).collect();
    let k = model.spec.num_para;
    let mut y = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        if pairs[i].target.len() != k {
            return Err(Error::Size(format!(
                "target of length {} for a model predicting {k} parameters",
                pairs[i].target.len()
            )));
        }
        y.extend(pairs[i].target.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Ok((
        model.batch_tensor(&a)?,
        model.batch_tensor(&b)?,
        Tensor::new(vec![idx.len(), k], y)?,
    ))
}

/// Inference-mode MSE over `idx`, evaluated in chunks of `chunk` pairs.
pub fn evaluate_mse<T: Scalar>(
    model: &mut SiameseModel<T>,
    pairs: &[Pair],
    idx: &[usize],
    chunk: usize,
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for part in idx.chunks(chunk.max(1)) {
        let (a, b, y) = batch(model, pairs, part)?;
        total += model.loss_value(&a, &b, &y, Mode::Infer, 0)? * part.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

fn diverged(epoch: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::Divergence {
            epoch,
            detail: e.to_string(),
        }
    } else {
        e
    }
}

/// Mini-batch Adadelta training with early stopping. With a validation
/// split the best-validation parameters are restored at the end; without
/// one, the best training-MSE parameters are. `seed` drives the split,
/// batch order and dropout masks.
pub fn fit_pairs<T: Scalar>(
    model: &mut SiameseModel<T>,
    pairs: &[Pair],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let (train_idx, val_idx) = split_train_val(pairs.len(), cfg.validation_fraction, seed);
    let mut opt = Adadelta::<T>::new(cfg.rho, cfg.eps);
    let mut order = train_idx.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1, 0));
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, drc_autodiff::ParamStore<T>)> = None;
    let mut since_best = 0;
    let eval_chunk = cfg.batch_size.max(16);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for (bi, part) in order.chunks(cfg.batch_size).enumerate() {
            let (a, b, y) = batch(model, pairs, part)?;
            let loss = model
                .train_step(&mut opt, &a, &b, &y, mix(seed, epoch as u64, bi as u64))
                .map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("batch loss {loss}"),
                });
            }
        }
        let train_mse =
            evaluate_mse(model, pairs, &train_idx, eval_chunk).map_err(|e| diverged(epoch, e))?;
        let val_mse = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_mse(model, pairs, &val_idx, eval_chunk).map_err(|e| diverged(epoch, e))?)
        };
        let record = EpochRecord {
            epoch,
            train_mse,
            val_mse,
        };
        on_epoch(&record);
        records.push(record);
        let monitored = val_mse.unwrap_or(train_mse);
        if !monitored.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("monitored loss {monitored}"),
            });
        }
        if best.as_ref().is_none_or(|(b, _, _)| monitored < *b) {
            best = Some((monitored, epoch, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.target_train_mse.is_some_and(|t| train_mse < t) || since_best >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainLog {
        records,
        best_epoch,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

/// [`fit_pairs`] with the full protocol checks: a validation split and at
/// least ten batches of data.
pub fn train<T: Scalar>(
    model: &mut SiameseModel<T>,
    pairs: &[Pair],
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if pairs.len() < 10 * cfg.batch_size {
        return Err(Error::Protocol(format!(
            "{} entries is fewer than 10 × batch size ({})",
            pairs.len(),
            10 * cfg.batch_size
        )));
    }
    fit_pairs(model, pairs, cfg, seed, on_epoch)
}

/// Everything needed to rebuild a trained model next to its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: String,
    pub spec: ModelSpec,
    pub input_shape: Vec<usize>,
    pub width: f64,
    pub label_ranges: Vec<(Param, f64, f64)>,
    pub seed: u64,
    pub input_norm: InputNorm,
    pub preprocess: PreprocessConfig,
    pub sample_rate: u32,
    pub clip_len: usize,
    pub best_epoch: usize,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &SiameseModel<f32>,
    meta: &CheckpointMeta,
    log: &TrainLog,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &model.store)?;
    let path = dir.join(SIDECAR_FILE);
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text).map_err(Error::io(&path))?;
    let path = dir.join(TRAIN_LOG_FILE);
    let mut f = fs::File::create(&path).map_err(Error::io(&path))?;
    f.write_all(log.to_csv().as_bytes())
        .map_err(Error::io(&path))
}

pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(CHECKPOINT_FILE), dir.join(SIDECAR_FILE))
}

pub fn load_checkpoint(dir: &Path) -> Result<(SiameseModel<f32>, CheckpointMeta)> {
    let (weights, sidecar) = checkpoint_paths(dir);
    for p in [&weights, &sidecar] {
        if !p.exists() {
            return Err(Error::MissingInput(p.clone()));
        }
    }
    let text = fs::read_to_string(&sidecar).map_err(Error::io(&sidecar))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: sidecar.clone(),
        source,
    })?;
    let mut model = SiameseModel::<f32>::new(meta.spec.clone(), &meta.input_shape, meta.seed)?;
    let named = checkpoint::load::<f32>(&weights)?;
    model
        .store
        .load_named(&named)
        .map_err(|e| Error::Mismatch(format!("{}: {e}", weights.display())))?;
    Ok((model, meta))
}
