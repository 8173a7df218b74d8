//! Builds model-ready pairs from a manifest.

use std::sync::Arc;

use rayon::prelude::*;

use crate::audio::AudioClip;
use crate::dataset::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::preprocess::{prepare, PreprocessConfig};
use crate::train::{InputNorm, LabelScaler, Pair};

#[derive(Clone, Debug)]
pub struct PreparedPairs {
    pub pairs: Vec<Pair>,
    pub input_shape: Vec<usize>,
    pub norm: InputNorm,
    pub scaler: LabelScaler,
    /// Physical labels per entry, in manifest order.
    pub labels: Vec<Vec<f64>>,
}

/// Preprocesses every loop once and every processed clip, standardizes
/// inputs with `norm` (fitted on the unprocessed loops when `None`) and
/// normalizes labels over the manifest's grid ranges.
pub fn prepare_pairs(
    manifest: &DatasetManifest,
    loops: &[AudioClip],
    load_processed: impl Fn(&ManifestEntry) -> Result<AudioClip> + Sync,
    cfg: &PreprocessConfig,
    norm: Option<InputNorm>,
) -> Result<PreparedPairs> {
    if loops.len() != manifest.loops.len() {
        return Err(Error::Data(format!(
            "manifest lists {} loops, {} loaded",
            manifest.loops.len(),
            loops.len()
        )));
    }
    let raw_loops: Vec<_> = loops
        .par_iter()
        .map(|c| prepare(c, cfg))
        .collect::<Result<_>>()?;
    let shape = raw_loops[0].shape.clone();
    if let Some(x) = raw_loops.iter().find(|x| x.shape != shape) {
        return Err(Error::Size(format!(
            "loop inputs differ in shape: {:?} vs {shape:?}",
            x.shape
        )));
    }
    let norm = norm.unwrap_or_else(|| InputNorm::fit(raw_loops.iter().map(|x| x.data.as_slice())));
    let loop_inputs: Vec<Arc<Vec<f32>>> = raw_loops
        .iter()
        .map(|x| Arc::new(norm.apply(&x.data)))
        .collect();
    let scaler = LabelScaler::new(manifest.label_ranges.clone());
    let params = scaler.params();
    let pairs: Vec<(Pair, Vec<f64>)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let clip = load_processed(e)?;
            let x = prepare(&clip, cfg)?;
            if x.shape != shape {
                return Err(Error::Size(format!(
                    "{} has input shape {:?}, expected {shape:?}",
                    e.processed_clip_id, x.shape
                )));
            }
            let labels = e.label_vector(&params);
            let pair = Pair {
                a: loop_inputs[e.group].clone(),
                b: Arc::new(norm.apply(&x.data)),
                target: scaler.normalize(&labels),
                group: e.group,
            };
            Ok((pair, labels))
        })
        .collect::<Result<_>>()?;
    let (pairs, labels) = pairs.into_iter().unzip();
    Ok(PreparedPairs {
        pairs,
        input_shape: shape,
        norm,
        scaler,
        labels,
    })
}
