//! Parameter grids with per-file offsets, and dataset materialization.
//!
//! Every varying parameter has a fine grid of `count` values
//! `start + j·step`. A loop sees only every `stride`-th value, starting at
//! `i mod stride` for loop `i`, so the union over `stride` consecutive loops
//! covers the fine grid. DS families use stride 1 and see the full grid.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{
    desk_recipes, synthesize_loop, AudioClip, ClipSidecar, LoopRecipe, LOOP_PEAK_DBFS,
};
use crate::drc::{compress, DrcParams, Param};
use crate::error::{Error, Result};
use crate::wav::{read_wav, write_wav, WavEncoding};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOOPS_DIR: &str = "loops";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    DS1,
    DS2,
    DS3,
    DS4,
    DM1,
    DM2,
    D4P,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::DS1,
        Family::DS2,
        Family::DS3,
        Family::DS4,
        Family::DM1,
        Family::DM2,
        Family::D4P,
    ];

    pub fn varying(self) -> Vec<Param> {
        match self {
            Family::DS1 => vec![Param::Thd],
            Family::DS2 => vec![Param::Ratio],
            Family::DS3 => vec![Param::Attack],
            Family::DS4 => vec![Param::Release],
            Family::DM1 => vec![Param::Thd, Param::Ratio],
            Family::DM2 => vec![Param::Attack, Param::Release],
            Family::D4P => Param::ALL.to_vec(),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("dataset.family", format!("unknown family `{s}`")))
    }
}

/// Fine grid of one varying parameter and how it is spread over loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisGrid {
    pub param: Param,
    pub start: f64,
    pub step: f64,
    pub count: usize,
    pub stride: usize,
}

fn round_grid(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl AxisGrid {
    fn new(param: Param, start: f64, step: f64, count: usize, stride: usize) -> Self {
        Self {
            param,
            start,
            step,
            count,
            stride,
        }
    }

    pub fn settings_per_file(&self) -> usize {
        (self.count / self.stride).max(1)
    }

    pub fn value(&self, j: usize) -> f64 {
        round_grid(self.start + (j % self.count) as f64 * self.step)
    }

    /// Raw (unclamped) values seen by loop `loop_index`.
    pub fn values_for_loop(&self, loop_index: usize) -> Vec<f64> {
        let offset = loop_index % self.stride;
        (0..self.settings_per_file())
            .map(|k| self.value(offset + k * self.stride))
            .collect()
    }

    /// Every value of the fine grid.
    pub fn fine_values(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.value(j)).collect()
    }

    /// Range of the fine grid after clamping into the compressor domain.
    pub fn label_range(&self) -> (f64, f64) {
        let (lo, hi) = self.param.domain();
        let first = self.value(0).clamp(lo, hi);
        let last = self.value(self.count - 1).clamp(lo, hi);
        (first.min(last), first.max(last))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub family: Family,
    pub n_loops: usize,
    pub seed: u64,
    pub axes: Vec<AxisGrid>,
}

/// Paper-scale grids for each family.
pub fn build_grid(family: Family, n_loops: usize, seed: u64) -> Result<GridSpec> {
    if n_loops < 2 {
        return Err(Error::Protocol(format!(
            "a grid needs at least 2 loops, got {n_loops}"
        )));
    }
    let axes = match family {
        Family::DS1 => vec![AxisGrid::new(Param::Thd, 0.0, 1.0, 50, 1)],
        Family::DS2 => vec![AxisGrid::new(Param::Ratio, 0.0, 0.4, 50, 1)],
        Family::DS3 => vec![AxisGrid::new(Param::Attack, 1.0, 2.0, 50, 1)],
        Family::DS4 => vec![AxisGrid::new(Param::Release, 10.0, 20.0, 50, 1)],
        Family::DM1 => vec![
            AxisGrid::new(Param::Thd, 10.0, 0.6, 64, 8),
            AxisGrid::new(Param::Ratio, 1.0, 0.3, 64, 8),
        ],
        Family::DM2 => vec![
            AxisGrid::new(Param::Attack, 1.0, 1.5, 64, 8),
            AxisGrid::new(Param::Release, 10.0, 15.0, 64, 8),
        ],
        Family::D4P => vec![
            AxisGrid::new(Param::Thd, 10.0, 1.0, 40, 8),
            AxisGrid::new(Param::Ratio, 1.28, 0.48, 40, 8),
            AxisGrid::new(Param::Attack, 1.0, 2.5, 40, 8),
            AxisGrid::new(Param::Release, 10.0, 25.0, 40, 8),
        ],
    };
    Ok(GridSpec {
        family,
        n_loops,
        seed,
        axes,
    })
}

/// One compressor setting for one loop, before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedEntry {
    pub loop_index: usize,
    pub params: DrcParams,
}

impl GridSpec {
    /// Multiplies every axis stride by `thin`, leaving `count/stride'`
    /// settings per file. Consecutive loops still interleave, so enough
    /// loops cover the whole fine grid including both endpoints.
    pub fn thinned(mut self, thin: usize) -> Result<Self> {
        if thin == 0 {
            return Err(Error::config("dataset.thin", "must be at least 1"));
        }
        for axis in &mut self.axes {
            axis.stride *= thin;
            if axis.stride > axis.count {
                return Err(Error::config(
                    "dataset.thin",
                    format!(
                        "stride {} exceeds the {}-point {} grid",
                        axis.stride,
                        axis.count,
                        axis.param.key()
                    ),
                ));
            }
        }
        Ok(self)
    }

    pub fn varying(&self) -> Vec<Param> {
        self.axes.iter().map(|a| a.param).collect()
    }

    pub fn label_ranges(&self) -> Vec<(Param, f64, f64)> {
        self.axes
            .iter()
            .map(|a| {
                let (lo, hi) = a.label_range();
                (a.param, lo, hi)
            })
            .collect()
    }

    /// Nominal settings per file: the product over axes.
    pub fn settings_per_file(&self) -> usize {
        self.axes.iter().map(|a| a.settings_per_file()).product()
    }

    /// Compressor settings for loop `loop_index`: the Cartesian product of
    /// the per-axis values, non-varying parameters at their defaults. Values
    /// outside the compressor domain are clamped; settings that coincide after
    /// clamping are kept once. Returns the settings and a note per clamp.
    pub fn settings_for_loop(&self, loop_index: usize) -> (Vec<DrcParams>, Vec<String>) {
        let mut notes = Vec::new();
        let per_axis: Vec<Vec<f64>> = self
            .axes
            .iter()
            .map(|a| {
                let (lo, hi) = a.param.domain();
                a.values_for_loop(loop_index)
                    .into_iter()
                    .map(|v| {
                        let c = v.clamp(lo, hi);
                        if c != v {
                            notes.push(format!(
                                "loop {loop_index}: {} {v} clamped to {c}",
                                a.param.key()
                            ));
                        }
                        c
                    })
                    .collect()
            })
            .collect();
        let mut out: Vec<DrcParams> = vec![DrcParams::default()];
        for (axis, values) in self.axes.iter().zip(&per_axis) {
            out = out
                .iter()
                .flat_map(|base| {
                    values.iter().map(move |&v| {
                        let mut p = *base;
                        p.set(axis.param, v);
                        p
                    })
                })
                .collect();
        }
        let mut seen = HashSet::new();
        out.retain(|p| seen.insert(Param::ALL.map(|q| p.get(q).to_bits())));
        (out, notes)
    }

    pub fn plan(&self) -> (Vec<PlannedEntry>, Vec<String>) {
        let mut entries = Vec::new();
        let mut notes = Vec::new();
        for i in 0..self.n_loops {
            let (settings, n) = self.settings_for_loop(i);
            notes.extend(n);
            entries.extend(settings.into_iter().map(|params| PlannedEntry {
                loop_index: i,
                params,
            }));
        }
        (entries, notes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub family: Family,
    pub loop_id: String,
    /// Index of the source loop; entries of one loop form one split group.
    pub group: usize,
    pub unprocessed_clip_id: String,
    pub processed_clip_id: String,
    pub labels: DrcParams,
    /// Processed WAV, relative to the family directory.
    pub path: String,
}

impl ManifestEntry {
    pub fn label_vector(&self, params: &[Param]) -> Vec<f64> {
        params.iter().map(|&p| self.labels.get(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub id: String,
    /// Relative to the family directory.
    pub path: String,
    pub recipe: Option<LoopRecipe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub family: Family,
    pub split_seed: u64,
    pub sample_rate: u32,
    pub grid: GridSpec,
    pub varying: Vec<Param>,
    /// Normalization range of each varying parameter.
    pub label_ranges: Vec<(Param, f64, f64)>,
    /// Grid values moved into the compressor domain.
    pub adjustments: Vec<String>,
    pub loops: Vec<LoopRecord>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn n_groups(&self) -> usize {
        self.loops.len()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("manifest: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn check_loops(grid: &GridSpec, loops: &[AudioClip]) -> Result<u32> {
    if loops.len() != grid.n_loops {
        return Err(Error::Data(format!(
            "grid expects {} loops, {} given",
            grid.n_loops,
            loops.len()
        )));
    }
    let rate = loops[0].sample_rate;
    if let Some(c) = loops.iter().find(|c| c.sample_rate != rate) {
        return Err(Error::Data(format!(
            "loop `{}` has sample rate {}, expected {rate}",
            c.id, c.sample_rate
        )));
    }
    let mut ids = HashSet::new();
    if let Some(c) = loops.iter().find(|c| !ids.insert(c.id.as_str())) {
        return Err(Error::Data(format!("duplicate loop id `{}`", c.id)));
    }
    Ok(rate)
}

/// Plans the dataset: every (loop, setting) entry sorted by (loop id,
/// labels) and numbered in that order. Nothing is rendered.
pub fn build_manifest(
    grid: &GridSpec,
    loops: &[AudioClip],
    recipes: &[Option<LoopRecipe>],
) -> Result<DatasetManifest> {
    let sample_rate = check_loops(grid, loops)?;
    let (mut planned, adjustments) = grid.plan();
    planned.sort_by(|a, b| {
        loops[a.loop_index]
            .id
            .cmp(&loops[b.loop_index].id)
            .then_with(|| a.params.total_cmp(&b.params))
    });
    let entries = planned
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let loop_id = loops[p.loop_index].id.clone();
            ManifestEntry {
                index,
                family: grid.family,
                path: format!("{loop_id}/{index}.wav"),
                processed_clip_id: format!("{loop_id}_{index:05}"),
                unprocessed_clip_id: loop_id.clone(),
                loop_id,
                group: p.loop_index,
                labels: p.params,
            }
        })
        .collect();
    let loop_records = loops
        .iter()
        .enumerate()
        .map(|(i, c)| LoopRecord {
            id: c.id.clone(),
            path: format!("{LOOPS_DIR}/{}.wav", c.id),
            recipe: recipes.get(i).cloned().flatten(),
        })
        .collect();
    Ok(DatasetManifest {
        family: grid.family,
        split_seed: grid.seed,
        sample_rate,
        grid: grid.clone(),
        varying: grid.varying(),
        label_ranges: grid.label_ranges(),
        adjustments,
        loops: loop_records,
        entries,
    })
}

fn render(entry: &ManifestEntry, loops: &[AudioClip]) -> Result<AudioClip> {
    let mut out = compress(&loops[entry.group], &entry.labels)?;
    out.id = entry.processed_clip_id.clone();
    Ok(out)
}

/// Plans and renders every entry in memory.
pub fn materialize_clips(
    grid: &GridSpec,
    loops: &[AudioClip],
    recipes: &[Option<LoopRecipe>],
) -> Result<(DatasetManifest, Vec<AudioClip>)> {
    let manifest = build_manifest(grid, loops, recipes)?;
    let clips = manifest
        .entries
        .par_iter()
        .map(|e| render(e, loops))
        .collect::<Result<_>>()?;
    Ok((manifest, clips))
}

/// Renders and writes a dataset under `<root>/<family>/`:
/// `loops/<loop_id>.wav` (+ JSON sidecar), `<loop_id>/<entry_index>.wav` and
/// `manifest.json`. Returns the family directory and the manifest.
pub fn materialize(
    grid: &GridSpec,
    loops: &[AudioClip],
    recipes: &[Option<LoopRecipe>],
    root: &Path,
    encoding: WavEncoding,
) -> Result<(PathBuf, DatasetManifest)> {
    let manifest = build_manifest(grid, loops, recipes)?;
    let dir = root.join(grid.family.to_string());
    let loops_dir = dir.join(LOOPS_DIR);
    fs::create_dir_all(&loops_dir).map_err(Error::io(&loops_dir))?;
    for (clip, record) in loops.iter().zip(&manifest.loops) {
        write_wav(clip, &dir.join(&record.path), encoding)?;
        let sidecar = ClipSidecar {
            id: clip.id.clone(),
            recipe: record.recipe.clone(),
            sample_rate: manifest.sample_rate,
        };
        let path = loops_dir.join(format!("{}.json", clip.id));
        let text =
            serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, text).map_err(Error::io(&path))?;
        let entry_dir = dir.join(&clip.id);
        fs::create_dir_all(&entry_dir).map_err(Error::io(&entry_dir))?;
    }
    manifest
        .entries
        .par_iter()
        .try_for_each(|e| write_wav(&render(e, loops)?, &dir.join(&e.path), encoding))?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok((dir, manifest))
}

/// Synthetic desk-scale loops, half drum-like and half pluck-like.
pub fn generate_loops(
    n_loops: usize,
    seed: u64,
    sample_rate: u32,
    duration_s: f64,
) -> Result<(Vec<AudioClip>, Vec<Option<LoopRecipe>>)> {
    let recipes = desk_recipes(n_loops, seed, sample_rate, duration_s);
    let clips = recipes
        .par_iter()
        .map(synthesize_loop)
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, recipes.into_iter().map(Some).collect()))
}

/// Loads every `.wav` in `dir` (sorted by file name), peak-normalized to
/// the loop level. All files must share one sample rate.
pub fn load_loop_folder(dir: &Path) -> Result<Vec<AudioClip>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", dir.display())));
    }
    let clips: Vec<AudioClip> = paths
        .iter()
        .map(|p| read_wav(p).map(|c| c.normalized_to(LOOP_PEAK_DBFS)))
        .collect::<Result<_>>()?;
    let rate = clips[0].sample_rate;
    if let Some(c) = clips.iter().find(|c| c.sample_rate != rate) {
        return Err(Error::Data(format!(
            "{} has sample rate {}, expected {rate}",
            c.id, c.sample_rate
        )));
    }
    Ok(clips)
}

/// A materialized dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn load_loops(&self) -> Result<Vec<AudioClip>> {
        self.manifest
            .loops
            .par_iter()
            .map(|l| {
                let path = self.dir.join(&l.path);
                if !path.exists() {
                    return Err(Error::MissingInput(path));
                }
                let mut c = read_wav(&path)?;
                c.id = l.id.clone();
                Ok(c)
            })
            .collect()
    }

    pub fn load_processed(&self, entry: &ManifestEntry) -> Result<AudioClip> {
        let path = self.dir.join(&entry.path);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let mut c = read_wav(&path)?;
        c.id = entry.processed_clip_id.clone();
        Ok(c)
    }

    /// Entry counts per loop id.
    pub fn per_loop_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in &self.manifest.entries {
            *m.entry(e.loop_id.clone()).or_insert(0) += 1;
        }
        m
    }
}
