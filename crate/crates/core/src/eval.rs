//! Repeated 80/20 evaluation of forests on embedding or baseline features.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drc::Param;
use crate::error::{Error, Result};
use crate::forest::{ForestConfig, MultiForest};

/// Minimum number of loops for a grouped split.
pub const MIN_GROUPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitBy {
    /// Every loop's entries land on one side of the split.
    Loop,
    Entry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_splits: usize,
    pub test_fraction: f64,
    pub split_by: SplitBy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_splits: 50,
            test_fraction: 0.2,
            split_by: SplitBy::Loop,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(Error::config("eval.n_splits", "must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("eval.test_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `n_splits` seeded train/test partitions of the rows. Grouped splits
/// put `max(1, round(fraction · G))` whole groups in the test side.
pub fn make_splits(groups: &[usize], cfg: &EvalConfig, seed: u64) -> Result<Vec<Split>> {
    cfg.validate()?;
    let n = groups.len();
    match cfg.split_by {
        SplitBy::Loop => {
            let mut ids: Vec<usize> = groups.to_vec();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() < MIN_GROUPS {
                return Err(Error::Protocol(format!(
                    "grouped 80/20 splitting needs at least {MIN_GROUPS} loops, found {}",
                    ids.len()
                )));
            }
            let n_test =
                ((ids.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, ids.len() - 1);
            Ok((0..cfg.n_splits)
                .map(|s| {
                    let mut order = ids.clone();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64)));
                    let test_ids = &order[..n_test];
                    let (test, train) = (0..n).partition(|&i| test_ids.contains(&groups[i]));
                    Split { train, test }
                })
                .collect())
        }
        SplitBy::Entry => {
            if n < MIN_GROUPS {
                return Err(Error::Protocol(format!("{n} entries are too few to split")));
            }
            let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
            Ok((0..cfg.n_splits)
                .map(|s| {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64)));
                    let mut test = order[..n_test].to_vec();
                    let mut train = order[n_test..].to_vec();
                    test.sort_unstable();
                    train.sort_unstable();
                    Split { train, test }
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamScore {
    pub param: Param,
    /// Mean over splits of the per-split test MAE, in physical units.
    pub mae: f64,
    pub pct_of_range: f64,
    /// Same protocol with the training-mean label as the prediction.
    pub mean_predictor_mae: f64,
    pub per_split: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub feature_source: String,
    pub n_features: usize,
    pub n_entries: usize,
    pub n_groups: usize,
    pub n_splits: usize,
    pub test_fraction: f64,
    pub split_by: SplitBy,
    pub split_seed: u64,
    pub forest_seed: u64,
    pub forest: ForestConfig,
    pub scores: Vec<ParamScore>,
}

fn format_value(p: Param, v: f64) -> String {
    format!("{v:.3}{}", p.unit())
}

impl EvalReport {
    pub fn score(&self, p: Param) -> Option<&ParamScore> {
        self.scores.iter().find(|s| s.param == p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    /// Aligned table, one row per parameter: `MAE / % of range`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "features: {} ({} columns), {} entries, {} loops, {} splits by {:?}",
            self.feature_source,
            self.n_features,
            self.n_entries,
            self.n_groups,
            self.n_splits,
            self.split_by
        );
        let _ = writeln!(
            s,
            "{:<10} {:>22} {:>16}",
            "", "MAE / % of range", "mean predictor"
        );
        for sc in &self.scores {
            let _ = writeln!(
                s,
                "{:<10} {:>22} {:>16}",
                sc.param.label(),
                format!(
                    "{} / {:.2}%",
                    format_value(sc.param, sc.mae),
                    sc.pct_of_range
                ),
                format_value(sc.param, sc.mean_predictor_mae)
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("param,mae,pct_of_range,mean_predictor_mae,n_splits\n");
        for sc in &self.scores {
            let _ = writeln!(
                s,
                "{},{:.6},{:.4},{:.6},{}",
                sc.param.key(),
                sc.mae,
                sc.pct_of_range,
                sc.mean_predictor_mae,
                self.n_splits
            );
        }
        s
    }
}

fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// Runs the split protocol: for each split fit one forest per parameter on
/// the training rows and record the test MAE; scores are means over splits.
/// Split `s` shuffles with `split_seed + s` and grows its forests from
/// `forest_seed + s`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    features: &[Vec<f64>],
    labels: &[Vec<f64>],
    groups: &[usize],
    params: &[Param],
    forest: &ForestConfig,
    cfg: &EvalConfig,
    split_seed: u64,
    forest_seed: u64,
    feature_source: &str,
) -> Result<EvalReport> {
    forest.validate()?;
    if features.len() != labels.len() || features.len() != groups.len() {
        return Err(Error::Data(format!(
            "{} feature rows, {} label rows, {} group ids",
            features.len(),
            labels.len(),
            groups.len()
        )));
    }
    if labels.iter().any(|l| l.len() != params.len()) {
        return Err(Error::Data(format!(
            "every label row must have {} values",
            params.len()
        )));
    }
    let splits = make_splits(groups, cfg, split_seed)?;
    let per_split: Vec<(Vec<f64>, Vec<f64>)> = splits
        .par_iter()
        .enumerate()
        .map(|(s, split)| {
            let x: Vec<Vec<f64>> = split.train.iter().map(|&i| features[i].clone()).collect();
            let y: Vec<Vec<f64>> = split.train.iter().map(|&i| labels[i].clone()).collect();
            let model = MultiForest::fit(&x, &y, forest, forest_seed.wrapping_add(s as u64))?;
            let preds: Vec<Vec<f64>> = split
                .test
                .iter()
                .map(|&i| model.predict(&features[i]))
                .collect();
            let mut maes = Vec::with_capacity(params.len());
            let mut base = Vec::with_capacity(params.len());
            for j in 0..params.len() {
                let truth: Vec<f64> = split.test.iter().map(|&i| labels[i][j]).collect();
                let p: Vec<f64> = preds.iter().map(|r| r[j]).collect();
                maes.push(mae(&p, &truth));
                let mean = y.iter().map(|r| r[j]).sum::<f64>() / y.len() as f64;
                base.push(mae(&vec![mean; truth.len()], &truth));
            }
            Ok((maes, base))
        })
        .collect::<Result<_>>()?;
    let n = per_split.len() as f64;
    let scores = params
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let runs: Vec<f64> = per_split.iter().map(|(m, _)| m[j]).collect();
            let mae = runs.iter().sum::<f64>() / n;
            ParamScore {
                param: p,
                mae,
                pct_of_range: 100.0 * mae / p.reporting_range(),
                mean_predictor_mae: per_split.iter().map(|(_, b)| b[j]).sum::<f64>() / n,
                per_split: runs,
            }
        })
        .collect();
    let mut ids = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    Ok(EvalReport {
        feature_source: feature_source.to_string(),
        n_features: features.first().map(Vec::len).unwrap_or(0),
        n_entries: features.len(),
        n_groups: ids.len(),
        n_splits: cfg.n_splits,
        test_fraction: cfg.test_fraction,
        split_by: cfg.split_by,
        split_seed,
        forest_seed,
        forest: forest.clone(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouped_splits_keep_loops_together() {
        let groups: Vec<usize> = (0..80).map(|i| i / 10).collect();
        let splits = make_splits(&groups, &EvalConfig::default(), 4).unwrap();
        assert_eq!(splits.len(), 50);
        for s in &splits {
            let test_groups: Vec<usize> = s.test.iter().map(|&i| groups[i]).collect();
            assert!(s.train.iter().all(|&i| !test_groups.contains(&groups[i])));
            assert_eq!(s.test.len(), 20);
        }
    }

    #[test]
    fn too_few_loops_is_a_protocol_error() {
        let groups = vec![0, 0, 1, 1, 2, 2, 3, 3];
        assert!(matches!(
            make_splits(&groups, &EvalConfig::default(), 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn percentage_uses_reporting_range() {
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 10) as f64]).collect();
        let y: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 10) as f64 * 4.9]).collect();
        let g: Vec<usize> = (0..60).map(|i| i / 10).collect();
        let cfg = EvalConfig {
            n_splits: 3,
            ..Default::default()
        };
        let forest = ForestConfig {
            n_trees: 10,
            ..Default::default()
        };
        let r = evaluate(&x, &y, &g, &[Param::Thd], &forest, &cfg, 0, 1, "test").unwrap();
        let s = &r.scores[0];
        assert!((s.pct_of_range - 100.0 * s.mae / 49.0).abs() < 1e-12);
        assert!(r.to_text().contains('%'));
        assert_eq!(r.to_csv().lines().count(), 2);
    }
}
