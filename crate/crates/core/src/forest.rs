//! Bagged CART regression forests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// `None` uses `⌈p / 3⌉`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 2,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

impl ForestConfig {
    pub fn mtry(&self, p: usize) -> usize {
        self.features_per_split
            .unwrap_or(p.div_ceil(3))
            .clamp(1, p.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::config("forest.n_trees", "must be at least 1"));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::config(
                "forest.min_samples_leaf",
                "must be at least 1",
            ));
        }
        if self.features_per_split == Some(0) {
            return Err(Error::config(
                "forest.features_per_split",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    cfg: &'a ForestConfig,
    mtry: usize,
    nodes: Vec<Node>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn mean(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64
    }

    /// Best split of `idx` on `feature`, by between-group sum of squares
    /// `nL·nR/n · (ȳL − ȳR)²`, which equals the SSE reduction.
    fn best_on(&self, idx: &mut [usize], feature: usize) -> Option<BestSplit> {
        idx.sort_by(|&a, &b| {
            self.x[a][feature]
                .total_cmp(&self.x[b][feature])
                .then(a.cmp(&b))
        });
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let min_leaf = self.cfg.min_samples_leaf;
        let mut left_sum = 0.0;
        let mut best: Option<BestSplit> = None;
        for k in 1..n {
            left_sum += self.y[idx[k - 1]];
            let (lo, hi) = (self.x[idx[k - 1]][feature], self.x[idx[k]][feature]);
            if k < min_leaf || n - k < min_leaf || lo == hi {
                continue;
            }
            let (nl, nr) = (k as f64, (n - k) as f64);
            let diff = left_sum / nl - (total - left_sum) / nr;
            let gain = nl * nr / n as f64 * diff * diff;
            if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(BestSplit {
                    gain,
                    feature,
                    threshold,
                });
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.mean(idx)));
        let pure = idx.iter().all(|&i| self.y[i] == self.y[idx[0]]);
        if pure
            || idx.len() < 2 * self.cfg.min_samples_leaf
            || self.cfg.max_depth.is_some_and(|d| depth >= d)
        {
            return id;
        }
        let p = self.x[0].len();
        let mut features: Vec<usize> = (0..p).collect();
        features.shuffle(rng);
        let mut examined = 0;
        let mut best: Option<BestSplit> = None;
        for f in features {
            let first = self.x[idx[0]][f];
            if idx.iter().all(|&i| self.x[i][f] == first) {
                continue;
            }
            examined += 1;
            if let Some(s) = self.best_on(idx, f) {
                if best.as_ref().is_none_or(|b| s.gain > b.gain) {
                    best = Some(s);
                }
            }
            if examined >= self.mtry && best.is_some() {
                break;
            }
        }
        let Some(split) = best else { return id };
        let (mut left, mut right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x[i][split.feature] <= split.threshold);
        let l = self.grow(&mut left, depth + 1, rng);
        let r = self.grow(&mut right, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        id
    }
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::Data(format!(
            "{} feature rows but {} targets",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Data("a forest needs at least 2 rows".into()));
    }
    let p = x[0].len();
    if p == 0 {
        return Err(Error::Data("feature rows are empty".into()));
    }
    for (r, row) in x.iter().enumerate() {
        if row.len() != p {
            return Err(Error::Data(format!(
                "row {r} has {} features, expected {p}",
                row.len()
            )));
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature at row {r}, column {c}"
            )));
        }
    }
    if let Some(r) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite target at row {r}")));
    }
    Ok(p)
}

fn tree_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Single-target regression forest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
}

impl Forest {
    /// Trees are grown in parallel; tree `t` draws from its own seed derived
    /// from `seed`, so the result does not depend on scheduling.
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &ForestConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let p = check_inputs(x, y)?;
        let mtry = cfg.mtry(p);
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(seed, t));
                let mut idx: Vec<usize> = if cfg.bootstrap {
                    (0..x.len()).map(|_| rng.random_range(0..x.len())).collect()
                } else {
                    (0..x.len()).collect()
                };
                let mut b = Builder {
                    x,
                    y,
                    cfg,
                    mtry,
                    nodes: Vec::new(),
                };
                b.grow(&mut idx, 0, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Self {
            trees,
            n_features: p,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

/// One forest per target column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiForest {
    pub forests: Vec<Forest>,
}

impl MultiForest {
    /// `y` is row-major: one label vector per row.
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &ForestConfig, seed: u64) -> Result<Self> {
        let k = y.first().map(Vec::len).unwrap_or(0);
        if k == 0 {
            return Err(Error::Data("no targets".into()));
        }
        let forests = (0..k)
            .map(|j| {
                let col: Vec<f64> = y.iter().map(|r| r[j]).collect();
                Forest::fit(x, &col, cfg, seed.wrapping_add(j as u64 * 0x1000_0001))
            })
            .collect::<Result<_>>()?;
        Ok(Self { forests })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forests.iter().map(|f| f.predict(x)).collect()
    }
}
