//! Transformation forests.
//!
//! Trees are grown on subsamples with random candidate variables per node.
//! Predictions refit the unconditional model with nearest-neighbour weights:
//! training rows sharing a leaf with the query, normalized per tree.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Column, DataError, Dataset, Profile, Value};
use crate::fit::{fingerprint, mle_design, FitError, FittedModel};
use crate::model::{Design, ModelError, ModelSpec};
use crate::predict::{Conditional, PredictError, DECILES};
use crate::tree::{fit_tree, splitmix, PValueMethod, TransformationTree, TreeControl, TreeError};

pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("invalid forest control: {0}")]
    Control(String),
    #[error("tree {index}: {source}")]
    Tree { index: usize, source: TreeError },
    #[error("dataset does not match the training data of the forest")]
    Training,
    #[error("no neighbourhood of the query supports a model fit: {0}")]
    Fit(FitError),
    #[error(transparent)]
    Routing(#[from] TreeError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestControl {
    pub trees: usize,
    /// Subsample fraction, drawn without replacement.
    pub fraction: f64,
    /// Candidate variables per node; `⌈√V⌉` when `None`.
    pub mtry: Option<usize>,
    /// Per-tree control; its seed is replaced by `seed + b` for tree `b`.
    pub tree: TreeControl,
    pub seed: u64,
}

impl Default for ForestControl {
    fn default() -> Self {
        Self {
            trees: 100,
            fraction: 0.632,
            mtry: None,
            tree: Self::relaxed_tree(),
            seed: 1,
        }
    }
}

impl ForestControl {
    /// Size-based stopping only, as used inside ensembles.
    pub fn relaxed_tree() -> TreeControl {
        TreeControl {
            alpha: 1.0,
            min_split: 40.0,
            min_bucket: 20.0,
            pvalue: PValueMethod::Asymptotic,
            ..TreeControl::default()
        }
    }

    pub fn resolved_mtry(&self, n_vars: usize) -> usize {
        self.mtry.unwrap_or_else(|| (n_vars as f64).sqrt().ceil() as usize)
    }

    pub fn validate(&self, n_vars: usize) -> Result<(), ForestError> {
        if self.trees == 0 {
            return Err(ForestError::Control("need at least one tree".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(ForestError::Control(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        let m = self.resolved_mtry(n_vars);
        if m == 0 || m > n_vars {
            return Err(ForestError::Control(format!("mtry {m} outside 1..={n_vars}")));
        }
        self.tree.validate().map_err(|e| ForestError::Control(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestTree {
    pub tree: TransformationTree,
    /// Training rows of the subsample, ascending.
    pub sample: Vec<usize>,
    /// Leaf id of each subsample row.
    pub leaf_of: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformationForest {
    pub version: u32,
    pub spec: ModelSpec,
    pub control: ForestControl,
    pub variables: Vec<String>,
    /// Training rows and fingerprint of their responses and weights.
    pub n_train: usize,
    pub train_fingerprint: u64,
    pub trees: Vec<ForestTree>,
}

pub fn fit_forest(d: &Dataset, base: &ModelSpec, variables: &[String], ctrl: &ForestControl) -> Result<TransformationForest, ForestError> {
    ctrl.validate(variables.len())?;
    let n = d.n();
    let m = ((ctrl.fraction * n as f64).round() as usize).clamp(1, n);
    let mtry = ctrl.resolved_mtry(variables.len());
    let trees = (0..ctrl.trees)
        .into_par_iter()
        .map(|b| {
            let sample: Vec<usize> = if m == n {
                (0..n).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix(ctrl.seed ^ splitmix(b as u64 + 0x5eed)));
                let mut s = rand::seq::index::sample(&mut rng, n, m).into_vec();
                s.sort_unstable();
                s
            };
            let tc = TreeControl {
                seed: ctrl.seed.wrapping_add(b as u64),
                mtry: (mtry < variables.len()).then_some(mtry),
                ..ctrl.tree.clone()
            };
            let sub = d.subset(&sample);
            let tree = fit_tree(&sub, base, variables, &tc).map_err(|source| ForestError::Tree { index: b, source })?;
            let leaf_of = tree.leaf_ids(&sub).map_err(|source| ForestError::Tree { index: b, source })?;
            Ok(ForestTree { tree, sample, leaf_of })
        })
        .collect::<Result<Vec<_>, ForestError>>()?;
    Ok(TransformationForest {
        version: FOREST_FORMAT_VERSION,
        spec: base.clone(),
        control: ctrl.clone(),
        variables: variables.to_vec(),
        n_train: n,
        train_fingerprint: fingerprint(d.response(), d.weights()),
        trees,
    })
}

impl TransformationForest {
    /// Single-tree ensemble over all rows of `d`, the data `t` was grown on.
    pub fn from_tree(t: TransformationTree, d: &Dataset) -> Result<Self, ForestError> {
        let leaf_of = t.leaf_ids(d)?;
        let control = ForestControl {
            trees: 1,
            fraction: 1.0,
            mtry: Some(t.control.mtry.unwrap_or(t.variables.len())),
            tree: t.control.clone(),
            seed: t.control.seed,
        };
        Ok(Self {
            version: FOREST_FORMAT_VERSION,
            spec: t.spec.clone(),
            control,
            variables: t.variables.clone(),
            n_train: d.n(),
            train_fingerprint: fingerprint(d.response(), d.weights()),
            trees: vec![ForestTree {
                tree: t,
                sample: (0..d.n()).collect(),
                leaf_of,
            }],
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("forest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Prediction context bound to the training data.
    pub fn predictor<'a>(&'a self, train: &'a Dataset) -> Result<ForestPredictor<'a>, ForestError> {
        if train.n() != self.n_train || fingerprint(train.response(), train.weights()) != self.train_fingerprint {
            return Err(ForestError::Training);
        }
        let design = Design::new(&self.spec, train)?;
        let index = self
            .trees
            .iter()
            .map(|t| {
                let nodes = t.tree.nodes();
                let mut parent = vec![usize::MAX; nodes.len()];
                for node in &nodes {
                    if let crate::tree::NodeKind::Inner { left, right, .. } = &node.kind {
                        parent[left.id] = node.id;
                        parent[right.id] = node.id;
                    }
                }
                let mut by_leaf: Vec<(usize, usize)> = t.leaf_of.iter().copied().zip(t.sample.iter().copied()).collect();
                by_leaf.sort_unstable();
                TreeIndex {
                    parent,
                    range: nodes.iter().map(|n| (n.id, n.last_id)).collect(),
                    by_leaf,
                }
            })
            .collect();
        Ok(ForestPredictor {
            forest: self,
            train,
            design,
            index,
        })
    }
}

struct TreeIndex {
    parent: Vec<usize>,
    range: Vec<(usize, usize)>,
    /// (leaf id, training row) pairs, sorted.
    by_leaf: Vec<(usize, usize)>,
}

impl TreeIndex {
    /// Training rows whose leaf lies in the subtree of `node`.
    fn members(&self, node: usize) -> &[(usize, usize)] {
        let (lo, hi) = self.range[node];
        let a = self.by_leaf.partition_point(|&(l, _)| l < lo);
        let b = self.by_leaf.partition_point(|&(l, _)| l <= hi);
        &self.by_leaf[a..b]
    }

    /// Ancestor `k` levels above `leaf`, stopping at the root.
    fn ancestor(&self, mut node: usize, k: usize) -> usize {
        for _ in 0..k {
            match self.parent[node] {
                usize::MAX => break,
                p => node = p,
            }
        }
        node
    }

    fn depth_of(&self, mut node: usize) -> usize {
        let mut d = 0;
        while self.parent[node] != usize::MAX {
            node = self.parent[node];
            d += 1;
        }
        d
    }
}

/// Locally adaptive estimate for one query.
#[derive(Debug, Clone)]
pub struct ForestParams {
    pub model: FittedModel,
    /// Levels the leaves were widened towards the root; 0 for the usual
    /// nearest-neighbour estimate.
    pub widened: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub variable: String,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceOptions {
    pub permutations: usize,
    pub seed: u64,
    /// Evaluate on out-of-bag rows instead of the subsample.
    pub out_of_bag: bool,
}

impl Default for ImportanceOptions {
    fn default() -> Self {
        Self {
            permutations: 5,
            seed: 1,
            out_of_bag: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdpOptions {
    /// Training rows averaged over, spread evenly over the data.
    pub rows: usize,
    /// Grid points for numeric variables without explicit values.
    pub numeric_points: usize,
}

impl Default for PdpOptions {
    fn default() -> Self {
        Self {
            rows: 25,
            numeric_points: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdpRow {
    /// Values of the dependence variables, in their order.
    pub point: Vec<Value>,
    pub probability: f64,
    pub quantile: f64,
}

pub struct ForestPredictor<'a> {
    forest: &'a TransformationForest,
    train: &'a Dataset,
    design: Design,
    index: Vec<TreeIndex>,
}

impl ForestPredictor<'_> {
    fn leaves_of(&self, x: &Profile) -> Result<Vec<usize>, ForestError> {
        self.forest
            .trees
            .iter()
            .map(|t| Ok(t.tree.predict(x)?.id))
            .collect()
    }

    /// Per-tree normalized co-membership weights, averaged over trees, with
    /// every leaf widened `k` levels.
    fn weights_for(&self, leaves: &[usize], k: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.train.n()];
        let b = self.forest.trees.len() as f64;
        for (idx, &leaf) in self.index.iter().zip(leaves) {
            let members = idx.members(idx.ancestor(leaf, k));
            if members.is_empty() {
                continue;
            }
            let share = 1.0 / (members.len() as f64 * b);
            for &(_, row) in members {
                w[row] += share;
            }
        }
        w
    }

    /// Nearest-neighbour weights of the training rows for `x`.
    pub fn nn_weights(&self, x: &Profile) -> Result<Vec<f64>, ForestError> {
        Ok(self.weights_for(&self.leaves_of(x)?, 0))
    }

    fn fit_weighted(&self, nn: &[f64]) -> Result<FittedModel, FitError> {
        let sw = self.train.weights();
        let rows: Vec<usize> = (0..nn.len()).filter(|&i| nn[i] > 0.0 && sw[i] > 0.0).collect();
        let combined: Vec<f64> = rows.iter().map(|&i| nn[i] * sw[i]).collect();
        let scale = rows.iter().map(|&i| sw[i]).sum::<f64>() / combined.iter().sum::<f64>();
        let design = self.design.subset(&rows).with_weights(combined.iter().map(|c| c * scale).collect());
        let y: Vec<f64> = rows.iter().map(|&i| self.train.response()[i]).collect();
        mle_design(&design, &y, &self.forest.control.tree.fit)
    }

    fn params_for_leaves(&self, leaves: &[usize]) -> Result<ForestParams, ForestError> {
        let dim = self.forest.spec.n_params();
        let max_depth = self
            .index
            .iter()
            .zip(leaves)
            .map(|(idx, &l)| idx.depth_of(l))
            .max()
            .unwrap_or(0);
        let mut last = None;
        for k in 0..=max_depth {
            let w = self.weights_for(leaves, k);
            let positive = w
                .iter()
                .zip(self.train.weights())
                .filter(|(a, b)| **a > 0.0 && **b > 0.0)
                .count();
            if positive < dim {
                continue;
            }
            match self.fit_weighted(&w) {
                Ok(model) => return Ok(ForestParams { model, widened: k }),
                Err(e) => last = Some(e),
            }
        }
        Err(ForestError::Fit(last.unwrap_or_else(|| FitError::Start("too few observations in every neighbourhood".into()))))
    }

    /// Locally adaptive maximum-likelihood estimate for `x`.
    pub fn params(&self, x: &Profile) -> Result<ForestParams, ForestError> {
        self.params_for_leaves(&self.leaves_of(x)?)
    }

    /// Leaf signature of every row of `d` across trees.
    fn signatures(&self, d: &Dataset) -> Result<Vec<Vec<usize>>, ForestError> {
        let per_tree = self
            .forest
            .trees
            .iter()
            .map(|t| t.tree.leaf_ids(d))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((0..d.n()).map(|i| per_tree.iter().map(|ids| ids[i]).collect()).collect())
    }

    /// Estimates for all rows of `d`; rows sharing every leaf share one fit.
    pub fn params_rows(&self, d: &Dataset) -> Result<Vec<ForestParams>, ForestError> {
        let sigs = self.signatures(d)?;
        let mut unique: Vec<&Vec<usize>> = Vec::new();
        let mut slot: HashMap<&Vec<usize>, usize> = HashMap::new();
        let which: Vec<usize> = sigs
            .iter()
            .map(|s| {
                *slot.entry(s).or_insert_with(|| {
                    unique.push(s);
                    unique.len() - 1
                })
            })
            .collect();
        let fits = unique
            .par_iter()
            .map(|s| self.params_for_leaves(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(which.into_iter().map(|k| fits[k].clone()).collect())
    }

    /// `Σ wᵢ log f(yᵢ | θ̂(xᵢ))` over the rows of `d`.
    pub fn loglik(&self, d: &Dataset) -> Result<f64, ForestError> {
        let params = self.params_rows(d)?;
        let design = Design::new(&self.forest.spec, d)?;
        let mut ll = 0.0;
        for (i, p) in params.iter().enumerate() {
            let w = d.weights()[i];
            if w > 0.0 {
                ll += w * row_loglik(&design, &p.model.theta, i)?;
            }
        }
        Ok(ll)
    }

    /// Mean decrease of the per-tree log-likelihood when permuting each
    /// variable, averaged over trees and permutations.
    pub fn var_importance(&self, opts: &ImportanceOptions) -> Result<Vec<Importance>, ForestError> {
        let n = self.train.n();
        let trees = &self.forest.trees;
        let eval_rows: Vec<Vec<usize>> = trees
            .iter()
            .map(|t| {
                if opts.out_of_bag {
                    let mut in_bag = vec![false; n];
                    t.sample.iter().for_each(|&i| in_bag[i] = true);
                    (0..n).filter(|&i| !in_bag[i]).collect()
                } else {
                    t.sample.clone()
                }
            })
            .collect();
        let tree_ll = |b: usize, leaves: &[usize]| -> Result<f64, ForestError> {
            let nodes = trees[b].tree.nodes();
            let mut ll = 0.0;
            for &i in &eval_rows[b] {
                let w = self.train.weights()[i];
                if w > 0.0 {
                    ll += w * row_loglik(&self.design, &nodes[leaves[i]].model.theta, i)?;
                }
            }
            Ok(ll)
        };
        let baseline = (0..trees.len())
            .into_par_iter()
            .map(|b| tree_ll(b, &trees[b].tree.leaf_ids(self.train)?))
            .collect::<Result<Vec<_>, ForestError>>()?;
        let used: Vec<Vec<String>> = trees.iter().map(|t| t.tree.split_variables()).collect();
        let k_perm = opts.permutations.max(1);
        let mut out = Vec::new();
        for (v, var) in self.forest.variables.iter().enumerate() {
            let mut total = 0.0;
            let mut counted = 0usize;
            for k in 0..k_perm {
                let mut perm: Vec<usize> = (0..n).collect();
                let seed = splitmix(opts.seed ^ splitmix((v as u64) << 16 | k as u64));
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let permuted = self.train.with_permuted_column(var, &perm)?;
                let drops = (0..trees.len())
                    .into_par_iter()
                    .map(|b| {
                        if eval_rows[b].is_empty() {
                            return Ok(None);
                        }
                        if !used[b].iter().any(|u| u == var) {
                            return Ok(Some(0.0));
                        }
                        let leaves = trees[b].tree.leaf_ids(&permuted)?;
                        Ok(Some(baseline[b] - tree_ll(b, &leaves)?))
                    })
                    .collect::<Result<Vec<_>, ForestError>>()?;
                for d in drops.into_iter().flatten() {
                    total += d;
                    counted += 1;
                }
            }
            out.push(Importance {
                variable: var.clone(),
                importance: if counted == 0 { 0.0 } else { total / counted as f64 },
            });
        }
        Ok(out)
    }

    /// Grid of a dependence variable: its levels, or evenly spaced values
    /// between the observed extremes.
    pub fn default_grid(&self, var: &str, points: usize) -> Result<Vec<Value>, ForestError> {
        Ok(match self.train.column(var)? {
            Column::Categorical(c) => c.levels().iter().map(|l| Value::Level(l.clone())).collect(),
            Column::Numeric(x) => {
                let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let m = points.max(2);
                (0..m).map(|j| Value::Num(lo + (hi - lo) * j as f64 / (m - 1) as f64)).collect()
            }
        })
    }

    /// Decile table of the parameters averaged over training rows with
    /// `vars` set to every point of the product of `grids`.
    pub fn partial_dependence(&self, vars: &[String], grids: &[Vec<Value>], opts: &PdpOptions) -> Result<Vec<PdpRow>, ForestError> {
        assert_eq!(vars.len(), grids.len(), "one grid per variable");
        let n = self.train.n();
        let m = opts.rows.clamp(1, n);
        let rows: Vec<usize> = (0..m).map(|j| j * n / m).collect();
        let mut points: Vec<Vec<Value>> = vec![vec![]];
        for g in grids {
            points = points
                .into_iter()
                .flat_map(|p| {
                    g.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(v.clone());
                        q
                    })
                })
                .collect();
        }
        let results = points
            .par_iter()
            .map(|point| {
                let mut avg = vec![0.0; self.forest.spec.n_params()];
                for &r in &rows {
                    let mut x = self.train.profile(r);
                    for (v, val) in vars.iter().zip(point) {
                        x.set(v.clone(), val.clone());
                    }
                    let p = self.params(&x)?;
                    for (a, t) in avg.iter_mut().zip(&p.model.theta) {
                        *a += t / m as f64;
                    }
                }
                let c = Conditional::new(&self.forest.spec, &avg, &Profile::new())?;
                DECILES
                    .iter()
                    .map(|&prob| {
                        Ok(PdpRow {
                            point: point.clone(),
                            probability: prob,
                            quantile: c.quantile(prob)?,
                        })
                    })
                    .collect::<Result<Vec<_>, ForestError>>()
            })
            .collect::<Result<Vec<_>, ForestError>>()?;
        Ok(results.into_iter().flatten().collect())
    }
}

fn row_loglik(design: &Design, theta: &[f64], i: usize) -> Result<f64, ForestError> {
    let (h, hp) = design.h_at(theta, i);
    if !(hp > 0.0) {
        return Err(ModelError::NonMonotone { row: i, slope: hp }.into());
    }
    Ok(design.spec().link.log_pdf(h) + hp.ln())
}

pub fn nn_weights(f: &TransformationForest, train: &Dataset, x: &Profile) -> Result<Vec<f64>, ForestError> {
    f.predictor(train)?.nn_weights(x)
}

pub fn forest_params(f: &TransformationForest, train: &Dataset, x: &Profile) -> Result<ForestParams, ForestError> {
    f.predictor(train)?.params(x)
}

pub fn var_importance(f: &TransformationForest, train: &Dataset, opts: &ImportanceOptions) -> Result<Vec<Importance>, ForestError> {
    f.predictor(train)?.var_importance(opts)
}

pub fn write_importance<W: Write>(rows: &[Importance], writer: W) -> Result<(), ForestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "importance"])?;
    for r in rows {
        w.write_record([r.variable.clone(), format!("{}", r.importance)])?;
    }
    w.flush().map_err(DataError::from)?;
    Ok(())
}

pub fn write_pdp<W: Write>(vars: &[String], rows: &[PdpRow], response: &str, writer: W) -> Result<(), ForestError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vars.to_vec();
    header.push("probability".into());
    header.push(response.to_string());
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.point.iter().map(|v| v.to_string()).collect();
        rec.push(format!("{}", r.probability));
        rec.push(format!("{}", r.quantile));
        w.write_record(&rec)?;
    }
    w.flush().map_err(DataError::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BernsteinBasis, Support};
    use crate::fit::{mle, FitOptions};
    use crate::model::Link;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn base(y: &[f64]) -> ModelSpec {
        ModelSpec::unconditional(
            "y",
            Link::Logit,
            BernsteinBasis::new(5, Support::around(y).unwrap()).unwrap().into(),
        )
    }

    /// Mean and spread depend on `x1`; `g` shifts the mean; `noise` is inert.
    fn hetero(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x1: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let g: Vec<&str> = (0..n).map(|_| if rng.random_bool(0.5) { "b" } else { "a" }).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 3.0 * x1[i] + if g[i] == "b" { 0.5 } else { 0.0 } + (0.5 + x1[i]) * normal.sample(&mut rng))
            .collect();
        Dataset::new("y", y)
            .with_numeric("x1", x1)
            .unwrap()
            .with_categorical("g", &g)
            .unwrap()
            .with_numeric("noise", noise)
            .unwrap()
    }

    fn vars() -> Vec<String> {
        vec!["x1".into(), "g".into(), "noise".into()]
    }

    fn small(trees: usize) -> ForestControl {
        ForestControl {
            trees,
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_forest_is_the_tree() {
        let d = hetero(1, 600);
        let b = base(d.response());
        let tc = TreeControl {
            pvalue: PValueMethod::MonteCarlo { resamples: 199 },
            ..TreeControl::default()
        };
        let ctrl = ForestControl {
            trees: 1,
            fraction: 1.0,
            mtry: Some(3),
            tree: tc.clone(),
            seed: tc.seed,
        };
        let f = fit_forest(&d, &b, &vars(), &ctrl).unwrap();
        let t = fit_tree(&d, &b, &vars(), &tc).unwrap();
        assert_eq!(f.trees[0].tree, t);
        assert_eq!(f.trees[0].tree.to_json(), t.to_json());
    }

    #[test]
    fn root_only_forest_gives_uniform_weights_and_the_mle() {
        let d = hetero(2, 300).with_weights((0..300).map(|i| 1.0 + (i % 3) as f64).collect()).unwrap();
        let b = base(d.response());
        let ctrl = ForestControl {
            trees: 1,
            fraction: 1.0,
            mtry: Some(3),
            tree: TreeControl {
                max_depth: Some(0),
                ..ForestControl::relaxed_tree()
            },
            seed: 3,
        };
        let f = fit_forest(&d, &b, &vars(), &ctrl).unwrap();
        let p = f.predictor(&d).unwrap();
        let w = p.nn_weights(&d.profile(0)).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 300.0).abs() < 1e-15));
        let local = p.params(&d.profile(5)).unwrap();
        let unc = mle(&b, &d, &FitOptions::default()).unwrap();
        assert_eq!(local.widened, 0);
        for (a, b) in local.model.theta.iter().zip(&unc.theta) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn weights_are_normalized_per_tree() {
        let d = hetero(3, 800);
        let f = fit_forest(&d, &base(d.response()), &vars(), &small(10)).unwrap();
        let p = f.predictor(&d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = Profile::new()
                .num("x1", rng.random_range(0.0..1.0))
                .level("g", if rng.random_bool(0.5) { "a" } else { "b" })
                .num("noise", rng.random_range(0.0..1.0));
            let w = p.nn_weights(&x).unwrap();
            assert!(w.iter().all(|v| *v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Each tree alone sums to one.
        let leaves = p.leaves_of(&d.profile(0)).unwrap();
        for (idx, &leaf) in p.index.iter().zip(&leaves) {
            let m = idx.members(leaf);
            assert!(!m.is_empty());
        }
    }

    #[test]
    fn forest_beats_unconditional_and_is_deterministic() {
        let d = hetero(4, 1000);
        let b = base(d.response());
        let f = fit_forest(&d, &b, &vars(), &small(20)).unwrap();
        let g = fit_forest(&d, &b, &vars(), &small(20)).unwrap();
        assert_eq!(f.to_json(), g.to_json());
        assert_eq!(TransformationForest::from_json(&f.to_json()).unwrap(), f);
        let p = f.predictor(&d).unwrap();
        let unc = mle(&b, &d, &FitOptions::default()).unwrap();
        let ll = p.loglik(&d).unwrap();
        assert!(ll > unc.loglik + 50.0, "{ll} vs {}", unc.loglik);

        let imp = p.var_importance(&ImportanceOptions::default()).unwrap();
        assert_eq!(imp[0].variable, "x1");
        assert!(imp[0].importance > imp[1].importance && imp[0].importance > imp[2].importance.abs());
    }

    #[test]
    fn unused_variable_has_zero_importance() {
        let mut d = hetero(5, 500);
        d = d.with_categorical("const", &vec!["k"; 500]).unwrap();
        let mut v = vars();
        v.push("const".into());
        let f = fit_forest(&d, &base(d.response()), &v, &small(8)).unwrap();
        let imp = var_importance(&f, &d, &ImportanceOptions::default()).unwrap();
        assert_eq!(imp[3].importance, 0.0);
        assert!(imp[3].importance.is_sign_positive());
    }

    #[test]
    fn partial_dependence_shape_and_order() {
        let d = hetero(6, 600);
        let f = fit_forest(&d, &base(d.response()), &vars(), &small(10)).unwrap();
        let p = f.predictor(&d).unwrap();
        let grid = vec![p.default_grid("x1", 4).unwrap(), p.default_grid("g", 0).unwrap()];
        let opts = PdpOptions { rows: 10, ..Default::default() };
        let rows = p.partial_dependence(&["x1".into(), "g".into()], &grid, &opts).unwrap();
        assert_eq!(rows.len(), 4 * 2 * 9);
        for chunk in rows.chunks(9) {
            assert!(chunk.windows(2).all(|w| w[0].quantile < w[1].quantile));
        }
        // Medians grow with x1.
        let med = |i: usize| rows[i * 9 + 4].quantile;
        assert!(med(6) > med(0));
        let mut buf = Vec::new();
        write_pdp(&["x1".into(), "g".into()], &rows, "y", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 73);
    }

    #[test]
    fn training_data_must_match() {
        let d = hetero(7, 300);
        let f = fit_forest(&d, &base(d.response()), &vars(), &small(2)).unwrap();
        assert!(matches!(f.predictor(&hetero(8, 300)), Err(ForestError::Training)));
        let bad = ForestControl { mtry: Some(4), ..small(2) };
        assert!(fit_forest(&d, &base(d.response()), &vars(), &bad).is_err());
    }
}
