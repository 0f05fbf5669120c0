//! Transformation trees.
//!
//! Every node fits the unconditional model, correlates the per-observation
//! score contributions with each candidate covariate by a permutation test,
//! and splits on the most significant covariate at the cutpoint maximizing
//! a two-sample statistic of the scores. Leaves keep their fitted model.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Column, DataError, Dataset, Profile};
use crate::fit::{mle_design, FitError, FitOptions, FittedModel};
use crate::model::{Design, ModelError, ModelSpec};

pub const TREE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tree models must be unconditional (no strata, shifts or covariate-dependent bases)")]
    NotUnconditional,
    #[error("invalid tree control: {0}")]
    Control(String),
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("variable {0} is the response or weight")]
    ReservedVariable(String),
    #[error("root model: {0}")]
    Root(FitError),
    #[error("level {level:?} of {variable} was not seen when the split was fitted")]
    UnseenLevel { variable: String, level: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PValueMethod {
    /// Monte-Carlo permutation p-values from this many resamples.
    MonteCarlo { resamples: usize },
    /// Bonferroni-adjusted normal approximation of the max statistic.
    Asymptotic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeControl {
    /// Splits need an adjusted p-value below `alpha`; `alpha = 1` disables
    /// the significance gate.
    pub alpha: f64,
    /// Smallest weighted node size that may be split.
    pub min_split: f64,
    /// Smallest weighted leaf size.
    pub min_bucket: f64,
    pub max_depth: Option<usize>,
    pub seed: u64,
    pub pvalue: PValueMethod,
    /// Candidate variables drawn per node; all when `None`.
    pub mtry: Option<usize>,
    pub fit: FitOptions,
}

impl Default for TreeControl {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_split: 200.0,
            min_bucket: 70.0,
            max_depth: None,
            seed: 1,
            pvalue: PValueMethod::MonteCarlo { resamples: 9999 },
            mtry: None,
            fit: FitOptions::default(),
        }
    }
}

impl TreeControl {
    pub fn validate(&self) -> Result<(), TreeError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(TreeError::Control(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.min_bucket > 0.0 && self.min_bucket <= self.min_split) {
            return Err(TreeError::Control("need 0 < min_bucket <= min_split".into()));
        }
        if let PValueMethod::MonteCarlo { resamples } = self.pvalue {
            if resamples == 0 {
                return Err(TreeError::Control("resamples must be positive".into()));
            }
        }
        if self.mtry == Some(0) {
            return Err(TreeError::Control("mtry must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Split {
    /// Rows with `variable <= cutpoint` go left.
    Numeric { variable: String, cutpoint: f64 },
    /// Rows whose level is in `left` go left; `levels` are all levels known
    /// when the split was fitted.
    Categorical {
        variable: String,
        left: Vec<String>,
        levels: Vec<String>,
    },
}

impl Split {
    pub fn variable(&self) -> &str {
        match self {
            Split::Numeric { variable, .. } | Split::Categorical { variable, .. } => variable,
        }
    }

    fn goes_left_level(&self, level: &str) -> Result<bool, TreeError> {
        match self {
            Split::Categorical {
                variable, left, levels, ..
            } => {
                if !levels.iter().any(|l| l == level) {
                    return Err(TreeError::UnseenLevel {
                        variable: variable.clone(),
                        level: level.to_string(),
                    });
                }
                Ok(left.iter().any(|l| l == level))
            }
            Split::Numeric { .. } => unreachable!("level routing on a numeric split"),
        }
    }

    pub fn goes_left(&self, x: &Profile) -> Result<bool, TreeError> {
        match self {
            Split::Numeric { variable, cutpoint } => Ok(x.numeric(variable)? <= *cutpoint),
            Split::Categorical { variable, .. } => self.goes_left_level(&x.categorical(variable)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafReason {
    NotSignificant,
    MinSplit,
    MaxDepth,
    NoAdmissibleSplit,
    /// Fewer observations than parameters; the parent's model is kept.
    TooFewObservations,
    /// A child model could not be fitted.
    ChildFitFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTest {
    pub variable: String,
    pub statistic: f64,
    pub p_value: f64,
    /// Bonferroni-adjusted over the candidates of the node.
    pub adjusted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeModel {
    pub theta: Vec<f64>,
    pub loglik: f64,
    /// Row-major covariance of `theta`; kept for leaves only.
    pub vcov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Leaf { reason: LeafReason },
    Inner { split: Split, left: Box<TreeNode>, right: Box<TreeNode> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Preorder number.
    pub id: usize,
    /// Largest id in this subtree.
    pub last_id: usize,
    pub depth: usize,
    pub n: usize,
    pub weight: f64,
    pub model: NodeModel,
    /// Best test of the node, if any candidate was testable.
    pub test: Option<NodeTest>,
    pub kind: NodeKind,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }

    pub fn contains(&self, id: usize) -> bool {
        self.id <= id && id <= self.last_id
    }

    /// The node's model as a fitted model of `spec`.
    pub fn fitted(&self, spec: &ModelSpec) -> FittedModel {
        let p = self.model.theta.len();
        FittedModel {
            spec: spec.clone(),
            theta: self.model.theta.clone(),
            loglik: self.model.loglik,
            vcov: self.model.vcov.clone(),
            unreliable: vec![false; p],
            report: crate::fit::ConvergenceReport {
                iterations: 0,
                gradient: 0.0,
                loglik_start: self.model.loglik,
                active: vec![],
                criterion: "tree node".into(),
            },
            interval_method: "wald".into(),
            data_fingerprint: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformationTree {
    pub version: u32,
    pub spec: ModelSpec,
    pub control: TreeControl,
    pub variables: Vec<String>,
    pub root: TreeNode,
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A covariate restricted to the rows of a node.
enum Covariate {
    Numeric(Vec<f64>),
    /// Codes into `levels`.
    Categorical { codes: Vec<u32>, levels: Vec<String> },
}

struct Grower<'a> {
    data: &'a Dataset,
    design: Design,
    response: Vec<f64>,
    weights: Vec<f64>,
    variables: &'a [String],
    ctrl: &'a TreeControl,
    dim: usize,
}

/// Outcome of testing one candidate variable in a node.
#[derive(Debug, Clone)]
struct Candidate {
    var: usize,
    statistic: f64,
    p_value: f64,
}

impl Grower<'_> {
    fn covariate(&self, var: usize, rows: &[usize]) -> Result<Covariate, TreeError> {
        Ok(match self.data.column(&self.variables[var])? {
            Column::Numeric(x) => Covariate::Numeric(rows.iter().map(|&i| x[i]).collect()),
            Column::Categorical(c) => Covariate::Categorical {
                codes: rows.iter().map(|&i| c.codes()[i]).collect(),
                levels: c.levels().to_vec(),
            },
        })
    }

    fn fit(&self, rows: &[usize]) -> Result<FittedModel, FitError> {
        let design = self.design.subset(rows);
        let y: Vec<f64> = rows.iter().map(|&i| self.response[i]).collect();
        mle_design(&design, &y, &self.ctrl.fit)
    }

    fn grow(
        &self,
        rows: Vec<usize>,
        depth: usize,
        seed: u64,
        next_id: &mut usize,
        parent: Option<&NodeModel>,
    ) -> Result<TreeNode, FitError> {
        let id = *next_id;
        *next_id += 1;
        let weight: f64 = rows.iter().map(|&i| self.weights[i]).sum();
        let leaf = |model: NodeModel, reason, test| TreeNode {
            id,
            last_id: id,
            depth,
            n: rows.len(),
            weight,
            model,
            test,
            kind: NodeKind::Leaf { reason },
        };
        if rows.len() < self.dim {
            if let Some(p) = parent {
                return Ok(leaf(p.clone(), LeafReason::TooFewObservations, None));
            }
        }
        let fm = self.fit(&rows)?;
        let model = NodeModel {
            theta: fm.theta.clone(),
            loglik: fm.loglik,
            vcov: fm.vcov.clone(),
        };
        if self.ctrl.max_depth.is_some_and(|m| depth >= m) {
            return Ok(leaf(model, LeafReason::MaxDepth, None));
        }
        if weight < self.ctrl.min_split || weight < 2.0 * self.ctrl.min_bucket {
            return Ok(leaf(model, LeafReason::MinSplit, None));
        }

        let node_design = self.design.subset(&rows);
        let scores = match node_design.score_contributions(&fm.theta) {
            Ok(s) => s,
            Err(_) => return Ok(leaf(model, LeafReason::NoAdmissibleSplit, None)),
        };
        let p = fm.theta.len();
        let candidates = self.candidate_vars(seed);
        let covs: Vec<Covariate> = match candidates.iter().map(|&v| self.covariate(v, &rows)).collect() {
            Ok(c) => c,
            Err(_) => return Ok(leaf(model, LeafReason::NoAdmissibleSplit, None)),
        };
        let k = candidates.len();
        let limit = if self.ctrl.alpha >= 1.0 {
            usize::MAX
        } else {
            // Exceedance count beyond which the adjusted p-value cannot fall
            // below alpha.
            match self.ctrl.pvalue {
                PValueMethod::MonteCarlo { resamples } => {
                    (self.ctrl.alpha * (resamples as f64 + 1.0) / k as f64).ceil().max(1.0) as usize
                }
                PValueMethod::Asymptotic => usize::MAX,
            }
        };
        let tests: Vec<Option<Candidate>> = candidates
            .par_iter()
            .zip(covs.par_iter())
            .map(|(&var, cov)| {
                let var_seed = splitmix(seed ^ splitmix(var as u64 + 1));
                independence_test(cov, &scores, p, self.ctrl.pvalue, var_seed, limit).map(|(statistic, p_value)| {
                    Candidate {
                        var,
                        statistic,
                        p_value,
                    }
                })
            })
            .collect();
        let mut tested: Vec<Candidate> = tests.into_iter().flatten().collect();
        tested.sort_by(|a, b| {
            a.p_value
                .total_cmp(&b.p_value)
                .then(b.statistic.total_cmp(&a.statistic))
                .then(a.var.cmp(&b.var))
        });
        let adjust = |p: f64| (p * k as f64).min(1.0);
        let best_test = tested.first().map(|c| NodeTest {
            variable: self.variables[c.var].clone(),
            statistic: c.statistic,
            p_value: c.p_value,
            adjusted: adjust(c.p_value),
        });
        let gate = |c: &Candidate| self.ctrl.alpha >= 1.0 || adjust(c.p_value) < self.ctrl.alpha;
        if !tested.first().is_some_and(gate) {
            return Ok(leaf(model, LeafReason::NotSignificant, best_test));
        }

        for cand in tested.iter().take_while(|c| gate(c)) {
            let pos = candidates.iter().position(|&v| v == cand.var).unwrap();
            let Some((split, goes_left)) = self.best_split(cand.var, &covs[pos], &rows, &scores, p) else {
                continue;
            };
            let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
            for (j, &i) in rows.iter().enumerate() {
                if goes_left[j] {
                    left_rows.push(i);
                } else {
                    right_rows.push(i);
                }
            }
            let test = Some(NodeTest {
                variable: self.variables[cand.var].clone(),
                statistic: cand.statistic,
                p_value: cand.p_value,
                adjusted: adjust(cand.p_value),
            });
            let saved = *next_id;
            let children = self
                .grow(left_rows, depth + 1, splitmix(seed ^ 1), next_id, Some(&model))
                .and_then(|l| {
                    self.grow(right_rows, depth + 1, splitmix(seed ^ 2), next_id, Some(&model))
                        .map(|r| (l, r))
                });
            return Ok(match children {
                Ok((l, r)) => TreeNode {
                    id,
                    last_id: r.last_id,
                    depth,
                    n: rows.len(),
                    weight,
                    model: NodeModel { vcov: Vec::new(), ..model },
                    test,
                    kind: NodeKind::Inner {
                        split,
                        left: Box::new(l),
                        right: Box::new(r),
                    },
                },
                Err(_) => {
                    *next_id = saved;
                    leaf(model, LeafReason::ChildFitFailed, test)
                }
            });
        }
        Ok(leaf(model, LeafReason::NoAdmissibleSplit, best_test))
    }

    fn candidate_vars(&self, seed: u64) -> Vec<usize> {
        let v = self.variables.len();
        match self.ctrl.mtry {
            Some(m) if m < v => {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x6d74_7279));
                let mut picked = rand::seq::index::sample(&mut rng, v, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..v).collect(),
        }
    }

    /// Best admissible binary split of `rows` on `cov`, with the routing of
    /// each row.
    fn best_split(&self, var: usize, cov: &Covariate, rows: &[usize], scores: &[f64], p: usize) -> Option<(Split, Vec<bool>)> {
        let n = rows.len();
        let w: Vec<f64> = rows.iter().map(|&i| self.weights[i]).collect();
        let total_w: f64 = w.iter().sum();
        let stats = ScoreMoments::new(scores, n, p);
        let name = self.variables[var].clone();
        match cov {
            Covariate::Numeric(x) => {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
                let (q10, q90) = (
                    weighted_quantile(x, &w, &order, 0.1),
                    weighted_quantile(x, &w, &order, 0.9),
                );
                let mut sum = vec![0.0; p];
                let mut n_left = 0usize;
                let mut w_left = 0.0;
                let mut best: Option<(f64, f64)> = None;
                let mut k = 0;
                while k < n {
                    let c = x[order[k]];
                    while k < n && x[order[k]] == c {
                        let j = order[k];
                        for (s, u) in sum.iter_mut().zip(&scores[j * p..(j + 1) * p]) {
                            *s += u;
                        }
                        n_left += 1;
                        w_left += w[j];
                        k += 1;
                    }
                    if k == n || c < q10 || c > q90 {
                        continue;
                    }
                    if w_left < self.ctrl.min_bucket || total_w - w_left < self.ctrl.min_bucket {
                        continue;
                    }
                    let q = stats.two_sample(&sum, n_left);
                    if best.is_none_or(|(bq, _)| q > bq) {
                        best = Some((q, c));
                    }
                }
                let (_, cut) = best?;
                Some((
                    Split::Numeric {
                        variable: name,
                        cutpoint: cut,
                    },
                    x.iter().map(|&v| v <= cut).collect(),
                ))
            }
            Covariate::Categorical { codes, levels } => {
                let l = levels.len();
                let mut sums = vec![vec![0.0; p]; l];
                let mut counts = vec![0usize; l];
                let mut wsum = vec![0.0; l];
                for (j, &c) in codes.iter().enumerate() {
                    let c = c as usize;
                    for (s, u) in sums[c].iter_mut().zip(&scores[j * p..(j + 1) * p]) {
                        *s += u;
                    }
                    counts[c] += 1;
                    wsum[c] += w[j];
                }
                let present: Vec<usize> = (0..l).filter(|&c| counts[c] > 0).collect();
                if present.len() < 2 {
                    return None;
                }
                let eval = |mask: &[bool]| -> Option<f64> {
                    let mut sum = vec![0.0; p];
                    let mut nl = 0;
                    let mut wl = 0.0;
                    for (idx, &c) in present.iter().enumerate() {
                        if mask[idx] {
                            for (s, v) in sum.iter_mut().zip(&sums[c]) {
                                *s += v;
                            }
                            nl += counts[c];
                            wl += wsum[c];
                        }
                    }
                    if wl < self.ctrl.min_bucket || total_w - wl < self.ctrl.min_bucket {
                        return None;
                    }
                    Some(stats.two_sample(&sum, nl))
                };
                let mut best: Option<(f64, Vec<bool>)> = None;
                let mut consider = |mask: Vec<bool>| {
                    if let Some(q) = eval(&mask) {
                        if best.as_ref().is_none_or(|(bq, _)| q > *bq) {
                            best = Some((q, mask));
                        }
                    }
                };
                let m = present.len();
                if m <= 10 {
                    for bits in 0..(1u32 << (m - 1)) - 1 {
                        let mut mask = vec![true; m];
                        for (j, slot) in mask.iter_mut().enumerate().skip(1) {
                            *slot = bits >> (j - 1) & 1 == 1;
                        }
                        consider(mask);
                    }
                } else {
                    // Order levels by their mean score projected on the
                    // leading direction, then search ordered splits.
                    let dir = stats.leading_direction();
                    let mut ranked: Vec<(f64, usize)> = present
                        .iter()
                        .enumerate()
                        .map(|(idx, &c)| {
                            let mean: f64 = sums[c].iter().zip(&dir).map(|(s, d)| s * d).sum::<f64>() / counts[c] as f64;
                            (mean, idx)
                        })
                        .collect();
                    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    for cut in 1..m {
                        let mut mask = vec![false; m];
                        for &(_, idx) in &ranked[..cut] {
                            mask[idx] = true;
                        }
                        consider(mask);
                    }
                }
                let (_, mask) = best?;
                let left_codes: Vec<usize> = present.iter().zip(&mask).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
                let left: Vec<String> = left_codes.iter().map(|&c| levels[c].clone()).collect();
                Some((
                    Split::Categorical {
                        variable: name,
                        left,
                        levels: levels.clone(),
                    },
                    codes.iter().map(|&c| left_codes.contains(&(c as usize))).collect(),
                ))
            }
        }
    }
}

/// Smallest value whose cumulative weight reaches `prob` of the total.
fn weighted_quantile(x: &[f64], w: &[f64], order: &[usize], prob: f64) -> f64 {
    let total: f64 = w.iter().sum();
    let mut cum = 0.0;
    for &j in order {
        cum += w[j];
        if cum >= prob * total {
            return x[j];
        }
    }
    x[*order.last().unwrap()]
}

/// Mean and covariance of the score rows, with the pseudo-inverse used by
/// the two-sample statistic.
struct ScoreMoments {
    n: usize,
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl ScoreMoments {
    fn new(scores: &[f64], n: usize, p: usize) -> Self {
        let mut mean = vec![0.0; p];
        for i in 0..n {
            for (m, u) in mean.iter_mut().zip(&scores[i * p..(i + 1) * p]) {
                *m += u;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = &scores[i * p..(i + 1) * p];
            for a in 0..p {
                let da = row[a] - mean[a];
                for b in a..p {
                    cov[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                cov[(a, b)] /= n as f64;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        let eig = cov.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().fold(0.0f64, |m: f64, v: &f64| m.max(v.abs()));
        let mut pinv = DMatrix::zeros(p, p);
        for k in 0..p {
            let l = eig.eigenvalues[k];
            if l > max * 1e-10 && l > 0.0 {
                let v = eig.eigenvectors.column(k);
                pinv += (v * v.transpose()) / l;
            }
        }
        Self { n, mean, cov, pinv }
    }

    /// Standardized quadratic form of the left-group score sum.
    fn two_sample(&self, sum: &[f64], n_left: usize) -> f64 {
        let n = self.n as f64;
        let nl = n_left as f64;
        let p = sum.len();
        let d: Vec<f64> = (0..p).map(|k| sum[k] - nl * self.mean[k]).collect();
        let mut q = 0.0;
        for a in 0..p {
            for b in 0..p {
                q += d[a] * self.pinv[(a, b)] * d[b];
            }
        }
        q * (n - 1.0) / (nl * (n - nl))
    }

    fn leading_direction(&self) -> Vec<f64> {
        let eig = self.cov.clone().symmetric_eigen();
        let k = (0..eig.eigenvalues.len())
            .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
            .unwrap_or(0);
        eig.eigenvectors.column(k).iter().copied().collect()
    }
}

/// Max-|z| statistic of the covariate-score association and its p-value.
/// Monte-Carlo runs stop once `limit` resamples reach the observed value.
fn independence_test(
    cov: &Covariate,
    scores: &[f64],
    p: usize,
    method: PValueMethod,
    seed: u64,
    limit: usize,
) -> Option<(f64, f64)> {
    let n = match cov {
        Covariate::Numeric(x) => x.len(),
        Covariate::Categorical { codes, .. } => codes.len(),
    };
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mut mean = vec![0.0; p];
    for i in 0..n {
        for (m, u) in mean.iter_mut().zip(&scores[i * p..(i + 1) * p]) {
            *m += u / nf;
        }
    }
    let mut var_u = vec![0.0; p];
    for i in 0..n {
        for k in 0..p {
            var_u[k] += (scores[i * p + k] - mean[k]).powi(2) / nf;
        }
    }
    // Columns of g(x): the value itself, or one indicator per level.
    let (n_cols, col_of): (usize, Vec<usize>) = match cov {
        Covariate::Numeric(_) => (1, vec![0; n]),
        Covariate::Categorical { codes, levels } => (levels.len(), codes.iter().map(|&c| c as usize).collect()),
    };
    let value = |i: usize| -> f64 {
        match cov {
            Covariate::Numeric(x) => x[i],
            Covariate::Categorical { .. } => 1.0,
        }
    };
    let mut g_sum = vec![0.0; n_cols];
    let mut g_sq = vec![0.0; n_cols];
    for i in 0..n {
        g_sum[col_of[i]] += value(i);
        g_sq[col_of[i]] += value(i) * value(i);
    }
    // Permutation mean and standard deviation of every component of T.
    let mut centre = vec![0.0; n_cols * p];
    let mut scale = vec![0.0; n_cols * p];
    let mut valid = 0usize;
    for l in 0..n_cols {
        let gv = nf / (nf - 1.0) * g_sq[l] - g_sum[l] * g_sum[l] / (nf - 1.0);
        for k in 0..p {
            centre[l * p + k] = g_sum[l] * mean[k];
            let v = var_u[k] * gv;
            let tiny = 1e-12 * (var_u[k] * g_sq[l]).abs().max(f64::MIN_POSITIVE);
            if v > tiny {
                scale[l * p + k] = 1.0 / v.sqrt();
                valid += 1;
            }
        }
    }
    if valid == 0 {
        return None;
    }
    let max_z = |t: &[f64]| -> f64 {
        let mut m: f64 = 0.0;
        for j in 0..n_cols * p {
            if scale[j] > 0.0 {
                m = m.max(((t[j] - centre[j]) * scale[j]).abs());
            }
        }
        m
    };
    let mut t = vec![0.0; n_cols * p];
    let accumulate = |t: &mut [f64], source: &dyn Fn(usize) -> usize| {
        t.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let s = source(i);
            let l = col_of[s];
            let g = value(s);
            let row = &scores[i * p..(i + 1) * p];
            let out = &mut t[l * p..(l + 1) * p];
            for k in 0..p {
                out[k] += g * row[k];
            }
        }
    };
    accumulate(&mut t, &|i| i);
    let observed = max_z(&t);
    match method {
        PValueMethod::Asymptotic => {
            let tail = statrs::function::erf::erfc(observed / std::f64::consts::SQRT_2);
            Some((observed, (valid as f64 * tail).min(1.0)))
        }
        PValueMethod::MonteCarlo { resamples } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..n).collect();
            let threshold = observed * (1.0 - 1e-12);
            let mut exceed = 0usize;
            let mut done = 0usize;
            for _ in 0..resamples {
                perm.shuffle(&mut rng);
                accumulate(&mut t, &|i| perm[i]);
                done += 1;
                if max_z(&t) >= threshold {
                    exceed += 1;
                    if exceed >= limit {
                        break;
                    }
                }
            }
            Some((observed, (1.0 + exceed as f64) / (1.0 + done as f64)))
        }
    }
}

/// Row order independent of the input order: by response, weight, then
/// covariate values.
fn canonical_order(d: &Dataset, variables: &[String]) -> Result<Vec<usize>, TreeError> {
    let cols = variables.iter().map(|v| d.column(v)).collect::<Result<Vec<_>, _>>()?;
    let y = d.response();
    let w = d.weights();
    let mut order: Vec<usize> = (0..d.n()).filter(|&i| w[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let mut o = y[a].total_cmp(&y[b]).then(w[a].total_cmp(&w[b]));
        for c in &cols {
            if o.is_ne() {
                break;
            }
            o = match c {
                Column::Numeric(x) => x[a].total_cmp(&x[b]),
                Column::Categorical(x) => x.label(a).cmp(x.label(b)),
            };
        }
        o
    });
    Ok(order)
}

/// Grows a transformation tree for the unconditional model `base` using
/// `variables` as split candidates.
pub fn fit_tree(d: &Dataset, base: &ModelSpec, variables: &[String], ctrl: &TreeControl) -> Result<TransformationTree, TreeError> {
    ctrl.validate()?;
    if !base.is_unconditional() || base.trafo.covariate().is_some() {
        return Err(TreeError::NotUnconditional);
    }
    for v in variables {
        if v == d.response_name() || Some(v.as_str()) == d.weight_name() {
            return Err(TreeError::ReservedVariable(v.clone()));
        }
        d.column(v).map_err(|_| TreeError::UnknownVariable(v.clone()))?;
    }
    let order = canonical_order(d, variables)?;
    let data = d.subset(&order);
    let design = Design::new(base, &data)?;
    let grower = Grower {
        data: &data,
        response: data.response().to_vec(),
        weights: data.weights().to_vec(),
        design,
        variables,
        ctrl,
        dim: base.n_params(),
    };
    let mut next_id = 0;
    let root = grower
        .grow((0..data.n()).collect(), 0, splitmix(ctrl.seed), &mut next_id, None)
        .map_err(TreeError::Root)?;
    Ok(TransformationTree {
        version: TREE_FORMAT_VERSION,
        spec: base.clone(),
        control: ctrl.clone(),
        variables: variables.to_vec(),
        root,
    })
}

impl TransformationTree {
    /// All nodes in preorder; the index of a node equals its id.
    pub fn nodes(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        let mut stack = vec![&self.root];
        while let Some(node) = stack.pop() {
            out.push(node);
            if let NodeKind::Inner { left, right, .. } = &node.kind {
                stack.push(right);
                stack.push(left);
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<&TreeNode> {
        self.nodes().into_iter().filter(|n| n.is_leaf()).collect()
    }

    pub fn depth(&self) -> usize {
        self.nodes().iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Variables used by at least one split.
    pub fn split_variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for node in self.nodes() {
            if let NodeKind::Inner { split, .. } = &node.kind {
                if !out.iter().any(|v| v == split.variable()) {
                    out.push(split.variable().to_string());
                }
            }
        }
        out
    }

    /// Leaf whose region contains `x`.
    pub fn predict(&self, x: &Profile) -> Result<&TreeNode, TreeError> {
        let mut node = &self.root;
        while let NodeKind::Inner { split, left, right } = &node.kind {
            node = if split.goes_left(x)? { left } else { right };
        }
        Ok(node)
    }

    /// Leaf id of every row of `d`.
    pub fn leaf_ids(&self, d: &Dataset) -> Result<Vec<usize>, TreeError> {
        let mut out = vec![0; d.n()];
        let mut stack: Vec<(&TreeNode, Vec<usize>)> = vec![(&self.root, (0..d.n()).collect())];
        while let Some((node, rows)) = stack.pop() {
            match &node.kind {
                NodeKind::Leaf { .. } => rows.iter().for_each(|&i| out[i] = node.id),
                NodeKind::Inner { split, left, right } => {
                    let mut l = Vec::new();
                    let mut r = Vec::new();
                    match split {
                        Split::Numeric { variable, cutpoint } => {
                            let x = d.numeric(variable)?;
                            for i in rows {
                                if x[i] <= *cutpoint { l.push(i) } else { r.push(i) }
                            }
                        }
                        Split::Categorical { variable, .. } => {
                            let c = d.categorical(variable)?;
                            // Decide once per level.
                            let mut by_level: Vec<Option<bool>> = vec![None; c.levels().len()];
                            for i in rows {
                                let code = c.codes()[i] as usize;
                                let left_side = match by_level[code] {
                                    Some(b) => b,
                                    None => {
                                        let b = split.goes_left_level(&c.levels()[code])?;
                                        by_level[code] = Some(b);
                                        b
                                    }
                                };
                                if left_side { l.push(i) } else { r.push(i) }
                            }
                        }
                    }
                    stack.push((left, l));
                    stack.push((right, r));
                }
            }
        }
        Ok(out)
    }

    /// Per-row `wᵢ log f(yᵢ)` under the leaf models.
    pub fn row_logliks(&self, d: &Dataset) -> Result<Vec<f64>, TreeError> {
        let ids = self.leaf_ids(d)?;
        let nodes = self.nodes();
        let design = Design::new(&self.spec, d)?;
        let link = self.spec.link;
        let mut out = vec![0.0; d.n()];
        for i in 0..d.n() {
            let w = d.weights()[i];
            if w == 0.0 {
                continue;
            }
            let (h, hp) = design.h_at(&nodes[ids[i]].model.theta, i);
            if !(hp > 0.0) {
                return Err(ModelError::NonMonotone { row: i, slope: hp }.into());
            }
            out[i] = w * (link.log_pdf(h) + hp.ln());
        }
        Ok(out)
    }

    pub fn loglik(&self, d: &Dataset) -> Result<f64, TreeError> {
        Ok(self.row_logliks(d)?.iter().sum())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub fn tree_loglik(t: &TransformationTree, d: &Dataset) -> Result<f64, TreeError> {
    t.loglik(d)
}

pub fn predict_tree<'a>(t: &'a TransformationTree, x: &Profile) -> Result<&'a TreeNode, TreeError> {
    t.predict(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BernsteinBasis, Support};
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

    fn two_group(seed: u64, n: usize, shift: f64, sd_ratio: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let g: Vec<&str> = (0..n).map(|_| if rng.random_bool(0.5) { "b" } else { "a" }).collect();
        let y: Vec<f64> = g
            .iter()
            .map(|g| {
                let z: f64 = normal.sample(&mut rng);
                if *g == "b" { shift + sd_ratio * z } else { z }
            })
            .collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Dataset::new("y", y)
            .with_categorical("g", &g)
            .unwrap()
            .with_numeric("noise", noise)
            .unwrap()
    }

    fn vars() -> Vec<String> {
        vec!["g".into(), "noise".into()]
    }

    #[test]
    fn mean_shift_splits_on_the_group() {
        let d = two_group(1, 1000, 2.0, 1.0);
        let ctrl = TreeControl {
            pvalue: PValueMethod::MonteCarlo { resamples: 999 },
            ..Default::default()
        };
        let t = fit_tree(&d, &base(d.response()), &vars(), &ctrl).unwrap();
        match &t.root.kind {
            NodeKind::Inner { split, .. } => assert_eq!(split.variable(), "g"),
            _ => panic!("root did not split"),
        }
        let root_only = ModelSpec { ..t.spec.clone() };
        let unc = crate::fit::mle(&root_only, &d, &FitOptions::default()).unwrap();
        assert!(t.loglik(&d).unwrap() >= unc.loglik);
        // Routing of a group-b profile ends in a leaf whose rows are group b.
        let leaf = t.predict(&Profile::new().level("g", "b").num("noise", 0.5)).unwrap();
        assert!(leaf.is_leaf());
        assert!(matches!(
            t.predict(&Profile::new().level("g", "z").num("noise", 0.5)),
            Err(TreeError::UnseenLevel { .. })
        ));
        let json = t.to_json();
        assert_eq!(TransformationTree::from_json(&json).unwrap(), t);
    }

    #[test]
    fn noise_gives_root_only_tree() {
        let d = two_group(2, 600, 0.0, 1.0);
        let ctrl = TreeControl {
            pvalue: PValueMethod::MonteCarlo { resamples: 999 },
            ..Default::default()
        };
        let t = fit_tree(&d, &base(d.response()), &vars(), &ctrl).unwrap();
        assert!(t.root.is_leaf());
        let unc = crate::fit::mle(&t.spec, &d, &FitOptions::default()).unwrap();
        assert!((t.loglik(&d).unwrap() - unc.loglik).abs() < 1e-9);
        assert_eq!(t.leaves().len(), 1);
    }

    #[test]
    fn row_order_does_not_matter() {
        let d = two_group(3, 800, 1.0, 1.5);
        let b = base(d.response());
        let ctrl = TreeControl {
            pvalue: PValueMethod::MonteCarlo { resamples: 499 },
            ..Default::default()
        };
        let t1 = fit_tree(&d, &b, &vars(), &ctrl).unwrap();
        let mut rev: Vec<usize> = (0..d.n()).collect();
        rev.reverse();
        let t2 = fit_tree(&d.subset(&rev), &b, &vars(), &ctrl).unwrap();
        assert_eq!(t1, t2);
        assert!(!t1.root.is_leaf());
    }

    #[test]
    fn numeric_split_is_closed_left_and_within_percentiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1200;
        let age: Vec<f64> = (0..n).map(|_| rng.random_range(20..70) as f64).collect();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<f64> = age.iter().map(|a| if *a <= 34.0 { 0.0 } else { 2.0 } + normal.sample(&mut rng)).collect();
        let d = Dataset::new("y", y).with_numeric("age", age).unwrap();
        let ctrl = TreeControl {
            pvalue: PValueMethod::Asymptotic,
            max_depth: Some(1),
            ..Default::default()
        };
        let t = fit_tree(&d, &base(d.response()), &["age".into()], &ctrl).unwrap();
        let NodeKind::Inner { split, .. } = &t.root.kind else { panic!("no split") };
        let Split::Numeric { cutpoint, .. } = split else { panic!() };
        assert_eq!(*cutpoint, 34.0);
        let left = t.predict(&Profile::new().num("age", 34.0)).unwrap();
        let right = t.predict(&Profile::new().num("age", 34.5)).unwrap();
        assert_eq!(left.id, 1);
        assert_eq!(right.id, 2);
        assert_eq!(t.root.last_id, 2);
    }

    #[test]
    fn categorical_partition_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let levels = ["never", "former", "light", "medium", "heavy"];
        let n = 2000;
        let s: Vec<&str> = (0..n).map(|i| levels[i % 5]).collect();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<f64> = s
            .iter()
            .map(|l| if matches!(*l, "light" | "medium") { 1.5 } else { 0.0 } + normal.sample(&mut rng))
            .collect();
        let d = Dataset::new("y", y).with_categorical("smoking", &s).unwrap();
        let ctrl = TreeControl {
            pvalue: PValueMethod::Asymptotic,
            max_depth: Some(1),
            ..Default::default()
        };
        let t = fit_tree(&d, &base(d.response()), &["smoking".into()], &ctrl).unwrap();
        let NodeKind::Inner { split, left, right } = &t.root.kind else { panic!("no split") };
        let heavy = split.goes_left(&Profile::new().level("smoking", "heavy")).unwrap();
        let light = split.goes_left(&Profile::new().level("smoking", "light")).unwrap();
        let medium = split.goes_left(&Profile::new().level("smoking", "medium")).unwrap();
        assert_eq!(light, medium);
        assert_ne!(light, heavy);
        assert!(left.is_leaf() && right.is_leaf());
    }

    #[test]
    fn weighted_quantile_picks_first_reaching_value() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 1.0, 1.0, 7.0];
        let order = [0, 1, 2, 3];
        assert_eq!(weighted_quantile(&x, &w, &order, 0.1), 1.0);
        assert_eq!(weighted_quantile(&x, &w, &order, 0.3), 3.0);
        assert_eq!(weighted_quantile(&x, &w, &order, 0.9), 4.0);
    }

    #[test]
    fn control_validation() {
        let bad = TreeControl {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TreeControl {
            min_bucket: 300.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let d = two_group(1, 100, 0.0, 1.0);
        assert!(matches!(
            fit_tree(&d, &base(d.response()), &["nope".into()], &TreeControl::default()),
            Err(TreeError::UnknownVariable(_))
        ));
        assert!(matches!(
            fit_tree(&d, &base(d.response()), &["y".into()], &TreeControl::default()),
            Err(TreeError::ReservedVariable(_))
        ));
    }

    #[test]
    fn splitmix_is_a_bijection_sample() {
        let a: Vec<u64> = (0..1000).map(splitmix).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 1000);
    }
}
