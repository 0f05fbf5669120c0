//! Constrained maximum-likelihood estimation and Wald inference.
//!
//! Each `ϑ` block is optimized in a working parameterization where the
//! monotonicity rows become coordinates `δ = log(1 + exp(γ))`, so the
//! problem is smooth and unconstrained in `(γ, β)`. The optimizer is a
//! damped Newton method with Armijo backtracking on the analytic Hessian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use thiserror::Error;

use crate::basis::MonotoneParameterization;
use crate::data::Dataset;
use crate::model::{softplus, Design, Evaluation, Link, ModelError, ModelSpec};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("stratum {0} has no observations with positive weight")]
    EmptyCell(usize),
    #[error("stratum {cell} has {distinct} distinct response values; at least 2 are required")]
    DegenerateCell { cell: usize, distinct: usize },
    #[error("{available} observations with positive weight for {params} parameters")]
    TooFewObservations { available: usize, params: usize },
    #[error("no convergence after {iterations} iterations (max |score|/W = {gradient:.3e})")]
    NonConvergence {
        iterations: usize,
        gradient: f64,
        trajectory: Vec<f64>,
    },
    #[error("start values are infeasible: {0}")]
    Start(String),
    #[error("invalid option: {0}")]
    Options(String),
    #[error("models were fitted to different data")]
    Incomparable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StartStrategy {
    /// Least-squares fit of `h` to the link-transformed weighted ECDF per
    /// stratum; shift parameters start at zero.
    EcdfLeastSquares,
    /// Explicit feasible parameter vector.
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Bound on `max |score| / Σw` in the working parameterization.
    pub gradient_tolerance: f64,
    /// Increments at or below this value count as active constraints.
    pub monotone_slack: f64,
    pub start: StartStrategy,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            monotone_slack: 1e-8,
            start: StartStrategy::EcdfLeastSquares,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<(), FitError> {
        if !(self.gradient_tolerance > 0.0 && self.monotone_slack > 0.0) {
            return Err(FitError::Options("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveConstraint {
    pub cell: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    /// `max |score| / Σw` in the working parameterization at the estimate.
    pub gradient: f64,
    pub loglik_start: f64,
    pub active: Vec<ActiveConstraint>,
    /// "gradient" or "stalled" (no further ascent at machine precision).
    pub criterion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub theta: Vec<f64>,
    pub loglik: f64,
    /// Row-major `p × p` inverse observed information.
    pub vcov: Vec<f64>,
    /// Components touched by an active monotonicity constraint.
    pub unreliable: Vec<bool>,
    pub report: ConvergenceReport,
    /// Confidence interval method.
    pub interval_method: String,
    /// Hash of the responses and weights the model was fitted to.
    pub data_fingerprint: u64,
}

impl FittedModel {
    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        let p = self.n_params();
        (0..p).map(|j| self.vcov[j * p + j].max(0.0).sqrt()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.spec.param_names()
    }
}

/// Maps working parameters `(γ, β)` to model parameters `θ`.
struct Working {
    param: MonotoneParameterization,
    cells: usize,
    d: usize,
    q: usize,
}

impl Working {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            param: spec.trafo.parameterization(),
            cells: spec.n_cells(),
            d: spec.trafo_dim(),
            q: spec.n_shift(),
        }
    }

    fn p(&self) -> usize {
        self.cells * self.d + self.q
    }

    fn v(&self, gamma: &[f64]) -> Vec<f64> {
        let pos = self.param.positive();
        gamma
            .iter()
            .enumerate()
            .map(|(j, g)| if j < self.cells * self.d && pos[j % self.d] { softplus(*g) } else { *g })
            .collect()
    }

    fn theta(&self, gamma: &[f64]) -> Vec<f64> {
        let v = self.v(gamma);
        let mut theta = Vec::with_capacity(self.p());
        for c in 0..self.cells {
            theta.extend(self.param.apply(&v[c * self.d..(c + 1) * self.d]));
        }
        theta.extend_from_slice(&v[self.cells * self.d..]);
        theta
    }

    fn gamma(&self, theta: &[f64], floor_fraction: f64) -> Vec<f64> {
        let pos = self.param.positive();
        let mut gamma = Vec::with_capacity(self.p());
        for c in 0..self.cells {
            let v = self.param.invert(&theta[c * self.d..(c + 1) * self.d]);
            let typical = {
                let vals: Vec<f64> = v.iter().zip(pos).filter(|(x, p)| **p && **x > 0.0).map(|(x, _)| *x).collect();
                if vals.is_empty() {
                    1.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            let floor = (floor_fraction * typical).max(1e-10);
            for (j, x) in v.iter().enumerate() {
                gamma.push(if pos[j] { inverse_softplus(x.max(floor)) } else { *x });
            }
        }
        gamma.extend_from_slice(&theta[self.cells * self.d..]);
        gamma
    }

    /// Dense Jacobian `∂θ/∂γ`.
    fn jacobian(&self, gamma: &[f64]) -> DMatrix<f64> {
        let p = self.p();
        let d = self.d;
        let pos = self.param.positive();
        let map = self.param.map();
        let mut j = DMatrix::zeros(p, p);
        for c in 0..self.cells {
            for col in 0..d {
                let g = gamma[c * d + col];
                let dv = if pos[col] { sigmoid(g) } else { 1.0 };
                for row in 0..d {
                    j[(c * d + row, c * d + col)] = map[row * d + col] * dv;
                }
            }
        }
        for k in 0..self.q {
            let i = self.cells * d + k;
            j[(i, i)] = 1.0;
        }
        j
    }

    /// Gradient and Hessian in `γ` from those in `θ`.
    fn transform(&self, gamma: &[f64], eval: &Evaluation) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.p();
        let jac = self.jacobian(gamma);
        let g_theta = DVector::from_column_slice(&eval.score);
        let g = jac.transpose() * &g_theta;
        let h_theta = DMatrix::from_row_slice(p, p, &eval.hessian);
        let mut h = jac.transpose() * h_theta * &jac;
        let pos = self.param.positive();
        for c in 0..self.cells {
            let gv = self.param.apply_transpose(&eval.score[c * self.d..(c + 1) * self.d]);
            for col in 0..self.d {
                if pos[col] {
                    let gm = gamma[c * self.d + col];
                    let s = sigmoid(gm);
                    h[(c * self.d + col, c * self.d + col)] += gv[col] * s * (1.0 - s);
                }
            }
        }
        (g, h)
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::model::expit(x)
}

fn inverse_softplus(v: f64) -> f64 {
    // log(exp(v) - 1)
    if v > 30.0 {
        v
    } else {
        v + (-(-v).exp_m1()).ln()
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_data(design: &Design, response: &[f64]) -> Result<(), FitError> {
    let spec = design.spec();
    let positive = design.weights().iter().filter(|w| **w > 0.0).count();
    if positive < spec.n_params() {
        return Err(FitError::TooFewObservations {
            available: positive,
            params: spec.n_params(),
        });
    }
    let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); spec.n_cells()];
    for i in 0..design.n() {
        if design.weights()[i] > 0.0 {
            per_cell[design.cells()[i]].push(response[i]);
        }
    }
    for (cell, vals) in per_cell.iter_mut().enumerate() {
        if vals.is_empty() {
            return Err(FitError::EmptyCell(cell));
        }
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        if vals.len() < 2 {
            return Err(FitError::DegenerateCell { cell, distinct: vals.len() });
        }
    }
    Ok(())
}

/// Start candidates: per stratum, least squares of `F⁻¹(ECDF)` on the full
/// basis, and on a straight line in `y` expressed in the basis.
fn ecdf_start(design: &Design, response: &[f64]) -> [Vec<f64>; 2] {
    let spec = design.spec();
    let d = spec.trafo_dim();
    let mut theta = vec![0.0; spec.n_params()];
    let mut line = vec![0.0; spec.n_params()];
    for cell in 0..spec.n_cells() {
        let mut rows: Vec<usize> = (0..design.n())
            .filter(|&i| design.cells()[i] == cell && design.weights()[i] > 0.0)
            .collect();
        rows.sort_by(|&a, &b| response[a].total_cmp(&response[b]).then(a.cmp(&b)));
        let total: f64 = rows.iter().map(|&i| design.weights()[i]).sum();
        let mut ata = DMatrix::<f64>::zeros(d, d);
        let mut atz = DVector::<f64>::zeros(d);
        let mut cum = 0.0;
        let mut k = 0;
        let mut m2 = [[0.0; 2]; 2];
        let mut v2 = [0.0; 2];
        while k < rows.len() {
            let mut end = k;
            let mut tie = 0.0;
            while end < rows.len() && response[rows[end]] == response[rows[k]] {
                tie += design.weights()[rows[end]];
                end += 1;
            }
            // Midpoint of the jump keeps the plotting position inside (0, 1).
            let prob = (cum + 0.5 * tie) / total;
            let z = spec.link.quantile(prob);
            for &i in &rows[k..end] {
                let w = design.weights()[i];
                let y = response[i];
                m2[0][0] += w;
                m2[0][1] += w * y;
                m2[1][1] += w * y * y;
                v2[0] += w * z;
                v2[1] += w * y * z;
                let a = design.basis_row(i);
                for r in 0..d {
                    atz[r] += w * a[r] * z;
                    for c in 0..d {
                        ata[(r, c)] += w * a[r] * a[c];
                    }
                }
            }
            cum += tie;
            k = end;
        }
        let ridge = 1e-8 * (0..d).map(|r| ata[(r, r)]).fold(0.0, f64::max).max(1e-300);
        for r in 0..d {
            ata[(r, r)] += ridge;
        }
        let sol = ata.clone().cholesky().map(|c| c.solve(&atz)).unwrap_or_else(|| {
            ata.lu().solve(&atz).unwrap_or_else(|| DVector::zeros(d))
        });
        theta[spec.theta_range(cell)].copy_from_slice(sol.as_slice());
        let det = m2[0][0] * m2[1][1] - m2[0][1] * m2[0][1];
        let mut slope = (m2[0][0] * v2[1] - m2[0][1] * v2[0]) / det;
        if !(slope > 0.0 && slope.is_finite()) {
            let sd = (m2[1][1] / m2[0][0] - (m2[0][1] / m2[0][0]).powi(2)).max(1e-300).sqrt();
            slope = 1.0 / sd;
        }
        let intercept = (v2[0] - slope * m2[0][1]) / m2[0][0];
        line[spec.theta_range(cell)].copy_from_slice(&spec.trafo.linear_coefficients(intercept, slope));
    }
    [theta, line]
}

/// Maximum-likelihood estimate for `spec` on `data`.
pub fn mle(spec: &ModelSpec, data: &Dataset, opts: &FitOptions) -> Result<FittedModel, FitError> {
    let design = Design::new(spec, data)?;
    mle_design(&design, data.response(), opts)
}

/// As [`mle`] on a prepared design; `response` supplies the raw `yᵢ` used
/// only for start values.
pub fn mle_design(design: &Design, response: &[f64], opts: &FitOptions) -> Result<FittedModel, FitError> {
    opts.validate()?;
    check_data(design, response)?;
    let spec = design.spec();
    let work = Working::new(spec);
    let eval_at = |g: &[f64], order: u8| -> Result<Evaluation, ModelError> { design.evaluate(&work.theta(g), order) };
    let mut gamma = match &opts.start {
        StartStrategy::Given(t) => {
            spec.check_params(t)?;
            work.gamma(t, 1e-3)
        }
        StartStrategy::EcdfLeastSquares => {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for cand in ecdf_start(design, response) {
                let g = work.gamma(&cand, 1e-3);
                if let Ok(e) = eval_at(&g, 0) {
                    if e.loglik.is_finite() && best.as_ref().is_none_or(|(l, _)| e.loglik > *l) {
                        best = Some((e.loglik, g));
                    }
                }
            }
            best.map(|(_, g)| g).ok_or_else(|| FitError::Start("no feasible start value".into()))?
        }
    };
    let total_w = design.total_weight();
    let mut current = eval_at(&gamma, 2).map_err(|e| FitError::Start(e.to_string()))?;
    let loglik_start = current.loglik;
    let mut trajectory = vec![current.loglik];
    let mut iterations = 0;
    let criterion;

    loop {
        let (g, h) = work.transform(&gamma, &current);
        let grad = max_abs(&g) / total_w;
        if grad <= opts.gradient_tolerance {
            criterion = "gradient";
            break;
        }
        if iterations >= opts.max_iterations {
            return Err(FitError::NonConvergence {
                iterations,
                gradient: grad,
                trajectory,
            });
        }
        iterations += 1;

        let direction = newton_direction(&h, &g);
        let slope = g.dot(&direction);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = gamma.iter().zip(direction.iter()).map(|(a, b)| a + step * b).collect();
            if let Ok(e) = eval_at(&trial, 0) {
                if e.loglik.is_finite() && e.loglik >= current.loglik + 1e-4 * step * slope {
                    accepted = Some(trial);
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some(trial) => {
                gamma = trial;
                current = eval_at(&gamma, 2)?;
                trajectory.push(current.loglik);
            }
            None => {
                if grad <= 1e-5 {
                    criterion = "stalled";
                    break;
                }
                return Err(FitError::NonConvergence {
                    iterations,
                    gradient: grad,
                    trajectory,
                });
            }
        }
    }

    let theta = work.theta(&gamma);
    let (g, h) = work.transform(&gamma, &current);
    let jac = work.jacobian(&gamma);
    let info = -h;
    let inv = symmetric_pinv(&info);
    let vcov_m = &jac * inv * jac.transpose();
    let p = theta.len();
    let mut vcov = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            vcov[i * p + j] = 0.5 * (vcov_m[(i, j)] + vcov_m[(j, i)]);
        }
    }

    let v = work.v(&gamma);
    let rows = spec.trafo.monotonicity_rows();
    let mut active = Vec::new();
    let mut unreliable = vec![false; p];
    for c in 0..spec.n_cells() {
        for (k, row) in work.param.row_of_coord().iter().enumerate() {
            if let Some(r) = row {
                if v[c * work.d + k] <= opts.monotone_slack {
                    active.push(ActiveConstraint { cell: c, row: *r });
                    for (j, coef) in rows.rows()[*r].iter().enumerate() {
                        if *coef != 0.0 {
                            unreliable[c * work.d + j] = true;
                        }
                    }
                }
            }
        }
    }

    Ok(FittedModel {
        spec: spec.clone(),
        theta,
        loglik: current.loglik,
        vcov,
        unreliable,
        report: ConvergenceReport {
            iterations,
            gradient: max_abs(&g) / total_w,
            loglik_start,
            active,
            criterion: criterion.to_string(),
        },
        interval_method: "wald".to_string(),
        data_fingerprint: fingerprint(response, design.weights()),
    })
}

/// Ascent direction solving `(-H + λI) Δ = g` with the smallest `λ ≥ 0`
/// (on a geometric ladder) that makes the system positive definite.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let a = -h;
    let scale = (0..a.nrows()).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1e-12);
    let mut lambda = 0.0;
    for _ in 0..40 {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += lambda;
        }
        if let Some(ch) = m.cholesky() {
            let dir = ch.solve(g);
            if dir.iter().all(|v| v.is_finite()) {
                return dir;
            }
        }
        lambda = if lambda == 0.0 { 1e-10 * scale } else { lambda * 10.0 };
    }
    g / scale
}

/// Pseudo-inverse of a symmetric matrix, dropping eigenvalues that are not
/// clearly positive.
fn symmetric_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return ch.inverse();
    }
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = max * 1e-12 * n as f64;
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l > tol {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

/// FNV-1a over the bit patterns of responses and weights.
pub(crate) fn fingerprint(response: &[f64], weights: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in response.iter().chain(weights) {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrComparison {
    pub loglik_a: f64,
    pub loglik_b: f64,
    /// `loglik_b - loglik_a`
    pub difference: f64,
    pub params_a: usize,
    pub params_b: usize,
}

/// Log-likelihood comparison of two fits to the same data.
pub fn lr_compare(a: &FittedModel, b: &FittedModel) -> Result<LrComparison, FitError> {
    if a.data_fingerprint != b.data_fingerprint || a.spec.response != b.spec.response {
        return Err(FitError::Incomparable);
    }
    Ok(LrComparison {
        loglik_a: a.loglik,
        loglik_b: b.loglik,
        difference: b.loglik - a.loglik,
        params_a: a.n_params(),
        params_b: b.n_params(),
    })
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub name: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub unreliable: bool,
}

/// Wald intervals `θ̂ⱼ ± z_{(1+level)/2} √vcovⱼⱼ`.
pub fn confint(fm: &FittedModel, level: f64) -> Result<Vec<Interval>, FitError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(FitError::Options(format!("confidence level {level} outside (0, 1)")));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    let se = fm.std_errors();
    Ok(fm
        .param_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| Interval {
            name,
            estimate: fm.theta[j],
            lower: fm.theta[j] - z * se[j],
            upper: fm.theta[j] + z * se[j],
            unreliable: fm.unreliable[j],
        })
        .collect())
}

/// `exp` of the shift intervals; only meaningful under the logit link,
/// where they are odds ratios.
pub fn odds_ratios(fm: &FittedModel, level: f64) -> Result<Option<Vec<Interval>>, FitError> {
    if fm.spec.link != Link::Logit {
        return Ok(None);
    }
    let all = confint(fm, level)?;
    Ok(Some(
        all[fm.spec.beta_range()]
            .iter()
            .map(|i| Interval {
                name: i.name.clone(),
                estimate: i.estimate.exp(),
                lower: i.lower.exp(),
                upper: i.upper.exp(),
                unreliable: i.unreliable,
            })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BernsteinBasis, LinearBasis, Support};
    use crate::data::{shift_columns, ShiftTerm};
    use crate::model::Strata;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn weighted_normal(seed: u64, n: usize, mu: f64, sigma: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(mu, sigma).unwrap();
        let y: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        Dataset::new("y", y).with_weights(w).unwrap()
    }

    fn closed_form(d: &Dataset) -> (f64, f64) {
        let sw = d.total_weight();
        let mu = d.response().iter().zip(d.weights()).map(|(y, w)| y * w).sum::<f64>() / sw;
        let var = d.response().iter().zip(d.weights()).map(|(y, w)| w * (y - mu).powi(2)).sum::<f64>() / sw;
        (mu, var.sqrt())
    }

    #[test]
    fn linear_probit_recovers_weighted_normal_mle() {
        let d = weighted_normal(1, 5000, 24.0, 4.0);
        let spec = ModelSpec::unconditional("y", Link::Probit, LinearBasis::new().into());
        let fm = mle(&spec, &d, &FitOptions::default()).unwrap();
        let (mu, sigma) = closed_form(&d);
        let sigma_hat = 1.0 / fm.theta[1];
        let mu_hat = -fm.theta[0] * sigma_hat;
        assert_abs_diff_eq!(mu_hat, mu, epsilon = 1e-6);
        assert_abs_diff_eq!(sigma_hat, sigma, epsilon = 1e-6);
        assert!(fm.loglik >= fm.report.loglik_start);
        let g = crate::model::score(&spec, &fm.theta, &d).unwrap();
        assert!(g.iter().all(|v| v.abs() <= 1e-6 * d.total_weight()));
    }

    #[test]
    fn stratified_fit_equals_separate_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 600;
        let g: Vec<&str> = (0..n).map(|i| if i % 3 == 0 { "a" } else { "b" }).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let base: f64 = rng.random_range(0.0..1.0);
                if i % 3 == 0 { base.powi(2) * 10.0 } else { 3.0 + base * 4.0 }
            })
            .collect();
        let d = Dataset::new("y", y.clone()).with_categorical("g", &g).unwrap();
        let basis = BernsteinBasis::new(4, Support::around(&y).unwrap()).unwrap();
        let spec = ModelSpec {
            response: "y".into(),
            link: Link::Logit,
            trafo: basis.clone().into(),
            strata: Some(Strata::from_data(&d, &["g".into()]).unwrap()),
            shifts: vec![],
            formula: None,
        };
        let joint = mle(&spec, &d, &FitOptions::default()).unwrap();
        let cells = spec.cells_of(&d).unwrap();
        for c in 0..2 {
            let rows: Vec<usize> = (0..n).filter(|&i| cells[i] == c).collect();
            let unc = ModelSpec::unconditional("y", Link::Logit, basis.clone().into());
            let sep = mle(&unc, &d.subset(&rows), &FitOptions::default()).unwrap();
            for (a, b) in joint.theta[spec.theta_range(c)].iter().zip(&sep.theta) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_cell_is_rejected() {
        let d = Dataset::new("y", vec![1.0, 1.0, 1.0, 2.0, 3.0, 4.0])
            .with_categorical("g", &["a", "a", "a", "b", "b", "b"])
            .unwrap();
        let spec = ModelSpec {
            response: "y".into(),
            link: Link::Probit,
            trafo: LinearBasis::new().into(),
            strata: Some(Strata::from_data(&d, &["g".into()]).unwrap()),
            shifts: vec![],
            formula: None,
        };
        assert!(matches!(
            mle(&spec, &d, &FitOptions::default()),
            Err(FitError::DegenerateCell { cell: 0, .. })
        ));
    }

    #[test]
    fn empty_cell_is_rejected() {
        let d = Dataset::new("y", vec![1.0, 2.0, 3.0, 2.0, 3.0, 4.0])
            .with_categorical("g", &["a", "a", "a", "b", "b", "b"])
            .unwrap();
        let mut spec = ModelSpec {
            response: "y".into(),
            link: Link::Probit,
            trafo: LinearBasis::new().into(),
            strata: Some(Strata::from_data(&d, &["g".into()]).unwrap()),
            shifts: vec![],
            formula: None,
        };
        spec.strata.as_mut().unwrap().cells.push(vec!["c".into()]);
        assert!(matches!(mle(&spec, &d, &FitOptions::default()), Err(FitError::EmptyCell(2))));
    }

    #[test]
    fn logit_shift_within_three_standard_errors() {
        // P(Y ≤ y | g) = expit(2y - 0.5·[g = b]); a Bernstein basis holds
        // the linear h exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 20000;
        let mut y = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let grp = if i % 2 == 0 { "a" } else { "b" };
            let shift = if grp == "b" { 0.5 } else { 0.0 };
            let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
            let z = (u / (1.0 - u)).ln() + shift;
            y.push(z / 2.0);
            g.push(grp);
        }
        let d = Dataset::new("y", y.clone()).with_categorical("g", &g).unwrap();
        let spec = ModelSpec {
            response: "y".into(),
            link: Link::Logit,
            trafo: BernsteinBasis::new(6, Support::around(&y).unwrap()).unwrap().into(),
            strata: None,
            shifts: shift_columns(&d, &[ShiftTerm::Main("g".into())]).unwrap(),
            formula: None,
        };
        let fm = mle(&spec, &d, &FitOptions::default()).unwrap();
        let j = spec.beta_range().start;
        let se = fm.std_errors()[j];
        assert!((fm.theta[j] - 0.5).abs() <= 3.0 * se, "beta {} se {se}", fm.theta[j]);
    }

    #[test]
    fn intervals() {
        let spec = ModelSpec::unconditional("y", Link::Probit, LinearBasis::new().into());
        let mut fm = FittedModel {
            spec,
            theta: vec![0.0, 1.0],
            loglik: 0.0,
            vcov: vec![1.0, 0.0, 0.0, 0.0],
            unreliable: vec![false; 2],
            report: ConvergenceReport {
                iterations: 0,
                gradient: 0.0,
                loglik_start: 0.0,
                active: vec![],
                criterion: "gradient".into(),
            },
            interval_method: "wald".into(),
            data_fingerprint: 0,
        };
        let ci = confint(&fm, 0.95).unwrap();
        assert_abs_diff_eq!(ci[0].lower, -1.959_963_984_540_054, epsilon = 1e-9);
        assert_abs_diff_eq!(ci[0].upper, 1.959_963_984_540_054, epsilon = 1e-9);
        assert_eq!((ci[1].lower, ci[1].upper), (1.0, 1.0));
        assert!(confint(&fm, 1.0).is_err());
        assert!(confint(&fm, 0.0).is_err());
        fm.vcov[0] = 4.0;
        let narrow = confint(&fm, 0.9).unwrap();
        assert!(narrow[0].upper - narrow[0].lower < 2.0 * 2.0 * 1.96);
    }

    #[test]
    fn higher_order_never_lowers_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..800).map(|_| rng.random_range(0.0f64..1.0).powf(3.0) * 20.0 + 10.0).collect();
        let d = Dataset::new("y", y.clone());
        let s = Support::around(&y).unwrap();
        let mut last = f64::NEG_INFINITY;
        for m in [1, 5, 10] {
            let spec = ModelSpec::unconditional("y", Link::Logit, BernsteinBasis::new(m, s).unwrap().into());
            let fm = mle(&spec, &d, &FitOptions::default()).unwrap();
            assert!(fm.loglik >= last - 1e-6);
            last = fm.loglik;
        }
    }

    #[test]
    fn fits_are_reproducible() {
        let d = weighted_normal(3, 500, 0.0, 1.0);
        let s = Support::around(d.response()).unwrap();
        let spec = ModelSpec::unconditional("y", Link::Logit, BernsteinBasis::new(5, s).unwrap().into());
        let a = mle(&spec, &d, &FitOptions::default()).unwrap();
        let b = mle(&spec, &d, &FitOptions::default()).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.vcov, b.vcov);
    }

    #[test]
    fn lr_compare_nested_and_mismatched() {
        let d = weighted_normal(5, 400, 1.0, 2.0);
        let s = Support::around(d.response()).unwrap();
        let fit = |m| {
            let spec = ModelSpec::unconditional("y", Link::Logit, BernsteinBasis::new(m, s).unwrap().into());
            mle(&spec, &d, &FitOptions::default()).unwrap()
        };
        let (a, b) = (fit(1), fit(5));
        assert_eq!(lr_compare(&a, &a).unwrap().difference, 0.0);
        let cmp = lr_compare(&a, &b).unwrap();
        assert!(cmp.difference >= 0.0);
        assert_eq!((cmp.params_a, cmp.params_b), (2, 6));
        let other = weighted_normal(6, 400, 1.0, 2.0);
        let spec = ModelSpec::unconditional("y", Link::Logit, BernsteinBasis::new(1, s).unwrap().into());
        let c = mle(&spec, &other, &FitOptions::default()).unwrap();
        assert!(matches!(lr_compare(&a, &c), Err(FitError::Incomparable)));
    }
}
