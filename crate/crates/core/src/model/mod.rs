//! Model specification and the weighted log-likelihood.
//!
//! A model is `P(Y ≤ y | x) = F(h(y | x))` with
//! `h(y | x) = a(y, x)ᵀϑ_{cell(x)} - s(x)ᵀβ`. Parameters are laid out as the
//! `ϑ` blocks of all strata cells in cell order followed by `β` in shift
//! column order.

mod design;
mod link;

pub use design::{Design, Evaluation};
pub use link::{expit, softplus, Link};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, TransformationBasis};
use crate::data::{stratify, DataError, Dataset, Profile, ShiftColumn};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("parameter vector has length {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-monotone parameters: h'(y) = {slope} at observation {row}")]
    NonMonotone { row: usize, slope: f64 },
    #[error("stratum {0:?} does not exist in the model")]
    UnknownCell(Vec<String>),
    #[error("non-finite response at observation {0}")]
    NonFinite(usize),
}

/// Cells of a categorical cross-classification; one `ϑ` block each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strata {
    pub vars: Vec<String>,
    pub cells: Vec<Vec<String>>,
}

impl Strata {
    pub fn from_data(d: &Dataset, vars: &[String]) -> Result<Self, DataError> {
        let idx = stratify(d, vars)?;
        Ok(Self {
            vars: vars.to_vec(),
            cells: idx.cells().to_vec(),
        })
    }

    pub fn cell_of(&self, labels: &[String]) -> Result<usize, ModelError> {
        self.cells
            .iter()
            .position(|c| c.as_slice() == labels)
            .ok_or_else(|| ModelError::UnknownCell(labels.to_vec()))
    }

    pub fn label(&self, cell: usize) -> String {
        self.vars
            .iter()
            .zip(&self.cells[cell])
            .map(|(v, l)| format!("{v}={l}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Declarative description of a transformation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub link: Link,
    pub trafo: TransformationBasis,
    pub strata: Option<Strata>,
    pub shifts: Vec<ShiftColumn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
}

/// Everything about a covariate profile the model needs besides `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowContext {
    pub cell: usize,
    pub covariate: Option<f64>,
    pub shift: Vec<f64>,
}

impl ModelSpec {
    /// Unconditional model: no strata, no shift terms.
    pub fn unconditional(response: impl Into<String>, link: Link, trafo: TransformationBasis) -> Self {
        Self {
            response: response.into(),
            link,
            trafo,
            strata: None,
            shifts: Vec::new(),
            formula: None,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.strata.as_ref().map_or(1, |s| s.cells.len())
    }

    pub fn trafo_dim(&self) -> usize {
        self.trafo.dim()
    }

    pub fn n_shift(&self) -> usize {
        self.shifts.len()
    }

    pub fn n_params(&self) -> usize {
        self.n_cells() * self.trafo_dim() + self.n_shift()
    }

    pub fn is_unconditional(&self) -> bool {
        self.strata.is_none() && self.shifts.is_empty() && self.trafo.covariate().is_none()
    }

    pub fn theta_range(&self, cell: usize) -> std::ops::Range<usize> {
        let d = self.trafo_dim();
        cell * d..(cell + 1) * d
    }

    pub fn beta_range(&self) -> std::ops::Range<usize> {
        let start = self.n_cells() * self.trafo_dim();
        start..start + self.n_shift()
    }

    /// Covariates the model reads from a profile.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |v: &str| {
            if !out.iter().any(|o| o == v) {
                out.push(v.to_string());
            }
        };
        if let Some(s) = &self.strata {
            s.vars.iter().for_each(|v| push(v));
        }
        if let Some(c) = self.trafo.covariate() {
            push(c);
        }
        for col in &self.shifts {
            col.levels.iter().for_each(|(v, _)| push(v));
            col.numeric.iter().for_each(|v| push(v));
        }
        out
    }

    /// Human-readable names in parameter layout order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_params());
        for cell in 0..self.n_cells() {
            let prefix = match &self.strata {
                Some(s) => format!("theta[{}]", s.label(cell)),
                None => "theta".to_string(),
            };
            for k in 0..self.trafo_dim() {
                names.push(format!("{prefix}[{}]", k + 1));
            }
        }
        for col in &self.shifts {
            names.push(format!("beta[{}]", col.name()));
        }
        names
    }

    pub fn check_params(&self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.n_params() {
            return Err(ModelError::Dimension {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// True when every `ϑ` block satisfies its monotonicity rows within `slack`.
    pub fn is_feasible(&self, theta: &[f64], slack: f64) -> bool {
        let rows = self.trafo.monotonicity_rows();
        theta.len() == self.n_params()
            && (0..self.n_cells()).all(|c| rows.is_satisfied(&theta[self.theta_range(c)], slack))
    }

    pub fn row_context(&self, p: &Profile) -> Result<RowContext, ModelError> {
        let cell = match &self.strata {
            Some(s) => {
                let labels = s.vars.iter().map(|v| p.categorical(v)).collect::<Result<Vec<_>, _>>()?;
                s.cell_of(&labels)?
            }
            None => 0,
        };
        let covariate = match self.trafo.covariate() {
            Some(v) => Some(p.numeric(v)?),
            None => None,
        };
        let shift = self.shifts.iter().map(|c| c.eval_profile(p)).collect::<Result<Vec<_>, _>>()?;
        Ok(RowContext { cell, covariate, shift })
    }

    /// Stratum cell of every row of `d`.
    pub fn cells_of(&self, d: &Dataset) -> Result<Vec<usize>, ModelError> {
        match &self.strata {
            None => Ok(vec![0; d.n()]),
            Some(s) => {
                let cols = s.vars.iter().map(|v| d.categorical(v)).collect::<Result<Vec<_>, _>>()?;
                // Map code tuples to cells once per column combination.
                let mut lookup: std::collections::HashMap<Vec<u32>, usize> = std::collections::HashMap::new();
                for (ci, labels) in s.cells.iter().enumerate() {
                    let codes: Option<Vec<u32>> = cols.iter().zip(labels).map(|(c, l)| c.code_of(l)).collect();
                    if let Some(codes) = codes {
                        lookup.insert(codes, ci);
                    }
                }
                (0..d.n())
                    .map(|i| {
                        let key: Vec<u32> = cols.iter().map(|c| c.codes()[i]).collect();
                        lookup.get(&key).copied().ok_or_else(|| {
                            ModelError::UnknownCell(cols.iter().map(|c| c.label(i).to_string()).collect())
                        })
                    })
                    .collect()
            }
        }
    }

    fn dot_theta(&self, theta: &[f64], cell: usize, a: &[f64]) -> f64 {
        theta[self.theta_range(cell)].iter().zip(a).map(|(t, v)| t * v).sum()
    }

    fn shift_value(&self, theta: &[f64], shift: &[f64]) -> f64 {
        theta[self.beta_range()].iter().zip(shift).map(|(b, s)| b * s).sum()
    }

    /// `h(y | x)` for a prepared context.
    pub fn h_ctx(&self, theta: &[f64], y: f64, ctx: &RowContext) -> Result<f64, ModelError> {
        let a = self.trafo.eval(y, ctx.covariate)?;
        Ok(self.dot_theta(theta, ctx.cell, &a) - self.shift_value(theta, &ctx.shift))
    }

    /// `∂h(y | x)/∂y` for a prepared context.
    pub fn h_deriv_ctx(&self, theta: &[f64], y: f64, ctx: &RowContext) -> Result<f64, ModelError> {
        let a = self.trafo.deriv(y, ctx.covariate)?;
        Ok(self.dot_theta(theta, ctx.cell, &a))
    }

    /// Transformation part `a(y, x)ᵀϑ_cell` without the shift.
    pub fn trafo_ctx(&self, theta: &[f64], y: f64, ctx: &RowContext) -> Result<f64, ModelError> {
        let a = self.trafo.eval(y, ctx.covariate)?;
        Ok(self.dot_theta(theta, ctx.cell, &a))
    }
}

/// `h(y | x) = a(y, x)ᵀϑ_{cell(x)} - s(x)ᵀβ`
pub fn h_eval(spec: &ModelSpec, theta: &[f64], y: f64, x: &Profile) -> Result<f64, ModelError> {
    spec.check_params(theta)?;
    let ctx = spec.row_context(x)?;
    spec.h_ctx(theta, y, &ctx)
}

/// `Σ wᵢ [log F'(h(yᵢ|xᵢ)) + log h'(yᵢ|xᵢ)]`
pub fn loglik(spec: &ModelSpec, theta: &[f64], d: &Dataset) -> Result<f64, ModelError> {
    Design::new(spec, d)?.loglik(theta)
}

pub fn score(spec: &ModelSpec, theta: &[f64], d: &Dataset) -> Result<Vec<f64>, ModelError> {
    Ok(Design::new(spec, d)?.evaluate(theta, 1)?.score)
}

/// Row-major `p × p` matrix of second derivatives.
pub fn hessian(spec: &ModelSpec, theta: &[f64], d: &Dataset) -> Result<Vec<f64>, ModelError> {
    Ok(Design::new(spec, d)?.evaluate(theta, 2)?.hessian)
}

/// Row-major `n × p` matrix of weighted per-observation score contributions.
pub fn score_contributions(spec: &ModelSpec, theta: &[f64], d: &Dataset) -> Result<Vec<f64>, ModelError> {
    Design::new(spec, d)?.score_contributions(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BernsteinBasis, LinearBasis, Support};
    use crate::data::{shift_columns, ShiftTerm};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn linear_probit() -> ModelSpec {
        ModelSpec::unconditional("y", Link::Probit, LinearBasis::new().into())
    }

    #[test]
    fn standardization_at_mean_is_zero() {
        let (mu, sigma) = (25.0, 4.0);
        let h = h_eval(&linear_probit(), &[-mu / sigma, 1.0 / sigma], 25.0, &Profile::new()).unwrap();
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn equal_bernstein_coefficients_give_constant_h() {
        let b = BernsteinBasis::new(5, Support::new(10.0, 40.0).unwrap()).unwrap();
        let spec = ModelSpec::unconditional("y", Link::Logit, b.into());
        for y in [10.0, 17.3, 25.0, 39.9] {
            assert_abs_diff_eq!(h_eval(&spec, &[0.7; 6], y, &Profile::new()).unwrap(), 0.7, epsilon = 1e-13);
        }
    }

    #[test]
    fn standard_normal_mode() {
        let d = Dataset::new("y", vec![0.0]);
        let ll = loglik(&linear_probit(), &[0.0, 1.0], &d).unwrap();
        assert_abs_diff_eq!(ll, -0.918_938_533_204_672_7, epsilon = 1e-12);
    }

    #[test]
    fn doubling_weights_doubles_loglik() {
        let d = Dataset::new("y", vec![0.3, -1.2, 2.0]).with_weights(vec![1.0, 0.5, 2.0]).unwrap();
        let d2 = d.clone().with_weights(vec![2.0, 1.0, 4.0]).unwrap();
        let theta = [0.1, 0.8];
        let a = loglik(&linear_probit(), &theta, &d).unwrap();
        let b = loglik(&linear_probit(), &theta, &d2).unwrap();
        assert_abs_diff_eq!(b, 2.0 * a, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_normal_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(2.0, 3.0).unwrap();
        let y: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
        let w: Vec<f64> = (0..100).map(|_| rng.random_range(0.2..2.0)).collect();
        let sw: f64 = w.iter().sum();
        let mu = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
        let var = y.iter().zip(&w).map(|(a, b)| b * (a - mu).powi(2)).sum::<f64>() / sw;
        let sigma = var.sqrt();
        let oracle: f64 = y
            .iter()
            .zip(&w)
            .map(|(yi, wi)| wi * (-0.5 * ((yi - mu) / sigma).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln()))
            .sum();
        let d = Dataset::new("y", y).with_weights(w).unwrap();
        let ll = loglik(&linear_probit(), &[-mu / sigma, 1.0 / sigma], &d).unwrap();
        assert_abs_diff_eq!(ll, oracle, epsilon = 1e-8);
    }

    #[test]
    fn non_monotone_parameters_are_reported() {
        let d = Dataset::new("y", vec![0.0, 1.0]);
        assert!(matches!(
            loglik(&linear_probit(), &[0.0, -1.0], &d),
            Err(ModelError::NonMonotone { .. })
        ));
        assert!(matches!(
            loglik(&linear_probit(), &[0.0], &d),
            Err(ModelError::Dimension { expected: 2, got: 1 })
        ));
    }

    fn shift_fixture() -> (ModelSpec, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let g: Vec<&str> = (0..n).map(|i| ["a", "b", "c"][i % 3]).collect();
        let s: Vec<&str> = (0..n).map(|i| ["f", "m"][(i / 3) % 2]).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = Dataset::new("y", y.clone())
            .with_categorical("g", &g)
            .unwrap()
            .with_categorical("s", &s)
            .unwrap()
            .with_numeric("x", x)
            .unwrap()
            .with_weights((0..n).map(|i| 0.5 + (i % 4) as f64 * 0.25).collect())
            .unwrap();
        let b = BernsteinBasis::new(4, Support::around(&y).unwrap()).unwrap();
        let shifts = shift_columns(&d, &[ShiftTerm::Main("g".into()), ShiftTerm::Main("x".into())]).unwrap();
        let spec = ModelSpec {
            response: "y".into(),
            link: Link::Logit,
            trafo: b.into(),
            strata: Some(Strata::from_data(&d, &["s".into()]).unwrap()),
            shifts,
            formula: None,
        };
        (spec, d)
    }

    fn feasible_theta(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut theta = Vec::new();
        for _ in 0..spec.n_cells() {
            let mut level = rng.random_range(-3.0..-1.0);
            for _ in 0..spec.trafo_dim() {
                theta.push(level);
                level += rng.random_range(0.3..1.5);
            }
        }
        for _ in 0..spec.n_shift() {
            theta.push(rng.random_range(-0.5..0.5));
        }
        theta
    }

    #[test]
    fn score_matches_central_differences() {
        let (spec, d) = shift_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let theta = feasible_theta(&spec, &mut rng);
            let g = score(&spec, &theta, &d).unwrap();
            let eps = 1e-6;
            for j in 0..theta.len() {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += eps;
                dn[j] -= eps;
                let fd = (loglik(&spec, &up, &d).unwrap() - loglik(&spec, &dn, &d).unwrap()) / (2.0 * eps);
                assert!((g[j] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "j={j} {} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn hessian_is_symmetric_and_matches_score_differences() {
        let (spec, d) = shift_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = feasible_theta(&spec, &mut rng);
        let h = hessian(&spec, &theta, &d).unwrap();
        let p = theta.len();
        for i in 0..p {
            for j in 0..p {
                assert!((h[i * p + j] - h[j * p + i]).abs() <= 1e-10);
            }
        }
        let eps = 1e-6;
        for j in 0..p {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += eps;
            dn[j] -= eps;
            let gu = score(&spec, &up, &d).unwrap();
            let gd = score(&spec, &dn, &d).unwrap();
            for i in 0..p {
                let fd = (gu[i] - gd[i]) / (2.0 * eps);
                assert!((h[i * p + j] - fd).abs() <= 1e-4 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn contributions_sum_to_score() {
        let (spec, d) = shift_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = feasible_theta(&spec, &mut rng);
        let contrib = score_contributions(&spec, &theta, &d).unwrap();
        let g = score(&spec, &theta, &d).unwrap();
        let p = theta.len();
        for j in 0..p {
            let s: f64 = (0..d.n()).map(|i| contrib[i * p + j]).sum();
            assert_abs_diff_eq!(s, g[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn stratum_separability() {
        let (mut spec, d) = shift_fixture();
        spec.shifts.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = feasible_theta(&spec, &mut rng);
        let total = loglik(&spec, &theta, &d).unwrap();
        let cells = spec.cells_of(&d).unwrap();
        let mut parts = 0.0;
        for c in 0..spec.n_cells() {
            let rows: Vec<usize> = (0..d.n()).filter(|&i| cells[i] == c).collect();
            let sub = d.subset(&rows);
            let unc = ModelSpec::unconditional("y", spec.link, spec.trafo.clone());
            parts += loglik(&unc, &theta[spec.theta_range(c)], &sub).unwrap();
        }
        assert_abs_diff_eq!(total, parts, epsilon = 1e-10);
    }

    #[test]
    fn parameter_names_follow_layout() {
        let (spec, _) = shift_fixture();
        let names = spec.param_names();
        assert_eq!(names.len(), spec.n_params());
        assert_eq!(names[0], "theta[s=f][1]");
        assert_eq!(names[5], "theta[s=m][1]");
        assert_eq!(names[10], "beta[g=b]");
        assert_eq!(names[12], "beta[x]");
    }
}
