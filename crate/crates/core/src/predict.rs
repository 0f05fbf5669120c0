//! Distribution functionals of fitted models: distribution function,
//! density, quantiles, odds, hazards, decile curves and empirical overlays.

use std::collections::HashMap;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stratify, DataError, Dataset, Profile};
use crate::fit::FittedModel;
use crate::model::{Design, ModelError, ModelSpec, RowContext};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("could not bracket the {0} quantile")]
    Bracket(f64),
    #[error("variable {0} is not a numeric model covariate")]
    NotInModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A value that is `+∞` when the distribution function is numerically one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailValue {
    pub value: f64,
    pub overflow: bool,
}

impl TailValue {
    fn new(value: f64) -> Self {
        if value.is_finite() {
            Self { value, overflow: false }
        } else {
            Self {
                value: f64::INFINITY,
                overflow: true,
            }
        }
    }
}

/// The conditional distribution of the response for one covariate profile.
#[derive(Debug, Clone)]
pub struct Conditional<'a> {
    spec: &'a ModelSpec,
    theta: &'a [f64],
    ctx: RowContext,
}

impl<'a> Conditional<'a> {
    pub fn new(spec: &'a ModelSpec, theta: &'a [f64], x: &Profile) -> Result<Self, PredictError> {
        spec.check_params(theta)?;
        Ok(Self {
            spec,
            theta,
            ctx: spec.row_context(x)?,
        })
    }

    pub fn with_context(spec: &'a ModelSpec, theta: &'a [f64], ctx: RowContext) -> Result<Self, PredictError> {
        spec.check_params(theta)?;
        Ok(Self { spec, theta, ctx })
    }

    pub fn h(&self, y: f64) -> Result<f64, PredictError> {
        Ok(self.spec.h_ctx(self.theta, y, &self.ctx)?)
    }

    pub fn h_deriv(&self, y: f64) -> Result<f64, PredictError> {
        Ok(self.spec.h_deriv_ctx(self.theta, y, &self.ctx)?)
    }

    pub fn cdf(&self, y: f64) -> Result<f64, PredictError> {
        Ok(self.spec.link.cdf(self.h(y)?))
    }

    pub fn sf(&self, y: f64) -> Result<f64, PredictError> {
        Ok(self.spec.link.sf(self.h(y)?))
    }

    pub fn density(&self, y: f64) -> Result<f64, PredictError> {
        let z = self.h(y)?;
        Ok(self.spec.link.pdf(z) * self.h_deriv(y)?.max(0.0))
    }

    /// `log(F / (1 - F))`
    pub fn log_odds(&self, y: f64) -> Result<f64, PredictError> {
        let z = self.h(y)?;
        Ok(self.spec.link.log_cdf(z) - self.spec.link.log_sf(z))
    }

    pub fn odds(&self, y: f64) -> Result<TailValue, PredictError> {
        Ok(TailValue::new(self.log_odds(y)?.exp()))
    }

    pub fn hazard(&self, y: f64) -> Result<TailValue, PredictError> {
        let sf = self.sf(y)?;
        Ok(TailValue::new(self.density(y)? / sf))
    }

    pub fn cum_hazard(&self, y: f64) -> Result<TailValue, PredictError> {
        Ok(TailValue::new(-self.spec.link.log_sf(self.h(y)?)))
    }

    /// Solves `h(y) = F⁻¹(p)` by bracketing and bisection.
    pub fn quantile(&self, p: f64) -> Result<f64, PredictError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(PredictError::Probability(p));
        }
        let target = self.spec.link.quantile(p);
        let (mut lo, mut hi) = match self.spec.trafo.response_support() {
            Some(s) => (s.lower(), s.upper()),
            None => (-1.0, 1.0),
        };
        let mut step = (hi - lo).max(1e-8);
        let mut tries = 0;
        while self.h(lo)? > target {
            hi = lo;
            lo -= step;
            step *= 2.0;
            tries += 1;
            if tries > 200 || !lo.is_finite() {
                return Err(PredictError::Bracket(p));
            }
        }
        let mut step = (hi - lo).max(1e-8);
        while self.h(hi)? < target {
            lo = hi;
            hi += step;
            step *= 2.0;
            tries += 1;
            if tries > 400 || !hi.is_finite() {
                return Err(PredictError::Bracket(p));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let hm = self.h(mid)?;
            if hm == target {
                return Ok(mid);
            }
            if hm < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (hl, hh) = (self.h(lo)?, self.h(hi)?);
        Ok(if (target - hl).abs() <= (hh - target).abs() { lo } else { hi })
    }
}

pub fn cdf(fm: &FittedModel, y: f64, x: &Profile) -> Result<f64, PredictError> {
    Conditional::new(&fm.spec, &fm.theta, x)?.cdf(y)
}

pub fn density(fm: &FittedModel, y: f64, x: &Profile) -> Result<f64, PredictError> {
    Conditional::new(&fm.spec, &fm.theta, x)?.density(y)
}

pub fn quantile(fm: &FittedModel, p: f64, x: &Profile) -> Result<f64, PredictError> {
    Conditional::new(&fm.spec, &fm.theta, x)?.quantile(p)
}

pub fn odds(fm: &FittedModel, y: f64, x: &Profile) -> Result<TailValue, PredictError> {
    Conditional::new(&fm.spec, &fm.theta, x)?.odds(y)
}

pub fn hazard(fm: &FittedModel, y: f64, x: &Profile) -> Result<TailValue, PredictError> {
    Conditional::new(&fm.spec, &fm.theta, x)?.hazard(y)
}

pub fn cum_hazard(fm: &FittedModel, y: f64, x: &Profile) -> Result<TailValue, PredictError> {
    Conditional::new(&fm.spec, &fm.theta, x)?.cum_hazard(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    Cdf,
    Density,
    Survivor,
    Odds,
    Hazard,
    CumHazard,
    Quantile,
}

impl Functional {
    pub fn name(self) -> &'static str {
        match self {
            Functional::Cdf => "cdf",
            Functional::Density => "density",
            Functional::Survivor => "survivor",
            Functional::Odds => "odds",
            Functional::Hazard => "hazard",
            Functional::CumHazard => "cum_hazard",
            Functional::Quantile => "quantile",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Functional::Cdf,
            Functional::Density,
            Functional::Survivor,
            Functional::Odds,
            Functional::Hazard,
            Functional::CumHazard,
            Functional::Quantile,
        ]
        .into_iter()
        .find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Grid {
    Explicit(Vec<f64>),
    /// Equally spaced points over the response support.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRequest {
    pub grid: Grid,
    pub profiles: Vec<Profile>,
    pub functionals: Vec<Functional>,
    /// Probabilities for the quantile table.
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionCurves {
    pub y: Vec<f64>,
    pub cdf: Vec<f64>,
    pub density: Vec<f64>,
    /// `(p, y_p)` pairs.
    pub quantiles: Vec<(f64, f64)>,
}

/// One row of a long-format curve table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub profile: String,
    pub functional: String,
    pub grid: f64,
    pub value: f64,
}

impl GridRequest {
    pub fn resolve_grid(&self, spec: &ModelSpec) -> Result<Vec<f64>, PredictError> {
        let grid = match &self.grid {
            Grid::Explicit(g) => g.clone(),
            Grid::Count(n) => {
                let s = spec
                    .trafo
                    .response_support()
                    .ok_or_else(|| PredictError::Grid("the response basis has no bounded support".into()))?;
                if *n < 2 {
                    return Err(PredictError::Grid("need at least 2 grid points".into()));
                }
                (0..*n).map(|k| s.lower() + s.width() * k as f64 / (*n - 1) as f64).collect()
            }
        };
        if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|v| !v.is_finite()) {
            return Err(PredictError::Grid("grid must be finite and strictly increasing".into()));
        }
        Ok(grid)
    }

    /// Curves of every profile.
    pub fn curves(&self, spec: &ModelSpec, theta: &[f64]) -> Result<Vec<DistributionCurves>, PredictError> {
        let grid = self.resolve_grid(spec)?;
        self.profiles
            .iter()
            .map(|x| {
                let c = Conditional::new(spec, theta, x)?;
                Ok(DistributionCurves {
                    y: grid.clone(),
                    cdf: grid.iter().map(|&y| c.cdf(y)).collect::<Result<_, _>>()?,
                    density: grid.iter().map(|&y| c.density(y)).collect::<Result<_, _>>()?,
                    quantiles: self
                        .probabilities
                        .iter()
                        .map(|&p| Ok((p, c.quantile(p)?)))
                        .collect::<Result<_, PredictError>>()?,
                })
            })
            .collect()
    }

    /// Long-format rows for the requested functionals; quantile rows use
    /// the probability as grid value.
    pub fn rows(&self, spec: &ModelSpec, theta: &[f64]) -> Result<Vec<CurveRow>, PredictError> {
        let grid = self.resolve_grid(spec)?;
        let mut out = Vec::new();
        for (id, x) in self.profiles.iter().enumerate() {
            let c = Conditional::new(spec, theta, x)?;
            for f in &self.functionals {
                let points: &[f64] = if *f == Functional::Quantile { &self.probabilities } else { &grid };
                for &g in points {
                    let value = match f {
                        Functional::Cdf => c.cdf(g)?,
                        Functional::Density => c.density(g)?,
                        Functional::Survivor => c.sf(g)?,
                        Functional::Odds => c.odds(g)?.value,
                        Functional::Hazard => c.hazard(g)?.value,
                        Functional::CumHazard => c.cum_hazard(g)?.value,
                        Functional::Quantile => c.quantile(g)?,
                    };
                    out.push(CurveRow {
                        profile: id.to_string(),
                        functional: f.name().to_string(),
                        grid: g,
                        value,
                    });
                }
            }
        }
        Ok(out)
    }
}

pub const DECILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Deciles as functions of the numeric covariate `var` for each profile.
/// Rows carry `functional = "q0.1"` … `"q0.9"` and the covariate value as grid.
pub fn decile_curves(
    spec: &ModelSpec,
    theta: &[f64],
    var: &str,
    values: &[f64],
    profiles: &[Profile],
) -> Result<Vec<CurveRow>, PredictError> {
    if !spec.variables().iter().any(|v| v == var) {
        return Err(PredictError::NotInModel(var.to_string()));
    }
    let mut out = Vec::new();
    for (id, base) in profiles.iter().enumerate() {
        for &v in values {
            let x = base.clone().num(var, v);
            let c = Conditional::new(spec, theta, &x)?;
            for p in DECILES {
                out.push(CurveRow {
                    profile: id.to_string(),
                    functional: format!("q{p}"),
                    grid: v,
                    value: c.quantile(p)?,
                });
            }
        }
    }
    Ok(out)
}

/// Right-continuous weighted empirical distribution function: sorted
/// distinct values and the cumulative normalized weight at each.
pub fn weighted_ecdf(y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..y.len()).filter(|&i| w[i] > 0.0).collect();
    idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let total: f64 = idx.iter().map(|&i| w[i]).sum();
    let mut xs = Vec::new();
    let mut ps: Vec<f64> = Vec::new();
    let mut cum = 0.0;
    for &i in &idx {
        cum += w[i];
        if xs.last() == Some(&y[i]) {
            *ps.last_mut().unwrap() = cum / total;
        } else {
            xs.push(y[i]);
            ps.push(cum / total);
        }
    }
    if let Some(last) = ps.last_mut() {
        *last = 1.0;
    }
    (xs, ps)
}

/// Empirical and model distribution function of one stratum cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayCell {
    pub label: String,
    pub grid: Vec<f64>,
    pub ecdf: Vec<f64>,
    pub model: Vec<f64>,
    /// `max |ecdf - model|` over the grid, including left limits.
    pub sup_distance: f64,
}

/// Largest number of grid points per overlay cell.
pub const OVERLAY_POINTS: usize = 500;

/// Weighted ECDF next to the model CDF averaged over the cell's rows, for
/// each occupied cell of `vars`. Cells with more distinct responses than
/// [`OVERLAY_POINTS`] are evaluated on a subset of the jump points.
pub fn ecdf_overlay(spec: &ModelSpec, theta: &[f64], d: &Dataset, vars: &[String]) -> Result<Vec<OverlayCell>, PredictError> {
    let index = stratify(d, vars)?;
    let design = Design::new(spec, d)?;
    let cells = spec.cells_of(d)?;
    let covariate = match spec.trafo.covariate() {
        Some(v) => Some(d.numeric(v)?),
        None => None,
    };
    let mut out = Vec::new();
    for (c, labels) in index.cells().iter().enumerate() {
        let label = vars.iter().zip(labels).map(|(v, l)| format!("{v}={l}")).collect::<Vec<_>>().join(":");
        let rows: Vec<usize> = (0..d.n()).filter(|&i| index.cell_of_row()[i] == c && d.weights()[i] > 0.0).collect();
        if rows.is_empty() {
            warn!("cell {label} has no weighted observations; skipped");
            continue;
        }
        let y: Vec<f64> = rows.iter().map(|&i| d.response()[i]).collect();
        let w: Vec<f64> = rows.iter().map(|&i| d.weights()[i]).collect();
        let (xs, ps) = weighted_ecdf(&y, &w);
        let keep: Vec<usize> = if xs.len() <= OVERLAY_POINTS {
            (0..xs.len()).collect()
        } else {
            let mut k: Vec<usize> =
                (0..OVERLAY_POINTS).map(|j| j * (xs.len() - 1) / (OVERLAY_POINTS - 1)).collect();
            k.dedup();
            k
        };

        // Distinct row contexts with their total weight.
        let mut contexts: Vec<(RowContext, f64)> = Vec::new();
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for &i in &rows {
            let ctx = RowContext {
                cell: cells[i],
                covariate: covariate.map(|x| x[i]),
                shift: design.shift_row(i).to_vec(),
            };
            let mut key = vec![ctx.cell as u64, ctx.covariate.map_or(0, f64::to_bits)];
            key.extend(ctx.shift.iter().map(|v| v.to_bits()));
            match seen.get(&key) {
                Some(&k) => contexts[k].1 += d.weights()[i],
                None => {
                    seen.insert(key, contexts.len());
                    contexts.push((ctx, d.weights()[i]));
                }
            }
        }
        let total: f64 = contexts.iter().map(|(_, w)| w).sum();
        let conds = contexts
            .into_iter()
            .map(|(ctx, w)| Ok((Conditional::with_context(spec, theta, ctx)?, w / total)))
            .collect::<Result<Vec<_>, PredictError>>()?;
        let model_at = |y: f64| -> Result<f64, PredictError> {
            let mut s = 0.0;
            for (c, w) in &conds {
                s += w * c.cdf(y)?;
            }
            Ok(s)
        };
        let grid: Vec<f64> = keep.iter().map(|&k| xs[k]).collect();
        let ecdf: Vec<f64> = keep.iter().map(|&k| ps[k]).collect();
        let model = grid.iter().map(|&y| model_at(y)).collect::<Result<Vec<_>, _>>()?;
        let mut sup: f64 = 0.0;
        for (j, &k) in keep.iter().enumerate() {
            let left = if k == 0 { 0.0 } else { ps[k - 1] };
            sup = sup.max((ecdf[j] - model[j]).abs()).max((left - model[j]).abs());
        }
        out.push(OverlayCell {
            label,
            grid,
            ecdf,
            model,
            sup_distance: sup,
        });
    }
    Ok(out)
}

/// Overlay cells as long-format rows (`ecdf` and `model`).
pub fn overlay_rows(cells: &[OverlayCell]) -> Vec<CurveRow> {
    let mut out = Vec::new();
    for c in cells {
        for (name, values) in [("ecdf", &c.ecdf), ("model", &c.model)] {
            for (g, v) in c.grid.iter().zip(values.iter()) {
                out.push(CurveRow {
                    profile: c.label.clone(),
                    functional: name.to_string(),
                    grid: *g,
                    value: *v,
                });
            }
        }
    }
    out
}

/// Writes rows as CSV with header `profile,functional,grid,value`.
pub fn write_curves<W: Write>(rows: &[CurveRow], writer: W) -> Result<(), PredictError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["profile", "functional", "grid", "value"]).map_err(csv_io)?;
    for r in rows {
        w.write_record([r.profile.clone(), r.functional.clone(), r.grid.to_string(), r.value.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> PredictError {
    PredictError::Io(std::io::Error::other(e.to_string()))
}
