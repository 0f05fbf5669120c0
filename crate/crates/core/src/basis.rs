//! Transformation bases in the response.
//!
//! Every basis maps a response value `y` (and, for the tensor and
//! response-varying variants, one numeric covariate `x`) to a row vector
//! `a(y, x)` such that the transformation function is `h = a(y, x)ᵀϑ`.
//! Bernstein bases live on a bounded [`Support`]; beyond it the basis is
//! continued linearly with the boundary slope, so `h` stays monotone and
//! unbounded and the implied distribution remains proper.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("invalid support [{lower}, {upper}]: bounds must be finite with lower < upper")]
    InvalidSupport { lower: f64, upper: f64 },
    #[error("Bernstein order must be at least 1")]
    InvalidOrder,
    #[error("cannot derive a support from {0} finite values with zero range")]
    DegenerateData(usize),
    #[error("covariate '{0}' required by the basis is missing")]
    MissingCovariate(String),
    #[error("non-finite argument {0}")]
    NonFinite(f64),
}

/// Closed interval on which a Bernstein polynomial is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Support {
    lower: f64,
    upper: f64,
}

impl Support {
    pub fn new(lower: f64, upper: f64) -> Result<Self, BasisError> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(BasisError::InvalidSupport { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    /// `[min - 0.1 range, max + 0.1 range]` over the finite values.
    pub fn around(values: &[f64]) -> Result<Self, BasisError> {
        Self::around_with(values, 0.1)
    }

    pub fn around_with(values: &[f64], expand: f64) -> Result<Self, BasisError> {
        let (lo, hi) = finite_range(values).ok_or(BasisError::DegenerateData(0))?;
        if lo >= hi {
            let n = values.iter().filter(|v| v.is_finite()).count();
            return Err(BasisError::DegenerateData(n));
        }
        let pad = expand * (hi - lo);
        Self::new(lo - pad, hi + pad)
    }

    /// Exact `[min, max]` of the finite values.
    pub fn spanning(values: &[f64]) -> Result<Self, BasisError> {
        Self::around_with(values, 0.0)
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.lower && y <= self.upper
    }

    /// Affine map of the support onto `[0, 1]`.
    pub fn rescale(&self, y: f64) -> f64 {
        (y - self.lower) / self.width()
    }

    pub fn clamp(&self, y: f64) -> f64 {
        y.clamp(self.lower, self.upper)
    }
}

fn finite_range(values: &[f64]) -> Option<(f64, f64)> {
    values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
}

/// Bernstein basis values of order `order` at `t ∈ [0, 1]`, written into `out`
/// (length `order + 1`).
fn bernstein_unit(order: usize, t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), order + 1);
    out.iter_mut().for_each(|v| *v = 0.0);
    out[0] = 1.0;
    let s = 1.0 - t;
    for m in 1..=order {
        for k in (1..=m).rev() {
            out[k] = s * out[k] + t * out[k - 1];
        }
        out[0] *= s;
    }
}

/// Derivative in `t` of the order-`order` basis, via the order-(M-1) basis.
fn bernstein_unit_deriv(order: usize, t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), order + 1);
    let mut lower = vec![0.0; order];
    bernstein_unit(order - 1, t, &mut lower);
    let m = order as f64;
    for k in 0..=order {
        let left = if k > 0 { lower[k - 1] } else { 0.0 };
        let right = if k < order { lower[k] } else { 0.0 };
        out[k] = m * (left - right);
    }
}

/// Bernstein polynomial basis of order `M` (dimension `M + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernsteinBasis {
    order: usize,
    support: Support,
}

impl BernsteinBasis {
    pub fn new(order: usize, support: Support) -> Result<Self, BasisError> {
        if order == 0 {
            return Err(BasisError::InvalidOrder);
        }
        Ok(Self { order, support })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn dim(&self) -> usize {
        self.order + 1
    }

    /// Basis row with linear continuation outside the support.
    pub fn eval_into(&self, y: f64, out: &mut [f64]) {
        let s = self.support;
        if y < s.lower || y > s.upper {
            let bound = if y < s.lower { s.lower } else { s.upper };
            let t = s.rescale(bound);
            bernstein_unit(self.order, t, out);
            let mut slope = vec![0.0; self.dim()];
            self.deriv_into(bound, &mut slope);
            let dy = y - bound;
            for (o, d) in out.iter_mut().zip(&slope) {
                *o += dy * d;
            }
        } else {
            bernstein_unit(self.order, s.rescale(y), out);
        }
    }

    /// Exact derivative in `y`; constant beyond the support.
    pub fn deriv_into(&self, y: f64, out: &mut [f64]) {
        let s = self.support;
        let t = s.rescale(s.clamp(y));
        bernstein_unit_deriv(self.order, t, out);
        let scale = 1.0 / s.width();
        out.iter_mut().for_each(|v| *v *= scale);
    }

    /// Basis clamped to the support: constant continuation. Used for
    /// covariate directions, where the basis must stay non-negative.
    pub fn eval_clamped_into(&self, x: f64, out: &mut [f64]) {
        bernstein_unit(self.order, self.support.rescale(self.support.clamp(x)), out);
    }

    pub fn eval(&self, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(y, &mut out);
        out
    }

    pub fn deriv(&self, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.deriv_into(y, &mut out);
        out
    }

    /// Same support, order `M + 1`.
    pub fn elevated(&self) -> Self {
        Self {
            order: self.order + 1,
            support: self.support,
        }
    }

    /// Coefficients in the order-(M+1) basis representing the same polynomial.
    pub fn elevate_coefficients(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.dim());
        let m1 = (self.order + 1) as f64;
        let mut out = Vec::with_capacity(self.dim() + 1);
        out.push(theta[0]);
        for k in 1..=self.order {
            let a = k as f64 / m1;
            out.push(a * theta[k - 1] + (1.0 - a) * theta[k]);
        }
        out.push(theta[self.order]);
        out
    }
}

/// `a(y) = (1, y)`, or `(1, ỹ)` on a rescaled axis when a support is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LinearBasis {
    scale: Option<Support>,
}

impl LinearBasis {
    pub fn new() -> Self {
        Self { scale: None }
    }

    pub fn scaled(support: Support) -> Self {
        Self {
            scale: Some(support),
        }
    }

    pub fn scale(&self) -> Option<Support> {
        self.scale
    }

    fn unit(&self, y: f64) -> (f64, f64) {
        match self.scale {
            Some(s) => (s.rescale(y), 1.0 / s.width()),
            None => (y, 1.0),
        }
    }
}

/// Tensor product of a response Bernstein basis and a covariate Bernstein
/// basis. Components are ordered with the covariate index fastest:
/// component `ky * (M_x + 1) + kx` is `b_ky(y) · c_kx(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBasis {
    response: BernsteinBasis,
    covariate: BernsteinBasis,
    variable: String,
}

impl TensorBasis {
    pub fn new(response: BernsteinBasis, variable: impl Into<String>, covariate: BernsteinBasis) -> Self {
        Self {
            response,
            covariate,
            variable: variable.into(),
        }
    }

    pub fn response_basis(&self) -> &BernsteinBasis {
        &self.response
    }

    pub fn covariate_basis(&self) -> &BernsteinBasis {
        &self.covariate
    }

    pub fn variable(&self) -> &str {
        &self.variable
    }

    fn index(&self, ky: usize, kx: usize) -> usize {
        ky * self.covariate.dim() + kx
    }
}

/// Response basis scaled by the value of a numeric covariate: `b(y) · x`.
///
/// `range` is the covariate range seen in training; monotonicity of the
/// combined transformation is guaranteed for covariate values inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaryingCoefBasis {
    response: BernsteinBasis,
    variable: String,
    range: Support,
}

impl VaryingCoefBasis {
    pub fn new(response: BernsteinBasis, variable: impl Into<String>, range: Support) -> Self {
        Self {
            response,
            variable: variable.into(),
            range,
        }
    }

    pub fn response_basis(&self) -> &BernsteinBasis {
        &self.response
    }

    pub fn variable(&self) -> &str {
        &self.variable
    }

    pub fn range(&self) -> Support {
        self.range
    }

    pub fn dim(&self) -> usize {
        self.response.dim()
    }
}

/// Any basis that can serve as the transformation term of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformationBasis {
    Linear(LinearBasis),
    Bernstein(BernsteinBasis),
    Tensor(TensorBasis),
    /// Baseline Bernstein term plus a response-varying coefficient term.
    Varying {
        baseline: BernsteinBasis,
        varying: VaryingCoefBasis,
    },
}

impl From<LinearBasis> for TransformationBasis {
    fn from(b: LinearBasis) -> Self {
        Self::Linear(b)
    }
}

impl From<BernsteinBasis> for TransformationBasis {
    fn from(b: BernsteinBasis) -> Self {
        Self::Bernstein(b)
    }
}

impl From<TensorBasis> for TransformationBasis {
    fn from(b: TensorBasis) -> Self {
        Self::Tensor(b)
    }
}

impl TransformationBasis {
    pub fn varying(baseline: BernsteinBasis, varying: VaryingCoefBasis) -> Self {
        Self::Varying { baseline, varying }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Linear(_) => 2,
            Self::Bernstein(b) => b.dim(),
            Self::Tensor(t) => t.response.dim() * t.covariate.dim(),
            Self::Varying { baseline, varying } => baseline.dim() + varying.dim(),
        }
    }

    /// Name of the numeric covariate the basis depends on, if any.
    pub fn covariate(&self) -> Option<&str> {
        match self {
            Self::Tensor(t) => Some(&t.variable),
            Self::Varying { varying, .. } => Some(&varying.variable),
            _ => None,
        }
    }

    /// Support of the response direction, if bounded.
    pub fn response_support(&self) -> Option<Support> {
        match self {
            Self::Linear(l) => l.scale,
            Self::Bernstein(b) => Some(b.support),
            Self::Tensor(t) => Some(t.response.support),
            Self::Varying { baseline, .. } => Some(baseline.support),
        }
    }

    fn covariate_value(&self, x: Option<f64>) -> Result<f64, BasisError> {
        match (self.covariate(), x) {
            (None, _) => Ok(0.0),
            (Some(_), Some(v)) if v.is_finite() => Ok(v),
            (Some(_), Some(v)) => Err(BasisError::NonFinite(v)),
            (Some(name), None) => Err(BasisError::MissingCovariate(name.to_string())),
        }
    }

    /// Coefficients representing `h(y | x) = alpha + beta·y` for every `x`.
    pub fn linear_coefficients(&self, alpha: f64, beta: f64) -> Vec<f64> {
        let bernstein = |b: &BernsteinBasis| -> Vec<f64> {
            let s = b.support;
            let m = b.order as f64;
            (0..b.dim()).map(|k| alpha + beta * (s.lower() + s.width() * k as f64 / m.max(1.0))).collect()
        };
        match self {
            Self::Linear(l) => match l.scale {
                Some(s) => vec![alpha + beta * s.lower(), beta * s.width()],
                None => vec![alpha, beta],
            },
            Self::Bernstein(b) => bernstein(b),
            Self::Tensor(t) => bernstein(&t.response)
                .into_iter()
                .flat_map(|c| std::iter::repeat_n(c, t.covariate.dim()))
                .collect(),
            Self::Varying { baseline, varying } => {
                let mut out = bernstein(baseline);
                out.extend(std::iter::repeat_n(0.0, varying.dim()));
                out
            }
        }
    }

    /// Writes `a(y, x)` into `out` (length [`dim`](Self::dim)).
    pub fn eval_into(&self, y: f64, x: Option<f64>, out: &mut [f64]) -> Result<(), BasisError> {
        if !y.is_finite() {
            return Err(BasisError::NonFinite(y));
        }
        let xv = self.covariate_value(x)?;
        match self {
            Self::Linear(l) => {
                out[0] = 1.0;
                out[1] = l.unit(y).0;
            }
            Self::Bernstein(b) => b.eval_into(y, out),
            Self::Tensor(t) => {
                let ay = t.response.eval(y);
                let mut ax = vec![0.0; t.covariate.dim()];
                t.covariate.eval_clamped_into(xv, &mut ax);
                kron_into(t, &ay, &ax, out);
            }
            Self::Varying { baseline, varying } => {
                let d = baseline.dim();
                baseline.eval_into(y, &mut out[..d]);
                varying.response.eval_into(y, &mut out[d..]);
                out[d..].iter_mut().for_each(|v| *v *= xv);
            }
        }
        Ok(())
    }

    /// Writes `∂a(y, x)/∂y` into `out`.
    pub fn deriv_into(&self, y: f64, x: Option<f64>, out: &mut [f64]) -> Result<(), BasisError> {
        if !y.is_finite() {
            return Err(BasisError::NonFinite(y));
        }
        let xv = self.covariate_value(x)?;
        match self {
            Self::Linear(l) => {
                out[0] = 0.0;
                out[1] = l.unit(y).1;
            }
            Self::Bernstein(b) => b.deriv_into(y, out),
            Self::Tensor(t) => {
                let dy = t.response.deriv(y);
                let mut ax = vec![0.0; t.covariate.dim()];
                t.covariate.eval_clamped_into(xv, &mut ax);
                kron_into(t, &dy, &ax, out);
            }
            Self::Varying { baseline, varying } => {
                let d = baseline.dim();
                baseline.deriv_into(y, &mut out[..d]);
                varying.response.deriv_into(y, &mut out[d..]);
                out[d..].iter_mut().for_each(|v| *v *= xv);
            }
        }
        Ok(())
    }

    pub fn eval(&self, y: f64, x: Option<f64>) -> Result<Vec<f64>, BasisError> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(y, x, &mut out)?;
        Ok(out)
    }

    pub fn deriv(&self, y: f64, x: Option<f64>) -> Result<Vec<f64>, BasisError> {
        let mut out = vec![0.0; self.dim()];
        self.deriv_into(y, x, &mut out)?;
        Ok(out)
    }

    /// Linear inequality rows `Dϑ ≥ 0` that make `h` non-decreasing in `y`.
    pub fn monotonicity_rows(&self) -> MonotonicityConstraint {
        let d = self.dim();
        let mut rows = Vec::new();
        let diff = |offset: usize, stride: usize, k: usize, scale: f64, row: &mut [f64]| {
            row[offset + k * stride] -= scale;
            row[offset + (k + 1) * stride] += scale;
        };
        match self {
            Self::Linear(_) => {
                rows.push(vec![0.0, 1.0]);
            }
            Self::Bernstein(b) => {
                for k in 0..b.order {
                    let mut row = vec![0.0; d];
                    diff(0, 1, k, 1.0, &mut row);
                    rows.push(row);
                }
            }
            Self::Tensor(t) => {
                let stride = t.covariate.dim();
                for kx in 0..t.covariate.dim() {
                    for ky in 0..t.response.order {
                        let mut row = vec![0.0; d];
                        row[t.index(ky, kx)] -= 1.0;
                        row[t.index(ky + 1, kx)] += 1.0;
                        debug_assert_eq!(t.index(ky + 1, kx) - t.index(ky, kx), stride);
                        rows.push(row);
                    }
                }
            }
            Self::Varying { baseline, varying } => {
                let m = baseline.order;
                let db = baseline.dim();
                for x in [varying.range.lower, varying.range.upper] {
                    for k in 0..m {
                        let mut row = vec![0.0; d];
                        diff(0, 1, k, 1.0, &mut row);
                        diff(db, 1, k, x, &mut row);
                        rows.push(row);
                    }
                }
            }
        }
        MonotonicityConstraint { dim: d, rows }
    }

    /// Invertible map `ϑ = T v` such that the monotonicity rows evaluated at
    /// `ϑ` are exactly the entries of `v` flagged positive.
    pub fn parameterization(&self) -> MonotoneParameterization {
        let d = self.dim();
        let mut map = vec![0.0; d * d];
        let mut positive = vec![false; d];
        let mut row_of_coord = vec![None; d];
        match self {
            Self::Linear(_) => {
                map[0] = 1.0;
                map[3] = 1.0;
                positive[1] = true;
                row_of_coord[1] = Some(0);
            }
            Self::Bernstein(b) => {
                cumulative_block(&mut map, d, 0, 0, b.dim(), 1, 1.0);
                for k in 1..b.dim() {
                    positive[k] = true;
                    row_of_coord[k] = Some(k - 1);
                }
            }
            Self::Tensor(t) => {
                let nx = t.covariate.dim();
                let ny = t.response.dim();
                for kx in 0..nx {
                    cumulative_block(&mut map, d, kx, kx, ny, nx, 1.0);
                    for ky in 1..ny {
                        let c = t.index(ky, kx);
                        positive[c] = true;
                        row_of_coord[c] = Some(kx * t.response.order + ky - 1);
                    }
                }
            }
            Self::Varying { baseline, varying } => {
                // v = [lo; hi] with lo = ϑ₁ + x_l ϑ₂ and hi = ϑ₁ + x_u ϑ₂,
                // each a cumulative sum of a free level and positive steps.
                let nb = baseline.dim();
                let (xl, xu) = (varying.range.lower, varying.range.upper);
                let span = xu - xl;
                cumulative_block(&mut map, d, 0, 0, nb, 1, xu / span);
                cumulative_block(&mut map, d, 0, nb, nb, 1, -xl / span);
                cumulative_block(&mut map, d, nb, 0, nb, 1, -1.0 / span);
                cumulative_block(&mut map, d, nb, nb, nb, 1, 1.0 / span);
                for k in 1..nb {
                    positive[k] = true;
                    row_of_coord[k] = Some(k - 1);
                    positive[nb + k] = true;
                    row_of_coord[nb + k] = Some(baseline.order + k - 1);
                }
            }
        }
        MonotoneParameterization {
            dim: d,
            map,
            positive,
            row_of_coord,
        }
    }
}

fn kron_into(t: &TensorBasis, ay: &[f64], ax: &[f64], out: &mut [f64]) {
    for (ky, vy) in ay.iter().enumerate() {
        for (kx, vx) in ax.iter().enumerate() {
            out[t.index(ky, kx)] = vy * vx;
        }
    }
}

/// Adds `scale ·` a lower-triangular block of ones into the `d × d` matrix
/// `map`, mapping coordinates `col0 + j·stride` onto rows `row0 + i·stride`.
fn cumulative_block(map: &mut [f64], d: usize, row0: usize, col0: usize, len: usize, stride: usize, scale: f64) {
    for i in 0..len {
        for j in 0..=i {
            map[(row0 + i * stride) * d + col0 + j * stride] += scale;
        }
    }
}

/// Difference rows encoding `Dϑ ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityConstraint {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl MonotonicityConstraint {
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn evaluate(&self, theta: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// True when every row is at least `-slack`.
    pub fn is_satisfied(&self, theta: &[f64], slack: f64) -> bool {
        self.evaluate(theta).iter().all(|v| *v >= -slack)
    }
}

/// Working parameterization of one coefficient block.
///
/// `ϑ = map · v`, where `v_j` is free when `positive[j]` is false and must be
/// positive otherwise. `row_of_coord[j]` names the monotonicity row that
/// equals `v_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneParameterization {
    dim: usize,
    map: Vec<f64>,
    positive: Vec<bool>,
    row_of_coord: Vec<Option<usize>>,
}

impl MonotoneParameterization {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn map(&self) -> &[f64] {
        &self.map
    }

    pub fn positive(&self) -> &[bool] {
        &self.positive
    }

    pub fn row_of_coord(&self) -> &[Option<usize>] {
        &self.row_of_coord
    }

    /// `ϑ = map · v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| (0..d).map(|j| self.map[i * d + j] * v[j]).sum())
            .collect()
    }

    /// `mapᵀ g`
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|j| (0..d).map(|i| self.map[i * d + j] * g[i]).sum())
            .collect()
    }

    /// Solves `map · v = ϑ`.
    pub fn invert(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let m = nalgebra::DMatrix::from_row_slice(d, d, &self.map);
        let rhs = nalgebra::DVector::from_column_slice(theta);
        let lu = m.lu();
        let sol = lu.solve(&rhs).expect("monotone parameterization is invertible");
        sol.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bern(m: usize, lo: f64, hi: f64) -> BernsteinBasis {
        BernsteinBasis::new(m, Support::new(lo, hi).unwrap()).unwrap()
    }

    #[test]
    fn order_one_is_linear_interpolation() {
        let v = bern(1, 0.0, 1.0).eval(0.3);
        assert_abs_diff_eq!(v[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn order_two_midpoint_binomial_weights() {
        let v = bern(2, 0.0, 1.0).eval(0.5);
        for (a, b) in v.iter().zip([0.25, 0.5, 0.25]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn left_endpoint_puts_all_mass_on_first_function() {
        let b = bern(5, 12.0, 47.5);
        assert_eq!(b.eval(12.0), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tensor_order_one_at_corner() {
        let t = TensorBasis::new(bern(1, 0.0, 1.0), "age", bern(1, 0.0, 1.0));
        let basis = TransformationBasis::Tensor(t);
        assert_eq!(basis.eval(0.0, Some(1.0)).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn tensor_requires_covariate() {
        let t = TensorBasis::new(bern(1, 0.0, 1.0), "age", bern(1, 0.0, 1.0));
        let err = TransformationBasis::Tensor(t).eval(0.5, None).unwrap_err();
        assert_eq!(err, BasisError::MissingCovariate("age".into()));
    }

    #[test]
    fn linear_derivative_is_unit_slope() {
        let basis = TransformationBasis::Linear(LinearBasis::new());
        for y in [-3.0, 0.0, 0.4, 17.0] {
            assert_eq!(basis.deriv(y, None).unwrap(), vec![0.0, 1.0]);
        }
    }

    #[test]
    fn order_one_derivative_on_width_two() {
        let b = bern(1, 0.0, 2.0);
        for y in [0.1, 1.0, 1.9] {
            let d = b.deriv(y);
            assert_abs_diff_eq!(d[0], -0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(d[1], 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn order_five_derivative_matches_central_differences() {
        let b = bern(5, 15.0, 45.0);
        let eps = 1e-6;
        for i in 0..20 {
            let y = 15.5 + i as f64 * 1.45;
            let analytic = b.deriv(y);
            let up = b.eval(y + eps);
            let down = b.eval(y - eps);
            for k in 0..6 {
                let fd = (up[k] - down[k]) / (2.0 * eps);
                assert!((analytic[k] - fd).abs() <= 1e-6, "y={y} k={k}");
            }
        }
    }

    #[test]
    fn extrapolation_is_linear_beyond_support() {
        let b = bern(3, 0.0, 1.0);
        let at = b.eval(1.0);
        let slope = b.deriv(1.0);
        let far = b.eval(3.0);
        for k in 0..4 {
            assert_abs_diff_eq!(far[k], at[k] + 2.0 * slope[k], epsilon = 1e-14);
        }
        assert_eq!(b.deriv(3.0), slope);
    }

    #[test]
    fn monotonicity_row_counts() {
        let b5 = TransformationBasis::Bernstein(bern(5, 0.0, 1.0));
        let rows = b5.monotonicity_rows();
        assert_eq!(rows.n_rows(), 5);
        for (k, row) in rows.rows().iter().enumerate() {
            let mut expect = vec![0.0; 6];
            expect[k] = -1.0;
            expect[k + 1] = 1.0;
            assert_eq!(row, &expect);
        }

        let lin = TransformationBasis::Linear(LinearBasis::new()).monotonicity_rows();
        assert_eq!(lin.rows(), &[vec![0.0, 1.0]]);

        let t = TensorBasis::new(bern(5, 0.0, 1.0), "age", bern(5, 20.0, 80.0));
        assert_eq!(TransformationBasis::Tensor(t).monotonicity_rows().n_rows(), 30);
    }

    fn all_bases() -> Vec<TransformationBasis> {
        let vary = VaryingCoefBasis::new(bern(3, 0.0, 10.0), "age", Support::new(20.0, 70.0).unwrap());
        vec![
            LinearBasis::new().into(),
            bern(4, -1.0, 2.0).into(),
            TensorBasis::new(bern(3, 0.0, 1.0), "age", bern(2, 0.0, 5.0)).into(),
            TransformationBasis::varying(bern(3, 0.0, 10.0), vary),
        ]
    }

    #[test]
    fn parameterization_turns_rows_into_positive_coordinates() {
        for basis in all_bases() {
            let p = basis.parameterization();
            let rows = basis.monotonicity_rows();
            let d = basis.dim();
            assert_eq!(rows.n_rows(), p.positive().iter().filter(|b| **b).count());
            for j in 0..d {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                let theta = p.apply(&e);
                let r = rows.evaluate(&theta);
                for (ri, val) in r.iter().enumerate() {
                    let expect = if p.row_of_coord()[j] == Some(ri) { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(*val, expect, epsilon = 1e-12);
                }
            }
            let v: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.2).collect();
            let back = p.invert(&p.apply(&v));
            for (a, b) in v.iter().zip(&back) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn degree_elevation_example() {
        let b = bern(2, 0.0, 1.0);
        let theta = [1.0, -2.0, 4.0];
        let up = b.elevate_coefficients(&theta);
        let e = b.elevated();
        for i in 0..50 {
            let y = i as f64 / 49.0;
            let v1: f64 = b.eval(y).iter().zip(&theta).map(|(a, t)| a * t).sum();
            let v2: f64 = e.eval(y).iter().zip(&up).map(|(a, t)| a * t).sum();
            assert_abs_diff_eq!(v1, v2, epsilon = 1e-12);
        }
    }

    #[test]
    fn support_around_data() {
        let s = Support::around(&[10.0, 20.0, 15.0]).unwrap();
        assert_abs_diff_eq!(s.lower(), 9.0);
        assert_abs_diff_eq!(s.upper(), 21.0);
        assert!(Support::around(&[3.0, 3.0]).is_err());
        assert!(Support::new(1.0, 1.0).is_err());
    }

    #[test]
    fn linear_coefficients_reproduce_a_line() {
        let s = Support::new(-1.0, 3.0).unwrap();
        let b = BernsteinBasis::new(4, s).unwrap();
        let bases: Vec<TransformationBasis> = vec![
            LinearBasis::new().into(),
            LinearBasis::scaled(s).into(),
            b.clone().into(),
            TensorBasis::new(b.clone(), "x", BernsteinBasis::new(2, Support::new(0.0, 1.0).unwrap()).unwrap()).into(),
            TransformationBasis::varying(b.clone(), VaryingCoefBasis::new(b, "x", Support::new(0.0, 1.0).unwrap())),
        ];
        for basis in bases {
            let theta = basis.linear_coefficients(0.3, 1.7);
            for y in [-2.0, 0.0, 1.3, 4.0] {
                for x in [0.0, 0.4, 1.0] {
                    let a = basis.eval(y, Some(x)).unwrap();
                    let h: f64 = a.iter().zip(&theta).map(|(a, t)| a * t).sum();
                    assert!((h - (0.3 + 1.7 * y)).abs() < 1e-12);
                }
            }
        }
    }
}
