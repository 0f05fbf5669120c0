use rayon::prelude::*;

use super::{ModelError, ModelSpec};
use crate::data::{shift_matrix, Dataset};

/// Rows per reduction chunk. Chunk partial sums are combined in chunk order,
/// so results do not depend on the number of worker threads.
const CHUNK: usize = 256;

/// Basis rows, derivative rows, shift rows and weights of a dataset,
/// precomputed for a fixed model structure.
#[derive(Debug, Clone)]
pub struct Design {
    spec: ModelSpec,
    n: usize,
    cells: Vec<usize>,
    basis: Vec<f64>,
    deriv: Vec<f64>,
    shift: Vec<f64>,
    weights: Vec<f64>,
}

/// Log-likelihood with optional first and second derivatives.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub loglik: f64,
    /// Empty unless requested.
    pub score: Vec<f64>,
    /// Row-major `p × p`; empty unless requested.
    pub hessian: Vec<f64>,
}

impl Design {
    pub fn new(spec: &ModelSpec, data: &Dataset) -> Result<Self, ModelError> {
        let n = data.n();
        let d = spec.trafo_dim();
        let cells = spec.cells_of(data)?;
        let covariate = match spec.trafo.covariate() {
            Some(v) => Some(data.numeric(v)?),
            None => None,
        };
        let mut basis = vec![0.0; n * d];
        let mut deriv = vec![0.0; n * d];
        for (i, &y) in data.response().iter().enumerate() {
            if !y.is_finite() {
                return Err(ModelError::NonFinite(i));
            }
            let x = covariate.map(|c| c[i]);
            spec.trafo.eval_into(y, x, &mut basis[i * d..(i + 1) * d])?;
            spec.trafo.deriv_into(y, x, &mut deriv[i * d..(i + 1) * d])?;
        }
        let shift = shift_matrix(data, &spec.shifts)?;
        let q = spec.n_shift();
        let shift = (0..n).flat_map(|i| shift.row(i).to_vec()).collect::<Vec<_>>();
        debug_assert_eq!(shift.len(), n * q);
        Ok(Self {
            spec: spec.clone(),
            n,
            cells,
            basis,
            deriv,
            shift,
            weights: data.weights().to_vec(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Same rows with different case weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.n);
        Self {
            weights,
            ..self.clone()
        }
    }

    /// Rows `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let d = self.spec.trafo_dim();
        let q = self.spec.n_shift();
        let pick = |src: &[f64], k: usize| rows.iter().flat_map(|&i| src[i * k..(i + 1) * k].to_vec()).collect();
        Self {
            spec: self.spec.clone(),
            n: rows.len(),
            cells: rows.iter().map(|&i| self.cells[i]).collect(),
            basis: pick(&self.basis, d),
            deriv: pick(&self.deriv, d),
            shift: pick(&self.shift, q),
            weights: rows.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    /// Rows with positive weight, as a compact design plus their indices.
    pub fn positive_part(&self) -> (Self, Vec<usize>) {
        let rows: Vec<usize> = (0..self.n).filter(|&i| self.weights[i] > 0.0).collect();
        (self.subset(&rows), rows)
    }

    pub fn basis_row(&self, i: usize) -> &[f64] {
        let d = self.spec.trafo_dim();
        &self.basis[i * d..(i + 1) * d]
    }

    pub fn deriv_row(&self, i: usize) -> &[f64] {
        let d = self.spec.trafo_dim();
        &self.deriv[i * d..(i + 1) * d]
    }

    pub fn shift_row(&self, i: usize) -> &[f64] {
        let q = self.spec.n_shift();
        &self.shift[i * q..(i + 1) * q]
    }

    /// `(h, h')` at observation `i`.
    pub fn h_at(&self, theta: &[f64], i: usize) -> (f64, f64) {
        let c = self.cells[i];
        let block = &theta[self.spec.theta_range(c)];
        let beta = &theta[self.spec.beta_range()];
        let a = self.basis_row(i);
        let da = self.deriv_row(i);
        let mut h = 0.0;
        let mut hp = 0.0;
        for k in 0..block.len() {
            h += a[k] * block[k];
            hp += da[k] * block[k];
        }
        let s = self.shift_row(i);
        for (b, v) in beta.iter().zip(s) {
            h -= b * v;
        }
        (h, hp)
    }

    /// Unweighted `log f(yᵢ | xᵢ)` for every row.
    pub fn log_densities(&self, theta: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.spec.check_params(theta)?;
        let link = self.spec.link;
        (0..self.n)
            .map(|i| {
                let (h, hp) = self.h_at(theta, i);
                if !(hp > 0.0) {
                    return Err(ModelError::NonMonotone { row: i, slope: hp });
                }
                Ok(link.log_pdf(h) + hp.ln())
            })
            .collect()
    }

    pub fn loglik(&self, theta: &[f64]) -> Result<f64, ModelError> {
        Ok(self.evaluate(theta, 0)?.loglik)
    }

    /// Log-likelihood (`order` 0), plus score (1), plus Hessian (2).
    pub fn evaluate(&self, theta: &[f64], order: u8) -> Result<Evaluation, ModelError> {
        self.spec.check_params(theta)?;
        let p = theta.len();
        let n_chunks = self.n.div_ceil(CHUNK).max(1);
        let run = |c: usize| self.evaluate_chunk(theta, order, c * CHUNK, ((c + 1) * CHUNK).min(self.n));
        let parts: Vec<Result<Evaluation, ModelError>> = if n_chunks > 1 {
            (0..n_chunks).into_par_iter().map(run).collect()
        } else {
            vec![run(0)]
        };
        let mut total = Evaluation {
            loglik: 0.0,
            score: if order >= 1 { vec![0.0; p] } else { Vec::new() },
            hessian: if order >= 2 { vec![0.0; p * p] } else { Vec::new() },
        };
        for part in parts {
            let part = part?;
            total.loglik += part.loglik;
            for (t, v) in total.score.iter_mut().zip(&part.score) {
                *t += v;
            }
            for (t, v) in total.hessian.iter_mut().zip(&part.hessian) {
                *t += v;
            }
        }
        if order >= 2 {
            for i in 0..p {
                for j in 0..i {
                    total.hessian[i * p + j] = total.hessian[j * p + i];
                }
            }
        }
        Ok(total)
    }

    fn evaluate_chunk(&self, theta: &[f64], order: u8, start: usize, end: usize) -> Result<Evaluation, ModelError> {
        let spec = &self.spec;
        let link = spec.link;
        let p = theta.len();
        let d = spec.trafo_dim();
        let q = spec.n_shift();
        let beta0 = spec.beta_range().start;
        let mut out = Evaluation {
            loglik: 0.0,
            score: if order >= 1 { vec![0.0; p] } else { Vec::new() },
            hessian: if order >= 2 { vec![0.0; p * p] } else { Vec::new() },
        };
        let mut local = vec![0.0; d + q];
        let mut index = vec![0usize; d + q];
        let mut ratio = vec![0.0; d];
        for i in start..end {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let (h, hp) = self.h_at(theta, i);
            if !(hp > 0.0) || !hp.is_finite() {
                return Err(ModelError::NonMonotone { row: i, slope: hp });
            }
            out.loglik += w * (link.log_pdf(h) + hp.ln());
            if order == 0 {
                continue;
            }
            let dl = link.dlog_pdf(h);
            let a = self.basis_row(i);
            let da = self.deriv_row(i);
            let s = self.shift_row(i);
            let c0 = self.cells[i] * d;
            for k in 0..d {
                index[k] = c0 + k;
                ratio[k] = da[k] / hp;
                local[k] = a[k];
            }
            for k in 0..q {
                index[d + k] = beta0 + k;
                local[d + k] = -s[k];
            }
            for k in 0..d {
                out.score[index[k]] += w * (dl * a[k] + ratio[k]);
            }
            for k in d..d + q {
                out.score[index[k]] += w * dl * local[k];
            }
            if order >= 2 {
                let d2 = w * link.d2log_pdf(h);
                for r in 0..d + q {
                    let ir = index[r];
                    let lr = d2 * local[r];
                    for c in r..d + q {
                        let mut v = lr * local[c];
                        if r < d && c < d {
                            v -= w * ratio[r] * ratio[c];
                        }
                        let (a_, b_) = (ir, index[c]);
                        let (lo, hi) = if a_ <= b_ { (a_, b_) } else { (b_, a_) };
                        out.hessian[lo * p + hi] += v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Row-major `n × p` weighted score contributions.
    pub fn score_contributions(&self, theta: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.spec.check_params(theta)?;
        let spec = &self.spec;
        let link = spec.link;
        let p = theta.len();
        let d = spec.trafo_dim();
        let beta0 = spec.beta_range().start;
        let mut out = vec![0.0; self.n * p];
        for i in 0..self.n {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let (h, hp) = self.h_at(theta, i);
            if !(hp > 0.0) {
                return Err(ModelError::NonMonotone { row: i, slope: hp });
            }
            let dl = link.dlog_pdf(h);
            let a = self.basis_row(i);
            let da = self.deriv_row(i);
            let row = &mut out[i * p..(i + 1) * p];
            let c0 = self.cells[i] * d;
            for k in 0..d {
                row[c0 + k] = w * (dl * a[k] + da[k] / hp);
            }
            for (k, s) in self.shift_row(i).iter().enumerate() {
                row[beta0 + k] = -w * dl * s;
            }
        }
        Ok(out)
    }
}
