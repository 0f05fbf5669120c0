//! Synthetic health-survey data.
//!
//! BMI follows a logit transformation model with sex-specific Bernstein(5)
//! baselines on [14, 50], a female-only bump of the upper quantiles around
//! age 30, and shift effects of smoking, age and lifestyle. One `effects`
//! factor scales every departure from the female baseline; at zero all rows
//! share one distribution. Responses are drawn by inverting the CDF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::basis::{BernsteinBasis, Support};
use crate::data::{DataError, Dataset};

pub const BMI_LOWER: f64 = 14.0;
pub const BMI_UPPER: f64 = 50.0;

const FEMALE: [f64; 6] = [-9.0, -0.5, 2.0, 3.8, 5.5, 8.0];
/// Male minus female baseline at full effect size.
const MALE_DELTA: [f64; 6] = [-0.5, -0.8, -0.7, -0.4, -0.2, 0.0];
/// Bump direction; `FEMALE - BUMP` stays increasing.
const BUMP: [f64; 6] = [0.0, 0.0, 0.3, 0.8, 1.2, 1.0];
const BUMP_AGE: f64 = 30.0;
const BUMP_WIDTH: f64 = 6.0;

pub const SEXES: [&str; 2] = ["female", "male"];
pub const SMOKING: [&str; 5] = ["never", "former", "light", "medium", "heavy"];
const SMOKING_PROB: [f64; 5] = [0.5, 0.2, 0.12, 0.1, 0.08];
/// Smoking shifts per sex (never is the reference).
const SMOKING_SHIFT: [[f64; 5]; 2] = [[0.0, 0.25, -0.3, -0.1, 0.2], [0.0, 0.35, -0.2, 0.0, 0.3]];
pub const ACTIVITY: [&str; 3] = ["low", "moderate", "high"];
const ACTIVITY_SHIFT: [f64; 3] = [0.0, -0.2, -0.4];
pub const EDU: [&str; 3] = ["primary", "secondary", "tertiary"];
const EDU_SHIFT: [f64; 3] = [0.0, -0.15, -0.35];
pub const REGION: [&str; 3] = ["west", "central", "east"];
const REGION_SHIFT: [f64; 3] = [0.0, 0.05, -0.05];
pub const YES_NO: [&str; 2] = ["yes", "no"];
pub const NATIONALITY: [&str; 2] = ["swiss", "foreign"];
const AGE_SLOPE: f64 = 0.3;
const ALCOHOL_SLOPE: f64 = 0.05;
const FV_NO: f64 = 0.15;
const FOREIGN: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("n must be positive")]
    EmptySample,
    #[error("effect size {0} breaks monotonicity of the generator (allowed range [0, 1])")]
    Effects(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n: usize,
    pub seed: u64,
    /// Scales the sex difference, the age bump and all shift effects.
    pub effects: f64,
    /// Draw unequal sampling weights instead of unit weights.
    pub survey_weights: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 1,
            effects: 1.0,
            survey_weights: false,
        }
    }
}

/// Covariates of one synthetic respondent, as level indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Respondent {
    pub sex: usize,
    pub smoking: usize,
    pub age: f64,
    pub alcohol: f64,
    pub fv: usize,
    pub activity: usize,
    pub edu: usize,
    pub nat: usize,
    pub region: usize,
}

/// The data-generating model.
#[derive(Debug, Clone)]
pub struct Generator {
    basis: BernsteinBasis,
    effects: f64,
}

impl Generator {
    pub fn new(effects: f64) -> Result<Self, SimulateError> {
        if !(0.0..=1.0).contains(&effects) {
            return Err(SimulateError::Effects(effects));
        }
        Ok(Self {
            basis: BernsteinBasis::new(5, Support::new(BMI_LOWER, BMI_UPPER).expect("valid support")).expect("order 5"),
            effects,
        })
    }

    /// Bernstein coefficients for the respondent's sex and age.
    fn coefficients(&self, r: &Respondent) -> [f64; 6] {
        let e = self.effects;
        let mut c = FEMALE;
        if r.sex == 1 {
            c.iter_mut().zip(MALE_DELTA).for_each(|(c, d)| *c += e * d);
        } else {
            let g = (-((r.age - BUMP_AGE) / BUMP_WIDTH).powi(2)).exp();
            c.iter_mut().zip(BUMP).for_each(|(c, d)| *c -= e * g * d);
        }
        c
    }

    /// Sum of shift effects; positive values move BMI upwards.
    fn shift(&self, r: &Respondent) -> f64 {
        let s = SMOKING_SHIFT[r.sex][r.smoking]
            + AGE_SLOPE * (r.age - 45.0) / 10.0
            + ALCOHOL_SLOPE * r.alcohol
            + if r.fv == 1 { FV_NO } else { 0.0 }
            + ACTIVITY_SHIFT[r.activity]
            + EDU_SHIFT[r.edu]
            + if r.nat == 1 { FOREIGN } else { 0.0 }
            + REGION_SHIFT[r.region];
        self.effects * s
    }

    /// Transformation function `h(y | r)`.
    pub fn h(&self, y: f64, r: &Respondent) -> f64 {
        let a = self.basis.eval(y);
        let c = self.coefficients(r);
        a.iter().zip(c).map(|(a, c)| a * c).sum::<f64>() - self.shift(r)
    }

    pub fn cdf(&self, y: f64, r: &Respondent) -> f64 {
        expit(self.h(y, r))
    }

    /// Solves `cdf(y) = u` by bisection on an expanding bracket.
    pub fn quantile(&self, u: f64, r: &Respondent) -> f64 {
        let z = (u / (1.0 - u)).ln();
        let (mut lo, mut hi) = (BMI_LOWER, BMI_UPPER);
        let width = hi - lo;
        while self.h(lo, r) > z {
            lo -= width;
        }
        while self.h(hi, r) < z {
            hi += width;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.h(mid, r) < z {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return k;
        }
    }
    probs.len() - 1
}

/// Draws covariates, weights and responses.
pub fn simulate(cfg: &SimulationConfig) -> Result<Dataset, SimulateError> {
    if cfg.n == 0 {
        return Err(SimulateError::EmptySample);
    }
    let generator = Generator::new(cfg.effects)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut people = Vec::with_capacity(cfg.n);
    let mut bmi = Vec::with_capacity(cfg.n);
    let mut weights = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let r = Respondent {
            sex: categorical(&mut rng, &[0.5, 0.5]),
            smoking: categorical(&mut rng, &SMOKING_PROB),
            age: rng.random_range(18..=75) as f64,
            alcohol: rng.random_range(0..=6) as f64,
            fv: categorical(&mut rng, &[0.7, 0.3]),
            activity: categorical(&mut rng, &[0.3, 0.45, 0.25]),
            edu: categorical(&mut rng, &[0.2, 0.55, 0.25]),
            nat: categorical(&mut rng, &[0.8, 0.2]),
            region: categorical(&mut rng, &[0.35, 0.4, 0.25]),
        };
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        bmi.push(generator.quantile(u, &r));
        let w = if cfg.survey_weights { rng.random_range(0.5..2.0) } else { 1.0 };
        weights.push(w);
        people.push(r);
    }
    let labels = |f: &dyn Fn(&Respondent) -> usize, names: &[&str]| -> Vec<String> {
        people.iter().map(|r| names[f(r)].to_string()).collect()
    };
    let d = Dataset::new("bmi", bmi)
        .with_categorical_levels("sex", &SEXES, &labels(&|r| r.sex, &SEXES))?
        .with_categorical_levels("smoking", &SMOKING, &labels(&|r| r.smoking, &SMOKING))?
        .with_numeric("age", people.iter().map(|r| r.age).collect())?
        .with_numeric("alcohol", people.iter().map(|r| r.alcohol).collect())?
        .with_categorical_levels("fv", &YES_NO, &labels(&|r| r.fv, &YES_NO))?
        .with_categorical_levels("activity", &ACTIVITY, &labels(&|r| r.activity, &ACTIVITY))?
        .with_categorical_levels("edu", &EDU, &labels(&|r| r.edu, &EDU))?
        .with_categorical_levels("nat", &NATIONALITY, &labels(&|r| r.nat, &NATIONALITY))?
        .with_categorical_levels("region", &REGION, &labels(&|r| r.region, &REGION))?
        .with_weights(weights)?
        .with_weight_name("weight");
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person(sex: usize, age: f64) -> Respondent {
        Respondent {
            sex,
            smoking: 0,
            age,
            alcohol: 0.0,
            fv: 0,
            activity: 0,
            edu: 0,
            nat: 0,
            region: 0,
        }
    }

    #[test]
    fn generator_is_monotone_and_inverts() {
        for e in [0.0, 0.5, 1.0] {
            let g = Generator::new(e).unwrap();
            for sex in 0..2 {
                for age in [18.0, 30.0, 45.0, 75.0] {
                    let r = person(sex, age);
                    let mut prev = f64::NEG_INFINITY;
                    for k in 0..=200 {
                        let y = 10.0 + 45.0 * k as f64 / 200.0;
                        let h = g.h(y, &r);
                        assert!(h > prev);
                        prev = h;
                    }
                    for u in [0.01, 0.3, 0.5, 0.9, 0.999] {
                        assert!((g.cdf(g.quantile(u, &r), &r) - u).abs() < 1e-9);
                    }
                }
            }
        }
        assert!(Generator::new(1.5).is_err());
    }

    #[test]
    fn plausible_bmi_and_female_bump() {
        let g = Generator::new(1.0).unwrap();
        let median = g.quantile(0.5, &person(0, 45.0));
        assert!((21.0..26.0).contains(&median), "{median}");
        assert!(g.quantile(0.9, &person(0, 30.0)) > g.quantile(0.9, &person(0, 50.0)) - 0.5 * AGE_SLOPE * 10.0);
        assert!(g.quantile(0.5, &person(1, 45.0)) > median);
    }

    #[test]
    fn deterministic_with_unit_weights() {
        let cfg = SimulationConfig { n: 200, ..Default::default() };
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.response(), b.response());
        assert!(a.weights().iter().all(|w| *w == 1.0));
        assert_eq!(a.categorical("smoking").unwrap().levels().len(), 5);
        assert!(simulate(&SimulationConfig { n: 0, ..cfg }).is_err());
    }
}
