use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Inverse link: the continuous distribution function `F` applied to `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Probit,
    Logit,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Probit => "probit",
            Link::Logit => "logit",
        }
    }

    pub fn parse(s: &str) -> Option<Link> {
        match s {
            "probit" => Some(Link::Probit),
            "logit" => Some(Link::Logit),
            _ => None,
        }
    }

    pub fn cdf(self, z: f64) -> f64 {
        match self {
            Link::Probit => 0.5 * erfc(-z * FRAC_1_SQRT_2),
            Link::Logit => expit(z),
        }
    }

    /// `1 - F(z)` without cancellation.
    pub fn sf(self, z: f64) -> f64 {
        self.cdf(-z)
    }

    pub fn pdf(self, z: f64) -> f64 {
        match self {
            Link::Probit => (-0.5 * z * z).exp() / (2.0 * PI).sqrt(),
            Link::Logit => {
                let e = (-z.abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
        }
    }

    /// `F''(z)`
    pub fn dpdf(self, z: f64) -> f64 {
        match self {
            Link::Probit => -z * self.pdf(z),
            Link::Logit => self.pdf(z) * (1.0 - 2.0 * expit(z)),
        }
    }

    /// `log F'(z)`, in closed form so it never underflows.
    pub fn log_pdf(self, z: f64) -> f64 {
        match self {
            Link::Probit => -0.5 * z * z - LN_SQRT_2PI,
            Link::Logit => -z.abs() - 2.0 * (-z.abs()).exp().ln_1p(),
        }
    }

    /// `d/dz log F'(z)`
    pub fn dlog_pdf(self, z: f64) -> f64 {
        match self {
            Link::Probit => -z,
            Link::Logit => -(0.5 * z).tanh(),
        }
    }

    /// `d²/dz² log F'(z)`
    pub fn d2log_pdf(self, z: f64) -> f64 {
        match self {
            Link::Probit => -1.0,
            Link::Logit => -2.0 * self.pdf(z),
        }
    }

    /// `log(1 - F(z))`
    pub fn log_sf(self, z: f64) -> f64 {
        match self {
            Link::Probit => self.sf(z).ln(),
            Link::Logit => -softplus(z),
        }
    }

    /// `log F(z)`
    pub fn log_cdf(self, z: f64) -> f64 {
        self.log_sf(-z)
    }

    /// `z` with `1 - F(z) = q`; exact in the upper tail where `F` itself
    /// rounds to one.
    pub fn quantile_sf(self, q: f64) -> f64 {
        -self.quantile(q)
    }

    /// `F⁻¹(p)` for `p ∈ (0, 1)`.
    pub fn quantile(self, p: f64) -> f64 {
        match self {
            Link::Probit => -SQRT_2 * erfc_inv(2.0 * p),
            Link::Logit => (p / (1.0 - p)).ln(),
        }
    }
}

pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))`
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
