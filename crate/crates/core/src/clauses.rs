//! Random clauses `θ` of diluted models and their extension to fractional
//! arguments.
//!
//! Three families are supported: the K-spin interaction `β g σ_1⋯σ_K`, the
//! K-sat penalty `-β Π_j (1 + J_j σ_j)/2`, and the perturbation clause
//! `g^d Π_j (1 + σ_j)/2` with `E (g^d)^2 = 2^{-d} ε`.
//!
//! For `x ∈ [-1,1]^K`, `exp θ(x)` denotes the average of `exp θ(σ)` over
//! independent spins with means `x_j`. Downstream code works with
//! `log exp θ(x)`, computed here without cancellation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Law of the K-spin coupling `g`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GDist {
    #[default]
    Gaussian,
    Rademacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum ClauseModel {
    #[serde(rename = "kspin")]
    KSpin {
        #[serde(rename = "K")]
        k: usize,
        beta: f64,
        #[serde(default)]
        g_dist: GDist,
    },
    #[serde(rename = "ksat")]
    KSat {
        #[serde(rename = "K")]
        k: usize,
        beta: f64,
    },
    /// Perturbation clause on `d` spins with coupling variance `variance`.
    Pert { d: usize, variance: f64 },
}

impl ClauseModel {
    pub fn kspin(k: usize, beta: f64, g_dist: GDist) -> Result<Self> {
        let m = ClauseModel::KSpin { k, beta, g_dist };
        m.validate()?;
        Ok(m)
    }

    pub fn ksat(k: usize, beta: f64) -> Result<Self> {
        let m = ClauseModel::KSat { k, beta };
        m.validate()?;
        Ok(m)
    }

    /// Perturbation clause with variance exactly `2^{-d} ε_pert`.
    pub fn pert(d: usize, eps_pert: f64) -> Result<Self> {
        if !(eps_pert >= 0.0 && eps_pert.is_finite()) {
            return Err(Error::param("eps_pert", format!("must be ≥ 0, got {eps_pert}")));
        }
        let m = ClauseModel::Pert {
            d,
            variance: eps_pert * 0.5f64.powi(d as i32),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn arity(&self) -> usize {
        match *self {
            ClauseModel::KSpin { k, .. } | ClauseModel::KSat { k, .. } => k,
            ClauseModel::Pert { d, .. } => d,
        }
    }

    /// Inverse temperature; zero for perturbation clauses.
    pub fn beta(&self) -> f64 {
        match *self {
            ClauseModel::KSpin { beta, .. } | ClauseModel::KSat { beta, .. } => beta,
            ClauseModel::Pert { .. } => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arity() == 0 {
            return Err(Error::param("K", "clause arity must be at least 1"));
        }
        match *self {
            ClauseModel::KSpin { beta, .. } | ClauseModel::KSat { beta, .. } => {
                if !(beta >= 0.0 && beta.is_finite()) {
                    return Err(Error::param("beta", format!("must be ≥ 0, got {beta}")));
                }
            }
            ClauseModel::Pert { variance, .. } => {
                if !(variance >= 0.0 && variance.is_finite()) {
                    return Err(Error::param("variance", format!("must be ≥ 0, got {variance}")));
                }
            }
        }
        Ok(())
    }

    /// Draws the clause disorder.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ClauseInstance {
        let disorder = match *self {
            ClauseModel::KSpin { g_dist, .. } => Disorder::Coupling(match g_dist {
                GDist::Gaussian => StandardNormal.sample(rng),
                GDist::Rademacher => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            }),
            ClauseModel::KSat { k, .. } => Disorder::Signs(
                (0..k)
                    .map(|_| if rng.random::<bool>() { 1 } else { -1 })
                    .collect(),
            ),
            ClauseModel::Pert { variance, .. } => {
                let z: f64 = StandardNormal.sample(rng);
                Disorder::Coupling(variance.sqrt() * z)
            }
        };
        ClauseInstance {
            model: self.clone(),
            disorder,
            vars: Vec::new(),
        }
    }
}

/// Sampled disorder of one clause.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disorder {
    /// `g` for K-spin clauses, `g^d` for perturbation clauses.
    Coupling(f64),
    /// K-sat literal signs `J_j ∈ {±1}`.
    Signs(Vec<i8>),
}

/// A clause with its sampled disorder and, when attached to a finite
/// system, its variable indices (0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClauseInstance {
    pub model: ClauseModel,
    pub disorder: Disorder,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vars: Vec<usize>,
}

impl ClauseInstance {
    pub fn with_vars(mut self, vars: Vec<usize>) -> Self {
        self.vars = vars;
        self
    }

    pub fn arity(&self) -> usize {
        self.model.arity()
    }

    fn coupling(&self) -> f64 {
        match self.disorder {
            Disorder::Coupling(g) => g,
            Disorder::Signs(_) => unreachable!("K-sat clause has no coupling"),
        }
    }

    fn signs(&self) -> &[i8] {
        match &self.disorder {
            Disorder::Signs(j) => j,
            Disorder::Coupling(_) => unreachable!("only K-sat clauses carry signs"),
        }
    }

    /// `θ(σ)` on a spin corner.
    pub fn theta_corner(&self, sigma: &[i8]) -> f64 {
        debug_assert_eq!(sigma.len(), self.arity());
        match self.model {
            ClauseModel::KSpin { beta, .. } => {
                let prod: i8 = sigma.iter().product();
                beta * self.coupling() * prod as f64
            }
            ClauseModel::KSat { beta, .. } => {
                let sat = sigma.iter().zip(self.signs()).any(|(s, j)| s != j);
                if sat {
                    0.0
                } else {
                    -beta
                }
            }
            ClauseModel::Pert { .. } => {
                if sigma.iter().all(|&s| s == 1) {
                    self.coupling()
                } else {
                    0.0
                }
            }
        }
    }

    fn check_range(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arity() {
            return Err(Error::DimensionMismatch {
                expected: self.arity(),
                got: x.len(),
            });
        }
        if let Some(v) = x.iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::param("x", format!("{v} outside [-1,1]")));
        }
        Ok(())
    }

    /// `exp θ(x)` for `x ∈ [-1,1]^K`.
    pub fn exp_theta_extended(&self, x: &[f64]) -> Result<f64> {
        self.check_range(x)?;
        Ok(match self.model {
            ClauseModel::KSpin { beta, .. } => {
                let a = beta * self.coupling();
                let p: f64 = x.iter().product();
                a.cosh() * (1.0 + a.tanh() * p)
            }
            ClauseModel::KSat { beta, .. } => {
                let prod: f64 = x
                    .iter()
                    .zip(self.signs())
                    .map(|(xj, &j)| (1.0 + j as f64 * xj) / 2.0)
                    .product();
                1.0 + (-beta).exp_m1() * prod
            }
            ClauseModel::Pert { .. } => {
                let prod: f64 = x.iter().map(|xj| (1.0 + xj) / 2.0).product();
                1.0 + self.coupling().exp_m1() * prod
            }
        })
    }

    /// `log exp θ(x)` for `x ∈ [-1,1]^K`.
    pub fn log_exp_theta_extended(&self, x: &[f64]) -> Result<f64> {
        self.check_range(x)?;
        Ok(self.log_exp_theta_unchecked(x))
    }

    /// Same as [`Self::log_exp_theta_extended`] without the range check; the
    /// caller guarantees `|x_j| ≤ 1`.
    pub fn log_exp_theta_unchecked(&self, x: &[f64]) -> f64 {
        match self.model {
            ClauseModel::KSpin { beta, .. } => {
                // ch(a)(1 + th(a) p) = (e^a (1+p) + e^{-a} (1-p)) / 2
                let a = beta * self.coupling();
                let p: f64 = x.iter().product();
                kspin_log(a, p)
            }
            ClauseModel::KSat { beta, .. } => {
                let prod: f64 = x
                    .iter()
                    .zip(self.signs())
                    .map(|(xj, &j)| (1.0 + j as f64 * xj) / 2.0)
                    .product();
                ((-beta).exp_m1() * prod).ln_1p()
            }
            ClauseModel::Pert { .. } => {
                let prod: f64 = x.iter().map(|xj| (1.0 + xj) / 2.0).product();
                (self.coupling().exp_m1() * prod).ln_1p()
            }
        }
    }

    /// `log exp θ(x_1, …, x_{K-1}, ε)` for both `ε = +1` and `ε = -1`,
    /// with the last coordinate being the cavity spin.
    pub fn log_exp_theta_cavity(&self, x: &[f64]) -> (f64, f64) {
        debug_assert_eq!(x.len() + 1, self.arity());
        match self.model {
            ClauseModel::KSpin { beta, .. } => {
                let a = beta * self.coupling();
                let p: f64 = x.iter().product();
                (kspin_log(a, p), kspin_log(a, -p))
            }
            ClauseModel::KSat { beta, .. } => {
                let j = self.signs();
                let prod: f64 = x
                    .iter()
                    .zip(j)
                    .map(|(xj, &jj)| (1.0 + jj as f64 * xj) / 2.0)
                    .product();
                let c = (-beta).exp_m1() * prod;
                // (1 + J_K ε)/2 is 1 for ε = J_K and 0 otherwise.
                let last = j[j.len() - 1];
                if last == 1 {
                    (c.ln_1p(), 0.0)
                } else {
                    (0.0, c.ln_1p())
                }
            }
            ClauseModel::Pert { .. } => {
                let prod: f64 = x.iter().map(|xj| (1.0 + xj) / 2.0).product();
                ((self.coupling().exp_m1() * prod).ln_1p(), 0.0)
            }
        }
    }
}

fn kspin_log(a: f64, p: f64) -> f64 {
    // log((e^a(1+p) + e^{-a}(1-p))/2), stable for large |a| and p → ±1.
    if a == 0.0 {
        return 0.0;
    }
    let (b, pb, ps) = if a >= 0.0 {
        (a, 1.0 + p, 1.0 - p)
    } else {
        (-a, 1.0 - p, 1.0 + p)
    };
    if pb <= 0.0 {
        return -b + ps.ln() - std::f64::consts::LN_2;
    }
    b + pb.ln() - std::f64::consts::LN_2 + (ps / pb * (-2.0 * b).exp()).ln_1p()
}
