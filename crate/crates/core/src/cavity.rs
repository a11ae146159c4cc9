//! Both sides of the cavity equations for a cascade-ansatz measure, in the
//! pure-state form: leaf weights `V_α`, hierarchical fields `s̄_i^α` and
//! cavity fields `A_i^α(ε)` give
//! `E Π_ℓ Σ_α V_α Π_{C_ℓ} s̄_i^α` against
//! `E Π_ℓ Σ_α Ṽ_α Π_{C_ℓ¹} ξ_i^α Π_{C_ℓ²} s̄_i^α`, `Ṽ_α ∝ V_α exp Σ_{i≤n} A_i^α`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeParams, TruncatedCascade};
use crate::clauses::ClauseModel;
use crate::error::{Error, Result};
use crate::fields::{FieldSampler, OrderParamH};
use crate::mp_functional::{sample_a_alpha_capped, CavityField, Perturbation};
use crate::rng::{self, tags};
use crate::stats::{self, Estimate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavitySpec {
    /// Cavity coordinates `1..=n`.
    pub n: usize,
    /// Total coordinates `1..=m`.
    pub m: usize,
    /// One coordinate set per replica, 1-based.
    pub sets: Vec<Vec<usize>>,
    pub model: ClauseModel,
    pub lambda: f64,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
    pub h: OrderParamH,
    pub params: CascadeParams,
    /// Cascade branching.
    #[serde(rename = "M")]
    pub branching: usize,
    #[serde(default)]
    pub omega_star: Option<f64>,
    /// Replaces every Poisson count `π` in the cavity fields by `min(π, cap)`.
    #[serde(default)]
    pub poisson_cap: Option<usize>,
}

impl CavitySpec {
    pub fn q(&self) -> usize {
        self.sets.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > self.m {
            return Err(Error::param("n", "need 1 ≤ n ≤ m"));
        }
        if self.sets.is_empty() {
            return Err(Error::param("sets", "need at least one replica"));
        }
        for set in &self.sets {
            if let Some(&i) = set.iter().find(|&&i| i == 0 || i > self.m) {
                return Err(Error::param("sets", format!("coordinate {i} outside 1..={}", self.m)));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(Error::param("sets", "repeated coordinate"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", "must be finite and nonnegative"));
        }
        if self.h.r != self.params.depth() {
            return Err(Error::DimensionMismatch {
                expected: self.params.depth(),
                got: self.h.r,
            });
        }
        self.model.validate()?;
        self.h.validate()?;
        self.params.validate()?;
        if let Some(p) = &self.perturbation {
            p.validate()?;
        }
        if self.branching == 0 {
            return Err(Error::param("M", "must be positive"));
        }
        Ok(())
    }

    /// `C_ℓ¹ = C_ℓ ∩ {1..n}`.
    pub fn cavity_part(&self, l: usize) -> Vec<usize> {
        self.sets[l].iter().copied().filter(|&i| i <= self.n).collect()
    }

    /// `C_ℓ² = C_ℓ ∩ {n+1..m}`.
    pub fn outer_part(&self, l: usize) -> Vec<usize> {
        self.sets[l].iter().copied().filter(|&i| i > self.n).collect()
    }
}

/// `A_i^α(ε)` on every leaf, with `A_i^α` and `ξ_i^α` through
/// [`CavityField::log_av`] and [`CavityField::xi`].
pub fn cavity_field_a_i<R: Rng + ?Sized>(spec: &CavitySpec, rng: &mut R) -> Result<CavityField> {
    let sampler = FieldSampler::new(&spec.h, spec.branching, spec.omega_star)?;
    sample_a_alpha_capped(
        &sampler,
        &spec.model,
        spec.lambda,
        spec.perturbation.as_ref(),
        spec.poisson_cap,
        rng,
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CavityResult {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// `LHS - RHS` with the standard error of the paired differences.
    pub residual: Estimate,
    pub n_samples: usize,
    /// Mean extrapolated leaf mass lost to truncation.
    pub truncation_budget: f64,
}

/// Both sides on one cascade, sharing its fields.
pub fn cavity_sides_on<R: Rng + ?Sized>(
    spec: &CavitySpec,
    cascade: &TruncatedCascade,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let sampler = FieldSampler::new(&spec.h, spec.branching, spec.omega_star)?;
    let leaves = sampler.n_leaves();
    let mut sbar = vec![vec![0.0; leaves]; spec.m];
    for s in sbar.iter_mut() {
        sampler.fill(rng, s);
    }
    let mut log_a = vec![0.0; leaves];
    let mut xi = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let a = sample_a_alpha_capped(
            &sampler,
            &spec.model,
            spec.lambda,
            spec.perturbation.as_ref(),
            spec.poisson_cap,
            rng,
        )?;
        for (acc, v) in log_a.iter_mut().zip(a.log_av()) {
            *acc += v;
        }
        xi.push(a.xi());
    }
    let log_v = cascade.log_leaf_weights();
    let norm = stats::log_sum_exp(&log_v);
    let v: Vec<f64> = log_v.iter().map(|l| (l - norm).exp()).collect();
    let tilted: Vec<f64> = log_v.iter().zip(&log_a).map(|(l, a)| l + a).collect();
    let tnorm = stats::log_sum_exp(&tilted);
    let vt: Vec<f64> = tilted.iter().map(|l| (l - tnorm).exp()).collect();

    let mut lhs = 1.0;
    let mut rhs = 1.0;
    for l in 0..spec.q() {
        if spec.sets[l].is_empty() {
            continue;
        }
        let inner = spec.cavity_part(l);
        let outer = spec.outer_part(l);
        let mut left = Vec::with_capacity(leaves);
        let mut right = Vec::with_capacity(leaves);
        for a in 0..leaves {
            let s_all: f64 = spec.sets[l].iter().map(|&i| sbar[i - 1][a]).product();
            let x_in: f64 = inner.iter().map(|&i| xi[i - 1][a]).product();
            let s_out: f64 = outer.iter().map(|&i| sbar[i - 1][a]).product();
            left.push(v[a] * s_all);
            right.push(vt[a] * x_in * s_out);
        }
        lhs *= stats::pairwise_sum(&left);
        rhs *= stats::pairwise_sum(&right);
    }
    if !(lhs.is_finite() && rhs.is_finite()) {
        return Err(Error::NonFinite { op: "cavity_residual" });
    }
    Ok((lhs, rhs))
}

/// Common-random-number estimate of both sides over `n_samples` truncated
/// cascades; sample `i` uses its own stream.
pub fn cavity_residual(spec: &CavitySpec, n_samples: usize, seed: u64) -> Result<CavityResult> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::param("n_samples", "must be positive"));
    }
    let draws: Vec<(f64, f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, tags::CAVITY, i as u64);
            let c = TruncatedCascade::build(&spec.params, spec.branching, &mut rng)?;
            let (l, r) = cavity_sides_on(spec, &c, &mut rng)?;
            Ok((l, r, c.untracked_mass()))
        })
        .collect::<Result<_>>()?;
    let lhs: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let rhs: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let diff: Vec<f64> = draws.iter().map(|d| d.0 - d.1).collect();
    let lost: Vec<f64> = draws.iter().map(|d| d.2).collect();
    Ok(CavityResult {
        lhs: Estimate::from_samples(&lhs),
        rhs: Estimate::from_samples(&rhs),
        residual: Estimate::from_samples(&diff),
        n_samples,
        truncation_budget: stats::mean(&lost),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sets: Vec<Vec<usize>>, lambda: f64, h: OrderParamH) -> CavitySpec {
        CavitySpec {
            n: 2,
            m: 3,
            sets,
            model: ClauseModel::ksat(2, 1.0).unwrap(),
            lambda,
            perturbation: None,
            h,
            params: CascadeParams::new(vec![0.5]).unwrap(),
            branching: 20,
            omega_star: None,
            poisson_cap: None,
        }
    }

    #[test]
    fn empty_sets_give_one() {
        let h = OrderParamH::from_fn(1, 4, |w| w[0] - 0.5).unwrap();
        let r = cavity_residual(&spec(vec![vec![], vec![]], 1.0, h), 50, 1).unwrap();
        assert_eq!(r.lhs.value, 1.0);
        assert_eq!(r.rhs.value, 1.0);
        assert_eq!(r.residual.value, 0.0);
        assert_eq!(r.residual.std_error, 0.0);
    }

    #[test]
    fn trivial_measure_has_zero_residual() {
        let h = OrderParamH::constant(1, 0.0).unwrap();
        let r = cavity_residual(&spec(vec![vec![1, 3], vec![2]], 0.0, h), 50, 2).unwrap();
        assert_eq!(r.lhs.value, 0.0);
        assert_eq!(r.rhs.value, 0.0);
        assert_eq!(r.residual.value, 0.0);
    }

    #[test]
    fn xi_is_bounded() {
        let h = OrderParamH::from_fn(1, 4, |w| 2.0 * w[0] - 1.0).unwrap();
        let s = spec(vec![vec![1]], 3.0, h);
        let mut rng = rng::stream(3, tags::CAVITY, 0);
        for _ in 0..50 {
            let a = cavity_field_a_i(&s, &mut rng).unwrap();
            assert!(a.xi().iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn rejects_bad_sets() {
        let h = OrderParamH::constant(1, 0.0).unwrap();
        assert!(spec(vec![vec![4]], 0.0, h.clone()).validate().is_err());
        assert!(spec(vec![vec![1, 1]], 0.0, h).validate().is_err());
    }
}
