//! Monte Carlo evaluation of the Mézard-Parisi functional and the cascade
//! machinery around it: the recursion `X_p`, the changes of density `W_p`,
//! tilted weights and the tilt-and-resort invariance test.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{self, CascadeParams, TruncatedCascade};
use crate::clauses::ClauseModel;
use crate::error::{Error, Result};
use crate::fields::{FieldSampler, OrderParamH};
use crate::rng::{self, tags};
use crate::stats::{self, Estimate};

pub const DEFAULT_D_MAX: usize = 12;

/// Perturbation terms `θ^d` added to the cavity fields, with the `d`-series
/// cut at `d_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub eps_pert: f64,
    #[serde(default = "default_d_max")]
    pub d_max: usize,
}

fn default_d_max() -> usize {
    DEFAULT_D_MAX
}

impl Perturbation {
    pub fn new(eps_pert: f64) -> Self {
        Perturbation {
            eps_pert,
            d_max: DEFAULT_D_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_pert >= 0.0 && self.eps_pert.is_finite()) {
            return Err(Error::param("eps_pert", "must be finite and nonnegative"));
        }
        if self.d_max < 1 {
            return Err(Error::param("d_max", "must be at least 1"));
        }
        Ok(())
    }

    /// Bound on the expected absolute contribution of the dropped terms,
    /// `Σ_{d > d_max} d · E|g^d|`.
    pub fn tail_bound(&self) -> f64 {
        let mut total = 0.0;
        for d in self.d_max + 1..self.d_max + 400 {
            let sd = (self.eps_pert * 0.5f64.powi(d as i32)).sqrt();
            let term = d as f64 * (2.0 / PI).sqrt() * sd;
            total += term;
            if term < 1e-18 * total.max(1e-300) {
                break;
            }
        }
        total
    }

    fn model(&self, d: usize) -> Result<ClauseModel> {
        ClauseModel::pert(d, self.eps_pert)
    }
}

/// Leaf values of `A_α(ε)` for `ε = ±1`, with term counts.
#[derive(Clone, Debug)]
pub struct CavityField {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    pub model_terms: usize,
    pub pert_terms: usize,
}

impl CavityField {
    /// `log Av exp A_α(ε)` per leaf.
    pub fn log_av(&self) -> Vec<f64> {
        self.plus
            .iter()
            .zip(&self.minus)
            .map(|(&p, &m)| {
                if p == 0.0 && m == 0.0 {
                    0.0
                } else {
                    stats::log_add_exp(p, m) - LN_2
                }
            })
            .collect()
    }

    /// `ξ_α = Av ε exp A_α(ε) / Av exp A_α(ε) = tanh((A(+) - A(-))/2)`.
    pub fn xi(&self) -> Vec<f64> {
        self.plus
            .iter()
            .zip(&self.minus)
            .map(|(&p, &m)| ((p - m) / 2.0).tanh())
            .collect()
    }
}

/// Leaf values of `B_α` with term counts.
#[derive(Clone, Debug)]
pub struct BField {
    pub values: Vec<f64>,
    pub model_terms: usize,
    pub pert_terms: usize,
}

struct Buffers {
    copies: Vec<Vec<f64>>,
    x: Vec<f64>,
}

impl Buffers {
    fn new() -> Self {
        Buffers {
            copies: Vec::new(),
            x: Vec::new(),
        }
    }

    fn fill<R: Rng + ?Sized>(&mut self, sampler: &FieldSampler, k: usize, rng: &mut R) {
        let n = sampler.n_leaves();
        while self.copies.len() < k {
            self.copies.push(vec![0.0; n]);
        }
        for c in &mut self.copies[..k] {
            sampler.fill(rng, c);
        }
    }
}

fn add_cavity_clause<R: Rng + ?Sized>(
    model: &ClauseModel,
    sampler: &FieldSampler,
    buf: &mut Buffers,
    out: &mut CavityField,
    rng: &mut R,
) {
    let inst = model.sample(rng);
    let k = model.arity() - 1;
    buf.fill(sampler, k, rng);
    for leaf in 0..out.plus.len() {
        buf.x.clear();
        buf.x.extend(buf.copies[..k].iter().map(|c| c[leaf]));
        let (p, m) = inst.log_exp_theta_cavity(&buf.x);
        out.plus[leaf] += p;
        out.minus[leaf] += m;
    }
}

fn add_full_clause<R: Rng + ?Sized>(
    model: &ClauseModel,
    sampler: &FieldSampler,
    buf: &mut Buffers,
    out: &mut [f64],
    rng: &mut R,
) {
    let inst = model.sample(rng);
    let k = model.arity();
    buf.fill(sampler, k, rng);
    for (leaf, slot) in out.iter_mut().enumerate() {
        buf.x.clear();
        buf.x.extend(buf.copies[..k].iter().map(|c| c[leaf]));
        *slot += inst.log_exp_theta_unchecked(&buf.x);
    }
}

/// Draws `A_α(ε)` on every leaf: `Poisson(λK)` model clauses on `K-1` fresh
/// field copies each, plus the perturbation terms when requested.
pub fn sample_a_alpha<R: Rng + ?Sized>(
    sampler: &FieldSampler,
    model: &ClauseModel,
    lambda: f64,
    perturbation: Option<&Perturbation>,
    rng: &mut R,
) -> Result<CavityField> {
    sample_a_alpha_capped(sampler, model, lambda, perturbation, None, rng)
}

/// [`sample_a_alpha`] with every Poisson count replaced by `min(π, cap)`.
pub fn sample_a_alpha_capped<R: Rng + ?Sized>(
    sampler: &FieldSampler,
    model: &ClauseModel,
    lambda: f64,
    perturbation: Option<&Perturbation>,
    cap: Option<usize>,
    rng: &mut R,
) -> Result<CavityField> {
    let count = |mean: f64, rng: &mut R| {
        let k = stats::poisson(mean, rng);
        cap.map_or(k, |c| k.min(c))
    };
    let n = sampler.n_leaves();
    let mut out = CavityField {
        plus: vec![0.0; n],
        minus: vec![0.0; n],
        model_terms: 0,
        pert_terms: 0,
    };
    let mut buf = Buffers::new();
    let k = model.arity();
    out.model_terms = count(lambda * k as f64, rng);
    for _ in 0..out.model_terms {
        add_cavity_clause(model, sampler, &mut buf, &mut out, rng);
    }
    if let Some(pert) = perturbation {
        add_cavity_clause(&pert.model(1)?, sampler, &mut buf, &mut out, rng);
        out.pert_terms += 1;
        for d in 2..=pert.d_max {
            let pm = pert.model(d)?;
            let c = count(d as f64, rng);
            for _ in 0..c {
                add_cavity_clause(&pm, sampler, &mut buf, &mut out, rng);
            }
            out.pert_terms += c;
        }
    }
    Ok(out)
}

/// Draws `B_α` on every leaf: `Poisson(λ(K-1))` model clauses on `K` fresh
/// field copies each, plus `Poisson(d-1)` perturbation clauses of each
/// order `d ≥ 2` when requested.
pub fn sample_b_alpha<R: Rng + ?Sized>(
    sampler: &FieldSampler,
    model: &ClauseModel,
    lambda: f64,
    perturbation: Option<&Perturbation>,
    rng: &mut R,
) -> Result<BField> {
    let n = sampler.n_leaves();
    let mut out = BField {
        values: vec![0.0; n],
        model_terms: 0,
        pert_terms: 0,
    };
    let mut buf = Buffers::new();
    let k = model.arity();
    out.model_terms = stats::poisson(lambda * (k as f64 - 1.0), rng);
    for _ in 0..out.model_terms {
        add_full_clause(model, sampler, &mut buf, &mut out.values, rng);
    }
    if let Some(pert) = perturbation {
        for d in 2..=pert.d_max {
            let pm = pert.model(d)?;
            let count = stats::poisson(d as f64 - 1.0, rng);
            for _ in 0..count {
                add_full_clause(&pm, sampler, &mut buf, &mut out.values, rng);
            }
            out.pert_terms += count;
        }
    }
    Ok(out)
}

/// Everything that defines one point `(r, ζ, h)` of the functional together
/// with the model and the Monte Carlo truncation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpSpec {
    pub params: CascadeParams,
    pub h: OrderParamH,
    pub model: ClauseModel,
    pub lambda: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
    /// Frozen `ω_*` for order parameters carrying that coordinate.
    #[serde(default)]
    pub omega_star: Option<f64>,
}

impl MpSpec {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.h.validate()?;
        self.model.validate()?;
        if self.h.r != self.params.depth() {
            return Err(Error::DimensionMismatch {
                expected: self.params.depth(),
                got: self.h.r,
            });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", "must be finite and nonnegative"));
        }
        if self.m == 0 {
            return Err(Error::param("M", "branching must be at least 1"));
        }
        if let Some(p) = &self.perturbation {
            p.validate()?;
        }
        FieldSampler::new(&self.h, self.m, self.omega_star)?;
        Ok(())
    }
}

/// A Monte Carlo value of the functional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub truncation_budget: f64,
    #[serde(default)]
    pub d_max: Option<usize>,
    #[serde(default)]
    pub pert_tail_bound: f64,
}

impl FunctionalEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.value,
            std_error: self.std_error,
            n: self.n,
        }
    }
}

/// One draw of `log 2 + log Σ v_α Av exp A_α(ε) - log Σ v_α exp B_α` on a
/// given cascade.
pub fn p_sample_on<R: Rng + ?Sized>(
    spec: &MpSpec,
    cascade: &TruncatedCascade,
    rng: &mut R,
) -> Result<f64> {
    let sampler = FieldSampler::new(&spec.h, spec.m, spec.omega_star)?;
    let pert = spec.perturbation.as_ref();
    let a = sample_a_alpha(&sampler, &spec.model, spec.lambda, pert, rng)?;
    let b = sample_b_alpha(&sampler, &spec.model, spec.lambda, pert, rng)?;
    let log_v = cascade.log_leaf_weights();
    // Both sums are taken relative to log Σ v, computed the same way, so a
    // side with all-zero exponents contributes exactly 0 and not a rounding
    // residue of the weight normalization.
    let log_norm = {
        let mut acc = stats::LogSumExp::default();
        log_v.iter().for_each(|&lv| acc.push(lv));
        acc.value()
    };
    let first = if a.model_terms + a.pert_terms == 0 {
        0.0
    } else {
        let mut acc = stats::LogSumExp::default();
        for (lv, la) in log_v.iter().zip(a.log_av()) {
            acc.push(lv + la);
        }
        acc.value() - log_norm
    };
    let second = if b.model_terms + b.pert_terms == 0 {
        0.0
    } else {
        let mut acc = stats::LogSumExp::default();
        for (lv, lb) in log_v.iter().zip(&b.values) {
            acc.push(lv + lb);
        }
        acc.value() - log_norm
    };
    let value = LN_2 + first - second;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "estimate_P" });
    }
    Ok(value)
}

/// Per-sample values and untracked masses of `n` independent draws of
/// (cascade, fields, disorder). Sample `i` uses stream `i`.
pub fn p_samples(spec: &MpSpec, n: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    spec.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, tags::MP_SAMPLE, i as u64);
            let c = TruncatedCascade::build(&spec.params, spec.m, &mut rng)?;
            let v = p_sample_on(spec, &c, &mut rng)?;
            Ok((v, c.untracked_mass()))
        })
        .collect()
}

/// Estimates `𝒫(r, ζ, h)` from `n` independent samples.
pub fn estimate_p(spec: &MpSpec, n: usize, seed: u64) -> Result<FunctionalEstimate> {
    if n == 0 {
        return Err(Error::param("n_samples", "must be positive"));
    }
    let samples = p_samples(spec, n, seed)?;
    let values: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let lost: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let est = Estimate::from_samples(&values);
    Ok(FunctionalEstimate {
        value: est.value,
        std_error: est.std_error,
        n,
        m: spec.m,
        truncation_budget: stats::mean(&lost),
        d_max: spec.perturbation.map(|p| p.d_max),
        pert_tail_bound: spec.perturbation.map_or(0.0, |p| p.tail_bound()),
    })
}

/// Replaces the average over `ω_*` by the infimum. Since `h` is constant on
/// grid cells, the cell midpoints cover every distinct value. All cells are
/// evaluated with the same seed.
pub fn estimate_p_inf_omega_star(
    spec: &MpSpec,
    n: usize,
    seed: u64,
) -> Result<(f64, FunctionalEstimate)> {
    if !spec.h.omega_star_coordinate {
        return Err(Error::param(
            "h",
            "the order parameter has no ω_* coordinate",
        ));
    }
    let g = spec.h.g;
    let mut best: Option<(f64, FunctionalEstimate)> = None;
    for c in 0..g {
        let w = (c as f64 + 0.5) / g as f64;
        let mut s = spec.clone();
        s.omega_star = Some(w);
        let est = estimate_p(&s, n, seed)?;
        if best.as_ref().is_none_or(|(_, b)| est.value < b.value) {
            best = Some((w, est));
        }
    }
    Ok(best.expect("grid has at least one cell"))
}

/// Law of the scalar variable `z` attached to each vertex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZLaw {
    /// Finitely many atoms.
    Discrete { values: Vec<f64>, probs: Vec<f64> },
    /// Uniform on `[0,1]`, integrated by Gauss-Legendre quadrature.
    Uniform,
}

impl ZLaw {
    pub fn validate(&self) -> Result<()> {
        if let ZLaw::Discrete { values, probs } = self {
            if values.is_empty() || values.len() != probs.len() {
                return Err(Error::param("law", "values and probs must be nonempty and equal length"));
            }
            if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::param("law", "probs must be nonnegative and sum to 1"));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ZLaw::Uniform => rng.random(),
            ZLaw::Discrete { values, probs } => values[pick(probs, rng)],
        }
    }

    fn sup_abs(&self) -> f64 {
        match self {
            ZLaw::Uniform => 1.0,
            ZLaw::Discrete { values, .. } => values.iter().fold(0.0, |a, v| a.max(v.abs())),
        }
    }

    /// Nodes and log-weights of the expectation rule.
    fn rule(&self, nodes: usize) -> (Vec<f64>, Vec<f64>) {
        match self {
            ZLaw::Uniform => {
                let (x, w) = stats::gauss_legendre(nodes, 0.0, 1.0);
                (x, w.iter().map(|w| w.ln()).collect())
            }
            ZLaw::Discrete { values, probs } => {
                (values.clone(), probs.iter().map(|p| p.ln()).collect())
            }
        }
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (j, &w) in weights.iter().enumerate() {
        if u < w {
            return j;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Terminal function `X_r(z_1, …, z_r) = Σ_t c_t Π_p z_p^{e_tp}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyTerminal {
    pub terms: Vec<PolyTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub coef: f64,
    pub powers: Vec<u32>,
}

impl PolyTerminal {
    pub fn constant(c: f64) -> Self {
        PolyTerminal {
            terms: vec![PolyTerm {
                coef: c,
                powers: vec![],
            }],
        }
    }

    /// `Σ_p w_p z_p`.
    pub fn linear(weights: &[f64]) -> Self {
        PolyTerminal {
            terms: weights
                .iter()
                .enumerate()
                .map(|(p, &w)| {
                    let mut powers = vec![0; p + 1];
                    powers[p] = 1;
                    PolyTerm { coef: w, powers }
                })
                .collect(),
        }
    }

    pub fn term(mut self, coef: f64, powers: Vec<u32>) -> Self {
        self.terms.push(PolyTerm { coef, powers });
        self
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.coef
                    * t.powers
                        .iter()
                        .zip(z)
                        .map(|(&e, &x)| x.powi(e as i32))
                        .product::<f64>()
            })
            .sum()
    }

    fn bound(&self, sup_z: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let deg: u32 = t.powers.iter().sum();
                t.coef.abs() * sup_z.powi(deg as i32)
            })
            .sum()
    }

    fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.coef == 0.0 || t.powers.iter().all(|&e| e == 0))
    }
}

pub const DEFAULT_QUADRATURE_NODES: usize = 48;

/// Parameters of the recursion `X_p(x) = ζ_p^{-1} log E_z exp ζ_p X_{p+1}(x, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionSpec {
    pub zetas: Vec<f64>,
    pub law: ZLaw,
    pub terminal: PolyTerminal,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
}

fn default_nodes() -> usize {
    DEFAULT_QUADRATURE_NODES
}

/// `X_0` with an error estimate from halving the quadrature rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionValue {
    pub x0: f64,
    pub error: f64,
}

impl RecursionSpec {
    pub fn new(zetas: Vec<f64>, law: ZLaw, terminal: PolyTerminal) -> Self {
        RecursionSpec {
            zetas,
            law,
            terminal,
            nodes: DEFAULT_QUADRATURE_NODES,
        }
    }

    pub fn depth(&self) -> usize {
        self.zetas.len()
    }

    pub fn validate(&self) -> Result<()> {
        CascadeParams::new(self.zetas.clone())?;
        self.law.validate()?;
        if self.nodes < 2 {
            return Err(Error::param("nodes", "need at least 2 quadrature nodes"));
        }
        if self.terminal.terms.iter().any(|t| t.powers.len() > self.depth()) {
            return Err(Error::param("terminal", "a term uses more coordinates than the depth"));
        }
        Ok(())
    }

    /// `sup |X_r|`.
    pub fn bound(&self) -> f64 {
        self.terminal.bound(self.law.sup_abs())
    }

    /// Upper bound on `sup X_r - inf X_r` over the support of the law: exact
    /// enumeration for discrete laws, a grid plus a Lipschitz margin for the
    /// uniform law.
    pub fn oscillation(&self) -> f64 {
        let r = self.depth();
        let (points, margin) = match &self.law {
            ZLaw::Discrete { values, .. } => (values.clone(), 0.0),
            ZLaw::Uniform => {
                let k = 32;
                let lip: f64 = self
                    .terminal
                    .terms
                    .iter()
                    .map(|t| t.coef.abs() * t.powers.iter().sum::<u32>() as f64)
                    .sum();
                (
                    (0..=k).map(|i| i as f64 / k as f64).collect(),
                    lip / k as f64,
                )
            }
        };
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut z = vec![0.0; r];
        let total = points.len().pow(r as u32);
        for mut idx in 0..total {
            for slot in z.iter_mut() {
                *slot = points[idx % points.len()];
                idx /= points.len();
            }
            let x = self.terminal.eval(&z);
            lo = lo.min(x);
            hi = hi.max(x);
        }
        (hi - lo + margin).min(2.0 * self.bound())
    }

    fn x_with(&self, prefix: &mut Vec<f64>, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
        let p = prefix.len();
        if p == self.depth() {
            return self.terminal.eval(prefix);
        }
        let zeta = self.zetas[p];
        let mut acc = stats::LogSumExp::default();
        for (&z, &lw) in rule.0.iter().zip(&rule.1) {
            prefix.push(z);
            acc.push(lw + zeta * self.x_with(prefix, rule));
            prefix.pop();
        }
        acc.value() / zeta
    }

    /// `X_p` at the prefix `(z_1, …, z_p)`.
    pub fn x_at(&self, prefix: &[f64]) -> f64 {
        let rule = self.law.rule(self.nodes);
        self.x_with(&mut prefix.to_vec(), &rule)
    }

    pub fn x0(&self) -> Result<RecursionValue> {
        self.validate()?;
        if self.terminal.is_constant() {
            return Ok(RecursionValue {
                x0: self.terminal.eval(&[]),
                error: 0.0,
            });
        }
        let x0 = self.x_at(&[]);
        let error = match self.law {
            ZLaw::Discrete { .. } => 0.0,
            ZLaw::Uniform => {
                let coarse = RecursionSpec {
                    nodes: self.nodes / 2,
                    ..self.clone()
                };
                (x0 - coarse.x_at(&[])).abs()
            }
        };
        Ok(RecursionValue { x0, error })
    }

    /// `W_p(x, y) = exp ζ_p (X_{p+1}(x, y) - X_p(x))`.
    pub fn w(&self, x: &[f64], y: f64) -> f64 {
        let p = x.len();
        let mut xy = x.to_vec();
        xy.push(y);
        (self.zetas[p] * (self.x_at(&xy) - self.x_at(x))).exp()
    }

    /// One draw from `ν_p(x, ·)`, the law of `z` reweighted by `W_p(x, ·)`.
    pub fn sample_nu<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> f64 {
        let p = x.len();
        let zeta = self.zetas[p];
        let rule = self.law.rule(self.nodes);
        let mut xy = x.to_vec();
        match &self.law {
            ZLaw::Discrete { values, probs } => {
                let w: Vec<f64> = values
                    .iter()
                    .zip(probs)
                    .map(|(&v, &pr)| {
                        xy.truncate(p);
                        xy.push(v);
                        pr * (zeta * self.x_with(&mut xy, &rule)).exp()
                    })
                    .collect();
                values[pick(&w, rng)]
            }
            ZLaw::Uniform => {
                // Accept with probability exp ζ (X_{p+1} - B) ≤ 1.
                let b = self.bound();
                loop {
                    let z: f64 = rng.random();
                    xy.truncate(p);
                    xy.push(z);
                    let accept = (zeta * (self.x_with(&mut xy, &rule) - b)).exp();
                    if rng.random::<f64>() < accept {
                        return z;
                    }
                }
            }
        }
    }

    /// The array `z̃` on an `m`-ary tree, generated from the root with the
    /// conditional laws `ν_p`. `out[p-1]` holds the `m^p` values of level `p`.
    pub fn sample_nu_array<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let r = self.depth();
        let mut levels: Vec<Vec<f64>> = Vec::with_capacity(r);
        for p in 0..r {
            let mut next = Vec::with_capacity(m.pow(p as u32 + 1));
            for parent in 0..m.pow(p as u32) {
                let prefix = path_values(&levels, parent, m);
                for _ in 0..m {
                    next.push(self.sample_nu(&prefix, rng));
                }
            }
            levels.push(next);
        }
        levels
    }
}

/// Values along the path to vertex `index` of level `levels.len()`.
fn path_values(levels: &[Vec<f64>], index: usize, m: usize) -> Vec<f64> {
    let depth = levels.len();
    (0..depth)
        .map(|p| levels[p][index / m.pow((depth - p - 1) as u32)])
        .collect()
}

/// I.i.d. draws of `z` on every non-root vertex of an `m`-ary depth-`r` tree.
pub fn sample_z_tree<R: Rng + ?Sized>(law: &ZLaw, r: usize, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (1..=r)
        .map(|p| (0..m.pow(p as u32)).map(|_| law.sample(rng)).collect())
        .collect()
}

/// `X_r` evaluated on the path of every leaf.
pub fn terminal_on_leaves(spec: &RecursionSpec, z: &[Vec<f64>], m: usize) -> Vec<f64> {
    let r = z.len();
    let n = m.pow(r as u32);
    (0..n)
        .map(|leaf| spec.terminal.eval(&path_values(z, leaf, m)))
        .collect()
}

/// Outcome of the averaging identity `E log Σ v_α exp X_r = X_0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub estimate: Estimate,
    pub x0: RecursionValue,
    pub residual: f64,
    pub std_error: f64,
    pub truncation_budget: f64,
}

impl IdentityCheck {
    pub fn passes(&self, n_se: f64) -> bool {
        self.residual.abs() <= n_se * self.std_error + self.truncation_budget + self.x0.error
    }
}

/// Estimates `E log Σ_α v_α exp X_r((z_β)_{β ⪯ α}) - X_0` over an ensemble.
///
/// Dropping mass `δ` from a cascade moves `log Σ v e^X` by at most
/// `log(1 + δ (e^{osc} - 1))` with `osc = sup X_r - inf X_r`; the budget averages this
/// over the ensemble using each cascade's untracked-mass estimate.
pub fn rpc_average_identity_check(
    spec: &RecursionSpec,
    ensemble: &cascade::CascadeEnsemble,
) -> Result<IdentityCheck> {
    spec.validate()?;
    if spec.zetas != ensemble.params.zetas {
        return Err(Error::param("zetas", "recursion and cascade must share ζ"));
    }
    let x0 = spec.x0()?;
    let m = ensemble.m;
    let r = spec.depth();
    if spec.terminal.is_constant() {
        return Ok(IdentityCheck {
            estimate: Estimate::exact(x0.x0),
            x0,
            residual: 0.0,
            std_error: 0.0,
            truncation_budget: 0.0,
        });
    }
    let growth = spec.oscillation().exp_m1();
    let draws: Vec<(f64, f64)> = ensemble.par_map(|i, c| {
        let mut rng = rng::stream(ensemble.seed, tags::IDENTITY, i as u64);
        let z = sample_z_tree(&spec.law, r, m, &mut rng);
        let x = terminal_on_leaves(spec, &z, m);
        let mut acc = stats::LogSumExp::default();
        for (lv, xv) in c.log_leaf_weights().iter().zip(&x) {
            acc.push(lv + xv);
        }
        (acc.value(), (c.untracked_mass() * growth).ln_1p())
    })?;
    let values: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let budgets: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let estimate = Estimate::from_samples(&values);
    Ok(IdentityCheck {
        estimate,
        x0,
        residual: estimate.value - x0.x0,
        std_error: estimate.std_error,
        truncation_budget: stats::mean(&budgets),
    })
}

/// Cascade weights tilted by `exp X_r` and re-sorted, with the bijection
/// `ρ` that sends a new sorted position to the previous one.
#[derive(Clone, Debug)]
pub struct Tilted {
    m: usize,
    /// `weights[p][s]`: tilted, re-sorted weight of vertex `s` of level `p`.
    pub weights: Vec<Vec<f64>>,
    /// `rho[p][s]`: sorted index, before tilting, of the vertex now at `s`.
    pub rho: Vec<Vec<usize>>,
    pub identity: bool,
}

impl Tilted {
    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn leaf_weights(&self) -> &[f64] {
        &self.weights[self.depth()]
    }

    /// `values[ρ(s)]` for every vertex `s` of level `p`.
    pub fn permute(&self, p: usize, values: &[f64]) -> Vec<f64> {
        self.rho[p].iter().map(|&o| values[o]).collect()
    }

    /// Children of a vertex are mapped to children of its image.
    pub fn preserves_parent_child(&self) -> bool {
        let m = self.m;
        (1..self.rho.len()).all(|p| {
            self.rho[p]
                .iter()
                .enumerate()
                .all(|(s, &o)| o / m == self.rho[p - 1][s / m])
        })
    }

    /// `ρ` on a leaf path.
    pub fn rho_path(&self, alpha: &cascade::VertexPath) -> cascade::VertexPath {
        let r = self.depth();
        let flat = alpha.flat_index(self.m);
        cascade::VertexPath::from_flat(alpha.len(), self.rho[alpha.len().min(r)][flat], self.m)
    }
}

/// `Ṽ_α ∝ V_α exp x_α` on sorted leaf labels, then re-sorted.
pub fn tilt_and_resort(c: &TruncatedCascade, x: &[f64]) -> Result<Tilted> {
    let r = c.depth();
    let m = c.branching();
    if x.len() != c.n_leaves() {
        return Err(Error::DimensionMismatch {
            expected: c.n_leaves(),
            got: x.len(),
        });
    }
    if x.iter().all(|&v| v == x[0]) {
        let weights: Vec<Vec<f64>> = (0..=r).map(|p| c.sorted_cluster_weights(p).to_vec()).collect();
        let rho = weights.iter().map(|l| (0..l.len()).collect()).collect();
        return Ok(Tilted {
            m,
            weights,
            rho,
            identity: true,
        });
    }
    let mut log_t: Vec<f64> = c
        .sorted_log_leaf_weights()
        .iter()
        .zip(x)
        .map(|(lv, xv)| lv + xv)
        .collect();
    let norm = stats::log_sum_exp(&log_t);
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "tilt_and_resort" });
    }
    log_t.iter_mut().for_each(|v| *v -= norm);
    let leaf: Vec<f64> = log_t.iter().map(|v| v.exp()).collect();
    let cluster = cascade::cluster_sums(leaf, r, m);
    let rho = cascade::sort_tree(&cluster, m);
    let weights = cascade::permute_levels(&cluster, &rho);
    let identity = rho.iter().all(|l| l.iter().enumerate().all(|(s, &o)| s == o));
    let t = Tilted {
        m,
        weights,
        rho,
        identity,
    };
    debug_assert!(t.preserves_parent_child());
    Ok(t)
}

/// One compared statistic of the invariance test.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatComparison {
    pub name: String,
    pub reference: Estimate,
    pub observed: Estimate,
    pub z: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub n_replicates: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub comparisons: Vec<StatComparison>,
    pub max_z: f64,
    pub all_wedges_preserved: bool,
}

impl InvarianceReport {
    pub fn passes(&self, limit: f64) -> bool {
        self.all_wedges_preserved && self.max_z <= limit
    }
}

const TOP: usize = 5;
const Z_VERTICES: usize = 3;

/// Vertices whose attached variables are compared: the first few children
/// of the root, then the first few children of vertex 1 and of vertex 2 at
/// each deeper level, all in flat sorted labels.
fn probe_vertices(r: usize, m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let k = Z_VERTICES.min(m);
    for s in 0..k {
        out.push((1, s));
    }
    for p in 2..=r {
        // (1,…,1,1), (1,…,1,2) and (1,…,2,1)
        for s in 0..k.min(2) {
            out.push((p, s));
        }
        if m > 1 {
            out.push((p, m));
        }
    }
    out
}

/// Summary of one cascade for the weight-law comparison.
fn weight_summary(levels: &[Vec<f64>], m: usize) -> Vec<f64> {
    let r = levels.len() - 1;
    let mut out = Vec::new();
    // Top children of vertex 1 along the leftmost chain, level by level.
    for p in 1..=r {
        out.extend((0..TOP.min(m)).map(|j| levels[p][j]));
    }
    for p in 0..r {
        out.push(1.0 - levels[p + 1].iter().map(|v| v * v).sum::<f64>());
    }
    out
}

fn weight_names(r: usize, m: usize) -> Vec<String> {
    let mut out = Vec::new();
    for p in 1..=r {
        for j in 0..TOP.min(m) {
            let mut path = vec!["1".to_string(); p - 1];
            path.push((j + 1).to_string());
            out.push(format!("V({})", path.join(",")));
        }
    }
    for p in 0..r {
        out.push(format!("P(wedge<={p})"));
    }
    out
}

fn vertex_name(p: usize, s: usize, m: usize) -> String {
    cascade::VertexPath::from_flat(p, s, m).to_string()
}

fn compare(name: String, reference: &[f64], observed: &[f64]) -> StatComparison {
    let a = Estimate::from_samples(reference);
    let b = Estimate::from_samples(observed);
    StatComparison {
        name,
        z: a.z_score(&b),
        reference: a,
        observed: b,
    }
}

/// Checks the tilt-and-resort invariance statistically.
///
/// Three ensembles of `n` replicates are built: plain cascades; cascades
/// with i.i.d. `z` tilted by `exp X_r` and re-sorted; and arrays `z̃`
/// generated with the changes of density `ν_p`. The re-sorted weights are
/// compared with the plain ones, the permuted `z_{ρ(α)}` with `z̃_α`, and
/// the top re-sorted weight is tested for correlation with `z_{ρ(1)}`.
pub fn invariance_test(
    spec: &RecursionSpec,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    spec.validate()?;
    if n < 2 {
        return Err(Error::param("n_replicates", "need at least 2"));
    }
    let params = CascadeParams::new(spec.zetas.clone())?;
    let r = spec.depth();
    let probes = probe_vertices(r, m);

    let plain: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, tags::INVARIANCE_PLAIN, i as u64);
            let c = TruncatedCascade::build(&params, m, &mut rng)?;
            let levels: Vec<Vec<f64>> = (0..=r).map(|p| c.sorted_cluster_weights(p).to_vec()).collect();
            Ok(weight_summary(&levels, m))
        })
        .collect::<Result<_>>()?;

    struct TiltDraw {
        weights: Vec<f64>,
        z: Vec<f64>,
        top: f64,
        wedges: bool,
    }
    let tilted: Vec<TiltDraw> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, tags::INVARIANCE_TILTED, i as u64);
            let c = TruncatedCascade::build(&params, m, &mut rng)?;
            let z = sample_z_tree(&spec.law, r, m, &mut rng);
            let x = terminal_on_leaves(spec, &z, m);
            let t = tilt_and_resort(&c, &x)?;
            let zp: Vec<Vec<f64>> = (1..=r).map(|p| t.permute(p, &z[p - 1])).collect();
            Ok(TiltDraw {
                weights: weight_summary(&t.weights, m),
                z: probes.iter().map(|&(p, s)| zp[p - 1][s]).collect(),
                top: t.weights[1][0],
                wedges: t.preserves_parent_child(),
            })
        })
        .collect::<Result<_>>()?;

    // ν-generated arrays only need the probed vertices, whose law does not
    // depend on the branching; a small tree suffices.
    let m_nu = (Z_VERTICES + 1).min(m).max(2.min(m));
    let nu_probes = probe_vertices(r, m_nu);
    let nu: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, tags::INVARIANCE_NU, i as u64);
            let a = spec.sample_nu_array(m_nu, &mut rng);
            nu_probes.iter().map(|&(p, s)| a[p - 1][s]).collect()
        })
        .collect();

    let mut comparisons = Vec::new();
    for (k, name) in weight_names(r, m).into_iter().enumerate() {
        let a: Vec<f64> = plain.iter().map(|w| w[k]).collect();
        let b: Vec<f64> = tilted.iter().map(|d| d.weights[k]).collect();
        comparisons.push(compare(name, &a, &b));
    }
    for (k, (&(p, s), &(pn, sn))) in probes.iter().zip(&nu_probes).enumerate() {
        let name = vertex_name(p, s, m);
        debug_assert_eq!(name, vertex_name(pn, sn, m_nu));
        for power in [1, 2] {
            let a: Vec<f64> = nu.iter().map(|v| v[k].powi(power)).collect();
            let b: Vec<f64> = tilted.iter().map(|d| d.z[k].powi(power)).collect();
            comparisons.push(compare(format!("E z^{power} at {name}"), &a, &b));
        }
    }
    let tops: Vec<f64> = tilted.iter().map(|d| d.top).collect();
    let z1: Vec<f64> = tilted.iter().map(|d| d.z[0]).collect();
    let corr = stats::correlation(&tops, &z1);
    let se = 1.0 / (n as f64).sqrt();
    comparisons.push(StatComparison {
        name: "corr(top weight, z at (1))".into(),
        reference: Estimate::exact(0.0),
        observed: Estimate {
            value: corr,
            std_error: se,
            n,
        },
        z: stats::z_score(corr, se),
    });
    let max_z = comparisons.iter().fold(0.0f64, |a, c| a.max(c.z));
    Ok(InvarianceReport {
        n_replicates: n,
        m,
        comparisons,
        max_z,
        all_wedges_preserved: tilted.iter().all(|d| d.wedges),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clauses::GDist;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    fn spec(model: ClauseModel, lambda: f64) -> MpSpec {
        MpSpec {
            params: CascadeParams::new(vec![0.4]).unwrap(),
            h: OrderParamH::from_fn(1, 4, |w| 2.0 * w[0] - 1.0).unwrap(),
            model,
            lambda,
            m: 20,
            perturbation: None,
            omega_star: None,
        }
    }

    #[test]
    fn zero_connectivity_gives_log_two_exactly() {
        let s = spec(ClauseModel::ksat(2, 1.0).unwrap(), 0.0);
        let est = estimate_p(&s, 50, 3).unwrap();
        assert_eq!(est.value, LN_2);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn a_and_b_vanish_without_terms() {
        let h = OrderParamH::constant(1, 0.3).unwrap();
        let sampler = FieldSampler::new(&h, 5, None).unwrap();
        let mut rng = StreamRng::seed_from_u64(1);
        let model = ClauseModel::kspin(2, 0.0, GDist::Gaussian).unwrap();
        let a = sample_a_alpha(&sampler, &model, 3.0, None, &mut rng).unwrap();
        assert!(a.plus.iter().chain(&a.minus).all(|&v| v == 0.0));
        let k1 = ClauseModel::ksat(1, 1.0).unwrap();
        let b = sample_b_alpha(&sampler, &k1, 3.0, None, &mut rng).unwrap();
        assert_eq!(b.model_terms, 0);
        assert!(b.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbation_adds_single_spin_term() {
        let h = OrderParamH::constant(1, 0.0).unwrap();
        let sampler = FieldSampler::new(&h, 3, None).unwrap();
        let mut rng = StreamRng::seed_from_u64(2);
        let model = ClauseModel::ksat(2, 1.0).unwrap();
        let p = Perturbation {
            eps_pert: 0.5,
            d_max: 1,
        };
        let a = sample_a_alpha(&sampler, &model, 0.0, Some(&p), &mut rng).unwrap();
        assert_eq!(a.pert_terms, 1);
        // θ^1(-1) = 0 and θ^1(+1) = g is shared by every leaf.
        assert!(a.minus.iter().all(|&v| v == 0.0));
        assert!(a.plus.iter().all(|&v| v == a.plus[0]));
    }

    #[test]
    fn tail_bound_decreases_with_cutoff() {
        let a = Perturbation { eps_pert: 0.1, d_max: 4 }.tail_bound();
        let b = Perturbation { eps_pert: 0.1, d_max: 12 }.tail_bound();
        assert!(a > b && b > 0.0);
        assert_eq!(Perturbation { eps_pert: 0.0, d_max: 3 }.tail_bound(), 0.0);
    }

    #[test]
    fn recursion_of_constant_is_constant() {
        let s = RecursionSpec::new(vec![0.3, 0.6], ZLaw::Uniform, PolyTerminal::constant(1.7));
        assert_eq!(s.x0().unwrap().x0, 1.7);
        assert!((s.x_at(&[0.2]) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn two_point_recursion() {
        let law = ZLaw::Discrete {
            values: vec![0.0, 1.0],
            probs: vec![0.5, 0.5],
        };
        let s = RecursionSpec::new(vec![0.5], law, PolyTerminal::linear(&[1.0]));
        let want = 2.0 * ((1.0 + 0.5f64.exp()) / 2.0).ln();
        assert!((s.x0().unwrap().x0 - want).abs() < 1e-14);
    }

    #[test]
    fn recursion_is_translation_equivariant() {
        let base = PolyTerminal::linear(&[0.7, -0.4]).term(1.1, vec![1, 2]);
        let s = RecursionSpec::new(vec![0.3, 0.7], ZLaw::Uniform, base.clone());
        let t = RecursionSpec::new(vec![0.3, 0.7], ZLaw::Uniform, base.term(0.25, vec![]));
        let (a, b) = (s.x0().unwrap().x0, t.x0().unwrap().x0);
        assert!((b - a - 0.25).abs() < 1e-12);
    }

    #[test]
    fn change_of_density_has_unit_mean() {
        let s = RecursionSpec::new(
            vec![0.3, 0.7],
            ZLaw::Uniform,
            PolyTerminal::linear(&[1.0, 1.0]).term(1.0, vec![1, 1]),
        );
        let (x, w) = stats::gauss_legendre(40, 0.0, 1.0);
        let mean: f64 = x.iter().zip(&w).map(|(&y, &wy)| wy * s.w(&[0.4], y)).sum();
        assert!((mean - 1.0).abs() < 1e-10);
    }

    #[test]
    fn constant_tilt_is_identity() {
        let mut rng = StreamRng::seed_from_u64(3);
        let c = TruncatedCascade::build(&CascadeParams::new(vec![0.3, 0.6]).unwrap(), 4, &mut rng).unwrap();
        let t = tilt_and_resort(&c, &vec![2.5; 16]).unwrap();
        assert!(t.identity);
        assert_eq!(t.leaf_weights(), c.sorted_leaf_weights());
    }

    #[test]
    fn tilt_normalizes_and_preserves_wedges() {
        let mut rng = StreamRng::seed_from_u64(4);
        let c = TruncatedCascade::build(&CascadeParams::new(vec![0.3, 0.6]).unwrap(), 5, &mut rng).unwrap();
        let x: Vec<f64> = (0..25).map(|_| 3.0 * rng.random::<f64>()).collect();
        let t = tilt_and_resort(&c, &x).unwrap();
        assert!((t.leaf_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t.preserves_parent_child());
        for _ in 0..200 {
            let a = cascade::VertexPath::from_flat(2, rng.random_range(0..25), 5);
            let b = cascade::VertexPath::from_flat(2, rng.random_range(0..25), 5);
            assert_eq!(
                cascade::wedge(&t.rho_path(&a), &t.rho_path(&b)),
                cascade::wedge(&a, &b)
            );
        }
        for p in 1..=2 {
            for kids in t.weights[p].chunks(5) {
                assert!(kids.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn zero_tilt_invariance_is_exact_in_law() {
        let s = RecursionSpec::new(vec![0.5], ZLaw::Uniform, PolyTerminal::constant(0.0));
        let rep = invariance_test(&s, 30, 400, 9).unwrap();
        assert!(rep.all_wedges_preserved);
        assert!(rep.max_z.is_finite());
    }
}
