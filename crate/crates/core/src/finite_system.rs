//! Finite-size diluted systems: random Hamiltonians with the optional
//! perturbation part, exact and Metropolis free energies, replica sampling,
//! overlaps and the Ghirlanda-Guerra, ultrametricity and positivity
//! diagnostics.

use std::f64::consts::LN_2;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clauses::{ClauseInstance, ClauseModel};
use crate::error::{Error, Result};
use crate::mp_functional::Perturbation;
use crate::rng::{self, tags};
use crate::stats::{self, Estimate};

pub const DEFAULT_ENUMERATION_CAP: usize = 24;

/// Model of a random finite system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    #[serde(rename = "N")]
    pub n: usize,
    pub lambda: f64,
    pub model: ClauseModel,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("N", "must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", "must be finite and nonnegative"));
        }
        self.model.validate()?;
        if let Some(p) = &self.perturbation {
            p.validate()?;
        }
        Ok(())
    }

    /// Instance `i` of the disorder ensemble under `seed`.
    pub fn instance(&self, seed: u64, i: usize) -> Result<HamiltonianInstance> {
        let mut rng = rng::stream(seed, tags::INSTANCE, i as u64);
        sample_instance(self.n, self.lambda, &self.model, self.perturbation.as_ref(), &mut rng)
    }
}

/// One sampled Hamiltonian `H(σ) = Σ θ_k(σ_{i_1}, …)` on `N` spins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianInstance {
    #[serde(rename = "N")]
    pub n: usize,
    pub clauses: Vec<ClauseInstance>,
    #[serde(default)]
    pub pert_clauses: Vec<ClauseInstance>,
    #[serde(default)]
    pub eps_pert: f64,
}

/// Draws `Poisson(λN)` model clauses on uniform variables and, when a
/// perturbation is given, the single-spin terms on every site plus
/// `Poisson(N)` clauses `θ^d` for each `2 ≤ d ≤ d_max`.
pub fn sample_instance<R: Rng + ?Sized>(
    n: usize,
    lambda: f64,
    model: &ClauseModel,
    perturbation: Option<&Perturbation>,
    rng: &mut R,
) -> Result<HamiltonianInstance> {
    if n == 0 {
        return Err(Error::param("N", "must be at least 1"));
    }
    model.validate()?;
    let attach = |m: &ClauseModel, rng: &mut R| {
        let inst = m.sample(rng);
        let vars = (0..m.arity()).map(|_| rng.random_range(0..n)).collect();
        inst.with_vars(vars)
    };
    let count = stats::poisson(lambda * n as f64, rng);
    let clauses = (0..count).map(|_| attach(model, rng)).collect();
    let mut pert_clauses = Vec::new();
    let mut eps_pert = 0.0;
    if let Some(p) = perturbation.filter(|p| p.eps_pert > 0.0) {
        p.validate()?;
        eps_pert = p.eps_pert;
        let one = ClauseModel::pert(1, p.eps_pert)?;
        for i in 0..n {
            pert_clauses.push(one.sample(rng).with_vars(vec![i]));
        }
        for d in 2..=p.d_max {
            let md = ClauseModel::pert(d, p.eps_pert)?;
            for _ in 0..stats::poisson(n as f64, rng) {
                pert_clauses.push(attach(&md, rng));
            }
        }
    }
    Ok(HamiltonianInstance {
        n,
        clauses,
        pert_clauses,
        eps_pert,
    })
}

impl HamiltonianInstance {
    pub fn empty(n: usize) -> Self {
        HamiltonianInstance {
            n,
            clauses: Vec::new(),
            pert_clauses: Vec::new(),
            eps_pert: 0.0,
        }
    }

    pub fn all_clauses(&self) -> impl Iterator<Item = &ClauseInstance> {
        self.clauses.iter().chain(&self.pert_clauses)
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty() && self.pert_clauses.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for c in self.all_clauses() {
            if c.vars.len() != c.arity() {
                return Err(Error::DimensionMismatch {
                    expected: c.arity(),
                    got: c.vars.len(),
                });
            }
            if let Some(&v) = c.vars.iter().find(|&&v| v >= self.n) {
                return Err(Error::param("vars", format!("index {v} out of range for N = {}", self.n)));
            }
        }
        Ok(())
    }

    /// The same Hamiltonian with site `i` renamed `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let map = |c: &ClauseInstance| {
            let vars = c.vars.iter().map(|&v| perm[v]).collect();
            c.clone().with_vars(vars)
        };
        HamiltonianInstance {
            n: self.n,
            clauses: self.clauses.iter().map(map).collect(),
            pert_clauses: self.pert_clauses.iter().map(map).collect(),
            eps_pert: self.eps_pert,
        }
    }

    pub fn energy(&self, sigma: &[i8]) -> f64 {
        let mut buf = Vec::new();
        self.all_clauses().map(|c| clause_value(c, sigma, &mut buf)).sum()
    }

    fn compiled(&self) -> Compiled<'_> {
        let clauses: Vec<&ClauseInstance> = self.all_clauses().collect();
        let mut adj = vec![Vec::new(); self.n];
        for (k, c) in clauses.iter().enumerate() {
            for &v in &c.vars {
                if adj[v].last() != Some(&k) {
                    adj[v].push(k);
                }
            }
        }
        Compiled {
            clauses,
            adj,
            buf: Vec::new(),
        }
    }
}

fn clause_value(c: &ClauseInstance, sigma: &[i8], buf: &mut Vec<i8>) -> f64 {
    buf.clear();
    buf.extend(c.vars.iter().map(|&v| sigma[v]));
    c.theta_corner(buf)
}

/// Clause list with a site-to-clause adjacency for local updates.
struct Compiled<'a> {
    clauses: Vec<&'a ClauseInstance>,
    adj: Vec<Vec<usize>>,
    buf: Vec<i8>,
}

impl Compiled<'_> {
    /// `H(σ with spin i flipped) - H(σ)`; leaves `sigma` unchanged.
    fn flip_delta(&mut self, sigma: &mut [i8], i: usize) -> f64 {
        let before: f64 = self.adj[i]
            .iter()
            .map(|&k| clause_value(self.clauses[k], sigma, &mut self.buf))
            .sum();
        sigma[i] = -sigma[i];
        let after: f64 = self.adj[i]
            .iter()
            .map(|&k| clause_value(self.clauses[k], sigma, &mut self.buf))
            .sum();
        sigma[i] = -sigma[i];
        after - before
    }
}

pub fn spins_from_bits(bits: u64, n: usize) -> Vec<i8> {
    (0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect()
}

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap || n > 40 {
        return Err(Error::EnumerationCap { n, cap });
    }
    Ok(())
}

/// Visits every configuration in Gray-code order with its energy. The
/// configuration is passed as a bit pattern (bit `i` set means `σ_i = +1`).
fn for_each_energy<F: FnMut(u64, f64)>(inst: &HamiltonianInstance, cap: usize, mut f: F) -> Result<()> {
    inst.validate()?;
    check_cap(inst.n, cap)?;
    let n = inst.n;
    let mut c = inst.compiled();
    let mut sigma = vec![-1i8; n];
    let mut h = inst.energy(&sigma);
    let mut bits = 0u64;
    f(bits, h);
    for k in 1..(1u64 << n) {
        let i = k.trailing_zeros() as usize;
        h += c.flip_delta(&mut sigma, i);
        sigma[i] = -sigma[i];
        bits ^= 1 << i;
        f(bits, h);
    }
    Ok(())
}

/// `log Z = log Σ_σ exp H(σ)` by enumeration.
pub fn log_partition(inst: &HamiltonianInstance, cap: usize) -> Result<f64> {
    if inst.is_empty() {
        check_cap(inst.n, cap)?;
        return Ok(inst.n as f64 * LN_2);
    }
    let mut acc = stats::LogSumExp::default();
    for_each_energy(inst, cap, |_, h| acc.push(h))?;
    Ok(acc.value())
}

/// How free energies and replicas are computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Exact {
        #[serde(default = "default_cap")]
        cap: usize,
    },
    Mcmc(McmcConfig),
}

fn default_cap() -> usize {
    DEFAULT_ENUMERATION_CAP
}

impl Default for Method {
    fn default() -> Self {
        Method::Exact {
            cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    /// Independent chains; their spread gives the standard errors.
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Recorded samples per chain.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Gauss-Legendre nodes of the thermodynamic integration.
    #[serde(default = "default_ti_nodes")]
    pub ti_nodes: usize,
}

fn default_burn_in() -> usize {
    100
}
fn default_thin() -> usize {
    10
}
fn default_chains() -> usize {
    16
}
fn default_samples() -> usize {
    200
}
fn default_ti_nodes() -> usize {
    12
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burn_in: default_burn_in(),
            thin: default_thin(),
            chains: default_chains(),
            samples: default_samples(),
            ti_nodes: default_ti_nodes(),
        }
    }
}

impl McmcConfig {
    fn validate(&self) -> Result<()> {
        if self.chains < 2 || self.samples == 0 || self.thin == 0 || self.ti_nodes == 0 {
            return Err(Error::param(
                "mcmc",
                "need at least 2 chains and positive samples, thinning and nodes",
            ));
        }
        Ok(())
    }
}

/// Free energy `N^{-1} log Z` of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergy {
    pub value: f64,
    pub std_error: f64,
    pub approximate: bool,
    pub method: String,
}

pub fn free_energy(inst: &HamiltonianInstance, method: &Method, seed: u64) -> Result<FreeEnergy> {
    match method {
        Method::Exact { cap } => {
            let lz = log_partition(inst, *cap)?;
            let value = if inst.is_empty() { LN_2 } else { lz / inst.n as f64 };
            Ok(FreeEnergy {
                value,
                std_error: 0.0,
                approximate: false,
                method: "exact".into(),
            })
        }
        Method::Mcmc(cfg) => {
            let est = free_energy_mcmc(inst, cfg, seed)?;
            Ok(FreeEnergy {
                value: est.value,
                std_error: est.std_error,
                approximate: true,
                method: "mcmc".into(),
            })
        }
    }
}

/// Disorder average `F_N` over `n_instances` instances, in parallel with
/// one stream per instance.
pub fn average_free_energy(
    spec: &SystemSpec,
    n_instances: usize,
    method: &Method,
    seed: u64,
) -> Result<Estimate> {
    spec.validate()?;
    if n_instances == 0 {
        return Err(Error::param("n_instances", "must be positive"));
    }
    let values: Vec<f64> = (0..n_instances)
        .into_par_iter()
        .map(|i| {
            let inst = spec.instance(seed, i)?;
            Ok(free_energy(&inst, method, rng::derive_seed(seed, i as u64))?.value)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&values))
}

/// The Gibbs measure of an instance, tabulated over all configurations.
#[derive(Clone, Debug)]
pub struct GibbsTable {
    pub n: usize,
    pub log_z: f64,
    /// Probabilities indexed by bit pattern.
    pub probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl GibbsTable {
    pub fn new(inst: &HamiltonianInstance, cap: usize) -> Result<Self> {
        check_cap(inst.n, cap)?;
        let mut energies = vec![0.0; 1usize << inst.n];
        for_each_energy(inst, cap, |b, h| energies[b as usize] = h)?;
        let log_z = stats::log_sum_exp(&energies);
        let probs: Vec<f64> = energies.iter().map(|h| (h - log_z).exp()).collect();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut run = 0.0;
        for p in &probs {
            run += p;
            cumulative.push(run);
        }
        Ok(GibbsTable {
            n: inst.n,
            log_z,
            probs,
            cumulative,
        })
    }

    pub fn sample_bits<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let total = *self.cumulative.last().expect("nonempty table");
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u);
        k.min(self.probs.len() - 1) as u64
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<i8> {
        spins_from_bits(self.sample_bits(rng), self.n)
    }

    /// Exact `⟨σ_i⟩`.
    pub fn magnetizations(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for (b, &p) in self.probs.iter().enumerate() {
            for (i, mi) in m.iter_mut().enumerate() {
                *mi += if b >> i & 1 == 1 { p } else { -p };
            }
        }
        m
    }

    /// Exact law of `R_{1,2}`: entry `j` is the probability that the two
    /// replicas agree on exactly `j` sites.
    pub fn overlap_distribution(&self) -> Vec<f64> {
        let n = self.n;
        let mask = (1u64 << n) - 1;
        // Distribution of the agreement pattern: Σ_a p(a) p(a ^ d).
        let mut by_agree = vec![0.0; n + 1];
        for d in 0..=mask {
            let s: f64 = self
                .probs
                .iter()
                .enumerate()
                .map(|(a, &p)| p * self.probs[a ^ d as usize])
                .sum();
            by_agree[n - d.count_ones() as usize] += s;
        }
        by_agree
    }
}

/// `R(σ, σ') = N^{-1} Σ σ_i σ'_i`.
pub fn overlap(a: &[i8], b: &[i8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::param("sigma", "empty configuration"));
    }
    let s: i64 = a.iter().zip(b).map(|(&x, &y)| (x * y) as i64).sum();
    Ok(s as f64 / a.len() as f64)
}

fn overlap_bits(a: u64, b: u64, n: usize) -> f64 {
    let disagree = (a ^ b).count_ones() as i64;
    (n as i64 - 2 * disagree) as f64 / n as f64
}

/// Overlap value of agreement count `j`.
pub fn overlap_value(j: usize, n: usize) -> f64 {
    (2 * j as i64 - n as i64) as f64 / n as f64
}

/// Single-flip Metropolis chain for the measure `∝ exp(t H)`.
struct Chain<'a> {
    c: Compiled<'a>,
    sigma: Vec<i8>,
    h: f64,
    t: f64,
}

impl<'a> Chain<'a> {
    fn new<R: Rng + ?Sized>(inst: &'a HamiltonianInstance, t: f64, rng: &mut R) -> Self {
        let sigma: Vec<i8> = (0..inst.n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let h = inst.energy(&sigma);
        Chain {
            c: inst.compiled(),
            sigma,
            h,
            t,
        }
    }

    fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.sigma.len() {
            let d = self.c.flip_delta(&mut self.sigma, i);
            let td = self.t * d;
            if td >= 0.0 || rng.random::<f64>() < td.exp() {
                self.sigma[i] = -self.sigma[i];
                self.h += d;
            }
        }
    }

    fn sweeps<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) {
        for _ in 0..k {
            self.sweep(rng);
        }
    }
}

fn chain_rng(seed: u64, group: u64, chain: usize) -> rng::StreamRng {
    rng::stream(seed, tags::MCMC, group << 32 | chain as u64)
}

/// Per-chain means of a recorded observable, chains in parallel.
fn chain_means<F>(inst: &HamiltonianInstance, t: f64, cfg: &McmcConfig, seed: u64, group: u64, obs: F) -> Vec<Vec<f64>>
where
    F: Fn(&[i8], f64) -> Vec<f64> + Sync,
{
    (0..cfg.chains)
        .into_par_iter()
        .map(|k| {
            let mut rng = chain_rng(seed, group, k);
            let mut ch = Chain::new(inst, t, &mut rng);
            ch.sweeps(cfg.burn_in, &mut rng);
            let mut sum: Vec<f64> = Vec::new();
            for s in 0..cfg.samples {
                if s > 0 {
                    ch.sweeps(cfg.thin, &mut rng);
                }
                let v = obs(&ch.sigma, ch.h);
                if sum.is_empty() {
                    sum = v;
                } else {
                    sum.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
            }
            sum.iter().map(|s| s / cfg.samples as f64).collect()
        })
        .collect()
}

fn across_chains(means: &[Vec<f64>]) -> Vec<Estimate> {
    let k = means.first().map_or(0, |m| m.len());
    (0..k)
        .map(|j| {
            let col: Vec<f64> = means.iter().map(|m| m[j]).collect();
            Estimate::from_samples(&col)
        })
        .collect()
}

/// `⟨σ_i⟩` by Metropolis with between-chain standard errors.
pub fn magnetizations_mcmc(inst: &HamiltonianInstance, cfg: &McmcConfig, seed: u64) -> Result<Vec<Estimate>> {
    inst.validate()?;
    cfg.validate()?;
    let means = chain_means(inst, 1.0, cfg, seed, 0, |s, _| s.iter().map(|&x| x as f64).collect());
    Ok(across_chains(&means))
}

/// Law of `R_{1,2}` by pairs of independent chains; bin `j` is the
/// probability of exactly `j` agreeing sites.
pub fn overlap_histogram_mcmc(inst: &HamiltonianInstance, cfg: &McmcConfig, seed: u64) -> Result<Vec<Estimate>> {
    inst.validate()?;
    cfg.validate()?;
    let n = inst.n;
    let per_pair: Vec<Vec<f64>> = (0..cfg.chains)
        .into_par_iter()
        .map(|k| {
            let mut rng_a = chain_rng(seed, 1, 2 * k);
            let mut rng_b = chain_rng(seed, 1, 2 * k + 1);
            let mut a = Chain::new(inst, 1.0, &mut rng_a);
            let mut b = Chain::new(inst, 1.0, &mut rng_b);
            a.sweeps(cfg.burn_in, &mut rng_a);
            b.sweeps(cfg.burn_in, &mut rng_b);
            let mut hist = vec![0.0; n + 1];
            for s in 0..cfg.samples {
                if s > 0 {
                    a.sweeps(cfg.thin, &mut rng_a);
                    b.sweeps(cfg.thin, &mut rng_b);
                }
                let agree = a.sigma.iter().zip(&b.sigma).filter(|(x, y)| x == y).count();
                hist[agree] += 1.0 / cfg.samples as f64;
            }
            hist
        })
        .collect();
    Ok(across_chains(&per_pair))
}

/// Thermodynamic integration `log Z = N log 2 + ∫_0^1 ⟨H⟩_t dt` with
/// Gauss-Legendre nodes in `t`; returns `N^{-1} log Z`.
pub fn free_energy_mcmc(inst: &HamiltonianInstance, cfg: &McmcConfig, seed: u64) -> Result<Estimate> {
    inst.validate()?;
    cfg.validate()?;
    let n = inst.n as f64;
    if inst.is_empty() {
        return Ok(Estimate::exact(LN_2));
    }
    let (nodes, weights) = stats::gauss_legendre(cfg.ti_nodes, 0.0, 1.0);
    let mut value = n * LN_2;
    let mut var = 0.0;
    for (k, (&t, &w)) in nodes.iter().zip(&weights).enumerate() {
        let means = chain_means(inst, t, cfg, seed, 100 + k as u64, |_, h| vec![h]);
        let e = across_chains(&means)[0];
        value += w * e.value;
        var += (w * e.std_error).powi(2);
    }
    Ok(Estimate {
        value: value / n,
        std_error: var.sqrt() / n,
        n: cfg.chains,
    })
}

/// Potential scale reduction of the energy over independent chains.
pub fn energy_r_hat(inst: &HamiltonianInstance, cfg: &McmcConfig, seed: u64) -> Result<f64> {
    inst.validate()?;
    cfg.validate()?;
    let traces: Vec<Vec<f64>> = (0..cfg.chains)
        .into_par_iter()
        .map(|k| {
            let mut rng = chain_rng(seed, 2, k);
            let mut ch = Chain::new(inst, 1.0, &mut rng);
            ch.sweeps(cfg.burn_in, &mut rng);
            (0..cfg.samples)
                .map(|_| {
                    ch.sweeps(cfg.thin, &mut rng);
                    ch.h
                })
                .collect()
        })
        .collect();
    let len = cfg.samples as f64;
    let means: Vec<f64> = traces.iter().map(|t| stats::mean(t)).collect();
    let within = stats::mean(
        &traces
            .iter()
            .map(|t| if t.len() > 1 { stats::covariance(t, t) } else { 0.0 })
            .collect::<Vec<_>>(),
    );
    let between = len * stats::covariance(&means, &means);
    if within == 0.0 {
        return Ok(1.0);
    }
    let pooled = (len - 1.0) / len * within + between / len;
    Ok((pooled / within).sqrt())
}

/// Replicas drawn from the Gibbs measure of one instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplicaBatch {
    pub replicas: Vec<Vec<i8>>,
    pub method: String,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default)]
    pub sweeps: usize,
}

/// `n` replicas. Exact sampling inverts the tabulated Gibbs CDF and gives
/// independent draws; Metropolis runs one chain and records every `thin`
/// sweeps after burn-in.
pub fn sample_replicas<R: Rng + ?Sized>(
    inst: &HamiltonianInstance,
    n: usize,
    rng: &mut R,
    method: &Method,
) -> Result<ReplicaBatch> {
    match method {
        Method::Exact { cap } => {
            let table = GibbsTable::new(inst, *cap)?;
            Ok(ReplicaBatch {
                replicas: (0..n).map(|_| table.sample(rng)).collect(),
                method: "exact".into(),
                burn_in: 0,
                sweeps: 0,
            })
        }
        Method::Mcmc(cfg) => {
            inst.validate()?;
            let mut ch = Chain::new(inst, 1.0, rng);
            ch.sweeps(cfg.burn_in, rng);
            let mut replicas = Vec::with_capacity(n);
            for s in 0..n {
                if s > 0 {
                    ch.sweeps(cfg.thin, rng);
                }
                replicas.push(ch.sigma.clone());
            }
            Ok(ReplicaBatch {
                replicas,
                method: "mcmc".into(),
                burn_in: cfg.burn_in,
                sweeps: cfg.burn_in + n.saturating_sub(1) * cfg.thin,
            })
        }
    }
}

/// Frequency of `R_{2,3} < min(R_{1,2}, R_{1,3}) - δ` over replica triplets.
pub fn ultrametricity_violation(triplets: &[[&[i8]; 3]], delta: f64) -> Result<Estimate> {
    let hits: Vec<f64> = triplets
        .iter()
        .map(|[a, b, c]| {
            let r12 = overlap(a, b)?;
            let r13 = overlap(a, c)?;
            let r23 = overlap(b, c)?;
            Ok(if r23 < r12.min(r13) - delta { 1.0 } else { 0.0 })
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&hits))
}

/// Frequency of `R_{1,2} < -threshold` over replica pairs.
pub fn positivity_mass(pairs: &[[&[i8]; 2]], threshold: f64) -> Result<Estimate> {
    let hits: Vec<f64> = pairs
        .iter()
        .map(|[a, b]| Ok(if overlap(a, b)? < -threshold { 1.0 } else { 0.0 }))
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&hits))
}

/// Bounded test function `f` of the spins of replicas `1..=n`. Replica and
/// site numbers are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FSpec {
    One,
    /// `Π σ^ℓ_i` over the listed `(ℓ, i)`.
    SpinProduct { spins: Vec<(usize, usize)> },
    /// `R_{a,b}`.
    Overlap { a: usize, b: usize },
}

impl FSpec {
    pub fn eval(&self, reps: &[&[i8]]) -> f64 {
        match self {
            FSpec::One => 1.0,
            FSpec::SpinProduct { spins } => spins.iter().map(|&(l, i)| reps[l - 1][i - 1] as f64).product(),
            FSpec::Overlap { a, b } => {
                let (x, y) = (reps[a - 1], reps[b - 1]);
                x.iter().zip(y).map(|(&p, &q)| (p * q) as f64).sum::<f64>() / x.len() as f64
            }
        }
    }

    /// Whether `f` depends on replica `l`.
    pub fn uses(&self, l: usize) -> bool {
        match self {
            FSpec::One => false,
            FSpec::SpinProduct { spins } => spins.iter().any(|&(r, _)| r == l),
            FSpec::Overlap { a, b } => *a == l || *b == l,
        }
    }

    fn validate(&self, n: usize, sites: usize) -> Result<()> {
        let ok = match self {
            FSpec::One => true,
            FSpec::SpinProduct { spins } => spins.iter().all(|&(l, i)| (1..=n).contains(&l) && (1..=sites).contains(&i)),
            FSpec::Overlap { a, b } => (1..=n).contains(a) && (1..=n).contains(b),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param("f", "replica or site index out of range"))
        }
    }
}

/// Bounded function `ψ` of one overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PsiSpec {
    One,
    Identity,
    Power { k: u32 },
    /// `1(R ≥ q)`.
    AtLeast { q: f64 },
}

impl PsiSpec {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            PsiSpec::One => 1.0,
            PsiSpec::Identity => r,
            PsiSpec::Power { k } => r.powi(k as i32),
            PsiSpec::AtLeast { q } => {
                if r >= q {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GgConfig {
    pub n: usize,
    pub f: FSpec,
    pub psi: PsiSpec,
    #[serde(default = "default_gg_samples")]
    pub samples: usize,
}

fn default_gg_samples() -> usize {
    200
}

/// Per-instance Gibbs averages entering the identity. `b[ℓ-2]` holds the
/// `ℓ`-th term.
#[derive(Clone, Debug, Default)]
pub struct GgTerms {
    pub n: usize,
    pub l: Vec<f64>,
    pub f: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<Vec<f64>>,
}

fn mean_without(xs: &[f64], skip: Option<usize>) -> f64 {
    match skip {
        None => stats::mean(xs),
        Some(i) => {
            let rest: Vec<f64> = xs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &x)| x).collect();
            stats::mean(&rest)
        }
    }
}

impl GgTerms {
    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }

    /// `E⟨fψ(R_{1,n+1})⟩ - n^{-1} E⟨f⟩ E⟨ψ(R_{1,2})⟩ - n^{-1} Σ_ℓ E⟨fψ(R_{1,ℓ})⟩`,
    /// arranged as `n^{-1}(L - F A) + n^{-1} Σ_ℓ (L - B_ℓ)` so that every
    /// bracket cancels exactly when its terms coincide.
    pub fn residual(&self, skip: Option<usize>) -> f64 {
        let n = self.n as f64;
        let l = mean_without(&self.l, skip);
        let f = mean_without(&self.f, skip);
        let a = mean_without(&self.a, skip);
        let mut total = (l - f * a) / n;
        for b in &self.b {
            total += (l - mean_without(b, skip)) / n;
        }
        total
    }

    pub fn jackknife(&self) -> Estimate {
        stats::jackknife(self.len(), |skip| self.residual(skip))
    }
}

/// Replica draws of one instance kept for re-evaluation under several `ψ`.
struct GgDraws {
    /// Per sample: `f(S^n)` and `R_{1,ℓ}` for `ℓ = 2..=n+1`.
    main: Vec<(f64, Vec<f64>)>,
    /// `f` on an independent set of draws, for the product term.
    f_only: Vec<f64>,
}

fn gg_draws<R: Rng + ?Sized>(table: &GibbsTable, cfg: &GgConfig, rng: &mut R) -> GgDraws {
    let n = cfg.n;
    let mut main = Vec::with_capacity(cfg.samples);
    let mut f_only = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let reps: Vec<Vec<i8>> = (0..=n).map(|_| table.sample(rng)).collect();
        let refs: Vec<&[i8]> = reps.iter().map(|r| r.as_slice()).collect();
        let fv = cfg.f.eval(&refs[..n]);
        let rs = (1..=n).map(|l| overlap_i8(refs[0], refs[l])).collect();
        main.push((fv, rs));
    }
    for _ in 0..cfg.samples {
        let reps: Vec<Vec<i8>> = (0..n).map(|_| table.sample(rng)).collect();
        let refs: Vec<&[i8]> = reps.iter().map(|r| r.as_slice()).collect();
        f_only.push(cfg.f.eval(&refs));
    }
    GgDraws { main, f_only }
}

fn overlap_i8(a: &[i8], b: &[i8]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x * y) as i64).sum::<i64>() as f64 / a.len() as f64
}

fn terms_from_draws(draws: &[GgDraws], cfg: &GgConfig, psi: &PsiSpec) -> GgTerms {
    let n = cfg.n;
    let mut t = GgTerms {
        n,
        b: vec![Vec::new(); n - 1],
        ..Default::default()
    };
    for d in draws {
        let s = d.main.len() as f64;
        let l: f64 = d.main.iter().map(|(f, r)| f * psi.eval(r[n - 1])).sum::<f64>() / s;
        t.l.push(l);
        t.a.push(d.main.iter().map(|(_, r)| psi.eval(r[n - 1])).sum::<f64>() / s);
        t.f.push(d.f_only.iter().sum::<f64>() / d.f_only.len() as f64);
        for ell in 2..=n {
            let b = if cfg.f.uses(ell) {
                d.main.iter().map(|(f, r)| f * psi.eval(r[ell - 2])).sum::<f64>() / s
            } else {
                l
            };
            t.b[ell - 2].push(b);
        }
    }
    t
}

/// Residual of the identity at one threshold of the mixture form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixtureRow {
    pub q: f64,
    pub residual: Estimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GgReport {
    pub residual: Estimate,
    pub n_instances: usize,
    pub samples: usize,
    /// `ψ = 1(R ≥ q)` for every attainable overlap value `q > -1`.
    pub mixture: Vec<MixtureRow>,
}

fn thresholds(n_sites: usize) -> Vec<f64> {
    (1..=n_sites).map(|j| overlap_value(j, n_sites)).collect()
}

fn check_gg(instances: &[HamiltonianInstance], cfg: &GgConfig) -> Result<usize> {
    if cfg.n < 2 {
        return Err(Error::param("n", "the identity needs n ≥ 2"));
    }
    let first = instances.first().ok_or_else(|| Error::param("instances", "need at least one"))?;
    for i in instances {
        if i.n != first.n {
            return Err(Error::DimensionMismatch {
                expected: first.n,
                got: i.n,
            });
        }
    }
    cfg.f.validate(cfg.n, first.n)?;
    Ok(first.n)
}

/// Monte Carlo residual of the Ghirlanda-Guerra identity over a set of
/// instances, with exact replica sampling and a jackknife error over
/// instances.
pub fn gg_residual(
    instances: &[HamiltonianInstance],
    cfg: &GgConfig,
    cap: usize,
    seed: u64,
) -> Result<(GgReport, GgTerms)> {
    let n_sites = check_gg(instances, cfg)?;
    if cfg.f == FSpec::One {
        // Both sides reduce to E⟨ψ(R_{1,2})⟩.
        let zero = GgTerms {
            n: cfg.n,
            l: vec![0.0; instances.len()],
            f: vec![1.0; instances.len()],
            a: vec![0.0; instances.len()],
            b: vec![vec![0.0; instances.len()]; cfg.n - 1],
        };
        let mixture = thresholds(n_sites)
            .into_iter()
            .map(|q| MixtureRow {
                q,
                residual: Estimate::exact(0.0),
            })
            .collect();
        return Ok((
            GgReport {
                residual: Estimate::exact(0.0),
                n_instances: instances.len(),
                samples: cfg.samples,
                mixture,
            },
            zero,
        ));
    }
    let draws: Vec<GgDraws> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let table = GibbsTable::new(inst, cap)?;
            let mut rng = rng::stream(seed, tags::GG, i as u64);
            Ok(gg_draws(&table, cfg, &mut rng))
        })
        .collect::<Result<_>>()?;
    let terms = terms_from_draws(&draws, cfg, &cfg.psi);
    let mixture = thresholds(n_sites)
        .into_iter()
        .map(|q| MixtureRow {
            q,
            residual: terms_from_draws(&draws, cfg, &PsiSpec::AtLeast { q }).jackknife(),
        })
        .collect();
    Ok((
        GgReport {
            residual: terms.jackknife(),
            n_instances: instances.len(),
            samples: cfg.samples,
            mixture,
        },
        terms,
    ))
}

/// Exact Gibbs averages of the identity's terms for each instance, by
/// enumerating all `n`-tuples of configurations.
pub fn gg_terms_exact(instances: &[HamiltonianInstance], cfg: &GgConfig, cap: usize) -> Result<GgTerms> {
    let n_sites = check_gg(instances, cfg)?;
    let n = cfg.n;
    if n_sites * n > 24 {
        return Err(Error::EnumerationCap { n: n_sites * n, cap: 24 });
    }
    let per: Vec<(f64, f64, f64, Vec<f64>)> = instances
        .par_iter()
        .map(|inst| {
            let table = GibbsTable::new(inst, cap)?;
            let states = 1usize << n_sites;
            // g(σ) = Σ_τ p(τ) ψ(R(σ, τ))
            let g: Vec<f64> = (0..states)
                .map(|s| {
                    (0..states)
                        .map(|t| table.probs[t] * cfg.psi.eval(overlap_bits(s as u64, t as u64, n_sites)))
                        .sum()
                })
                .collect();
            let a: f64 = (0..states).map(|s| table.probs[s] * g[s]).sum();
            let mut l = 0.0;
            let mut f = 0.0;
            let mut b = vec![0.0; n - 1];
            let total = states.pow(n as u32);
            let mut idx = vec![0usize; n];
            let mut reps: Vec<Vec<i8>> = vec![Vec::new(); n];
            for mut code in 0..total {
                let mut w = 1.0;
                for slot in idx.iter_mut() {
                    *slot = code % states;
                    code /= states;
                    w *= table.probs[*slot];
                }
                if w == 0.0 {
                    continue;
                }
                for (r, &s) in reps.iter_mut().zip(&idx) {
                    *r = spins_from_bits(s as u64, n_sites);
                }
                let refs: Vec<&[i8]> = reps.iter().map(|r| r.as_slice()).collect();
                let fv = cfg.f.eval(&refs);
                f += w * fv;
                l += w * fv * g[idx[0]];
                for ell in 2..=n {
                    if cfg.f.uses(ell) {
                        b[ell - 2] += w * fv * cfg.psi.eval(overlap_bits(idx[0] as u64, idx[ell - 1] as u64, n_sites));
                    }
                }
            }
            for ell in 2..=n {
                if !cfg.f.uses(ell) {
                    b[ell - 2] = l;
                }
            }
            Ok((l, f, a, b))
        })
        .collect::<Result<_>>()?;
    let mut t = GgTerms {
        n,
        b: vec![Vec::new(); n - 1],
        ..Default::default()
    };
    for (l, f, a, b) in per {
        t.l.push(l);
        t.f.push(f);
        t.a.push(a);
        for (slot, v) in t.b.iter_mut().zip(b) {
            slot.push(v);
        }
    }
    Ok(t)
}

/// Monte Carlo against exact residual on the same instances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GgComparison {
    pub monte_carlo: Estimate,
    pub exact: Estimate,
    /// Jackknife over instances of the paired difference.
    pub difference: Estimate,
}

pub fn gg_compare_exact(
    instances: &[HamiltonianInstance],
    cfg: &GgConfig,
    cap: usize,
    seed: u64,
) -> Result<GgComparison> {
    let (_, mc) = gg_residual(instances, cfg, cap, seed)?;
    let ex = if cfg.f == FSpec::One {
        mc.clone()
    } else {
        gg_terms_exact(instances, cfg, cap)?
    };
    let difference = stats::jackknife(instances.len(), |skip| mc.residual(skip) - ex.residual(skip));
    Ok(GgComparison {
        monte_carlo: mc.jackknife(),
        exact: ex.jackknife(),
        difference,
    })
}
