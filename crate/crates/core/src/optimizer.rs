//! Minimization of the estimated functional over `(ζ, h)` at fixed depth and
//! the finite-size gap report against it.
//!
//! Points are unconstrained vectors: `r` logits, mapped with a fixed zero
//! logit through a cumulative softmax scaled by `zeta_max` to
//! `0 < ζ_0 < … < ζ_{r-1} < zeta_max`, followed
//! by the `G^r` raw grid values of `h`, clamped to `[-1,1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::CascadeParams;
use crate::clauses::ClauseModel;
use crate::error::{Error, Result};
use crate::fields::OrderParamH;
use crate::finite_system::{average_free_energy, Method, SystemSpec};
use crate::mp_functional::{estimate_p, FunctionalEstimate, MpSpec, Perturbation};
use crate::rng::{self, tags};
use crate::stats::Estimate;
use rand::Rng;

const LOGIT_BOUND: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpec {
    pub r: usize,
    pub model: ClauseModel,
    pub lambda: f64,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
    /// Grid resolution of `h`.
    #[serde(rename = "G", default = "default_g")]
    pub g: usize,
    /// Cascade branching used in every evaluation.
    #[serde(rename = "M")]
    pub branching: usize,
    #[serde(default)]
    pub budget: BudgetSchedule,
    #[serde(default = "default_multistart")]
    pub multistart: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Stop a stage when the simplex values spread less than this.
    #[serde(default = "default_ftol")]
    pub ftol: f64,
    #[serde(default = "default_step")]
    pub initial_step: f64,
    /// Upper end of the `ζ` range. Near 1 the truncated cascade loses most
    /// of its mass.
    #[serde(default = "default_zeta_max")]
    pub zeta_max: f64,
    pub seed: u64,
}

fn default_g() -> usize {
    2
}
fn default_multistart() -> usize {
    4
}
fn default_max_iter() -> usize {
    100
}
fn default_ftol() -> f64 {
    1e-3
}
fn default_zeta_max() -> f64 {
    0.9
}
fn default_step() -> f64 {
    0.5
}

/// Sample counts of successive stages: `initial`, doubled until `max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub initial: usize,
    pub max: usize,
}

impl Default for BudgetSchedule {
    fn default() -> Self {
        BudgetSchedule { initial: 250, max: 2000 }
    }
}

impl BudgetSchedule {
    pub fn stages(&self) -> Vec<usize> {
        let mut out = vec![self.initial.max(1)];
        while *out.last().unwrap() < self.max {
            let next = (out.last().unwrap() * 2).min(self.max);
            out.push(next);
        }
        out
    }
}

impl SearchSpec {
    pub fn new(r: usize, model: ClauseModel, lambda: f64, branching: usize, seed: u64) -> Self {
        SearchSpec {
            r,
            model,
            lambda,
            perturbation: None,
            g: default_g(),
            branching,
            budget: BudgetSchedule::default(),
            multistart: default_multistart(),
            max_iter: default_max_iter(),
            ftol: default_ftol(),
            initial_step: default_step(),
            zeta_max: default_zeta_max(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::param("r", "must be at least 1"));
        }
        if self.g == 0 || self.branching == 0 || self.multistart == 0 {
            return Err(Error::param("search", "G, M and multistart must be positive"));
        }
        if !(self.zeta_max > 0.0 && self.zeta_max <= 1.0) {
            return Err(Error::param("zeta_max", "must lie in (0, 1]"));
        }
        if self.budget.initial == 0 || self.budget.max < self.budget.initial {
            return Err(Error::param("budget", "need 0 < initial ≤ max"));
        }
        self.model.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda", "must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.r + self.n_h()
    }

    fn n_h(&self) -> usize {
        self.g.pow(self.r as u32)
    }

    /// `(ζ, h)` of an unconstrained point.
    pub fn decode(&self, x: &[f64]) -> Result<(CascadeParams, OrderParamH)> {
        let zetas = zetas_from_logits(&x[..self.r], self.zeta_max);
        let h: Vec<f64> = x[self.r..].iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok((CascadeParams::new(zetas)?, OrderParamH::new(self.r, self.g, h)?))
    }

    pub fn encode(&self, zetas: &[f64], h: &OrderParamH) -> Result<Vec<f64>> {
        if zetas.len() != self.r || h.r != self.r || h.g != self.g || h.omega_star_coordinate {
            return Err(Error::param("initial", "point does not match the search depth and grid"));
        }
        if zetas.last().is_some_and(|&z| z >= self.zeta_max) {
            return Err(Error::param("initial", "ζ outside the search range"));
        }
        let mut x = logits_from_zetas(zetas, self.zeta_max);
        x.extend(&h.values);
        Ok(x)
    }

    pub fn mp_spec(&self, params: CascadeParams, h: OrderParamH) -> MpSpec {
        MpSpec {
            params,
            h,
            model: self.model.clone(),
            lambda: self.lambda,
            m: self.branching,
            perturbation: self.perturbation.clone(),
            omega_star: None,
        }
    }
}

/// `ζ_p = top · Σ_{j≤p} softmax(x_0, …, x_{r-1}, 0)_j`.
pub fn zetas_from_logits(x: &[f64], top_zeta: f64) -> Vec<f64> {
    let clamped: Vec<f64> = x.iter().map(|v| v.clamp(-LOGIT_BOUND, LOGIT_BOUND)).collect();
    let top = clamped.iter().fold(0.0f64, |a, &b| a.max(b));
    let e: Vec<f64> = clamped.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = e.iter().sum::<f64>() + (-top).exp();
    let mut acc = 0.0;
    e.iter()
        .map(|v| {
            acc += v / total;
            top_zeta * acc
        })
        .collect()
}

pub fn logits_from_zetas(zetas: &[f64], top_zeta: f64) -> Vec<f64> {
    let last = top_zeta - zetas.last().copied().unwrap_or(0.0);
    let mut prev = 0.0;
    zetas
        .iter()
        .map(|&z| {
            let c = z - prev;
            prev = z;
            (c / last).ln()
        })
        .collect()
}

/// Embeds a depth-`r` point at depth `r + 1`: `h` ignores the new deepest
/// uniform and the new last `ζ` sits halfway to `top_zeta`.
pub fn embed_one_level(zetas: &[f64], h: &OrderParamH, top_zeta: f64) -> Result<(Vec<f64>, OrderParamH)> {
    let mut z = zetas.to_vec();
    let last = *z.last().ok_or_else(|| Error::param("zetas", "empty"))?;
    z.push((last + top_zeta) / 2.0);
    let g = h.g;
    let values: Vec<f64> = h.values.iter().flat_map(|&v| std::iter::repeat_n(v, g)).collect();
    Ok((z, OrderParamH::new(h.r + 1, g, values)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub start: usize,
    pub stage: usize,
    pub iteration: usize,
    pub budget: usize,
    pub params_hash: String,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StartSummary {
    pub start: usize,
    pub value: Option<f64>,
    pub evaluations: usize,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinimizeResult {
    pub r: usize,
    pub zetas: Vec<f64>,
    pub h: OrderParamH,
    /// Objective at the best point under the last stage's common seed.
    pub value: Estimate,
    /// Fresh seed and four times the last budget; reported as the minimum.
    pub reevaluated: FunctionalEstimate,
    pub starts: Vec<StartSummary>,
    pub trace: Vec<TraceRow>,
}

impl MinimizeResult {
    pub fn fresh(&self) -> Estimate {
        self.reevaluated.estimate()
    }

    /// The best point as an input for [`estimate_p`].
    pub fn best_spec(&self, search: &SearchSpec) -> Result<MpSpec> {
        Ok(search.mp_spec(CascadeParams::new(self.zetas.clone())?, self.h.clone()))
    }
}

fn params_hash(x: &[f64]) -> String {
    // FNV-1a over the bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

struct Objective<'a> {
    spec: &'a SearchSpec,
    start: usize,
    stage: usize,
    budget: usize,
    seed: u64,
    evals: usize,
    trace: Vec<TraceRow>,
}

impl Objective<'_> {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, f64)> {
        let (params, h) = self.spec.decode(x)?;
        let est = estimate_p(&self.spec.mp_spec(params, h), self.budget, self.seed)?;
        if !est.value.is_finite() {
            return Err(Error::NonFinite { op: "minimize_P" });
        }
        self.evals += 1;
        self.trace.push(TraceRow {
            start: self.start,
            stage: self.stage,
            iteration: self.evals,
            budget: self.budget,
            params_hash: params_hash(x),
            value: est.value,
            std_error: est.std_error,
        });
        Ok((est.value, est.std_error))
    }
}

/// Nelder-Mead from `x0` with axis steps `step`; returns the best vertex and
/// its objective value and standard error.
fn nelder_mead(
    obj: &mut Objective,
    x0: &[f64],
    step: f64,
    max_iter: usize,
    ftol: f64,
) -> Result<(Vec<f64>, f64, f64)> {
    let n = x0.len();
    let mut pts: Vec<(Vec<f64>, f64, f64)> = Vec::with_capacity(n + 1);
    let (f0, s0) = obj.eval(x0)?;
    pts.push((x0.to_vec(), f0, s0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let (f, s) = obj.eval(&x)?;
        pts.push((x, f, s));
    }
    for _ in 0..max_iter {
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        if pts[n].1 - pts[0].1 <= ftol {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| pts[..n].iter().map(|p| p.0[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&pts[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let (fr, sr) = obj.eval(&xr)?;
        if fr < pts[0].1 {
            let xe = along(2.0);
            let (fe, se) = obj.eval(&xe)?;
            pts[n] = if fe < fr { (xe, fe, se) } else { (xr, fr, sr) };
        } else if fr < pts[n - 1].1 {
            pts[n] = (xr, fr, sr);
        } else {
            let (xc, (fc, sc)) = if fr < pts[n].1 {
                let x = along(0.5);
                let v = obj.eval(&x)?;
                (x, v)
            } else {
                let x = along(-0.5);
                let v = obj.eval(&x)?;
                (x, v)
            };
            if fc < pts[n].1.min(fr) {
                pts[n] = (xc, fc, sc);
            } else {
                let best = pts[0].0.clone();
                for p in pts.iter_mut().skip(1) {
                    let x: Vec<f64> = best.iter().zip(&p.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    let (f, s) = obj.eval(&x)?;
                    *p = (x, f, s);
                }
            }
        }
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f, s) = pts.swap_remove(0);
    Ok((x, f, s))
}

fn start_point(spec: &SearchSpec, start: usize, initial: Option<&[f64]>) -> Vec<f64> {
    if start == 0 {
        if let Some(x) = initial {
            return x.to_vec();
        }
        return vec![0.0; spec.dim()];
    }
    let mut rng = rng::stream(spec.seed, tags::OPTIMIZER, start as u64);
    let mut x: Vec<f64> = (0..spec.r).map(|_| rng.random_range(-2.0..2.0)).collect();
    x.extend((0..spec.n_h()).map(|_| rng.random_range(-1.0..1.0)));
    x
}

/// Multistart Nelder-Mead with common random numbers per budget stage. Each
/// stage restarts from the previous best with half the step. The winner is
/// re-evaluated on a fresh seed with four times the final budget.
pub fn minimize_p(spec: &SearchSpec, initial: Option<(&[f64], &OrderParamH)>) -> Result<MinimizeResult> {
    spec.validate()?;
    let x_init = match initial {
        Some((z, h)) => Some(spec.encode(z, h)?),
        None => None,
    };
    let stages = spec.budget.stages();
    let stage_seed = |s: usize| rng::derive_seed(spec.seed, 0x5eed_0000 + s as u64);
    let runs: Vec<(StartSummary, Option<(Vec<f64>, f64, f64)>, Vec<TraceRow>)> = (0..spec.multistart)
        .into_par_iter()
        .map(|start| {
            let mut x = start_point(spec, start, x_init.as_deref());
            let mut step = spec.initial_step;
            let mut best = None;
            let mut trace = Vec::new();
            let mut evaluations = 0;
            for (s, &budget) in stages.iter().enumerate() {
                let mut obj = Objective {
                    spec,
                    start,
                    stage: s,
                    budget,
                    seed: stage_seed(s),
                    evals: 0,
                    trace: Vec::new(),
                };
                let out = nelder_mead(&mut obj, &x, step, spec.max_iter, spec.ftol);
                evaluations += obj.evals;
                trace.append(&mut obj.trace);
                match out {
                    Ok(b) => {
                        x = b.0.clone();
                        best = Some(b);
                    }
                    Err(e) => {
                        let summary = StartSummary {
                            start,
                            value: None,
                            evaluations,
                            aborted: Some(e.to_string()),
                        };
                        return (summary, None, trace);
                    }
                }
                step /= 2.0;
            }
            let summary = StartSummary {
                start,
                value: best.as_ref().map(|b| b.1),
                evaluations,
                aborted: None,
            };
            (summary, best, trace)
        })
        .collect();
    let mut starts = Vec::new();
    let mut trace = Vec::new();
    let mut winner: Option<(Vec<f64>, f64, f64)> = None;
    for (summary, best, mut t) in runs {
        starts.push(summary);
        trace.append(&mut t);
        if let Some(b) = best {
            if winner.as_ref().is_none_or(|w| b.1 < w.1) {
                winner = Some(b);
            }
        }
    }
    let (x, value, se) = winner.ok_or(Error::NonFinite { op: "minimize_P" })?;
    let (params, h) = spec.decode(&x)?;
    let last = *stages.last().unwrap();
    let fresh_seed = rng::derive_seed(spec.seed, 0xf4e5_0000);
    let reevaluated = estimate_p(&spec.mp_spec(params.clone(), h.clone()), 4 * last, fresh_seed)?;
    Ok(MinimizeResult {
        r: spec.r,
        zetas: params.zetas,
        h,
        value: Estimate {
            value,
            std_error: se,
            n: last,
        },
        reevaluated,
        starts,
        trace,
    })
}

/// Per-depth minima, each depth after the first also started from the
/// embedded optimum of the previous one.
pub fn minimize_over_depths(base: &SearchSpec, depths: &[usize]) -> Result<Vec<MinimizeResult>> {
    let mut out: Vec<MinimizeResult> = Vec::new();
    for &r in depths {
        let spec = SearchSpec { r, ..base.clone() };
        let init = match out.last() {
            Some(prev) if prev.r + 1 == r => Some(embed_one_level(&prev.zetas, &prev.h, spec.zeta_max)?),
            _ => None,
        };
        let res = minimize_p(&spec, init.as_ref().map(|(z, h)| (z.as_slice(), h)))?;
        out.push(res);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub free_energy: Estimate,
    pub p_min: Estimate,
    /// `p_min - F_N`; the bound asks for it to be nonnegative.
    pub gap: f64,
    pub combined_se: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthRow {
    pub r: usize,
    pub p_min: Estimate,
    /// Running minimum over the depths so far.
    pub running_min: Estimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlReport {
    pub depths: Vec<DepthRow>,
    pub rows: Vec<FlRow>,
    pub warning: Option<String>,
}

/// The bound is proved for K-sat at every K and for K-spin at even K.
pub fn fl_validity_warning(model: &ClauseModel) -> Option<String> {
    match model {
        ClauseModel::KSpin { k, .. } if k % 2 == 1 => Some(format!(
            "K-spin with odd K = {k}: the upper bound is not established for this model"
        )),
        ClauseModel::Pert { .. } => Some("perturbation clauses are not a model Hamiltonian".into()),
        _ => None,
    }
}

/// Compares `F_N` for each size with the minimized functional. `n_sigma` is
/// the tolerance in combined standard errors.
pub fn fl_gap_report(
    minima: &[MinimizeResult],
    system: &SystemSpec,
    sizes: &[usize],
    n_instances: usize,
    method: &Method,
    seed: u64,
    n_sigma: f64,
) -> Result<FlReport> {
    if minima.is_empty() {
        return Err(Error::param("minima", "need at least one depth"));
    }
    let mut depths = Vec::new();
    let mut running: Option<Estimate> = None;
    for m in minima {
        let e = m.fresh();
        if running.is_none_or(|r| e.value < r.value) {
            running = Some(e);
        }
        depths.push(DepthRow {
            r: m.r,
            p_min: e,
            running_min: running.unwrap(),
        });
    }
    let p_min = running.unwrap();
    let mut rows = Vec::new();
    for &n in sizes {
        let spec = SystemSpec { n, ..system.clone() };
        let f = average_free_energy(&spec, n_instances, method, rng::derive_seed(seed, n as u64))?;
        let combined = (f.std_error.powi(2) + p_min.std_error.powi(2)).sqrt();
        let gap = p_min.value - f.value;
        rows.push(FlRow {
            n,
            free_energy: f,
            p_min,
            gap,
            combined_se: combined,
            holds: -gap <= n_sigma * combined,
        });
    }
    Ok(FlReport {
        depths,
        rows,
        warning: fl_validity_warning(&system.model),
    })
}
