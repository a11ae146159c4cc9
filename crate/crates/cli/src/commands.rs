use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use rpcglass::cascade::{overlap_cdf_check, CascadeEnsemble, CascadeParams};
use rpcglass::cavity::{cavity_residual, CavitySpec};
use rpcglass::finite_system::{
    free_energy, gg_compare_exact, gg_residual, overlap_histogram_mcmc, overlap_value, positivity_mass,
    sample_replicas, ultrametricity_violation, GibbsTable, HamiltonianInstance, Method, ReplicaBatch,
};
use rpcglass::mp_functional::{estimate_p, estimate_p_inf_omega_star, invariance_test, rpc_average_identity_check};
use rpcglass::optimizer::{embed_one_level, fl_gap_report, minimize_p, MinimizeResult};
use rpcglass::rng::{self, tags};
use rpcglass::stats::Estimate;

use crate::config::Loaded;
use crate::output::{csv_file, json_file, Emitter};
use crate::{CliError, Command};

type Res = Result<(), CliError>;

fn core<T>(r: rpcglass::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::from_core)
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    s.as_ref().ok_or_else(|| CliError::Config(format!("missing section `[{name}]`")))
}

pub fn run(cmd: Command, cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    match cmd {
        Command::RpcSample => rpc_sample(cfg, seed, em),
        Command::OverlapLaw => overlap_law(cfg, seed, em),
        Command::MpEval => mp_eval(cfg, seed, em),
        Command::MpMin => mp_min(cfg, seed, em),
        Command::RpcIdentity => rpc_identity(cfg, seed, em),
        Command::InvarianceTest => invariance(cfg, seed, em),
        Command::FiniteFe => finite_fe(cfg, seed, em),
        Command::Replicas => replicas(cfg, seed, em),
        Command::GgCheck => gg_check(cfg, seed, em),
        Command::UmCheck => um_check(cfg, seed, em),
        Command::Positivity => positivity(cfg, seed, em),
        Command::CavityCheck => cavity_check(cfg, seed, em),
        Command::FlCompare => fl_compare(cfg, seed, em),
    }
}

fn rpc_sample(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let ens = CascadeEnsemble::new(cfg.params()?, cfg.branching()?, cfg.cascade()?.n.unwrap_or(1), seed);
    let dumps = core(ens.par_map(|i, c| (i, c.untracked_mass(), c.to_dump())))?;
    for (i, lost, dump) in dumps {
        em.emit("cascade", &json!({"index": i, "untracked_mass": lost, "cascade": dump}))?;
    }
    Ok(())
}

fn overlap_law(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let params = cfg.params()?;
    let ens = CascadeEnsemble::new(params.clone(), cfg.branching()?, cfg.cascade()?.n.unwrap_or(10_000), seed);
    for p in 0..params.depth() {
        let chk = core(overlap_cdf_check(&ens, p))?;
        em.emit("overlap_cdf", &json!({"M": ens.m, "check": chk, "passes": chk.passes(3.0)}))?;
    }
    Ok(())
}

fn mp_eval(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let spec = cfg.mp_spec()?;
    let n = section(&cfg.config.mp, "mp")?.n_samples;
    if spec.h.omega_star_coordinate && spec.omega_star.is_none() {
        let (w, est) = core(estimate_p_inf_omega_star(&spec, n, seed))?;
        return em.emit("functional", &json!({"omega_star": w, "estimate": est}));
    }
    let est = core(estimate_p(&spec, n, seed))?;
    em.emit("functional", &est)
}

fn run_searches(cfg: &Loaded, seed: u64) -> Result<Vec<MinimizeResult>, CliError> {
    let specs = cfg.searches(seed)?;
    let mut out: Vec<MinimizeResult> = Vec::new();
    for spec in &specs {
        let init = match out.last() {
            Some(prev) if prev.r + 1 == spec.r => Some(core(embed_one_level(&prev.zetas, &prev.h, spec.zeta_max))?),
            _ => None,
        };
        out.push(core(minimize_p(spec, init.as_ref().map(|(z, h)| (z.as_slice(), h))))?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct MinimumRecord<'a> {
    r: usize,
    zetas: &'a [f64],
    h: &'a rpcglass::OrderParamH,
    value: Estimate,
    reevaluated: &'a rpcglass::mp_functional::FunctionalEstimate,
    starts: &'a [rpcglass::optimizer::StartSummary],
    evaluations: usize,
}

fn emit_minimum(em: &mut Emitter, m: &MinimizeResult) -> Res {
    em.emit(
        "minimum",
        &MinimumRecord {
            r: m.r,
            zetas: &m.zetas,
            h: &m.h,
            value: m.value,
            reevaluated: &m.reevaluated,
            starts: &m.starts,
            evaluations: m.trace.len(),
        },
    )
}

fn mp_min(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let minima = run_searches(cfg, seed)?;
    let specs = cfg.searches(seed)?;
    let search = section(&cfg.config.search, "search")?;
    let mut running: Option<(usize, Estimate)> = None;
    for (m, spec) in minima.iter().zip(&specs) {
        emit_minimum(em, m)?;
        let e = m.fresh();
        if running.is_none_or(|(_, r)| e.value < r.value) {
            running = Some((m.r, e));
        }
        let (best_r, best) = running.unwrap();
        em.emit("running_min", &json!({"r": m.r, "best_r": best_r, "value": best}))?;
        if best_r == m.r {
            if let Some(path) = &search.best_json {
                json_file(&cfg.dir.join(path), &core(m.best_spec(spec))?)?;
            }
        }
    }
    if let Some(path) = &search.trace_csv {
        let rows: Vec<_> = minima
            .iter()
            .flat_map(|m| m.trace.iter().map(move |t| json!({"r": m.r, "row": t})))
            .collect();
        csv_file(&cfg.dir.join(path), &rows)?;
    }
    Ok(())
}

fn rpc_identity(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let s = section(&cfg.config.recursion, "recursion")?;
    let params = core(CascadeParams::new(s.spec.zetas.clone()))?;
    let ens = CascadeEnsemble::new(params, s.m, s.n, seed);
    let chk = core(rpc_average_identity_check(&s.spec, &ens))?;
    em.emit("identity", &json!({"M": s.m, "check": chk, "passes": chk.passes(3.0)}))
}

fn invariance(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let s = section(&cfg.config.recursion, "recursion")?;
    let rep = core(invariance_test(&s.spec, s.m, s.n, seed))?;
    em.emit("invariance", &json!({"report": rep, "passes": rep.passes(3.0)}))
}

fn instances(cfg: &Loaded, seed: u64) -> Result<Vec<HamiltonianInstance>, CliError> {
    let sys = cfg.system_section()?;
    let spec = cfg.system(sys.n)?;
    (0..sys.n_instances)
        .into_par_iter()
        .map(|i| core(spec.instance(seed, i)))
        .collect()
}

fn finite_fe(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let method = cfg.system_section()?.method.clone();
    let insts = instances(cfg, seed)?;
    let fes: Vec<_> = insts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| core(free_energy(inst, &method, rng::derive_seed(seed, i as u64))))
        .collect::<Result<_, _>>()?;
    for (i, f) in fes.iter().enumerate() {
        em.emit("instance_free_energy", &json!({"instance": i, "free_energy": f}))?;
    }
    let values: Vec<f64> = fes.iter().map(|f| f.value).collect();
    em.emit(
        "average_free_energy",
        &json!({"N": cfg.system_section()?.n, "estimate": Estimate::from_samples(&values)}),
    )
}

fn replica_sets(cfg: &Loaded, seed: u64, per_instance: usize) -> Result<Vec<ReplicaBatch>, CliError> {
    let method = cfg.system_section()?.method.clone();
    let insts = instances(cfg, seed)?;
    insts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut r = rng::stream(seed, tags::REPLICAS, i as u64);
            core(sample_replicas(inst, per_instance, &mut r, &method))
        })
        .collect()
}

fn replicas(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let s = section(&cfg.config.replicas, "replicas")?;
    let sys = cfg.system_section()?;
    let spec = cfg.system(sys.n)?;
    let inst = core(spec.instance(seed, s.instance))?;
    let mut r = rng::stream(seed, tags::REPLICAS, s.instance as u64);
    let batch = core(sample_replicas(&inst, s.n, &mut r, &sys.method))?;
    em.emit("replicas", &json!({"instance": s.instance, "batch": batch}))?;
    if let Some(path) = &s.instance_out {
        json_file(&cfg.dir.join(path), &inst)?;
    }
    if let Some(path) = &s.histogram_csv {
        let rows: Vec<_> = match &sys.method {
            Method::Exact { cap } => {
                let t = core(GibbsTable::new(&inst, *cap))?;
                t.overlap_distribution()
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| json!({"q": overlap_value(j, inst.n), "probability": p, "std_error": 0.0}))
                    .collect()
            }
            Method::Mcmc(mc) => core(overlap_histogram_mcmc(&inst, mc, seed))?
                .iter()
                .enumerate()
                .map(|(j, e)| json!({"q": overlap_value(j, inst.n), "probability": e.value, "std_error": e.std_error}))
                .collect(),
        };
        csv_file(&cfg.dir.join(path), &rows)?;
    }
    Ok(())
}

fn gg_check(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let g = section(&cfg.config.gg, "gg")?;
    let cap = match &cfg.system_section()?.method {
        Method::Exact { cap } => *cap,
        Method::Mcmc(_) => return Err(CliError::Config("gg-check draws replicas exactly; use method = \"exact\"".into())),
    };
    let insts = instances(cfg, seed)?;
    let (report, _) = core(gg_residual(&insts, &g.config, cap, seed))?;
    em.emit("gg_residual", &report)?;
    if g.compare_exact {
        let cmp = core(gg_compare_exact(&insts, &g.config, cap, seed))?;
        em.emit("gg_exact_comparison", &cmp)?;
    }
    Ok(())
}

fn um_check(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let s = section(&cfg.config.ultrametricity, "ultrametricity")?;
    let sets = replica_sets(cfg, seed, 3 * s.triplets)?;
    let triplets: Vec<[&[i8]; 3]> = sets
        .iter()
        .flat_map(|b| b.replicas.chunks_exact(3).map(|c| [c[0].as_slice(), c[1].as_slice(), c[2].as_slice()]))
        .collect();
    let est = core(ultrametricity_violation(&triplets, s.delta))?;
    em.emit("ultrametricity", &json!({"delta": s.delta, "violation": est}))
}

fn positivity(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let s = section(&cfg.config.positivity, "positivity")?;
    let sets = replica_sets(cfg, seed, 2 * s.pairs)?;
    let pairs: Vec<[&[i8]; 2]> = sets
        .iter()
        .flat_map(|b| b.replicas.chunks_exact(2).map(|c| [c[0].as_slice(), c[1].as_slice()]))
        .collect();
    let est = core(positivity_mass(&pairs, s.threshold))?;
    em.emit("positivity", &json!({"threshold": s.threshold, "mass": est}))
}

fn cavity_check(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let s = section(&cfg.config.cavity, "cavity")?;
    let spec = CavitySpec {
        n: s.n,
        m: s.m,
        sets: s.sets.clone(),
        model: cfg.model()?,
        lambda: cfg.lambda()?,
        perturbation: cfg.config.perturbation.clone(),
        h: cfg.h()?,
        params: cfg.params()?,
        branching: s.branching,
        omega_star: cfg.config.omega_star,
        poisson_cap: s.poisson_cap,
    };
    let res = core(cavity_residual(&spec, s.n_samples, seed))?;
    em.emit("cavity", &res)
}

fn fl_compare(cfg: &Loaded, seed: u64, em: &mut Emitter) -> Res {
    let fl = section(&cfg.config.fl, "fl")?;
    let sys = cfg.system_section()?;
    let minima = run_searches(cfg, seed)?;
    for m in &minima {
        emit_minimum(em, m)?;
    }
    let system = cfg.system(sys.n)?;
    let rep = core(fl_gap_report(&minima, &system, &fl.sizes, fl.n_instances, &sys.method, seed, fl.n_sigma))?;
    if let Some(w) = &rep.warning {
        eprintln!("rpcglass: warning: {w}");
        em.emit("warning", &json!({"message": w}))?;
    }
    for d in &rep.depths {
        em.emit("depth", d)?;
    }
    for row in &rep.rows {
        em.emit("fl_row", row)?;
    }
    Ok(())
}
