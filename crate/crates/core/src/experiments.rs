//! Experiment runner: turns a resolved configuration into CSV tables and a verdict.
//!
//! `run` is pure apart from the thread pool it executes on; `execute` adds loading, validation,
//! overrides and the artifact directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::coefficients::CoefficientModel;
use crate::config::{Discretization, Experiment, ExperimentConfig};
use crate::coupling::{contraction_report, simulate_coupled_pair};
use crate::discretize::{build_component, epsilon_terms, ApproximatingComponent};
use crate::dynamics::{simulate_lifted_with, Record};
use crate::ergodics::{
    ergodic_decay, ipm_convergence, lift_independence_test, rows_to_csv, stationarity_test, EstimatorOptions, Row,
};
use crate::error::{Error, Result};
use crate::kernelbasis::{LiftingBasis, Which};
use crate::noise::NoisePlan;
use crate::output::{self, Cell, Csv};
use crate::stats::mean_se;
use crate::weights::{build_phi_coupling, check_lyapunov_sufficient, compute_coupling_constants, find_coupling_parameters, BasisMeasure};

/// Artifacts of one run, before they are written.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<(String, String)>,
    pub verdict: Value,
    pub pass: bool,
    /// Human-readable summary lines.
    pub summary: Vec<String>,
}

/// Cells for a basis: atoms map one to one, anything with a density goes through the partition.
pub fn component_for(basis: &Arc<LiftingBasis>, d: &Discretization) -> Result<ApproximatingComponent> {
    if basis.segments.is_empty() {
        ApproximatingComponent::from_atoms(basis)
    } else {
        build_component(basis, d.k, d.theta_max, d.quad_tol)
    }
}

fn plan_for(cfg: &ExperimentConfig, n: usize) -> Result<NoisePlan> {
    NoisePlan::new(cfg.rng.seed, cfg.scheme.h, cfg.scheme.horizon, n)
}

fn estimator(cfg: &ExperimentConfig, bootstrap: usize, directions: usize) -> EstimatorOptions {
    EstimatorOptions {
        bootstrap,
        directions,
        seed: cfg.rng.seed,
    }
}

fn verdict_base(cfg: &ExperimentConfig, pass: bool) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("experiment".into(), json!(cfg.experiment.tag()));
    m.insert("pass".into(), json!(pass));
    m.insert("seed".into(), json!(cfg.rng.seed));
    m.insert("seed_b".into(), json!(cfg.seed_b()));
    m
}

fn finish(cfg: &ExperimentConfig, pass: bool, extra: Value, files: Vec<(String, String)>, summary: Vec<String>) -> Outcome {
    let mut v = verdict_base(cfg, pass);
    if let Value::Object(e) = extra {
        v.extend(e);
    }
    Outcome {
        files,
        verdict: Value::Object(v),
        pass,
        summary,
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let basis = Arc::new(cfg.basis.build("basis")?);
    let coeffs = cfg.coefficients.build(basis.n)?;
    match &cfg.experiment {
        Experiment::KernelError { t_min, t_max, points, tolerance, ladder } => {
            kernel_error(cfg, &basis, *t_min, *t_max, *points, *tolerance, ladder.as_deref())
        }
        Experiment::Simulate { record_every, paths, expected_variance } => {
            simulate(cfg, &basis, &coeffs, *record_every, *paths, *expected_variance)
        }
        Experiment::Coupling { .. } => coupling(cfg, &basis, &coeffs),
        Experiment::Ergodic { .. } => ergodic(cfg, &basis, &coeffs),
        Experiment::Stationarity { burn_in, lags, bootstrap, directions } => {
            let c = component_for(&basis, &cfg.discretization)?;
            let r = stationarity_test(
                &c,
                &coeffs,
                &cfg.initial,
                &plan_for(cfg, basis.n)?,
                *burn_in,
                lags,
                cfg.rng.trajectories,
                &estimator(cfg, *bootstrap, *directions),
            )?;
            let summary = r
                .lags
                .iter()
                .map(|l| format!("lag {}: W1 = {:.4e}, null {:.4e} ± {:.4e} -> {}", l.lag, l.w1, l.null.mean, l.null.sd, word(l.pass)))
                .collect();
            Ok(finish(
                cfg,
                r.pass,
                json!({ "report": r }),
                vec![("results.csv".into(), rows_to_csv(&r.rows(c.len())))],
                summary,
            ))
        }
        Experiment::LiftIndependence { basis_b, grid, bootstrap, directions } => {
            let b = Arc::new(basis_b.build("experiment.basis_b")?);
            let d = &cfg.discretization;
            let r = lift_independence_test(
                &basis,
                &b,
                &coeffs,
                d.k,
                d.theta_max,
                d.quad_tol,
                grid,
                &cfg.initial,
                &plan_for(cfg, basis.n)?,
                cfg.seed_b(),
                cfg.rng.trajectories,
                &estimator(cfg, *bootstrap, *directions),
            )?;
            let row = Row {
                experiment: "lift_independence",
                k: r.k_b,
                t_or_lag: r.horizon,
                estimate: r.w1,
                stderr: r.null.sd,
                floor: r.null.floor,
            };
            let summary = vec![format!(
                "W1 = {:.4e}, floor {:.4e} + bias {:.4e} -> {}",
                r.w1,
                r.null.floor,
                r.bias,
                word(r.pass)
            )];
            Ok(finish(cfg, r.pass, json!({ "report": r }), vec![("results.csv".into(), rows_to_csv(&[row]))], summary))
        }
        Experiment::IpmConvergence { ladder, observable, bootstrap, directions } => {
            let d = &cfg.discretization;
            let r = ipm_convergence(
                &basis,
                &coeffs,
                ladder,
                d.theta_max,
                d.quad_tol,
                &cfg.initial,
                &plan_for(cfg, basis.n)?,
                cfg.seed_b(),
                cfg.rng.trajectories,
                *observable,
                &estimator(cfg, *bootstrap, *directions),
            )?;
            let mut summary: Vec<String> = r
                .rungs
                .iter()
                .map(|g| format!("k = {}: eps = {:.4e}, W1 = {:.4e}, floor {:.4e}", g.k, g.epsilon, g.w1, g.null.floor))
                .collect();
            summary.push(format!("Spearman = {:.3} -> {}", r.spearman, word(r.pass)));
            Ok(finish(cfg, r.pass, json!({ "report": r }), vec![("results.csv".into(), rows_to_csv(&r.rows()))], summary))
        }
        Experiment::LyapunovCheck {} => {
            let mu = BasisMeasure {
                basis: &basis,
                quad_tol: cfg.discretization.quad_tol,
            };
            let r = check_lyapunov_sufficient(&mu, &coeffs.meta)?;
            let mut csv = Csv::new(&["kappa", "I", "gamma", "margin", "pass"]);
            csv.row(&[
                Cell::F(r.kappa),
                Cell::F(r.i),
                Cell::F(coeffs.meta.gamma.unwrap_or(f64::NAN)),
                Cell::F(r.margin),
                Cell::I(r.pass as i64),
            ]);
            let summary = vec![format!("I = {:.10e}, margin = {:.6} -> {}", r.i, r.margin, word(r.pass))];
            Ok(finish(
                cfg,
                r.pass,
                json!({ "margin": r.margin, "I": r.i, "kappa": r.kappa, "details": r.details }),
                vec![("lyapunov.csv".into(), csv.as_str().to_string())],
                summary,
            ))
        }
    }
}

fn word(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "fail"
    }
}

fn kernel_error(
    cfg: &ExperimentConfig,
    basis: &Arc<LiftingBasis>,
    t_min: f64,
    t_max: f64,
    points: usize,
    tolerance: f64,
    ladder: Option<&[usize]>,
) -> Result<Outcome> {
    let d = &cfg.discretization;
    let c = component_for(basis, d)?;
    let mut csv = Csv::new(&["t", "kernel", "exact", "reconstructed", "rel_err"]);
    let mut worst = [0.0f64; 2];
    for i in 0..points {
        let t = t_min * (t_max / t_min).powf(i as f64 / (points - 1) as f64);
        for (j, which) in [Which::Drift, Which::Diffusion].into_iter().enumerate() {
            let exact = basis.eval_kernel(which, t, d.quad_tol)?;
            let approx = c.reconstructed_kernel(which, t);
            let rel = (&exact - &approx).norm() / exact.norm();
            worst[j] = worst[j].max(rel);
            csv.row(&[
                Cell::F(t),
                Cell::S(if j == 0 { "drift" } else { "diffusion" }.into()),
                Cell::F(exact.norm()),
                Cell::F(approx.norm()),
                Cell::F(rel),
            ]);
        }
    }
    let mut files = vec![("kernel_error.csv".to_string(), csv.as_str().to_string()), ("cells.csv".to_string(), c.to_csv())];
    let mut pass = worst.iter().all(|w| *w <= tolerance);
    let mut summary = vec![format!(
        "max rel_err: drift {:.4e}, diffusion {:.4e} (tolerance {:.1e}, {} cells, theta_max {:.4e})",
        worst[0],
        worst[1],
        tolerance,
        c.len(),
        c.theta_max
    )];
    let mut extra = json!({
        "max_rel_err": { "drift": worst[0], "diffusion": worst[1] },
        "tolerance": tolerance,
        "cells": c.len(),
        "theta_max": c.theta_max,
    });
    if let Some(ladder) = ladder {
        let mut eps = Csv::new(&["k", "cells", "theta_max", "epsilon", "node", "drift_interior", "drift_tail", "diffusion_interior", "diffusion_tail"]);
        let mut values = vec![];
        for &k in ladder {
            let ck = component_for(basis, &Discretization { k, ..d.clone() })?;
            let e = epsilon_terms(basis, &ck, d.quad_tol)?;
            values.push(e.total());
            eps.row(&[
                Cell::I(k as i64),
                Cell::I(ck.len() as i64),
                Cell::F(ck.theta_max),
                Cell::F(e.total()),
                Cell::F(e.node),
                Cell::F(e.drift_interior),
                Cell::F(e.drift_tail),
                Cell::F(e.diffusion_interior),
                Cell::F(e.diffusion_tail),
            ]);
            summary.push(format!("k = {k}: epsilon = {:.6e}", e.total()));
        }
        let decreasing = values.windows(2).all(|w| w[1] < w[0]) || values.iter().all(|v| *v == 0.0);
        pass &= decreasing;
        extra["epsilon"] = json!({ "ladder": ladder, "values": values, "decreasing": decreasing });
        files.push(("epsilon.csv".into(), eps.as_str().to_string()));
    }
    Ok(finish(cfg, pass, extra, files, summary))
}

/// Trajectories are processed in fixed chunks; per-chunk power sums are combined in chunk order.
const CHUNK: usize = 64;

struct ChunkStats {
    s1: Vec<f64>,
    s2: Vec<f64>,
    terminal: Vec<Vec<f64>>,
    paths: Vec<(u64, Vec<f64>, Vec<Vec<f64>>)>,
}

fn simulate(
    cfg: &ExperimentConfig,
    basis: &Arc<LiftingBasis>,
    coeffs: &CoefficientModel,
    every: usize,
    paths: usize,
    expected_variance: Option<f64>,
) -> Result<Outcome> {
    let c = component_for(basis, &cfg.discretization)?;
    let plan = plan_for(cfg, basis.n)?;
    let n = c.n;
    let last = plan.steps();
    let keep: Vec<usize> = (0..=last).filter(|m| m % every == 0 || *m == last).collect();
    let nt = keep.len();
    let total = cfg.rng.trajectories;
    let chunks: Vec<Result<ChunkStats>> = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut st = ChunkStats {
                s1: vec![0.0; nt * n],
                s2: vec![0.0; nt * n],
                terminal: vec![],
                paths: vec![],
            };
            for t in (ci * CHUNK..((ci + 1) * CHUNK).min(total)).map(|t| t as u64) {
                let z0 = cfg.initial.sample(&c, plan.seed, t)?;
                let full = (t as usize) < paths;
                let (mut times, mut xs) = (vec![], vec![]);
                let mut j = 0;
                simulate_lifted_with(&c, coeffs, &z0, &plan, t, |m, _, x| {
                    if j < nt && keep[j] == m {
                        for (q, v) in x.iter().enumerate() {
                            st.s1[j * n + q] += v;
                            st.s2[j * n + q] += v * v;
                        }
                        if full {
                            times.push(m as f64 * plan.h);
                            xs.push(x.to_vec());
                        }
                        if m == last {
                            st.terminal.push(x.to_vec());
                        }
                        j += 1;
                    }
                })?;
                if full {
                    st.paths.push((t, times, xs));
                }
            }
            Ok(st)
        })
        .collect();
    let mut s1 = vec![0.0; nt * n];
    let mut s2 = vec![0.0; nt * n];
    let mut terminal = vec![];
    let mut path_csv = Csv::new(&["trajectory", "t", "dim", "x"]);
    for ch in chunks {
        let ch = ch?;
        s1.iter_mut().zip(&ch.s1).for_each(|(a, b)| *a += b);
        s2.iter_mut().zip(&ch.s2).for_each(|(a, b)| *a += b);
        terminal.extend(ch.terminal);
        for (t, times, xs) in ch.paths {
            for (tm, x) in times.iter().zip(&xs) {
                for (q, v) in x.iter().enumerate() {
                    path_csv.row(&[Cell::I(t as i64), Cell::F(*tm), Cell::I(q as i64), Cell::F(*v)]);
                }
            }
        }
    }
    let nf = total as f64;
    let mut summary_csv = Csv::new(&["t", "dim", "mean", "var"]);
    for (j, &m) in keep.iter().enumerate() {
        for q in 0..n {
            let mean = s1[j * n + q] / nf;
            let var = if total > 1 { (s2[j * n + q] - nf * mean * mean) / (nf - 1.0) } else { 0.0 };
            summary_csv.row(&[Cell::F(m as f64 * plan.h), Cell::I(q as i64), Cell::F(mean), Cell::F(var)]);
        }
    }
    let mut dims = vec![];
    let mut pass = true;
    let mut summary = vec![];
    for q in 0..n {
        let x: Vec<f64> = terminal.iter().map(|v| v[q]).collect();
        let (mean, se_mean) = mean_se(&x);
        let dev: Vec<f64> = x.iter().map(|v| (v - mean).powi(2) * nf / (nf - 1.0).max(1.0)).collect();
        let (var, se_var) = mean_se(&dev);
        let ok = expected_variance.map(|e| (var - e).abs() <= 3.0 * se_var);
        pass &= ok.unwrap_or(true);
        summary.push(format!(
            "X[{q}] at T: mean {mean:.6} ± {se_mean:.2e}, var {var:.6} ± {se_var:.2e}{}",
            expected_variance.map_or(String::new(), |e| format!(" (expected {e}) -> {}", word(ok.unwrap())))
        ));
        dims.push(json!({ "mean": mean, "se_mean": se_mean, "var": var, "se_var": se_var, "variance_check": ok }));
    }
    Ok(finish(
        cfg,
        pass,
        json!({ "terminal": dims, "T": last as f64 * plan.h, "trajectories": total, "cells": c.len() }),
        vec![("summary.csv".into(), summary_csv.as_str().to_string()), ("paths.csv".into(), path_csv.as_str().to_string())],
        summary,
    ))
}

fn coupling(cfg: &ExperimentConfig, basis: &Arc<LiftingBasis>, coeffs: &CoefficientModel) -> Result<Outcome> {
    let Experiment::Coupling { y1, y2, m, delta, l, r, lambda, record_every, expected_rate } = &cfg.experiment else {
        unreachable!()
    };
    let c = component_for(basis, &cfg.discretization)?;
    let radius = r.unwrap_or(f64::INFINITY);
    let cc = match m {
        Some(m) => compute_coupling_constants(&c, &coeffs.meta, *m, *delta, *l, radius)?,
        None => find_coupling_parameters(&c, &coeffs.meta, radius)?,
    };
    if !cc.certified && lambda.is_none() {
        return Err(Error::invalid(
            "coupling",
            "experiment.m",
            format!("epsilon = {:.4e} exceeds 1/2 at m = {}", cc.epsilon, cc.m),
        ));
    }
    let c_ue = coeffs
        .meta
        .c_ue
        .ok_or_else(|| Error::invalid("coupling", "coefficients.c_ue", "uniform ellipticity constant is required"))?;
    let phi = build_phi_coupling(&c, cc.m, cc.delta, cc.l, cc.r)?;
    let gain = lambda.unwrap_or(cc.lambda);
    let plan = plan_for(cfg, basis.n)?;
    let z1 = y1.sample(&c, plan.seed, 0)?;
    let z2 = y2.sample(&c, plan.seed, 0)?;
    let record = Record {
        every: *record_every,
        states: false,
    };
    let runs = (0..cfg.rng.trajectories as u64)
        .into_par_iter()
        .map(|t| simulate_coupled_pair(&c, coeffs, &phi, gain, &z1, &z2, &plan, t, record))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let kappa = crate::weights::component_kappa(&c);
    let rep = contraction_report(&runs, kappa, c_ue * gain)?;
    let mut csv = Csv::new(&["t", "mean_dist", "se_dist", "envelope", "mean_energy", "se_energy"]);
    for j in 0..rep.times.len() {
        let e: Vec<f64> = runs.iter().map(|r| r.energy[j]).collect();
        let (me, se) = mean_se(&e);
        csv.row(&[
            Cell::F(rep.times[j]),
            Cell::F(rep.mean_dist[j]),
            Cell::F(rep.se_dist[j]),
            Cell::F(rep.envelope[j]),
            Cell::F(me),
            Cell::F(se),
        ]);
    }
    let rate_ok = expected_rate.map(|e| rep.r_hat.is_some_and(|r| (r - e).abs() <= 0.01 * e.abs()));
    let pass = rep.contraction_pass && rep.kl_pass && rate_ok.unwrap_or(true);
    let summary = vec![
        format!(
            "m = {}, delta = {:.4e}, L = {:.4e}, epsilon = {:.4e}, lambda = {:.6e}",
            cc.m, cc.delta, cc.l, cc.epsilon, gain
        ),
        format!(
            "r_hat = {}, contraction {}, KL {} (mean energy {:.4e}, budget {:.4e})",
            rep.r_hat.map_or("undefined".into(), |r| format!("{r:.6}")),
            word(rep.contraction_pass),
            word(rep.kl_pass),
            rep.mean_energy,
            rep.kl_budget
        ),
    ];
    let mut extra = rep.summary();
    extra["constants"] = json!(cc);
    extra["lambda"] = json!(gain);
    extra["kappa"] = json!(kappa);
    extra["dist0"] = json!(rep.dist0);
    extra["mean_energy"] = json!(rep.mean_energy);
    extra["kl_budget"] = json!(rep.kl_budget);
    extra["rate_check"] = json!(rate_ok);
    Ok(finish(
        cfg,
        pass,
        extra,
        vec![
            ("coupling.csv".into(), csv.as_str().to_string()),
            ("weights.csv".into(), phi.to_csv()),
            ("pair0.csv".into(), runs[0].to_csv()),
        ],
        summary,
    ))
}

fn ergodic(cfg: &ExperimentConfig, basis: &Arc<LiftingBasis>, coeffs: &CoefficientModel) -> Result<Outcome> {
    let Experiment::Ergodic { y1, y2, grid_points, fit_start, bootstrap, directions, expected_rate } = &cfg.experiment else {
        unreachable!()
    };
    let c = component_for(basis, &cfg.discretization)?;
    let plan = plan_for(cfg, basis.n)?;
    let last = plan.steps();
    let mut keep: Vec<usize> = (0..*grid_points)
        .map(|i| ((i as f64) * last as f64 / (*grid_points - 1) as f64).round() as usize)
        .collect();
    keep.dedup();
    let r = ergodic_decay(
        &c,
        coeffs,
        y1,
        y2,
        &plan,
        cfg.seed_b(),
        cfg.rng.trajectories,
        &keep,
        *fit_start,
        &estimator(cfg, *bootstrap, *directions),
    )?;
    let final_w1 = *r.w1.last().unwrap();
    let final_floor = r.null.last().unwrap().floor;
    let below = final_w1 <= final_floor;
    let rate_ok = expected_rate.map(|e| match (r.r_hat, r.r_se) {
        (Some(rh), Some(se)) => (rh - e).abs() <= 3.0 * se,
        _ => false,
    });
    let pass = r.r_hat.is_some_and(|v| v > 0.0) && below && rate_ok.unwrap_or(true);
    let summary = vec![
        format!(
            "r_hat = {} ± {}, burn-in {}",
            r.r_hat.map_or("undefined".into(), |v| format!("{v:.6}")),
            r.r_se.map_or("undefined".into(), |v| format!("{v:.3e}")),
            r.burn_in.map_or("undefined".into(), |v| format!("{v:.4}"))
        ),
        format!("final W1 = {final_w1:.4e}, floor {final_floor:.4e} -> {}", word(pass)),
    ];
    let extra = json!({
        "r_hat": r.r_hat,
        "r_se": r.r_se,
        "intercept": r.intercept,
        "burn_in": r.burn_in,
        "final_w1": final_w1,
        "final_floor": final_floor,
        "final_below_floor": below,
        "rate_check": rate_ok,
        "lyapunov_pass": r.lyapunov_pass,
        "warnings": r.warnings,
        "fit_window": r.window,
    });
    Ok(finish(cfg, pass, extra, vec![("results.csv".into(), rows_to_csv(&r.rows(c.len())))], summary))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub outcome: Outcome,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Load, override and validate a configuration.
pub fn prepare(o: &RunOptions) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&o.config)?;
    if let Some(s) = o.seed_override {
        cfg.override_seed(s);
    }
    if let Some(dir) = &o.out {
        cfg.output.dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(o: &RunOptions) -> Result<RunSummary> {
    let started = unix_now();
    let cfg = prepare(o)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = o.threads {
            if t == 0 {
                return Err(Error::invalid("cli", "threads", "must be positive"));
            }
            b = b.num_threads(t);
        }
        b.build().map_err(|e| Error::invalid("cli", "threads", e.to_string()))?
    };
    let outcome = pool.install(|| run(&cfg))?;
    let dir = cfg.output.dir.clone();
    write_outcome(&dir, &cfg, &outcome)?;
    let meta = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": o.config.display().to_string(),
        "threads": pool.current_num_threads(),
        "started_unix": started,
        "finished_unix": unix_now(),
    });
    output::write_json(&dir.join("metadata.json"), &meta)?;
    Ok(RunSummary { dir, outcome })
}

pub fn write_outcome(dir: &Path, cfg: &ExperimentConfig, outcome: &Outcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    output::write_json(&dir.join("resolved_config.json"), &serde_json::to_value(cfg)?)?;
    for (name, body) in &outcome.files {
        output::write(&dir.join(name), body)?;
    }
    output::write_json(&dir.join("verdict.json"), &outcome.verdict)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(experiment: &str) -> ExperimentConfig {
        cfg_beta(0.5, experiment)
    }

    fn cfg_beta(beta: f64, experiment: &str) -> ExperimentConfig {
        let text = format!(
            r#"{{
            "basis": {{"expsum": {{"terms": [{{"rate": 1.0, "Mb": 1.0, "Ms": 1.0}}]}}}},
            "coefficients": {{"drift": {{"type": "linear", "beta": {beta}}}, "diffusion": {{"type": "constant", "s": 1.0}}}},
            "scheme": {{"h": 0.01, "T": 2.0}},
            "rng": {{"seed": 3, "trajectories": 128}},
            "experiment": {experiment}
        }}"#
        );
        let mut c = ExperimentConfig::from_json(&text).unwrap();
        c.resolve(Path::new(".")).unwrap();
        c.validate().unwrap();
        c
    }

    #[test]
    fn lyapunov_example() {
        // b(x) = x/2 has coercivity constant 1/2.
        let o = run(&cfg_beta(-0.5, r#"{"type": "lyapunov_check"}"#)).unwrap();
        assert!(o.pass);
        assert_eq!(o.verdict["margin"], json!(0.5));
    }

    #[test]
    fn simulate_is_thread_independent() {
        let c = cfg(r#"{"type": "simulate", "record_every": 10, "paths": 3}"#);
        let run_with = |t| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| run(&c).unwrap());
        let a = run_with(1);
        assert_eq!(a, run_with(3));
        assert!(a.files[1].1.lines().count() == 1 + 3 * 21);
    }

    #[test]
    fn kernel_error_on_atoms_is_exact() {
        let o = run(&cfg(r#"{"type": "kernel_error", "points": 5, "ladder": [1, 2]}"#)).unwrap();
        assert!(o.pass);
        assert_eq!(o.verdict["max_rel_err"]["drift"], json!(0.0));
    }

    #[test]
    fn coupling_runs() {
        let o = run(&cfg(
            r#"{"type": "coupling", "y1": {"type": "constant", "value": [1.0]}, "y2": {"type": "constant", "value": [-1.0]}}"#,
        ))
        .unwrap();
        assert!(o.pass, "{:?}", o.verdict);
    }
}
