//! Ensemble diagnostics: empirical Wasserstein distances, decay fits, stationarity, lift
//! independence and convergence of the stationary marginal along a discretization ladder.
//!
//! Trajectories run in parallel but are collected in index order and every reduction runs
//! sequentially afterwards, so results do not depend on the thread count.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientModel;
use crate::discretize::{build_component, epsilon_k, ApproximatingComponent, ThetaMax};
use crate::dynamics::simulate_lifted_with;
use crate::error::{Error, Result};
use crate::kernelbasis::{LiftingBasis, Which};
use crate::noise::{fill_normals, stream, NoisePlan, Purpose};
use crate::output::{Cell, Csv};
use crate::stats::{mean_se, ols, quantile_sorted, spearman, std_dev};
use crate::weights::check_lyapunov_sufficient;

/// Auxiliary stream ids: projection directions use `DIRECTIONS`, bootstrap replicate `r` of
/// resampling task `j` uses `BOOTSTRAP + j·2^20 + r`.
const DIRECTIONS: u64 = 1 << 62;
const BOOTSTRAP: u64 = 1 << 61;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// `n` entries are copied into every cell, `k·n` entries are taken cell by cell.
    Constant { value: Vec<f64> },
    /// Every entry drawn independently from `N(mean, std²)`.
    Gaussian { mean: f64, std: f64 },
}

impl InitialState {
    pub fn zero() -> Self {
        InitialState::Gaussian { mean: 0.0, std: 0.0 }
    }

    pub fn sample(&self, c: &ApproximatingComponent, seed: u64, trajectory: u64) -> Result<Vec<f64>> {
        let total = c.n * c.cells.len();
        match self {
            InitialState::Constant { value } if value.len() == c.n => Ok(value.repeat(c.cells.len())),
            InitialState::Constant { value } if value.len() == total => Ok(value.clone()),
            InitialState::Constant { value } => Err(Error::invalid(
                "ergodics",
                "initial.value",
                format!("expected {} or {} entries, got {}", c.n, total, value.len()),
            )),
            InitialState::Gaussian { mean, std } => {
                if !(*std >= 0.0) || !mean.is_finite() || !std.is_finite() {
                    return Err(Error::invalid("ergodics", "initial.std", "mean and std must be finite, std >= 0"));
                }
                let mut z = vec![0.0; total];
                if *std > 0.0 {
                    fill_normals(&mut stream(seed, Purpose::InitialStates, trajectory), &mut z);
                }
                Ok(z.iter().map(|v| mean + std * v).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    #[default]
    X,
    NormH,
}

/// Samples of one observable at a set of times: `samples[time][trajectory]` is a point of R^dim.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSeries {
    pub times: Vec<f64>,
    pub samples: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
    pub trajectories: Range<u64>,
}

/// Run trajectories `ids` and keep the observable at the (sorted) grid steps `keep`.
pub fn run_ensemble(
    c: &ApproximatingComponent,
    coeffs: &CoefficientModel,
    init: &InitialState,
    plan: &NoisePlan,
    ids: Range<u64>,
    keep: &[usize],
    observable: Observable,
) -> Result<EnsembleSeries> {
    if keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("ergodics", "times", "must be strictly increasing"));
    }
    if keep.last().is_some_and(|&s| s > plan.steps()) {
        return Err(Error::invalid("ergodics", "times", "exceed the horizon scheme.T"));
    }
    let per_traj: Vec<Result<Vec<Vec<f64>>>> = ids
        .clone()
        .into_par_iter()
        .map(|t| {
            let z0 = init.sample(c, plan.seed, t)?;
            let mut out = Vec::with_capacity(keep.len());
            let mut next = 0;
            simulate_lifted_with(c, coeffs, &z0, plan, t, |m, z, x| {
                if next < keep.len() && keep[next] == m {
                    out.push(match observable {
                        Observable::X => x.to_vec(),
                        Observable::NormH => vec![c.observe(z).map(|o| o.norm_h).unwrap_or(f64::NAN)],
                    });
                    next += 1;
                }
            })?;
            Ok(out)
        })
        .collect();
    let mut samples = vec![Vec::with_capacity(ids.clone().count()); keep.len()];
    for r in per_traj {
        for (j, v) in r?.into_iter().enumerate() {
            samples[j].push(v);
        }
    }
    Ok(EnsembleSeries {
        times: keep.iter().map(|&s| s as f64 * plan.h).collect(),
        samples,
        seed: plan.seed,
        trajectories: ids,
    })
}

/// Grid step nearest to `t`.
pub fn step_of(plan: &NoisePlan, t: f64) -> usize {
    (t / plan.h).round() as usize
}

pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("ergodics", "samples", "must be nonempty"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(w1_sorted(&a, &b))
}

fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    // ∫|F_A − F_B| over the merged grid.
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let x = if j >= b.len() || (i < a.len() && a[i] <= b[j]) { a[i] } else { b[j] };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        prev = x;
    }
    total
}

/// `D` directions uniform on the unit sphere of R^n, fixed by `seed`.
pub fn directions(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Purpose::Auxiliary, DIRECTIONS);
    (0..count)
        .map(|_| loop {
            let mut v = vec![0.0; n];
            fill_normals(&mut rng, &mut v);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

pub fn sliced_w1(a: &[Vec<f64>], b: &[Vec<f64>], count: usize, seed: u64) -> Result<f64> {
    if count == 0 {
        return Err(Error::invalid("ergodics", "directions", "must be positive"));
    }
    let n = a.first().map_or(0, |v| v.len());
    if n == 0 || b.is_empty() || a.iter().chain(b).any(|v| v.len() != n) {
        return Err(Error::invalid("ergodics", "samples", "must be nonempty with a common dimension"));
    }
    if n == 1 {
        return wasserstein1_1d(&column(a), &column(b));
    }
    distance(a, b, &directions(n, count, seed))
}

fn column(a: &[Vec<f64>]) -> Vec<f64> {
    a.iter().map(|v| v[0]).collect()
}

/// Exact W₁ for scalar samples, the sliced average over `dirs` otherwise.
fn distance(a: &[Vec<f64>], b: &[Vec<f64>], dirs: &[Vec<f64>]) -> Result<f64> {
    if a.first().map_or(0, |v| v.len()) == 1 {
        return wasserstein1_1d(&column(a), &column(b));
    }
    let mut total = 0.0;
    for d in dirs {
        let proj = |s: &[Vec<f64>]| -> Vec<f64> { s.iter().map(|v| v.iter().zip(d).map(|(x, y)| x * y).sum()).collect() };
        total += wasserstein1_1d(&proj(a), &proj(b))?;
    }
    Ok(total / dirs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorOptions {
    /// Bootstrap replicates for noise floors and standard errors.
    pub bootstrap: usize,
    /// Projection directions for multivariate samples.
    pub directions: usize,
    /// Seed of the auxiliary streams (directions and resampling).
    pub seed: u64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            bootstrap: 200,
            directions: 64,
            seed: 0,
        }
    }
}

/// W₁ between two samples from one law, by resampling the pooled data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NullStats {
    pub mean: f64,
    pub sd: f64,
    /// 95th percentile.
    pub floor: f64,
}

fn resample<'a>(pool: &[&'a Vec<f64>], len: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..len).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
}

/// Pooled bootstrap of the W₁ estimator under equality of laws; `task` selects the streams.
pub fn noise_floor(a: &[Vec<f64>], b: &[Vec<f64>], opts: &EstimatorOptions, task: u64) -> Result<NullStats> {
    if opts.bootstrap < 2 {
        return Err(Error::invalid("ergodics", "bootstrap", "need at least 2 replicates"));
    }
    let pool: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let n = pool.first().map_or(0, |v| v.len());
    let dirs = directions(n.max(1), opts.directions.max(1), opts.seed);
    let reps: Vec<Result<f64>> = (0..opts.bootstrap as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(opts.seed, Purpose::Auxiliary, BOOTSTRAP + (task << 20) + r);
            let ra = resample(&pool, a.len(), &mut rng);
            let rb = resample(&pool, b.len(), &mut rng);
            distance(&ra, &rb, &dirs)
        })
        .collect();
    let mut v = reps.into_iter().collect::<Result<Vec<f64>>>()?;
    let (mean, _) = mean_se(&v);
    let sd = std_dev(&v);
    v.sort_by(f64::total_cmp);
    Ok(NullStats {
        mean,
        sd,
        floor: quantile_sorted(&v, 0.95),
    })
}

fn w1(a: &[Vec<f64>], b: &[Vec<f64>], opts: &EstimatorOptions) -> Result<f64> {
    let n = a.first().map_or(1, |v| v.len());
    distance(a, b, &directions(n, opts.directions.max(1), opts.seed))
}

/// One row of the long-format results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub experiment: &'static str,
    pub k: usize,
    pub t_or_lag: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub floor: f64,
}

pub fn rows_to_csv(rows: &[Row]) -> String {
    let mut csv = Csv::new(&["experiment", "k", "t_or_lag", "estimate", "stderr", "floor"]);
    for r in rows {
        csv.row(&[
            Cell::S(r.experiment.into()),
            Cell::I(r.k as i64),
            Cell::F(r.t_or_lag),
            Cell::F(r.estimate),
            Cell::F(r.stderr),
            Cell::F(r.floor),
        ]);
    }
    csv.as_str().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub w1: Vec<f64>,
    pub null: Vec<NullStats>,
    pub r_hat: Option<f64>,
    pub intercept: Option<f64>,
    pub r_se: Option<f64>,
    /// Times used by the fit: past `fit_start` with W₁ above four noise floors.
    pub window: Vec<f64>,
    /// `5/r̂`.
    pub burn_in: Option<f64>,
    pub lyapunov_pass: bool,
    pub warnings: Vec<String>,
    pub seed_a: u64,
    pub seed_b: u64,
}

impl DecayReport {
    pub fn rows(&self, k: usize) -> Vec<Row> {
        self.times
            .iter()
            .zip(&self.w1)
            .zip(&self.null)
            .map(|((t, w), nl)| Row {
                experiment: "ergodic",
                k,
                t_or_lag: *t,
                estimate: *w,
                stderr: nl.sd,
                floor: nl.floor,
            })
            .collect()
    }
}

const WINDOW_FLOORS: f64 = 4.0;

fn fit(times: &[f64], w1: &[f64]) -> Option<(f64, f64)> {
    let logs: Vec<f64> = w1.iter().map(|w| w.ln()).collect();
    ols(times, &logs).map(|(s, i)| (-s, i))
}

/// Two ensembles from `y1` (noise seed `plan.seed`) and `y2` (noise seed `seed_b`), compared at
/// the grid steps `keep`; the log-linear fit uses `t ≥ fit_start` where W₁ exceeds four floors,
/// and its standard error comes from resampling trajectories.
#[allow(clippy::too_many_arguments)]
pub fn ergodic_decay(
    c: &ApproximatingComponent,
    coeffs: &CoefficientModel,
    y1: &InitialState,
    y2: &InitialState,
    plan: &NoisePlan,
    seed_b: u64,
    trajectories: usize,
    keep: &[usize],
    fit_start: f64,
    opts: &EstimatorOptions,
) -> Result<DecayReport> {
    if trajectories < 2 {
        return Err(Error::invalid("ergodics", "rng.trajectories", "need at least 2"));
    }
    let mut warnings = vec![];
    let lyap = check_lyapunov_sufficient(c, &coeffs.meta)?;
    if !lyap.pass {
        warnings.push(format!("Lyapunov check fails: {}", lyap.details.join("; ")));
    }
    let ids = 0..trajectories as u64;
    let a = run_ensemble(c, coeffs, y1, plan, ids.clone(), keep, Observable::X)?;
    let plan_b = NoisePlan { seed: seed_b, ..*plan };
    let b = run_ensemble(c, coeffs, y2, &plan_b, ids, keep, Observable::X)?;
    let mut w = Vec::with_capacity(keep.len());
    let mut null = Vec::with_capacity(keep.len());
    for (j, (sa, sb)) in a.samples.iter().zip(&b.samples).enumerate() {
        w.push(w1(sa, sb, opts)?);
        null.push(noise_floor(sa, sb, opts, j as u64)?);
    }
    let idx: Vec<usize> = (0..keep.len())
        .filter(|&j| a.times[j] >= fit_start && w[j] > WINDOW_FLOORS * null[j].floor && w[j] > 0.0)
        .collect();
    let wt: Vec<f64> = idx.iter().map(|&j| a.times[j]).collect();
    let ww: Vec<f64> = idx.iter().map(|&j| w[j]).collect();
    let est = fit(&wt, &ww);
    if est.is_none() {
        warnings.push("fewer than two times above the noise floor; no rate fitted".into());
    }
    let r_se = match est {
        Some(_) => {
            let task = keep.len() as u64;
            let n = a.samples[0][0].len();
            let dirs = directions(n, opts.directions.max(1), opts.seed);
            let slopes: Vec<Result<Option<f64>>> = (0..opts.bootstrap as u64)
                .into_par_iter()
                .map(|r| {
                    let mut rng = stream(opts.seed, Purpose::Auxiliary, BOOTSTRAP + (task << 20) + r);
                    let ia: Vec<usize> = (0..trajectories).map(|_| rng.gen_range(0..trajectories)).collect();
                    let ib: Vec<usize> = (0..trajectories).map(|_| rng.gen_range(0..trajectories)).collect();
                    let mut ws = Vec::with_capacity(idx.len());
                    for &j in &idx {
                        let ra: Vec<Vec<f64>> = ia.iter().map(|&i| a.samples[j][i].clone()).collect();
                        let rb: Vec<Vec<f64>> = ib.iter().map(|&i| b.samples[j][i].clone()).collect();
                        ws.push(distance(&ra, &rb, &dirs)?.max(f64::MIN_POSITIVE));
                    }
                    Ok(fit(&wt, &ws).map(|f| f.0))
                })
                .collect();
            let s: Vec<f64> = slopes.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
            (s.len() >= 2).then(|| std_dev(&s))
        }
        None => None,
    };
    let r_hat = est.map(|e| e.0);
    Ok(DecayReport {
        times: a.times,
        w1: w,
        null,
        r_hat,
        intercept: est.map(|e| e.1),
        r_se,
        window: wt,
        burn_in: r_hat.filter(|r| *r > 0.0).map(|r| 5.0 / r),
        lyapunov_pass: lyap.pass,
        warnings,
        seed_a: plan.seed,
        seed_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagResult {
    pub lag: f64,
    pub w1: f64,
    pub null: NullStats,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityReport {
    pub burn_in: f64,
    pub lags: Vec<LagResult>,
    pub pass: bool,
    pub seed: u64,
}

impl StationarityReport {
    pub fn rows(&self, k: usize) -> Vec<Row> {
        self.lags
            .iter()
            .map(|l| Row {
                experiment: "stationarity",
                k,
                t_or_lag: l.lag,
                estimate: l.w1,
                stderr: l.null.sd,
                floor: l.null.floor,
            })
            .collect()
    }
}

/// One ensemble; the marginal at `burn_in` against the marginals at `burn_in + τ`. A lag passes
/// when W₁ is within three bootstrap standard deviations of the null mean.
#[allow(clippy::too_many_arguments)]
pub fn stationarity_test(
    c: &ApproximatingComponent,
    coeffs: &CoefficientModel,
    init: &InitialState,
    plan: &NoisePlan,
    burn_in: f64,
    lags: &[f64],
    trajectories: usize,
    opts: &EstimatorOptions,
) -> Result<StationarityReport> {
    if lags.is_empty() {
        return Err(Error::invalid("ergodics", "lags", "must be nonempty"));
    }
    if !(burn_in >= 0.0) || lags.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::invalid("ergodics", "lags", "burn_in must be >= 0 and lags positive"));
    }
    if trajectories < 2 {
        return Err(Error::invalid("ergodics", "rng.trajectories", "need at least 2"));
    }
    let s0 = step_of(plan, burn_in);
    let mut keep: Vec<usize> = std::iter::once(s0).chain(lags.iter().map(|l| s0 + step_of(plan, *l).max(1))).collect();
    keep.sort_unstable();
    keep.dedup();
    let needed = NoisePlan {
        horizon: *keep.last().unwrap() as f64 * plan.h,
        ..*plan
    };
    let e = run_ensemble(c, coeffs, init, &needed, 0..trajectories as u64, &keep, Observable::X)?;
    let base = &e.samples[0];
    let mut out = vec![];
    for (j, lag) in lags.iter().enumerate() {
        let s = s0 + step_of(plan, *lag).max(1);
        let at = keep.iter().position(|&k| k == s).unwrap();
        let w = w1(base, &e.samples[at], opts)?;
        let null = noise_floor(base, &e.samples[at], opts, j as u64)?;
        out.push(LagResult {
            lag: *lag,
            w1: w,
            pass: w <= null.mean + 3.0 * null.sd,
            null,
        });
    }
    Ok(StationarityReport {
        burn_in,
        pass: out.iter().all(|l| l.pass),
        lags: out,
        seed: plan.seed,
    })
}

/// Largest relative gap between the two bases' kernels on a logarithmic grid.
pub fn kernel_mismatch(a: &LiftingBasis, b: &LiftingBasis, t_min: f64, t_max: f64, points: usize, quad_tol: f64) -> Result<f64> {
    if a.n != b.n {
        return Ok(f64::INFINITY);
    }
    let mut worst = 0.0f64;
    for i in 0..points {
        let t = t_min * (t_max / t_min).powf(i as f64 / (points - 1).max(1) as f64);
        for which in [Which::Drift, Which::Diffusion] {
            let ka = a.eval_kernel(which, t, quad_tol)?;
            let kb = b.eval_kernel(which, t, quad_tol)?;
            let scale = ka.norm().max(kb.norm());
            if scale > 0.0 {
                worst = worst.max((ka - kb).norm() / scale);
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelGrid {
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
    pub tolerance: f64,
}

impl Default for KernelGrid {
    fn default() -> Self {
        KernelGrid {
            t_min: 1e-2,
            t_max: 10.0,
            points: 41,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiftReport {
    pub kernel_mismatch: f64,
    pub k_a: usize,
    pub k_b: usize,
    pub epsilon_a: f64,
    pub epsilon_b: f64,
    pub horizon: f64,
    pub w1: f64,
    pub null: NullStats,
    /// `std(X)·(√ε_A + √ε_B)`.
    pub bias: f64,
    pub pass: bool,
    pub seed_a: u64,
    pub seed_b: u64,
}

/// Both bases must produce the same kernels on `grid`; each is discretized with `k` cells and run
/// to `plan.horizon` (independent noise, seeds `plan.seed` and `seed_b`). Passes when W₁ between
/// the terminal marginals is below the noise floor plus the discretization bias allowance.
#[allow(clippy::too_many_arguments)]
pub fn lift_independence_test(
    basis_a: &Arc<LiftingBasis>,
    basis_b: &Arc<LiftingBasis>,
    coeffs: &CoefficientModel,
    k: usize,
    theta_max: ThetaMax,
    quad_tol: f64,
    grid: &KernelGrid,
    init: &InitialState,
    plan: &NoisePlan,
    seed_b: u64,
    trajectories: usize,
    opts: &EstimatorOptions,
) -> Result<LiftReport> {
    let mismatch = kernel_mismatch(basis_a, basis_b, grid.t_min, grid.t_max, grid.points, quad_tol)?;
    if !(mismatch <= grid.tolerance) {
        return Err(Error::invalid(
            "ergodics",
            "basis_b",
            format!("kernels differ from basis_a by {mismatch:.3e} (tolerance {:.1e})", grid.tolerance),
        ));
    }
    if trajectories < 2 {
        return Err(Error::invalid("ergodics", "rng.trajectories", "need at least 2"));
    }
    let component = |b: &Arc<LiftingBasis>| -> Result<ApproximatingComponent> {
        if b.segments.is_empty() {
            ApproximatingComponent::from_atoms(b)
        } else {
            build_component(b, k, theta_max, quad_tol)
        }
    };
    let ca = component(basis_a)?;
    let cb = component(basis_b)?;
    let ea = epsilon_k(basis_a, &ca, quad_tol)?;
    let eb = epsilon_k(basis_b, &cb, quad_tol)?;
    let last = [plan.steps()];
    let ids = 0..trajectories as u64;
    let sa = run_ensemble(&ca, coeffs, init, plan, ids.clone(), &last, Observable::X)?;
    let plan_b = NoisePlan { seed: seed_b, ..*plan };
    let sb = run_ensemble(&cb, coeffs, init, &plan_b, ids, &last, Observable::X)?;
    let (xa, xb) = (&sa.samples[0], &sb.samples[0]);
    let w = w1(xa, xb, opts)?;
    let null = noise_floor(xa, xb, opts, 0)?;
    let spread = {
        let n = xa[0].len();
        (0..n)
            .map(|d| std_dev(&xa.iter().chain(xb).map(|v| v[d]).collect::<Vec<_>>()).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let bias = spread * (ea.sqrt() + eb.sqrt());
    Ok(LiftReport {
        kernel_mismatch: mismatch,
        k_a: ca.len(),
        k_b: cb.len(),
        epsilon_a: ea,
        epsilon_b: eb,
        horizon: plan.steps() as f64 * plan.h,
        w1: w,
        pass: w <= null.floor + bias,
        null,
        bias,
        seed_a: plan.seed,
        seed_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rung {
    pub k: usize,
    pub cells: usize,
    pub epsilon: f64,
    pub w1: f64,
    pub null: NullStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IpmReport {
    pub rungs: Vec<Rung>,
    pub spearman: f64,
    /// W₁ of the coarsest rung exceeds the finest rung's noise floor.
    pub coarse_above_floor: bool,
    pub pass: bool,
    pub observable: Observable,
    pub seed: u64,
    pub seed_replicate: u64,
}

impl IpmReport {
    pub fn rows(&self) -> Vec<Row> {
        self.rungs
            .iter()
            .map(|r| Row {
                experiment: "ipm_convergence",
                k: r.k,
                t_or_lag: r.epsilon,
                estimate: r.w1,
                stderr: r.null.sd,
                floor: r.null.floor,
            })
            .collect()
    }
}

/// Terminal marginals for each rung of the ladder (common noise across rungs) against an
/// independent replicate of the finest rung. The trend check asks for a positive Spearman
/// correlation between W₁ and ε_k and a coarsest rung above the finest rung's noise floor.
#[allow(clippy::too_many_arguments)]
pub fn ipm_convergence(
    basis: &Arc<LiftingBasis>,
    coeffs: &CoefficientModel,
    ladder: &[usize],
    theta_max: ThetaMax,
    quad_tol: f64,
    init: &InitialState,
    plan: &NoisePlan,
    seed_replicate: u64,
    trajectories: usize,
    observable: Observable,
    opts: &EstimatorOptions,
) -> Result<IpmReport> {
    if ladder.len() < 2 {
        return Err(Error::invalid("ergodics", "ladder", "needs at least two rungs"));
    }
    if ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("ergodics", "ladder", "must be strictly increasing"));
    }
    if trajectories < 2 {
        return Err(Error::invalid("ergodics", "rng.trajectories", "need at least 2"));
    }
    let comps = ladder
        .iter()
        .map(|&k| build_component(basis, k, theta_max, quad_tol))
        .collect::<Result<Vec<_>>>()?;
    let finest = comps.last().unwrap();
    let lyap = check_lyapunov_sufficient(finest, &coeffs.meta)?;
    if !lyap.pass {
        return Err(Error::invalid(
            "ergodics",
            "coefficients",
            format!("Lyapunov check fails: {}", lyap.details.join("; ")),
        ));
    }
    let last = [plan.steps()];
    let ids = 0..trajectories as u64;
    let replicate_plan = NoisePlan { seed: seed_replicate, ..*plan };
    let reference = run_ensemble(finest, coeffs, init, &replicate_plan, ids.clone(), &last, observable)?.samples.remove(0);
    let mut rungs = vec![];
    for (j, (c, &k)) in comps.iter().zip(ladder).enumerate() {
        let s = run_ensemble(c, coeffs, init, plan, ids.clone(), &last, observable)?.samples.remove(0);
        rungs.push(Rung {
            k,
            cells: c.len(),
            epsilon: epsilon_k(basis, c, quad_tol)?,
            w1: w1(&s, &reference, opts)?,
            null: noise_floor(&s, &reference, opts, j as u64)?,
        });
    }
    let eps: Vec<f64> = rungs.iter().map(|r| r.epsilon).collect();
    let ws: Vec<f64> = rungs.iter().map(|r| r.w1).collect();
    let rho = spearman(&eps, &ws);
    let coarse_above_floor = rungs[0].w1 > rungs.last().unwrap().null.floor;
    Ok(IpmReport {
        pass: rho > 0.0 && coarse_above_floor,
        spearman: rho,
        coarse_above_floor,
        rungs,
        observable,
        seed: plan.seed,
        seed_replicate,
    })
}

/// `(sup_{t≤T} ‖Z_t‖_H² + Σ (t_{j+1}−t_j)‖Z_{t_j}‖_V²)^{1/2}` over recorded states.
pub fn path_seminorm(c: &ApproximatingComponent, times: &[f64], states: &[Vec<f64>], horizon: f64) -> Result<f64> {
    if times.len() != states.len() || times.is_empty() {
        return Err(Error::invalid("ergodics", "path", "times and states must match and be nonempty"));
    }
    let end = *times.last().unwrap();
    if horizon > end * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::invalid("ergodics", "horizon", format!("{horizon} exceeds the path end {end}")));
    }
    let mut sup = 0.0f64;
    let mut integral = 0.0;
    for j in 0..times.len() {
        if times[j] > horizon * (1.0 + 1e-12) + 1e-12 {
            break;
        }
        let o = c.observe(&states[j])?;
        sup = sup.max(o.norm_h * o.norm_h);
        if j + 1 < times.len() && times[j + 1] <= horizon * (1.0 + 1e-12) + 1e-12 {
            integral += (times[j + 1] - times[j]) * o.norm_v * o.norm_v;
        }
    }
    Ok((sup + integral).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientSpec, DiffusionSpec, DriftSpec};
    use crate::kernelbasis::make_expsum_basis;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn ou_component() -> ApproximatingComponent {
        ApproximatingComponent::from_atoms(&Arc::new(make_expsum_basis(&[(1.0, s(1.0), s(1.0))]).unwrap())).unwrap()
    }

    fn ou() -> CoefficientModel {
        CoefficientSpec {
            drift: DriftSpec::Linear { beta: 0.0, c: None },
            diffusion: DiffusionSpec::Constant { s: 1.0 },
            truncation: None,
        }
        .build(1)
        .unwrap()
    }

    fn brute_force(a: &[f64], b: &[f64]) -> f64 {
        fn rec(a: &[f64], b: &mut Vec<f64>, i: usize, acc: f64, best: &mut f64) {
            if i == a.len() {
                *best = best.min(acc);
                return;
            }
            for j in i..b.len() {
                b.swap(i, j);
                rec(a, b, i + 1, acc + (a[i] - b[i]).abs(), best);
                b.swap(i, j);
            }
        }
        let mut best = f64::INFINITY;
        rec(a, &mut b.to_vec(), 0, 0.0, &mut best);
        best / a.len() as f64
    }

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein1_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1_1d(&[0.0, 1.0, 2.0], &[0.0, 1.0, 5.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1_1d(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap(), 0.0);
        assert!(wasserstein1_1d(&[], &[1.0]).is_err());
        // Unequal sizes: {0} against {0, 2} moves half the mass by 2.
        assert_eq!(wasserstein1_1d(&[0.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert!((wasserstein1_1d(&[0.0, 1.0], &[0.5, 0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sliced_examples() {
        let a: Vec<Vec<f64>> = vec![vec![0.0], vec![3.0]];
        let b: Vec<Vec<f64>> = vec![vec![1.0], vec![1.0]];
        assert_eq!(sliced_w1(&a, &b, 5, 1).unwrap(), wasserstein1_1d(&[0.0, 3.0], &[1.0, 1.0]).unwrap());
        assert!(sliced_w1(&a, &b, 0, 1).is_err());
        let cloud: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64).cos()]).collect();
        assert_eq!(sliced_w1(&cloud, &cloud, 16, 3).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = cloud.iter().map(|p| vec![p[0] + 3.0, p[1] - 4.0]).collect();
        // E|⟨v, θ⟩| = 2|v|/π on the circle.
        let v = sliced_w1(&cloud, &shifted, 20_000, 5).unwrap();
        assert!((v - 10.0 / std::f64::consts::PI).abs() < 0.02, "{v}");
    }

    #[test]
    fn initial_states() {
        let c = ou_component();
        assert_eq!(InitialState::Constant { value: vec![2.0] }.sample(&c, 0, 0).unwrap(), vec![2.0]);
        assert!(InitialState::Constant { value: vec![1.0, 2.0] }.sample(&c, 0, 0).is_err());
        let g = InitialState::Gaussian { mean: 1.0, std: 0.0 };
        assert_eq!(g.sample(&c, 0, 3).unwrap(), vec![1.0]);
        let g = InitialState::Gaussian { mean: 0.0, std: 1.0 };
        assert_ne!(g.sample(&c, 0, 0).unwrap(), g.sample(&c, 0, 1).unwrap());
        assert_eq!(g.sample(&c, 0, 1).unwrap(), g.sample(&c, 0, 1).unwrap());
    }

    #[test]
    fn equal_starts_and_seeds_give_zero_distance() {
        let c = ou_component();
        let plan = NoisePlan::new(1, 0.05, 1.0, 1).unwrap();
        let init = InitialState::Constant { value: vec![1.0] };
        let keep: Vec<usize> = (0..=20).step_by(5).collect();
        let opts = EstimatorOptions { bootstrap: 20, ..Default::default() };
        let r = ergodic_decay(&c, &ou(), &init, &init, &plan, 1, 64, &keep, 0.0, &opts).unwrap();
        assert!(r.w1.iter().all(|w| *w == 0.0));
        assert!(r.r_hat.is_none());
    }

    #[test]
    fn ou_decay_rate() {
        let c = ou_component();
        let plan = NoisePlan::new(11, 0.01, 3.0, 1).unwrap();
        let keep: Vec<usize> = (0..=300).step_by(10).collect();
        let opts = EstimatorOptions { bootstrap: 50, ..Default::default() };
        let r = ergodic_decay(
            &c,
            &ou(),
            &InitialState::Constant { value: vec![1.0] },
            &InitialState::Constant { value: vec![0.0] },
            &plan,
            12,
            2048,
            &keep,
            0.0,
            &opts,
        )
        .unwrap();
        let (rate, se) = (r.r_hat.unwrap(), r.r_se.unwrap());
        assert!((rate - 1.0).abs() < 4.0 * se + 0.02, "{rate} ± {se}");
        assert!((r.burn_in.unwrap() - 5.0 / rate).abs() < 1e-12);
    }

    #[test]
    fn stationarity_controls() {
        let c = ou_component();
        let plan = NoisePlan::new(5, 0.01, 10.0, 1).unwrap();
        let opts = EstimatorOptions { bootstrap: 100, ..Default::default() };
        let stat = InitialState::Gaussian { mean: 0.0, std: 0.5f64.sqrt() };
        let r = stationarity_test(&c, &ou(), &stat, &plan, 1.0, &[1.0, 2.0, 5.0], 2048, &opts).unwrap();
        assert!(r.pass, "{r:?}");
        let far = InitialState::Constant { value: vec![5.0] };
        let r = stationarity_test(&c, &ou(), &far, &plan, 0.0, &[1.0], 2048, &opts).unwrap();
        assert!(!r.pass);
        assert!(stationarity_test(&c, &ou(), &far, &plan, 0.0, &[], 16, &opts).is_err());
    }

    #[test]
    fn lift_identity_and_mismatch() {
        let a = Arc::new(make_expsum_basis(&[(1.0, s(1.0), s(1.0))]).unwrap());
        let b = Arc::new(make_expsum_basis(&[(2.0, s(1.0), s(1.0))]).unwrap());
        let plan = NoisePlan::new(2, 0.02, 4.0, 1).unwrap();
        let m = CoefficientSpec {
            drift: DriftSpec::Tanh { beta: 1.0, amp: 0.5 },
            diffusion: DiffusionSpec::Constant { s: 1.0 },
            truncation: None,
        }
        .build(1)
        .unwrap();
        let opts = EstimatorOptions { bootstrap: 50, ..Default::default() };
        let g = KernelGrid::default();
        let init = InitialState::zero();
        let r = lift_independence_test(&a, &a, &m, 8, ThetaMax::AUTO, 1e-10, &g, &init, &plan, 3, 512, &opts).unwrap();
        assert_eq!(r.kernel_mismatch, 0.0);
        assert_eq!(r.bias, 0.0);
        let e = lift_independence_test(&a, &b, &m, 8, ThetaMax::AUTO, 1e-10, &g, &init, &plan, 3, 512, &opts).unwrap_err();
        assert!(e.to_string().contains("basis_b"));
    }

    #[test]
    fn atomic_ladder_is_flat() {
        let basis = Arc::new(make_expsum_basis(&[(1.0, s(1.0), s(1.0)), (4.0, s(0.5), s(0.5))]).unwrap());
        let m = CoefficientSpec {
            drift: DriftSpec::Tanh { beta: 1.0, amp: 0.5 },
            diffusion: DiffusionSpec::Constant { s: 1.0 },
            truncation: None,
        }
        .build(1)
        .unwrap();
        let plan = NoisePlan::new(2, 0.02, 2.0, 1).unwrap();
        let opts = EstimatorOptions { bootstrap: 50, ..Default::default() };
        let r = ipm_convergence(&basis, &m, &[2, 4], ThetaMax::AUTO, 1e-10, &InitialState::zero(), &plan, 9, 256, Observable::X, &opts).unwrap();
        assert!(r.rungs.iter().all(|r| r.epsilon == 0.0 && r.w1 <= r.null.floor));
        assert_eq!(r.rungs[0].w1, r.rungs[1].w1);
        assert!(ipm_convergence(&basis, &m, &[4], ThetaMax::AUTO, 1e-10, &InitialState::zero(), &plan, 9, 16, Observable::X, &opts).is_err());
    }

    #[test]
    fn seminorm_examples() {
        let c = ou_component();
        let times: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let zero = vec![vec![0.0]; times.len()];
        assert_eq!(path_seminorm(&c, &times, &zero, 1.0).unwrap(), 0.0);
        let v = 1.7;
        let constant = vec![vec![v]; times.len()];
        let exact = ((0.5f64.sqrt() + 2f64.sqrt()) * v * v).sqrt();
        assert!((path_seminorm(&c, &times, &constant, 1.0).unwrap() - exact).abs() < 1e-12);
        assert!(path_seminorm(&c, &times, &constant, 2.0).is_err());
    }

    #[test]
    fn determinism_across_thread_counts() {
        let c = ou_component();
        let plan = NoisePlan::new(8, 0.01, 1.0, 1).unwrap();
        let init = InitialState::Gaussian { mean: 0.0, std: 1.0 };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let e = run_ensemble(&c, &ou(), &init, &plan, 0..200, &[50, 100], Observable::X).unwrap();
                    let nf = noise_floor(&e.samples[0], &e.samples[1], &EstimatorOptions::default(), 0).unwrap();
                    (e, nf)
                })
        };
        assert_eq!(run(1), run(4));
    }

    proptest! {
        #[test]
        fn w1_matches_brute_force(a in prop::collection::vec(-5.0f64..5.0, 1..7), shift in prop::collection::vec(-5.0f64..5.0, 6)) {
            let b: Vec<f64> = shift[..a.len()].to_vec();
            let w = wasserstein1_1d(&a, &b).unwrap();
            prop_assert!((w - brute_force(&a, &b)).abs() < 1e-12);
            prop_assert!((w - wasserstein1_1d(&b, &a).unwrap()).abs() < 1e-12);
            let mut sa = a.clone();
            let mut sb = b.clone();
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            prop_assert_eq!(w == 0.0, sa == sb);
        }

        #[test]
        fn w1_triangle(a in prop::collection::vec(-5.0f64..5.0, 1..20), b in prop::collection::vec(-5.0f64..5.0, 1..20), c in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let ab = wasserstein1_1d(&a, &b).unwrap();
            let bc = wasserstein1_1d(&b, &c).unwrap();
            let ac = wasserstein1_1d(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn seminorm_subadditive(seed in any::<u64>()) {
            let c = ApproximatingComponent::from_atoms(&Arc::new(
                make_expsum_basis(&[(0.5, s(1.0), s(1.0)), (3.0, s(0.5), s(2.0))]).unwrap(),
            )).unwrap();
            let mut rng = stream(seed, Purpose::Auxiliary, 0);
            let times: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
            let mut path = || -> Vec<Vec<f64>> {
                times.iter().map(|_| { let mut v = vec![0.0; 2]; fill_normals(&mut rng, &mut v); v }).collect()
            };
            let p = path();
            let q = path();
            let sum: Vec<Vec<f64>> = p.iter().zip(&q).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
            let l = path_seminorm(&c, &times, &sum, 2.5).unwrap();
            let r = path_seminorm(&c, &times, &p, 2.5).unwrap() + path_seminorm(&c, &times, &q, 2.5).unwrap();
            prop_assert!(l <= r * (1.0 + 1e-12));
        }
    }
}
