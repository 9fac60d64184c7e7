//! Controlled pairs of lifted systems sharing one noise path, and their contraction diagnostics.
//!
//! `Y` follows the lifted dynamics. `Ŷ` receives the additional per-cell drift `λ M_{σ,i} v`
//! with `v = Σ_i w_i M_{σ,i}ᵀ Φ_i (Y_i − Ŷ_i)`, which equals `M_{σ,i} σ(X̂) u` for the control
//! `u = λ σ(X̂)ᵀ(σ(X̂)σ(X̂)ᵀ)^{−1} v`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::coefficients::CoefficientModel;
use crate::discretize::ApproximatingComponent;
use crate::dynamics::{apply_sigma, check_dims, Record, Stepper};
use crate::error::{Error, Result};
use crate::linalg::{norm2, sym_eigenvalues};
use crate::noise::NoisePlan;
use crate::output::{Cell, Csv};
use crate::stats::{mean_se, ols};
use crate::weights::{SigmaFunctional, WeightTable};

/// Smallest admissible eigenvalue of `σσᵀ` along the controlled path.
pub const ELLIPTICITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRun {
    pub times: Vec<f64>,
    pub dist: Vec<f64>,
    /// `½∫₀ᵗ|u|² ds`, left-point rule.
    pub energy: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub y: Option<Vec<Vec<f64>>>,
    pub yhat: Option<Vec<Vec<f64>>>,
}

impl CoupledRun {
    pub fn to_csv(&self) -> String {
        let mut csv = Csv::new(&["t", "dist_phi", "energy", "u_norm"]);
        for i in 0..self.times.len() {
            csv.row(&[
                Cell::F(self.times[i]),
                Cell::F(self.dist[i]),
                Cell::F(self.energy[i]),
                Cell::F(norm2(&self.u[i])),
            ]);
        }
        csv.as_str().to_string()
    }
}

/// `u = λ σᵀ(σσᵀ)^{−1} v` for row-major `σ ∈ R^{n×d}`.
pub fn control(sigma: &[f64], n: usize, d: usize, v: &[f64], lambda: f64) -> Option<Vec<f64>> {
    if n == 1 && d == 1 {
        let s = sigma[0];
        return (s * s >= ELLIPTICITY_FLOOR).then(|| vec![lambda * v[0] / s]);
    }
    let s = DMatrix::from_row_slice(n, d, sigma);
    let g = &s * s.transpose();
    if sym_eigenvalues(&g)[0] < ELLIPTICITY_FLOOR {
        return None;
    }
    let y = g.cholesky()?.solve(&(DVector::from_column_slice(v) * lambda));
    Some((s.transpose() * y).iter().cloned().collect())
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled_pair(
    c: &ApproximatingComponent,
    coeffs: &CoefficientModel,
    phi: &WeightTable,
    lambda: f64,
    y1: &[f64],
    y2: &[f64],
    plan: &NoisePlan,
    trajectory: u64,
    record: Record,
) -> Result<CoupledRun> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("coupling", "lambda", format!("must be positive, got {lambda}")));
    }
    check_dims(c, coeffs, y1, plan)?;
    check_dims(c, coeffs, y2, plan)?;
    if phi.phi.len() != c.cells.len() || phi.n != c.n {
        return Err(Error::invalid("coupling", "phi", "weight table does not match the component"));
    }
    let st = Stepper::new(c, plan.h, plan.d)?;
    let sf = SigmaFunctional::new(c, phi);
    let (n, d) = (c.n, plan.d);
    let every = record.every.max(1);
    let last = plan.steps();

    let mut y = y1.to_vec();
    let mut yh = y2.to_vec();
    let mut diff = vec![0.0; y.len()];
    let (mut x, mut xh) = (vec![0.0; n], vec![0.0; n]);
    let (mut bx, mut bxh) = (vec![0.0; n], vec![0.0; n]);
    let (mut s, mut sh) = (vec![0.0; n * d], vec![0.0; n * d]);
    let (mut sdw, mut sdwh) = (vec![0.0; n], vec![0.0; n]);
    let mut v = vec![0.0; n];
    let mut dw = vec![0.0; d];
    let mut inc = plan.increments(trajectory);
    let mut energy = 0.0;
    let mut run = CoupledRun {
        times: vec![],
        dist: vec![],
        energy: vec![],
        u: vec![],
        y: record.states.then(Vec::new),
        yhat: record.states.then(Vec::new),
    };

    for m in 0..=last {
        st.observe(&y, &mut x);
        st.observe(&yh, &mut xh);
        for ((o, a), b) in diff.iter_mut().zip(&y).zip(&yh) {
            *o = a - b;
        }
        sf.apply(&diff, &mut v);
        coeffs.sigma(&xh, &mut sh);
        let u = control(&sh, n, d, &v, lambda).ok_or_else(|| {
            Error::invalid(
                "coupling",
                "coefficients.diffusion",
                format!("sigma sigma^T is singular at step {m} (t = {})", m as f64 * plan.h),
            )
        })?;
        if m % every == 0 || m == last {
            run.times.push(m as f64 * plan.h);
            run.dist.push(sf.norm(&diff));
            run.energy.push(energy);
            run.u.push(u.clone());
            if let (Some(a), Some(b)) = (run.y.as_mut(), run.yhat.as_mut()) {
                a.push(y.clone());
                b.push(yh.clone());
            }
        }
        if m == last {
            break;
        }
        energy += 0.5 * plan.h * u.iter().map(|v| v * v).sum::<f64>();
        coeffs.b(&x, &mut bx);
        coeffs.b(&xh, &mut bxh);
        coeffs.sigma(&x, &mut s);
        inc.next_into(&mut dw);
        apply_sigma(&s, &dw, &mut sdw);
        apply_sigma(&sh, &dw, &mut sdwh);
        v.iter_mut().for_each(|e| *e *= lambda);
        st.advance(&mut y, &bx, &sdw, None);
        st.advance(&mut yh, &bxh, &sdwh, Some(&v));
        if y.iter().chain(&yh).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                module: "coupling",
                step: m + 1,
                detail: format!("t = {}", (m + 1) as f64 * plan.h),
            });
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub trajectories: usize,
    pub kappa: f64,
    pub dist0: f64,
    /// Fitted rate of the mean distance; `None` when there is no positive gap to fit.
    pub r_hat: Option<f64>,
    pub intercept: Option<f64>,
    pub times: Vec<f64>,
    pub mean_dist: Vec<f64>,
    pub se_dist: Vec<f64>,
    pub envelope: Vec<f64>,
    pub contraction_pass: bool,
    pub mean_energy: f64,
    pub se_energy: f64,
    pub kl_budget: f64,
    pub kl_pass: bool,
}

impl ContractionReport {
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "r_hat": self.r_hat,
            "bounds": {
                "contraction": if self.contraction_pass { "pass" } else { "fail" },
                "kl": if self.kl_pass { "pass" } else { "fail" },
            }
        })
    }
}

/// Slack on top of the Monte Carlo tolerance, absorbing rounding in deterministic runs.
const REL_SLACK: f64 = 1e-9;

/// Mean-distance envelope `e^{−κt/2}·dist(0)` and energy budget `½·kl_scale·dist(0)²`, each
/// checked with a tolerance of three standard errors. `kl_scale` is `C_UE·λ` for a table in raw
/// units and 1 after rescaling.
pub fn contraction_report(runs: &[CoupledRun], kappa: f64, kl_scale: f64) -> Result<ContractionReport> {
    let first = runs.first().ok_or_else(|| Error::invalid("coupling", "ensemble", "is empty"))?;
    let dist0 = first.dist[0];
    for r in runs {
        if r.times != first.times || r.dist[0].to_bits() != dist0.to_bits() {
            return Err(Error::invalid("coupling", "ensemble", "runs do not share times and initial pair"));
        }
    }
    let nt = first.times.len();
    let mut mean_dist = Vec::with_capacity(nt);
    let mut se_dist = Vec::with_capacity(nt);
    let mut envelope = Vec::with_capacity(nt);
    let mut contraction_pass = true;
    let mut col = vec![0.0; runs.len()];
    for j in 0..nt {
        col.iter_mut().zip(runs).for_each(|(c, r)| *c = r.dist[j]);
        let (m, se) = mean_se(&col);
        let env = (-0.5 * kappa * first.times[j]).exp() * dist0;
        contraction_pass &= m <= env * (1.0 + REL_SLACK) + 3.0 * se;
        mean_dist.push(m);
        se_dist.push(se);
        envelope.push(env);
    }
    let energies: Vec<f64> = runs.iter().map(|r| *r.energy.last().unwrap()).collect();
    let (mean_energy, se_energy) = mean_se(&energies);
    let kl_budget = 0.5 * kl_scale * dist0 * dist0;
    let kl_pass = mean_energy <= kl_budget * (1.0 + REL_SLACK) + 3.0 * se_energy;

    let floor = 1e-12 * dist0;
    let (t, l): (Vec<f64>, Vec<f64>) = first
        .times
        .iter()
        .zip(&mean_dist)
        .filter(|(_, m)| **m > floor && m.is_finite())
        .map(|(t, m)| (*t, m.ln()))
        .unzip();
    let fit = if dist0 > 0.0 { ols(&t, &l) } else { None };
    Ok(ContractionReport {
        trajectories: runs.len(),
        kappa,
        dist0,
        r_hat: fit.map(|f| -f.0),
        intercept: fit.map(|f| f.1),
        times: first.times.clone(),
        mean_dist,
        se_dist,
        envelope,
        contraction_pass,
        mean_energy,
        se_energy,
        kl_budget,
        kl_pass,
    })
}
