//! Weight tables on components: weighted norms and functionals, the coupling weight Φ_𝔞,
//! the Lyapunov weight Ψ_m, the associated constants, and the Lyapunov sufficiency check.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::coefficients::Metadata;
use crate::discretize::ApproximatingComponent;
use crate::error::{Error, Result};
use crate::kernelbasis::{Family, LiftingBasis};
use crate::linalg::{self, is_spd, is_sym_nonneg, op_norm, spd_inverse};
use crate::quadrature::QuadOptions;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Phi0,
    Coupling { m: f64, delta: f64, l: f64, r: f64 },
    Lyapunov { m: f64 },
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub n: usize,
    pub phi: Vec<DMatrix<f64>>,
    pub branch: Vec<&'static str>,
    pub provenance: Provenance,
}

impl WeightTable {
    pub fn phi0(c: &ApproximatingComponent) -> Self {
        let n = c.n;
        WeightTable {
            n,
            phi: c.cells.iter().map(|c| DMatrix::identity(n, n) * (1.0 + c.node).powf(-0.5)).collect(),
            branch: vec!["phi0"; c.cells.len()],
            provenance: Provenance::Phi0,
        }
    }

    pub fn custom(c: &ApproximatingComponent, phi: Vec<DMatrix<f64>>) -> Result<Self> {
        if phi.len() != c.cells.len() {
            return Err(Error::invalid("weights", "table", format!("expected {} matrices", c.cells.len())));
        }
        for (i, p) in phi.iter().enumerate() {
            if p.shape() != (c.n, c.n) || !is_spd(p) {
                return Err(Error::invalid("weights", format!("table[{i}]"), "must be symmetric positive definite"));
            }
        }
        Ok(WeightTable {
            n: c.n,
            branch: vec!["custom"; phi.len()],
            phi,
            provenance: Provenance::Custom,
        })
    }

    /// Smallest `C` with `|Φ_i| ≤ C(1+a_i)^{−1/2}` and `|Φ_i^{−1}| ≤ C(1+a_i)^{1/2}` on every cell.
    pub fn admissibility_constant(&self, c: &ApproximatingComponent) -> Result<f64> {
        let mut worst = 0.0f64;
        for (p, cell) in self.phi.iter().zip(&c.cells) {
            let s = (1.0 + cell.node).sqrt();
            let inv = spd_inverse(p, "table")?;
            worst = worst.max(op_norm(p) * s).max(op_norm(&inv) / s);
        }
        Ok(worst)
    }

    fn check(&self, c: &ApproximatingComponent, z: &[f64]) -> Result<()> {
        if self.phi.len() != c.cells.len() || self.n != c.n {
            return Err(Error::invalid("weights", "table", "does not match the component"));
        }
        if z.len() != c.n * c.cells.len() {
            return Err(Error::invalid("weights", "z", format!("expected {} entries", c.n * c.cells.len())));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,branch");
        for r in 0..self.n {
            for q in 0..self.n {
                s.push_str(&format!(",phi_{r}{q}"));
            }
        }
        s.push('\n');
        for (i, (p, b)) in self.phi.iter().zip(&self.branch).enumerate() {
            s.push_str(&format!("{i},{b}"));
            for v in linalg::row_major(p) {
                s.push(',');
                s.push_str(&crate::output::fmt(v));
            }
            s.push('\n');
        }
        s
    }
}

/// `(‖z‖_Φ, ⦀z⦀_Φ)`.
pub fn weighted_norms(c: &ApproximatingComponent, t: &WeightTable, z: &[f64]) -> Result<(f64, f64)> {
    t.check(c, z)?;
    let n = c.n;
    let (mut a, mut b) = (0.0, 0.0);
    for ((cell, p), zi) in c.cells.iter().zip(&t.phi).zip(z.chunks(n)) {
        let v = quad(p, zi);
        a += cell.w * v;
        b += cell.w * cell.node * v;
    }
    Ok((a.sqrt(), b.sqrt()))
}

fn quad(p: &DMatrix<f64>, z: &[f64]) -> f64 {
    let n = z.len();
    let mut s = 0.0;
    for r in 0..n {
        for q in 0..n {
            s += z[r] * p[(r, q)] * z[q];
        }
    }
    s
}

pub struct Functionals {
    pub mu_b: Vec<f64>,
    pub mu_s: Vec<f64>,
    pub q_s: DMatrix<f64>,
}

pub fn weighted_functionals(c: &ApproximatingComponent, t: &WeightTable, z: &[f64]) -> Result<Functionals> {
    t.check(c, z)?;
    let n = c.n;
    let mut mu_b = DMatrix::zeros(n, 1);
    let mut mu_s = DMatrix::zeros(n, 1);
    let mut q_s = DMatrix::zeros(n, n);
    for ((cell, p), zi) in c.cells.iter().zip(&t.phi).zip(z.chunks(n)) {
        let pz = p * DMatrix::from_column_slice(n, 1, zi);
        mu_b += cell.mb.transpose() * &pz * cell.w;
        mu_s += cell.ms.transpose() * &pz * cell.w;
        q_s += cell.ms.transpose() * p * &cell.ms * cell.w;
    }
    Ok(Functionals {
        mu_b: mu_b.iter().cloned().collect(),
        mu_s: mu_s.iter().cloned().collect(),
        q_s,
    })
}

/// Precomputed `z ↦ Σ w_i M_{σ,i}ᵀ Φ_i z_i` together with the Gram data for `‖·‖_Φ`.
#[derive(Debug, Clone)]
pub struct SigmaFunctional {
    n: usize,
    g: Vec<f64>,
    wphi: Vec<f64>,
}

impl SigmaFunctional {
    pub fn new(c: &ApproximatingComponent, t: &WeightTable) -> Self {
        let mut g = vec![];
        let mut wphi = vec![];
        for (cell, p) in c.cells.iter().zip(&t.phi) {
            g.extend(linalg::row_major(&(cell.ms.transpose() * p * cell.w)));
            wphi.extend(linalg::row_major(&(p * cell.w)));
        }
        SigmaFunctional { n: c.n, g, wphi }
    }

    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (gi, zi) in self.g.chunks(n * n).zip(z.chunks(n)) {
            linalg::gemv_acc(out, gi, zi, 1.0);
        }
    }

    pub fn norm(&self, z: &[f64]) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for (p, zi) in self.wphi.chunks(n * n).zip(z.chunks(n)) {
            for r in 0..n {
                for q in 0..n {
                    s += zi[r] * p[r * n + q] * zi[q];
                }
            }
        }
        s.sqrt()
    }
}

/// Infimum of the cell nodes, the support infimum of the simulated discrete measure.
pub fn component_kappa(c: &ApproximatingComponent) -> f64 {
    c.cells.iter().map(|c| c.node).fold(f64::INFINITY, f64::min)
}

pub fn build_phi_coupling(c: &ApproximatingComponent, m: f64, delta: f64, l: f64, r: f64) -> Result<WeightTable> {
    let kappa = component_kappa(c);
    if !(kappa > 0.0) {
        return Err(Error::invalid("weights", "kappa", "support infimum must be positive"));
    }
    for (name, v) in [("m", m), ("delta", delta), ("L", l), ("R", r)] {
        if !(v > 0.0) || v.is_nan() {
            return Err(Error::invalid("weights", name, format!("must be positive, got {v}")));
        }
    }
    if !(m > kappa) {
        return Err(Error::invalid("weights", "m", format!("must exceed kappa = {kappa}")));
    }
    let n = c.n;
    let id = DMatrix::<f64>::identity(n, n);
    let mut phi = Vec::with_capacity(c.cells.len());
    let mut branch = Vec::with_capacity(c.cells.len());
    for (i, cell) in c.cells.iter().enumerate() {
        let th = cell.node;
        if th >= m {
            phi.push(&id * (m.sqrt() / th.sqrt()));
            branch.push("tail");
            continue;
        }
        let ms = &cell.ms;
        if !is_spd(ms) {
            return Err(Error::invalid("weights", format!("cells[{i}].Ms"), "must be symmetric positive definite"));
        }
        if op_norm(ms) > r {
            phi.push(id.clone());
            branch.push("identity");
            continue;
        }
        let inv = spd_inverse(ms, &format!("cells[{i}].Ms"))?;
        if op_norm(&inv) <= l {
            phi.push(inv);
            branch.push("inverse");
        } else {
            phi.push(spd_inverse(&(&id * (delta * th.sqrt()) + ms), "shifted Ms")?);
            branch.push("shifted");
        }
    }
    Ok(WeightTable {
        n,
        phi,
        branch,
        provenance: Provenance::Coupling { m, delta, l, r },
    })
}

pub fn build_psi_lyapunov(c: &ApproximatingComponent, m: f64) -> Result<WeightTable> {
    let kappa = component_kappa(c);
    if !(kappa > 0.0) {
        return Err(Error::invalid("weights", "kappa", "support infimum must be positive"));
    }
    if !(m > kappa) {
        return Err(Error::invalid("weights", "m", format!("must exceed kappa = {kappa}")));
    }
    let n = c.n;
    let id = DMatrix::<f64>::identity(n, n);
    let mut phi = Vec::with_capacity(c.cells.len());
    let mut branch = Vec::with_capacity(c.cells.len());
    for cell in &c.cells {
        let th = cell.node;
        if th < m && is_sym_nonneg(&cell.mb) && op_norm(&cell.mb) <= m {
            phi.push(spd_inverse(&(&id * (th.sqrt() / m) + &cell.mb), "shifted Mb")?);
            branch.push("inverse");
        } else {
            phi.push(&id / th.sqrt());
            branch.push("tail");
        }
    }
    Ok(WeightTable {
        n,
        phi,
        branch,
        provenance: Provenance::Lyapunov { m },
    })
}

/// `‖z1−z2‖_Φ ∧ 1`.
pub fn distance_dphi(z1: &[f64], z2: &[f64], c: &ApproximatingComponent, phi: &WeightTable) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::invalid("weights", "z2", "dimension mismatch"));
    }
    let d: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| a - b).collect();
    Ok(weighted_norms(c, phi, &d)?.0.min(1.0))
}

/// `√((‖z1−z2‖_Φ ∧ 1)(1 + ‖z1‖²_Ψ + ‖z2‖²_Ψ))`.
pub fn distance_dphipsi(
    z1: &[f64],
    z2: &[f64],
    c: &ApproximatingComponent,
    phi: &WeightTable,
    psi: &WeightTable,
) -> Result<f64> {
    let d = distance_dphi(z1, z2, c, phi)?;
    let a = weighted_norms(c, psi, z1)?.0;
    let b = weighted_norms(c, psi, z2)?.0;
    Ok((d * (1.0 + a * a + b * b)).sqrt())
}

/// Integration against the lifting measure, over either a basis or a component.
pub trait MeasureView {
    fn n(&self) -> usize;
    fn kappa(&self) -> f64;
    /// `∫_{[lo,hi)} f(θ, M_b(θ), M_σ(θ)) μ(dθ)`.
    fn integrate(&self, lo: f64, hi: f64, f: &dyn Fn(f64, &DMatrix<f64>, &DMatrix<f64>) -> f64) -> Result<f64>;
    /// Whether `M_b` is symmetric nonnegative definite μ-a.e.
    fn mb_sym_nonneg(&self) -> bool;
}

impl MeasureView for ApproximatingComponent {
    fn n(&self) -> usize {
        self.n
    }

    fn kappa(&self) -> f64 {
        component_kappa(self)
    }

    fn integrate(&self, lo: f64, hi: f64, f: &dyn Fn(f64, &DMatrix<f64>, &DMatrix<f64>) -> f64) -> Result<f64> {
        Ok(self
            .cells
            .iter()
            .filter(|c| c.node >= lo && c.node < hi)
            .map(|c| c.w * f(c.node, &c.mb, &c.ms))
            .sum())
    }

    fn mb_sym_nonneg(&self) -> bool {
        self.cells.iter().all(|c| is_sym_nonneg(&c.mb))
    }
}

pub struct BasisMeasure<'a> {
    pub basis: &'a LiftingBasis,
    pub quad_tol: f64,
}

impl MeasureView for BasisMeasure<'_> {
    fn n(&self) -> usize {
        self.basis.n
    }

    fn kappa(&self) -> f64 {
        self.basis.inf_support()
    }

    fn integrate(&self, lo: f64, hi: f64, f: &dyn Fn(f64, &DMatrix<f64>, &DMatrix<f64>) -> f64) -> Result<f64> {
        let r = self.basis.integrate_measure(lo, hi, &QuadOptions::with_tol(self.quad_tol), f)?;
        if r.is_divergent() {
            return Err(Error::Quadrature { lo, hi, err: r.error });
        }
        Ok(r.value[0])
    }

    fn mb_sym_nonneg(&self) -> bool {
        let atoms = self.basis.atoms.iter().all(|a| is_sym_nonneg(&a.mb));
        let segs = self.basis.segments.iter().filter(|s| s.has_mass()).all(|s| match &s.family {
            // Scalar multiples of the identity with nonnegative weights.
            Family::TemperedFractional(_) => true,
            Family::Table(rows) => rows.iter().all(|r| is_sym_nonneg(&r.mb)),
            Family::PowerLaw { mb, .. } => is_sym_nonneg(mb),
        });
        atoms && segs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingConstants {
    pub m: f64,
    pub delta: f64,
    pub l: f64,
    pub r: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub c: f64,
    pub lambda: f64,
    pub certified: bool,
}

fn tail_integral(mu: &dyn MeasureView, m: f64) -> Result<f64> {
    mu.integrate(m, f64::INFINITY, &|th, _, ms| th.powf(-0.5) * (1.0 + op_norm(ms)).powi(2))
}

/// `(δ_m, L_m)`.
pub fn schedule(mu: &dyn MeasureView, m: f64) -> Result<(f64, f64)> {
    let j = tail_integral(mu, m)? + 1.0 / m;
    Ok((m.powf(-0.5) * j.sqrt(), j.powf(-0.5)))
}

fn in_a(ms: &DMatrix<f64>, l: f64) -> bool {
    is_spd(ms) && spd_inverse(ms, "Ms").map_or(false, |inv| op_norm(&inv) <= l)
}

fn in_b(ms: &DMatrix<f64>, r: f64) -> bool {
    is_spd(ms) && op_norm(ms) <= r
}

pub fn compute_coupling_constants(
    mu: &dyn MeasureView,
    meta: &Metadata,
    m: f64,
    delta: Option<f64>,
    l: Option<f64>,
    r: f64,
) -> Result<CouplingConstants> {
    let kappa = mu.kappa();
    if !(kappa > 0.0) {
        return Err(Error::invalid("weights", "kappa", "support infimum must be positive"));
    }
    let cb = meta
        .c_b_lip
        .ok_or_else(|| Error::invalid("weights", "coefficients.c_b_lip", "Lipschitz constant of b is required"))?;
    let cs = meta
        .c_s_lip
        .ok_or_else(|| Error::invalid("weights", "coefficients.c_s_lip", "Lipschitz constant of sigma is required"))?;
    if !(m > 0.0) || !(r > 0.0) {
        return Err(Error::invalid("weights", "m", "m and R must be positive"));
    }
    let (dm, lm) = schedule(mu, m)?;
    let delta = delta.unwrap_or(dm);
    let l = l.unwrap_or(lm);
    if !(delta > 0.0) || !(l > 0.0) {
        return Err(Error::invalid("weights", "delta", "delta and L must be positive"));
    }
    let inf = f64::INFINITY;
    let not_a = mu.integrate(kappa, inf, &|th, _, ms| if in_a(ms, l) { 0.0 } else { th.powf(-0.5) })?;
    let not_b = mu.integrate(kappa, inf, &|th, _, ms| {
        if in_b(ms, r) {
            0.0
        } else {
            (1.0 + op_norm(ms)).powi(2) / th
        }
    })?;
    let alpha = delta * not_a + not_b + m.powf(-0.5) * tail_integral(mu, m)?;
    let beta = (l * m.sqrt()).max(1.0 / delta).max(m.sqrt());
    let jb = mu.integrate(kappa, inf, &|th, mb, _| th.powf(-1.5) * op_norm(mb).powi(2))?;
    let js = mu.integrate(kappa, inf, &|th, _, ms| th.powf(-0.5) * op_norm(ms).powi(2))?;
    let epsilon = 2.0 * cb * (alpha * beta * jb).sqrt() + 2.0 * cs * cs * alpha * beta * js;
    let c = 2.0 * beta * (cb * cb * jb + cs * cs * js);
    Ok(CouplingConstants {
        m,
        delta,
        l,
        r,
        alpha,
        beta,
        epsilon,
        c,
        lambda: c,
        certified: epsilon <= 0.5,
    })
}

/// Doubling search over `m` from `2κ` (with the automatic `δ_m, L_m`) until `ε ≤ 1/2`; the
/// search stops at `2^20·κ`.
pub fn find_coupling_parameters(mu: &dyn MeasureView, meta: &Metadata, r: f64) -> Result<CouplingConstants> {
    let kappa = mu.kappa();
    if !(kappa > 0.0) {
        return Err(Error::invalid("weights", "kappa", "support infimum must be positive"));
    }
    let cap = kappa * (1u64 << 20) as f64;
    let mut m = 2.0 * kappa;
    loop {
        let cc = compute_coupling_constants(mu, meta, m, None, None, r)?;
        if cc.certified {
            return Ok(cc);
        }
        m *= 2.0;
        if m > cap {
            return Err(Error::invalid(
                "weights",
                "m",
                format!("no m up to {cap:.3e} certifies epsilon <= 1/2 (last epsilon {:.3e})", cc.epsilon),
            ));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub pass: bool,
    pub margin: f64,
    #[serde(rename = "I")]
    pub i: f64,
    pub kappa: f64,
    pub details: Vec<String>,
}

/// The four conditions: κ > 0; `M_b` symmetric nonnegative; `γ·∫θ^{−1}|M_b| dμ < 1` with linear
/// growth of `b`; sublinear growth of σ. A zero γ is accepted.
pub fn check_lyapunov_sufficient(mu: &dyn MeasureView, meta: &Metadata) -> Result<LyapunovReport> {
    let kappa = mu.kappa();
    let mut details = vec![];
    let mut pass = true;
    if !(kappa > 0.0) {
        pass = false;
        details.push(format!("kappa = {kappa} is not positive"));
    }
    if !mu.mb_sym_nonneg() {
        pass = false;
        details.push("Mb is not symmetric nonnegative definite".into());
    }
    let i = if kappa > 0.0 {
        mu.integrate(kappa, f64::INFINITY, &|th, mb, _| op_norm(mb) / th)?
    } else {
        f64::INFINITY
    };
    let margin = match meta.gamma {
        Some(g) => {
            let gi = if g == 0.0 { 0.0 } else { g * i };
            if !(gi < 1.0) {
                pass = false;
                details.push(format!("gamma * I = {gi} is not below 1"));
            }
            1.0 - gi
        }
        None => {
            pass = false;
            details.push("coercivity constant gamma is unknown".into());
            f64::NEG_INFINITY
        }
    };
    if meta.c_b_lg.is_none() || meta.c_b_lg_prime.is_none() {
        pass = false;
        details.push("linear growth or coercivity offset of b is unknown".into());
    }
    match (meta.p, meta.c_s_sub) {
        (Some(p), Some(_)) if p > 0.0 && p < 1.0 => {}
        _ => {
            pass = false;
            details.push("sigma is not known to grow sublinearly".into());
        }
    }
    Ok(LyapunovReport {
        pass,
        margin,
        i,
        kappa,
        details,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientSpec, DiffusionSpec, DriftSpec};
    use crate::discretize::{build_component, ThetaMax};
    use crate::kernelbasis::{make_expsum_basis, make_tempered_fractional_basis, TemperedFractional};
    use crate::noise::{fill_normals, stream, Purpose};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn comp(terms: &[(f64, DMatrix<f64>, DMatrix<f64>)]) -> ApproximatingComponent {
        ApproximatingComponent::from_atoms(&Arc::new(make_expsum_basis(terms).unwrap())).unwrap()
    }

    fn meta(gamma: f64) -> Metadata {
        CoefficientSpec {
            drift: DriftSpec::Linear { beta: -gamma, c: None },
            diffusion: DiffusionSpec::Constant { s: 1.0 },
            truncation: None,
        }
        .build(1)
        .unwrap()
        .meta
    }

    #[test]
    fn phi0_reproduces_observation_norms() {
        let c = comp(&[(0.5, s(1.0), s(1.0)), (2.0, s(1.0), s(2.0)), (7.0, s(0.3), s(1.0))]);
        let z = [0.3, -1.2, 2.0];
        let (a, b) = weighted_norms(&c, &WeightTable::phi0(&c), &z).unwrap();
        let o = c.observe(&z).unwrap();
        assert!((a - o.norm_h).abs() < 1e-12 * o.norm_h);
        assert!((a * a + b * b - o.norm_v * o.norm_v).abs() < 1e-12 * o.norm_v * o.norm_v);
        assert_eq!(weighted_norms(&c, &WeightTable::phi0(&c), &[0.0; 3]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn inverse_sigma_table_recovers_observation() {
        let c = comp(&[(1.0, s(1.0), s(2.0)), (3.0, s(1.0), s(0.5))]);
        let t = WeightTable::custom(&c, c.cells.iter().map(|c| c.ms.clone().try_inverse().unwrap()).collect()).unwrap();
        let z = [0.7, -0.4];
        let f = weighted_functionals(&c, &t, &z).unwrap();
        assert!((f.mu_s[0] - c.observe(&z).unwrap().x[0]).abs() < 1e-15);
        let single = comp(&[(1.0, s(1.0), s(3.0))]);
        let t1 = WeightTable::custom(&single, vec![s(0.5)]).unwrap();
        assert!((weighted_functionals(&single, &t1, &[1.0]).unwrap().q_s[(0, 0)] - 4.5).abs() < 1e-15);
    }

    #[test]
    fn coupling_table_branches() {
        let c = comp(&[(2.0, s(1.0), s(1.0)), (16.0, s(1.0), s(1.0))]);
        let t = build_phi_coupling(&c, 4.0, 0.5, 10.0, 10.0).unwrap();
        assert_eq!(t.phi[0][(0, 0)], 1.0);
        assert_eq!(t.phi[1][(0, 0)], 0.5);
        assert_eq!(t.branch, vec!["inverse", "tail"]);
        assert!(build_phi_coupling(&c, 4.0, 0.0, 10.0, 10.0).is_err());
        let t = build_phi_coupling(&c, 4.0, 0.5, 0.5, 10.0).unwrap();
        assert!((t.phi[0][(0, 0)] - 1.0 / (0.5 * 2f64.sqrt() + 1.0)).abs() < 1e-15);
        let t = build_phi_coupling(&c, 4.0, 0.5, 10.0, 0.5).unwrap();
        assert_eq!(t.branch[0], "identity");
        assert!(t.admissibility_constant(&c).unwrap().is_finite());
        let neg = comp(&[(1.0, s(1.0), s(-1.0))]);
        assert!(build_phi_coupling(&neg, 4.0, 0.5, 10.0, 10.0).is_err());
    }

    #[test]
    fn lyapunov_table_branches() {
        let c = comp(&[(1.0, s(0.0), s(1.0)), (9.0, s(1.0), s(1.0))]);
        let t = build_psi_lyapunov(&c, 4.0).unwrap();
        assert!((t.phi[0][(0, 0)] - 4.0).abs() < 1e-15);
        assert!((t.phi[1][(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let c2 = comp(&[(1.0, m, DMatrix::identity(2, 2))]);
        assert_eq!(build_psi_lyapunov(&c2, 4.0).unwrap().branch, vec!["tail"]);
    }

    #[test]
    fn coupling_constants_examples() {
        let c = comp(&[(1.0, s(1.0), s(1.0))]);
        let cc = compute_coupling_constants(&c, &meta(0.0), 2.0, Some(0.5), Some(1e6), 1e6).unwrap();
        assert_eq!(cc.alpha, 0.0);
        assert_eq!(cc.epsilon, 0.0);
        let cc = compute_coupling_constants(&c, &meta(0.0), 4.0, Some(0.5), Some(3.0), 1e6).unwrap();
        assert_eq!(cc.beta, 6.0);
        let mut no_lip = meta(0.0);
        no_lip.c_b_lip = None;
        assert!(compute_coupling_constants(&c, &no_lip, 4.0, None, None, 1.0).is_err());
        let tf = TemperedFractional::new(0.5, 0.75, 1.0, 1.0, None, None).unwrap();
        let basis = make_tempered_fractional_basis(tf, 1).unwrap();
        let mu = BasisMeasure { basis: &basis, quad_tol: 1e-8 };
        let found = find_coupling_parameters(&mu, &meta(0.0), f64::INFINITY).unwrap();
        assert!(found.certified && found.m.is_finite());
    }

    #[test]
    fn lyapunov_checks() {
        let c = comp(&[(1.0, s(1.0), s(1.0))]);
        let r = check_lyapunov_sufficient(&c, &meta(0.5)).unwrap();
        assert!(r.pass && (r.i - 1.0).abs() < 1e-15 && (r.margin - 0.5).abs() < 1e-15);
        let r = check_lyapunov_sufficient(&c, &meta(1.0)).unwrap();
        assert!(!r.pass && r.margin <= 0.0);
        let tf = TemperedFractional::new(0.5, 0.75, 2.0, 2.0, None, None).unwrap();
        let basis = make_tempered_fractional_basis(tf, 1).unwrap();
        let r = check_lyapunov_sufficient(&BasisMeasure { basis: &basis, quad_tol: 1e-10 }, &meta(0.5)).unwrap();
        assert!((r.i - 0.5f64.sqrt()).abs() < 1e-6, "{}", r.i);
        // The discretized measure approaches the same integral.
        let comp = build_component(&Arc::new(basis), 64, ThetaMax::AUTO, 1e-10).unwrap();
        let rc = check_lyapunov_sufficient(&comp, &meta(0.5)).unwrap();
        assert!((rc.i - r.i).abs() < 0.05 * r.i);
    }

    #[test]
    fn distances() {
        let c = comp(&[(1.0, s(1.0), s(1.0))]);
        let phi = WeightTable::phi0(&c);
        assert_eq!(distance_dphi(&[0.4], &[0.4], &c, &phi).unwrap(), 0.0);
        let psi = WeightTable::custom(&c, vec![s(1.0)]).unwrap();
        let d = distance_dphipsi(&[1.0], &[-1.0], &c, &WeightTable::custom(&c, vec![s(1.0)]).unwrap(), &psi).unwrap();
        assert!((d - 3f64.sqrt()).abs() < 1e-15);
    }

    fn random_component(seed: u64, k: usize, n: usize) -> (ApproximatingComponent, WeightTable) {
        let mut rng = stream(seed, Purpose::Auxiliary, 0);
        let mut buf = vec![0.0; 3 * n * n + 1];
        let mut terms = vec![];
        let mut tables = vec![];
        for i in 0..k {
            fill_normals(&mut rng, &mut buf);
            let a = DMatrix::from_row_slice(n, n, &buf[..n * n]);
            let b = DMatrix::from_row_slice(n, n, &buf[n * n..2 * n * n]);
            let p = DMatrix::from_row_slice(n, n, &buf[2 * n * n..3 * n * n]);
            let spd = |m: &DMatrix<f64>| m * m.transpose() + DMatrix::identity(n, n) * 0.5;
            terms.push((0.5 + i as f64 + buf[3 * n * n].abs(), a, spd(&b)));
            tables.push(spd(&p));
        }
        let c = comp(&terms);
        let order: Vec<usize> = {
            let mut o: Vec<usize> = (0..k).collect();
            o.sort_by(|&x, &y| terms[x].0.total_cmp(&terms[y].0));
            o
        };
        let t = WeightTable::custom(&c, order.iter().map(|&i| tables[i].clone()).collect()).unwrap();
        (c, t)
    }

    proptest! {
        #[test]
        fn adjoint_and_trace_identities(seed in any::<u64>(), k in 1usize..5, n in 1usize..4) {
            let (c, t) = random_component(seed, k, n);
            let mut rng = stream(seed, Purpose::Auxiliary, 1);
            let mut z = vec![0.0; k * n];
            let mut x = vec![0.0; n];
            fill_normals(&mut rng, &mut z);
            fill_normals(&mut rng, &mut x);
            let f = weighted_functionals(&c, &t, &z).unwrap();
            let lhs: f64 = x.iter().zip(&f.mu_s).map(|(a, b)| a * b).sum();
            let mut rhs = 0.0;
            for ((cell, p), zi) in c.cells.iter().zip(&t.phi).zip(z.chunks(n)) {
                let v = p * &cell.ms * DMatrix::from_column_slice(n, 1, &x);
                rhs += cell.w * v.iter().zip(zi).map(|(a, b)| a * b).sum::<f64>();
            }
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
            prop_assert!(linalg::is_symmetric(&f.q_s));
            let xm = DMatrix::from_row_slice(n, 1, &x);
            let mut fro = 0.0;
            for (cell, p) in c.cells.iter().zip(&t.phi) {
                let e = p.clone().symmetric_eigen();
                let root = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt)) * e.eigenvectors.transpose();
                fro += cell.w * (root * &cell.ms * &xm).norm_squared();
            }
            let tr = (xm.transpose() * &f.q_s * &xm).trace();
            prop_assert!((fro - tr).abs() <= 1e-10 * (1.0 + tr.abs()));
            // Seminorm dominates sqrt(kappa) times the norm.
            let (a, b) = weighted_norms(&c, &t, &z).unwrap();
            prop_assert!(b >= component_kappa(&c).sqrt() * a * (1.0 - 1e-12));
            let other: Vec<f64> = z.iter().map(|v| -v).collect();
            let d1 = distance_dphipsi(&z, &other, &c, &t, &t).unwrap();
            let d2 = distance_dphipsi(&other, &z, &c, &t, &t).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-12 * (1.0 + d1));
        }

        #[test]
        fn lyapunov_monotone_in_gamma(g1 in 0.0f64..3.0, g2 in 0.0f64..3.0) {
            let c = comp(&[(1.0, s(0.7), s(1.0)), (2.0, s(0.4), s(1.0))]);
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let a = check_lyapunov_sufficient(&c, &meta(lo)).unwrap().pass;
            let b = check_lyapunov_sufficient(&c, &meta(hi)).unwrap().pass;
            prop_assert!(a || !b);
        }
    }
}
