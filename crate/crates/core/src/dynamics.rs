//! Time stepping for the lifted system and the direct Volterra scheme used to cross-check it.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::coefficients::CoefficientModel;
use crate::discretize::ApproximatingComponent;
use crate::error::{Error, Result};
use crate::kernelbasis::{exp_integral, ClosedForm, LiftingBasis, Which};
use crate::linalg::{self, gemv_acc};
use crate::noise::NoisePlan;
use crate::quadrature::{integrate_left_singular, integrate_scalar, QuadOptions};

/// Below this value of `a·h` the drift factor `(1−e^{−ah})/a` is replaced by `h`.
pub const SERIES_CUTOFF: f64 = 1e-8;

/// Flattened cell data for one step size.
#[derive(Debug, Clone)]
pub struct Stepper {
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub h: f64,
    pub a: Vec<f64>,
    pub w: Vec<f64>,
    mb: Vec<f64>,
    ms: Vec<f64>,
    decay: Vec<f64>,
    factor: Vec<f64>,
}

impl Stepper {
    pub fn new(c: &ApproximatingComponent, h: f64, d: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid("dynamics", "scheme.h", format!("step must be positive, got {h}")));
        }
        let a: Vec<f64> = c.cells.iter().map(|c| c.node).collect();
        let decay = a.iter().map(|&a| (-a * h).exp()).collect();
        let factor = a
            .iter()
            .map(|&a| if a * h < SERIES_CUTOFF { h } else { -(-a * h).exp_m1() / a })
            .collect();
        Ok(Stepper {
            k: c.cells.len(),
            n: c.n,
            d,
            h,
            w: c.cells.iter().map(|c| c.w).collect(),
            mb: c.cells.iter().flat_map(|c| linalg::row_major(&c.mb)).collect(),
            ms: c.cells.iter().flat_map(|c| linalg::row_major(&c.ms)).collect(),
            a,
            decay,
            factor,
        })
    }

    pub fn observe(&self, z: &[f64], x: &mut [f64]) {
        let n = self.n;
        x.iter_mut().for_each(|v| *v = 0.0);
        if n == 1 {
            x[0] = self.w.iter().zip(z).map(|(w, z)| w * z).sum();
            return;
        }
        for (w, zi) in self.w.iter().zip(z.chunks(n)) {
            for (xd, zd) in x.iter_mut().zip(zi) {
                *xd += w * zd;
            }
        }
    }

    /// One exponential-Euler step: `Z_i ← e^{−a_i h}Z_i + f_i(M_{b,i}·bx + M_{σ,i}·extra) + e^{−a_i h}M_{σ,i}·sdw`.
    pub fn advance(&self, z: &mut [f64], bx: &[f64], sdw: &[f64], extra: Option<&[f64]>) {
        let n = self.n;
        if n == 1 {
            let (b, s, e) = (bx[0], sdw[0], extra.map_or(0.0, |e| e[0]));
            for i in 0..self.k {
                let zi = &mut z[i];
                *zi = self.decay[i] * (*zi + self.ms[i] * s) + self.factor[i] * (self.mb[i] * b + self.ms[i] * e);
            }
            return;
        }
        let nn = n * n;
        let mut tmp = vec![0.0; n];
        for i in 0..self.k {
            let zi = &mut z[i * n..(i + 1) * n];
            let mb = &self.mb[i * nn..(i + 1) * nn];
            let ms = &self.ms[i * nn..(i + 1) * nn];
            tmp.copy_from_slice(zi);
            gemv_acc(&mut tmp, ms, sdw, 1.0);
            for (zd, t) in zi.iter_mut().zip(&tmp) {
                *zd = self.decay[i] * t;
            }
            gemv_acc(zi, mb, bx, self.factor[i]);
            if let Some(e) = extra {
                gemv_acc(zi, ms, e, self.factor[i]);
            }
        }
    }
}

/// `σ(x)·ΔW` for row-major `σ`.
pub fn apply_sigma(s: &[f64], dw: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    gemv_acc(out, s, dw, 1.0);
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPath {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Cell states at the recorded times, when requested.
    pub states: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Record {
    /// Keep every `every`-th grid point (0 and the final point are always kept).
    pub every: usize,
    pub states: bool,
}

impl Default for Record {
    fn default() -> Self {
        Record { every: 1, states: false }
    }
}

pub(crate) fn check_dims(c: &ApproximatingComponent, coeffs: &CoefficientModel, z0: &[f64], plan: &NoisePlan) -> Result<()> {
    if coeffs.n != c.n {
        return Err(Error::invalid(
            "dynamics",
            "coefficients",
            format!("state dimension {} does not match the basis ({})", coeffs.n, c.n),
        ));
    }
    if coeffs.d != plan.d {
        return Err(Error::invalid("dynamics", "d", format!("noise dimension {} vs plan {}", coeffs.d, plan.d)));
    }
    if z0.len() != c.n * c.cells.len() {
        return Err(Error::invalid(
            "dynamics",
            "z0",
            format!("expected {} entries, got {}", c.n * c.cells.len(), z0.len()),
        ));
    }
    Ok(())
}

/// Run the lifted scheme and hand `(step, z, x)` to `visit` at every grid point including 0.
///
/// While `b(X)` and `σ(X)ΔW` vanish identically the state is propagated from the last
/// inhomogeneous step by `exp(−a_i·(elapsed))`, so the homogeneous flow is reproduced without
/// accumulating rounding across steps.
pub fn simulate_lifted_with<F: FnMut(usize, &[f64], &[f64])>(
    c: &ApproximatingComponent,
    coeffs: &CoefficientModel,
    z0: &[f64],
    plan: &NoisePlan,
    trajectory: u64,
    mut visit: F,
) -> Result<()> {
    check_dims(c, coeffs, z0, plan)?;
    let st = Stepper::new(c, plan.h, plan.d)?;
    let (n, d) = (c.n, plan.d);
    let mut z = z0.to_vec();
    let mut anchor = z0.to_vec();
    let mut anchor_step = 0usize;
    let mut x = vec![0.0; n];
    let mut bx = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    let mut dw = vec![0.0; d];
    let mut sdw = vec![0.0; n];
    let mut inc = plan.increments(trajectory);
    st.observe(&z, &mut x);
    visit(0, &z, &x);
    for m in 0..plan.steps() {
        coeffs.b(&x, &mut bx);
        coeffs.sigma(&x, &mut s);
        inc.next_into(&mut dw);
        apply_sigma(&s, &dw, &mut sdw);
        if bx.iter().chain(&sdw).all(|v| *v == 0.0) {
            let elapsed = (m + 1 - anchor_step) as f64 * plan.h;
            for i in 0..st.k {
                let e = (-st.a[i] * elapsed).exp();
                for j in 0..n {
                    z[i * n + j] = e * anchor[i * n + j];
                }
            }
        } else {
            st.advance(&mut z, &bx, &sdw, None);
            anchor.copy_from_slice(&z);
            anchor_step = m + 1;
        }
        st.observe(&z, &mut x);
        if x.iter().any(|v| !v.is_finite()) || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                module: "dynamics",
                step: m + 1,
                detail: format!("t = {}", (m + 1) as f64 * plan.h),
            });
        }
        visit(m + 1, &z, &x);
    }
    Ok(())
}

pub fn simulate_lifted(
    c: &ApproximatingComponent,
    coeffs: &CoefficientModel,
    z0: &[f64],
    plan: &NoisePlan,
    trajectory: u64,
    record: Record,
) -> Result<LiftedPath> {
    let every = record.every.max(1);
    let last = plan.steps();
    let mut path = LiftedPath {
        times: vec![],
        x: vec![],
        states: record.states.then(Vec::new),
    };
    simulate_lifted_with(c, coeffs, z0, plan, trajectory, |m, z, x| {
        if m % every == 0 || m == last {
            path.times.push(m as f64 * plan.h);
            path.x.push(x.to_vec());
            if let Some(s) = path.states.as_mut() {
                s.push(z.to_vec());
            }
        }
    })?;
    Ok(path)
}

/// `x(t) = Σ e^{−a_i t} w_i z0_i`.
pub fn forcing_term(c: &ApproximatingComponent, z0: &[f64], t: f64) -> Vec<f64> {
    let n = c.n;
    let mut x = vec![0.0; n];
    for (cell, zi) in c.cells.iter().zip(z0.chunks(n)) {
        let f = cell.w * (-cell.node * t).exp();
        for (xd, zd) in x.iter_mut().zip(zi) {
            *xd += f * zd;
        }
    }
    x
}

/// Kernel evaluators for the direct scheme.
pub trait KernelPair: Sync {
    fn n(&self) -> usize;
    /// `∫_a^b K_b(s) ds`.
    fn drift_integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>>;
    fn diffusion_at(&self, t: f64) -> Result<DMatrix<f64>>;
    /// `∫_a^b K_σ(s)K_σ(s)ᵀ ds`.
    fn diffusion_square_integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>>;
}

/// Exact kernels of a finite component.
pub struct ComponentKernels<'a>(pub &'a ApproximatingComponent);

impl KernelPair for ComponentKernels<'_> {
    fn n(&self) -> usize {
        self.0.n
    }

    fn drift_integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>> {
        let n = self.0.n;
        Ok(self
            .0
            .cells
            .iter()
            .fold(DMatrix::zeros(n, n), |acc, c| acc + &c.mb * (c.w * exp_integral(c.node, a, b))))
    }

    fn diffusion_at(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.0.reconstructed_kernel(Which::Diffusion, t))
    }

    fn diffusion_square_integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>> {
        let n = self.0.n;
        let mut acc = DMatrix::zeros(n, n);
        for ci in &self.0.cells {
            for cj in &self.0.cells {
                acc += &ci.ms * cj.ms.transpose() * (ci.w * cj.w * exp_integral(ci.node + cj.node, a, b));
            }
        }
        Ok(acc)
    }
}

/// Kernels of a lifting basis: closed forms when available, quadrature otherwise.
pub struct BasisKernels<'a> {
    pub basis: &'a LiftingBasis,
    pub quad_tol: f64,
    drift: Option<ClosedForm>,
    diffusion: Option<ClosedForm>,
}

impl<'a> BasisKernels<'a> {
    pub fn new(basis: &'a LiftingBasis, quad_tol: f64) -> Self {
        BasisKernels {
            basis,
            quad_tol,
            drift: basis.closed_form(Which::Drift),
            diffusion: basis.closed_form(Which::Diffusion),
        }
    }
}

impl KernelPair for BasisKernels<'_> {
    fn n(&self) -> usize {
        self.basis.n
    }

    fn drift_integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>> {
        if let Some(cf) = &self.drift {
            return Ok(cf.integral(a, b));
        }
        // ∫_a^b e^{−θs} ds integrated against M_b dμ.
        let n = self.basis.n;
        let mut out = DMatrix::zeros(n, n);
        for at in &self.basis.atoms {
            out += &at.mb * (at.mass * exp_integral(at.theta, a, b));
        }
        let opts = QuadOptions::with_tol(self.quad_tol);
        let r = self.basis.integrate_density(0.0, f64::INFINITY, n * n, &opts, |s, th, o| {
            s.weighted_into(th, Which::Drift, n, o);
            let e = exp_integral(th.value(), a, b);
            o.iter_mut().for_each(|v| *v *= e);
        })?;
        if r.is_divergent() {
            return Err(Error::Quadrature { lo: a, hi: b, err: r.error });
        }
        Ok(out + DMatrix::from_row_slice(n, n, &r.value))
    }

    fn diffusion_at(&self, t: f64) -> Result<DMatrix<f64>> {
        match &self.diffusion {
            Some(cf) => Ok(cf.eval(t)),
            None => self.basis.eval_kernel(Which::Diffusion, t, self.quad_tol),
        }
    }

    fn diffusion_square_integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>> {
        if let Some(sq) = self.diffusion.as_ref().and_then(|cf| cf.square_integral(a, b)) {
            return Ok(sq);
        }
        let n = self.basis.n;
        let opts = QuadOptions::with_tol(self.quad_tol);
        let mut err = None;
        let r = integrate_left_singular(
            |s, o| {
                let t = s.value().max(f64::MIN_POSITIVE);
                match self.diffusion_at(t) {
                    Ok(k) => o.copy_from_slice(&linalg::row_major(&(&k * k.transpose()))),
                    Err(e) => {
                        err.get_or_insert(e);
                        o.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            },
            a,
            b,
            n * n,
            &opts,
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        if r.is_divergent() {
            return Err(Error::Quadrature { lo: a, hi: b, err: r.error });
        }
        Ok(DMatrix::from_row_slice(n, n, &r.value))
    }
}

/// Symmetric positive semidefinite square root.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.len() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * root * eig.eigenvectors.transpose()
}

/// Step weights `KB_ℓ`, `KS_ℓ` for `ℓ = 1..=steps`.
pub struct DirectWeights {
    pub kb: Vec<Vec<f64>>,
    pub ks: Vec<Vec<f64>>,
}

impl DirectWeights {
    pub fn new(kernels: &dyn KernelPair, h: f64, steps: usize) -> Result<Self> {
        let mut kb = Vec::with_capacity(steps);
        let mut ks = Vec::with_capacity(steps);
        for l in 1..=steps {
            let (lo, hi) = ((l - 1) as f64 * h, l as f64 * h);
            kb.push(linalg::row_major(&kernels.drift_integral(lo, hi)?));
            let s = if l == 1 {
                psd_sqrt(&(kernels.diffusion_square_integral(0.0, h)? / h))
            } else {
                kernels.diffusion_at(hi)?
            };
            ks.push(linalg::row_major(&s));
        }
        Ok(DirectWeights { kb, ks })
    }
}

/// Left-point scheme `X_m = x(t_m) + Σ_{j<m} KB_{m−j} b(X_j) + Σ_{j<m} KS_{m−j} σ(X_j)ΔW_j`.
/// Returns `X` at every grid point `0..=steps`.
pub fn simulate_volterra_direct(
    weights: &DirectWeights,
    coeffs: &CoefficientModel,
    forcing: &dyn Fn(f64) -> Vec<f64>,
    plan: &NoisePlan,
    trajectory: u64,
) -> Result<Vec<Vec<f64>>> {
    let (n, d) = (coeffs.n, plan.d);
    if coeffs.d != d {
        return Err(Error::invalid("dynamics", "d", format!("noise dimension {} vs plan {}", coeffs.d, d)));
    }
    let steps = plan.steps();
    if weights.kb.len() < steps {
        return Err(Error::invalid("dynamics", "weights", "fewer kernel weights than steps"));
    }
    let mut inc = plan.increments(trajectory);
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    let mut drift_hist: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut noise_hist: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut s = vec![0.0; n * d];
    let mut dw = vec![0.0; d];
    for m in 0..=steps {
        let mut x = forcing(m as f64 * plan.h);
        if x.len() != n {
            return Err(Error::invalid("dynamics", "forcing", format!("expected {n} entries")));
        }
        for j in 0..m {
            gemv_acc(&mut x, &weights.kb[m - j - 1], &drift_hist[j], 1.0);
            gemv_acc(&mut x, &weights.ks[m - j - 1], &noise_hist[j], 1.0);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                module: "dynamics",
                step: m,
                detail: "direct Volterra scheme".into(),
            });
        }
        if m < steps {
            let mut bx = vec![0.0; n];
            coeffs.b(&x, &mut bx);
            coeffs.sigma(&x, &mut s);
            inc.next_into(&mut dw);
            let mut sdw = vec![0.0; n];
            apply_sigma(&s, &dw, &mut sdw);
            drift_hist.push(bx);
            noise_hist.push(sdw);
        }
        xs.push(x);
    }
    Ok(xs)
}

/// Time-averaged L² gap between two paths on the same grid.
pub fn l2_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let m = a.len().min(b.len());
    let s: f64 = a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>()).sum();
    (s / m as f64).sqrt()
}

/// `∫_a^b K` by quadrature; used to cross-check closed forms in tests.
pub fn kernel_integral_by_quadrature(basis: &LiftingBasis, which: Which, a: f64, b: f64, tol: f64) -> Result<f64> {
    let r = integrate_scalar(|t| basis.eval_kernel(which, t, tol * 1e-2).map(|k| k[(0, 0)]).unwrap_or(f64::NAN), a, b, &QuadOptions::with_tol(tol))?;
    Ok(r.value[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientSpec, DiffusionSpec, DriftSpec};
    use crate::discretize::{build_component, ThetaMax};
    use crate::kernelbasis::{make_expsum_basis, make_tempered_fractional_basis, TemperedFractional};
    use std::sync::Arc;

    fn one() -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }

    fn coeffs(drift: DriftSpec, s: f64) -> CoefficientModel {
        CoefficientSpec {
            drift,
            diffusion: DiffusionSpec::Constant { s },
            truncation: None,
        }
        .build(1)
        .unwrap()
    }

    fn zero_model() -> CoefficientModel {
        coeffs(DriftSpec::Linear { beta: 0.0, c: None }, 0.0)
    }

    fn atoms(rates: &[f64]) -> ApproximatingComponent {
        let terms: Vec<_> = rates.iter().map(|&r| (r, one(), one())).collect();
        let b = Arc::new(make_expsum_basis(&terms).unwrap());
        ApproximatingComponent::from_atoms(&b).unwrap()
    }

    #[test]
    fn homogeneous_flow_is_exact_including_stiff_cells() {
        let c = atoms(&[0.5, 3.0, 1e5]);
        let plan = NoisePlan::new(1, 1e-2, 1.0, 1).unwrap();
        let z0 = [1.0, -2.0, 0.75];
        let mut worst = 0.0f64;
        let mut prev = z0.map(f64::abs);
        simulate_lifted_with(&c, &zero_model(), &z0, &plan, 0, |m, z, _| {
            let t = m as f64 * plan.h;
            for i in 0..3 {
                let exact = (-c.cells[i].node * t).exp() * z0[i];
                if exact != 0.0 {
                    worst = worst.max(((z[i] - exact) / exact).abs());
                } else {
                    assert_eq!(z[i], 0.0);
                }
                assert!(z[i].abs() <= prev[i]);
                prev[i] = z[i].abs();
            }
        })
        .unwrap();
        assert!(worst <= 10.0 * f64::EPSILON, "{worst}");
    }

    #[test]
    fn forcing_examples() {
        let b = Arc::new(make_expsum_basis(&[(1.0, one(), one())]).unwrap());
        let mut b2 = (*b).clone();
        b2.atoms[0].mass = 2.0;
        let c = ApproximatingComponent::from_atoms(&Arc::new(b2)).unwrap();
        assert!((forcing_term(&c, &[1.0], 2f64.ln())[0] - 1.0).abs() < 1e-15);
        assert_eq!(forcing_term(&c, &[1.0], 0.0)[0], 2.0);
        assert_eq!(forcing_term(&c, &[0.0], 3.0)[0], 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = atoms(&[1.0]);
        let plan = NoisePlan::new(1, 0.1, 1.0, 1).unwrap();
        assert!(simulate_lifted(&c, &zero_model(), &[0.0, 1.0], &plan, 0, Record::default()).is_err());
        assert!(Stepper::new(&c, -0.1, 1).is_err());
        // Explosive linear drift overflows and is reported with its step.
        let boom = coeffs(DriftSpec::Linear { beta: -1e3, c: None }, 0.0);
        match simulate_lifted(&c, &boom, &[1.0], &NoisePlan::new(1, 0.1, 100.0, 1).unwrap(), 0, Record::default()) {
            Err(Error::NonFinite { step, .. }) => assert!(step > 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn direct_scheme_without_coefficients_follows_forcing() {
        let c = atoms(&[1.0, 2.0]);
        let plan = NoisePlan::new(3, 0.05, 1.0, 1).unwrap();
        let w = DirectWeights::new(&ComponentKernels(&c), plan.h, plan.steps()).unwrap();
        let z0 = [0.3, -0.1];
        let xs = simulate_volterra_direct(&w, &zero_model(), &|t| forcing_term(&c, &z0, t), &plan, 0).unwrap();
        for (m, x) in xs.iter().enumerate() {
            assert_eq!(x[0], forcing_term(&c, &z0, m as f64 * plan.h)[0]);
        }
    }

    #[test]
    fn lift_and_direct_agree_better_on_finer_grids() {
        let c = atoms(&[1.0, 4.0]);
        let model = CoefficientSpec {
            drift: DriftSpec::Tanh { beta: 1.0, amp: 1.0 },
            diffusion: DiffusionSpec::Modulated { s0: 1.0, s1: 0.25 },
            truncation: None,
        }
        .build(1)
        .unwrap();
        let z0 = [0.5, 0.5];
        let gap = |h: f64| {
            let plan = NoisePlan::new(11, h, 2.0, 1).unwrap();
            let w = DirectWeights::new(&ComponentKernels(&c), h, plan.steps()).unwrap();
            let mut tot = 0.0;
            for tr in 0..16 {
                let lifted = simulate_lifted(&c, &model, &z0, &plan, tr, Record::default()).unwrap();
                let direct = simulate_volterra_direct(&w, &model, &|t| forcing_term(&c, &z0, t), &plan, tr).unwrap();
                tot += l2_gap(&lifted.x, &direct).powi(2);
            }
            (tot / 16.0).sqrt()
        };
        let (g1, g2) = (gap(1.0 / 16.0), gap(1.0 / 32.0));
        assert!(g1 / g2 >= 1.2, "{g1} {g2}");
    }

    #[test]
    fn basis_kernels_match_component_kernels_for_atoms() {
        let b = make_expsum_basis(&[(1.0, one(), one() * 2.0), (3.0, one() * 0.5, one())]).unwrap();
        let c = ApproximatingComponent::from_atoms(&Arc::new(b.clone())).unwrap();
        let (bk, ck) = (BasisKernels::new(&b, 1e-10), ComponentKernels(&c));
        for (lo, hi) in [(0.0, 0.1), (0.3, 0.7)] {
            assert!((bk.drift_integral(lo, hi).unwrap() - ck.drift_integral(lo, hi).unwrap()).abs().max() < 1e-14);
            assert!(
                (bk.diffusion_square_integral(lo, hi).unwrap() - ck.diffusion_square_integral(lo, hi).unwrap()).abs().max()
                    < 1e-13
            );
        }
    }

    #[test]
    fn singular_drift_kernel_runs_finite() {
        let tf = TemperedFractional::new(0.5, 0.75, 1.0, 1.0, None, None).unwrap();
        let basis = Arc::new(make_tempered_fractional_basis(tf, 1).unwrap());
        let bk = BasisKernels::new(&basis, 1e-10);
        let plan = NoisePlan::new(2, 0.01, 1.0, 1).unwrap();
        let w = DirectWeights::new(&bk, plan.h, plan.steps()).unwrap();
        let model = coeffs(DriftSpec::Tanh { beta: 1.0, amp: 0.5 }, 1.0);
        let xs = simulate_volterra_direct(&w, &model, &|_| vec![1.0], &plan, 0).unwrap();
        assert!(xs.iter().all(|x| x[0].is_finite()));
        // Closed-form drift integral agrees with quadrature.
        let q = kernel_integral_by_quadrature(&basis, Which::Drift, 0.2, 0.5, 1e-10).unwrap();
        assert!((bk.drift_integral(0.2, 0.5).unwrap()[(0, 0)] - q).abs() < 1e-8 * q);
        let c = build_component(&basis, 40, ThetaMax::Fixed(1e3), 1e-8).unwrap();
        let z0 = vec![1.0; c.len()];
        let p = simulate_lifted(&c, &model, &z0, &plan, 0, Record::default()).unwrap();
        assert!(p.x.iter().all(|x| x[0].is_finite()));
    }
}
