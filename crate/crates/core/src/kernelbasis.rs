//! Lifting bases: a measure on `[0, ∞)` made of atoms and density segments, together with the
//! matrix functions `M_b`, `M_σ` that generate the drift and diffusion kernels
//! `K(t) = ∫ e^{-θt} M(θ) μ(dθ)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_lr, gamma_ur};

use crate::error::{Error, Result};
use crate::linalg::{self, op_norm};
use crate::quadrature::{integrate_left_singular, integrate_tail, QuadOptions, QuadResult, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Drift,
    Diffusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub theta: f64,
    pub mass: f64,
    pub mb: DMatrix<f64>,
    pub ms: DMatrix<f64>,
}

impl Atom {
    pub fn m(&self, which: Which) -> &DMatrix<f64> {
        match which {
            Which::Drift => &self.mb,
            Which::Diffusion => &self.ms,
        }
    }
}

/// Parameters of the tempered fractional (gamma-type) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperedFractional {
    pub alpha_b: f64,
    pub alpha_s: f64,
    pub kappa_b: f64,
    pub kappa_s: f64,
    pub gamma_b: f64,
    pub gamma_s: f64,
}

impl TemperedFractional {
    pub fn new(
        alpha_b: f64,
        alpha_s: f64,
        kappa_b: f64,
        kappa_s: f64,
        gamma_b: Option<f64>,
        gamma_s: Option<f64>,
    ) -> Result<Self> {
        let m = "kernelbasis";
        if !(alpha_b > 0.0 && alpha_b < 1.0) {
            return Err(Error::invalid(m, "alpha_b", format!("{alpha_b} is outside (0, 1)")));
        }
        if !(alpha_s > 0.5 && alpha_s < 1.0) {
            return Err(Error::invalid(m, "alpha_s", format!("{alpha_s} is outside (1/2, 1)")));
        }
        if !(kappa_b > 0.0 && kappa_b.is_finite()) {
            return Err(Error::invalid(m, "kappa_b", "tempering rate must be positive"));
        }
        if !(kappa_s > 0.0 && kappa_s.is_finite()) {
            return Err(Error::invalid(m, "kappa_s", "tempering rate must be positive"));
        }
        let gb = gamma_b.unwrap_or((alpha_b + 1.0) / 2.0);
        let gs = gamma_s.unwrap_or(alpha_s);
        let (lo_b, hi_b) = ((2.0 * alpha_b - 1.0).max(0.5), (2.0 * alpha_b + 0.5).min(1.0));
        if !(gb > lo_b && gb < hi_b) {
            return Err(Error::invalid(m, "gamma_b", format!("{gb} is outside ({lo_b}, {hi_b})")));
        }
        let (lo_s, hi_s) = ((2.0 * alpha_s - 1.0).max(0.5), (2.0 * alpha_s - 0.5).min(1.0));
        if !(gs > lo_s && gs < hi_s) {
            return Err(Error::invalid(m, "gamma_s", format!("{gs} is outside ({lo_s}, {hi_s})")));
        }
        Ok(TemperedFractional {
            alpha_b,
            alpha_s,
            kappa_b,
            kappa_s,
            gamma_b: gb,
            gamma_s: gs,
        })
    }

    fn alpha(&self, which: Which) -> f64 {
        match which {
            Which::Drift => self.alpha_b,
            Which::Diffusion => self.alpha_s,
        }
    }

    fn kappa(&self, which: Which) -> f64 {
        match which {
            Which::Drift => self.kappa_b,
            Which::Diffusion => self.kappa_s,
        }
    }

    pub fn lower(&self) -> f64 {
        self.kappa_b.min(self.kappa_s)
    }

    pub fn density(&self, theta: Theta) -> f64 {
        let (gb, gs) = (theta.minus(self.kappa_b), theta.minus(self.kappa_s));
        let mut r = 0.0;
        if gb > 0.0 {
            r += gb.powf(-self.gamma_b);
        }
        if gs > 0.0 {
            r += gs.powf(-self.gamma_s);
        }
        r
    }

    /// `ρ(θ)·M(θ)` as a scalar multiple of the identity; finite away from the rates.
    pub fn weighted_scalar(&self, theta: Theta, which: Which) -> f64 {
        let (a, k) = (self.alpha(which), self.kappa(which));
        let g = theta.minus(k);
        if g > 0.0 {
            reflection_constant(a) * g.powf(-a)
        } else {
            0.0
        }
    }

    pub fn m_scalar(&self, theta: Theta, which: Which) -> f64 {
        let rho = self.density(theta);
        if rho > 0.0 {
            self.weighted_scalar(theta, which) / rho
        } else {
            0.0
        }
    }

    pub fn kernel_scalar(&self, which: Which, t: f64) -> f64 {
        let (a, k) = (self.alpha(which), self.kappa(which));
        t.powf(a - 1.0) * (-k * t).exp() / gamma(a)
    }
}

/// `1/(Γ(a)Γ(1−a)) = sin(πa)/π`.
fn reflection_constant(a: f64) -> f64 {
    (std::f64::consts::PI * a).sin() / std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub theta: f64,
    pub rho: f64,
    pub mb: DMatrix<f64>,
    pub ms: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    TemperedFractional(TemperedFractional),
    /// Sampled rows; `ln ρ` and the matrices are interpolated linearly in θ (ρ linearly when a
    /// neighbouring sample is zero).
    Table(Vec<TableRow>),
    /// `ρ(θ) = scale·(θ − shift)^{−exponent}` with constant matrices.
    PowerLaw {
        shift: f64,
        exponent: f64,
        scale: f64,
        mb: DMatrix<f64>,
        ms: DMatrix<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub lower: f64,
    /// `None` means the segment extends to infinity.
    pub upper: Option<f64>,
    pub family: Family,
}

impl Segment {
    pub fn upper_or_inf(&self) -> f64 {
        self.upper.unwrap_or(f64::INFINITY)
    }

    fn contains(&self, theta: Theta) -> bool {
        theta.minus(self.lower) >= 0.0 && theta.value() < self.upper_or_inf()
    }

    pub fn density(&self, theta: Theta) -> f64 {
        if !self.contains(theta) {
            return 0.0;
        }
        match &self.family {
            Family::TemperedFractional(tf) => tf.density(theta),
            Family::Table(rows) => {
                let (j, tau) = table_locate(rows, theta.value());
                let (r0, r1) = (rows[j].rho, rows[j + 1].rho);
                if r0 > 0.0 && r1 > 0.0 {
                    ((1.0 - tau) * r0.ln() + tau * r1.ln()).exp()
                } else {
                    (1.0 - tau) * r0 + tau * r1
                }
            }
            Family::PowerLaw { shift, exponent, scale, .. } => {
                let g = theta.minus(*shift);
                if g > 0.0 {
                    scale * g.powf(-exponent)
                } else {
                    0.0
                }
            }
        }
    }

    /// `M(θ)` written row-major into `out` (n×n).
    pub fn m_into(&self, theta: Theta, which: Which, n: usize, out: &mut [f64]) {
        match &self.family {
            Family::TemperedFractional(tf) => fill_scaled_identity(out, n, tf.m_scalar(theta, which)),
            Family::Table(rows) => {
                let (j, tau) = table_locate(rows, theta.value());
                let (a, b) = match which {
                    Which::Drift => (&rows[j].mb, &rows[j + 1].mb),
                    Which::Diffusion => (&rows[j].ms, &rows[j + 1].ms),
                };
                for r in 0..n {
                    for c in 0..n {
                        out[r * n + c] = (1.0 - tau) * a[(r, c)] + tau * b[(r, c)];
                    }
                }
            }
            Family::PowerLaw { mb, ms, .. } => {
                let m = if which == Which::Drift { mb } else { ms };
                out.copy_from_slice(&linalg::row_major(m));
            }
        }
    }

    /// `ρ(θ)·M(θ)` row-major. Evaluated directly where the product is better behaved.
    pub fn weighted_into(&self, theta: Theta, which: Which, n: usize, out: &mut [f64]) {
        if !self.contains(theta) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        match &self.family {
            Family::TemperedFractional(tf) => fill_scaled_identity(out, n, tf.weighted_scalar(theta, which)),
            _ => {
                let rho = self.density(theta);
                self.m_into(theta, which, n, out);
                out.iter_mut().for_each(|v| *v *= rho);
            }
        }
    }

    pub fn m_matrix(&self, theta: Theta, which: Which, n: usize) -> DMatrix<f64> {
        let mut buf = vec![0.0; n * n];
        self.m_into(theta, which, n, &mut buf);
        DMatrix::from_row_slice(n, n, &buf)
    }

    pub fn m_opnorm(&self, theta: Theta, which: Which, n: usize) -> f64 {
        match &self.family {
            Family::TemperedFractional(tf) => tf.m_scalar(theta, which).abs(),
            _ => op_norm(&self.m_matrix(theta, which, n)),
        }
    }

    /// Interior points where the density or its products may blow up from the right.
    pub fn singular_points(&self) -> Vec<f64> {
        let mut pts = vec![self.lower];
        match &self.family {
            Family::TemperedFractional(tf) => {
                pts.push(tf.kappa_b);
                pts.push(tf.kappa_s);
            }
            Family::PowerLaw { shift, .. } => pts.push(*shift),
            Family::Table(_) => {}
        }
        let up = self.upper_or_inf();
        pts.retain(|&p| p >= self.lower && p < up);
        pts.sort_by(|a, b| a.total_cmp(b));
        pts.dedup();
        pts
    }

    pub fn has_mass(&self) -> bool {
        match &self.family {
            Family::TemperedFractional(_) => true,
            Family::Table(rows) => rows.iter().any(|r| r.rho > 0.0),
            Family::PowerLaw { scale, .. } => *scale > 0.0 && self.upper_or_inf() > self.lower,
        }
    }

    /// Infimum of the set where the density is not identically zero.
    pub fn effective_lower(&self) -> Option<f64> {
        if !self.has_mass() {
            return None;
        }
        match &self.family {
            Family::Table(rows) => {
                let first = rows.iter().position(|r| r.rho > 0.0)?;
                Some(rows[first.saturating_sub(1)].theta)
            }
            Family::PowerLaw { shift, .. } => Some(self.lower.max(*shift)),
            Family::TemperedFractional(tf) => Some(self.lower.max(tf.lower())),
        }
    }

    /// `∫_{[lo,hi) ∩ segment} f(θ) dθ`; `f` is responsible for including the density.
    pub fn integrate<F: FnMut(Theta, &mut [f64])>(
        &self,
        lo: f64,
        hi: f64,
        dim: usize,
        opts: &QuadOptions,
        mut f: F,
    ) -> Result<QuadResult> {
        let a = lo.max(self.lower);
        let b = hi.min(self.upper_or_inf());
        let mut total = QuadResult::zero(dim);
        if !(b > a) {
            return Ok(total);
        }
        let mut cuts = vec![a];
        cuts.extend(self.singular_points().into_iter().filter(|&p| p > a && p < b));
        cuts.push(b);
        for w in cuts.windows(2) {
            let (p, q) = (w[0], w[1]);
            if q.is_finite() {
                total.absorb(integrate_left_singular(&mut f, p, q, dim, opts)?);
            } else {
                let split = p + p.abs().max(1.0);
                total.absorb(integrate_left_singular(&mut f, p, split, dim, opts)?);
                total.absorb(integrate_tail(&mut f, split, dim, opts)?);
            }
        }
        Ok(total)
    }
}

fn fill_scaled_identity(out: &mut [f64], n: usize, s: f64) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        out[i * n + i] = s;
    }
}

fn table_locate(rows: &[TableRow], theta: f64) -> (usize, f64) {
    let last = rows.len() - 2;
    let j = match rows.binary_search_by(|r| r.theta.total_cmp(&theta)) {
        Ok(i) => i.min(last),
        Err(i) => i.saturating_sub(1).min(last),
    };
    let (t0, t1) = (rows[j].theta, rows[j + 1].theta);
    let tau = ((theta - t0) / (t1 - t0)).clamp(0.0, 1.0);
    (j, tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftingBasis {
    pub n: usize,
    pub atoms: Vec<Atom>,
    pub segments: Vec<Segment>,
}

/// Exact kernel evaluators available for built-in bases.
#[derive(Debug, Clone, PartialEq)]
pub enum ClosedForm {
    ExpSum(Vec<(f64, DMatrix<f64>)>),
    TemperedFractional { alpha: f64, kappa: f64, n: usize },
}

impl ClosedForm {
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        match self {
            ClosedForm::ExpSum(terms) => {
                let n = terms[0].1.nrows();
                terms.iter().fold(DMatrix::zeros(n, n), |acc, (k, m)| acc + m * (-k * t).exp())
            }
            ClosedForm::TemperedFractional { alpha, kappa, n } => {
                DMatrix::identity(*n, *n) * (t.powf(alpha - 1.0) * (-kappa * t).exp() / gamma(*alpha))
            }
        }
    }

    /// `∫_a^b K(s) ds`.
    pub fn integral(&self, a: f64, b: f64) -> DMatrix<f64> {
        match self {
            ClosedForm::ExpSum(terms) => {
                let n = terms[0].1.nrows();
                terms.iter().fold(DMatrix::zeros(n, n), |acc, (k, m)| acc + m * exp_integral(*k, a, b))
            }
            ClosedForm::TemperedFractional { alpha, kappa, n } => {
                let v = reg_gamma_diff(*alpha, kappa * a, kappa * b) / kappa.powf(*alpha);
                DMatrix::identity(*n, *n) * v
            }
        }
    }

    /// `∫_a^b K(s)K(s)ᵀ ds`.
    pub fn square_integral(&self, a: f64, b: f64) -> Option<DMatrix<f64>> {
        match self {
            ClosedForm::ExpSum(terms) => {
                let n = terms[0].1.nrows();
                let mut acc = DMatrix::zeros(n, n);
                for (ki, mi) in terms {
                    for (kj, mj) in terms {
                        acc += mi * mj.transpose() * exp_integral(ki + kj, a, b);
                    }
                }
                Some(acc)
            }
            ClosedForm::TemperedFractional { alpha, kappa, n } => {
                let p = 2.0 * alpha - 1.0;
                if p <= 0.0 {
                    return None;
                }
                let r = 2.0 * kappa;
                let v = gamma(p) / (gamma(*alpha).powi(2) * r.powf(p)) * reg_gamma_diff(p, r * a, r * b);
                Some(DMatrix::identity(*n, *n) * v)
            }
        }
    }
}

/// `P(s, y) − P(s, x)` for the regularized lower incomplete gamma `P`, taking the difference of
/// upper tails past the mode to avoid cancellation.
fn reg_gamma_diff(s: f64, x: f64, y: f64) -> f64 {
    let lower = |t: f64| if t <= 0.0 { 0.0 } else if t.is_infinite() { 1.0 } else { gamma_lr(s, t) };
    let upper = |t: f64| if t <= 0.0 { 1.0 } else if t.is_infinite() { 0.0 } else { gamma_ur(s, t) };
    if x > s {
        upper(x) - upper(y)
    } else {
        lower(y) - lower(x)
    }
}

/// `∫_a^b e^{-ks} ds` without cancellation for small `k(b−a)`.
pub fn exp_integral(k: f64, a: f64, b: f64) -> f64 {
    if k == 0.0 {
        return b - a;
    }
    let x = k * (b - a);
    if x.abs() < 1e-8 {
        (-k * a).exp() * (b - a)
    } else {
        (-k * a).exp() * (-(-x).exp_m1()) / k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub which: Which,
    pub closed_form: Option<ClosedForm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegrabilityReport {
    /// `None` marks a divergence flag.
    pub i_mu: Option<f64>,
    pub i_b: Option<f64>,
    pub i_s: Option<f64>,
}

impl IntegrabilityReport {
    pub fn accepted(&self) -> bool {
        self.i_mu.is_some() && self.i_b.is_some() && self.i_s.is_some()
    }
}

impl LiftingBasis {
    pub fn new(n: usize, mut atoms: Vec<Atom>, mut segments: Vec<Segment>) -> Result<Self> {
        let m = "kernelbasis";
        if n == 0 {
            return Err(Error::invalid(m, "n", "state dimension must be positive"));
        }
        atoms.sort_by(|a, b| a.theta.total_cmp(&b.theta));
        for (i, a) in atoms.iter().enumerate() {
            let f = format!("atoms[{i}]");
            if !(a.theta >= 0.0 && a.theta.is_finite()) {
                return Err(Error::invalid(m, format!("{f}.theta"), "must be a finite nonnegative number"));
            }
            if !(a.mass > 0.0 && a.mass.is_finite()) {
                return Err(Error::invalid(m, format!("{f}.mass"), "must be positive"));
            }
            if a.mb.shape() != (n, n) || a.ms.shape() != (n, n) {
                return Err(Error::invalid(m, f, format!("matrices must be {n}x{n}")));
            }
        }
        if atoms.windows(2).any(|w| w[0].theta == w[1].theta) {
            return Err(Error::invalid(m, "atoms", "atom locations must be distinct"));
        }
        segments.sort_by(|a, b| a.lower.total_cmp(&b.lower));
        for (i, s) in segments.iter().enumerate() {
            check_segment(s, n, &format!("segments[{i}]"))?;
        }
        if segments.windows(2).any(|w| w[0].upper_or_inf() > w[1].lower) {
            return Err(Error::invalid(m, "segments", "density segments overlap"));
        }
        Ok(LiftingBasis { n, atoms, segments })
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Largest finite location that the basis mentions (atoms, segment ends, singular points).
    pub fn finite_extent(&self) -> f64 {
        let mut top = 0.0f64;
        for a in &self.atoms {
            top = top.max(a.theta);
        }
        for s in &self.segments {
            top = top.max(s.lower);
            if let Some(u) = s.upper {
                top = top.max(u);
            }
            for p in s.singular_points() {
                top = top.max(p);
            }
        }
        top
    }

    /// Integrate `g(θ) ρ(θ)`-type integrands over the density part on `[lo, hi)`.
    pub fn integrate_density<F: FnMut(&Segment, Theta, &mut [f64])>(
        &self,
        lo: f64,
        hi: f64,
        dim: usize,
        opts: &QuadOptions,
        mut f: F,
    ) -> Result<QuadResult> {
        let mut total = QuadResult::zero(dim);
        for s in &self.segments {
            total.absorb(s.integrate(lo, hi, dim, opts, |th, out| f(s, th, out))?);
        }
        Ok(total)
    }

    /// `∫_{[lo,hi)} f(θ, M_b(θ), M_σ(θ)) μ(dθ)` for scalar `f`.
    pub fn integrate_measure(
        &self,
        lo: f64,
        hi: f64,
        opts: &QuadOptions,
        f: &dyn Fn(f64, &DMatrix<f64>, &DMatrix<f64>) -> f64,
    ) -> Result<QuadResult> {
        let mut total = QuadResult::zero(1);
        for a in &self.atoms {
            if a.theta >= lo && a.theta < hi {
                total.value[0] += a.mass * f(a.theta, &a.mb, &a.ms);
            }
        }
        let n = self.n;
        total.absorb(self.integrate_density(lo, hi, 1, opts, |s, th, out| {
            let rho = s.density(th);
            out[0] = if rho > 0.0 {
                rho * f(th.value(), &s.m_matrix(th, Which::Drift, n), &s.m_matrix(th, Which::Diffusion, n))
            } else {
                0.0
            };
        })?);
        Ok(total)
    }

    pub fn eval_kernel(&self, which: Which, t: f64, quad_tol: f64) -> Result<DMatrix<f64>> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid("kernelbasis", "t", "kernel is evaluated only for t > 0"));
        }
        if !(quad_tol > 0.0) {
            return Err(Error::invalid("kernelbasis", "quad_tol", "must be positive"));
        }
        let n = self.n;
        let mut k = DMatrix::zeros(n, n);
        for a in &self.atoms {
            k += a.m(which) * (a.mass * (-a.theta * t).exp());
        }
        let opts = QuadOptions::with_tol(quad_tol);
        let r = self.integrate_density(0.0, f64::INFINITY, n * n, &opts, |s, th, out| {
            s.weighted_into(th, which, n, out);
            let e = (-th.value() * t).exp();
            out.iter_mut().for_each(|v| *v *= e);
        })?;
        if r.is_divergent() {
            return Err(Error::Quadrature { lo: 0.0, hi: f64::INFINITY, err: r.error });
        }
        Ok(k + DMatrix::from_row_slice(n, n, &r.value))
    }

    pub fn validate(&self, quad_tol: f64) -> Result<IntegrabilityReport> {
        let n = self.n;
        let opts = QuadOptions::with_tol(quad_tol);
        let mut i_mu = 0.0;
        let mut i_b = 0.0;
        let mut i_s = 0.0;
        for a in &self.atoms {
            let w = 1.0 + a.theta;
            i_mu += a.mass * w.powf(-0.5);
            i_b += a.mass * w.powf(-1.5) * op_norm(&a.mb).powi(2);
            i_s += a.mass * w.powf(-0.5) * op_norm(&a.ms).powi(2);
        }
        let part = |g: &dyn Fn(&Segment, Theta) -> f64| -> Result<Option<f64>> {
            let r = self.integrate_density(0.0, f64::INFINITY, 1, &opts, |s, th, out| {
                let rho = s.density(th);
                out[0] = if rho > 0.0 { rho * g(s, th) } else { 0.0 };
            })?;
            Ok(if r.is_divergent() { None } else { Some(r.value[0]) })
        };
        let d_mu = part(&|_, th| (1.0 + th.value()).powf(-0.5))?;
        let d_b = part(&|s, th| (1.0 + th.value()).powf(-1.5) * s.m_opnorm(th, Which::Drift, n).powi(2))?;
        let d_s = part(&|s, th| (1.0 + th.value()).powf(-0.5) * s.m_opnorm(th, Which::Diffusion, n).powi(2))?;
        Ok(IntegrabilityReport {
            i_mu: d_mu.map(|v| v + i_mu),
            i_b: d_b.map(|v| v + i_b),
            i_s: d_s.map(|v| v + i_s),
        })
    }

    pub fn inf_support(&self) -> f64 {
        let atoms = self.atoms.iter().map(|a| a.theta);
        let segs = self.segments.iter().filter_map(|s| s.effective_lower());
        atoms.chain(segs).fold(f64::INFINITY, f64::min)
    }

    pub fn is_compact_embedding(&self) -> bool {
        self.segments.iter().all(|s| !s.has_mass())
    }

    /// Union of two bases generating the summed kernels. Coincident atoms are combined into one
    /// atom carrying the mass-weighted matrices.
    pub fn merge(&self, other: &LiftingBasis) -> Result<LiftingBasis> {
        if self.n != other.n {
            return Err(Error::invalid("kernelbasis", "n", "cannot merge bases of different dimension"));
        }
        let mut atoms = self.atoms.clone();
        for b in &other.atoms {
            if let Some(a) = atoms.iter_mut().find(|a| a.theta == b.theta) {
                let total = a.mass + b.mass;
                a.mb = (&a.mb * a.mass + &b.mb * b.mass) / total;
                a.ms = (&a.ms * a.mass + &b.ms * b.mass) / total;
                a.mass = total;
            } else {
                atoms.push(b.clone());
            }
        }
        let mut segments = self.segments.clone();
        segments.extend(other.segments.iter().cloned());
        LiftingBasis::new(self.n, atoms, segments)
    }

    pub fn closed_form(&self, which: Which) -> Option<ClosedForm> {
        if self.segments.is_empty() {
            let terms = self.atoms.iter().map(|a| (a.theta, a.m(which) * a.mass)).collect::<Vec<_>>();
            return if terms.is_empty() { None } else { Some(ClosedForm::ExpSum(terms)) };
        }
        if self.atoms.is_empty() && self.segments.len() == 1 {
            if let Family::TemperedFractional(tf) = &self.segments[0].family {
                if self.segments[0].lower == tf.lower() && self.segments[0].upper.is_none() {
                    return Some(ClosedForm::TemperedFractional {
                        alpha: tf.alpha(which),
                        kappa: tf.kappa(which),
                        n: self.n,
                    });
                }
            }
        }
        None
    }

    pub fn kernel_spec(&self, which: Which) -> KernelSpec {
        KernelSpec {
            which,
            closed_form: self.closed_form(which),
        }
    }
}

fn check_segment(s: &Segment, n: usize, f: &str) -> Result<()> {
    let m = "kernelbasis";
    if !(s.lower >= 0.0 && s.lower.is_finite()) {
        return Err(Error::invalid(m, format!("{f}.lower"), "must be finite and nonnegative"));
    }
    if let Some(u) = s.upper {
        if !(u > s.lower) {
            return Err(Error::invalid(m, format!("{f}.upper"), "must exceed lower"));
        }
    }
    match &s.family {
        Family::TemperedFractional(tf) => {
            if s.lower != tf.lower() || s.upper.is_some() {
                return Err(Error::invalid(
                    m,
                    format!("{f}.lower"),
                    "tempered fractional segments span [min(kappa_b, kappa_s), inf)",
                ));
            }
        }
        Family::Table(rows) => {
            if rows.len() < 2 {
                return Err(Error::invalid(m, format!("{f}.rows"), "need at least two rows"));
            }
            if rows.windows(2).any(|w| !(w[1].theta > w[0].theta)) {
                return Err(Error::invalid(m, format!("{f}.rows"), "theta must be strictly increasing"));
            }
            if rows.iter().any(|r| !(r.rho >= 0.0 && r.rho.is_finite())) {
                return Err(Error::invalid(m, format!("{f}.rows"), "rho must be finite and nonnegative"));
            }
            if rows.iter().any(|r| r.mb.shape() != (n, n) || r.ms.shape() != (n, n)) {
                return Err(Error::invalid(m, format!("{f}.rows"), format!("matrices must be {n}x{n}")));
            }
            if rows[0].theta != s.lower || Some(rows[rows.len() - 1].theta) != s.upper {
                return Err(Error::invalid(m, format!("{f}.rows"), "rows must span [lower, upper] exactly"));
            }
        }
        Family::PowerLaw { shift, scale, mb, ms, .. } => {
            if !(*shift <= s.lower) {
                return Err(Error::invalid(m, format!("{f}.shift"), "must not exceed lower"));
            }
            if !(*scale >= 0.0) {
                return Err(Error::invalid(m, format!("{f}.scale"), "must be nonnegative"));
            }
            if mb.shape() != (n, n) || ms.shape() != (n, n) {
                return Err(Error::invalid(m, f, format!("matrices must be {n}x{n}")));
            }
        }
    }
    Ok(())
}

pub fn make_expsum_basis(terms: &[(f64, DMatrix<f64>, DMatrix<f64>)]) -> Result<LiftingBasis> {
    let Some(first) = terms.first() else {
        return Err(Error::invalid("kernelbasis", "terms", "empty term list"));
    };
    let n = first.1.nrows();
    let atoms = terms
        .iter()
        .map(|(k, mb, ms)| Atom {
            theta: *k,
            mass: 1.0,
            mb: mb.clone(),
            ms: ms.clone(),
        })
        .collect();
    LiftingBasis::new(n, atoms, vec![])
}

pub fn make_tempered_fractional_basis(tf: TemperedFractional, n: usize) -> Result<LiftingBasis> {
    LiftingBasis::new(
        n,
        vec![],
        vec![Segment {
            lower: tf.lower(),
            upper: None,
            family: Family::TemperedFractional(tf),
        }],
    )
}

/// Tempered fractional pair with the overdamped-Langevin relation `α_b = 2α_σ − 1`.
pub fn make_gle_basis(alpha_s: f64, kappa_b: f64, kappa_s: f64, n: usize) -> Result<LiftingBasis> {
    let tf = TemperedFractional::new(2.0 * alpha_s - 1.0, alpha_s, kappa_b, kappa_s, None, None)?;
    make_tempered_fractional_basis(tf, n)
}

// ---------------------------------------------------------------------------------------------
// JSON document form

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BasisDoc {
    pub n: usize,
    #[serde(default)]
    pub atoms: Vec<AtomDoc>,
    #[serde(default)]
    pub segments: Vec<SegmentDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AtomDoc {
    pub theta: f64,
    pub mass: f64,
    #[serde(rename = "Mb")]
    pub mb: Vec<Vec<f64>>,
    #[serde(rename = "Ms")]
    pub ms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RowDoc {
    pub theta: f64,
    pub rho: f64,
    #[serde(rename = "Mb")]
    pub mb: Vec<Vec<f64>>,
    #[serde(rename = "Ms")]
    pub ms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmentDoc {
    TemperedFractional {
        #[serde(default)]
        lower: Option<f64>,
        #[serde(default)]
        upper: Option<f64>,
        alpha_b: f64,
        alpha_s: f64,
        kappa_b: f64,
        kappa_s: f64,
        #[serde(default)]
        gamma_b: Option<f64>,
        #[serde(default)]
        gamma_s: Option<f64>,
    },
    Table {
        lower: f64,
        upper: f64,
        rows: Vec<RowDoc>,
    },
    PowerLaw {
        lower: f64,
        #[serde(default)]
        upper: Option<f64>,
        shift: f64,
        exponent: f64,
        scale: f64,
        #[serde(rename = "Mb")]
        mb: Vec<Vec<f64>>,
        #[serde(rename = "Ms")]
        ms: Vec<Vec<f64>>,
    },
}

impl BasisDoc {
    pub fn into_basis(&self) -> Result<LiftingBasis> {
        let atoms = self
            .atoms
            .iter()
            .enumerate()
            .map(|(i, a)| {
                Ok(Atom {
                    theta: a.theta,
                    mass: a.mass,
                    mb: linalg::from_rows(&a.mb, &format!("atoms[{i}].Mb"))?,
                    ms: linalg::from_rows(&a.ms, &format!("atoms[{i}].Ms"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let segments = self
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| segment_from_doc(s, i))
            .collect::<Result<Vec<_>>>()?;
        LiftingBasis::new(self.n, atoms, segments)
    }

    pub fn from_basis(b: &LiftingBasis) -> BasisDoc {
        BasisDoc {
            n: b.n,
            atoms: b
                .atoms
                .iter()
                .map(|a| AtomDoc {
                    theta: a.theta,
                    mass: a.mass,
                    mb: linalg::to_rows(&a.mb),
                    ms: linalg::to_rows(&a.ms),
                })
                .collect(),
            segments: b.segments.iter().map(segment_to_doc).collect(),
        }
    }
}

fn segment_from_doc(s: &SegmentDoc, i: usize) -> Result<Segment> {
    let f = format!("segments[{i}]");
    Ok(match s {
        SegmentDoc::TemperedFractional {
            lower,
            upper,
            alpha_b,
            alpha_s,
            kappa_b,
            kappa_s,
            gamma_b,
            gamma_s,
        } => {
            let tf = TemperedFractional::new(*alpha_b, *alpha_s, *kappa_b, *kappa_s, *gamma_b, *gamma_s)?;
            if upper.is_some() || lower.map_or(false, |l| l != tf.lower()) {
                return Err(Error::invalid(
                    "kernelbasis",
                    format!("{f}.lower"),
                    "tempered fractional segments span [min(kappa_b, kappa_s), inf)",
                ));
            }
            Segment {
                lower: tf.lower(),
                upper: None,
                family: Family::TemperedFractional(tf),
            }
        }
        SegmentDoc::Table { lower, upper, rows } => Segment {
            lower: *lower,
            upper: Some(*upper),
            family: Family::Table(
                rows.iter()
                    .enumerate()
                    .map(|(j, r)| {
                        Ok(TableRow {
                            theta: r.theta,
                            rho: r.rho,
                            mb: linalg::from_rows(&r.mb, &format!("{f}.rows[{j}].Mb"))?,
                            ms: linalg::from_rows(&r.ms, &format!("{f}.rows[{j}].Ms"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        },
        SegmentDoc::PowerLaw {
            lower,
            upper,
            shift,
            exponent,
            scale,
            mb,
            ms,
        } => Segment {
            lower: *lower,
            upper: *upper,
            family: Family::PowerLaw {
                shift: *shift,
                exponent: *exponent,
                scale: *scale,
                mb: linalg::from_rows(mb, &format!("{f}.Mb"))?,
                ms: linalg::from_rows(ms, &format!("{f}.Ms"))?,
            },
        },
    })
}

fn segment_to_doc(s: &Segment) -> SegmentDoc {
    match &s.family {
        Family::TemperedFractional(tf) => SegmentDoc::TemperedFractional {
            lower: Some(s.lower),
            upper: None,
            alpha_b: tf.alpha_b,
            alpha_s: tf.alpha_s,
            kappa_b: tf.kappa_b,
            kappa_s: tf.kappa_s,
            gamma_b: Some(tf.gamma_b),
            gamma_s: Some(tf.gamma_s),
        },
        Family::Table(rows) => SegmentDoc::Table {
            lower: s.lower,
            upper: s.upper_or_inf(),
            rows: rows
                .iter()
                .map(|r| RowDoc {
                    theta: r.theta,
                    rho: r.rho,
                    mb: linalg::to_rows(&r.mb),
                    ms: linalg::to_rows(&r.ms),
                })
                .collect(),
        },
        Family::PowerLaw {
            shift,
            exponent,
            scale,
            mb,
            ms,
        } => SegmentDoc::PowerLaw {
            lower: s.lower,
            upper: s.upper,
            shift: *shift,
            exponent: *exponent,
            scale: *scale,
            mb: linalg::to_rows(mb),
            ms: linalg::to_rows(ms),
        },
    }
}
