//! Drift and diffusion coefficients with the structural constants the checks rely on.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, norm2};
use crate::noise::{fill_normals, stream, Purpose};

pub type VecField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Constants attached to a coefficient model. `None` means "not known".
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub c_b_lip: Option<f64>,
    pub c_s_lip: Option<f64>,
    /// Coercivity: `⟨b(x),x⟩ ≤ γ|x|² + C'`.
    pub gamma: Option<f64>,
    pub c_b_lg_prime: Option<f64>,
    /// Linear growth: `|b(x)| ≤ C(1+|x|)`.
    pub c_b_lg: Option<f64>,
    /// Sublinear growth: `|σ(x)| ≤ C(1+|x|^p)`.
    pub p: Option<f64>,
    pub c_s_sub: Option<f64>,
    /// Ellipticity: `σσᵀ ⪰ I / C_UE`.
    pub c_ue: Option<f64>,
}

#[derive(Clone)]
pub struct CoefficientModel {
    pub n: usize,
    pub d: usize,
    drift: VecField,
    diffusion: VecField,
    pub meta: Metadata,
    pub label: String,
}

impl std::fmt::Debug for CoefficientModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientModel")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("label", &self.label)
            .field("meta", &self.meta)
            .finish()
    }
}

impl CoefficientModel {
    pub fn new(n: usize, d: usize, drift: VecField, diffusion: VecField, meta: Metadata, label: impl Into<String>) -> Self {
        CoefficientModel {
            n,
            d,
            drift,
            diffusion,
            meta,
            label: label.into(),
        }
    }

    #[inline]
    pub fn b(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    /// `σ(x)` as a row-major `n × d` array.
    #[inline]
    pub fn sigma(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn sigma_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let mut s = vec![0.0; self.n * self.d];
        self.sigma(x, &mut s);
        DMatrix::from_row_slice(self.n, self.d, &s)
    }

    /// Check every present constant on `pairs` random pairs. Points are drawn as `scale · N(0, I)`.
    pub fn spot_check(&self, pairs: usize, scale: f64, seed: u64) -> Result<()> {
        let (n, d) = (self.n, self.d);
        let m = &self.meta;
        let mut rng = stream(seed, Purpose::Auxiliary, u64::MAX);
        let (mut x, mut y) = (vec![0.0; n], vec![0.0; n]);
        let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
        let (mut sx, mut sy) = (vec![0.0; n * d], vec![0.0; n * d]);
        let slack = |bound: f64| bound * (1.0 + 1e-9) + 1e-12;
        let fail = |what: &str, at: &[f64]| Error::invalid("dynamics", format!("coefficients.{what}"), format!("violated at x = {at:?}"));
        for _ in 0..pairs {
            fill_normals(&mut rng, &mut x);
            fill_normals(&mut rng, &mut y);
            x.iter_mut().chain(y.iter_mut()).for_each(|v| *v *= scale);
            self.b(&x, &mut bx);
            self.b(&y, &mut by);
            self.sigma(&x, &mut sx);
            self.sigma(&y, &mut sy);
            let dxy = dist(&x, &y);
            if let Some(l) = m.c_b_lip {
                if dist(&bx, &by) > slack(l * dxy) {
                    return Err(fail("c_b_lip", &x));
                }
            }
            if let Some(l) = m.c_s_lip {
                if dist(&sx, &sy) > slack(l * dxy) {
                    return Err(fail("c_s_lip", &x));
                }
            }
            let nx = norm2(&x);
            if let (Some(g), Some(c)) = (m.gamma, m.c_b_lg_prime) {
                let ip: f64 = bx.iter().zip(&x).map(|(a, b)| a * b).sum();
                if ip > slack(g * nx * nx + c) {
                    return Err(fail("gamma", &x));
                }
            }
            if let Some(c) = m.c_b_lg {
                if norm2(&bx) > slack(c * (1.0 + nx)) {
                    return Err(fail("c_b_lg", &x));
                }
            }
            if let (Some(p), Some(c)) = (m.p, m.c_s_sub) {
                if norm2(&sx) > slack(c * (1.0 + nx.powf(p))) {
                    return Err(fail("c_s_sub", &x));
                }
            }
            if let Some(c) = m.c_ue {
                let s = DMatrix::from_row_slice(n, d, &sx);
                let lo = linalg::sym_eigenvalues(&(&s * s.transpose()))[0];
                if lo < (1.0 / c) * (1.0 - 1e-9) {
                    return Err(fail("c_ue", &x));
                }
            }
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `b^N(x) = b(Nx/|x|)` for `|x| > N`, likewise for σ.
pub fn truncate_coefficients(model: &CoefficientModel, radius: f64) -> Result<CoefficientModel> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid("dynamics", "truncation", format!("radius must be positive, got {radius}")));
    }
    let project = move |x: &[f64], buf: &mut Vec<f64>| -> bool {
        let r = norm2(x);
        if r <= radius {
            return false;
        }
        buf.clear();
        buf.extend(x.iter().map(|v| v * radius / r));
        true
    };
    let b = model.drift.clone();
    let s = model.diffusion.clone();
    let drift: VecField = Arc::new(move |x, out| {
        let mut buf = Vec::new();
        if project(x, &mut buf) {
            b(&buf, out)
        } else {
            b(x, out)
        }
    });
    let diffusion: VecField = Arc::new(move |x, out| {
        let mut buf = Vec::new();
        if project(x, &mut buf) {
            s(&buf, out)
        } else {
            s(x, out)
        }
    });
    let mut meta = model.meta;
    // Outside the ball ⟨b^N(x),x⟩ = (|x|/N)⟨b(y),y⟩ with |y| = N.
    if let (Some(g), Some(c)) = (meta.gamma, meta.c_b_lg_prime) {
        if c > 0.0 {
            meta.gamma = Some(g.max(0.0) + c / (radius * radius));
        }
    }
    Ok(CoefficientModel {
        n: model.n,
        d: model.d,
        drift,
        diffusion,
        meta,
        label: format!("{} truncated at {radius}", model.label),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    /// `b(x) = −βx + c`.
    Linear {
        beta: f64,
        #[serde(default)]
        c: Option<Vec<f64>>,
    },
    /// `b(x) = −βx + amp·tanh(x)` componentwise.
    Tanh { beta: f64, amp: f64 },
    /// `b = −∇V`, `V(x) = (|x|²−1)²/4`, truncated at `truncation`.
    DoubleWell {
        #[serde(default = "default_truncation")]
        truncation: f64,
    },
    /// Scalar piecewise-linear drift through `[x, b]` rows, constant beyond the ends.
    Table {
        rows: Vec<[f64; 2]>,
        #[serde(default)]
        gamma: Option<f64>,
    },
}

fn default_truncation() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    /// `σ(x) = s·I`.
    Constant { s: f64 },
    /// `σ(x) = diag(s0 + s1·tanh(x_i))`.
    Modulated { s0: f64, s1: f64 },
    /// Scalar piecewise-linear diffusion through `[x, σ]` rows, constant beyond the ends.
    Table { rows: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
    /// Optional truncation radius applied to both maps.
    #[serde(default)]
    pub truncation: Option<f64>,
}

impl CoefficientSpec {
    pub fn build(&self, n: usize) -> Result<CoefficientModel> {
        let (b, bm) = build_drift(&self.drift, n)?;
        let (s, sm) = build_diffusion(&self.diffusion, n)?;
        let meta = Metadata {
            c_b_lip: bm.c_b_lip,
            gamma: bm.gamma,
            c_b_lg_prime: bm.c_b_lg_prime,
            c_b_lg: bm.c_b_lg,
            c_s_lip: sm.c_s_lip,
            p: sm.p,
            c_s_sub: sm.c_s_sub,
            c_ue: sm.c_ue,
        };
        let label = format!("{} / {}", drift_name(&self.drift), diffusion_name(&self.diffusion));
        let model = CoefficientModel::new(n, n, b, s, meta, label);
        match self.truncation {
            Some(r) => truncate_coefficients(&model, r),
            None => Ok(model),
        }
    }
}

fn drift_name(d: &DriftSpec) -> &'static str {
    match d {
        DriftSpec::Linear { .. } => "linear",
        DriftSpec::Tanh { .. } => "tanh",
        DriftSpec::DoubleWell { .. } => "double_well",
        DriftSpec::Table { .. } => "table",
    }
}

fn diffusion_name(d: &DiffusionSpec) -> &'static str {
    match d {
        DiffusionSpec::Constant { .. } => "constant",
        DiffusionSpec::Modulated { .. } => "modulated",
        DiffusionSpec::Table { .. } => "table",
    }
}

fn finite(v: f64, field: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid("dynamics", format!("coefficients.{field}"), "must be finite"))
    }
}

fn build_drift(spec: &DriftSpec, n: usize) -> Result<(VecField, Metadata)> {
    let sqrt_n = (n as f64).sqrt();
    match spec {
        DriftSpec::Linear { beta, c } => {
            let beta = finite(*beta, "drift.beta")?;
            let c = c.clone().unwrap_or_else(|| vec![0.0; n]);
            if c.len() != n || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("dynamics", "coefficients.drift.c", format!("need {n} finite entries")));
            }
            let cn = norm2(&c);
            let (gamma, cp) = coercivity(beta, cn);
            let meta = Metadata {
                c_b_lip: Some(beta.abs()),
                gamma: Some(gamma),
                c_b_lg_prime: Some(cp),
                c_b_lg: Some(beta.abs().max(cn)),
                ..Default::default()
            };
            Ok((
                Arc::new(move |x, out| {
                    for ((o, xi), ci) in out.iter_mut().zip(x).zip(&c) {
                        *o = -beta * xi + ci;
                    }
                }),
                meta,
            ))
        }
        DriftSpec::Tanh { beta, amp } => {
            let beta = finite(*beta, "drift.beta")?;
            let amp = finite(*amp, "drift.amp")?;
            // |amp·tanh(x)| ≤ |amp|√n plays the role of the constant shift.
            let (gamma, cp) = coercivity(beta, amp.abs() * sqrt_n);
            let meta = Metadata {
                // The Jacobian is diagonal with entries in [−β, −β+amp] (or reversed).
                c_b_lip: Some(beta.abs().max((beta - amp).abs())),
                gamma: Some(gamma),
                c_b_lg_prime: Some(cp),
                c_b_lg: Some(beta.abs().max(amp.abs() * sqrt_n)),
                ..Default::default()
            };
            Ok((
                Arc::new(move |x, out| {
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = -beta * xi + amp * xi.tanh();
                    }
                }),
                meta,
            ))
        }
        DriftSpec::DoubleWell { truncation } => {
            let r = *truncation;
            if !(r >= 1.0 && r.is_finite()) {
                return Err(Error::invalid(
                    "dynamics",
                    "coefficients.drift.truncation",
                    "double-well truncation radius must be at least 1",
                ));
            }
            let raw: VecField = Arc::new(|x, out| {
                let s = 1.0 - x.iter().map(|v| v * v).sum::<f64>();
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = s * xi;
                }
            });
            let zero: VecField = Arc::new(|_, out| out.iter_mut().for_each(|o| *o = 0.0));
            let model = CoefficientModel::new(n, n, raw, zero, Metadata::default(), "double_well");
            let t = truncate_coefficients(&model, r)?;
            // |Db| ≤ max(1, 3r²−1) on the ball; radial projection is 1-Lipschitz. Outside the ball
            // ⟨b^N(x),x⟩ = (1−r²)r|x| ≤ 0, inside it is at most max(s−s²) = 1/4.
            let peak = if r * r >= 1.0 / 3.0 { (2.0 / 3.0) / 3f64.sqrt() } else { r - r.powi(3) };
            let sup_b = peak.max(r.powi(3) - r);
            let meta = Metadata {
                c_b_lip: Some(1f64.max(3.0 * r * r - 1.0)),
                gamma: Some(0.0),
                c_b_lg_prime: Some(0.25),
                c_b_lg: Some(sup_b),
                ..Default::default()
            };
            Ok((t.drift, meta))
        }
        DriftSpec::Table { rows, gamma } => {
            let rows = check_table(rows, n, "coefficients.drift.rows")?;
            let lip = table_lipschitz(&rows);
            let sup = rows.iter().map(|r| r[1].abs()).fold(0.0, f64::max);
            let (bl, br) = (rows[0][1], rows[rows.len() - 1][1]);
            let (g, cp) = if let Some(g) = gamma {
                (finite(*g, "drift.gamma")?.max(0.0), sup * sup / (4.0 * g.max(1e-300)))
            } else if bl >= 0.0 && br <= 0.0 {
                (0.0, table_max_bx(&rows).max(0.0))
            } else {
                (1.0, sup * sup / 4.0)
            };
            let meta = Metadata {
                c_b_lip: Some(lip),
                gamma: Some(g),
                c_b_lg_prime: Some(cp),
                c_b_lg: Some(sup),
                ..Default::default()
            };
            Ok((Arc::new(move |x, out| out[0] = table_eval(&rows, x[0])), meta))
        }
    }
}

/// Coercivity constants for `−β|x|² + a|x|` type bounds.
fn coercivity(beta: f64, a: f64) -> (f64, f64) {
    if beta > 0.0 {
        (0.0, a * a / (4.0 * beta))
    } else if a > 0.0 {
        (-beta + 1.0, a * a / 4.0)
    } else {
        (-beta, 0.0)
    }
}

fn build_diffusion(spec: &DiffusionSpec, n: usize) -> Result<(VecField, Metadata)> {
    let sqrt_n = (n as f64).sqrt();
    match spec {
        DiffusionSpec::Constant { s } => {
            let s = finite(*s, "diffusion.s")?;
            let meta = Metadata {
                c_s_lip: Some(0.0),
                p: Some(0.5),
                c_s_sub: Some(s.abs() * sqrt_n),
                c_ue: (s != 0.0).then(|| 1.0 / (s * s)),
                ..Default::default()
            };
            Ok((Arc::new(move |_, out| diag_fill(out, n, |_| s)), meta))
        }
        DiffusionSpec::Modulated { s0, s1 } => {
            let s0 = finite(*s0, "diffusion.s0")?;
            let s1 = finite(*s1, "diffusion.s1")?;
            let gap = s0.abs() - s1.abs();
            let meta = Metadata {
                c_s_lip: Some(s1.abs()),
                p: Some(0.5),
                c_s_sub: Some((s0.abs() + s1.abs()) * sqrt_n),
                c_ue: (gap > 0.0).then(|| 1.0 / (gap * gap)),
                ..Default::default()
            };
            Ok((Arc::new(move |x, out| diag_fill(out, n, |i| s0 + s1 * x[i].tanh())), meta))
        }
        DiffusionSpec::Table { rows } => {
            let rows = check_table(rows, n, "coefficients.diffusion.rows")?;
            let lo = rows.iter().map(|r| r[1]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[1]).fold(f64::NEG_INFINITY, f64::max);
            // Interpolation between same-sign values stays away from zero.
            let floor = if lo > 0.0 { lo } else if hi < 0.0 { -hi } else { 0.0 };
            let meta = Metadata {
                c_s_lip: Some(table_lipschitz(&rows)),
                p: Some(0.5),
                c_s_sub: Some(lo.abs().max(hi.abs())),
                c_ue: (floor > 0.0).then(|| 1.0 / (floor * floor)),
                ..Default::default()
            };
            Ok((Arc::new(move |x, out| out[0] = table_eval(&rows, x[0])), meta))
        }
    }
}

fn diag_fill(out: &mut [f64], n: usize, f: impl Fn(usize) -> f64) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        out[i * n + i] = f(i);
    }
}

fn check_table(rows: &[[f64; 2]], n: usize, field: &str) -> Result<Vec<[f64; 2]>> {
    if n != 1 {
        return Err(Error::invalid("dynamics", field, "tables define scalar coefficients (n = 1)"));
    }
    if rows.len() < 2 {
        return Err(Error::invalid("dynamics", field, "need at least two rows"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("dynamics", field, "entries must be finite"));
    }
    if rows.windows(2).any(|w| !(w[1][0] > w[0][0])) {
        return Err(Error::invalid("dynamics", field, "x must be strictly increasing"));
    }
    Ok(rows.to_vec())
}

fn table_eval(rows: &[[f64; 2]], x: f64) -> f64 {
    let last = rows.len() - 1;
    if x <= rows[0][0] {
        return rows[0][1];
    }
    if x >= rows[last][0] {
        return rows[last][1];
    }
    let j = rows.partition_point(|r| r[0] <= x) - 1;
    let (x0, y0) = (rows[j][0], rows[j][1]);
    let (x1, y1) = (rows[j + 1][0], rows[j + 1][1]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

fn table_lipschitz(rows: &[[f64; 2]]) -> f64 {
    rows.windows(2).map(|w| ((w[1][1] - w[0][1]) / (w[1][0] - w[0][0])).abs()).fold(0.0, f64::max)
}

/// Maximum of `x·b(x)` over the interpolated range (a quadratic on each piece).
fn table_max_bx(rows: &[[f64; 2]]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for w in rows.windows(2) {
        let (x0, y0, x1, y1) = (w[0][0], w[0][1], w[1][0], w[1][1]);
        let k = (y1 - y0) / (x1 - x0);
        let f = |x: f64| x * (y0 + k * (x - x0));
        best = best.max(f(x0)).max(f(x1));
        if k != 0.0 {
            let xs = (k * x0 - y0) / (2.0 * k);
            if xs > x0 && xs < x1 {
                best = best.max(f(xs));
            }
        }
    }
    best
}
