//! Approximating components: finite cell families that turn a lifting basis into a
//! sum-of-exponentials system, with the error functional ε_k.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernelbasis::{LiftingBasis, Segment, Which};
use crate::linalg::{self, op_norm};
use crate::quadrature::{QuadOptions, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellSet {
    Atom { theta: f64 },
    Interval { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub set: CellSet,
    pub node: f64,
    pub mb: DMatrix<f64>,
    pub ms: DMatrix<f64>,
    pub w: f64,
    pub h_h: f64,
    pub h_v: f64,
    /// Index of the source segment for interval cells.
    pub segment: Option<usize>,
}

impl Cell {
    pub fn m(&self, which: Which) -> &DMatrix<f64> {
        match which {
            Which::Drift => &self.mb,
            Which::Diffusion => &self.ms,
        }
    }

    pub fn inf(&self) -> f64 {
        match self.set {
            CellSet::Atom { theta } => theta,
            CellSet::Interval { lo, .. } => lo,
        }
    }

    pub fn sup(&self) -> f64 {
        match self.set {
            CellSet::Atom { theta } => theta,
            CellSet::Interval { hi, .. } => hi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaMax {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl ThetaMax {
    pub const AUTO: ThetaMax = ThetaMax::Auto(AutoTag::Auto);
}

/// Doublings allowed by the automatic θ_max search.
pub const AUTO_DOUBLINGS: u32 = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct ApproximatingComponent {
    pub n: usize,
    pub cells: Vec<Cell>,
    pub theta_max: f64,
    /// Infimum of the source measure's support.
    pub kappa: f64,
    pub source: Arc<LiftingBasis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonTerms {
    pub node: f64,
    pub drift_interior: f64,
    pub drift_tail: f64,
    pub diffusion_interior: f64,
    pub diffusion_tail: f64,
}

impl EpsilonTerms {
    pub fn total(&self) -> f64 {
        self.node + (self.drift_interior + self.drift_tail).sqrt() + (self.diffusion_interior + self.diffusion_tail).sqrt()
    }
}

pub struct Observation {
    pub x: Vec<f64>,
    pub norm_h: f64,
    pub norm_v: f64,
}

pub fn build_component(
    basis: &Arc<LiftingBasis>,
    k: usize,
    theta_max: ThetaMax,
    quad_tol: f64,
) -> Result<ApproximatingComponent> {
    if k == 0 {
        return Err(Error::invalid("discretize", "k", "node count must be at least 1"));
    }
    match theta_max {
        ThetaMax::Fixed(t) => build_fixed(basis, k, t, quad_tol),
        ThetaMax::Auto(_) => {
            let start = 10.0 * (1.0 + basis.finite_extent());
            let mut tm = start;
            let mut last = None;
            for _ in 0..=AUTO_DOUBLINGS {
                let c = build_fixed(basis, k, tm, quad_tol)?;
                let e = epsilon_terms(basis, &c, quad_tol)?;
                let tail = e.drift_tail + e.diffusion_tail;
                let interior = e.drift_interior + e.diffusion_interior;
                if tail <= 0.5 * interior {
                    return Ok(c);
                }
                last = Some(c);
                tm *= 2.0;
            }
            Ok(last.expect("at least one candidate"))
        }
    }
}

fn build_fixed(basis: &Arc<LiftingBasis>, k: usize, theta_max: f64, quad_tol: f64) -> Result<ApproximatingComponent> {
    let kappa = basis.inf_support();
    if !(theta_max > kappa) || !theta_max.is_finite() {
        return Err(Error::invalid(
            "discretize",
            "theta_max",
            format!("{theta_max} must exceed the support infimum {kappa}"),
        ));
    }
    let n = basis.n;
    let mut cells = Vec::with_capacity(k);
    for a in basis.atoms.iter().filter(|a| a.theta < theta_max) {
        let w = 1.0 + a.theta;
        cells.push(Cell {
            set: CellSet::Atom { theta: a.theta },
            node: a.theta,
            mb: a.mb.clone(),
            ms: a.ms.clone(),
            w: a.mass,
            h_h: a.mass * w.powf(-0.5),
            h_v: a.mass * w.sqrt(),
            segment: None,
        });
    }
    if cells.len() > k {
        return Err(Error::invalid(
            "discretize",
            "k",
            format!("{k} cells cannot hold the {} atoms below theta_max", cells.len()),
        ));
    }
    let pieces = density_pieces(basis, theta_max);
    let budget = k - cells.len();
    let counts = allocate(&pieces, budget);
    let opts = QuadOptions::with_tol(quad_tol);
    for (piece, &m) in pieces.iter().zip(&counts) {
        if m == 0 {
            continue;
        }
        let seg = &basis.segments[piece.segment];
        for (lo, hi) in partition(piece.lo, piece.hi, m, k) {
            if let Some(cell) = density_cell(seg, piece.segment, lo, hi, n, &opts)? {
                cells.push(cell);
            }
        }
    }
    cells.sort_by(|a, b| a.node.total_cmp(&b.node));
    Ok(ApproximatingComponent {
        n,
        cells,
        theta_max,
        kappa,
        source: basis.clone(),
    })
}

struct Piece {
    segment: usize,
    lo: f64,
    hi: f64,
}

/// Parts of `[κ, θ_max]` covered by density, split at the segments' singular points.
fn density_pieces(basis: &LiftingBasis, theta_max: f64) -> Vec<Piece> {
    let mut out = vec![];
    for (i, s) in basis.segments.iter().enumerate() {
        let Some(lo) = s.effective_lower() else { continue };
        let hi = s.upper_or_inf().min(theta_max);
        if !(hi > lo) {
            continue;
        }
        let mut cuts = vec![lo];
        cuts.extend(s.singular_points().into_iter().filter(|&p| p > lo && p < hi));
        cuts.push(hi);
        for w in cuts.windows(2) {
            out.push(Piece { segment: i, lo: w[0], hi: w[1] });
        }
    }
    out
}

/// Split `budget` cells among pieces in proportion to their logarithmic extent.
fn allocate(pieces: &[Piece], budget: usize) -> Vec<usize> {
    if pieces.is_empty() || budget == 0 {
        return vec![0; pieces.len()];
    }
    let weights: Vec<f64> = pieces.iter().map(|p| (1.0 + (p.hi - p.lo) / (1.0 + p.lo)).ln().max(1e-12)).collect();
    let total: f64 = weights.iter().sum();
    let floor = if budget >= pieces.len() { 1 } else { 0 };
    let spare = budget - floor * pieces.len();
    let shares: Vec<f64> = weights.iter().map(|w| w / total * spare as f64).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| floor + s.floor() as usize).collect();
    let mut left = budget - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..pieces.len()).collect();
    order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Cell boundaries on `[p, q]`: geometric in the distance from `p`, starting from a first cell of
/// width `(1+p)·min(0.1, k^{-2})`; uniform when that would not be finer than an even split.
fn partition(p: f64, q: f64, m: usize, k: usize) -> Vec<(f64, f64)> {
    let len = q - p;
    let g1 = (1.0 + p) * (0.1f64).min(1.0 / (k as f64 * k as f64));
    let mut offs = vec![0.0];
    if m == 1 {
        offs.push(len);
    } else if g1 * m as f64 >= len {
        offs.extend((1..=m).map(|j| len * j as f64 / m as f64));
    } else {
        let r = (len / g1).powf(1.0 / (m - 1) as f64);
        offs.extend((1..m).map(|j| g1 * r.powi(j as i32 - 1)));
        offs.push(len);
    }
    offs.windows(2).map(|w| (p + w[0], p + w[1])).collect()
}

fn density_cell(seg: &Segment, idx: usize, lo: f64, hi: f64, n: usize, opts: &QuadOptions) -> Result<Option<Cell>> {
    let nn = n * n;
    let mut buf = vec![0.0; nn];
    let r = seg.integrate(lo, hi, 3 + 2 * nn, opts, |th: Theta, out: &mut [f64]| {
        let rho = seg.density(th);
        let x = th.value();
        out[0] = rho;
        out[1] = rho * (1.0 + x).powf(-0.5);
        out[2] = rho * (1.0 + x).sqrt();
        seg.weighted_into(th, Which::Drift, n, &mut buf);
        out[3..3 + nn].copy_from_slice(&buf);
        seg.weighted_into(th, Which::Diffusion, n, &mut buf);
        out[3 + nn..].copy_from_slice(&buf);
    })?;
    if r.is_divergent() {
        return Err(Error::invalid("discretize", "basis", format!("cell [{lo}, {hi}] has infinite mass")));
    }
    let w = r.value[0];
    if !(w > 0.0) {
        return Ok(None);
    }
    let mb = DMatrix::from_row_slice(n, n, &r.value[3..3 + nn]) / w;
    let ms = DMatrix::from_row_slice(n, n, &r.value[3 + nn..]) / w;
    Ok(Some(Cell {
        set: CellSet::Interval { lo, hi },
        node: 0.5 * (lo + hi),
        mb,
        ms,
        w,
        h_h: r.value[1],
        h_v: r.value[2],
        segment: Some(idx),
    }))
}

/// The three ε_k contributions, before the square roots.
pub fn epsilon_terms(basis: &LiftingBasis, c: &ApproximatingComponent, quad_tol: f64) -> Result<EpsilonTerms> {
    if c.source.as_ref() != basis {
        return Err(Error::invalid("discretize", "component", "was not built from this basis"));
    }
    let n = basis.n;
    let opts = QuadOptions::with_tol(quad_tol);
    let mut e = EpsilonTerms {
        node: 0.0,
        drift_interior: 0.0,
        drift_tail: 0.0,
        diffusion_interior: 0.0,
        diffusion_tail: 0.0,
    };
    let mut diff = vec![0.0; n * n];
    for cell in &c.cells {
        if let CellSet::Interval { lo, hi } = cell.set {
            let a = cell.node;
            e.node = e.node.max(((a - lo) / (1.0 + lo)).max((hi - a) / (1.0 + hi)));
            let seg = &basis.segments[cell.segment.expect("interval cells come from segments")];
            let mb = linalg::row_major(&cell.mb);
            let ms = linalg::row_major(&cell.ms);
            let r = seg.integrate(lo, hi, 2, &opts, |th, out| {
                let rho = seg.density(th);
                if rho <= 0.0 {
                    out[0] = 0.0;
                    out[1] = 0.0;
                    return;
                }
                let x = th.value();
                out[0] = rho * (1.0 + x).powf(-1.5) * diff_norm_sq(seg, th, Which::Drift, &mb, n, &mut diff);
                out[1] = rho * (1.0 + x).powf(-0.5) * diff_norm_sq(seg, th, Which::Diffusion, &ms, n, &mut diff);
            })?;
            e.drift_interior += r.value[0];
            e.diffusion_interior += r.value[1];
        }
    }
    for a in basis.atoms.iter().filter(|a| a.theta >= c.theta_max) {
        let w = 1.0 + a.theta;
        e.drift_tail += a.mass * w.powf(-1.5) * op_norm(&a.mb).powi(2);
        e.diffusion_tail += a.mass * w.powf(-0.5) * op_norm(&a.ms).powi(2);
    }
    let r = basis.integrate_density(c.theta_max, f64::INFINITY, 2, &opts, |s, th, out| {
        let rho = s.density(th);
        let x = th.value();
        out[0] = if rho > 0.0 { rho * (1.0 + x).powf(-1.5) * s.m_opnorm(th, Which::Drift, n).powi(2) } else { 0.0 };
        out[1] = if rho > 0.0 { rho * (1.0 + x).powf(-0.5) * s.m_opnorm(th, Which::Diffusion, n).powi(2) } else { 0.0 };
    })?;
    if r.is_divergent() {
        return Err(Error::invalid("discretize", "basis", "tail of the error functional diverges"));
    }
    e.drift_tail += r.value[0];
    e.diffusion_tail += r.value[1];
    // Density below θ_max not covered by any cell (zero-mass cells) contributes nothing.
    Ok(e)
}

fn diff_norm_sq(seg: &Segment, th: Theta, which: Which, m_i: &[f64], n: usize, buf: &mut [f64]) -> f64 {
    seg.m_into(th, which, n, buf);
    for (b, m) in buf.iter_mut().zip(m_i) {
        *b -= m;
    }
    if n == 1 {
        buf[0] * buf[0]
    } else {
        op_norm(&DMatrix::from_row_slice(n, n, buf)).powi(2)
    }
}

pub fn epsilon_k(basis: &LiftingBasis, c: &ApproximatingComponent, quad_tol: f64) -> Result<f64> {
    Ok(epsilon_terms(basis, c, quad_tol)?.total())
}

impl ApproximatingComponent {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Build directly from explicit cells (nodes, masses and matrices); the source basis is the
    /// atomic basis with those atoms.
    pub fn from_atoms(basis: &Arc<LiftingBasis>) -> Result<Self> {
        if !basis.segments.is_empty() {
            return Err(Error::invalid("discretize", "basis", "expected a purely atomic basis"));
        }
        let top = basis.atoms.iter().map(|a| a.theta).fold(0.0, f64::max);
        build_fixed(basis, basis.atoms.len().max(1), 2.0 * top + 1.0, 1e-10)
    }

    pub fn reconstructed_kernel(&self, which: Which, t: f64) -> DMatrix<f64> {
        let n = self.n;
        self.cells
            .iter()
            .fold(DMatrix::zeros(n, n), |acc, c| acc + c.m(which) * (c.w * (-c.node * t).exp()))
    }

    /// `z` holds the cell states back to back (cell-major, `n` entries each).
    pub fn observe(&self, z: &[f64]) -> Result<Observation> {
        let n = self.n;
        if z.len() != n * self.cells.len() {
            return Err(Error::invalid(
                "discretize",
                "z",
                format!("expected {} entries, got {}", n * self.cells.len(), z.len()),
            ));
        }
        let mut x = vec![0.0; n];
        let (mut h, mut v) = (0.0, 0.0);
        for (c, zi) in self.cells.iter().zip(z.chunks(n)) {
            let sq: f64 = zi.iter().map(|a| a * a).sum();
            h += c.h_h * sq;
            v += c.h_v * sq;
            for (xd, zd) in x.iter_mut().zip(zi) {
                *xd += c.w * zd;
            }
        }
        Ok(Observation {
            x,
            norm_h: h.sqrt(),
            norm_v: v.sqrt(),
        })
    }

    pub fn nodes(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.node).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,a,w,hH,hV\n");
        for (i, c) in self.cells.iter().enumerate() {
            s.push_str(&format!(
                "{i},{},{},{},{}\n",
                crate::output::fmt(c.node),
                crate::output::fmt(c.w),
                crate::output::fmt(c.h_h),
                crate::output::fmt(c.h_v)
            ));
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n,
            "theta_max": self.theta_max,
            "kappa": self.kappa,
            "cells": self.cells.iter().map(|c| serde_json::json!({
                "set": c.set,
                "node": c.node,
                "w": c.w,
                "hH": c.h_h,
                "hV": c.h_v,
                "Mb": linalg::to_rows(&c.mb),
                "Ms": linalg::to_rows(&c.ms),
            })).collect::<Vec<_>>(),
        })
    }
}
