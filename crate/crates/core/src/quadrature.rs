//! Globally adaptive Gauss–Kronrod (7/15) quadrature for vector-valued integrands, plus the
//! two changes of variable used for measures on `[0, ∞)`: `θ = p + s²` at a singular left
//! endpoint and `θ = p + s/(1−s)` for an unbounded right end.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (and the centre).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_intervals: usize,
    /// Bisection depth after which a still-unresolved interval triggers the divergence test.
    pub max_depth: u32,
}

impl QuadOptions {
    pub fn with_tol(rel_tol: f64) -> Self {
        QuadOptions {
            rel_tol,
            abs_tol: 1e-300,
            max_intervals: 20_000,
            max_depth: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadStatus {
    Converged,
    /// Refinement ran out of depth while the contributions near the trouble spot kept growing.
    /// Heuristic; the accompanying value is a meaningless partial sum.
    Divergent,
}

#[derive(Debug, Clone)]
pub struct QuadResult {
    pub value: Vec<f64>,
    pub error: f64,
    pub status: QuadStatus,
}

impl QuadResult {
    pub fn zero(dim: usize) -> Self {
        QuadResult {
            value: vec![0.0; dim],
            error: 0.0,
            status: QuadStatus::Converged,
        }
    }

    pub fn is_divergent(&self) -> bool {
        self.status == QuadStatus::Divergent
    }

    /// Accumulate another piece of the same integral.
    pub fn absorb(&mut self, other: QuadResult) {
        for (a, b) in self.value.iter_mut().zip(&other.value) {
            *a += b;
        }
        self.error += other.error;
        if other.is_divergent() {
            self.status = QuadStatus::Divergent;
        }
    }
}

struct Piece {
    a: f64,
    b: f64,
    value: Vec<f64>,
    error: f64,
    depth: u32,
    parent_mag: f64,
}

struct Keyed(f64, usize);

impl PartialEq for Keyed {
    fn eq(&self, o: &Self) -> bool {
        self.0 == o.0
    }
}
impl Eq for Keyed {}
impl PartialOrd for Keyed {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Keyed {
    fn cmp(&self, o: &Self) -> Ordering {
        self.0.total_cmp(&o.0).then(o.1.cmp(&self.1))
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn gk15<F: FnMut(f64, &mut [f64])>(f: &mut F, a: f64, b: f64, buf: &mut [f64]) -> (Vec<f64>, f64) {
    let dim = buf.len();
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let mut k = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    f(c, buf);
    for d in 0..dim {
        k[d] += WGK[7] * buf[d];
        g[d] += WG[3] * buf[d];
    }
    for j in 0..7 {
        let dx = hw * XGK[j];
        for x in [c - dx, c + dx] {
            f(x, buf);
            for d in 0..dim {
                k[d] += WGK[j] * buf[d];
                if j % 2 == 1 {
                    g[d] += WG[j / 2] * buf[d];
                }
            }
        }
    }
    let mut err = 0.0f64;
    for d in 0..dim {
        k[d] *= hw;
        g[d] *= hw;
        err = err.max((k[d] - g[d]).abs());
    }
    if k.iter().any(|v| !v.is_finite()) {
        err = f64::INFINITY;
    }
    (k, err)
}

/// Adaptive integral of a vector integrand over a finite interval.
pub fn integrate<F: FnMut(f64, &mut [f64])>(f: F, a: f64, b: f64, dim: usize, opts: &QuadOptions) -> Result<QuadResult> {
    integrate_impl(f, a, b, dim, opts, false)
}

/// With `guard_left`, the panel touching `a` counts its whole contribution as error, so an
/// endpoint singularity is refined until its remaining mass is negligible (the Kronrod/Gauss
/// difference badly underestimates the error there).
fn integrate_impl<F: FnMut(f64, &mut [f64])>(
    mut f: F,
    a: f64,
    b: f64,
    dim: usize,
    opts: &QuadOptions,
    guard_left: bool,
) -> Result<QuadResult> {
    if !(a.is_finite() && b.is_finite()) || b < a {
        return Err(Error::invalid("quadrature", "interval", format!("bad bounds [{a}, {b}]")));
    }
    if b == a {
        return Ok(QuadResult::zero(dim));
    }
    let mut buf = vec![0.0; dim];
    let guarded = |lo: f64, v: &[f64], e: f64| if guard_left && lo == a { e.max(max_abs(v)) } else { e };
    let (v, e) = gk15(&mut f, a, b, &mut buf);
    let e = guarded(a, &v, e);
    let mut pieces = vec![Piece {
        a,
        b,
        value: v.clone(),
        error: e,
        depth: 0,
        parent_mag: f64::INFINITY,
    }];
    let mut total = v;
    let mut total_err = e;
    let mut heap = BinaryHeap::new();
    heap.push(Keyed(e, 0));

    loop {
        let target = opts.abs_tol.max(opts.rel_tol * max_abs(&total));
        if total_err <= target {
            break;
        }
        let Some(Keyed(_, idx)) = heap.pop() else { break };
        let (pa, pb, depth, parent_mag) = {
            let p = &pieces[idx];
            (p.a, p.b, p.depth, p.parent_mag)
        };
        let mid = 0.5 * (pa + pb);
        let mag = max_abs(&pieces[idx].value);
        if depth >= opts.max_depth || mid <= pa || mid >= pb {
            // Contributions that shrink geometrically with depth signal an integrable
            // singularity; ones that do not are treated as divergence.
            let growth = if parent_mag.is_finite() && parent_mag > 0.0 { mag / parent_mag } else { 1.0 };
            if growth >= 0.9 || !mag.is_finite() {
                return Ok(QuadResult {
                    value: total,
                    error: total_err,
                    status: QuadStatus::Divergent,
                });
            }
            return Err(Error::Quadrature { lo: a, hi: b, err: total_err });
        }
        if pieces.len() + 2 > opts.max_intervals {
            return Err(Error::Quadrature { lo: a, hi: b, err: total_err });
        }
        let (v1, e1) = gk15(&mut f, pa, mid, &mut buf);
        let e1 = guarded(pa, &v1, e1);
        let (v2, e2) = gk15(&mut f, mid, pb, &mut buf);
        let e2 = guarded(mid, &v2, e2);
        for d in 0..dim {
            total[d] += v1[d] + v2[d] - pieces[idx].value[d];
        }
        total_err += e1 + e2 - pieces[idx].error;
        // Retired pieces keep their slot but no longer count.
        pieces[idx].error = 0.0;
        for (lo, hi, v, e) in [(pa, mid, v1, e1), (mid, pb, v2, e2)] {
            pieces.push(Piece {
                a: lo,
                b: hi,
                value: v,
                error: e,
                depth: depth + 1,
                parent_mag: mag,
            });
            heap.push(Keyed(e, pieces.len() - 1));
        }
    }
    // Re-sum the live pieces to shed accumulated cancellation in `total`.
    let mut value = vec![0.0; dim];
    let mut live: Vec<usize> = heap.into_iter().map(|k| k.1).collect();
    live.sort_unstable();
    for i in live {
        for d in 0..dim {
            value[d] += pieces[i].value[d];
        }
    }
    if value.iter().any(|x| !x.is_finite()) {
        return Ok(QuadResult { value, error: f64::INFINITY, status: QuadStatus::Divergent });
    }
    Ok(QuadResult {
        value,
        error: total_err,
        status: QuadStatus::Converged,
    })
}

/// A point `θ = base + off` kept in two parts so that `θ − base` is exact near a singularity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta {
    pub base: f64,
    pub off: f64,
}

impl Theta {
    pub fn at(x: f64) -> Theta {
        Theta { base: x, off: 0.0 }
    }

    pub fn value(self) -> f64 {
        self.base + self.off
    }

    /// `θ − k` without first rounding `θ`.
    pub fn minus(self, k: f64) -> f64 {
        (self.base - k) + self.off
    }
}

/// `∫_p^q f(θ)dθ` with `θ = p + s²`, which softens a power singularity at `p`.
pub fn integrate_left_singular<F: FnMut(Theta, &mut [f64])>(
    mut f: F,
    p: f64,
    q: f64,
    dim: usize,
    opts: &QuadOptions,
) -> Result<QuadResult> {
    let span = (q - p).max(0.0).sqrt();
    integrate_impl(
        |s, out: &mut [f64]| {
            f(Theta { base: p, off: s * s }, out);
            let jac = 2.0 * s;
            out.iter_mut().for_each(|v| *v *= jac);
        },
        0.0,
        span,
        dim,
        opts,
        true,
    )
}

/// `∫_p^∞ f(θ)dθ` with `θ = p + s/(1−s)`, integrated in `r = 1 − s` so that the point at
/// infinity sits at `r = 0` where floating point resolution is fine.
pub fn integrate_tail<F: FnMut(Theta, &mut [f64])>(
    mut f: F,
    p: f64,
    dim: usize,
    opts: &QuadOptions,
) -> Result<QuadResult> {
    integrate_impl(
        |r, out: &mut [f64]| {
            let off = (1.0 - r) / r;
            if !off.is_finite() {
                out.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            f(Theta { base: p, off }, out);
            let jac = 1.0 / (r * r);
            out.iter_mut().for_each(|v| *v *= jac);
        },
        0.0,
        1.0,
        dim,
        opts,
        true,
    )
}

pub fn integrate_scalar<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, opts: &QuadOptions) -> Result<QuadResult> {
    integrate(|x, out: &mut [f64]| out[0] = f(x), a, b, 1, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> QuadOptions {
        QuadOptions::with_tol(1e-12)
    }

    #[test]
    fn kronrod_rule_is_exact_for_high_degree_polynomials() {
        // A single GK15 panel integrates degree ≤ 22 exactly.
        for deg in [0u32, 5, 13, 22] {
            let mut buf = [0.0];
            let (v, _) = gk15(&mut |x: f64, o: &mut [f64]| o[0] = x.powi(deg as i32), 0.0, 1.0, &mut buf);
            let exact = 1.0 / (deg as f64 + 1.0);
            assert!((v[0] - exact).abs() < 1e-14, "deg {deg}: {} vs {exact}", v[0]);
        }
    }

    #[test]
    fn smooth_and_vector_integrands() {
        let r = integrate(
            |x, o: &mut [f64]| {
                o[0] = x.sin();
                o[1] = (-x).exp();
            },
            0.0,
            std::f64::consts::PI,
            2,
            &opts(),
        )
        .unwrap();
        assert!((r.value[0] - 2.0).abs() < 1e-12);
        assert!((r.value[1] - (1.0 - (-std::f64::consts::PI).exp())).abs() < 1e-12);
    }

    #[test]
    fn endpoint_power_singularity() {
        // ∫_0^1 θ^{-3/4} dθ = 4
        let r = integrate_left_singular(|t: Theta, o: &mut [f64]| o[0] = t.value().powf(-0.75), 0.0, 1.0, 1, &opts()).unwrap();
        assert_eq!(r.status, QuadStatus::Converged);
        assert!((r.value[0] - 4.0).abs() < 1e-9, "{}", r.value[0]);
    }

    #[test]
    fn tail_power_law() {
        // ∫_1^∞ θ^{-5/4} dθ = 4
        let r = integrate_tail(|t: Theta, o: &mut [f64]| o[0] = t.value().powf(-1.25), 1.0, 1, &opts()).unwrap();
        assert!((r.value[0] - 4.0).abs() < 1e-8, "{}", r.value[0]);
    }

    #[test]
    fn non_integrable_singularity_is_flagged() {
        let r = integrate_left_singular(|t: Theta, o: &mut [f64]| o[0] = t.value().powf(-1.5), 0.0, 1.0, 1, &opts()).unwrap();
        assert!(r.is_divergent());
        let r = integrate_left_singular(|t: Theta, o: &mut [f64]| o[0] = 1.0 / t.value(), 0.0, 1.0, 1, &opts()).unwrap();
        assert!(r.is_divergent());
        let r = integrate_tail(|t: Theta, o: &mut [f64]| o[0] = 1.0 / t.value(), 1.0, 1, &opts()).unwrap();
        assert!(r.is_divergent());
    }
}
