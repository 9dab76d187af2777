//! Locating the first U_P minimum and maximum of an outer-stage scan.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// One outer step of a pairwise scan.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct OuterPoint {
    /// Outer-stage power (mW).
    pub power: f64,
    /// Peak-to-peak port-4 intensity of the inner sweep.
    pub u_p: f64,
    /// Mean port-4 intensity of the inner sweep.
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Extrema {
    pub i_min: usize,
    pub p_min: f64,
    /// First interior maximum, if the trace contains one.
    pub i_max: Option<usize>,
    pub p_max: Option<f64>,
    /// Mean intensity at the minimum.
    pub c: f64,
    /// 2√(c(1−c)).
    pub c2: f64,
    pub u_max: f64,
    pub threshold: f64,
}

pub fn contrast(c: f64) -> f64 {
    2.0 * (c * (1.0 - c)).max(0.0).sqrt()
}

/// `find_extrema` with an absolute floor under the threshold, for noisy
/// traces where U_P never drops below the noise range.
pub fn find_extrema_with_floor(trace: &[OuterPoint], eps: f64, floor: f64) -> Result<Extrema> {
    if trace.is_empty() {
        return Err(Error::param("trace", "empty"));
    }
    if !(eps > 0.0) {
        return Err(Error::param("eps", "must be > 0"));
    }
    let u_max = trace.iter().map(|p| p.u_p).fold(0.0, f64::max);
    let threshold = (eps * u_max).max(floor);

    let start = trace
        .iter()
        .position(|p| p.u_p < threshold)
        .ok_or(Error::NoMinimum { stage: 0 })?;
    let end = trace[start..]
        .iter()
        .position(|p| p.u_p >= threshold)
        .map_or(trace.len(), |o| start + o);
    let i_min = start + crate::device::argmax(trace[start..end].iter().map(|p| -p.u_p));

    // First run above 90 % of the peak that the trace rises into and falls
    // out of; a run touching either end may be a truncated slope. Leaving
    // the run needs a drop below 80 % so noise on a flat top cannot split it.
    let (enter, leave) = (0.9 * u_max, 0.8 * u_max);
    let mut i_max = None;
    let mut i = 0;
    while i < trace.len() {
        if trace[i].u_p >= enter {
            let s = i;
            while i < trace.len() && trace[i].u_p >= leave {
                i += 1;
            }
            if s > 0 && i < trace.len() {
                i_max = Some(s + crate::device::argmax(trace[s..i].iter().map(|p| p.u_p)));
                break;
            }
        } else {
            i += 1;
        }
    }

    let c = trace[i_min].mean.clamp(0.0, 1.0);
    Ok(Extrema {
        i_min,
        p_min: trace[i_min].power,
        i_max,
        p_max: i_max.map(|j| trace[j].power),
        c,
        c2: contrast(c),
        u_max,
        threshold,
    })
}

/// First U_P minimum below `eps·max(U_P)` and the first interior maximum.
pub fn find_extrema(trace: &[OuterPoint], eps: f64) -> Result<Extrema> {
    find_extrema_with_floor(trace, eps, 0.0)
}

/// Intersection of the two flanks of |sin| around a minimum.
///
/// `s = asin(U/U_ref)` is fitted as `k·|P − P0| + b`; the offset `b`
/// absorbs the noise floor of U_P. Returns `(P0, k)`.
pub fn v_fit(
    points: &[(f64, f64)],
    u_ref: f64,
    p_guess: f64,
    lo: f64,
    hi: f64,
) -> Option<(f64, f64)> {
    let sel: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.1 >= lo && p.1 <= hi)
        .map(|&(p, u)| (p, (u / u_ref).min(1.0).asin()))
        .collect();
    let mut p0 = p_guess;
    let mut k_est = None;
    for _ in 0..4 {
        let left: Vec<&(f64, f64)> = sel.iter().filter(|p| p.0 < p0).collect();
        let right: Vec<&(f64, f64)> = sel.iter().filter(|p| p.0 >= p0).collect();
        let (nl, nr) = (left.len(), right.len());
        if nl >= 3 && nr >= 3 {
            // Use the same distance range on both sides.
            let reach = (p0 - left.iter().map(|p| p.0).fold(f64::INFINITY, f64::min))
                .min(right.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) - p0);
            let used: Vec<(f64, f64, f64)> = sel
                .iter()
                .filter(|p| (p.0 - p0).abs() <= reach + 1e-12)
                .map(|p| (p.0, p.1, if p.0 < p0 { -1.0 } else { 1.0 }))
                .collect();
            // s = k·σP − m·σ + b with m = k·P0.
            let sol = lstsq3(&used)?;
            let (k, m) = (sol.0, sol.1);
            if !(k > 0.0) {
                return None;
            }
            let next = m / k;
            k_est = Some(k);
            let done = (next - p0).abs() < 1e-9;
            p0 = next;
            if done {
                break;
            }
        } else if nr >= 3 && nl < 3 {
            // Single flank: s = k(P − P0).
            let pts: Vec<(f64, f64)> = right.iter().map(|p| (p.0, p.1)).collect();
            let (k, b) = line(&pts)?;
            if !(k > 0.0) {
                return None;
            }
            return Some((-b / k, k));
        } else if nl >= 3 && nr < 3 {
            let pts: Vec<(f64, f64)> = left.iter().map(|p| (p.0, p.1)).collect();
            let (k, b) = line(&pts)?;
            if !(k < 0.0) {
                return None;
            }
            return Some((-b / k, -k));
        } else {
            return None;
        }
    }
    k_est.map(|k| (p0, k))
}

fn line(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let k = sxy / sxx;
    Some((k, my - k * mx))
}

/// Least squares for s = k·(σP) − m·σ + b over (P, s, σ) triples.
fn lstsq3(pts: &[(f64, f64, f64)]) -> Option<(f64, f64, f64)> {
    let mut a = [[0.0f64; 3]; 3];
    let mut r = [0.0f64; 3];
    for &(p, s, sg) in pts {
        let x = [sg * p, -sg, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += x[i] * x[j];
            }
            r[i] += x[i] * s;
        }
    }
    solve3(a, r).map(|x| (x[0], x[1], x[2]))
}

pub(crate) fn solve3(mut a: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    for c in 0..3 {
        let piv = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        r.swap(c, piv);
        for i in c + 1..3 {
            let f = a[i][c] / a[c][c];
            for j in c..3 {
                a[i][j] -= f * a[c][j];
            }
            r[i] -= f * r[c];
        }
    }
    let mut x = [0.0; 3];
    for c in (0..3).rev() {
        let s: f64 = (c + 1..3).map(|j| a[c][j] * x[j]).sum();
        x[c] = (r[c] - s) / a[c][c];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Vertex of a least-squares parabola through `points`, if it opens
/// downward and lies inside their power range.
pub fn parabola_peak(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 3 {
        return None;
    }
    let x0 = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let mut a = [[0.0f64; 3]; 3];
    let mut r = [0.0f64; 3];
    for &(p, u) in points {
        let d = p - x0;
        let x = [d * d, d, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += x[i] * x[j];
            }
            r[i] += x[i] * u;
        }
    }
    let [qa, qb, _] = solve3(a, r)?;
    if !(qa < 0.0) {
        return None;
    }
    let v = x0 - qb / (2.0 * qa);
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    (v >= lo && v <= hi).then_some(v)
}
