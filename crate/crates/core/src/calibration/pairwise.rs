//! One outer/inner pair of the pairwise scan.

use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

#[allow(unused_imports)]
use num_traits::Float;

use super::extrema::{self, Extrema, OuterPoint};
use super::unwrap::{self, Constraint, LineFit, UnwrapKind, UnwrapSpec, UnwrappedPoint};
use super::{CalibrationConfig, PassKind, ThetaAtPmin};
use crate::device::{Bench, Direction};
use crate::error::{Error, Result};

/// Everything measured while scanning one stage pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PairRecord {
    pub pass: PassKind,
    pub direction: Direction,
    pub outer: usize,
    pub inner: usize,
    /// π/2 when the outer stage carries the delay injected by the
    /// quadrature transform.
    pub outer_offset: f64,
    pub coarse: Vec<OuterPoint>,
    pub fine_min: Vec<OuterPoint>,
    pub fine_max: Vec<OuterPoint>,
    pub extrema: Extrema,
    /// Refined power of the first U_P minimum (mW); may be slightly
    /// negative when extrapolated from a single flank.
    pub p_min: f64,
    /// Power ≥ 0 used to pin the outer stage: `p_min`, or the next minimum
    /// when `p_min` lies below zero.
    pub p_pin: f64,
    /// Refined power of the first interior U_P maximum (mW).
    pub p_max: f64,
    pub c: f64,
    pub c2: f64,
    /// Outer slope estimated from the flanks of the U_P minimum.
    pub k_outer: Option<f64>,
    /// θ(P_min) implied by the order of minimum and maximum.
    pub hint: ThetaAtPmin,
    /// Inner sweep with the outer stage at P_max: (mW, intensity).
    pub inner_trace: Vec<(f64, f64)>,
    pub inner_fit: LineFit,
    /// Quarter-wave steps applied to the upstream stage to restore contrast.
    pub upstream_bumps: usize,
}

fn sweep_point<B: Bench>(
    b: &mut B,
    inner: usize,
    grid: &[f64],
    dir: Direction,
    p_outer: f64,
) -> (OuterPoint, Vec<(f64, f64)>) {
    let tr = b.sweep(inner, grid, dir);
    let (lo, hi, sum) = tr.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, 0.0),
        |(lo, hi, s), &(_, x)| (lo.min(x), hi.max(x), s + x),
    );
    (
        OuterPoint {
            power: p_outer,
            u_p: hi - lo,
            mean: sum / tr.len() as f64,
        },
        tr,
    )
}

struct Coarse {
    points: Vec<OuterPoint>,
    extrema: Result<Extrema>,
    floor: f64,
}

fn coarse_scan<B: Bench>(
    b: &mut B,
    outer: usize,
    inner: usize,
    dir: Direction,
    grid: &[f64],
    cfg: &CalibrationConfig,
) -> Coarse {
    let step = cfg.coarse_power_step();
    let end = b.max_power(outer).min(cfg.outer_scope_phase / cfg.k_prior);
    // Room for the fine windows and the sinusoid fit around P_max.
    let margin = (cfg.refine_half_width() * 2.0).max(PI / 3.0 / cfg.k_max) + 2.0 * step;
    let mut points = Vec::new();
    let mut floor = 0.0;
    let mut i = 0usize;
    loop {
        let p_req = i as f64 * step;
        if p_req > end {
            break;
        }
        let p = b.set_power(outer, p_req);
        let (pt, tr) = sweep_point(b, inner, grid, dir, p);
        if i == 0 {
            let xs: Vec<f64> = tr.iter().map(|t| t.1).collect();
            // Expected range of pure noise over ~1000 samples is ≈ 6.5σ.
            floor = 2.0 * 6.5 * unwrap::noise_sigma(&xs);
        }
        points.push(pt);
        i += 1;
        if i >= 20 && i % 8 == 0 {
            if let Ok(e) = extrema::find_extrema_with_floor(&points, cfg.eps, floor) {
                if let Some(pm) = e.p_max {
                    if p >= e.p_min.max(pm) + margin {
                        break;
                    }
                }
            }
        }
    }
    let extrema = extrema::find_extrema_with_floor(&points, cfg.eps, floor);
    Coarse {
        points,
        extrema,
        floor,
    }
}

fn window<B: Bench>(
    b: &mut B,
    outer: usize,
    inner: usize,
    dir: Direction,
    grid: &[f64],
    center: f64,
    half: f64,
    step: f64,
) -> Vec<OuterPoint> {
    let hi_lim = b.max_power(outer);
    let lo = (center - half).max(0.0);
    let hi = (center + half).min(hi_lim);
    let n = ((hi - lo) / step).floor() as usize;
    let mut out: Vec<OuterPoint> = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let p = b.set_power(outer, lo + j as f64 * step);
        if out.last().is_some_and(|q| q.power >= p) {
            continue;
        }
        out.push(sweep_point(b, inner, grid, dir, p).0);
    }
    out
}

/// Normalise an inner sweep to [0, 1], unwrap and fit it. Offset and
/// amplitude are re-estimated by least squares against the fitted phase.
pub(crate) fn fit_inner(
    trace: &[(f64, f64)],
    kind: UnwrapKind,
) -> Result<(Vec<UnwrappedPoint>, LineFit)> {
    let p: Vec<f64> = trace.iter().map(|t| t.0).collect();
    let x: Vec<f64> = trace.iter().map(|t| t.1).collect();
    let sigma = unwrap::noise_sigma(&x);
    let sm = unwrap::moving_average(&x, if sigma > 1e-4 { 3 } else { 0 });
    let hi = sm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = sm.iter().cloned().fold(f64::INFINITY, f64::min);
    let (mut m, mut a) = (0.5 * (hi + lo), 0.5 * (hi - lo));
    if !(a > 1e-6) {
        return Err(Error::TooFewPoints {
            needed: unwrap::MIN_FIT_POINTS,
            got: 0,
        });
    }
    let spec = UnwrapSpec {
        kind,
        constraint: Constraint::HalfPi,
    };
    let mut last = None;
    for iter in 0..3 {
        let v: Vec<f64> = x
            .iter()
            .map(|&y| (0.5 + (y - m) / (2.0 * a)).clamp(0.0, 1.0))
            .collect();
        let pts = unwrap::unwrap_phase(&v, &p, spec)?;
        let fit = unwrap::fit_line_robust(&pts)?;
        last = Some((pts, fit));
        if iter == 2 {
            break;
        }
        // y ≈ m + A cos φ + B sin φ with φ from the current fit.
        let mut g = [[0.0f64; 3]; 3];
        let mut r = [0.0f64; 3];
        for (&pp, &y) in p.iter().zip(&x) {
            let ph = fit.k * pp + fit.intercept;
            let f = [1.0, ph.cos(), ph.sin()];
            for i in 0..3 {
                for j in 0..3 {
                    g[i][j] += f[i] * f[j];
                }
                r[i] += f[i] * y;
            }
        }
        match extrema::solve3(g, r) {
            Some([m2, ca, sb]) => {
                let a2 = (ca * ca + sb * sb).sqrt();
                if a2 > 1e-6 {
                    m = m2;
                    a = a2;
                }
            }
            None => break,
        }
    }
    Ok(last.expect("at least one iteration"))
}

/// Offset of the peak of `U ≈ A·cos(k(P − Pm)) + γ` from `pc`.
fn sinusoid_peak_offset(pts: &[(f64, f64)], k: f64, pc: f64) -> Option<f64> {
    if pts.len() < 8 {
        return None;
    }
    let mut g = [[0.0f64; 3]; 3];
    let mut r = [0.0f64; 3];
    for &(p, u) in pts {
        let (s, c) = (k * (p - pc)).sin_cos();
        let f = [1.0, c, s];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] += f[i] * f[j];
            }
            r[i] += f[i] * u;
        }
    }
    let [_, a, b] = extrema::solve3(g, r)?;
    (a > 0.0).then(|| b.atan2(a) / k)
}

fn set_upstream<B: Bench>(b: &mut B, u: usize, target: f64) {
    let max = b.max_power(u);
    b.set_power(u, if target <= max { target } else { target % max });
}

/// Scan `outer` against `inner`, locate and refine P_min / P_max, read the
/// contrast at P_min, and calibrate the inner slope at P_max.
pub(crate) fn pair_scan<B: Bench>(
    b: &mut B,
    outer: usize,
    inner: usize,
    dir: Direction,
    upstream: Option<usize>,
    cfg: &CalibrationConfig,
) -> Result<PairRecord> {
    let grid = b.instrument().voltage_grid();
    let mut bumps = 0;
    let mut coarse = coarse_scan(b, outer, inner, dir, &grid, cfg);
    if let Some(u) = upstream {
        let base = b.power(u);
        let mut best: Option<(Coarse, usize)> = None;
        for attempt in 0..=cfg.max_contrast_retries {
            let ok = coarse
                .extrema
                .as_ref()
                .map(|e| e.u_max >= cfg.min_contrast && e.p_max.is_some());
            if ok == Ok(true) {
                best = Some((coarse, attempt));
                break;
            }
            let score = coarse.extrema.as_ref().map_or(-1.0, |e| e.u_max);
            let better = best.as_ref().map_or(true, |(c, _)| {
                score > c.extrema.as_ref().map_or(-1.0, |e| e.u_max)
            });
            if better {
                best = Some((coarse, attempt));
            }
            if attempt == cfg.max_contrast_retries {
                break;
            }
            // Shift the upstream stage by another quarter wave.
            let dp = (attempt as f64 + 1.0) * FRAC_PI_2 / cfg.k_prior;
            let target = base + dp;
            set_upstream(b, u, target);
            coarse = coarse_scan(b, outer, inner, dir, &grid, cfg);
        }
        let (c, attempt) = best.expect("at least one attempt");
        bumps = attempt;
        let dp = attempt as f64 * FRAC_PI_2 / cfg.k_prior;
        let target = base + dp;
        set_upstream(b, u, target);
        coarse = c;
    }
    let ext = coarse.extrema.map_err(|e| match e {
        Error::NoMinimum { .. } => Error::NoMinimum { stage: outer },
        other => other,
    })?;
    let p_max_coarse = ext.p_max.ok_or(Error::InsufficientScope { stage: outer })?;

    let half = cfg.refine_half_width();
    let fine_step = cfg.coarse_power_step() / cfg.refine_factor as f64;

    // P_min: both flanks of the V-shaped |sin| dip.
    let fine_min = window(b, outer, inner, dir, &grid, ext.p_min, half, fine_step);
    let pts: Vec<(f64, f64)> = fine_min.iter().map(|q| (q.power, q.u_p)).collect();
    let lo = (0.03 * ext.u_max).max(1.5 * coarse.floor);
    let fit = extrema::v_fit(&pts, ext.u_max, ext.p_min, lo, 0.8 * ext.u_max);
    let (p_min, k_outer) = match fit {
        Some((p, k)) if (p - ext.p_min).abs() <= half => (p, Some(k)),
        _ => {
            let i = crate::device::argmax(fine_min.iter().map(|q| -q.u_p));
            (fine_min.get(i).map_or(ext.p_min, |q| q.power), None)
        }
    };

    let p_pin = match k_outer {
        Some(k) if p_min < 0.0 => {
            let guess = p_min + PI / k;
            // The single-flank slope is rough, so search a wider window.
            let w = window(
                b,
                outer,
                inner,
                dir,
                &grid,
                guess,
                3.0 * half,
                2.0 * fine_step,
            );
            let i = crate::device::argmax(w.iter().map(|q| -q.u_p));
            let centre = w.get(i).map_or(guess, |q| q.power);
            let pts: Vec<(f64, f64)> = w.iter().map(|q| (q.power, q.u_p)).collect();
            match extrema::v_fit(&pts, ext.u_max, centre, lo, 0.8 * ext.u_max) {
                Some((p, _)) if (p - centre).abs() <= half && p >= 0.0 => p,
                _ => guess,
            }
        }
        _ => p_min.max(0.0),
    };

    b.set_power(outer, p_pin);
    let c = sweep_point(b, inner, &grid, dir, p_pin)
        .0
        .mean
        .clamp(0.0, 1.0);
    let c2 = extrema::contrast(c);

    // P_max: parabola through the top of the peak, then again on the half
    // of the window centred on the first estimate.
    let fine_max = window(
        b,
        outer,
        inner,
        dir,
        &grid,
        p_max_coarse,
        2.0 * half,
        2.0 * fine_step,
    );
    let top: Vec<(f64, f64)> = fine_max.iter().map(|q| (q.power, q.u_p)).collect();
    let mut p_max = extrema::parabola_peak(&top).unwrap_or(p_max_coarse);
    let sub: Vec<(f64, f64)> = top
        .iter()
        .cloned()
        .filter(|q| (q.0 - p_max).abs() <= half)
        .collect();
    if let Some(v) = extrema::parabola_peak(&sub) {
        p_max = v;
    }
    // A flat noisy top biases the parabola; a sinusoid over the full lobe
    // does not.
    if let Some(k) = k_outer {
        let reach = (core::f64::consts::FRAC_PI_3) / k;
        let lobe: Vec<(f64, f64)> = coarse
            .points
            .iter()
            .map(|q| (q.power, q.u_p))
            .chain(top.iter().cloned())
            .filter(|q| (q.0 - p_max).abs() <= reach)
            .collect();
        if let Some(d) = sinusoid_peak_offset(&lobe, k, p_max) {
            if d.abs() <= 2.0 * half {
                p_max += d;
            }
        }
    }

    let hint = if p_max < p_min {
        ThetaAtPmin::Pi
    } else {
        ThetaAtPmin::Zero
    };

    b.set_power(outer, p_max);
    let inner_trace = b.sweep(inner, &grid, dir);
    let (_, inner_fit) = fit_inner(&inner_trace, UnwrapKind::Cosine)?;
    if !(inner_fit.k > 0.0) {
        return Err(Error::NonPositiveSlope {
            stage: inner,
            k: inner_fit.k,
        });
    }
    let span = inner_trace.last().map_or(0.0, |t| t.0) - inner_trace.first().map_or(0.0, |t| t.0);
    if inner_fit.k * span < core::f64::consts::TAU {
        return Err(Error::InsufficientScope { stage: inner });
    }

    Ok(PairRecord {
        pass: PassKind::RightToLeft,
        direction: dir,
        outer,
        inner,
        outer_offset: 0.0,
        coarse: coarse.points,
        fine_min,
        fine_max,
        extrema: ext,
        p_min,
        p_pin,
        p_max,
        c,
        c2,
        k_outer,
        hint,
        inner_trace,
        inner_fit,
        upstream_bumps: bumps,
    })
}
