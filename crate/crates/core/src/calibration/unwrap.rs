//! Branch-corrected inversion of cosine/sine intensity traces and the
//! straight-line fit of phase against heater power.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnwrapKind {
    /// I = (1 − cos θ)/2.
    Cosine,
    /// I = (1 + sin θ)/2.
    Sine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// |Δθ| < π/2 is assumed.
    HalfPi,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnwrapSpec {
    pub kind: UnwrapKind,
    pub constraint: Constraint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnwrappedPoint {
    /// mW
    pub power: f64,
    /// rad
    pub theta: f64,
    /// The (normalised) intensity the phase was recovered from.
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct LineFit {
    /// rad/mW
    pub k: f64,
    /// rad
    pub intercept: f64,
    /// rad
    pub rms: f64,
    pub used: usize,
}

pub const MIN_FIT_POINTS: usize = 10;
/// Points with |2I − 1| above this sit on the flat top of the arc functions.
pub const ENDPOINT_CUT: f64 = 0.999;

pub(crate) fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// White-noise standard deviation of a sampled smooth signal, from the
/// median absolute second difference.
pub fn noise_sigma(v: &[f64]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mut d: Vec<f64> = v
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
        .collect();
    median(&mut d) / (0.6745 * 6f64.sqrt())
}

pub(crate) fn moving_average(v: &[f64], half: usize) -> Vec<f64> {
    if half == 0 {
        return v.to_vec();
    }
    let n = v.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

struct Region {
    start: usize,
    end: usize,
    above: bool,
}

/// Indices where the trace turns (extrema of the underlying sinusoid) and
/// whether it is rising at the start.
fn turning_points(s: &[f64], sigma: f64) -> (Vec<usize>, bool) {
    let n = s.len();
    let hyst = (4.0 * sigma).max(0.05);
    let tol = 4.0 * sigma + 1e-12;

    let mut regions: Vec<Region> = Vec::new();
    let mut state: Option<bool> = None;
    for (i, &x) in s.iter().enumerate() {
        let now = if x > 0.5 + hyst {
            Some(true)
        } else if x < 0.5 - hyst {
            Some(false)
        } else {
            None
        };
        match (state, now) {
            (None, Some(a)) => {
                state = Some(a);
                regions.push(Region {
                    start: 0,
                    end: n,
                    above: a,
                });
            }
            (Some(prev), Some(a)) if a != prev => {
                state = Some(a);
                if let Some(r) = regions.last_mut() {
                    r.end = i;
                }
                regions.push(Region {
                    start: i,
                    end: n,
                    above: a,
                });
            }
            _ => {}
        }
    }
    if regions.is_empty() {
        return (Vec::new(), s[n - 1] >= s[0]);
    }

    let ext = |r: &Region| -> usize {
        let sign = if r.above { 1.0 } else { -1.0 };
        r.start + crate::device::argmax(s[r.start..r.end].iter().map(|x| sign * x))
    };
    let last = regions.len() - 1;
    let mut turns = Vec::new();
    let mut first_has_turn = false;
    for (ri, r) in regions.iter().enumerate() {
        let e = ext(r);
        let left_ok = ri > 0 || (e > r.start && (s[e] - s[r.start]).abs() > tol);
        let right_ok = ri < last || (e + 1 < r.end && (s[e] - s[r.end - 1]).abs() > tol);
        if left_ok && right_ok {
            turns.push(e);
            if ri == 0 {
                first_has_turn = true;
            }
        }
    }
    let rising = if first_has_turn {
        regions[0].above
    } else {
        !regions[0].above
    };
    (turns, rising)
}

fn branch(kind: UnwrapKind, l: i64, v: f64) -> f64 {
    let lf = l as f64;
    match kind {
        UnwrapKind::Cosine => {
            let a = (1.0 - 2.0 * v).clamp(-1.0, 1.0).acos();
            if l % 2 == 0 {
                a + (lf - 2.0) * PI
            } else {
                -a + (lf - 1.0) * PI
            }
        }
        UnwrapKind::Sine => {
            let a = (2.0 * v - 1.0).clamp(-1.0, 1.0).asin();
            let s = if (l - 1) % 2 == 0 { 1.0 } else { -1.0 };
            s * a + (lf - 1.0) * PI
        }
    }
}

/// Recover θ(P) from a normalised intensity trace.
///
/// The branch index `l` starts from the slope sign at the beginning of the
/// trace (Cosine: falling ⇒ 1, rising ⇒ 2; Sine: rising ⇒ 1, falling ⇒ 2)
/// and advances at every turning point. Under the half-pi constraint this
/// puts θ(0) in (−π, π) on the branch implied by the sign of Δθ.
pub fn unwrap_phase(
    intensity: &[f64],
    power: &[f64],
    spec: UnwrapSpec,
) -> Result<Vec<UnwrappedPoint>> {
    let n = intensity.len();
    if power.len() != n {
        return Err(Error::param("power", "length differs from intensity"));
    }
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: n });
    }
    if power.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("power", "must be strictly increasing"));
    }
    let v: Vec<f64> = intensity.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    let sigma = noise_sigma(&v);
    let smooth = moving_average(&v, if sigma > 1e-4 { 3 } else { 0 });
    let (turns, rising) = turning_points(&smooth, sigma);

    let l0: i64 = match (spec.kind, rising) {
        (UnwrapKind::Cosine, false) | (UnwrapKind::Sine, true) => 1,
        _ => 2,
    };
    let mut out = Vec::with_capacity(n);
    let mut passed = 0usize;
    for i in 0..n {
        while passed < turns.len() && turns[passed] < i {
            passed += 1;
        }
        let theta = branch(spec.kind, l0 + passed as i64, v[i]);
        out.push(UnwrappedPoint {
            power: power[i],
            theta,
            intensity: v[i],
        });
    }
    check_continuity(&out, sigma)?;
    Ok(out)
}

/// Successive phases must move forward by about one local step; a branch
/// error shows up as a jump far outside that.
fn check_continuity(pts: &[UnwrappedPoint], sigma: f64) -> Result<()> {
    let n = pts.len();
    let steps: Vec<f64> = pts
        .windows(2)
        .map(|w| (w[1].theta - w[0].theta).abs())
        .collect();
    let edge = |x: f64| (2.0 * x - 1.0).abs() > 0.95;
    const HALF: usize = 10;
    for i in 1..n {
        let (a, b) = (pts[i - 1].intensity, pts[i].intensity);
        if edge(a) || edge(b) {
            continue;
        }
        let lo = (i - 1).saturating_sub(HALF);
        let hi = (i - 1 + HALF + 1).min(steps.len());
        let mut local: Vec<f64> = (lo..hi)
            .filter(|&j| !edge(pts[j].intensity) && !edge(pts[j + 1].intensity))
            .map(|j| steps[j])
            .collect();
        let med = median(&mut local);
        let spread = (b * (1.0 - b)).sqrt().max(1e-3);
        let allowed = 3.0 * med + 10.0 * sigma / spread + 1e-9;
        let step = pts[i].theta - pts[i - 1].theta;
        if step.abs() > allowed {
            return Err(Error::UnwrapFailure { index: i });
        }
    }
    Ok(())
}

fn usable(p: &UnwrappedPoint) -> bool {
    (2.0 * p.intensity - 1.0).abs() <= ENDPOINT_CUT
}

fn weighted_line(pts: &[(f64, f64, f64)]) -> Option<(f64, f64)> {
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    if !(sw > 0.0) {
        return None;
    }
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let k = sxy / sxx;
    Some((k, my - k * mx))
}

fn rms_of(pts: &[(f64, f64, f64)], k: f64, b: f64) -> f64 {
    let ss: f64 = pts.iter().map(|p| (p.1 - k * p.0 - b).powi(2)).sum();
    (ss / pts.len() as f64).sqrt()
}

/// Ordinary least-squares line through the unwrapped points, skipping the
/// arc-function endpoints.
pub fn fit_line(points: &[UnwrappedPoint]) -> Result<LineFit> {
    let pts: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|p| usable(p))
        .map(|p| (p.power, p.theta, 1.0))
        .collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints {
            needed: MIN_FIT_POINTS,
            got: pts.len(),
        });
    }
    let (k, b) = weighted_line(&pts).ok_or(Error::TooFewPoints {
        needed: MIN_FIT_POINTS,
        got: 1,
    })?;
    Ok(LineFit {
        k,
        intercept: b,
        rms: rms_of(&pts, k, b),
        used: pts.len(),
    })
}

/// Weighted fit for noisy traces: each point is weighted by 4I(1−I), the
/// inverse of the phase-noise variance of the arc inversion, and points
/// beyond five robust standard deviations are dropped before a refit.
pub fn fit_line_robust(points: &[UnwrappedPoint]) -> Result<LineFit> {
    let mut pts: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|p| usable(p))
        .map(|p| (p.power, p.theta, 4.0 * p.intensity * (1.0 - p.intensity)))
        .collect();
    for _ in 0..3 {
        if pts.len() < MIN_FIT_POINTS {
            break;
        }
        let (k, b) = match weighted_line(&pts) {
            Some(x) => x,
            None => break,
        };
        let mut scaled: Vec<f64> = pts
            .iter()
            .map(|p| (p.1 - k * p.0 - b).abs() * p.2.sqrt())
            .collect();
        let s = 1.4826 * median(&mut scaled);
        let before = pts.len();
        pts.retain(|p| (p.1 - k * p.0 - b).abs() * p.2.sqrt() <= 5.0 * s + 1e-9);
        if pts.len() == before {
            break;
        }
    }
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints {
            needed: MIN_FIT_POINTS,
            got: pts.len(),
        });
    }
    let (k, b) = weighted_line(&pts).ok_or(Error::TooFewPoints {
        needed: MIN_FIT_POINTS,
        got: 1,
    })?;
    Ok(LineFit {
        k,
        intercept: b,
        rms: rms_of(&pts, k, b),
        used: pts.len(),
    })
}
