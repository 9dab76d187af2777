//! Pairwise calibration of a CPS chain: P_min, k and Δθ for every stage.
//!
//! Even chains need one right-to-left and one left-to-right pass. Odd
//! chains add a second pair of passes in which a terminal stage is held at
//! π/2, which turns the neighbouring MZI into a quadrature element and
//! shifts the pairing by one stage.

pub mod discriminate;
pub mod extrema;
mod pairwise;
pub mod unwrap;

use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

#[allow(unused_imports)]
use num_traits::Float;

pub use discriminate::{Discrimination, ProbeSetup};
pub use pairwise::PairRecord;
use unwrap::{Constraint, UnwrapKind};

use crate::device::{wrap_pi, Bench, Direction};
use crate::error::{Error, Result};

/// Phase of a stage at its recorded P_min.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ThetaAtPmin {
    Zero,
    Pi,
    Unresolved,
}

impl ThetaAtPmin {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Zero => Some(0.0),
            Self::Pi => Some(PI),
            Self::Unresolved => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "0",
            Self::Pi => "pi",
            Self::Unresolved => "unresolved",
        }
    }
}

/// Which pass produced a stage's P_min.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PassKind {
    RightToLeft,
    LeftToRight,
    TransformRightToLeft,
    TransformLeftToRight,
}

impl PassKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RightToLeft => "right_to_left",
            Self::LeftToRight => "left_to_right",
            Self::TransformRightToLeft => "transform_right_to_left",
            Self::TransformLeftToRight => "transform_left_to_right",
        }
    }

    pub fn is_transform(self) -> bool {
        matches!(
            self,
            Self::TransformRightToLeft | Self::TransformLeftToRight
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Mode {
    /// Assume |Δθ| < π/2 for every stage.
    Constrained,
    /// Decide θ(P_min) of interior stages with absolute intensity probes.
    NonConstraint,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Constrained => "constrained",
            Self::NonConstraint => "nonconstraint",
        }
    }
}

/// How a stage's Δθ was decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DthetaMethod {
    Constraint,
    Discriminator,
    Unresolved,
}

impl DthetaMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Constraint => "constraint",
            Self::Discriminator => "discriminator",
            Self::Unresolved => "unresolved",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CalibrationConfig {
    /// Minimum threshold as a fraction of max U_P.
    pub eps: f64,
    /// Lower bound on any stage slope (rad/mW); sets scan scopes.
    pub k_prior: f64,
    /// Upper bound on any stage slope (rad/mW); sets scan resolution.
    pub k_max: f64,
    /// Outer phase covered by the coarse scan at `k_prior` (rad).
    pub outer_scope_phase: f64,
    /// Coarse outer step expressed as phase at `k_max` (rad).
    pub coarse_phase_step: f64,
    pub refine_factor: usize,
    /// Half width of the fine windows, in coarse steps.
    pub refine_half_steps: f64,
    /// Below this max U_P the upstream stage is shifted and the pair rescanned.
    pub min_contrast: f64,
    pub max_contrast_retries: usize,
    /// Largest tolerated disagreement between two k estimates (rad/mW).
    pub pass_tolerance: f64,
    /// Acceptance band around the discriminator constants.
    pub band: f64,
    /// Phase added to probe stages during discrimination (rad).
    pub probe_phase: f64,
    /// Reads averaged per discriminator measurement.
    pub probe_reads: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            eps: 0.02,
            k_prior: 0.1,
            k_max: 0.2,
            outer_scope_phase: 1.15 * PI,
            coarse_phase_step: 0.02,
            refine_factor: 8,
            refine_half_steps: 8.0,
            min_contrast: 0.4,
            max_contrast_retries: 4,
            pass_tolerance: 5e-3,
            band: 0.05,
            probe_phase: 0.4 * PI,
            probe_reads: 16,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::param("calibration.eps", "must be in (0, 0.5)"));
        }
        if !(self.k_prior > 0.0 && self.k_max >= self.k_prior && self.k_max.is_finite()) {
            return Err(Error::param(
                "calibration.k_prior",
                "need 0 < k_prior <= k_max",
            ));
        }
        if !(self.outer_scope_phase > PI) {
            return Err(Error::param(
                "calibration.outer_scope_phase",
                "must exceed π",
            ));
        }
        if !(self.coarse_phase_step > 0.0 && self.coarse_phase_step < 0.5) {
            return Err(Error::param(
                "calibration.coarse_phase_step",
                "must be in (0, 0.5)",
            ));
        }
        if self.refine_factor == 0 {
            return Err(Error::param("calibration.refine_factor", "must be >= 1"));
        }
        if !(self.refine_half_steps >= 2.0) {
            return Err(Error::param(
                "calibration.refine_half_steps",
                "must be >= 2",
            ));
        }
        if !(self.min_contrast >= 0.0 && self.min_contrast <= 1.0) {
            return Err(Error::param(
                "calibration.min_contrast",
                "must be in [0, 1]",
            ));
        }
        if !(self.pass_tolerance > 0.0) {
            return Err(Error::param("calibration.pass_tolerance", "must be > 0"));
        }
        if !(self.band > 0.0 && self.band < 0.5) {
            return Err(Error::param("calibration.band", "must be in (0, 0.5)"));
        }
        if !(self.probe_phase > 0.0 && self.probe_phase < PI) {
            return Err(Error::param("calibration.probe_phase", "must be in (0, π)"));
        }
        if self.probe_reads == 0 {
            return Err(Error::param("calibration.probe_reads", "must be >= 1"));
        }
        Ok(())
    }

    pub(crate) fn coarse_power_step(&self) -> f64 {
        self.coarse_phase_step / self.k_max
    }

    pub(crate) fn refine_half_width(&self) -> f64 {
        self.refine_half_steps * self.coarse_power_step()
    }
}

/// Calibrated parameters of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct StageCalibration {
    pub stage: usize,
    /// First P ≥ 0 (mW) at which θ ∈ {0, π}.
    pub p_min: f64,
    /// First P ≥ 0 (mW) at which θ = π/2 (mod 2π).
    pub p_max: f64,
    pub k: f64,
    /// NaN when unresolved.
    pub dtheta: f64,
    pub theta_at_pmin: ThetaAtPmin,
    pub source_pass: PassKind,
    pub method: DthetaMethod,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CalibrationResult {
    pub mode: Mode,
    pub stages: Vec<StageCalibration>,
    pub pairs: Vec<PairRecord>,
    pub discriminations: Vec<Discrimination>,
}

impl CalibrationResult {
    pub fn stage(&self, j: usize) -> Option<&StageCalibration> {
        self.stages.iter().find(|s| s.stage == j)
    }
}

/// Decide Δθ from the slope and a power at which θ − `offset` ∈ {0, π}.
///
/// With [`Constraint::HalfPi`] the branch with |Δθ| < π/2 is taken. A hint
/// that contradicts it away from the ±π/2 boundary means the data are not
/// consistent with the constraint. Without a constraint the hint decides.
pub fn resolve_dtheta(
    k: f64,
    p: f64,
    constraint: Constraint,
    hint: Option<ThetaAtPmin>,
    offset: f64,
) -> Result<(f64, ThetaAtPmin)> {
    if !(k > 0.0) {
        return Err(Error::NonPositiveSlope { stage: 0, k });
    }
    let zero = wrap_pi(-offset - k * p);
    let pi = wrap_pi(PI - offset - k * p);
    match constraint {
        Constraint::HalfPi => {
            let (d, which) = if zero.abs() <= pi.abs() {
                (zero, ThetaAtPmin::Zero)
            } else {
                (pi, ThetaAtPmin::Pi)
            };
            if let Some(h) = hint.filter(|&h| h != ThetaAtPmin::Unresolved) {
                if h != which && FRAC_PI_2 - d.abs() > HINT_BOUNDARY {
                    return Err(Error::ConstraintViolation { stage: 0, zero, pi });
                }
            }
            Ok((d, which))
        }
        Constraint::None => match hint {
            Some(ThetaAtPmin::Zero) => Ok((zero, ThetaAtPmin::Zero)),
            Some(ThetaAtPmin::Pi) => Ok((pi, ThetaAtPmin::Pi)),
            _ => Err(Error::MissingHint { stage: 0 }),
        },
    }
}

/// Width of the band inside ±π/2 where the min/max ordering is unreliable:
/// once |sin Δθ| ≥ 0.9 the first maximum run touches P = 0 and is skipped.
const HINT_BOUNDARY: f64 = 0.55;

fn with_stage(e: Error, stage: usize) -> Error {
    match e {
        Error::NonPositiveSlope { k, .. } => Error::NonPositiveSlope { stage, k },
        Error::ConstraintViolation { zero, pi, .. } => {
            Error::ConstraintViolation { stage, zero, pi }
        }
        Error::MissingHint { .. } => Error::MissingHint { stage },
        Error::NoMinimum { .. } => Error::NoMinimum { stage },
        other => other,
    }
}

fn fold_half_pi(d: f64) -> f64 {
    if d > FRAC_PI_2 {
        d - PI
    } else if d < -FRAC_PI_2 {
        d + PI
    } else {
        d
    }
}

/// First P ≥ 0 where θ = Δθ + kP hits a multiple of π.
fn first_zero_pi(k: f64, dtheta: f64) -> f64 {
    crate::rem_euclid(-dtheta, PI) / k
}

/// First P ≥ 0 where θ ≡ π/2 (mod 2π).
fn first_quadrature(k: f64, dtheta: f64) -> f64 {
    crate::rem_euclid(FRAC_PI_2 - dtheta, 2.0 * PI) / k
}

fn theta_class(k: f64, dtheta: f64, p: f64) -> ThetaAtPmin {
    let t = wrap_pi(dtheta + k * p);
    if t.abs() < FRAC_PI_2 {
        ThetaAtPmin::Zero
    } else {
        ThetaAtPmin::Pi
    }
}

struct PassPlan {
    kind: PassKind,
    direction: Direction,
    pairs: Vec<(usize, usize)>,
    pins: Vec<(usize, f64)>,
    offset_stage: Option<usize>,
}

fn run_pass<B: Bench>(
    b: &mut B,
    plan: &PassPlan,
    cfg: &CalibrationConfig,
) -> Result<Vec<PairRecord>> {
    let n = b.stage_count();
    for s in 1..=n {
        b.set_power(s, 0.0);
    }
    for &(s, p) in &plan.pins {
        b.set_power(s, p);
    }
    let mut out = Vec::with_capacity(plan.pairs.len());
    for &(outer, inner) in &plan.pairs {
        let upstream = match plan.direction {
            Direction::Forward => inner.checked_sub(1).filter(|&u| u >= 1),
            Direction::Reversed => Some(inner + 1).filter(|&u| u <= n),
        }
        .filter(|u| !plan.pins.iter().any(|p| p.0 == *u));
        let mut rec = pairwise::pair_scan(b, outer, inner, plan.direction, upstream, cfg)?;
        rec.pass = plan.kind;
        if plan.offset_stage == Some(outer) {
            rec.outer_offset = FRAC_PI_2;
        }
        b.set_power(outer, rec.p_pin);
        b.set_power(inner, 0.0);
        if let Some(u) = upstream {
            b.set_power(u, 0.0);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Slope, reference power and provenance gathered for one stage.
#[derive(Debug, Clone, Copy)]
struct StageRaw {
    k: f64,
    /// Power at which θ − offset ∈ {0, π}; may be extrapolated below 0.
    p_ref: f64,
    /// Measured power ≥ 0 at which θ − offset ∈ {0, π}.
    p_pin: f64,
    offset: f64,
    hint: Option<ThetaAtPmin>,
    p_max: Option<f64>,
    source: PassKind,
}

impl StageRaw {
    /// Power at which θ itself is in {0, π}.
    fn p_zero_pi(&self) -> f64 {
        if self.offset == 0.0 {
            self.p_pin
        } else {
            let p = self.p_pin + self.offset / self.k;
            if p > PI / self.k {
                p - PI / self.k
            } else {
                p
            }
        }
    }
}

fn resolve_constrained(j: usize, raw: &StageRaw) -> Result<f64> {
    resolve_dtheta(raw.k, raw.p_ref, Constraint::HalfPi, raw.hint, raw.offset)
        .map(|r| r.0)
        .map_err(|e| with_stage(e, j))
}

fn constrained_stage(j: usize, raw: &StageRaw) -> Result<StageCalibration> {
    let dtheta = resolve_constrained(j, raw)?;
    Ok(finish_stage(j, raw, dtheta, DthetaMethod::Constraint))
}

fn finish_stage(j: usize, raw: &StageRaw, dtheta: f64, method: DthetaMethod) -> StageCalibration {
    let k = raw.k;
    let p_min = if raw.offset == 0.0 {
        raw.p_pin
    } else {
        first_zero_pi(k, dtheta)
    };
    let p_max = match raw.p_max {
        Some(p) if raw.offset == 0.0 => p,
        _ => first_quadrature(k, dtheta),
    };
    StageCalibration {
        stage: j,
        p_min,
        p_max,
        k,
        dtheta,
        theta_at_pmin: theta_class(k, dtheta, p_min),
        source_pass: raw.source,
        method,
    }
}

fn find(recs: &[PairRecord], f: impl Fn(&PairRecord) -> bool) -> Option<&PairRecord> {
    recs.iter().find(|r| f(r))
}

fn outer_raw(r: &PairRecord, k: f64) -> StageRaw {
    StageRaw {
        k,
        p_ref: r.p_min,
        p_pin: r.p_pin,
        offset: r.outer_offset,
        hint: (r.outer_offset == 0.0).then_some(r.hint),
        p_max: Some(r.p_max),
        source: r.pass,
    }
}

fn combine_k(j: usize, ks: &[f64], tol: f64) -> Result<f64> {
    match ks {
        [] => Err(Error::InsufficientScope { stage: j }),
        [k] => Ok(*k),
        [a, b, ..] => {
            if (a - b).abs() > tol {
                Err(Error::PassInconsistency {
                    stage: j,
                    first: *a,
                    second: *b,
                })
            } else {
                Ok(0.5 * (a + b))
            }
        }
    }
}

fn pairs_desc(from: usize, to: usize) -> Vec<(usize, usize)> {
    // (from, from−1), (from−2, from−3), … while the inner index ≥ to.
    let mut v = Vec::new();
    let mut o = from;
    while o >= to + 1 {
        v.push((o, o - 1));
        if o < 2 + to + 1 {
            break;
        }
        o -= 2;
    }
    v
}

fn pairs_asc(from: usize, to: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    let mut o = from;
    while o + 1 <= to {
        v.push((o, o + 1));
        o += 2;
    }
    v
}

/// Slopes and reference powers of every stage.
struct Measured {
    raws: Vec<StageRaw>,
    pairs: Vec<PairRecord>,
}

fn measure_single<B: Bench>(b: &mut B) -> Result<(Measured, f64)> {
    let grid = b.instrument().voltage_grid();
    b.set_power(1, 0.0);
    let trace = b.sweep(1, &grid, Direction::Forward);
    let (_, fit) = pairwise::fit_inner(&trace, UnwrapKind::Cosine)?;
    if !(fit.k > 0.0) {
        return Err(Error::NonPositiveSlope { stage: 1, k: fit.k });
    }
    let d = wrap_pi(fit.intercept);
    let raw = StageRaw {
        k: fit.k,
        p_ref: first_zero_pi(fit.k, d),
        p_pin: first_zero_pi(fit.k, d),
        offset: 0.0,
        hint: None,
        p_max: Some(first_quadrature(fit.k, d)),
        source: PassKind::RightToLeft,
    };
    Ok((
        Measured {
            raws: alloc::vec![raw],
            pairs: Vec::new(),
        },
        d,
    ))
}

fn measure_even<B: Bench>(b: &mut B, cfg: &CalibrationConfig) -> Result<Measured> {
    let n = b.stage_count();
    let f = run_pass(
        b,
        &PassPlan {
            kind: PassKind::RightToLeft,
            direction: Direction::Forward,
            pairs: pairs_desc(n, 1),
            pins: Vec::new(),
            offset_stage: None,
        },
        cfg,
    )?;
    let r = run_pass(
        b,
        &PassPlan {
            kind: PassKind::LeftToRight,
            direction: Direction::Reversed,
            pairs: pairs_asc(1, n),
            pins: Vec::new(),
            offset_stage: None,
        },
        cfg,
    )?;
    let mut raws = Vec::with_capacity(n);
    for j in 1..=n {
        let (outer_recs, inner_recs) = if j % 2 == 0 { (&f, &r) } else { (&r, &f) };
        let o = find(outer_recs, |p| p.outer == j).ok_or(Error::InsufficientScope { stage: j })?;
        let i = find(inner_recs, |p| p.inner == j).ok_or(Error::InsufficientScope { stage: j })?;
        raws.push(outer_raw(o, i.inner_fit.k));
    }
    let mut pairs = f;
    pairs.extend(r);
    Ok(Measured { raws, pairs })
}

fn measure_odd<B: Bench>(b: &mut B, cfg: &CalibrationConfig) -> Result<Measured> {
    let n = b.stage_count();
    let af = run_pass(
        b,
        &PassPlan {
            kind: PassKind::RightToLeft,
            direction: Direction::Forward,
            pairs: pairs_desc(n, 2),
            pins: Vec::new(),
            offset_stage: None,
        },
        cfg,
    )?;
    let ar = run_pass(
        b,
        &PassPlan {
            kind: PassKind::LeftToRight,
            direction: Direction::Reversed,
            pairs: pairs_asc(1, n - 1),
            pins: Vec::new(),
            offset_stage: None,
        },
        cfg,
    )?;
    let pn_max = find(&af, |p| p.outer == n)
        .ok_or(Error::InsufficientScope { stage: n })?
        .p_max;
    let p1_max = find(&ar, |p| p.outer == 1)
        .ok_or(Error::InsufficientScope { stage: 1 })?
        .p_max;
    // Stage N at π/2 makes MZI_{N−1} a quadrature element; likewise stage 1.
    let bf = run_pass(
        b,
        &PassPlan {
            kind: PassKind::TransformRightToLeft,
            direction: Direction::Forward,
            pairs: pairs_desc(n - 1, 1),
            pins: alloc::vec![(n, pn_max)],
            offset_stage: Some(n - 1),
        },
        cfg,
    )?;
    let br = run_pass(
        b,
        &PassPlan {
            kind: PassKind::TransformLeftToRight,
            direction: Direction::Reversed,
            pairs: pairs_asc(2, n),
            pins: alloc::vec![(1, p1_max)],
            offset_stage: Some(2),
        },
        cfg,
    )?;

    let mut raws = Vec::with_capacity(n);
    for j in 1..=n {
        let (k_sets, p_sets): ([&[PairRecord]; 2], [&[PairRecord]; 2]) = if j % 2 == 1 {
            ([&bf, &br], [&af, &ar])
        } else {
            ([&af, &ar], [&bf, &br])
        };
        let ks: Vec<f64> = k_sets
            .iter()
            .filter_map(|s| find(s, |p| p.inner == j))
            .map(|p| p.inner_fit.k)
            .collect();
        let k = combine_k(j, &ks, cfg.pass_tolerance)?;
        let outs: Vec<&PairRecord> = p_sets
            .iter()
            .filter_map(|s| find(s, |p| p.outer == j))
            .collect();
        let plain: Vec<&PairRecord> = outs
            .iter()
            .cloned()
            .filter(|p| p.outer_offset == 0.0)
            .collect();
        let raw = match plain.as_slice() {
            [a, b2, ..] => {
                let mut r = outer_raw(a, k);
                // Same physical zero crossing seen from both ends.
                if (a.p_min - b2.p_min).abs() < 0.5 {
                    r.p_ref = 0.5 * (a.p_min + b2.p_min);
                }
                if (a.p_pin - b2.p_pin).abs() < 0.5 {
                    r.p_pin = 0.5 * (a.p_pin + b2.p_pin);
                }
                r
            }
            [a] => outer_raw(a, k),
            [] => outer_raw(
                outs.first().ok_or(Error::InsufficientScope { stage: j })?,
                k,
            ),
        };
        raws.push(raw);
    }
    let mut pairs = af;
    pairs.extend(ar);
    pairs.extend(bf);
    pairs.extend(br);
    Ok(Measured { raws, pairs })
}

fn measure_two<B: Bench>(b: &mut B, cfg: &CalibrationConfig) -> Result<(Measured, [f64; 2])> {
    let first = run_pass(
        b,
        &PassPlan {
            kind: PassKind::RightToLeft,
            direction: Direction::Forward,
            pairs: alloc::vec![(2, 1)],
            pins: Vec::new(),
            offset_stage: None,
        },
        cfg,
    )?;
    let second = run_pass(
        b,
        &PassPlan {
            kind: PassKind::RightToLeft,
            direction: Direction::Forward,
            pairs: alloc::vec![(1, 2)],
            pins: Vec::new(),
            offset_stage: None,
        },
        cfg,
    )?;
    let (r2, r1) = (&first[0], &second[0]);
    let ks = [r2.inner_fit.k, r1.inner_fit.k];
    let mut d = [0.0; 2];
    // Outer stage at ±π/2: I4 = ½(1 ± sin θ_inner), intercept = Δθ. The
    // sign comes from the outer stage's own P_min and slope.
    for (slot, rec, k_outer) in [(0usize, r2, ks[1]), (1, r1, ks[0])] {
        let d_outer = resolve_constrained(rec.outer, &outer_raw(rec, k_outer))?;
        let trace: Vec<(f64, f64)> = if (d_outer + k_outer * rec.p_max).sin() < 0.0 {
            rec.inner_trace.iter().map(|&(p, x)| (p, 1.0 - x)).collect()
        } else {
            rec.inner_trace.clone()
        };
        let (_, fit) = pairwise::fit_inner(&trace, UnwrapKind::Sine)?;
        // The intercept is reliable mod π; near ±π/2 the sign of the outer
        // stage can be misjudged, which shows up as |Δθ| > π/2.
        d[slot] = fold_half_pi(wrap_pi(fit.intercept));
    }
    let raws = alloc::vec![outer_raw(r1, ks[0]), outer_raw(r2, ks[1])];
    let mut pairs = first;
    pairs.extend(second);
    Ok((Measured { raws, pairs }, d))
}

/// Calibrate every stage of the bench's chain.
pub fn calibrate<B: Bench>(
    b: &mut B,
    cfg: &CalibrationConfig,
    mode: Mode,
) -> Result<CalibrationResult> {
    cfg.validate()?;
    let n = b.stage_count();
    if n == 0 {
        return Err(Error::param("chain.stages", "empty chain"));
    }
    if mode == Mode::NonConstraint && n < 3 {
        return Err(Error::param(
            "mode",
            "nonconstraint calibration needs at least 3 stages",
        ));
    }
    let (measured, direct) = match n {
        1 => {
            let (m, d) = measure_single(b)?;
            (m, Some(alloc::vec![d]))
        }
        2 => {
            let (m, d) = measure_two(b, cfg)?;
            (m, Some(d.to_vec()))
        }
        _ if n % 2 == 0 => (measure_even(b, cfg)?, None),
        _ => (measure_odd(b, cfg)?, None),
    };

    let mut stages = Vec::with_capacity(n);
    let mut discriminations = Vec::new();
    for j in 1..=n {
        let raw = &measured.raws[j - 1];
        let interior = j > 1 && j < n;
        let st = if mode == Mode::NonConstraint && interior {
            let d = discriminate::discriminate(
                b,
                j,
                &measured
                    .raws
                    .iter()
                    .map(|r| (r.k, r.p_zero_pi()))
                    .collect::<Vec<_>>(),
                cfg,
            )?;
            let st = match d.class {
                ThetaAtPmin::Unresolved => unresolved(j, raw),
                c => {
                    let p = raw.p_zero_pi();
                    let dtheta = wrap_pi(c.value().unwrap_or(0.0) - raw.k * p);
                    let plain = StageRaw {
                        p_ref: p,
                        p_pin: p,
                        offset: 0.0,
                        hint: None,
                        ..*raw
                    };
                    finish_stage(j, &plain, dtheta, DthetaMethod::Discriminator)
                }
            };
            discriminations.push(d);
            st
        } else if let Some(d) = direct.as_ref() {
            let dtheta = d[j - 1];
            if dtheta.abs() > FRAC_PI_2 + 0.05 {
                if mode == Mode::NonConstraint {
                    unresolved(j, raw)
                } else {
                    return Err(Error::ConstraintViolation {
                        stage: j,
                        zero: dtheta,
                        pi: wrap_pi(dtheta + PI),
                    });
                }
            } else {
                finish_stage(j, raw, dtheta, DthetaMethod::Constraint)
            }
        } else {
            match constrained_stage(j, raw) {
                Ok(s) => s,
                Err(_) if mode == Mode::NonConstraint => unresolved(j, raw),
                Err(e) => return Err(e),
            }
        };
        stages.push(st);
    }
    for s in 1..=n {
        b.set_power(s, 0.0);
    }
    Ok(CalibrationResult {
        mode,
        stages,
        pairs: measured.pairs,
        discriminations,
    })
}

fn unresolved(j: usize, raw: &StageRaw) -> StageCalibration {
    StageCalibration {
        stage: j,
        p_min: raw.p_zero_pi(),
        p_max: f64::NAN,
        k: raw.k,
        dtheta: f64::NAN,
        theta_at_pmin: ThetaAtPmin::Unresolved,
        source_pass: raw.source,
        method: DthetaMethod::Unresolved,
    }
}

#[cfg(test)]
mod tests;
