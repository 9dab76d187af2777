//! Fidelity of a calibration against the device it came from, the
//! imbalanced-coupler extinction-ratio model, and the ambient drift fit.

use alloc::vec::Vec;
use core::f64::consts::TAU;

#[allow(unused_imports)]
use num_traits::Float;

use crate::calibration::CalibrationResult;
use crate::device::{
    simulate_output, Bench, ChainModel, Direction, InstrumentModel, SimulatedDevice,
    TopsGroundTruth, REFERENCE_TEMP_C,
};
use crate::error::{Error, Result};

/// Classical intensity fidelity √(ie·it) + √((1−ie)(1−it)).
pub fn fidelity(i_exp: f64, i_theory: f64) -> Result<f64> {
    for (name, x) in [("i_exp", i_exp), ("i_theory", i_theory)] {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::param(name, alloc::format!("{} not in [0, 1]", x)));
        }
    }
    Ok(((i_exp * i_theory).sqrt() + ((1.0 - i_exp) * (1.0 - i_theory)).sqrt()).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct FidelityReport {
    /// Stage-major: all points of stage 1's sweep, then stage 2, ...
    pub values: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// (threshold, fraction of values strictly above it).
    pub fraction_above: Vec<(f64, f64)>,
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.99, 0.999, 0.9999];

impl FidelityReport {
    pub fn from_values(values: Vec<f64>, thresholds: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("values", "empty"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r = Self {
            values,
            mean,
            min,
            max,
            fraction_above: Vec::new(),
        };
        r.fraction_above = thresholds
            .iter()
            .map(|&t| (t, r.fraction_over(t)))
            .collect();
        Ok(r)
    }

    pub fn fraction_over(&self, threshold: f64) -> f64 {
        self.values.iter().filter(|&&v| v > threshold).count() as f64 / self.values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Equal-width bins over [lo, hi]; values outside are dropped, `hi` itself
/// lands in the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::param("bins", "need bins > 0 and hi > lo"));
    }
    let w = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            low: lo + i as f64 * w,
            high: lo + (i + 1) as f64 * w,
            count: 0,
        })
        .collect();
    for &v in values {
        if v >= lo && v <= hi {
            let i = (((v - lo) / w) as usize).min(bins - 1);
            out[i].count += 1;
        }
    }
    Ok(out)
}

/// The chain the calibration describes: recovered (k, Δθ), the truth's
/// heater resistances, ideal couplers.
pub fn calibrated_model(truth: &ChainModel, cal: &CalibrationResult) -> Result<ChainModel> {
    if cal.stages.len() != truth.len() {
        return Err(Error::param(
            "calibration",
            alloc::format!(
                "{} stages calibrated, chain has {}",
                cal.stages.len(),
                truth.len()
            ),
        ));
    }
    let stages = cal
        .stages
        .iter()
        .zip(&truth.stages)
        .map(|(c, t)| {
            if !(c.k > 0.0 && c.dtheta.is_finite()) {
                return Err(Error::param(
                    "calibration",
                    alloc::format!("stage {} is unresolved", c.stage),
                ));
            }
            Ok(TopsGroundTruth::new(c.stage, c.k, c.dtheta, t.resistance))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainModel::ideal(stages))
}

/// Sweep every stage in turn over the instrument grid (others at zero
/// power) on the true device and compare each reading with the calibrated
/// model's port-4 prediction.
pub fn fidelity_campaign(
    truth: &ChainModel,
    cal: &CalibrationResult,
    instrument: &InstrumentModel,
) -> Result<FidelityReport> {
    let model = calibrated_model(truth, cal)?;
    let mut dev = SimulatedDevice::new(truth.clone(), *instrument)?;
    let grid = instrument.voltage_grid();
    let n = truth.len();
    let mut powers = alloc::vec![0.0; n];
    let mut values = Vec::with_capacity(n * grid.len());
    for s in 1..=n {
        for (p, i_exp) in dev.sweep(s, &grid, Direction::Forward) {
            powers[s - 1] = p;
            let (_, i_th) = simulate_output(&model, &powers, Direction::Forward)?;
            values.push(fidelity(i_exp.clamp(0.0, 1.0), i_th.clamp(0.0, 1.0))?);
        }
        powers[s - 1] = 0.0;
    }
    FidelityReport::from_values(values, &DEFAULT_THRESHOLDS)
}

/// Stand-in for an infinite extinction ratio at the ideal-coupler
/// singularities.
pub const ER_INFINITE: f64 = f64::INFINITY;

/// Coupler quality: loss asymmetry r = e^{−(τ−κ)/2} and splitting ratio η.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MmiQuality {
    pub r: f64,
    pub eta: f64,
}

impl MmiQuality {
    pub const IDEAL: MmiQuality = MmiQuality { r: 1.0, eta: 0.5 };

    pub fn new(r: f64, eta: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::param("r", alloc::format!("{} must be > 0", r)));
        }
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::param("eta", alloc::format!("{} not in (0, 1)", eta)));
        }
        Ok(Self { r, eta })
    }

    pub fn from_losses(tau: f64, kappa: f64, eta: f64) -> Result<Self> {
        Self::new((-(tau - kappa) / 2.0).exp(), eta)
    }

    /// Quality implied by the cross (T₃₂) and bar (T₄₂) transmissions of a
    /// single coupler when both branches lose the same power (r = 1).
    pub fn from_transmissions(t32: f64, t42: f64) -> Result<Self> {
        if !(t32 > 0.0 && t42 > 0.0) {
            return Err(Error::param("transmission", "must be > 0"));
        }
        Self::new(1.0, t42 / (t32 + t42))
    }

    /// |10·log10(r²(1−η)/η)|.
    pub fn imbalance_db(&self) -> f64 {
        (10.0 * (self.r * self.r * (1.0 - self.eta) / self.eta).log10()).abs()
    }
}

/// |10·log10(t_a / t_b)|.
pub fn imbalance_db(t_a: f64, t_b: f64) -> Result<f64> {
    if !(t_a > 0.0 && t_b > 0.0) {
        return Err(Error::param(
            "transmission",
            alloc::format!("({}, {}) must both be > 0", t_a, t_b),
        ));
    }
    Ok((10.0 * (t_a / t_b).log10()).abs())
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        ER_INFINITE
    } else {
        20.0 * (num / den).abs().log10()
    }
}

/// 10·log10(((r+1)/(r−1))²); independent of η.
pub fn er_port3(q: MmiQuality) -> f64 {
    ratio_db(q.r + 1.0, q.r - 1.0)
}

/// 10·log10(((r(1−η)+η)/(r(1−η)−η))²).
pub fn er_port4(q: MmiQuality) -> f64 {
    let a = q.r * (1.0 - q.eta);
    ratio_db(a + q.eta, a - q.eta)
}

/// Port (3, 4) intensities of an MZI built from two identical lossy
/// couplers, input at port 2, scaled by e^{2κ}.
pub fn imbalanced_intensities(q: MmiQuality, theta: f64) -> (f64, f64) {
    let (r, e) = (q.r, q.eta);
    let c = theta.cos();
    let i3 = r * r * (1.0 - e) * e * (r * r + 1.0 + 2.0 * r * c);
    let i4 = r * r * (1.0 - e) * (1.0 - e) + e * e - 2.0 * r * (1.0 - e) * e * c;
    (i3, i4)
}

fn theta_fidelity(q: MmiQuality, theta: f64) -> f64 {
    let (i3, i4) = imbalanced_intensities(q, theta);
    let n = (i4 / (i3 + i4)).clamp(0.0, 1.0);
    let ideal = ((1.0 - theta.cos()) / 2.0).clamp(0.0, 1.0);
    ((n * ideal).sqrt() + ((1.0 - n) * (1.0 - ideal)).sqrt()).min(1.0)
}

/// Lowest fidelity over θ between the normalised port-4 intensity of the
/// imbalanced MZI and the ideal one: `samples` uniform points, then a
/// golden-section search around the worst.
pub fn worst_case_fidelity(q: MmiQuality, samples: usize) -> f64 {
    let samples = samples.max(8);
    let h = TAU / samples as f64;
    let (i0, f0) = (0..samples)
        .map(|i| (i, theta_fidelity(q, i as f64 * h)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let (mut a, mut b) = ((i0 as f64 - 1.0) * h, (i0 as f64 + 1.0) * h);
    let g = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (theta_fidelity(q, x1), theta_fidelity(q, x2));
    for _ in 0..60 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = theta_fidelity(q, x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = theta_fidelity(q, x2);
        }
    }
    f0.min(f1).min(f2)
}

/// Search domain for [`min_fidelity_given_er`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ErGrid {
    pub r_min: f64,
    pub r_max: f64,
    pub n_r: usize,
    pub eta_min: f64,
    pub eta_max: f64,
    pub n_eta: usize,
    pub n_theta: usize,
    /// Subdivision of the cells around the coarse minimiser.
    pub refine: usize,
}

impl Default for ErGrid {
    fn default() -> Self {
        // Odd node counts put (1, 0.5) on the grid.
        Self {
            r_min: 0.98,
            r_max: 1.02,
            n_r: 401,
            eta_min: 0.47,
            eta_max: 0.53,
            n_eta: 401,
            n_theta: 720,
            refine: 4,
        }
    }
}

impl ErGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_max > self.r_min) {
            return Err(Error::param("r_min", "need 0 < r_min < r_max"));
        }
        if !(self.eta_min > 0.0 && self.eta_max < 1.0 && self.eta_max > self.eta_min) {
            return Err(Error::param("eta_min", "need 0 < eta_min < eta_max < 1"));
        }
        if self.n_r < 2 || self.n_eta < 2 || self.n_theta < 8 || self.refine == 0 {
            return Err(Error::param("n_r", "grid too coarse"));
        }
        Ok(())
    }

    fn r(&self, i: f64) -> f64 {
        self.r_min + i * (self.r_max - self.r_min) / (self.n_r - 1) as f64
    }

    fn eta(&self, j: f64) -> f64 {
        self.eta_min + j * (self.eta_max - self.eta_min) / (self.n_eta - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct MinFidelity {
    pub fidelity: f64,
    /// Where the minimum was found.
    pub at: MmiQuality,
    /// Grid nodes that met both bounds.
    pub admissible: usize,
}

fn admissible(q: MmiQuality, bound: f64) -> bool {
    er_port3(q) >= bound && er_port4(q) >= bound
}

/// Lowest worst-case fidelity over all (r, η) on the grid whose port-3 and
/// port-4 extinction ratios both reach `er_bound`.
pub fn min_fidelity_given_er(er_bound: f64, grid: &ErGrid) -> Result<MinFidelity> {
    if !(er_bound > 0.0) {
        return Err(Error::param(
            "er_bound",
            alloc::format!("{} dB must be > 0", er_bound),
        ));
    }
    grid.validate()?;
    let mut best: Option<(f64, f64, f64, MmiQuality)> = None;
    let mut count = 0;
    for i in 0..grid.n_r {
        let r = grid.r(i as f64);
        if er_port3(MmiQuality { r, eta: 0.5 }) < er_bound {
            continue;
        }
        for j in 0..grid.n_eta {
            let q = MmiQuality {
                r,
                eta: grid.eta(j as f64),
            };
            if !admissible(q, er_bound) {
                continue;
            }
            count += 1;
            let f = worst_case_fidelity(q, grid.n_theta);
            if best.map_or(true, |b| f < b.0) {
                best = Some((f, i as f64, j as f64, q));
            }
        }
    }
    let (mut f, i0, j0, mut at) = best.ok_or_else(|| {
        Error::param(
            "er_bound",
            alloc::format!("no (r, eta) on the grid reaches {} dB", er_bound),
        )
    })?;
    let m = grid.refine as i64;
    for di in -m..=m {
        for dj in -m..=m {
            let (i, j) = (i0 + di as f64 / m as f64, j0 + dj as f64 / m as f64);
            if i < 0.0 || j < 0.0 || i > (grid.n_r - 1) as f64 || j > (grid.n_eta - 1) as f64 {
                continue;
            }
            let q = MmiQuality {
                r: grid.r(i),
                eta: grid.eta(j),
            };
            if !admissible(q, er_bound) {
                continue;
            }
            let v = worst_case_fidelity(q, grid.n_theta);
            if v < f {
                f = v;
                at = q;
            }
        }
    }
    Ok(MinFidelity {
        fidelity: f,
        at,
        admissible: count,
    })
}

/// The two (r, η) branches of the ER_port4 = `er` contour at each `r`.
pub fn er_port4_contour(er: f64, r_values: &[f64]) -> Result<Vec<(MmiQuality, MmiQuality)>> {
    if !(er > 0.0 && er.is_finite()) {
        return Err(Error::param("er", "must be finite and > 0"));
    }
    let g = 10f64.powf(er / 20.0);
    // r(1−η)/η = (g+1)/(g−1) or (g−1)/(g+1).
    let ratios = [(g + 1.0) / (g - 1.0), (g - 1.0) / (g + 1.0)];
    r_values
        .iter()
        .map(|&r| {
            let lo = MmiQuality::new(r, r / (r + ratios[0]))?;
            let hi = MmiQuality::new(r, r / (r + ratios[1]))?;
            Ok((lo, hi))
        })
        .collect()
}

/// Mean first-stage Δθ (rad) of repeated calibrations at each ambient
/// temperature (°C) of the measured chip.
pub const STAGE1_DTHETA_VS_TEMP: [(f64, f64); 6] = [
    (15.0, 0.5073),
    (20.0, 0.4847),
    (25.0, 0.4665),
    (30.0, 0.4506),
    (35.0, 0.4377),
    (40.0, 0.4166),
];

/// Least-squares line through (temperature, Δθ) samples; returns
/// (rad/°C, Δθ at the reference temperature).
pub fn fit_drift(samples: &[(f64, f64)]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::param("samples", "temperatures must differ"));
    }
    let slope = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum::<f64>() / sxx;
    Ok((slope, my + slope * (REFERENCE_TEMP_C - mx)))
}
