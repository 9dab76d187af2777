//! Simulated device under test: an N-stage chain with hidden per-stage
//! truth, driven through a DAC and read through a noisy detector.
//!
//! Calibration code only talks to the [`Bench`] trait, so it sees heater
//! powers and port-4 readings and nothing else.

use alloc::vec::Vec;
use core::f64::consts::TAU;

// Unused whenever std is linked into the build graph.
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::jones::{mmi, phase_shifter, JonesVector, MmiParams, TransferMatrix, C64};

/// Ambient temperature (°C) at which `dtheta` is specified.
pub const REFERENCE_TEMP_C: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Direction {
    /// Light enters port 2 on the stage-1 side and leaves port 4.
    Forward,
    /// Light travels the chain from stage N to stage 1.
    Reversed,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Reversed => "reversed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopsGroundTruth {
    /// Power-to-phase slope (rad/mW).
    pub k: f64,
    /// Relative phase at zero power and the reference temperature (rad).
    pub dtheta: f64,
    /// Heater resistance (kΩ).
    pub resistance: f64,
    /// Drift of `dtheta` with ambient temperature (rad/°C).
    pub dtheta_temp_coeff: f64,
    /// 1-based stage index.
    pub label: usize,
}

impl TopsGroundTruth {
    pub fn new(label: usize, k: f64, dtheta: f64, resistance: f64) -> Self {
        Self {
            k,
            dtheta,
            resistance,
            dtheta_temp_coeff: 0.0,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    pub stages: Vec<TopsGroundTruth>,
    /// `stages.len() + 1` couplers; `mmis[0]` sits before stage 1.
    pub mmis: Vec<MmiParams>,
    /// °C
    pub ambient_temp: f64,
}

impl ChainModel {
    pub fn ideal(stages: Vec<TopsGroundTruth>) -> Self {
        let mmis = alloc::vec![MmiParams::IDEAL; stages.len() + 1];
        Self {
            stages,
            mmis,
            ambient_temp: REFERENCE_TEMP_C,
        }
    }

    /// The measured six-stage chain (R = 1.75 kΩ) used as the reference
    /// device throughout the tests and the default scenario.
    pub fn reference_six() -> Self {
        const K: [f64; 6] = [0.1427, 0.1459, 0.1515, 0.1478, 0.1517, 0.1470];
        const D: [f64; 6] = [0.4863, -0.2177, 0.106, 0.6925, 1.1762, 0.7244];
        Self::ideal(
            (0..6)
                .map(|j| TopsGroundTruth::new(j + 1, K[j], D[j], 1.75))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::param("stages", "chain needs at least one stage"));
        }
        if self.mmis.len() != self.stages.len() + 1 {
            return Err(Error::param(
                "mmis",
                alloc::format!(
                    "expected {} couplers for {} stages, got {}",
                    self.stages.len() + 1,
                    self.stages.len(),
                    self.mmis.len()
                ),
            ));
        }
        for s in &self.stages {
            if !(s.k > 0.0 && s.k.is_finite()) {
                return Err(Error::param(
                    "k",
                    alloc::format!("stage {}: {} must be > 0", s.label, s.k),
                ));
            }
            if !(s.resistance > 0.0 && s.resistance.is_finite()) {
                return Err(Error::param(
                    "resistance",
                    alloc::format!("stage {}: {} must be > 0", s.label, s.resistance),
                ));
            }
            if !s.dtheta.is_finite() || !s.dtheta_temp_coeff.is_finite() {
                return Err(Error::param(
                    "dtheta",
                    alloc::format!("stage {} not finite", s.label),
                ));
            }
        }
        for m in &self.mmis {
            m.validate()?;
        }
        if !self.ambient_temp.is_finite() {
            return Err(Error::param("ambient_temp", "not finite"));
        }
        Ok(())
    }

    pub fn is_lossless(&self) -> bool {
        self.mmis.iter().all(|m| m.is_lossless())
    }

    /// Stages whose |Δθ| at the current ambient violates the half-pi
    /// constraint.
    pub fn constraint_violations(&self) -> Vec<usize> {
        self.stages
            .iter()
            .filter(|s| {
                let d = wrap_pi(
                    s.dtheta + s.dtheta_temp_coeff * (self.ambient_temp - REFERENCE_TEMP_C),
                );
                d.abs() >= core::f64::consts::FRAC_PI_2
            })
            .map(|s| s.label)
            .collect()
    }

    /// Total transfer matrix for heater powers `powers[j-1]` (mW).
    pub fn transfer(&self, powers: &[f64], direction: Direction) -> Result<TransferMatrix> {
        if powers.len() != self.stages.len() {
            return Err(Error::param(
                "powers",
                alloc::format!("need {} entries, got {}", self.stages.len(), powers.len()),
            ));
        }
        let mut elements = Vec::with_capacity(2 * self.stages.len() + 1);
        elements.push(mmi(self.mmis[0])?);
        for (j, s) in self.stages.iter().enumerate() {
            elements.push(phase_shifter(stage_phase(s, powers[j], self.ambient_temp)));
            elements.push(mmi(self.mmis[j + 1])?);
        }
        let m = crate::jones::compose(&elements)?;
        Ok(match direction {
            Direction::Forward => m,
            Direction::Reversed => m.transpose(),
        })
    }
}

/// Wrap an angle into (-π, π].
pub fn wrap_pi(x: f64) -> f64 {
    let y = crate::rem_euclid(x, TAU);
    if y > core::f64::consts::PI {
        y - TAU
    } else {
        y
    }
}

/// Heater power in mW for `v` volts across `r` kΩ.
pub fn volts_to_power(v: f64, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::param(
            "resistance",
            alloc::format!("{} kΩ must be > 0", r),
        ));
    }
    Ok(v * v / r)
}

pub fn stage_phase(truth: &TopsGroundTruth, p: f64, ambient: f64) -> f64 {
    truth.k * p + truth.dtheta + truth.dtheta_temp_coeff * (ambient - REFERENCE_TEMP_C)
}

/// Port (3, 4) intensities for the given heater powers, normalised to
/// their sum when the couplers are lossy.
pub fn simulate_output(
    chain: &ChainModel,
    powers: &[f64],
    direction: Direction,
) -> Result<(f64, f64)> {
    let m = chain.transfer(powers, direction)?;
    let out = m * JonesVector::port2();
    let (i3, i4) = crate::jones::intensities(out);
    if chain.is_lossless() {
        Ok((i3, i4))
    } else {
        let s = i3 + i4;
        Ok((i3 / s, i4 / s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct InstrumentModel {
    pub v_min: f64,
    pub v_max: f64,
    /// Scan step (V).
    pub v_step: f64,
    /// DAC resolution (V); every applied voltage is rounded to a multiple.
    pub dac_lsb: f64,
    /// Additive Gaussian noise on the normalised detector reading.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for InstrumentModel {
    fn default() -> Self {
        Self {
            v_min: 0.0,
            v_max: 10.0,
            v_step: 0.01,
            // 16-bit converter spanning ±10 V.
            dac_lsb: 20.0 / 65536.0,
            noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl InstrumentModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min >= 0.0 && self.v_min < self.v_max && self.v_max.is_finite()) {
            return Err(Error::param("v_min", "need 0 <= v_min < v_max"));
        }
        if !(self.v_step > 0.0 && self.v_step <= self.v_max - self.v_min) {
            return Err(Error::param(
                "v_step",
                alloc::format!("{} not in (0, v_max - v_min]", self.v_step),
            ));
        }
        if !(self.dac_lsb >= 0.0 && self.dac_lsb.is_finite()) {
            return Err(Error::param("dac_lsb", "must be >= 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::param("noise_sigma", "must be >= 0"));
        }
        Ok(())
    }

    /// Scan voltages `v_min + n·v_step` for n = 1, 2, … up to `v_max`.
    pub fn voltage_grid(&self) -> Vec<f64> {
        self.grid_with_step(self.v_step)
    }

    pub fn grid_with_step(&self, step: f64) -> Vec<f64> {
        let n = ((self.v_max - self.v_min) / step + 1e-9).floor() as usize;
        (1..=n).map(|i| self.v_min + i as f64 * step).collect()
    }

    pub fn quantize(&self, v: f64) -> f64 {
        let v = v.clamp(self.v_min, self.v_max);
        if self.dac_lsb > 0.0 {
            (v / self.dac_lsb).round() * self.dac_lsb
        } else {
            v
        }
    }
}

/// What a calibration routine may do with the hardware.
pub trait Bench {
    fn stage_count(&self) -> usize;
    /// Heater resistance of 1-based `stage` (kΩ).
    fn resistance(&self, stage: usize) -> f64;
    fn instrument(&self) -> &InstrumentModel;
    /// Drive `stage` at the DAC code closest to `voltage`; returns the
    /// applied power (mW).
    fn set_voltage(&mut self, stage: usize, voltage: f64) -> f64;
    /// Current applied power of `stage` (mW).
    fn power(&self, stage: usize) -> f64;
    /// One normalised port-4 reading.
    fn read(&mut self, direction: Direction) -> f64;

    fn set_power(&mut self, stage: usize, p: f64) -> f64 {
        let v = (p.max(0.0) * self.resistance(stage)).sqrt();
        self.set_voltage(stage, v)
    }

    fn max_power(&self, stage: usize) -> f64 {
        let v = self.instrument().v_max;
        v * v / self.resistance(stage)
    }

    /// Sweep `stage` through `voltages`, returning (applied power, reading)
    /// pairs. The stage is restored to its previous power afterwards.
    fn sweep(&mut self, stage: usize, voltages: &[f64], direction: Direction) -> Vec<(f64, f64)> {
        let keep = self.power(stage);
        let out = voltages
            .iter()
            .map(|&v| {
                let p = self.set_voltage(stage, v);
                (p, self.read(direction))
            })
            .collect();
        self.set_power(stage, keep);
        out
    }
}

/// A chain with hidden truth behind an instrument model.
#[derive(Debug, Clone)]
pub struct SimulatedDevice {
    chain: ChainModel,
    instrument: InstrumentModel,
    rng: ChaCha8Rng,
    powers: Vec<f64>,
    phasors: Vec<C64>,
    mmis: Vec<TransferMatrix>,
    lossless: bool,
    reads: u64,
}

impl SimulatedDevice {
    pub fn new(chain: ChainModel, instrument: InstrumentModel) -> Result<Self> {
        chain.validate()?;
        instrument.validate()?;
        let mmis = chain
            .mmis
            .iter()
            .map(|p| mmi(*p))
            .collect::<Result<Vec<_>>>()?;
        let lossless = chain.is_lossless();
        let mut dev = Self {
            rng: ChaCha8Rng::seed_from_u64(instrument.rng_seed),
            powers: alloc::vec![0.0; chain.len()],
            phasors: alloc::vec![C64::new(1.0, 0.0); chain.len()],
            chain,
            instrument,
            mmis,
            lossless,
            reads: 0,
        };
        for j in 1..=dev.chain.len() {
            dev.refresh(j);
        }
        Ok(dev)
    }

    pub fn chain(&self) -> &ChainModel {
        &self.chain
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    /// Number of detector readings taken so far.
    pub fn read_count(&self) -> u64 {
        self.reads
    }

    /// True phase of `stage` at its current power (for tests only; the
    /// calibration never calls this).
    pub fn true_phase(&self, stage: usize) -> f64 {
        stage_phase(
            &self.chain.stages[stage - 1],
            self.powers[stage - 1],
            self.chain.ambient_temp,
        )
    }

    fn refresh(&mut self, stage: usize) {
        let t = self.true_phase(stage);
        self.phasors[stage - 1] = C64::cis(t);
    }

    /// Element `idx` of the chain in propagation order for `direction`.
    /// Even indices are couplers, odd ones phase shifters.
    fn element(&self, idx: usize, direction: Direction) -> TransferMatrix {
        let n = self.chain.len();
        let phys = match direction {
            Direction::Forward => idx,
            Direction::Reversed => 2 * n - idx,
        };
        if phys % 2 == 0 {
            let c = self.mmis[phys / 2];
            match direction {
                Direction::Forward => c,
                Direction::Reversed => c.transpose(),
            }
        } else {
            let p = self.phasors[phys / 2];
            TransferMatrix::new(
                p,
                C64::new(0.0, 0.0),
                C64::new(0.0, 0.0),
                C64::new(1.0, 0.0),
            )
        }
    }

    fn ideal_reading(&self, direction: Direction) -> f64 {
        let n = 2 * self.chain.len() + 1;
        let mut v = JonesVector::port2();
        for idx in 0..n {
            v = self.element(idx, direction) * v;
        }
        self.normalise(v.up.norm_sqr(), v.down.norm_sqr())
    }

    fn normalise(&self, i3: f64, i4: f64) -> f64 {
        if self.lossless {
            i4
        } else {
            i4 / (i3 + i4)
        }
    }

    fn add_noise(&mut self, x: f64) -> f64 {
        self.reads += 1;
        let s = self.instrument.noise_sigma;
        if s > 0.0 {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            (x + s * n).clamp(0.0, 1.0)
        } else {
            x
        }
    }

    /// Noise-free port-4 reading at the current powers.
    pub fn noiseless_read(&self, direction: Direction) -> f64 {
        self.ideal_reading(direction)
    }
}

impl Bench for SimulatedDevice {
    fn stage_count(&self) -> usize {
        self.chain.len()
    }

    fn resistance(&self, stage: usize) -> f64 {
        self.chain.stages[stage - 1].resistance
    }

    fn instrument(&self) -> &InstrumentModel {
        &self.instrument
    }

    fn set_voltage(&mut self, stage: usize, voltage: f64) -> f64 {
        let v = self.instrument.quantize(voltage);
        let p = v * v / self.resistance(stage);
        self.powers[stage - 1] = p;
        self.refresh(stage);
        p
    }

    fn power(&self, stage: usize) -> f64 {
        self.powers[stage - 1]
    }

    fn read(&mut self, direction: Direction) -> f64 {
        let x = self.ideal_reading(direction);
        self.add_noise(x)
    }

    fn sweep(&mut self, stage: usize, voltages: &[f64], direction: Direction) -> Vec<(f64, f64)> {
        // Everything except the swept shifter is fixed, so the output is
        // |x·e^{iθ} + y|² for constants x, y (and likewise for port 3).
        let n = self.chain.len();
        let pos = match direction {
            Direction::Forward => 2 * stage - 1,
            Direction::Reversed => 2 * (n - stage) + 1,
        };
        let mut u = JonesVector::port2();
        for idx in 0..pos {
            u = self.element(idx, direction) * u;
        }
        let mut after = TransferMatrix::identity();
        for idx in pos + 1..2 * n + 1 {
            after = self.element(idx, direction) * after;
        }
        let x4 = after.m21 * u.up;
        let y4 = after.m22 * u.down;
        let x3 = after.m11 * u.up;
        let y3 = after.m12 * u.down;
        let truth = self.chain.stages[stage - 1];
        let ambient = self.chain.ambient_temp;
        let keep = self.powers[stage - 1];
        let mut out = Vec::with_capacity(voltages.len());
        for &v in voltages {
            let vq = self.instrument.quantize(v);
            let p = vq * vq / truth.resistance;
            let e = C64::cis(stage_phase(&truth, p, ambient));
            let i4 = (x4 * e + y4).norm_sqr();
            let x = if self.lossless {
                i4
            } else {
                let i3 = (x3 * e + y3).norm_sqr();
                i4 / (i3 + i4)
            };
            let r = self.add_noise(x);
            out.push((p, r));
        }
        self.powers[stage - 1] = keep;
        self.refresh(stage);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanTrace {
    pub stage: usize,
    pub direction: Direction,
    /// Powers of every other stage during the scan (stage, mW).
    pub fixed_powers: Vec<(usize, f64)>,
    /// mW, strictly increasing.
    pub applied_power: Vec<f64>,
    pub intensity: Vec<f64>,
}

fn device_with(
    chain: &ChainModel,
    instrument: &InstrumentModel,
    fixed: &[(usize, f64)],
) -> Result<SimulatedDevice> {
    let mut dev = SimulatedDevice::new(chain.clone(), *instrument)?;
    for &(s, p) in fixed {
        if s == 0 || s > chain.len() {
            return Err(Error::param(
                "fixed",
                alloc::format!("stage {} outside 1..={}", s, chain.len()),
            ));
        }
        if !(p >= 0.0) {
            return Err(Error::param(
                "fixed",
                alloc::format!("stage {} power {} < 0", s, p),
            ));
        }
        dev.set_power(s, p);
    }
    Ok(dev)
}

/// Scan `target` over the instrument voltage grid with the other stages
/// held at `fixed` (unlisted stages sit at zero power).
pub fn scan_stage(
    chain: &ChainModel,
    instrument: &InstrumentModel,
    target: usize,
    fixed: &[(usize, f64)],
    direction: Direction,
) -> Result<ScanTrace> {
    if target == 0 || target > chain.len() {
        return Err(Error::param(
            "target",
            alloc::format!("stage {} outside 1..={}", target, chain.len()),
        ));
    }
    let mut dev = device_with(chain, instrument, fixed)?;
    let grid = instrument.voltage_grid();
    let pts = dev.sweep(target, &grid, direction);
    let fixed_powers = (1..=chain.len())
        .filter(|&s| s != target)
        .map(|s| (s, dev.power(s)))
        .collect();
    Ok(ScanTrace {
        stage: target,
        direction,
        fixed_powers,
        applied_power: pts.iter().map(|p| p.0).collect(),
        intensity: pts.iter().map(|p| p.1).collect(),
    })
}

/// Peak-to-peak value of an inner sweep, after checking that the sweep
/// shows both an interior maximum and an interior minimum.
pub fn peak_to_peak(trace: &[(f64, f64)], stage: usize) -> Result<f64> {
    let (lo, hi) = trace
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, x)| {
            (lo.min(x), hi.max(x))
        });
    let u = hi - lo;
    if u > 1e-6 && trace.len() >= 3 {
        let n = trace.len();
        let imax = argmax(trace.iter().map(|p| p.1));
        let imin = argmax(trace.iter().map(|p| -p.1));
        let interior = |i: usize| i > 0 && i < n - 1;
        if !(interior(imax) && interior(imin)) {
            return Err(Error::InsufficientScope { stage });
        }
    }
    Ok(u)
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in it.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Outer stage stepped over the instrument grid; at each step the inner
/// stage is swept over its full range and U_P recorded.
pub fn pairwise_trace(
    chain: &ChainModel,
    instrument: &InstrumentModel,
    outer: usize,
    inner: usize,
    fixed: &[(usize, f64)],
    direction: Direction,
) -> Result<Vec<(f64, f64)>> {
    if outer == inner {
        return Err(Error::param("inner", "outer and inner stage must differ"));
    }
    for s in [outer, inner] {
        if s == 0 || s > chain.len() {
            return Err(Error::param(
                "stage",
                alloc::format!("stage {} outside 1..={}", s, chain.len()),
            ));
        }
    }
    let mut dev = device_with(chain, instrument, fixed)?;
    let grid = instrument.voltage_grid();
    let mut out = Vec::with_capacity(grid.len());
    for &v in &grid {
        let p = dev.set_voltage(outer, v);
        let inner_trace = dev.sweep(inner, &grid, direction);
        out.push((p, peak_to_peak(&inner_trace, inner)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use core::f64::consts::{FRAC_PI_2, PI};

    fn reference() -> ChainModel {
        ChainModel::reference_six()
    }

    #[test]
    fn power_conversion() {
        assert_abs_diff_eq!(
            volts_to_power(10.0, 1.75).unwrap(),
            57.142857,
            epsilon = 1e-5
        );
        assert_abs_diff_eq!(
            volts_to_power(5.0, 1.75).unwrap(),
            14.285714,
            epsilon = 1e-5
        );
        assert_eq!(volts_to_power(0.0, 3.0).unwrap(), 0.0);
        assert!(volts_to_power(1.0, 0.0).is_err());
    }

    #[test]
    fn stage_phase_reaches_pi_at_table_pmin() {
        let t = TopsGroundTruth::new(1, 0.1427, 0.4863, 1.75);
        assert_abs_diff_eq!(stage_phase(&t, 18.6075, 20.0), PI, epsilon = 1e-3);
        assert_eq!(stage_phase(&t, 0.0, 20.0), 0.4863);
        let mut t = t;
        t.dtheta_temp_coeff = -0.003;
        assert_abs_diff_eq!(stage_phase(&t, 0.0, 30.0), 0.4863 - 0.03, epsilon = 1e-15);
    }

    #[test]
    fn grid_has_thousand_points_and_fine_resolution() {
        let ins = InstrumentModel::default();
        let g = ins.voltage_grid();
        assert_eq!(g.len(), 1000);
        assert_abs_diff_eq!(g[999], 10.0, epsilon = 1e-12);
        // Phase increment of the last step for k = 0.1477, R = 1.75 kΩ.
        let dp = (g[999] * g[999] - g[998] * g[998]) / 1.75;
        assert!(0.1477 * dp <= 1.7e-2);
    }

    #[test]
    fn one_stage_output() {
        let c = ChainModel::ideal(alloc::vec![TopsGroundTruth::new(1, 0.15, 0.0, 1.0)]);
        let p = PI / 0.15;
        let (_, i4) = simulate_output(&c, &[p], Direction::Forward).unwrap();
        assert_abs_diff_eq!(i4, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_stage_quadrature_sweep() {
        let c = ChainModel::ideal(alloc::vec![
            TopsGroundTruth::new(1, 0.14, 0.3, 1.75),
            TopsGroundTruth::new(2, 0.15, -0.2, 1.75),
        ]);
        let p2 = (FRAC_PI_2 + 0.2) / 0.15;
        for i in 0..40 {
            let p1 = i as f64 * 1.3;
            let (_, i4) = simulate_output(&c, &[p1, p2], Direction::Forward).unwrap();
            let t1 = 0.14 * p1 + 0.3;
            assert_abs_diff_eq!(i4, 0.5 * (1.0 + t1.sin()), epsilon = 1e-12);
        }
    }

    #[test]
    fn pinned_stage_hides_adjacent_upstream_stage() {
        let c = reference();
        let s6 = c.stages[5];
        let p6 = (PI - s6.dtheta) / s6.k;
        let base = [4.0, 9.0, 13.0, 2.0, 0.0, p6];
        let mut first = None;
        for i in 0..30 {
            let mut p = base;
            p[4] = i as f64 * 1.9;
            let (_, i4) = simulate_output(&c, &p, Direction::Forward).unwrap();
            let f = *first.get_or_insert(i4);
            assert_abs_diff_eq!(i4, f, epsilon = 1e-9);
        }
        // Stages further upstream still reach the output.
        let mut p = base;
        p[3] += 5.0;
        let (_, i4) = simulate_output(&c, &p, Direction::Forward).unwrap();
        assert!((i4 - first.unwrap()).abs() > 1e-3);
    }

    #[test]
    fn fast_sweep_matches_matrix_product() {
        let mut c = reference();
        c.mmis[2] = MmiParams {
            eta: 0.47,
            tau: 0.02,
            kappa: 0.01,
        };
        for dir in [Direction::Forward, Direction::Reversed] {
            let ins = InstrumentModel::default();
            let mut dev = SimulatedDevice::new(c.clone(), ins).unwrap();
            for (s, p) in [(1, 3.0), (2, 11.0), (4, 40.0), (6, 0.5)] {
                dev.set_power(s, p);
            }
            let volts: Vec<f64> = (0..50).map(|i| 0.2 * i as f64).collect();
            let fast = dev.sweep(3, &volts, dir);
            let mut powers = dev.powers().to_vec();
            for (&(p, x), &v) in fast.iter().zip(&volts) {
                let vq = ins.quantize(v);
                assert_abs_diff_eq!(p, vq * vq / 1.75, epsilon = 1e-12);
                powers[2] = p;
                let (_, i4) = simulate_output(&c, &powers, dir).unwrap();
                assert_abs_diff_eq!(x, i4, epsilon = 1e-12);
                dev.set_power(3, p);
                assert_abs_diff_eq!(dev.read(dir), i4, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reversed_is_transpose() {
        let c = reference();
        let p = [1.0, 5.0, 9.0, 13.0, 17.0, 21.0];
        let f = c.transfer(&p, Direction::Forward).unwrap();
        let r = c.transfer(&p, Direction::Reversed).unwrap();
        assert!(f.transpose().max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn deterministic_noise() {
        let mut ins = InstrumentModel::default();
        ins.noise_sigma = 0.01;
        ins.rng_seed = 7;
        let a = scan_stage(&reference(), &ins, 2, &[], Direction::Forward).unwrap();
        let b = scan_stage(&reference(), &ins, 2, &[], Direction::Forward).unwrap();
        assert_eq!(a, b);
        assert!(a.intensity.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(a.applied_power.windows(2).all(|w| w[1] > w[0]));
        ins.rng_seed = 8;
        let c = scan_stage(&reference(), &ins, 2, &[], Direction::Forward).unwrap();
        assert_ne!(a.intensity, c.intensity);
    }

    #[test]
    fn one_stage_scan_follows_cosine() {
        let c = ChainModel::ideal(alloc::vec![TopsGroundTruth::new(1, 0.15, -0.3, 1.75)]);
        let t = scan_stage(&c, &InstrumentModel::default(), 1, &[], Direction::Forward).unwrap();
        assert_eq!(t.applied_power.len(), 1000);
        for (p, x) in t.applied_power.iter().zip(&t.intensity) {
            assert_abs_diff_eq!(*x, (1.0 - (0.15 * p - 0.3).cos()) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_stage_peak_to_peak_is_abs_sine() {
        let c = ChainModel::ideal(alloc::vec![
            TopsGroundTruth::new(1, 0.14, 0.3, 1.75),
            TopsGroundTruth::new(2, 0.15, -0.2, 1.75),
        ]);
        let mut ins = InstrumentModel::default();
        ins.v_step = 0.1;
        let tr = pairwise_trace(&c, &ins, 2, 1, &[], Direction::Forward).unwrap();
        for (p, u) in tr {
            // Coarse inner grid: the sampled extremes sit within one step.
            assert_abs_diff_eq!(u, (0.15 * p - 0.2).sin().abs(), epsilon = 2e-2);
        }
    }

    #[test]
    fn short_inner_scan_is_rejected() {
        let c = ChainModel::ideal(alloc::vec![
            TopsGroundTruth::new(1, 0.14, 0.3, 1.75),
            TopsGroundTruth::new(2, 0.15, -0.2, 1.75),
        ]);
        let mut ins = InstrumentModel::default();
        ins.v_max = 3.0;
        ins.v_step = 0.05;
        let e = pairwise_trace(&c, &ins, 2, 1, &[], Direction::Forward).unwrap_err();
        assert_eq!(e, Error::InsufficientScope { stage: 1 });
    }
}
