//! Scenario files: a versioned JSON document describing the chain, the
//! instrument and the options of every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cpscal_core::analysis::{fit_drift, ErGrid, DEFAULT_THRESHOLDS, STAGE1_DTHETA_VS_TEMP};
use cpscal_core::calibration::{CalibrationConfig, Mode};
use cpscal_core::device::{
    ChainModel, Direction, InstrumentModel, TopsGroundTruth, REFERENCE_TEMP_C,
};
use cpscal_core::error::Error;
use cpscal_core::jones::MmiParams;
use cpscal_core::thermal::{Geometry, GridSpec, OpticalPath, DEFAULT_SWEEP};

use crate::{CliError, Result};

pub const SCHEMA: u32 = 1;

/// Output directory used when neither the command line, the scenario nor
/// `CPSCAL_OUT` names one.
pub const DEFAULT_OUT: &str = "cpscal-out";

pub const OUT_ENV: &str = "CPSCAL_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Must be present and equal to [`SCHEMA`].
    #[serde(default)]
    pub schema: Option<u32>,
    pub name: String,
    pub stages: Vec<StageSpec>,
    /// N+1 couplers; ideal when omitted.
    pub mmis: Option<Vec<MmiParams>>,
    /// °C
    pub ambient_temp: f64,
    pub instrument: InstrumentModel,
    pub mode: Mode,
    pub calibration: CalibrationConfig,
    pub simulate: SimulateOptions,
    pub fidelity: FidelityOptions,
    pub thermal: ThermalOptions,
    pub mmi: MmiOptions,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// rad/mW
    pub k: f64,
    /// rad, at the reference temperature
    pub dtheta: f64,
    /// kΩ
    #[serde(default = "default_resistance")]
    pub resistance: f64,
    /// rad/°C
    #[serde(default)]
    pub dtheta_temp_coeff: f64,
}

fn default_resistance() -> f64 {
    1.75
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPower {
    pub stage: usize,
    /// mW
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    /// Stage swept over the instrument grid.
    pub stage: usize,
    pub direction: Direction,
    /// Stages held at a constant power (mW); the rest sit at zero.
    pub fixed: Vec<FixedPower>,
    /// Optional outer stage stepped through `outer_powers` around each sweep.
    pub outer: Option<usize>,
    pub outer_powers: Vec<f64>,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            stage: 1,
            direction: Direction::Forward,
            fixed: Vec::new(),
            outer: None,
            outer_powers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelityOptions {
    pub thresholds: Vec<f64>,
    pub bins: usize,
    pub hist_min: f64,
    pub hist_max: f64,
}

impl Default for FidelityOptions {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            bins: 50,
            hist_min: 0.99,
            hist_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermalOptions {
    pub geometry: Geometry,
    pub grid: GridSpec,
    pub optics: OpticalPath,
    /// Heater powers of the θ(P) sweep (mW).
    pub powers: Vec<f64>,
    /// Power of the exported temperature field (mW).
    pub field_power: f64,
    /// Heater power of the crosstalk run (mW).
    pub crosstalk_power: f64,
    /// Lateral distances from the heater centre (µm).
    pub offsets: Vec<f64>,
}

impl Default for ThermalOptions {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            grid: GridSpec::default(),
            optics: OpticalPath::default(),
            powers: DEFAULT_SWEEP.to_vec(),
            field_power: 20.0,
            crosstalk_power: 60.0,
            offsets: vec![0.0, 2.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmiOptions {
    /// Measured port transmissions of one coupler.
    pub t32: f64,
    pub t42: f64,
    /// Extinction-ratio bounds for the worst-case fidelity search (dB).
    pub er_bounds: Vec<f64>,
    pub search: ErGrid,
    /// ER_port4 contours (dB) traced over `contour_r`.
    pub contour_ers: Vec<f64>,
    pub contour_r: (f64, f64),
    pub contour_points: usize,
    /// Splitting ratios η = 0.5 ± `eta_span` swept at r = 1.
    pub eta_span: f64,
    pub eta_points: usize,
}

impl Default for MmiOptions {
    fn default() -> Self {
        Self {
            t32: 0.4821,
            t42: 0.4819,
            er_bounds: vec![30.0, 40.0, 50.0, 60.0],
            search: ErGrid::default(),
            contour_ers: vec![30.0, 40.0, 50.0, 60.0],
            contour_r: (0.98, 1.02),
            contour_points: 41,
            eta_span: 0.03,
            eta_points: 61,
        }
    }
}

impl Default for Scenario {
    /// The measured six-stage chain with the first stage's fitted drift
    /// coefficient, noiseless default instrument, constrained mode.
    fn default() -> Self {
        let chain = ChainModel::reference_six();
        let drift = fit_drift(&STAGE1_DTHETA_VS_TEMP)
            .map(|d| d.0)
            .unwrap_or(0.0);
        let stages = chain
            .stages
            .iter()
            .map(|s| StageSpec {
                k: s.k,
                dtheta: s.dtheta,
                resistance: s.resistance,
                dtheta_temp_coeff: if s.label == 1 { drift } else { 0.0 },
            })
            .collect();
        Self {
            schema: Some(SCHEMA),
            name: "reference".into(),
            stages,
            mmis: None,
            ambient_temp: REFERENCE_TEMP_C,
            instrument: InstrumentModel::default(),
            mode: Mode::Constrained,
            calibration: CalibrationConfig::default(),
            simulate: SimulateOptions::default(),
            fidelity: FidelityOptions::default(),
            thermal: ThermalOptions::default(),
            mmi: MmiOptions::default(),
            output: None,
        }
    }
}

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Prefix a core parameter error with the scenario path it came from.
fn scoped(prefix: &str, e: Error) -> CliError {
    match e {
        Error::Parameter { name, detail } if name.starts_with(prefix) => {
            config(format!("{name}: {detail}"))
        }
        Error::Parameter { name, detail } => config(format!("{prefix}.{name}: {detail}")),
        other => CliError::Model(other),
    }
}

fn finite(path: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(config(format!("{path}: {x} is not finite")))
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let sc: Scenario = serde_path_to_error::deserialize(&mut *de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                config(inner.to_string())
            } else {
                config(format!("{path}: {inner}"))
            }
        })?;
        de.end().map_err(|e| config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.instrument.rng_seed = seed;
        self
    }

    /// Check every field, naming the first offender by its path.
    pub fn validate(&self) -> Result<()> {
        match self.schema {
            Some(SCHEMA) => {}
            Some(v) => {
                return Err(config(format!(
                    "schema: unsupported version {v}, expected {SCHEMA}"
                )))
            }
            None => return Err(config(format!("schema: missing, expected {SCHEMA}"))),
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config(
                "name: must be non-empty and contain no path separators",
            ));
        }
        let n = self.stages.len();
        if n == 0 {
            return Err(config("stages: at least one stage is required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.k > 0.0 && s.k.is_finite()) {
                return Err(config(format!("stages[{i}].k: {} must be > 0", s.k)));
            }
            finite(&format!("stages[{i}].dtheta"), s.dtheta)?;
            if !(s.resistance > 0.0 && s.resistance.is_finite()) {
                return Err(config(format!(
                    "stages[{i}].resistance: {} must be > 0",
                    s.resistance
                )));
            }
            finite(
                &format!("stages[{i}].dtheta_temp_coeff"),
                s.dtheta_temp_coeff,
            )?;
        }
        if let Some(m) = &self.mmis {
            if m.len() != n + 1 {
                return Err(config(format!(
                    "mmis: expected {} couplers for {n} stages, got {}",
                    n + 1,
                    m.len()
                )));
            }
            for (i, q) in m.iter().enumerate() {
                q.validate().map_err(|e| scoped(&format!("mmis[{i}]"), e))?;
            }
        }
        finite("ambient_temp", self.ambient_temp)?;
        self.instrument
            .validate()
            .map_err(|e| scoped("instrument", e))?;
        self.calibration
            .validate()
            .map_err(|e| scoped("calibration", e))?;
        if self.mode == Mode::NonConstraint && n < 3 {
            return Err(config(format!(
                "mode: nonconstraint needs at least 3 stages, got {n}"
            )));
        }

        let sim = &self.simulate;
        let in_chain = |s: usize| s >= 1 && s <= n;
        if !in_chain(sim.stage) {
            return Err(config(format!(
                "simulate.stage: {} outside 1..={n}",
                sim.stage
            )));
        }
        for (i, f) in sim.fixed.iter().enumerate() {
            if !in_chain(f.stage) || f.stage == sim.stage {
                return Err(config(format!(
                    "simulate.fixed[{i}].stage: {} invalid",
                    f.stage
                )));
            }
            if !(f.power >= 0.0 && f.power.is_finite()) {
                return Err(config(format!(
                    "simulate.fixed[{i}].power: {} must be >= 0",
                    f.power
                )));
            }
        }
        match sim.outer {
            Some(o) if !in_chain(o) || o == sim.stage || sim.fixed.iter().any(|f| f.stage == o) => {
                return Err(config(format!("simulate.outer: {o} invalid")));
            }
            None if !sim.outer_powers.is_empty() => {
                return Err(config("simulate.outer_powers: requires simulate.outer"));
            }
            _ => {}
        }
        for (i, &p) in sim.outer_powers.iter().enumerate() {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(config(format!(
                    "simulate.outer_powers[{i}]: {p} must be >= 0"
                )));
            }
        }

        let fid = &self.fidelity;
        for (i, &t) in fid.thresholds.iter().enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return Err(config(format!(
                    "fidelity.thresholds[{i}]: {t} not in [0, 1]"
                )));
            }
        }
        if fid.bins == 0 {
            return Err(config("fidelity.bins: must be >= 1"));
        }
        if !(fid.hist_min < fid.hist_max && fid.hist_min.is_finite() && fid.hist_max.is_finite()) {
            return Err(config("fidelity.hist_min: need hist_min < hist_max"));
        }

        let th = &self.thermal;
        cpscal_core::thermal::CrossSection::new(&th.geometry)
            .map_err(|e| scoped("thermal.geometry", e))?;
        th.grid.validate().map_err(|e| scoped("thermal.grid", e))?;
        if !(th.optics.wavelength > 0.0 && th.optics.wg_length > 0.0) {
            return Err(config(
                "thermal.optics: wavelength and wg_length must be > 0",
            ));
        }
        for (i, &p) in th.powers.iter().enumerate() {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(config(format!("thermal.powers[{i}]: {p} must be >= 0")));
            }
        }
        if th.powers.len() < 2 {
            return Err(config("thermal.powers: need at least two powers"));
        }
        for (name, p) in [
            ("field_power", th.field_power),
            ("crosstalk_power", th.crosstalk_power),
        ] {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(config(format!("thermal.{name}: {p} must be >= 0")));
            }
        }
        for (i, &d) in th.offsets.iter().enumerate() {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(config(format!("thermal.offsets[{i}]: {d} must be >= 0")));
            }
        }

        let m = &self.mmi;
        for (name, t) in [("t32", m.t32), ("t42", m.t42)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(config(format!("mmi.{name}: {t} must be > 0")));
            }
        }
        for (i, &e) in m.er_bounds.iter().enumerate() {
            if !(e > 0.0) {
                return Err(config(format!("mmi.er_bounds[{i}]: {e} must be > 0")));
            }
        }
        m.search.validate().map_err(|e| scoped("mmi.search", e))?;
        for (i, &e) in m.contour_ers.iter().enumerate() {
            if !(e > 0.0 && e.is_finite()) {
                return Err(config(format!(
                    "mmi.contour_ers[{i}]: {e} must be finite and > 0"
                )));
            }
        }
        if !(m.contour_r.0 > 0.0 && m.contour_r.1 >= m.contour_r.0 && m.contour_points >= 1) {
            return Err(config(
                "mmi.contour_r: need 0 < r_lo <= r_hi and contour_points >= 1",
            ));
        }
        if !(m.eta_span > 0.0 && m.eta_span < 0.5 && m.eta_points >= 1) {
            return Err(config(
                "mmi.eta_span: need 0 < eta_span < 0.5 and eta_points >= 1",
            ));
        }
        Ok(())
    }

    /// The hidden-truth chain the scenario describes.
    pub fn chain(&self) -> ChainModel {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut t = TopsGroundTruth::new(i + 1, s.k, s.dtheta, s.resistance);
                t.dtheta_temp_coeff = s.dtheta_temp_coeff;
                t
            })
            .collect();
        let mut c = ChainModel::ideal(stages);
        if let Some(m) = &self.mmis {
            c.mmis = m.clone();
        }
        c.ambient_temp = self.ambient_temp;
        c
    }
}

/// `--out`, then the scenario's `output`, then `$CPSCAL_OUT`, then
/// [`DEFAULT_OUT`].
pub fn resolve_out(cli: Option<&Path>, scenario: Option<&Path>, env: Option<&str>) -> PathBuf {
    cli.or(scenario)
        .map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}
