//! Absolute-intensity probes that tell θ(P_min) = 0 from θ(P_min) = π for
//! interior stages when |Δθ| < π/2 cannot be assumed.
//!
//! Every stage sits at a power where θ ∈ {0, π}; a few neighbours get an
//! extra probe phase. The port-4 intensity then lands near one of a small
//! set of constants that depends only on the state of the stage under test.

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use super::{CalibrationConfig, ThetaAtPmin};
use crate::device::{Bench, Direction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProbeSetup {
    /// Even chain; forward for even stages, reversed for odd ones.
    EvenChain,
    /// Odd chain, even stage.
    OddChainEvenStage,
    /// Odd chain, odd stage; stage 1 carries an extra π/2.
    OddChainOddStage,
}

impl ProbeSetup {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EvenChain => "even_chain",
            Self::OddChainEvenStage => "odd_chain_even_stage",
            Self::OddChainOddStage => "odd_chain_odd_stage",
        }
    }

    /// Expected intensities for θ(P_min) = 0 and θ(P_min) = π at a
    /// 0.4π probe.
    pub fn levels(self) -> (&'static [f64], &'static [f64]) {
        match self {
            Self::EvenChain => (&[0.5], &[0.7795, 0.2205]),
            // The stage under test closes a direct/cross pair with no probe
            // between them, so the zero state is fully dark or fully bright.
            Self::OddChainEvenStage => (&[0.0, 1.0], &[0.9045, 0.0955]),
            Self::OddChainOddStage => (&[0.9755, 0.0245], &[0.8847, 0.1153]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Discrimination {
    pub stage: usize,
    pub setup: ProbeSetup,
    pub direction: Direction,
    pub probes: Vec<usize>,
    pub intensity: f64,
    pub class: ThetaAtPmin,
    /// Distance to the nearest expected level.
    pub distance: f64,
}

/// Nearest level within `band`, or `Unresolved`.
pub fn classify(x: f64, setup: ProbeSetup, band: f64) -> (ThetaAtPmin, f64) {
    let (zero, pi) = setup.levels();
    let dz = zero
        .iter()
        .map(|z| (x - z).abs())
        .fold(f64::INFINITY, f64::min);
    let dp = pi
        .iter()
        .map(|z| (x - z).abs())
        .fold(f64::INFINITY, f64::min);
    let (class, d) = if dz <= dp {
        (ThetaAtPmin::Zero, dz)
    } else {
        (ThetaAtPmin::Pi, dp)
    };
    if d <= band {
        (class, d)
    } else {
        (ThetaAtPmin::Unresolved, d)
    }
}

/// Probe interior stage `j`. `set[s-1]` is `(k, P)` for stage `s`, with P a
/// power at which that stage's θ ∈ {0, π}.
pub fn discriminate<B: Bench>(
    b: &mut B,
    j: usize,
    set: &[(f64, f64)],
    cfg: &CalibrationConfig,
) -> Result<Discrimination> {
    let n = set.len();
    if n != b.stage_count() {
        return Err(Error::param("set", "one entry per stage required"));
    }
    if j <= 1 || j >= n {
        return Err(Error::param(
            "stage",
            "discriminators apply to interior stages only",
        ));
    }
    let (setup, direction, probes, quarter): (ProbeSetup, Direction, Vec<usize>, Option<usize>) =
        if n % 2 == 0 {
            if j % 2 == 0 {
                (
                    ProbeSetup::EvenChain,
                    Direction::Forward,
                    alloc::vec![j - 1, j + 1, n],
                    None,
                )
            } else {
                (
                    ProbeSetup::EvenChain,
                    Direction::Reversed,
                    alloc::vec![j - 1, j + 1, 1],
                    None,
                )
            }
        } else if j % 2 == 0 {
            (
                ProbeSetup::OddChainEvenStage,
                Direction::Forward,
                alloc::vec![j - 1, j + 1],
                None,
            )
        } else {
            (
                ProbeSetup::OddChainOddStage,
                Direction::Forward,
                alloc::vec![j - 1, j + 1, n],
                Some(1),
            )
        };
    let mut probes = probes;
    probes.sort_unstable();
    probes.dedup();

    for s in 1..=n {
        let (k, p0) = set[s - 1];
        let mut p = p0;
        if probes.contains(&s) {
            p += cfg.probe_phase / k;
        }
        if quarter == Some(s) {
            p += FRAC_PI_2 / k;
        }
        b.set_power(s, p);
    }
    let sum: f64 = (0..cfg.probe_reads).map(|_| b.read(direction)).sum();
    let intensity = sum / cfg.probe_reads as f64;
    for s in 1..=n {
        b.set_power(s, 0.0);
    }
    let (class, distance) = classify(intensity, setup, cfg.band);
    Ok(Discrimination {
        stage: j,
        setup,
        direction,
        probes,
        intensity,
        class,
        distance,
    })
}
