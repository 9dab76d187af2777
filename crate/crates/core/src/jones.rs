//! 2×2 complex transfer-matrix algebra for MMI couplers, phase shifters and
//! Mach-Zehnder cells.
//!
//! Vectors are columns `[up, down]`; port 1/3 is the upper guide and port
//! 2/4 the lower one. Matrices act from the left, so a chain listed in
//! propagation order is multiplied right-to-left (see [`compose`]).

use core::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI, TAU};
use core::ops::Mul;

use num_complex::Complex64;
// Unused whenever std is linked into the build graph.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

pub type C64 = Complex64;

const I: C64 = C64::new(0.0, 1.0);
const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JonesVector {
    pub up: C64,
    pub down: C64,
}

impl JonesVector {
    pub const fn new(up: C64, down: C64) -> Self {
        Self { up, down }
    }

    /// Light injected into the lower input (port 2).
    pub const fn port2() -> Self {
        Self::new(ZERO, ONE)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.up.norm_sqr() + self.down.norm_sqr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferMatrix {
    pub m11: C64,
    pub m12: C64,
    pub m21: C64,
    pub m22: C64,
}

impl TransferMatrix {
    pub const fn new(m11: C64, m12: C64, m21: C64, m22: C64) -> Self {
        Self { m11, m12, m21, m22 }
    }

    pub const fn identity() -> Self {
        Self::new(ONE, ZERO, ZERO, ONE)
    }

    pub const fn swap() -> Self {
        Self::new(ZERO, ONE, ONE, ZERO)
    }

    pub fn scale(&self, s: C64) -> Self {
        Self::new(self.m11 * s, self.m12 * s, self.m21 * s, self.m22 * s)
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.m11, self.m21, self.m12, self.m22)
    }

    pub fn adjoint(&self) -> Self {
        Self::new(
            self.m11.conj(),
            self.m21.conj(),
            self.m12.conj(),
            self.m22.conj(),
        )
    }

    pub fn det(&self) -> C64 {
        self.m11 * self.m22 - self.m12 * self.m21
    }

    pub fn apply(&self, v: JonesVector) -> JonesVector {
        JonesVector::new(
            self.m11 * v.up + self.m12 * v.down,
            self.m21 * v.up + self.m22 * v.down,
        )
    }

    pub fn elements(&self) -> [C64; 4] {
        [self.m11, self.m12, self.m21, self.m22]
    }

    /// Largest element-wise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.elements()
            .iter()
            .zip(other.elements().iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Both singular values of the matrix, largest first.
    pub fn singular_values(&self) -> (f64, f64) {
        // Eigenvalues of M†M from its trace and determinant.
        let fro = self.elements().iter().map(|z| z.norm_sqr()).sum::<f64>();
        let d = self.det().norm_sqr();
        let disc = (fro * fro - 4.0 * d).max(0.0).sqrt();
        let hi = 0.5 * (fro + disc);
        let lo = (0.5 * (fro - disc)).max(0.0);
        (hi.sqrt(), lo.sqrt())
    }
}

impl Mul for TransferMatrix {
    type Output = TransferMatrix;

    fn mul(self, b: TransferMatrix) -> TransferMatrix {
        TransferMatrix::new(
            self.m11 * b.m11 + self.m12 * b.m21,
            self.m11 * b.m12 + self.m12 * b.m22,
            self.m21 * b.m11 + self.m22 * b.m21,
            self.m21 * b.m12 + self.m22 * b.m22,
        )
    }
}

impl Mul<JonesVector> for TransferMatrix {
    type Output = JonesVector;

    fn mul(self, v: JonesVector) -> JonesVector {
        self.apply(v)
    }
}

/// Splitting ratio and branch attenuation of a 2×2 MMI coupler.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MmiParams {
    /// Bar-port power fraction, in (0, 1).
    pub eta: f64,
    /// Upper-branch attenuation constant (nepers).
    pub tau: f64,
    /// Lower-branch attenuation constant (nepers).
    pub kappa: f64,
}

impl MmiParams {
    pub const IDEAL: MmiParams = MmiParams {
        eta: 0.5,
        tau: 0.0,
        kappa: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::param(
                "eta",
                alloc::format!("{} not in (0, 1)", self.eta),
            ));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::param(
                "tau",
                alloc::format!("{} is negative", self.tau),
            ));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::param(
                "kappa",
                alloc::format!("{} is negative", self.kappa),
            ));
        }
        Ok(())
    }

    pub fn is_lossless(&self) -> bool {
        self.tau == 0.0 && self.kappa == 0.0
    }
}

impl Default for MmiParams {
    fn default() -> Self {
        Self::IDEAL
    }
}

pub fn mmi(p: MmiParams) -> Result<TransferMatrix> {
    p.validate()?;
    let a = (-0.5 * p.tau).exp();
    let b = (-0.5 * p.kappa).exp();
    let s = p.eta.sqrt();
    let c = (1.0 - p.eta).sqrt();
    Ok(TransferMatrix::new(
        C64::new(a * s, 0.0),
        I * (a * c),
        I * (b * c),
        C64::new(b * s, 0.0),
    ))
}

/// The balanced lossless coupler (1/√2)[[1, i], [i, 1]].
pub fn mmi_ideal() -> TransferMatrix {
    let h = C64::new(FRAC_1_SQRT_2, 0.0);
    TransferMatrix::new(h, I * FRAC_1_SQRT_2, I * FRAC_1_SQRT_2, h)
}

/// Phase delay `theta` on the upper arm.
pub fn phase_shifter(theta: f64) -> TransferMatrix {
    TransferMatrix::new(C64::cis(theta), ZERO, ZERO, ONE)
}

/// Ideal MZI: MMI · ps(θ) · MMI.
pub fn mzi(theta: f64) -> TransferMatrix {
    let m = mmi_ideal();
    m * phase_shifter(theta) * m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equivalent {
    /// θ ≡ 0: swap up to a global phase.
    Cross,
    /// θ ≡ π: identity up to a global phase.
    Direct,
    /// θ ≡ π/2: an MMI with quadrature delays on both sides.
    QuadPlus,
    /// θ ≡ 3π/2.
    QuadMinus,
    Generic,
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = crate::rem_euclid(a - b, TAU);
    d.min(TAU - d)
}

pub fn classify_equivalent(theta: f64, tol: f64) -> Equivalent {
    let t = crate::rem_euclid(theta, TAU);
    let table = [
        (0.0, Equivalent::Cross),
        (FRAC_PI_2, Equivalent::QuadPlus),
        (PI, Equivalent::Direct),
        (3.0 * FRAC_PI_2, Equivalent::QuadMinus),
    ];
    table
        .iter()
        .find(|(c, _)| circular_distance(t, *c) <= tol)
        .map_or(Equivalent::Generic, |(_, e)| *e)
}

/// Product of elements listed in propagation order (first element acts
/// first).
pub fn compose(stages: &[TransferMatrix]) -> Result<TransferMatrix> {
    let (first, rest) = stages
        .split_first()
        .ok_or_else(|| Error::param("stages", "empty element list"))?;
    Ok(rest.iter().fold(*first, |acc, m| *m * acc))
}

/// Output intensities `(|up|², |down|²)`, i.e. ports 3 and 4.
pub fn intensities(v: JonesVector) -> (f64, f64) {
    (v.up.norm_sqr(), v.down.norm_sqr())
}
