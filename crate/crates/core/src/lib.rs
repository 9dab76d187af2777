//! Cascaded phase-shifter chains: transfer-matrix models, a simulated bench,
//! the pairwise-scan calibration, fidelity and coupler-imbalance analysis,
//! and a 2D steady-state thermal model of a thermo-optic phase shifter.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod calibration;
pub mod device;
pub mod error;
pub mod jones;
pub mod thermal;

pub use error::{Error, Result};

/// Euclidean remainder; `f64::rem_euclid` needs std.
pub(crate) fn rem_euclid(x: f64, m: f64) -> f64 {
    let r = x % m;
    if r < 0.0 {
        r + m
    } else {
        r
    }
}
