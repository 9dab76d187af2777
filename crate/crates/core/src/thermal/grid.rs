//! Rectilinear cell-centred grids whose faces hit every material edge.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Cell spacing: `h_fine` inside the zone around heater and waveguide,
/// growing linearly with distance (i.e. geometrically per cell) up to
/// `h_max`. Lengths in µm.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct GridSpec {
    pub h_fine: f64,
    pub h_max: f64,
    /// Ratio between neighbouring cells in the coarsening zone.
    pub growth: f64,
    /// Fine zone extends this far beyond the heater/waveguide box.
    pub fine_margin: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            h_fine: 0.05,
            h_max: 1.0,
            growth: 1.15,
            fine_margin: 3.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_fine > 0.0 && self.h_max >= self.h_fine) {
            return Err(Error::param("h_fine", "need 0 < h_fine <= h_max"));
        }
        if !(self.growth >= 1.0 && self.growth < 2.0) {
            return Err(Error::param("growth", "need 1 <= growth < 2"));
        }
        if !(self.fine_margin >= 0.0) {
            return Err(Error::param("fine_margin", "must be >= 0"));
        }
        Ok(())
    }

    /// Every spacing halved.
    pub fn refined(&self) -> Self {
        Self {
            h_fine: self.h_fine / 2.0,
            h_max: self.h_max / 2.0,
            growth: 1.0 + (self.growth - 1.0) / 2.0,
            fine_margin: self.fine_margin,
        }
    }

    fn target(&self, dist: f64) -> f64 {
        (self.h_fine + (self.growth - 1.0) * dist.max(0.0)).min(self.h_max)
    }
}

/// Faces from `lo` to `hi` passing through every breakpoint; spacing
/// follows `spec` with the fine zone `[fine.0, fine.1]`.
pub(crate) fn faces(
    lo: f64,
    hi: f64,
    breaks: &[f64],
    fine: (f64, f64),
    spec: &GridSpec,
) -> Vec<f64> {
    let mut pts: Vec<f64> = breaks
        .iter()
        .cloned()
        .filter(|&b| b > lo && b < hi)
        .collect();
    pts.push(lo);
    pts.push(hi);
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

    let dist = |s: f64| {
        if s < fine.0 {
            fine.0 - s
        } else if s > fine.1 {
            s - fine.1
        } else {
            0.0
        }
    };
    let mut out = alloc::vec![lo];
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut s = a;
        while b - s > 1e-12 {
            let h = spec
                .target(dist(s))
                .min(spec.target(dist(s + 0.5 * spec.target(dist(s)))));
            let r = b - s;
            if r <= h {
                s = b;
            } else if r <= 1.5 * h {
                s += r / 2.0;
                out.push(s);
                s = b;
            } else {
                s += h;
            }
            out.push(s);
        }
    }
    out
}

/// Faces on `[-half, half]`, mirror-symmetric about 0.
pub(crate) fn symmetric_faces(half: f64, breaks: &[f64], fine: f64, spec: &GridSpec) -> Vec<f64> {
    let pos: Vec<f64> = breaks.iter().map(|b| b.abs()).collect();
    let right = faces(0.0, half, &pos, (0.0, fine), spec);
    let mut out: Vec<f64> = right.iter().rev().map(|x| -x).collect();
    out.pop();
    out.extend(right);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_hit_breakpoints_and_grow() {
        let s = GridSpec::default();
        let f = faces(-12.0, 2.0, &[-2.0, 0.0, 0.22, 1.07, 1.17], (-3.0, 2.0), &s);
        for b in [-12.0, -2.0, 0.0, 0.22, 1.07, 1.17, 2.0] {
            assert!(f.iter().any(|x| (x - b).abs() < 1e-12), "{b} missing");
        }
        let widths: Vec<f64> = f.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(widths.iter().all(|&w| w > 0.0 && w <= s.h_max * 1.0001));
        assert!(widths[0] > 0.5, "far cells should be coarse: {}", widths[0]);
        let fine: Vec<f64> = f
            .windows(2)
            .filter(|w| w[0] >= -3.0)
            .map(|w| w[1] - w[0])
            .collect();
        assert!(fine.iter().all(|&w| w <= s.h_fine + 1e-12));
    }

    #[test]
    fn symmetric_axis() {
        let f = symmetric_faces(25.0, &[0.225, 1.25], 4.25, &GridSpec::default());
        let n = f.len();
        for i in 0..n {
            assert_eq!(f[i], -f[n - 1 - i]);
        }
        assert!(f.iter().any(|&x| x == 0.225) && f.iter().any(|&x| x == -1.25));
    }
}
