//! Steady 2D heat conduction in the cross-section of a thermo-optic phase
//! shifter, and the phase shift that follows from the waveguide
//! temperature.
//!
//! Coordinates are in µm with x = 0 on the heater axis and y = 0 at the
//! bottom of the waveguide (top of the buried oxide). Cells are assigned
//! the material at their centre; the grid has a face on every material
//! edge. The unknown is the rise over the boundary temperature, so the
//! problem is linear in power.

mod grid;
mod pcg;

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
pub use grid::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub name: &'static str,
    /// kg/m³
    pub rho: f64,
    /// J/(kg·K)
    pub cp: f64,
    /// W/(m·K)
    pub k_hc: f64,
}

pub const SILICON: Material = Material {
    name: "Si",
    rho: 2330.0,
    cp: 711.0,
    k_hc: 148.0,
};
pub const SILICA: Material = Material {
    name: "SiO2",
    rho: 2203.0,
    cp: 709.0,
    k_hc: 1.38,
};
pub const TITANIUM_NITRIDE: Material = Material {
    name: "TiN",
    rho: 5430.0,
    cp: 604.45,
    k_hc: 67.7,
};
pub const AIR: Material = Material {
    name: "air",
    rho: 1.17,
    cp: 1006.43,
    k_hc: 0.026,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub material: Material,
    pub rect: Rect,
}

/// Layer stack and boundary conditions. Later regions override earlier
/// ones where they overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    pub regions: Vec<Region>,
    pub waveguide: Rect,
    pub heater: Rect,
    /// Domain spans x ∈ [−half_width, half_width] (µm).
    pub half_width: f64,
    /// µm
    pub y_bottom: f64,
    pub y_top: f64,
    /// Heater length along the waveguide (µm).
    pub heater_length: f64,
    /// Convection coefficient at the top surface (W/(m²·K)).
    pub h_air: f64,
    /// Bottom and ambient temperature (K).
    pub t_bc: f64,
    pub grid: GridSpec,
    pub tol: f64,
    pub max_iter: usize,
}

/// Dimensions of the reference layer stack (µm).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Geometry {
    pub h_box: f64,
    pub h_clad: f64,
    /// Modelled substrate depth below the oxide.
    pub h_substrate: f64,
    pub w_wg: f64,
    pub h_wg: f64,
    pub w_mh: f64,
    pub h_mh: f64,
    /// Gap between waveguide top and heater bottom.
    pub h_int: f64,
    pub half_width: f64,
    pub l_mh: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            h_box: 2.0,
            h_clad: 2.0,
            h_substrate: 10.0,
            w_wg: 0.45,
            h_wg: 0.22,
            w_mh: 2.5,
            h_mh: 0.1,
            h_int: 0.85,
            half_width: 25.0,
            l_mh: 390.0,
        }
    }
}

impl CrossSection {
    pub fn new(g: &Geometry) -> Result<Self> {
        let dims = [
            ("h_box", g.h_box),
            ("h_clad", g.h_clad),
            ("h_substrate", g.h_substrate),
            ("w_wg", g.w_wg),
            ("h_wg", g.h_wg),
            ("w_mh", g.w_mh),
            ("h_mh", g.h_mh),
            ("h_int", g.h_int),
            ("half_width", g.half_width),
            ("l_mh", g.l_mh),
        ];
        for (name, v) in dims {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, alloc::format!("{} µm must be > 0", v)));
            }
        }
        if g.h_wg + g.h_int + g.h_mh > g.h_clad {
            return Err(Error::param(
                "h_clad",
                "heater does not fit inside the cladding",
            ));
        }
        if g.w_mh.max(g.w_wg) / 2.0 >= g.half_width {
            return Err(Error::param("half_width", "narrower than the heater"));
        }
        let hw = g.half_width;
        let y_bottom = -g.h_box - g.h_substrate;
        let waveguide = Rect {
            x0: -g.w_wg / 2.0,
            x1: g.w_wg / 2.0,
            y0: 0.0,
            y1: g.h_wg,
        };
        let hy = g.h_wg + g.h_int;
        let heater = Rect {
            x0: -g.w_mh / 2.0,
            x1: g.w_mh / 2.0,
            y0: hy,
            y1: hy + g.h_mh,
        };
        let layer = |material, y0, y1| Region {
            material,
            rect: Rect {
                x0: -hw,
                x1: hw,
                y0,
                y1,
            },
        };
        let regions = alloc::vec![
            layer(SILICON, y_bottom, -g.h_box),
            layer(SILICA, -g.h_box, 0.0),
            layer(SILICA, 0.0, g.h_clad),
            Region {
                material: SILICON,
                rect: waveguide
            },
            Region {
                material: TITANIUM_NITRIDE,
                rect: heater
            },
        ];
        Ok(Self {
            regions,
            waveguide,
            heater,
            half_width: hw,
            y_bottom,
            y_top: g.h_clad,
            heater_length: g.l_mh,
            h_air: 10.0,
            t_bc: 300.0,
            grid: GridSpec::default(),
            tol: 1e-8,
            max_iter: 200_000,
        })
    }

    pub fn reference() -> Self {
        Self::new(&Geometry::default()).expect("reference geometry is valid")
    }

    fn material_at(&self, x: f64, y: f64) -> Material {
        self.regions
            .iter()
            .rev()
            .find(|r| r.rect.contains(x, y))
            .map_or(SILICA, |r| r.material)
    }

    fn breaks_x(&self) -> Vec<f64> {
        let mut b = alloc::vec![];
        for r in &self.regions {
            b.extend([r.rect.x0, r.rect.x1]);
        }
        b
    }

    fn breaks_y(&self) -> Vec<f64> {
        let mut b = alloc::vec![];
        for r in &self.regions {
            b.extend([r.rect.y0, r.rect.y1]);
        }
        b
    }
}

/// Solved cross-section temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureField {
    /// Cell centres (µm).
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Cell widths (µm).
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    /// K, row-major: `t[j * x.len() + i]`.
    pub t: Vec<f64>,
    pub t_bc: f64,
    /// Heater power (mW).
    pub power: f64,
    /// Heat leaving through the bottom and top per unit length (W/m).
    pub flux_out: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl TemperatureField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.t[j * self.x.len() + i]
    }

    /// Area-weighted mean over the cells whose centres lie in `r`.
    pub fn mean_over(&self, r: &Rect) -> f64 {
        let (mut s, mut a) = (0.0, 0.0);
        for (j, &y) in self.y.iter().enumerate() {
            for (i, &x) in self.x.iter().enumerate() {
                if r.contains(x, y) {
                    let w = self.dx[i] * self.dy[j];
                    s += w * (self.at(i, j) - self.t_bc);
                    a += w;
                }
            }
        }
        if a > 0.0 {
            self.t_bc + s / a
        } else {
            f64::NAN
        }
    }

    /// (min, max) over the cells whose centres lie in `r`.
    pub fn range_over(&self, r: &Rect) -> (f64, f64) {
        let mut out = (f64::INFINITY, f64::NEG_INFINITY);
        for (j, &y) in self.y.iter().enumerate() {
            for (i, &x) in self.x.iter().enumerate() {
                if r.contains(x, y) {
                    let t = self.at(i, j);
                    out = (out.0.min(t), out.1.max(t));
                }
            }
        }
        out
    }

    fn row_of(&self, y: f64) -> usize {
        crate::device::argmax(self.y.iter().map(|&c| -(c - y).abs()))
    }

    fn column_of(&self, x: f64) -> usize {
        crate::device::argmax(self.x.iter().map(|&c| -(c - x).abs()))
    }

    /// Temperature along x in the row nearest `y`.
    pub fn profile_x(&self, y: f64) -> Vec<(f64, f64)> {
        let j = self.row_of(y);
        self.x
            .iter()
            .enumerate()
            .map(|(i, &x)| (x, self.at(i, j)))
            .collect()
    }

    /// Temperature along y in the column nearest `x`.
    pub fn profile_y(&self, x: f64) -> Vec<(f64, f64)> {
        let i = self.column_of(x);
        self.y
            .iter()
            .enumerate()
            .map(|(j, &y)| (y, self.at(i, j)))
            .collect()
    }

    /// Linear interpolation along x in the row nearest `y`.
    pub fn sample_x(&self, x: f64, y: f64) -> f64 {
        let j = self.row_of(y);
        let xs = &self.x;
        if x <= xs[0] {
            return self.at(0, j);
        }
        if x >= xs[xs.len() - 1] {
            return self.at(xs.len() - 1, j);
        }
        let i = xs.partition_point(|&c| c <= x) - 1;
        let f = (x - xs[i]) / (xs[i + 1] - xs[i]);
        self.at(i, j) * (1.0 - f) + self.at(i + 1, j) * f
    }
}

/// Solve −∇·(k∇T) = Q with the heater dissipating `power` mW.
pub fn solve_steady(cs: &CrossSection, power: f64) -> Result<TemperatureField> {
    if !(power >= 0.0 && power.is_finite()) {
        return Err(Error::param(
            "power",
            alloc::format!("{} mW must be >= 0", power),
        ));
    }
    cs.grid.validate()?;
    if !(cs.h_air >= 0.0) {
        return Err(Error::param("h_air", "must be >= 0"));
    }
    let fine_x = cs.heater.x1.max(cs.waveguide.x1) + cs.grid.fine_margin;
    let fx = grid::symmetric_faces(cs.half_width, &cs.breaks_x(), fine_x, &cs.grid);
    let fine_y = (
        cs.waveguide.y0 - cs.grid.fine_margin,
        cs.heater.y1 + cs.grid.fine_margin,
    );
    let fy = grid::faces(cs.y_bottom, cs.y_top, &cs.breaks_y(), fine_y, &cs.grid);

    let centres = |f: &[f64]| -> (Vec<f64>, Vec<f64>) {
        f.windows(2)
            .map(|w| (0.5 * (w[0] + w[1]), w[1] - w[0]))
            .unzip()
    };
    let (x, dx) = centres(&fx);
    let (y, dy) = centres(&fy);
    let (nx, ny) = (x.len(), y.len());
    let n = nx * ny;

    // SI units from here: metres, W/m per unit heater length.
    const UM: f64 = 1e-6;
    let kc: Vec<f64> = (0..n)
        .map(|p| cs.material_at(x[p % nx], y[p / nx]).k_hc)
        .collect();
    let mut diag = alloc::vec![0.0; n];
    let mut east = alloc::vec![0.0; n];
    let mut north = alloc::vec![0.0; n];
    // Conductance between two cell centres through the shared face.
    let series =
        |k1: f64, d1: f64, k2: f64, d2: f64, area: f64| area / (0.5 * d1 / k1 + 0.5 * d2 / k2);
    for j in 0..ny {
        for i in 0..nx {
            let p = j * nx + i;
            if i + 1 < nx {
                let g = series(kc[p], dx[i] * UM, kc[p + 1], dx[i + 1] * UM, dy[j] * UM);
                east[p] = g;
                diag[p] += g;
                diag[p + 1] += g;
            }
            if j + 1 < ny {
                let g = series(kc[p], dy[j] * UM, kc[p + nx], dy[j + 1] * UM, dx[i] * UM);
                north[p] = g;
                diag[p] += g;
                diag[p + nx] += g;
            }
        }
    }
    let mut g_bottom = alloc::vec![0.0; nx];
    let mut g_top = alloc::vec![0.0; nx];
    for i in 0..nx {
        let a = dx[i] * UM;
        g_bottom[i] = kc[i] * a / (0.5 * dy[0] * UM);
        diag[i] += g_bottom[i];
        let p = (ny - 1) * nx + i;
        if cs.h_air > 0.0 {
            g_top[i] = a / (1.0 / cs.h_air + 0.5 * dy[ny - 1] * UM / kc[p]);
            diag[p] += g_top[i];
        }
    }

    let q =
        power * 1e-3 / (cs.heater_length * UM * cs.heater.width() * UM * cs.heater.height() * UM);
    let b: Vec<f64> = (0..n)
        .map(|p| {
            let (i, j) = (p % nx, p / nx);
            if cs.heater.contains(x[i], y[j]) {
                q * dx[i] * UM * dy[j] * UM
            } else {
                0.0
            }
        })
        .collect();

    let a = pcg::Stencil {
        nx,
        diag,
        east,
        north,
    };
    let (u, iterations, residual) = pcg::solve(&a, &b, cs.tol, cs.max_iter)?;
    let flux_out: f64 = (0..nx)
        .map(|i| g_bottom[i] * u[i] + g_top[i] * u[(ny - 1) * nx + i])
        .sum();
    Ok(TemperatureField {
        x,
        y,
        dx,
        dy,
        t: u.iter().map(|v| cs.t_bc + v).collect(),
        t_bc: cs.t_bc,
        power,
        flux_out,
        iterations,
        residual,
    })
}

/// Mean waveguide temperature (K).
pub fn waveguide_temp(field: &TemperatureField, cs: &CrossSection) -> f64 {
    field.mean_over(&cs.waveguide)
}

pub fn heater_temp(field: &TemperatureField, cs: &CrossSection) -> f64 {
    field.mean_over(&cs.heater)
}

pub const THERMO_OPTIC_RANGE: (f64, f64) = (300.0, 600.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermoOptic {
    /// dn/dT (1/K).
    pub value: f64,
    /// T lies outside the range the polynomial was fitted over.
    pub extrapolated: bool,
}

/// dn/dT of silicon in the C band.
pub fn thermo_optic_coeff(t: f64) -> ThermoOptic {
    ThermoOptic {
        value: 9.45e-5 + 3.47e-7 * t - 1.49e-10 * t * t,
        extrapolated: !(t >= THERMO_OPTIC_RANGE.0 && t <= THERMO_OPTIC_RANGE.1),
    }
}

/// ∫ dn/dT from `t0` to `t1`.
pub fn index_change(t0: f64, t1: f64) -> f64 {
    let f = |t: f64| 9.45e-5 * t + 3.47e-7 / 2.0 * t * t - 1.49e-10 / 3.0 * t * t * t;
    f(t1) - f(t0)
}

/// Optical path settings for turning temperature into phase (µm).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OpticalPath {
    pub wavelength: f64,
    pub wg_length: f64,
}

impl Default for OpticalPath {
    fn default() -> Self {
        Self {
            wavelength: 1.55,
            wg_length: 390.0,
        }
    }
}

/// Phase shift for a waveguide at `t_wg` when the reference is `t_bc`.
pub fn phase_from_temp(t_bc: f64, t_wg: f64, optics: &OpticalPath) -> f64 {
    TAU / optics.wavelength * index_change(t_bc, t_wg) * optics.wg_length
}

pub fn phase_from_power(cs: &CrossSection, power: f64, optics: &OpticalPath) -> Result<f64> {
    let f = solve_steady(cs, power)?;
    Ok(phase_from_temp(cs.t_bc, waveguide_temp(&f, cs), optics))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SweepPoint {
    /// mW
    pub power: f64,
    /// K
    pub t_waveguide: f64,
    pub t_heater: f64,
    /// rad
    pub theta: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ThermalSweep {
    pub points: Vec<SweepPoint>,
    /// Least-squares dθ/dP over the sweep (rad/mW).
    pub slope: f64,
    /// Power for a π shift, from the fitted T(P) line (mW).
    pub pi_power: f64,
    /// Coefficient of determination of the T_wg(P) line.
    pub r2_temperature: f64,
    /// K/mW
    pub temp_slope: f64,
}

fn line_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let k = sxy / sxx;
    let r2 = if syy > 0.0 {
        sxy * sxy / (sxx * syy)
    } else {
        1.0
    };
    (k, my - k * mx, r2)
}

pub const DEFAULT_SWEEP: [f64; 7] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0];

pub fn sweep(cs: &CrossSection, powers: &[f64], optics: &OpticalPath) -> Result<ThermalSweep> {
    if powers.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: powers.len(),
        });
    }
    let mut points = Vec::with_capacity(powers.len());
    for &p in powers {
        let f = solve_steady(cs, p)?;
        let t_waveguide = waveguide_temp(&f, cs);
        points.push(SweepPoint {
            power: p,
            t_waveguide,
            t_heater: heater_temp(&f, cs),
            theta: phase_from_temp(cs.t_bc, t_waveguide, optics),
            extrapolated: thermo_optic_coeff(t_waveguide).extrapolated,
        });
    }
    let (temp_slope, t0, r2_temperature) = line_fit(
        &points
            .iter()
            .map(|p| (p.power, p.t_waveguide))
            .collect::<Vec<_>>(),
    );
    let (slope, _, _) = line_fit(
        &points
            .iter()
            .map(|p| (p.power, p.theta))
            .collect::<Vec<_>>(),
    );
    if !(temp_slope > 0.0) {
        return Err(Error::param("powers", "sweep shows no heating"));
    }
    // θ(P) on the fitted line is increasing; bisect for π.
    let theta = |p: f64| phase_from_temp(cs.t_bc, t0 + temp_slope * p, optics);
    let (mut lo, mut hi) = (0.0, 1.0);
    while theta(hi) < PI {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::param("powers", "no π shift within 1e6 mW"));
        }
    }
    for _ in 0..100 {
        let m = 0.5 * (lo + hi);
        if theta(m) < PI {
            lo = m;
        } else {
            hi = m;
        }
    }
    Ok(ThermalSweep {
        points,
        slope,
        pi_power: 0.5 * (lo + hi),
        r2_temperature,
        temp_slope,
    })
}

/// Rise (K) at waveguide mid-height, `offset` µm from the heater axis.
pub fn crosstalk_at(field: &TemperatureField, cs: &CrossSection, offset: f64) -> Result<f64> {
    if !(offset.abs() <= cs.half_width) {
        return Err(Error::param(
            "offset",
            alloc::format!("{} µm outside ±{} µm", offset, cs.half_width),
        ));
    }
    let y = 0.5 * (cs.waveguide.y0 + cs.waveguide.y1);
    Ok(field.sample_x(offset, y) - cs.t_bc)
}

/// Crosstalk rise at `offset` as a fraction of the self-heating rise,
/// solved on a domain wide enough to hold the offset with the reference
/// margin beyond it.
pub fn crosstalk_fraction(g: &Geometry, grid: GridSpec, power: f64, offset: f64) -> Result<f64> {
    let wide = Geometry {
        half_width: g.half_width.max(offset.abs() + g.half_width),
        ..*g
    };
    let mut cs = CrossSection::new(&wide)?;
    cs.grid = grid;
    let f = solve_steady(&cs, power)?;
    let own = crosstalk_at(&f, &cs, 0.0)?;
    Ok(crosstalk_at(&f, &cs, offset)? / own)
}

#[cfg(test)]
mod tests;
