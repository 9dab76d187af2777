use super::*;
use approx::assert_abs_diff_eq;

fn field(p: f64) -> (CrossSection, TemperatureField) {
    let cs = CrossSection::reference();
    let f = solve_steady(&cs, p).unwrap();
    (cs, f)
}

#[test]
fn thermo_optic_values() {
    assert_abs_diff_eq!(thermo_optic_coeff(300.0).value, 1.852e-4, epsilon = 1e-7);
    assert_abs_diff_eq!(thermo_optic_coeff(600.0).value, 2.491e-4, epsilon = 1e-7);
    assert!(!thermo_optic_coeff(450.0).extrapolated);
    assert!(thermo_optic_coeff(700.0).extrapolated);
    for t in (300..=600).step_by(10) {
        let t = t as f64;
        assert!(1.49e-10 * t * t < 3.47e-7 * t);
    }
    // The integral's derivative is the coefficient.
    let h = 1e-3;
    assert_abs_diff_eq!(
        index_change(300.0, 400.0 + h) - index_change(300.0, 400.0 - h),
        2.0 * h * thermo_optic_coeff(400.0).value,
        epsilon = 1e-12
    );
}

#[test]
fn zero_power_is_uniform() {
    let (cs, f) = field(0.0);
    assert!(f.t.iter().all(|&t| t == 300.0));
    assert_eq!(waveguide_temp(&f, &cs), 300.0);
    assert_eq!(
        phase_from_power(&cs, 0.0, &OpticalPath::default()).unwrap(),
        0.0
    );
}

#[test]
fn rejects_bad_input() {
    let cs = CrossSection::reference();
    assert!(solve_steady(&cs, -1.0).is_err());
    let g = Geometry {
        h_int: 5.0,
        ..Geometry::default()
    };
    assert!(matches!(
        CrossSection::new(&g),
        Err(Error::Parameter { name: "h_clad", .. })
    ));
    let mut cs = CrossSection::reference();
    cs.max_iter = 3;
    assert!(matches!(
        solve_steady(&cs, 20.0),
        Err(Error::SolverDiverged { .. })
    ));
}

#[test]
fn twenty_milliwatts() {
    let (cs, f) = field(20.0);
    let (lo, hi) = f.range_over(&cs.waveguide);
    assert!(hi - lo < 0.5, "waveguide spread {}", hi - lo);
    // The thin heater film conducts sideways less well than the waveguide.
    let (lo, hi) = f.range_over(&cs.heater);
    assert!(hi - lo < 0.05 * (hi - 300.0), "heater spread {}", hi - lo);
    assert!(heater_temp(&f, &cs) > waveguide_temp(&f, &cs));
    // Maximum principle.
    let tmax = f.t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(f.t.iter().all(|&t| t >= 300.0 - 1e-9));
    assert!(
        tmax <= hi + 1e-9 && tmax >= lo - 1e-9,
        "max {tmax} not in the heater"
    );
    // Energy balance per unit length.
    let injected = 20e-3 / (cs.heater_length * 1e-6);
    assert!(
        (f.flux_out - injected).abs() < 0.01 * injected,
        "{} vs {}",
        f.flux_out,
        injected
    );
}

#[test]
fn symmetric_in_x() {
    let (_, f) = field(30.0);
    let nx = f.x.len();
    for j in (0..f.y.len()).step_by(7) {
        for i in 0..nx / 2 {
            assert_abs_diff_eq!(f.at(i, j), f.at(nx - 1 - i, j), epsilon = 1e-6);
        }
    }
}

#[test]
fn rise_is_linear_in_power() {
    let (cs, a) = field(15.0);
    let (_, b) = field(30.0);
    let ra = waveguide_temp(&a, &cs) - 300.0;
    let rb = waveguide_temp(&b, &cs) - 300.0;
    assert_abs_diff_eq!(rb / ra, 2.0, epsilon = 1e-6);
}

#[test]
fn grid_convergence() {
    let mut cs = CrossSection::reference();
    let coarse = waveguide_temp(&solve_steady(&cs, 20.0).unwrap(), &cs) - 300.0;
    cs.grid = cs.grid.refined();
    let fine = waveguide_temp(&solve_steady(&cs, 20.0).unwrap(), &cs) - 300.0;
    assert!(((fine - coarse) / fine).abs() < 5e-3, "{coarse} vs {fine}");
}

#[test]
fn slope_and_pi_power() {
    let cs = CrossSection::reference();
    let s = sweep(&cs, &DEFAULT_SWEEP, &OpticalPath::default()).unwrap();
    assert!(s.slope >= 0.124 && s.slope <= 0.187, "slope {}", s.slope);
    assert!(
        s.pi_power >= 16.2 && s.pi_power <= 24.2,
        "π power {}",
        s.pi_power
    );
    assert!(s.r2_temperature > 0.999);
    let last = s.points.last().unwrap();
    assert!(last.t_waveguide < 600.0 && !last.extrapolated);
    assert!(s.points.windows(2).all(|w| w[1].theta > w[0].theta));
}

#[test]
fn crosstalk_decays() {
    let g = Geometry::default();
    let wide = Geometry {
        half_width: 65.0,
        ..g
    };
    let mut cs = CrossSection::new(&wide).unwrap();
    cs.grid = GridSpec::default();
    let f = solve_steady(&cs, 60.0).unwrap();
    let own = crosstalk_at(&f, &cs, 0.0).unwrap();
    let wg = waveguide_temp(&f, &cs) - 300.0;
    assert!((own - wg).abs() < 0.01 * wg);
    let mut last = own;
    for d in [2.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0] {
        let r = crosstalk_at(&f, &cs, d).unwrap();
        assert!(r < last, "rise at {d} µm not below the previous one");
        last = r;
    }
    assert!(crosstalk_at(&f, &cs, 70.0).is_err());
    let frac = crosstalk_fraction(&g, GridSpec::default(), 60.0, 40.0).unwrap();
    assert!(frac < 0.05, "{frac}");
}
