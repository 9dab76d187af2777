use super::*;
use crate::device::{ChainModel, InstrumentModel, SimulatedDevice, TopsGroundTruth};
use alloc::vec;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;

fn chain(k: &[f64], d: &[f64]) -> ChainModel {
    ChainModel::ideal(
        k.iter()
            .zip(d)
            .enumerate()
            .map(|(j, (&k, &d))| TopsGroundTruth::new(j + 1, k, d, 1.75))
            .collect(),
    )
}

fn device(c: ChainModel, sigma: f64, seed: u64) -> SimulatedDevice {
    let ins = InstrumentModel {
        noise_sigma: sigma,
        rng_seed: seed,
        ..InstrumentModel::default()
    };
    SimulatedDevice::new(c, ins).unwrap()
}

fn check(res: &CalibrationResult, c: &ChainModel, k_tol: f64, d_tol: f64) {
    for (j, t) in c.stages.iter().enumerate() {
        let s = res.stage(j + 1).unwrap();
        assert!(
            (s.k - t.k).abs() < k_tol,
            "stage {} k {} vs {}",
            j + 1,
            s.k,
            t.k
        );
        assert!(
            wrap_pi(s.dtheta - t.dtheta).abs() < d_tol,
            "stage {} dθ {} vs {}",
            j + 1,
            s.dtheta,
            t.dtheta
        );
        // Reported P_min really puts the stage at 0 or π.
        let th = wrap_pi(t.dtheta + t.k * s.p_min);
        assert!(
            th.abs().min(PI - th.abs()) < 2.0 * d_tol,
            "stage {} θ(P_min) = {}",
            j + 1,
            th
        );
    }
}

#[test]
fn resolve_examples() {
    let (d, w) = resolve_dtheta(0.1459, 1.4921, Constraint::HalfPi, None, 0.0).unwrap();
    assert_abs_diff_eq!(d, -0.2177, epsilon = 1e-3);
    assert_eq!(w, ThetaAtPmin::Zero);
    let (d, w) = resolve_dtheta(
        0.1517,
        12.9558,
        Constraint::HalfPi,
        Some(ThetaAtPmin::Pi),
        0.0,
    )
    .unwrap();
    assert_abs_diff_eq!(d, 1.1762, epsilon = 1e-3);
    assert_eq!(w, ThetaAtPmin::Pi);
}

#[test]
fn resolve_rejects_contradicting_hint_and_needs_hint_without_constraint() {
    let e = resolve_dtheta(
        0.1459,
        1.4921,
        Constraint::HalfPi,
        Some(ThetaAtPmin::Pi),
        0.0,
    );
    assert!(matches!(e, Err(Error::ConstraintViolation { .. })));
    assert!(matches!(
        resolve_dtheta(0.15, 3.0, Constraint::None, None, 0.0),
        Err(Error::MissingHint { .. })
    ));
    let (d, _) = resolve_dtheta(0.15, 3.0, Constraint::None, Some(ThetaAtPmin::Pi), 0.0).unwrap();
    assert_abs_diff_eq!(d, PI - 0.45, epsilon = 1e-12);
    // A quarter-wave offset moves both candidates by −π/2.
    let (d, _) = resolve_dtheta(0.15, 3.0, Constraint::HalfPi, None, FRAC_PI_2).unwrap();
    assert_abs_diff_eq!(d, FRAC_PI_2 - 0.45, epsilon = 1e-12);
}

#[test]
fn pair_schedules() {
    assert_eq!(pairs_desc(6, 1), vec![(6, 5), (4, 3), (2, 1)]);
    assert_eq!(pairs_desc(5, 2), vec![(5, 4), (3, 2)]);
    assert_eq!(pairs_desc(2, 1), vec![(2, 1)]);
    assert_eq!(pairs_asc(1, 6), vec![(1, 2), (3, 4), (5, 6)]);
    assert_eq!(pairs_asc(2, 5), vec![(2, 3), (4, 5)]);
}

#[test]
fn power_helpers() {
    assert_abs_diff_eq!(first_zero_pi(0.1459, -0.2177), 1.4921, epsilon = 1e-3);
    assert_abs_diff_eq!(first_zero_pi(0.1517, 1.1762), 12.9558, epsilon = 1e-3);
    assert_abs_diff_eq!(
        first_quadrature(0.2, 0.5),
        (FRAC_PI_2 - 0.5) / 0.2,
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(
        first_quadrature(0.2, FRAC_PI_2 + 0.1),
        (2.0 * PI - 0.1) / 0.2,
        epsilon = 1e-12
    );
}

fn exact_set(c: &ChainModel) -> Vec<(f64, f64)> {
    c.stages
        .iter()
        .map(|t| (t.k, first_zero_pi(t.k, t.dtheta)))
        .collect()
}

fn expected_class(t: &TopsGroundTruth) -> ThetaAtPmin {
    theta_class(t.k, t.dtheta, first_zero_pi(t.k, t.dtheta))
}

#[test]
fn discriminator_levels_hold_for_any_neighbour_state() {
    let cfg = CalibrationConfig::default();
    let mut seed = 7u64;
    let mut next = || {
        seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (seed >> 11) as f64 / (1u64 << 53) as f64
    };
    for n in [4usize, 5, 6, 7] {
        for _ in 0..40 {
            let k: Vec<f64> = (0..n).map(|_| 0.13 + 0.03 * next()).collect();
            let d: Vec<f64> = (0..n).map(|_| (2.0 * next() - 1.0) * 3.0).collect();
            let c = chain(&k, &d);
            let set = exact_set(&c);
            let mut dev = device(c.clone(), 0.0, 0);
            for j in 2..n {
                let r = discriminate::discriminate(&mut dev, j, &set, &cfg).unwrap();
                assert!(
                    r.distance < 1e-3,
                    "n={n} j={j} I={} {:?}",
                    r.intensity,
                    r.setup
                );
                assert_eq!(r.class, expected_class(&c.stages[j - 1]), "n={n} j={j}");
            }
        }
    }
}

#[test]
fn reference_chain_round_trip() {
    let c = ChainModel::reference_six();
    let mut dev = device(c.clone(), 0.0, 0);
    let res = calibrate(&mut dev, &CalibrationConfig::default(), Mode::Constrained).unwrap();
    check(&res, &c, 1e-3, 2e-2);
    let expect = [18.6075, 1.4921, 20.0369, 16.5703, 12.9558, 16.4435];
    for (j, p) in expect.iter().enumerate() {
        assert_abs_diff_eq!(res.stages[j].p_min, *p, epsilon = 0.2);
    }
    assert_eq!(res.stages[1].theta_at_pmin, ThetaAtPmin::Zero);
    assert_eq!(res.stages[2].theta_at_pmin, ThetaAtPmin::Pi);
}

#[test]
fn single_and_pair_chains() {
    let c = chain(&[0.141], &[-0.9]);
    let res = calibrate(
        &mut device(c.clone(), 0.0, 0),
        &CalibrationConfig::default(),
        Mode::Constrained,
    )
    .unwrap();
    check(&res, &c, 1e-3, 1e-2);
    let c = chain(&[0.141, 0.163], &[0.9, -1.2]);
    let res = calibrate(
        &mut device(c.clone(), 0.0, 0),
        &CalibrationConfig::default(),
        Mode::Constrained,
    )
    .unwrap();
    check(&res, &c, 1e-3, 2e-2);
}

#[test]
fn odd_chains() {
    let c = chain(&[0.141, 0.163, 0.128], &[0.9, -1.2, 0.3]);
    let res = calibrate(
        &mut device(c.clone(), 0.0, 0),
        &CalibrationConfig::default(),
        Mode::Constrained,
    )
    .unwrap();
    check(&res, &c, 1e-3, 2e-2);
    let c = chain(
        &[0.141, 0.163, 0.128, 0.15, 0.172],
        &[0.9, -1.2, 0.3, 1.4, -0.05],
    );
    let res = calibrate(
        &mut device(c.clone(), 0.0, 0),
        &CalibrationConfig::default(),
        Mode::Constrained,
    )
    .unwrap();
    check(&res, &c, 1e-3, 2e-2);
    assert!(res.stages.iter().any(|s| s.source_pass.is_transform()));
}

#[test]
fn nonconstraint_matches_constrained_on_reference_chain() {
    let c = ChainModel::reference_six();
    let res = calibrate(
        &mut device(c.clone(), 0.0, 0),
        &CalibrationConfig::default(),
        Mode::NonConstraint,
    )
    .unwrap();
    check(&res, &c, 1e-3, 2e-2);
    let classes: Vec<ThetaAtPmin> = res.stages[1..5].iter().map(|s| s.theta_at_pmin).collect();
    assert_eq!(
        classes,
        vec![
            ThetaAtPmin::Zero,
            ThetaAtPmin::Pi,
            ThetaAtPmin::Pi,
            ThetaAtPmin::Pi
        ]
    );
    assert!(res.stages[1..5]
        .iter()
        .all(|s| s.method == DthetaMethod::Discriminator));
    assert_eq!(res.discriminations.len(), 4);
}

#[test]
fn nonconstraint_recovers_interior_stage_outside_half_pi() {
    let c = chain(&[0.141, 0.163, 0.128, 0.15], &[0.4, 2.5, -2.2, -0.3]);
    let res = calibrate(
        &mut device(c.clone(), 0.0, 0),
        &CalibrationConfig::default(),
        Mode::NonConstraint,
    )
    .unwrap();
    for j in [2usize, 3] {
        let s = res.stage(j).unwrap();
        assert!(
            wrap_pi(s.dtheta - c.stages[j - 1].dtheta).abs() < 2e-2,
            "stage {j}: {}",
            s.dtheta
        );
    }
}

#[test]
fn nonconstraint_needs_three_stages() {
    let c = chain(&[0.141, 0.163], &[0.9, -1.2]);
    assert!(matches!(
        calibrate(
            &mut device(c, 0.0, 0),
            &CalibrationConfig::default(),
            Mode::NonConstraint
        ),
        Err(Error::Parameter { .. })
    ));
}

#[test]
fn noisy_reference_chain() {
    let c = ChainModel::reference_six();
    let res = calibrate(
        &mut device(c.clone(), 2e-3, 11),
        &CalibrationConfig::default(),
        Mode::Constrained,
    )
    .unwrap();
    check(&res, &c, 2e-3, 3e-2);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, .. ProptestConfig::default() })]

    #[test]
    fn random_even_chain_round_trip(
        k in proptest::collection::vec(0.125f64..0.18, 4),
        d in proptest::collection::vec(-1.45f64..1.45, 4),
    ) {
        let c = chain(&k, &d);
        let res = calibrate(&mut device(c.clone(), 0.0, 0), &CalibrationConfig::default(), Mode::Constrained).unwrap();
        check(&res, &c, 1e-3, 2e-2);
    }
}
