use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cpscal(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cpscal"));
    c.args(args).env_remove("CPSCAL_OUT");
    if let Some(p) = env_out {
        c.env("CPSCAL_OUT", p);
    }
    c.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = cpscal(args, None);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Header and rows of a CSV.
fn table(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect();
    (h, rows)
}

fn column(p: &Path, name: &str) -> Vec<f64> {
    let (h, rows) = table(p);
    let j = h
        .iter()
        .position(|c| c == name)
        .unwrap_or_else(|| panic!("no column {name} in {h:?}"));
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TWO_STAGE: &str = r#"{"schema": 1, "name": "pair", "stages": [{"k": 0.141, "dtheta": 0.9}, {"k": 0.163, "dtheta": -1.2}]}"#;

#[test]
fn single_stage_trace_is_a_raised_cosine() {
    let t = TempDir::new().unwrap();
    let sc = write(
        t.path(),
        "one.json",
        r#"{"schema": 1, "stages": [{"k": 0.141, "dtheta": -0.9}]}"#,
    );
    let out = t.path().join("out");
    ok(&["simulate", "--scenario", s(&sc), "--out", s(&out)]);
    let trace = out.join("trace.csv");
    let (h, rows) = table(&trace);
    assert_eq!(h, ["stage", "direction", "P_outer_mW", "P_inner_mW", "I4"]);
    assert_eq!(rows.len(), 1000);
    for (p, i) in column(&trace, "P_inner_mW")
        .into_iter()
        .zip(column(&trace, "I4"))
    {
        assert!((i - (1.0 - (0.141 * p - 0.9).cos()) / 2.0).abs() < 1e-12);
    }
    assert!(out.join("scenario.json").exists());
}

#[test]
fn pinned_last_stage_flattens_its_neighbour() {
    let t = TempDir::new().unwrap();
    let pin = (std::f64::consts::PI - 0.7244) / 0.1470;
    let pinned = write(
        t.path(),
        "pinned.json",
        &format!(
            r#"{{"schema": 1, "simulate": {{"stage": 5, "fixed": [{{"stage": 6, "power": {pin}}}]}}}}"#
        ),
    );
    let free = write(
        t.path(),
        "free.json",
        r#"{"schema": 1, "simulate": {"stage": 5}}"#,
    );
    let range = |sc: &Path, dir: &str| {
        let out = t.path().join(dir);
        ok(&["simulate", "--scenario", s(sc), "--out", s(&out)]);
        let i = column(&out.join("trace.csv"), "I4");
        i.iter().cloned().fold(f64::MIN, f64::max) - i.iter().cloned().fold(f64::MAX, f64::min)
    };
    assert!(range(&pinned, "a") < 1e-3);
    assert!(range(&free, "b") > 0.1);
}

#[test]
fn outer_stage_steps_are_recorded() {
    let t = TempDir::new().unwrap();
    let sc = write(
        t.path(),
        "outer.json",
        r#"{"schema": 1, "instrument": {"v_step": 0.1}, "simulate": {"stage": 2, "outer": 1, "outer_powers": [0, 5, 10]}}"#,
    );
    let out = t.path().join("o");
    ok(&["simulate", "--scenario", s(&sc), "--out", s(&out)]);
    let p = column(&out.join("trace.csv"), "P_outer_mW");
    assert_eq!(p.len(), 300);
    assert!(p[0] == 0.0 && (p[150] - 5.0).abs() < 1e-2 && (p[299] - 10.0).abs() < 1e-2);
}

#[test]
fn malformed_scenarios_exit_2_naming_the_field() {
    let t = TempDir::new().unwrap();
    let cases = [
        (
            r#"{"schema": 1, "stages": [{"k": 0.14, "dtheta": 0}, {"k": "x", "dtheta": 0}]}"#,
            "stages[1].k",
        ),
        (
            r#"{"schema": 1, "stages": [{"k": 0.14, "dtheta": 0}, {"k": 0, "dtheta": 0}]}"#,
            "stages[1].k",
        ),
        (
            r#"{"schema": 1, "instrument": {"v_max": -1}}"#,
            "instrument.v_min",
        ),
        (r#"{"schema": 1, "mode": "sometimes"}"#, "mode"),
        (r#"{"stages": []}"#, "schema"),
        ("{\"schema\": 1", "line 1"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let sc = write(t.path(), &format!("bad{i}.json"), text);
        let o = cpscal(
            &["simulate", "--scenario", s(&sc), "--out", s(t.path())],
            None,
        );
        assert_eq!(o.status.code(), Some(2), "{text}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(field), "{text}: {err}");
    }
    let o = cpscal(
        &["simulate", "--scenario", s(&t.path().join("missing.json"))],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(cpscal(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(
        cpscal(&["thermal", "--jobs", "0"], None).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_failures_exit_1() {
    let t = TempDir::new().unwrap();
    // One scan point cannot cover a phase sweep.
    let sc = write(
        t.path(),
        "short.json",
        r#"{"schema": 1, "stages": [{"k": 0.141, "dtheta": 0.3}], "instrument": {"v_max": 0.5, "v_step": 0.5}}"#,
    );
    let o = cpscal(
        &["calibrate", "--scenario", s(&sc), "--out", s(t.path())],
        None,
    );
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn two_stage_calibration_writes_two_rows() {
    let t = TempDir::new().unwrap();
    let sc = write(t.path(), "pair.json", TWO_STAGE);
    let out = t.path().join("cal");
    let stdout = ok(&["calibrate", "--scenario", s(&sc), "--out", s(&out)]);
    assert!(stdout.contains("stage 2"));
    let (h, rows) = table(&out.join("calibration.csv"));
    assert_eq!(
        h[..6],
        [
            "stage",
            "P_min_mW",
            "P_max_mW",
            "k_rad_per_mW",
            "dtheta_rad",
            "dtheta_deg"
        ]
    );
    assert_eq!(rows.len(), 2);
    let k = column(&out.join("calibration.csv"), "k_rad_per_mW");
    let d = column(&out.join("calibration.csv"), "dtheta_rad");
    assert!((k[0] - 0.141).abs() < 1e-3 && (k[1] - 0.163).abs() < 1e-3);
    assert!((d[0] - 0.9).abs() < 2e-2 && (d[1] + 1.2).abs() < 2e-2);
    let deg = column(&out.join("calibration.csv"), "dtheta_deg");
    assert!((deg[0] - d[0].to_degrees()).abs() < 1e-9);
    let (h, rows) = table(&out.join("parameters.csv"));
    assert_eq!(h, ["quantity", "stage_1", "stage_2"]);
    assert_eq!(
        rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(),
        ["P_min_mW", "k_rad_per_mW", "dtheta_rad", "dtheta_deg"]
    );
    assert!(!out.join("branches.csv").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["stages"].as_array().unwrap().len(), 2);
    assert_eq!(report["result"]["mode"], "constrained");
}

#[test]
fn nonconstraint_reference_writes_branch_table() {
    let t = TempDir::new().unwrap();
    let sc = write(
        t.path(),
        "nc.json",
        r#"{"schema": 1, "mode": "nonconstraint"}"#,
    );
    let out = t.path().join("nc");
    ok(&["calibrate", "--scenario", s(&sc), "--out", s(&out)]);
    let (h, rows) = table(&out.join("branches.csv"));
    assert_eq!(h, ["quantity", "stage_2", "stage_3", "stage_4", "stage_5"]);
    assert_eq!(rows[0], ["theta_rad", "0", "pi", "pi", "pi"]);
    let th: Vec<f64> = rows[1][1..].iter().map(|x| x.parse().unwrap()).collect();
    for (got, want) in th.iter().zip([0.2177, 3.0356, 2.4491, 1.9654]) {
        assert!((got - want).abs() < 2e-2, "theta_th {got} vs {want}");
    }
    let d: Vec<f64> = rows[2][1..].iter().map(|x| x.parse().unwrap()).collect();
    for (got, want) in d.iter().zip([-0.2177, 0.106, 0.6925, 1.1762]) {
        assert!((got - want).abs() < 2e-2);
    }
    assert_eq!(table(&out.join("discriminations.csv")).1.len(), 4);
}

#[test]
fn perfect_calibration_has_unit_fidelity() {
    let t = TempDir::new().unwrap();
    let sc = write(t.path(), "pair.json", TWO_STAGE);
    let out = t.path().join("f");
    let stdout = ok(&[
        "fidelity",
        "--perfect",
        "--scenario",
        s(&sc),
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("mean 1.000000"), "{stdout}");
    let (h, rows) = table(&out.join("fidelity_summary.csv"));
    assert_eq!(h, ["metric", "value"]);
    assert_eq!(rows[1], ["mean", "1"]);
    let (h, rows) = table(&out.join("fidelity_histogram.csv"));
    assert_eq!(h, ["bin_low", "bin_high", "count"]);
    assert_eq!(rows.len(), 50);
    assert_eq!(rows[0][0], "0.99");
    assert_eq!(rows[49][1], "1");
    let total: usize = rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(total, 2000);
    assert_eq!(table(&out.join("fidelity_values.csv")).1.len(), 2000);
}

#[test]
fn fidelity_from_a_calibration_file() {
    let t = TempDir::new().unwrap();
    let sc = write(t.path(), "pair.json", TWO_STAGE);
    let cal = t.path().join("cal");
    ok(&["calibrate", "--scenario", s(&sc), "--out", s(&cal)]);
    let out = t.path().join("f");
    let cal_csv = cal.join("calibration.csv");
    ok(&[
        "fidelity",
        "--scenario",
        s(&sc),
        "--calibration",
        s(&cal_csv),
        "--out",
        s(&out),
    ]);
    let (_, rows) = table(&out.join("fidelity_summary.csv"));
    let mean: f64 = rows[1][1].parse().unwrap();
    assert!(mean >= 0.99999, "{mean}");

    let broken = write(t.path(), "broken.csv", "stage,k\n1,0.1\n");
    let o = cpscal(
        &[
            "fidelity",
            "--scenario",
            s(&sc),
            "--calibration",
            s(&broken),
            "--out",
            s(&out),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
}

const SMALL_THERMAL: &str = r#""grid": {"h_fine": 0.1, "h_max": 2.0, "growth": 1.3}"#;

#[test]
fn thermal_artifacts() {
    let t = TempDir::new().unwrap();
    let sc = write(
        t.path(),
        "th.json",
        &format!(
            r#"{{"schema": 1, "thermal": {{{SMALL_THERMAL}, "field_power": 0, "powers": [0, 20, 40], "offsets": [0, 10, 40]}}}}"#
        ),
    );
    let out = t.path().join("th");
    let stdout = ok(&["thermal", "--scenario", s(&sc), "--out", s(&out)]);
    assert!(stdout.contains("slope"));
    assert!(column(&out.join("thermal_field.csv"), "T_K")
        .iter()
        .all(|&x| x == 300.0));
    let (h, _) = table(&out.join("thermal_field.csv"));
    assert_eq!(h, ["x_um", "y_um", "T_K"]);
    let theta = column(&out.join("thermal_sweep.csv"), "theta_rad");
    assert_eq!(theta.len(), 3);
    assert!(theta[0] == 0.0 && theta[2] > theta[1]);
    let slope = &table(&out.join("thermal_summary.csv")).1[0];
    assert_eq!(slope[0], "slope_rad_per_mW");
    let s0: f64 = slope[1].parse().unwrap();
    assert!(s0 > 0.124 && s0 < 0.187, "{s0}");
    let frac = column(&out.join("crosstalk.csv"), "fraction");
    assert!((frac[0] - 1.0).abs() < 1e-12 && frac[1] < frac[0] && frac[2] < 0.05);
    assert!(
        out.join("thermal_profile_x.csv").exists() && out.join("thermal_profile_y.csv").exists()
    );
}

const SMALL_SEARCH: &str = r#""search": {"n_r": 41, "n_eta": 41, "n_theta": 90, "refine": 2}"#;

#[test]
fn balanced_coupler_renders_infinity() {
    let t = TempDir::new().unwrap();
    let sc = write(
        t.path(),
        "mmi.json",
        &format!(
            r#"{{"schema": 1, "mmi": {{"t32": 0.5, "t42": 0.5, "er_bounds": [50], {SMALL_SEARCH}, "contour_points": 5, "eta_points": 7}}}}"#
        ),
    );
    let out = t.path().join("m");
    let stdout = ok(&["analyze-mmi", "--scenario", s(&sc), "--out", s(&out)]);
    assert!(stdout.contains("min fidelity at 50 dB"), "{stdout}");
    let (h, rows) = table(&out.join("mmi_summary.csv"));
    let j = h.iter().position(|c| c == "er_port4_dB").unwrap();
    assert_eq!(rows[0][j], "inf");
    let sweep = table(&out.join("mmi_eta_sweep.csv")).1;
    assert_eq!(sweep.len(), 7);
    assert_eq!(sweep[3][0], "0.5");
    assert_eq!(sweep[3][1], "inf");
    let min = column(&out.join("min_fidelity.csv"), "min_fidelity");
    assert!(min[0] >= 0.99991);
    assert_eq!(table(&out.join("mmi_contours.csv")).1.len(), 20);
}

#[test]
fn measured_coupler_extinction_ratio() {
    let t = TempDir::new().unwrap();
    let sc = write(
        t.path(),
        "mmi.json",
        &format!(r#"{{"schema": 1, "mmi": {{"er_bounds": [], {SMALL_SEARCH}}}}}"#),
    );
    let out = t.path().join("m");
    ok(&["analyze-mmi", "--scenario", s(&sc), "--out", s(&out)]);
    let er = column(&out.join("mmi_summary.csv"), "er_port4_dB")[0];
    let imb = column(&out.join("mmi_summary.csv"), "imbalance_dB")[0];
    assert!((er - 73.5).abs() < 0.5, "{er}");
    assert!((imb - 0.0018).abs() < 2e-4, "{imb}");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let t = TempDir::new().unwrap();
    let sc = write(
        t.path(),
        "noisy.json",
        r#"{"schema": 1, "instrument": {"noise_sigma": 0.002}, "simulate": {"stage": 3}}"#,
    );
    let run = |dir: &str, seed: &str| {
        let out = t.path().join(dir);
        ok(&[
            "simulate",
            "--scenario",
            s(&sc),
            "--out",
            s(&out),
            "--seed",
            seed,
        ]);
        fs::read(out.join("trace.csv")).unwrap()
    };
    let a = run("a", "7");
    assert_eq!(a, run("b", "7"));
    assert_ne!(a, run("c", "8"));

    let cal = |dir: &str| {
        let out = t.path().join(dir);
        ok(&[
            "calibrate",
            "--scenario",
            s(&write(t.path(), "p.json", TWO_STAGE)),
            "--out",
            s(&out),
        ]);
        (
            fs::read(out.join("calibration.csv")).unwrap(),
            fs::read(out.join("report.json")).unwrap(),
        )
    };
    assert_eq!(cal("x"), cal("y"));
}

#[test]
fn batch_runs_in_parallel_into_named_subdirectories() {
    let t = TempDir::new().unwrap();
    let a = write(
        t.path(),
        "a.json",
        r#"{"schema": 1, "name": "first", "simulate": {"stage": 1}}"#,
    );
    let b = write(
        t.path(),
        "b.json",
        r#"{"schema": 1, "name": "second", "simulate": {"stage": 2}}"#,
    );
    let out = t.path().join("batch");
    let stdout = ok(&[
        "simulate",
        "--scenario",
        s(&a),
        "--scenario",
        s(&b),
        "--jobs",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("[first]") && stdout.contains("[second]"));
    assert!(out.join("first/trace.csv").exists() && out.join("second/trace.csv").exists());

    let dup = write(t.path(), "c.json", r#"{"schema": 1, "name": "first"}"#);
    let o = cpscal(
        &[
            "simulate",
            "--scenario",
            s(&a),
            "--scenario",
            s(&dup),
            "--out",
            s(&out),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("more than one scenario"));
}

#[test]
fn output_directory_precedence() {
    let t = TempDir::new().unwrap();
    let env_dir = t.path().join("env");
    let from_scenario = t.path().join("from_scenario");
    let plain = write(t.path(), "plain.json", r#"{"schema": 1}"#);
    let o = cpscal(&["simulate", "--scenario", s(&plain)], Some(&env_dir));
    assert!(o.status.success());
    assert!(env_dir.join("trace.csv").exists());

    let named = write(
        t.path(),
        "named.json",
        &format!(
            r#"{{"schema": 1, "output": {}}}"#,
            serde_json::to_string(s(&from_scenario)).unwrap()
        ),
    );
    let o = cpscal(&["simulate", "--scenario", s(&named)], Some(&env_dir));
    assert!(o.status.success());
    assert!(from_scenario.join("trace.csv").exists());

    let cli = t.path().join("cli");
    let o = cpscal(
        &["simulate", "--scenario", s(&named), "--out", s(&cli)],
        Some(&env_dir),
    );
    assert!(o.status.success());
    assert!(cli.join("trace.csv").exists());
}
