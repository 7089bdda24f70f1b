//! End-to-end tests of the `sae` binary: exit codes, file outputs,
//! determinism, and the CSV round trip against the library.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sae"))
        .args(args)
        .output()
        .expect("failed to launch sae")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).unwrap();
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Six areas, equal sampling variance, explicit intercept. The ML fit has
/// the closed form beta = mean(y) = 1, A = mean((y - 1)^2) - D = 1/6.
const CLOSED_FORM_CSV: &str = "area_id,y,D,x1\n\
    a1,0,0.5,1\na2,1,0.5,1\na3,2,0.5,1\na4,0,0.5,1\na5,1,0.5,1\na6,2,0.5,1\n";

#[test]
fn analyze_closed_form_parameters() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("data.csv");
    write(&input, CLOSED_FORM_CSV);
    let out = sae(&[
        "analyze",
        "--input",
        input.to_str().unwrap(),
        "--grid",
        "coarse",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let params = read(&dir.path().join("parameters.csv"));
    let eb: Vec<&str> = params
        .lines()
        .find(|l| l.starts_with("EB,"))
        .expect("EB row")
        .split(',')
        .collect();
    // columns: method,gamma,beta1,A,converged,a_floored
    let beta1: f64 = eb[2].parse().unwrap();
    let a: f64 = eb[3].parse().unwrap();
    assert!((beta1 - 1.0).abs() < 1e-7, "beta1 = {beta1}");
    assert!((a - 1.0 / 6.0).abs() < 1e-6, "A = {a}");
    assert!(dir.path().join("areas.csv").exists());
    assert!(dir.path().join("selection.csv").exists());
}

#[test]
fn malformed_cell_exits_2_and_names_the_cell() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.csv");
    write(
        &input,
        "area_id,y,D,x1\na1,0.4,0.5,1\na2,1.1,oops,1\na3,2.0,0.5,1\n",
    );
    let out = sae(&["analyze", "--input", input.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("row 3"), "stderr: {msg}");
    assert!(msg.contains("`D`"), "stderr: {msg}");
    assert!(msg.contains("oops"), "stderr: {msg}");
}

#[test]
fn wrong_header_exits_2() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.csv");
    write(&input, "id,y,D,x1\na1,0.4,0.5,1\n");
    let out = sae(&["analyze", "--input", input.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("header"));
}

#[test]
fn missing_input_file_exits_1() {
    let out = sae(&["analyze", "--input", "/nonexistent/nope.csv"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unknown_scenario_exits_2() {
    let out = sae(&["simulate", "--scenario", "vi", "--R", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("scenario"));
}

#[test]
fn simulate_is_byte_deterministic() {
    let d1 = TempDir::new().unwrap();
    let d2 = TempDir::new().unwrap();
    for d in [&d1, &d2] {
        let out = sae(&[
            "simulate",
            "--scenario",
            "iv",
            "--A",
            "1",
            "--R",
            "5",
            "--seed",
            "11",
            "--grid",
            "coarse",
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    }
    let a = read(&d1.path().join("report.csv"));
    let b = read(&d2.path().join("report.csv"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn simulate_single_replication_runs() {
    let dir = TempDir::new().unwrap();
    let out = sae(&[
        "simulate",
        "--scenario",
        "i",
        "--R",
        "1",
        "--seed",
        "3",
        "--grid",
        "coarse",
        "--format",
        "json",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("report.json"))).unwrap();
    assert_eq!(report["n_replications"], 1);
    assert_eq!(report["scenario"], "i");
}

#[test]
fn dump_data_round_trips_through_analyze() {
    let dir = TempDir::new().unwrap();
    let out = sae(&[
        "simulate",
        "--scenario",
        "v",
        "--A",
        "1",
        "--seed",
        "29",
        "--dump-data",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let data_csv = dir.path().join("data.csv");
    assert!(dir.path().join("truth.csv").exists());

    let out = sae(&[
        "analyze",
        "--input",
        data_csv.to_str().unwrap(),
        "--grid",
        "coarse",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    // the same analysis computed directly through the library
    let scenario = sae_core::SimScenario::preset(sae_core::ScenarioId::V, 1.0);
    let seed = sae_core::rng::replication_seed(29, 0);
    let repl = sae_core::generate_replication(&scenario, seed);
    let analysis = sae_core::analyze(
        &repl.data,
        &sae_core::GammaGrid::coarse_grid(sae_core::WeightsMode::Unit),
        0.05,
        &sae_core::SolverConfig::default(),
    );

    let areas = read(&dir.path().join("areas.csv"));
    let mut rows = areas.lines();
    rows.next(); // header
    for (i, row) in rows.enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        let cell = |j: usize| -> f64 { cells[j].parse().unwrap() };
        assert_eq!(cells[0], repl.data.area_id[i]);
        // 17-significant-digit serialization must round-trip bit-exactly
        assert_eq!(cell(1).to_bits(), repl.data.y[i].to_bits(), "y area {i}");
        assert_eq!(cell(3).to_bits(), analysis.eb[i].theta_hat.to_bits(), "eb area {i}");
        assert_eq!(cell(7).to_bits(), analysis.gd[i].theta_hat.to_bits(), "gd area {i}");
        assert_eq!(cell(9).to_bits(), analysis.gd[i].lower.to_bits(), "gd lower area {i}");
        assert_eq!(cell(12).to_bits(), analysis.dr[i].theta_hat.to_bits(), "dr area {i}");
    }
}

#[test]
fn outlier_area_gd_interval_approaches_direct() {
    let dir = TempDir::new().unwrap();
    let out = sae(&[
        "simulate",
        "--scenario",
        "i",
        "--A",
        "1",
        "--seed",
        "13",
        "--dump-data",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    // replace the first area's direct estimate with a gross outlier
    let data_csv = dir.path().join("data.csv");
    let mut lines: Vec<String> = read(&data_csv).lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
    cells[1] = "1.0e6".into();
    lines[1] = cells.join(",");
    write(&data_csv, &(lines.join("\n") + "\n"));

    let out = sae(&[
        "analyze",
        "--input",
        data_csv.to_str().unwrap(),
        "--grid",
        "0,0.25,0.5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let areas = read(&dir.path().join("areas.csv"));
    let row: Vec<&str> = areas.lines().nth(1).unwrap().split(',').collect();
    let cell = |j: usize| -> f64 { row[j].parse().unwrap() };
    let d: f64 = cell(2);
    let (gd_lo, gd_hi) = (cell(9), cell(10));
    let (dr_lo, dr_hi) = (cell(13), cell(14));
    let tol = 1e-3 * d.sqrt();
    assert!(
        (gd_lo - dr_lo).abs() <= tol && (gd_hi - dr_hi).abs() <= tol,
        "GD ({gd_lo}, {gd_hi}) vs DR ({dr_lo}, {dr_hi})"
    );
}

#[test]
fn select_gamma_custom_grid_and_weights() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("data.csv");
    write(&input, CLOSED_FORM_CSV);
    for weights in ["unit", "inv-d"] {
        let out = sae(&[
            "select-gamma",
            "--input",
            input.to_str().unwrap(),
            "--grid",
            "0,0.1",
            "--weights",
            weights,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        let selection = read(&dir.path().join("selection.csv"));
        assert_eq!(selection.lines().count(), 3, "{selection}");
        assert!(dir.path().join("selected.csv").exists());
    }
}

#[test]
fn invalid_grid_exits_2() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("data.csv");
    write(&input, CLOSED_FORM_CSV);
    let out = sae(&[
        "select-gamma",
        "--input",
        input.to_str().unwrap(),
        "--grid",
        "0.1,0.2", // must start at 0
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_applies_and_flags_override() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("data.csv");
    write(&input, CLOSED_FORM_CSV);
    let config = dir.path().join("run.conf");
    write(
        &config,
        &format!(
            "input={}\ngrid=coarse\nout={}\n",
            input.display(),
            dir.path().display()
        ),
    );
    // config alone: coarse grid has 4 points
    let out = sae(&["select-gamma", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert_eq!(read(&dir.path().join("selection.csv")).lines().count(), 5);
    // flag overrides the config grid
    let out = sae(&[
        "select-gamma",
        "--config",
        config.to_str().unwrap(),
        "--grid",
        "0,0.1",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert_eq!(read(&dir.path().join("selection.csv")).lines().count(), 3);
}

#[test]
fn table_presets_emit_expected_shapes() {
    let dir = TempDir::new().unwrap();
    let out = sae(&[
        "simulate",
        "--scenario",
        "i",
        "--R",
        "3",
        "--seed",
        "5",
        "--grid",
        "coarse",
        "--table1",
        "--table2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let t1 = read(&dir.path().join("table1.csv"));
    assert_eq!(t1.lines().next().unwrap(), "scenario,A,method,mse");
    assert_eq!(t1.lines().count(), 4);
    let t2 = read(&dir.path().join("table2.csv"));
    assert_eq!(t2.lines().next().unwrap(), "scenario,A,method,cp,al");
    assert_eq!(t2.lines().count(), 4);
}

#[test]
fn fixed_gamma_mode_runs() {
    let dir = TempDir::new().unwrap();
    let out = sae(&[
        "simulate",
        "--scenario",
        "i",
        "--R",
        "3",
        "--seed",
        "5",
        "--gamma",
        "0.2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report = read(&dir.path().join("report.csv"));
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    // gamma_mean column echoes the fixed gamma
    let gamma_mean: f64 = row[15].parse().unwrap();
    assert!((gamma_mean - 0.2).abs() < 1e-12, "gamma_mean = {gamma_mean}");
}
