//! End-to-end behavior of the `qdist` binary: artifact layout, manifest
//! replay, exit codes, and environment handling.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qdist_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdist"))
        .args(args)
        .current_dir(dir)
        .env("QDIST_THREADS", "2")
        .output()
        .expect("binary should run")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no exit code")
}

fn stderr_text(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn read_manifest(dir: &Path) -> Value {
    let text = fs::read_to_string(dir.join("run_manifest.json")).expect("manifest exists");
    serde_json::from_str(&text).expect("manifest parses")
}

#[test]
fn simulated_data_round_trips_without_warnings() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = qdist_in(tmp.path(), &["simulate", "--out", "sim", "--seed", "5", "--n-subjects", "30"]);
    assert_eq!(code(&sim), 0, "{}", stderr_text(&sim));
    for name in ["observations.csv", "subjects.csv", "domains.csv", "ground_truth.json", "run_manifest.json"] {
        assert!(tmp.path().join("sim").join(name).exists(), "missing {name}");
    }

    let q = qdist_in(
        tmp.path(),
        &[
            "quantiles",
            "--observations", "sim/observations.csv",
            "--subjects", "sim/subjects.csv",
            "--domains", "sim/domains.csv",
            "--out", "q",
            "--grid-points", "40",
        ],
    );
    assert_eq!(code(&q), 0, "{}", stderr_text(&q));
    assert!(
        !stderr_text(&q).contains("WARN"),
        "ingesting simulated data should not warn: {}",
        stderr_text(&q)
    );
    let table = fs::read_to_string(tmp.path().join("q/quantiles.csv")).unwrap();
    // 30 subjects on a 40-point grid plus the header line.
    assert_eq!(table.lines().count(), 1 + 30 * 40);
    assert!(table.starts_with("subject_id,feature_id,p,value\n"));
}

#[test]
fn a_fit_replayed_from_its_manifest_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = qdist_in(tmp.path(), &["simulate", "--out", "sim", "--seed", "9", "--n-subjects", "30"]);
    assert_eq!(code(&sim), 0, "{}", stderr_text(&sim));

    let fit_args = [
        "fit-soqfr",
        "--observations", "sim/observations.csv",
        "--subjects", "sim/subjects.csv",
        "--grid-points", "60",
        "--basis-size", "8",
    ];
    let first = qdist_in(tmp.path(), &[&fit_args[..], &["--out", "a"]].concat());
    assert_eq!(code(&first), 0, "{}", stderr_text(&first));

    // Replaying the recorded manifest, overriding only the output
    // directory, must reproduce every artifact byte for byte.
    let second = qdist_in(
        tmp.path(),
        &["fit-soqfr", "--config", "a/run_manifest.json", "--out", "b"],
    );
    assert_eq!(code(&second), 0, "{}", stderr_text(&second));
    for name in ["soqfr_beta.csv", "soqfr_fit.json"] {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let mut a = read_manifest(&tmp.path().join("a"));
    let mut b = read_manifest(&tmp.path().join("b"));
    for m in [&mut a, &mut b] {
        let obj = m.as_object_mut().unwrap();
        obj.remove("timings");
        obj.get_mut("config").unwrap().as_object_mut().unwrap().remove("out");
    }
    assert_eq!(a, b, "manifests should agree apart from timings and out");

    // The same holds for the simulator itself.
    let resim = qdist_in(
        tmp.path(),
        &["simulate", "--config", "sim/run_manifest.json", "--out", "sim2"],
    );
    assert_eq!(code(&resim), 0, "{}", stderr_text(&resim));
    for name in ["observations.csv", "subjects.csv", "domains.csv", "ground_truth.json"] {
        let a = fs::read(tmp.path().join("sim").join(name)).unwrap();
        let b = fs::read(tmp.path().join("sim2").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical simulate runs");
    }
}

#[test]
fn flags_override_config_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = qdist_in(tmp.path(), &["simulate", "--out", "sim", "--seed", "1", "--n-subjects", "20"]);
    assert_eq!(code(&sim), 0, "{}", stderr_text(&sim));
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"lmoments.order": 3, "observations": "sim/observations.csv", "subjects": "sim/subjects.csv"}"#,
    )
    .unwrap();

    let run = qdist_in(
        tmp.path(),
        &["lmoments", "--config", "cfg.json", "--order", "2", "--out", "lm"],
    );
    assert_eq!(code(&run), 0, "{}", stderr_text(&run));
    let table = fs::read_to_string(tmp.path().join("lm/lmoments.csv")).unwrap();
    assert!(table.starts_with("subject_id,feature_id,L1,L2\n"), "flag should win over file");
    let manifest = read_manifest(&tmp.path().join("lm"));
    assert_eq!(manifest["config"]["lmoments.order"], Value::from(2));
    assert_eq!(manifest["config"]["lmoments.method"], Value::from("sample"));
}

#[test]
fn a_single_subject_file_yields_a_single_lmoment_row() {
    let tmp = tempfile::tempdir().unwrap();
    let mut obs = String::from("subject_id,feature_id,value\n");
    for v in [3.0, 1.0, 4.0, 1.5, 9.0, 2.6, 5.3, 5.8] {
        obs.push_str(&format!("solo,walk,{v}\n"));
    }
    fs::write(tmp.path().join("observations.csv"), obs).unwrap();
    fs::write(tmp.path().join("subjects.csv"), "subject_id,outcome\nsolo,1.0\n").unwrap();

    let run = qdist_in(
        tmp.path(),
        &[
            "lmoments",
            "--observations", "observations.csv",
            "--subjects", "subjects.csv",
            "--out", "lm",
        ],
    );
    assert_eq!(code(&run), 0, "{}", stderr_text(&run));
    let table = fs::read_to_string(tmp.path().join("lm/lmoments.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2, "header plus exactly one row: {table}");
    assert!(lines[1].starts_with("solo,walk,"));
}

#[test]
fn missing_input_files_exit_one_and_name_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("observations.csv"), "subject_id,feature_id,value\na,f,1\na,f,2\n")
        .unwrap();
    let run = qdist_in(
        tmp.path(),
        &[
            "fit-soqfr",
            "--observations", "observations.csv",
            "--subjects", "no_such_subjects.csv",
            "--out", "o",
        ],
    );
    assert_eq!(code(&run), 1);
    assert!(
        stderr_text(&run).contains("no_such_subjects.csv"),
        "error should name the missing file: {}",
        stderr_text(&run)
    );

    let unset = qdist_in(tmp.path(), &["fit-soqfr", "--observations", "observations.csv", "--out", "o"]);
    assert_eq!(code(&unset), 1);
    assert!(stderr_text(&unset).contains("--subjects"), "{}", stderr_text(&unset));
}

#[test]
fn unknown_flags_and_bad_values_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = qdist_in(tmp.path(), &["fit-soqfr", "--wibble"]);
    assert_eq!(code(&unknown), 1);

    let bad_subcommand = qdist_in(tmp.path(), &["fit-everything"]);
    assert_eq!(code(&bad_subcommand), 1);

    let sim = qdist_in(tmp.path(), &["simulate", "--out", "sim", "--n-subjects", "10"]);
    assert_eq!(code(&sim), 0, "{}", stderr_text(&sim));
    let bad_family = qdist_in(
        tmp.path(),
        &[
            "fit-soqfr",
            "--observations", "sim/observations.csv",
            "--subjects", "sim/subjects.csv",
            "--family", "poisson",
            "--out", "o",
        ],
    );
    assert_eq!(code(&bad_family), 1);
    assert!(stderr_text(&bad_family).contains("poisson"), "{}", stderr_text(&bad_family));
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&qdist_in(tmp.path(), &["--help"])), 0);
    assert_eq!(code(&qdist_in(tmp.path(), &["--version"])), 0);
    assert_eq!(code(&qdist_in(tmp.path(), &["fit-soqfr", "--help"])), 0);
}

#[test]
fn numerical_breakdown_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    // A binary outcome perfectly separated by the covariate: the
    // unpenalized logistic fit cannot converge.
    let mut subjects = String::from("subject_id,outcome,z\n");
    let mut obs = String::from("subject_id,feature_id,value\n");
    for i in 0..8 {
        let y = if i < 4 { 0 } else { 1 };
        let z = -2.0 + i as f64 * 0.55;
        subjects.push_str(&format!("s{i},{y},{z}\n"));
        for j in 0..6 {
            obs.push_str(&format!("s{i},f,{}\n", (i as f64) * 0.3 + (j as f64) * 0.17));
        }
    }
    fs::write(tmp.path().join("subjects.csv"), subjects).unwrap();
    fs::write(tmp.path().join("observations.csv"), obs).unwrap();

    let run = qdist_in(
        tmp.path(),
        &[
            "fit-soqfr",
            "--observations", "observations.csv",
            "--subjects", "subjects.csv",
            "--family", "binomial",
            "--lambda", "0",
            "--basis-size", "4",
            "--out", "o",
        ],
    );
    assert_eq!(code(&run), 2, "stderr: {}", stderr_text(&run));
    assert!(stderr_text(&run).contains("error:"), "{}", stderr_text(&run));
}

#[test]
fn thread_cap_env_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = qdist_in(tmp.path(), &["simulate", "--out", "sim", "--n-subjects", "10"]);
    assert_eq!(code(&sim), 0, "{}", stderr_text(&sim));

    let capped = Command::new(env!("CARGO_BIN_EXE_qdist"))
        .args([
            "quantiles",
            "--observations", "sim/observations.csv",
            "--subjects", "sim/subjects.csv",
            "--out", "q",
        ])
        .current_dir(tmp.path())
        .env("QDIST_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(capped.status.code(), Some(0), "{}", String::from_utf8_lossy(&capped.stderr));

    let bad = Command::new(env!("CARGO_BIN_EXE_qdist"))
        .args(["quantiles", "--out", "q2"])
        .current_dir(tmp.path())
        .env("QDIST_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("QDIST_THREADS"));
}
