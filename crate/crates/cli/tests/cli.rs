use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trajlab::harness::{build_world, HarnessConfig};
use trajlab::report::csv_bytes;
use trajlab::steering::{length_sweep, read_direction, LengthSweepSpec};
use trajlab::trace::{read_traces, Correctness};

fn trajlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajlab"))
        .current_dir(dir)
        .env_remove("TRAJLAB_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate_small(dir: &Path, name: &str, n: usize, extra: &[&str]) -> PathBuf {
    let n = format!("simulate.n_examples={n}");
    let mut args = vec!["--set", n.as_str()];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["simulate", "--out", name]);
    let o = trajlab(dir, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join(name).join("corpus.rtrc")
}

#[test]
fn default_simulate_writes_2000_examples_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trajlab(tmp.path(), &["simulate", "--out", "sim"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (meta, traces) = read_traces(&tmp.path().join("sim/corpus.rtrc")).unwrap();
    assert_eq!(traces.len(), 2000);
    assert_eq!(meta.n_layers, 8);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("sim/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_examples"], 2000);
    assert_eq!(manifest["trace_file"], "corpus.rtrc");
    let snapshot = fs::read_to_string(tmp.path().join("sim/resolved_config.txt")).unwrap();
    assert!(snapshot.contains("simulate.n_examples = 2000"));
    assert!(snapshot.contains("harness.seed = 42"));
}

#[test]
fn same_seed_gives_byte_identical_trace_file() {
    let tmp = tempfile::tempdir().unwrap();
    let a = simulate_small(tmp.path(), "a", 120, &[]);
    let b = simulate_small(tmp.path(), "b", 120, &[]);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    let c = simulate_small(tmp.path(), "c", 120, &["--seed", "43"]);
    assert_ne!(
        fs::read(tmp.path().join("a/corpus.rtrc")).unwrap(),
        fs::read(c).unwrap()
    );
}

#[test]
fn invalid_distribution_sum_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trajlab(
        tmp.path(),
        &[
            "--set",
            "harness.step_count_distribution=3:0.5,4:0.4",
            "simulate",
            "--out",
            "x",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("harness.step_count_distribution"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.cfg"), "seed = 5\nprobe.layrs = all\n").unwrap();
    let o = trajlab(
        tmp.path(),
        &["--config", "run.cfg", "simulate", "--out", "x"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("probe.layrs"));
}

#[test]
fn env_seed_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.cfg"),
        "seed = 5\nsimulate.n_examples = 10\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_trajlab"))
        .current_dir(tmp.path())
        .env("TRAJLAB_SEED", "7")
        .args(["--config", "run.cfg", "simulate", "--out", "sim"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let snapshot = fs::read_to_string(tmp.path().join("sim/resolved_config.txt")).unwrap();
    assert!(snapshot.contains("seed = 7\n"));
    assert!(snapshot.contains("harness.seed = 7\n"));
}

#[test]
fn probe_grid_schema_and_input_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = simulate_small(tmp.path(), "sim", 300, &[]);
    let before = fs::read(&corpus).unwrap();
    let o = trajlab(
        tmp.path(),
        &[
            "--set",
            "probe.layers=0,7",
            "--set",
            "probe.targets=step1,term",
            "probe",
            "--traces",
            "sim/corpus.rtrc",
            "--out",
            "probe",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("probe/probe_grid.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("target,layer,accuracy,n_pos,n_neg,converged,note")
    );
    assert_eq!(lines.count(), 4);
    assert_eq!(fs::read(&corpus).unwrap(), before);
}

#[test]
fn json_format_switches_report_files() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_small(tmp.path(), "sim", 200, &[]);
    let o = trajlab(
        tmp.path(),
        &[
            "--format",
            "json",
            "--set",
            "geometry.resamples=200",
            "geometry",
            "--traces",
            "sim/corpus.rtrc",
            "--out",
            "geo",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("geo/divergence.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().any(|r| r["transition"] == "last->term"));
    assert!(tmp.path().join("geo/pca_points.json").exists());
}

#[test]
fn corrupted_trace_file_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = simulate_small(tmp.path(), "sim", 50, &[]);
    let mut bytes = fs::read(&corpus).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(tmp.path().join("bad.rtrc"), bytes).unwrap();
    let o = trajlab(tmp.path(), &["probe", "--traces", "bad.rtrc", "--out", "p"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error: probe:"));
}

#[test]
fn logit_lens_without_aux_names_the_requirement() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_small(tmp.path(), "sim", 200, &["--set", "harness.emit_aux=false"]);
    let o = trajlab(
        tmp.path(),
        &[
            "--set",
            "predict.features=logit_lens",
            "predict",
            "--traces",
            "sim/corpus.rtrc",
            "--out",
            "p",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(
        err.contains("logit_lens") && err.contains("aux feature"),
        "{err}"
    );
}

#[test]
fn length_sweep_rows_match_library() {
    let tmp = tempfile::tempdir().unwrap();
    simulate_small(
        tmp.path(),
        "train",
        300,
        &["--set", "simulate.corpus_seed=1"],
    );
    let args = ["--set", "steer.n_episodes=60"];
    let o = trajlab(
        tmp.path(),
        &[
            &args[..],
            &[
                "steer",
                "direction",
                "--traces",
                "train/corpus.rtrc",
                "--out",
                "st",
            ],
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = trajlab(
        tmp.path(),
        &[
            &args[..],
            &[
                "steer",
                "length",
                "--direction",
                "st/direction.rsdr",
                "--out",
                "len",
            ],
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let dir = read_direction(&tmp.path().join("st/direction.rsdr")).unwrap();
    let cfg = HarnessConfig::default();
    let world = build_world(&cfg).unwrap();
    let spec = LengthSweepSpec {
        n_episodes: 60,
        seed: 42 + 9,
        ..Default::default()
    };
    let rows = length_sweep(&world, &cfg, &dir, &spec).unwrap();
    let expected = csv_bytes(&rows).unwrap();
    assert_eq!(
        fs::read(tmp.path().join("len/length_sweep.csv")).unwrap(),
        expected
    );
    let header = String::from_utf8(expected).unwrap();
    assert!(header.starts_with("alpha,n_episodes,mean_steps,accuracy,loop_ratio"));
}

#[test]
fn trace_mode_outcomes_and_missing_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = simulate_small(tmp.path(), "sim", 40, &[]);
    let (_, traces) = read_traces(&corpus).unwrap();
    let mut csv = String::from("example_id,baseline_correct,policy_correct\n");
    for (i, t) in traces.iter().enumerate() {
        let base = t.correctness == Correctness::Correct;
        let policy = if i == 0 { !base } else { base };
        csv.push_str(&format!(
            "{},{},{}\n",
            t.example_id, base as u8, policy as u8
        ));
    }
    fs::write(tmp.path().join("pairs.csv"), &csv).unwrap();
    let o = trajlab(
        tmp.path(),
        &[
            "--set",
            "steer.mode=always",
            "steer",
            "outcomes",
            "--traces",
            "sim/corpus.rtrc",
            "--outcomes",
            "pairs.csv",
            "--out",
            "o",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("o/policy_outcome.csv")).unwrap();
    assert!(text.starts_with("arm,n_total,n_flagged,"));
    assert!(text.contains("all,40,40,"));

    let truncated: String = csv.lines().take(20).map(|l| format!("{l}\n")).collect();
    fs::write(tmp.path().join("short.csv"), truncated).unwrap();
    let o = trajlab(
        tmp.path(),
        &[
            "--set",
            "steer.mode=always",
            "steer",
            "outcomes",
            "--traces",
            "sim/corpus.rtrc",
            "--outcomes",
            "short.csv",
            "--out",
            "o2",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing outcome pair"));
}

#[test]
fn reproduce_reports_each_selected_criterion() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trajlab(tmp.path(), &["reproduce", "--only", "1,9", "--out", "rep"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("[PASS]")).count(), 2);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("rep/reproduce.json")).unwrap()).unwrap();
    assert_eq!(report["outcomes"].as_array().unwrap().len(), 2);
}

#[test]
fn quick_reproduce_passes_within_a_minute() {
    let tmp = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let o = trajlab(tmp.path(), &["reproduce", "--quick"]);
    let elapsed = start.elapsed().as_secs_f64();
    let out = String::from_utf8_lossy(&o.stdout);
    println!("{out}");
    assert_eq!(o.status.code(), Some(0), "{out}{}", stderr(&o));
    assert!(elapsed < 60.0, "quick run took {elapsed:.1} s");
}
