//! End-to-end flow through files: corpus, probes, predictor, steering sidecars.

use std::sync::Arc;

use trajlab::harness::{build_world, generate_corpus_in, HarnessConfig};
use trajlab::predictor::{train_predictor, FeatureKind, FeatureSpec, PredictorConfig};
use trajlab::probes::{sweep, ProbeSpec, ProbeTarget};
use trajlab::steering::{
    build_direction, calibrate_thresholds, fit_ideal_trajectory, read_direction, read_ideal,
    run_gated_policy_harness, write_direction, write_ideal, Aggregation, CalibrationConfig,
    EpisodeRange, Gate, HarnessIntervention, IdealConfig, PolicyMode,
};
use trajlab::trace::{read_traces, write_traces, Correctness, TraceExample};

#[test]
fn file_round_trip_feeds_every_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = HarnessConfig::default();
    let world = build_world(&cfg).unwrap();
    let (meta, traces) = generate_corpus_in(&world, &cfg, 400, 1);
    let path = tmp.path().join("corpus.rtrc");
    write_traces(&meta, &traces, &path).unwrap();
    let (meta2, back) = read_traces(&path).unwrap();
    assert_eq!(meta2, meta);
    assert_eq!(back, traces);

    let rep = sweep(
        &back,
        &[ProbeTarget::Step(1), ProbeTarget::Term],
        &[0, 7],
        &ProbeSpec::new(ProbeTarget::Term, 0),
    )
    .unwrap();
    assert!(rep.accuracy(ProbeTarget::Step(1), 7).unwrap() > 0.95);

    let pc = PredictorConfig {
        c_grid: vec![0.1, 1.0],
        ..Default::default()
    };
    let spec = FeatureSpec::new(FeatureKind::LateTraj, 7);
    let a = train_predictor(&back, &spec, &pc).unwrap();
    let b = train_predictor(&back, &spec, &pc).unwrap();
    assert_eq!(a.row, b.row);
    assert!(a.row.test_auc > 0.8);
}

#[test]
fn sidecars_survive_files_and_drive_the_gated_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = HarnessConfig::default();
    let world = build_world(&cfg).unwrap();
    let train = generate_corpus_in(&world, &cfg, 600, 1).1;
    let held = generate_corpus_in(&world, &cfg, 600, 2).1;

    let dir = build_direction(&train, "train", Aggregation::PerPrompt).unwrap();
    let dpath = tmp.path().join("direction.rsdr");
    write_direction(&dir, &dpath).unwrap();
    let loaded_dir = read_direction(&dpath).unwrap();
    let max_err = (&loaded_dir.vectors - &dir.vectors)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_err < 1e-6);
    let again = tmp.path().join("again.rsdr");
    write_direction(&loaded_dir, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&dpath).unwrap());

    let ideal = fit_ideal_trajectory(&train, &IdealConfig::default()).unwrap();
    let (ok, bad): (Vec<TraceExample>, Vec<TraceExample>) = held
        .into_iter()
        .partition(|t| t.correctness == Correctness::Correct);
    let th = calibrate_thresholds(&ideal, &ok, &bad, &CalibrationConfig::default()).unwrap();
    let ideal = ideal.with_thresholds(&th).unwrap();
    let ipath = tmp.path().join("ideal.ridt");
    write_ideal(&ideal, &ipath).unwrap();
    let loaded = Arc::new(read_ideal(&ipath).unwrap());

    let iv = HarnessIntervention::TrajectoryCorrection {
        ideal: loaded.clone(),
        alpha_corr: 0.5,
    };
    let range = EpisodeRange {
        n_episodes: 300,
        seed: 7,
    };
    let rep = run_gated_policy_harness(
        &world,
        &cfg,
        Some(&Gate::Trajectory(loaded)),
        &iv,
        PolicyMode::Gated,
        range,
    )
    .unwrap();
    assert_eq!(rep.silent_mismatches, 0);
    assert!(rep.outcome.accounting_holds());
    for p in rep.pairs.iter().filter(|p| !p.fired) {
        assert!(p.identical);
    }
}
