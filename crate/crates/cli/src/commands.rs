//! One function per subcommand. Each reads its inputs, runs the analysis and
//! writes reports plus a resolved-config snapshot into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use trajlab::geometry::{divergence_report, pca_2d};
use trajlab::harness::{build_world, corpus_meta, generate_corpus_in};
use trajlab::predictor::{
    length_balanced_audit, train_predictor, FeatureKind, FeatureSpec, PredictorConfig, PredictorRow,
};
use trajlab::probes::{shuffled_control, sweep, ProbeSpec, ProbeTarget};
use trajlab::report::{
    cv_rows, divergence_rows, outcome_row, point_rows, predictor_rows, probe_rows, write_json,
    write_rows, ReportFormat,
};
use trajlab::steering::{
    build_direction, calibrate_thresholds, fit_ideal_trajectory, length_sweep, read_direction,
    read_ideal, read_outcome_csv, run_gated_policy_harness, run_gated_policy_traces,
    write_direction, write_ideal, EpisodeRange, Gate, HarnessIntervention, LengthSweepSpec,
    PolicyMode,
};
use trajlab::trace::{read_traces, write_traces, Correctness, Selector, TraceExample, TraceMeta};

use crate::settings::Settings;

pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

/// Output directory plus report format.
pub struct Output {
    pub dir: PathBuf,
    pub format: ReportFormat,
}

impl Output {
    pub fn create(dir: &Path, settings: &Settings) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(SNAPSHOT_FILE), settings.resolved_text())
            .with_context(|| format!("writing {}", dir.join(SNAPSHOT_FILE).display()))?;
        Ok(Output {
            dir: dir.to_owned(),
            format: settings.format,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn rows<R: Serialize>(&self, stem: &str, rows: &[R]) -> Result<PathBuf> {
        let path = self.dir.join(format!("{stem}.{}", self.format.extension()));
        write_rows(&path, rows, self.format)?;
        Ok(path)
    }
}

fn load(path: &Path) -> Result<(TraceMeta, Vec<TraceExample>)> {
    read_traces(path).with_context(|| format!("reading {}", path.display()))
}

fn max_steps(traces: &[TraceExample]) -> u32 {
    traces.iter().map(|t| t.step_count).max().unwrap_or(0)
}

pub fn simulate(s: &Settings, out: &Output) -> Result<()> {
    let h = &s.harness;
    let world = build_world(h)?;
    let n = s.simulate.n_examples;
    let (meta, traces) = generate_corpus_in(&world, h, n, s.simulate.corpus_seed);
    let trace_path = out.path("corpus.rtrc");
    let bytes = write_traces(&meta, &traces, &trace_path)?;

    let mut histogram: BTreeMap<u32, usize> = BTreeMap::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &traces {
        *histogram.entry(t.step_count).or_default() += 1;
        let label = match t.correctness {
            Correctness::Correct => "correct",
            Correctness::Incorrect => "incorrect",
            Correctness::Unknown => "unknown",
        };
        *counts.entry(label).or_default() += 1;
    }
    let manifest = json!({
        "trace_file": "corpus.rtrc",
        "bytes": bytes,
        "n_examples": n,
        "correctness": counts,
        "step_count_histogram": histogram,
        "corpus_seed": s.simulate.corpus_seed,
        "meta": meta,
        "harness": h,
    });
    write_json(&out.path("manifest.json"), &manifest)?;
    println!(
        "wrote {n} examples ({bytes} bytes) to {}",
        trace_path.display()
    );
    Ok(())
}

pub fn probe(s: &Settings, traces_path: &Path, out: &Output) -> Result<()> {
    let (meta, traces) = load(traces_path)?;
    let p = &s.probe;
    let targets = match &p.targets {
        Some(t) => t.clone(),
        None => (1..=max_steps(&traces))
            .map(ProbeTarget::Step)
            .chain([ProbeTarget::Term])
            .collect(),
    };
    let layers = p.layers.resolve(meta.n_layers)?;
    let mut base = ProbeSpec::new(targets[0], layers[0]);
    base.seed = p.seed;
    base.fit.c = p.c;
    base.test_fraction = p.test_fraction;
    base.balance_classes = p.balance_classes;
    base.negatives = p.negatives;

    let rep = sweep(&traces, &targets, &layers, &base)?;
    let path = out.rows("probe_grid", &probe_rows(&rep))?;
    for (t, best) in rep.targets.iter().zip(&rep.best_layer) {
        match best {
            Some(l) => println!(
                "{:<8} best layer {l:>3}  accuracy {:.3}",
                t.label(),
                rep.accuracy(*t, *l).unwrap_or(f64::NAN)
            ),
            None => println!("{:<8} no trainable layer", t.label()),
        }
    }

    if p.shuffle_repeats > 0 {
        #[derive(Serialize)]
        struct ShuffleRow {
            target: String,
            layer: usize,
            repeats: usize,
            mean_accuracy: f64,
            std_accuracy: f64,
        }
        let mut rows = Vec::new();
        for &t in &targets {
            for &l in &layers {
                let sum = shuffled_control(
                    &traces,
                    &base.for_target(t).at_layer(l),
                    p.shuffle_repeats,
                    p.seed,
                )?;
                rows.push(ShuffleRow {
                    target: t.label(),
                    layer: l,
                    repeats: p.shuffle_repeats,
                    mean_accuracy: sum.mean,
                    std_accuracy: sum.std,
                });
            }
        }
        out.rows("probe_shuffle", &rows)?;
    }
    println!("probe grid written to {}", path.display());
    Ok(())
}

fn default_transitions(traces: &[TraceExample]) -> Vec<(Selector, Selector)> {
    let k = max_steps(traces);
    let mut v: Vec<(Selector, Selector)> = (1..k)
        .map(|i| (Selector::Step(i), Selector::Step(i + 1)))
        .collect();
    v.push((Selector::SecondLast, Selector::Last));
    v.push((Selector::Last, Selector::Term));
    v
}

pub fn geometry(s: &Settings, traces_path: &Path, out: &Output) -> Result<()> {
    let (meta, traces) = load(traces_path)?;
    let g = &s.geometry;
    let transitions = g
        .transitions
        .clone()
        .unwrap_or_else(|| default_transitions(&traces));
    let layers = g.layers.resolve(meta.n_layers)?;
    let mut rows = Vec::new();
    for &layer in &layers {
        let rep = divergence_report(
            &traces,
            &transitions,
            &g.metrics,
            layer,
            g.resamples,
            g.seed,
            "all",
        )?;
        for r in &rep.rows {
            println!(
                "layer {layer:>3} {:<20} {:<9} Δ(I−C) {:+.4} [{:+.4}, {:+.4}]{}",
                r.transition,
                r.metric.as_str(),
                r.delta_ic,
                r.ci_delta.lower95,
                r.ci_delta.upper95,
                if r.significant { "  significant" } else { "" }
            );
        }
        rows.extend(divergence_rows(&rep));
    }
    out.rows("divergence", &rows)?;
    if g.points {
        out.rows("pca_points", &point_rows(&pca_2d(&traces, layers[0])?))?;
    }
    Ok(())
}

fn layer_free(kind: FeatureKind) -> bool {
    matches!(
        kind,
        FeatureKind::StepCountOnly | FeatureKind::LogitLens { .. }
    )
}

pub fn predict(s: &Settings, traces_path: &Path, out: &Output) -> Result<()> {
    let (meta, traces) = load(traces_path)?;
    let p = &s.predict;
    let layers = p.layers.resolve(meta.n_layers)?;
    let mut rows: Vec<PredictorRow> = Vec::new();
    for &seed in &p.seeds {
        let cfg = PredictorConfig {
            seed,
            ..p.config.clone()
        };
        for &kind in &p.features {
            let ls: &[usize] = if layer_free(kind) {
                &layers[..1]
            } else {
                &layers
            };
            for &layer in ls {
                let spec = FeatureSpec {
                    kind,
                    layer,
                    pca_r: p.pca_r,
                };
                let row = train_predictor(&traces, &spec, &cfg)
                    .with_context(|| format!("feature {}", kind.label()))?
                    .row;
                println!(
                    "{:<16} layer {:>3} seed {seed:>5}  test AUC {:.3}  C {}",
                    row.feature, row.layer, row.test_auc, row.selected_c
                );
                rows.push(row);
            }
        }
    }
    out.rows("predictor", &predictor_rows(&rows))?;
    out.rows("predictor_cv", &cv_rows(&rows, &p.config.c_grid))?;

    let mut best: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for r in &rows {
        let e = best
            .entry(r.feature.clone())
            .or_insert((r.layer, r.test_auc));
        if r.test_auc > e.1 {
            *e = (r.layer, r.test_auc);
        }
    }
    let audit = if p.length_audit {
        let kind = p.features.iter().copied().find(|k| !layer_free(*k));
        match kind {
            Some(kind) => {
                let spec = FeatureSpec {
                    kind,
                    layer: *layers.last().expect("non-empty"),
                    pca_r: p.pca_r,
                };
                let cfg = PredictorConfig {
                    seed: p.seeds[0],
                    ..p.config.clone()
                };
                let a = length_balanced_audit(&traces, &spec, &cfg)?;
                println!(
                    "length-balanced audit ({}): {:.3} -> {:.3}",
                    kind.label(),
                    a.auc_original,
                    a.auc_balanced
                );
                Some(
                    json!({ "feature": kind.label(), "layer": spec.layer, "audit": a, "drop": a.drop() }),
                )
            }
            None => None,
        }
    } else {
        None
    };
    let best: BTreeMap<String, serde_json::Value> = best
        .into_iter()
        .map(|(k, (l, a))| (k, json!({ "best_layer": l, "best_auc": a })))
        .collect();
    write_json(
        &out.path("predictor_summary.json"),
        &json!({ "best": best, "length_audit": audit }),
    )?;
    Ok(())
}

pub fn steer_direction(s: &Settings, traces_path: &Path, out: &Output) -> Result<()> {
    let (meta, traces) = load(traces_path)?;
    let dir = build_direction(&traces, &meta.dataset_id, s.steer.aggregation)?;
    let path = out.path("direction.rsdr");
    write_direction(&dir, &path)?;
    println!(
        "direction from {} prompts, {} layers x {} dims -> {}",
        dir.n_prompts,
        dir.n_layers(),
        dir.dim(),
        path.display()
    );
    Ok(())
}

pub fn steer_ideal(
    s: &Settings,
    traces_path: &Path,
    heldout_path: &Path,
    out: &Output,
) -> Result<()> {
    let (_, traces) = load(traces_path)?;
    let (_, heldout) = load(heldout_path)?;
    let ideal = fit_ideal_trajectory(&traces, &s.steer.ideal)?;
    let correct: Vec<TraceExample> = heldout
        .iter()
        .filter(|t| t.correctness == Correctness::Correct)
        .cloned()
        .collect();
    let incorrect: Vec<TraceExample> = heldout
        .iter()
        .filter(|t| t.correctness == Correctness::Incorrect)
        .cloned()
        .collect();
    let th = calibrate_thresholds(&ideal, &correct, &incorrect, &s.steer.calibration)?;
    let ideal = ideal.with_thresholds(&th)?;
    let path = out.path("ideal.ridt");
    write_ideal(&ideal, &path)?;
    write_json(&out.path("thresholds.json"), &th)?;
    println!(
        "ideal trajectory: {} steps, rank {}, layer {} -> {}",
        ideal.n_steps(),
        ideal.rank(),
        ideal.layer,
        path.display()
    );
    Ok(())
}

pub fn steer_length(s: &Settings, direction_path: &Path, out: &Output) -> Result<()> {
    let dir = read_direction(direction_path)
        .with_context(|| format!("reading {}", direction_path.display()))?;
    let expected = corpus_meta(&s.harness).dataset_id;
    if dir.corpus_id.starts_with("harness-seed-") && dir.corpus_id != expected {
        eprintln!(
            "warning: direction was built from `{}` but the harness world is `{expected}`",
            dir.corpus_id
        );
    }
    let world = build_world(&s.harness)?;
    let st = &s.steer;
    let spec = LengthSweepSpec {
        alphas: st.alphas.clone(),
        layer_set: st.layer_set.clone(),
        apply_at: st.apply_at,
        n_episodes: st.n_episodes,
        seed: st.episode_seed,
    };
    let rows = length_sweep(&world, &s.harness, &dir, &spec)?;
    for r in &rows {
        println!(
            "alpha {:+.2}  mean steps {:.3}  accuracy {:.3}  loop ratio {:.3}",
            r.alpha, r.mean_steps, r.accuracy, r.loop_ratio
        );
    }
    out.rows("length_sweep", &rows)?;
    Ok(())
}

pub fn steer_gated(s: &Settings, ideal_path: &Path, out: &Output) -> Result<()> {
    let ideal = Arc::new(
        read_ideal(ideal_path).with_context(|| format!("reading {}", ideal_path.display()))?,
    );
    let world = build_world(&s.harness)?;
    let st = &s.steer;
    let gate = Gate::Trajectory(ideal.clone());
    let iv = HarnessIntervention::TrajectoryCorrection {
        ideal,
        alpha_corr: st.alpha_corr,
    };
    let range = EpisodeRange {
        n_episodes: st.n_episodes,
        seed: st.episode_seed,
    };
    let gate = (st.mode == PolicyMode::Gated).then_some(&gate);
    let rep = run_gated_policy_harness(&world, &s.harness, gate, &iv, st.mode, range)?;
    let long = rep.subset(|p| p.target_steps >= st.long_min_steps)?;
    let short = rep.subset(|p| p.target_steps <= st.short_max_steps)?;
    let arms = [
        ("all".to_owned(), &rep.outcome),
        (format!("k_ge_{}", st.long_min_steps), &long),
        (format!("k_le_{}", st.short_max_steps), &short),
    ];
    let rows: Vec<_> = arms.iter().map(|(a, o)| outcome_row(a, o)).collect();
    for r in &rows {
        println!(
            "{:<8} n {:>5}  flagged {:>5}  accuracy {:.4} -> {:.4} ({:+.2} points)",
            r.arm,
            r.n_total,
            r.n_flagged,
            r.accuracy_baseline,
            r.accuracy_policy,
            r.accuracy_delta * 100.0
        );
    }
    out.rows("policy_outcome", &rows)?;
    out.rows("policy_pairs", &rep.pairs)?;
    println!(
        "unflagged episodes whose outcome changed: {}",
        rep.silent_mismatches
    );
    Ok(())
}

pub fn steer_outcomes(
    s: &Settings,
    traces_path: &Path,
    outcomes_path: &Path,
    ideal_path: Option<&Path>,
    out: &Output,
) -> Result<()> {
    let (_, traces) = load(traces_path)?;
    let outcomes = read_outcome_csv(outcomes_path)
        .with_context(|| format!("reading {}", outcomes_path.display()))?;
    let gate = match ideal_path {
        Some(p) => Some(Gate::Trajectory(Arc::new(
            read_ideal(p).with_context(|| format!("reading {}", p.display()))?,
        ))),
        None => None,
    };
    let o = run_gated_policy_traces(&traces, gate.as_ref(), &outcomes, s.steer.mode)?;
    println!(
        "n {}  flagged {}  accuracy {:.4} -> {:.4} ({:+.2} points), corrected {}, reverted {}",
        o.n_total,
        o.n_flagged,
        o.accuracy_baseline,
        o.accuracy_policy,
        o.accuracy_delta() * 100.0,
        o.corrected,
        o.reverted
    );
    out.rows("policy_outcome", &[outcome_row("all", &o)])?;
    Ok(())
}
