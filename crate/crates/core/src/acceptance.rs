//! Reproduction suite: every acceptance criterion as a timed, deterministic
//! check with a one-line verdict.
//!
//! Numerical primitives are compared with independent brute-force oracles;
//! harness properties are checked on corpora drawn from fixed seeds; one
//! arithmetic identity is checked against externally reported counts.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::divergence_report;
use crate::harness::{build_world, generate_corpus_in, HarnessConfig};
use crate::predictor::{
    layer_sweep_auc, length_balanced_audit, train_predictor, FeatureKind, FeatureSpec,
    PredictorConfig,
};
use crate::probes::{shuffled_control, sweep, ProbeSpec, ProbeTarget};
use crate::stats::{
    fit_pca, logistic_gradient, roc_auc, ClassWeighting, Metric, DEFAULT_RESAMPLES,
};
use crate::steering::{
    build_direction, calibrate_thresholds, fit_ideal_trajectory, length_sweep,
    run_gated_policy_harness, trajectory_steer_step, Aggregation, CalibrationConfig,
    DeviationState, EpisodeRange, Gate, HarnessIntervention, IdealConfig, IdealTrajectory,
    LengthSweepSpec, PolicyMode, PolicyOutcome,
};
use crate::trace::{decode_traces, encode_traces, Correctness, Selector, TraceExample};

/// Brute-force references the suite compares against.
pub mod oracles {
    use ndarray::{Array2, ArrayView2};

    /// Pairwise AUC: P(score_pos > score_neg) + ½ P(tie), in O(n²).
    pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    /// Central differences of `f` at `theta` with step `h·max(1, |θ_i|)`.
    pub fn central_difference(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
        let mut t = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                let step = h * theta[i].abs().max(1.0);
                t[i] = theta[i] + step;
                let up = f(&t);
                t[i] = theta[i] - step;
                let down = f(&t);
                t[i] = theta[i];
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    /// Elementwise `|a − b| / max(|a|, |b|, floor)`, maximized.
    pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    /// Weighted logistic objective written out directly.
    pub fn logistic_objective(
        x: ArrayView2<'_, f64>,
        y: &[bool],
        theta: &[f64],
        c: f64,
        balanced: bool,
    ) -> f64 {
        let n = x.nrows() as f64;
        let n_pos = y.iter().filter(|&&v| v).count() as f64;
        let d = x.ncols();
        let mut loss = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            let z: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + theta[d];
            let t = if y[i] { 1.0 } else { 0.0 };
            let s = if !balanced {
                1.0
            } else if y[i] {
                n / (2.0 * n_pos)
            } else {
                n / (2.0 * (n - n_pos))
            };
            // log(1 + e^z) − t·z
            let softplus = if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            };
            loss += s * (softplus - t * z);
        }
        let w2: f64 = theta[..d].iter().map(|v| v * v).sum();
        loss / n + w2 / (2.0 * c * n)
    }

    /// `max |U Uᵀ − I|`.
    pub fn orthonormality_error(u: &Array2<f64>) -> f64 {
        let g = u.dot(&u.t());
        let mut worst = 0.0f64;
        for ((i, j), v) in g.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
        worst
    }

    /// Every value is at least the running maximum so far minus `slack`.
    pub fn non_decreasing_with_slack(values: &[f64], slack: f64) -> bool {
        let mut best = f64::NEG_INFINITY;
        for &v in values {
            if v < best - slack {
                return false;
            }
            best = best.max(v);
        }
        true
    }

    /// Sample standard deviation (n − 1).
    pub fn sample_std(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// 500-example corpora where that keeps the checks meaningful.
    pub quick: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 42,
            quick: false,
        }
    }
}

impl SuiteConfig {
    fn scaled(&self, full: usize, quick: usize) -> usize {
        if self.quick {
            quick
        } else {
            full
        }
    }

    fn harness(&self) -> HarnessConfig {
        HarnessConfig {
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// `(id, name, runtime budget in seconds)`.
pub const CRITERIA: [(u32, &str, f64); 12] = [
    (1, "AUC oracle", 5.0),
    (2, "logistic gradient check", 5.0),
    (3, "PCA orthonormality, reconstruction and signs", 5.0),
    (4, "trace round trip and corruption detection", 30.0),
    (5, "depth disentanglement", 120.0),
    (6, "shuffled-label control", 60.0),
    (7, "early invariance and late divergence", 120.0),
    (8, "predictor gap", 180.0),
    (9, "gated accounting identity", 1.0),
    (10, "length control", 120.0),
    (11, "trajectory-gated correction", 180.0),
    (12, "steering cost budget", 30.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub name: String,
    /// Checks held and the run finished within budget.
    pub passed: bool,
    pub checks_passed: bool,
    pub elapsed_secs: f64,
    pub budget_secs: f64,
    pub detail: String,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {} ({:.2} s / {:.0} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed_secs,
            self.budget_secs,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub quick: bool,
    pub outcomes: Vec<CriterionOutcome>,
    pub total_secs: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failed(&self) -> Vec<u32> {
        self.outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| o.id)
            .collect()
    }
}

type Check = Result<(bool, String)>;

pub fn run_criterion(id: u32, cfg: &SuiteConfig) -> Result<CriterionOutcome> {
    let &(_, name, budget) = CRITERIA
        .iter()
        .find(|c| c.0 == id)
        .ok_or_else(|| Error::InvalidInput(format!("no criterion {id}")))?;
    let start = Instant::now();
    let res: Check = match id {
        1 => auc_oracle(cfg),
        2 => gradient_check(cfg),
        3 => pca_checks(cfg),
        4 => trace_round_trip(cfg),
        5 => depth_disentanglement(cfg),
        6 => shuffled_labels(cfg),
        7 => divergence(cfg),
        8 => predictor_gap(cfg),
        9 => table4_identity(),
        10 => length_control(cfg),
        11 => gated_correction(cfg),
        _ => steering_cost(cfg),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let (ok, mut detail) = match res {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    if elapsed > budget {
        detail.push_str(&format!(
            "; over runtime budget ({elapsed:.1} s > {budget:.0} s)"
        ));
    }
    Ok(CriterionOutcome {
        id,
        name: name.to_owned(),
        passed: ok && elapsed <= budget,
        checks_passed: ok,
        elapsed_secs: elapsed,
        budget_secs: budget,
        detail,
    })
}

/// Run the selected criteria (all when `ids` is empty), reporting each as it
/// finishes.
pub fn run_suite(
    cfg: &SuiteConfig,
    ids: &[u32],
    mut on_result: impl FnMut(&CriterionOutcome),
) -> Result<SuiteReport> {
    let start = Instant::now();
    let selected: Vec<u32> = if ids.is_empty() {
        CRITERIA.iter().map(|c| c.0).collect()
    } else {
        ids.to_vec()
    };
    let mut outcomes = Vec::new();
    for id in selected {
        let o = run_criterion(id, cfg)?;
        on_result(&o);
        outcomes.push(o);
    }
    Ok(SuiteReport {
        seed: cfg.seed,
        quick: cfg.quick,
        outcomes,
        total_secs: start.elapsed().as_secs_f64(),
    })
}

fn rng_for(cfg: &SuiteConfig, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn auc_oracle(cfg: &SuiteConfig) -> Check {
    let mut rng = rng_for(cfg, 1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=200usize);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse rounding produces ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * 4.0).round() / 4.0)
            .collect();
        let got = roc_auc(&scores, &labels)?;
        worst = worst.max((got - oracles::brute_force_auc(&scores, &labels)).abs());
    }
    Ok((
        worst <= 1e-12,
        format!("max |AUC − brute force| = {worst:.2e} over 100 instances"),
    ))
}

fn gradient_check(cfg: &SuiteConfig) -> Check {
    let mut rng = rng_for(cfg, 2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..=60usize);
        let d = rng.random_range(1..=12usize);
        let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let mut y: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        y[0] = true;
        y[1] = false;
        let theta: Vec<f64> = (0..=d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let c = 10f64.powf(rng.random_range(-2.0..2.0));
        let balanced = rng.random::<bool>();
        let weighting = if balanced {
            ClassWeighting::Balanced
        } else {
            ClassWeighting::None
        };
        let (gw, gb) = logistic_gradient(x.view(), &y, &theta[..d], theta[d], c, weighting)?;
        let mut analytic = gw;
        analytic.push(gb);
        let numeric = oracles::central_difference(
            |t| oracles::logistic_objective(x.view(), &y, t, c, balanced),
            &theta,
            1e-5,
        );
        worst = worst.max(oracles::max_relative_error(&analytic, &numeric, 1e-6));
    }
    Ok((
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 100 instances"),
    ))
}

fn pca_checks(cfg: &SuiteConfig) -> Check {
    let mut rng = rng_for(cfg, 3);
    let (mut orth, mut recon) = (0.0f64, 0.0f64);
    let mut signs_ok = true;
    let mut repeat_ok = true;
    for i in 0..40 {
        let n = rng.random_range(5..=80usize);
        let d = rng.random_range(2..=40usize);
        let x = if i % 2 == 0 {
            Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
        } else {
            // Rank-k data plus an offset.
            let k = rng.random_range(1..=d.min(n - 1));
            let a = Array2::from_shape_fn((n, k), |_| rng.sample::<f64, _>(StandardNormal));
            let b = Array2::from_shape_fn((k, d), |_| rng.sample::<f64, _>(StandardNormal));
            let offset = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let x = a.dot(&b) + &offset;
            let p = fit_pca(x.view(), k)?;
            for row in x.rows() {
                let back = p.reconstruct(p.project(row).view());
                recon = recon.max((&back - &row).iter().fold(0.0, |m, v| m.max(v.abs())));
            }
            x
        };
        let r = rng.random_range(1..=d.min(n - 1));
        let p = fit_pca(x.view(), r)?;
        orth = orth.max(oracles::orthonormality_error(&p.components));
        for row in p.components.rows() {
            let (idx, _) = row
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bv), (j, v)| {
                    if v.abs() > bv {
                        (j, v.abs())
                    } else {
                        (bi, bv)
                    }
                });
            signs_ok &= row[idx] >= 0.0;
        }
        repeat_ok &= fit_pca(x.view(), r)?.same_basis(&p);
    }
    let ok = orth <= 1e-8 && recon <= 1e-8 && signs_ok && repeat_ok;
    Ok((
        ok,
        format!(
            "orthonormality {orth:.2e}, rank-deficient reconstruction {recon:.2e}, \
             sign convention {signs_ok}, repeat fits identical {repeat_ok}"
        ),
    ))
}

fn trace_round_trip(cfg: &SuiteConfig) -> Check {
    let hc = cfg.harness();
    let world = build_world(&hc)?;
    let n = cfg.scaled(2000, 500);
    let (meta, traces) = generate_corpus_in(&world, &hc, n, hc.seed);
    let bytes = encode_traces(&meta, &traces)?;
    let (meta2, back) = decode_traces(&bytes)?;
    let identical = meta2 == meta && back == traces && encode_traces(&meta2, &back)? == bytes;
    let mut rng = rng_for(cfg, 4);
    let mut missed = 0;
    for _ in 0..200 {
        let mut bad = bytes.clone();
        let pos = rng.random_range(0..bad.len());
        bad[pos] ^= rng.random_range(1..=255u8);
        if decode_traces(&bad).is_ok() {
            missed += 1;
        }
    }
    Ok((
        identical && missed == 0,
        format!(
            "{n} examples ({} bytes) round trip bit-identical: {identical}; \
             undetected corruptions: {missed}/200",
            bytes.len()
        ),
    ))
}

fn default_corpus(cfg: &SuiteConfig) -> Result<(HarnessConfig, Vec<TraceExample>)> {
    let hc = cfg.harness();
    let world = build_world(&hc)?;
    let n = cfg.scaled(2000, 500);
    Ok((hc.clone(), generate_corpus_in(&world, &hc, n, hc.seed).1))
}

fn depth_disentanglement(cfg: &SuiteConfig) -> Check {
    let (hc, traces) = default_corpus(cfg)?;
    let targets: Vec<ProbeTarget> = (1..=hc.max_steps).map(ProbeTarget::Step).collect();
    let layers: Vec<usize> = (0..hc.n_layers).collect();
    let rep = sweep(
        &traces,
        &targets,
        &layers,
        &ProbeSpec::new(ProbeTarget::Term, 0),
    )?;
    let mut ok = true;
    let mut notes = Vec::new();
    for &t in &targets {
        let row = rep.row(t);
        if row.iter().any(|c| c.is_none()) {
            if cfg.quick {
                notes.push(format!("{t} skipped (too few instances)"));
                continue;
            }
            ok = false;
            notes.push(format!("{t} has untrainable cells"));
            continue;
        }
        let acc: Vec<f64> = row.into_iter().flatten().collect();
        if !oracles::non_decreasing_with_slack(&acc, 0.02) {
            ok = false;
            notes.push(format!("{t} not monotone: {acc:.3?}"));
        }
    }
    let step1: Vec<f64> = rep
        .row(ProbeTarget::Step(1))
        .into_iter()
        .flatten()
        .collect();
    let min1 = step1.iter().copied().fold(f64::INFINITY, f64::min);
    ok &= step1.len() == layers.len() && min1 >= 0.99;
    let last = hc.max_steps;
    notes.push(format!(
        "step1 min {min1:.3}; step{last} by layer {:.3?}",
        rep.row(ProbeTarget::Step(last))
    ));
    Ok((ok, notes.join("; ")))
}

fn shuffled_labels(cfg: &SuiteConfig) -> Check {
    let (hc, traces) = default_corpus(cfg)?;
    let top = hc.n_layers - 1;
    let mut ok = true;
    let mut notes = Vec::new();
    for target in [ProbeTarget::Step(2), ProbeTarget::Term] {
        let spec = ProbeSpec {
            balance_classes: true,
            ..ProbeSpec::new(target, top)
        };
        let s = shuffled_control(&traces, &spec, 10, cfg.seed)?;
        ok &= (0.45..=0.55).contains(&s.mean);
        notes.push(format!("{target}: mean {:.3} (sd {:.3})", s.mean, s.std));
    }
    Ok((ok, notes.join("; ")))
}

fn divergence(cfg: &SuiteConfig) -> Check {
    let (hc, traces) = default_corpus(cfg)?;
    let top = hc.n_layers - 1;
    let metrics = [Metric::Euclidean, Metric::Cosine];
    let early = (Selector::Step(1), Selector::Step(2));
    let late = (Selector::Last, Selector::Term);
    let rep = divergence_report(
        &traces,
        &[early, late],
        &metrics,
        top,
        DEFAULT_RESAMPLES,
        cfg.seed,
        "all",
    )?;
    let mut ok = true;
    let mut notes = Vec::new();
    for m in metrics {
        let e = rep.find(early.0, early.1, m).expect("row present");
        let l = rep.find(late.0, late.1, m).expect("row present");
        let e_ok = e.ci_delta.contains(0.0);
        let l_ok = !l.ci_delta.contains(0.0) && l.significant;
        ok &= e_ok && l_ok;
        notes.push(format!(
            "{}: early Δ {:+.4} [{:+.4}, {:+.4}], late Δ {:+.4} [{:+.4}, {:+.4}] disjoint {}",
            m.as_str(),
            e.delta_ic,
            e.ci_delta.lower95,
            e.ci_delta.upper95,
            l.delta_ic,
            l.ci_delta.lower95,
            l.ci_delta.upper95,
            l.significant
        ));
    }

    let null = HarnessConfig {
        drift_scale: 0.0,
        ..hc
    };
    let world = build_world(&null)?;
    let transitions = [early, (Selector::SecondLast, Selector::Last), late];
    let n = cfg.scaled(2000, 500);
    // A transition counts as significant when flagged under both metrics.
    let (mut clean, mut clean_per_metric) = (0, 0);
    for run in 0..20u64 {
        let traces = generate_corpus_in(&world, &null, n, cfg.seed.wrapping_add(1000 + run)).1;
        let rep = divergence_report(
            &traces,
            &transitions,
            &metrics,
            top,
            DEFAULT_RESAMPLES,
            cfg.seed.wrapping_add(run),
            "null",
        )?;
        let flagged = |t: &str| {
            rep.rows
                .iter()
                .filter(|r| r.transition == t && r.significant)
                .count()
                == metrics.len()
        };
        if !rep.rows.iter().any(|r| flagged(&r.transition)) {
            clean += 1;
        }
        if rep.rows.iter().all(|r| !r.significant) {
            clean_per_metric += 1;
        }
    }
    ok &= clean >= 19;
    notes.push(format!(
        "η=0: {clean}/20 runs with no transition significant under both metrics \
         ({clean_per_metric}/20 with no single-metric flag)"
    ));
    Ok((ok, notes.join("; ")))
}

/// Null-corpus size, kept in quick mode: smaller test sets make the null AUC
/// band too noisy to check.
const NULL_CORPUS: usize = 6000;

fn predictor_gap(cfg: &SuiteConfig) -> Check {
    let (hc, traces) = default_corpus(cfg)?;
    let top = hc.n_layers - 1;
    let pc = PredictorConfig {
        seed: cfg.seed,
        ..Default::default()
    };
    let late = FeatureSpec::new(FeatureKind::LateTraj, top);
    let early = FeatureSpec::new(
        FeatureKind::EarlyConcat {
            include_step3: false,
        },
        top,
    );
    let a_late = train_predictor(&traces, &late, &pc)?.row.test_auc;
    let a_early = train_predictor(&traces, &early, &pc)?.row.test_auc;
    let gap_ok = a_late - a_early >= 0.15;

    let null = HarnessConfig {
        drift_scale: 0.0,
        ..hc.clone()
    };
    let world = build_world(&null)?;
    let null_traces = generate_corpus_in(&world, &null, NULL_CORPUS, null.seed).1;
    let n_late = train_predictor(&null_traces, &late, &pc)?.row.test_auc;
    let n_early = train_predictor(&null_traces, &early, &pc)?.row.test_auc;
    let null_ok = [n_late, n_early].iter().all(|a| (0.45..=0.6).contains(a));

    let audit = length_balanced_audit(&traces, &late, &pc)?;
    let audit_ok = audit.drop() <= 0.05;

    let layers: Vec<usize> = (0..hc.n_layers).collect();
    let mut best = Vec::new();
    for seed in [42u64, 123, 456] {
        let rep = layer_sweep_auc(
            &traces,
            &late,
            &PredictorConfig { seed, ..pc.clone() },
            &layers,
        )?;
        best.push(rep.best_auc);
    }
    let sd = oracles::sample_std(&best);
    let ok = gap_ok && null_ok && audit_ok && sd <= 0.05;
    Ok((
        ok,
        format!(
            "late_traj {a_late:.3} vs early_concat {a_early:.3} (gap {:.3}); η=0 {n_late:.3}/{n_early:.3}; \
             length-balanced drop {:.3}; best-layer AUC {best:.3?} sd {sd:.3}",
            a_late - a_early,
            audit.drop()
        ),
    ))
}

fn table4_identity() -> Check {
    // 1319 problems; 90 flagged incorrect plus 72 flagged correct (12.3 %);
    // 26 corrected, 14 reverted.
    let pairs = PolicyOutcome::synthetic_pairs(1319, 1000, 90, 72, 26, 14)?;
    let o = PolicyOutcome::from_pairs(&pairs)?;
    let points = o.accuracy_delta() * 100.0;
    let ok = o.accounting_holds() && (points - 0.91).abs() <= 0.01;
    Ok((
        ok,
        format!(
            "gated delta {points:+.4} points (reported +0.91), flagged {}",
            o.n_flagged
        ),
    ))
}

fn length_control(cfg: &SuiteConfig) -> Check {
    let (hc, traces) = default_corpus(cfg)?;
    let world = build_world(&hc)?;
    let dir = build_direction(&traces, "harness", Aggregation::PerPrompt)?;
    let spec = LengthSweepSpec {
        alphas: vec![-0.5, -0.4, -0.2, 0.0, 0.2, 0.4, 0.5],
        n_episodes: cfg.scaled(500, 200),
        seed: cfg.seed.wrapping_add(9),
        ..Default::default()
    };
    let rows = length_sweep(&world, &hc, &dir, &spec)?;
    let core: Vec<_> = rows
        .iter()
        .filter(|r| r.alpha.abs() <= 0.4 + 1e-12)
        .collect();
    let monotone = core.windows(2).all(|w| w[1].mean_steps < w[0].mean_steps);
    let loops_ok = rows.iter().all(|r| r.loop_ratio < 0.01);
    let base = core
        .iter()
        .find(|r| r.alpha == 0.0)
        .expect("α = 0 row")
        .accuracy;
    let acc_change = core
        .iter()
        .map(|r| (r.accuracy - base).abs())
        .fold(0.0, f64::max);
    let ok = monotone && loops_ok && acc_change <= 0.02;
    let steps: Vec<String> = rows
        .iter()
        .map(|r| format!("{:+.1}:{:.3}", r.alpha, r.mean_steps))
        .collect();
    let max_loop = rows.iter().map(|r| r.loop_ratio).fold(0.0, f64::max);
    Ok((
        ok,
        format!(
            "mean steps {}; max loop ratio {max_loop:.3}; max accuracy change {:.1} points",
            steps.join(" "),
            acc_change * 100.0
        ),
    ))
}

/// Runs at full size in quick mode too; it takes under a second.
fn gated_correction(cfg: &SuiteConfig) -> Check {
    let hc = cfg.harness();
    let world = build_world(&hc)?;
    let n = 2000;
    let train = generate_corpus_in(&world, &hc, n, cfg.seed.wrapping_add(1)).1;
    let held = generate_corpus_in(&world, &hc, n, cfg.seed.wrapping_add(2)).1;
    let ideal = fit_ideal_trajectory(&train, &IdealConfig::default())?;
    let (hc_ok, hi): (Vec<TraceExample>, Vec<TraceExample>) = held
        .into_iter()
        .filter(|t| t.correctness != Correctness::Unknown)
        .partition(|t| t.correctness == Correctness::Correct);
    let th = calibrate_thresholds(&ideal, &hc_ok, &hi, &CalibrationConfig::default())?;
    let ideal = Arc::new(ideal.with_thresholds(&th)?);
    let iv = HarnessIntervention::TrajectoryCorrection {
        ideal: ideal.clone(),
        alpha_corr: 0.5,
    };
    let range = EpisodeRange {
        n_episodes: 3000,
        seed: cfg.seed.wrapping_add(7),
    };
    let rep = run_gated_policy_harness(
        &world,
        &hc,
        Some(&Gate::Trajectory(ideal)),
        &iv,
        PolicyMode::Gated,
        range,
    )?;
    let long = rep.subset(|p| p.target_steps >= 6)?;
    let short = rep.subset(|p| p.target_steps <= 4)?;
    let silent = rep.pairs.iter().filter(|p| !p.fired).count();
    let ok = long.accuracy_delta() >= 0.03
        && long.preservation_rate >= 0.97
        && short.accuracy_delta().abs() <= 0.01
        && silent > 0
        && rep.silent_mismatches == 0;
    Ok((
        ok,
        format!(
            "K≥6: {:+.2} points (n {}, preservation {:.3}); K≤4: {:+.2} points (n {}); \
             no-fire episodes {silent}, changed {}",
            long.accuracy_delta() * 100.0,
            long.n_total,
            long.preservation_rate,
            short.accuracy_delta() * 100.0,
            short.n_total,
            rep.silent_mismatches
        ),
    ))
}

/// Synthetic `d`-dimensional ideal trajectory whose thresholds always fire.
pub fn synthetic_ideal(d: usize, r: usize, r_steer: usize, seed: u64) -> Result<IdealTrajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((r + 8, d), |_| rng.sample::<f64, _>(StandardNormal));
    let basis = fit_pca(x.view(), r)?;
    let means = Array2::from_shape_fn((1, r), |_| rng.sample::<f64, _>(StandardNormal));
    Ok(IdealTrajectory {
        basis,
        layer: 0,
        means,
        sigmas: vec![1.0],
        counts: vec![r + 8],
        local_thresholds: vec![Some(0.0)],
        cumulative_thresholds: vec![None],
        r_steer,
        truncated_at: None,
    })
}

fn steering_cost(cfg: &SuiteConfig) -> Check {
    let ideal = synthetic_ideal(4096, 64, 32, cfg.seed)?;
    let mut rng = rng_for(cfg, 12);
    let states: Vec<Array1<f64>> = (0..16)
        .map(|_| Array1::from_shape_fn(4096, |_| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let iterations = 2000;
    let mut fired = 0;
    let start = Instant::now();
    for i in 0..iterations {
        let mut s = states[i % states.len()].clone();
        let mut dev = DeviationState::default();
        if trajectory_steer_step(&ideal, s.view_mut(), &mut dev, 0.5).is_some() {
            fired += 1;
        }
    }
    let per = start.elapsed().as_secs_f64() / iterations as f64;
    Ok((
        per < 1e-3 && fired == iterations,
        format!(
            "{:.1} µs per boundary at d=4096, rank 64 projection, rank 32 update",
            per * 1e6
        ),
    ))
}
