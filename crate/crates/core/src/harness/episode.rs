use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HarnessConfig, HarnessWorld};
use crate::error::Result;
use crate::stats::sigmoid;
use crate::trace::{BoundaryRecord, Correctness, TraceExample, TraceMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TermRule,
    StepCap,
    LoopDetected,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::TermRule => "term_rule",
            Termination::StepCap => "step_cap",
            Termination::LoopDetected => "loop_detected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Additive,
    TrajectoryCorrection,
    External,
}

/// What a policy did at one boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub kind: InterventionKind,
    pub magnitude: f64,
    /// Persistent edits change the latent reasoning state carried to later
    /// steps; transient edits only affect the current boundary.
    pub persistent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub step_index: u32,
    pub kind: InterventionKind,
    pub magnitude: f64,
}

/// Read-only context handed to a policy at each step boundary.
#[derive(Debug)]
pub struct BoundaryView<'a> {
    pub step_index: u32,
    pub world: &'a HarnessWorld,
    pub config: &'a HarnessConfig,
    /// Top-layer states of the earlier boundaries, as emitted.
    pub history: &'a [Array1<f64>],
    /// Termination score before any intervention at this boundary.
    pub pre_score: f64,
    /// Whether the run would stop here without intervention.
    pub would_terminate: bool,
}

/// Closed-loop hook: may edit the `[n_layers × dim]` state in place.
///
/// Returning `None` means the state is left untouched; the runner then
/// discards any edits so that non-firing runs reproduce the baseline.
pub trait SteeringPolicy {
    fn begin_episode(&mut self) {}
    fn on_boundary(
        &mut self,
        view: &BoundaryView<'_>,
        state: &mut Array2<f64>,
    ) -> Option<Intervention>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trace: TraceExample,
    pub intervention_log: Vec<InterventionRecord>,
    pub terminated_by: Termination,
    /// Sampled target step count.
    pub target_steps: u32,
    pub drawn_incorrect: bool,
    pub latent_error_norm: f64,
    /// Latent error the run would carry with no interventions at all.
    pub planned_error_norm: f64,
    /// Termination score at each step boundary, after any intervention.
    pub term_scores: Vec<f64>,
}

impl Episode {
    pub fn correct(&self) -> bool {
        self.trace.correctness == Correctness::Correct
    }

    pub fn step_count(&self) -> u32 {
        self.trace.step_count
    }

    pub fn fired(&self) -> bool {
        !self.intervention_log.is_empty()
    }
}

/// Independent, reproducible RNG stream for episode `index` of a corpus.
pub fn episode_rng(corpus_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(index + 1);
    rng
}

fn sample_target(cfg: &HarnessConfig, u: f64) -> u32 {
    let mut acc = 0.0;
    for &(k, p) in &cfg.step_count_distribution {
        acc += p;
        if u < acc {
            return k;
        }
    }
    cfg.step_count_distribution.last().expect("validated").0
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn aux_features(top: ArrayView1<'_, f64>, world: &HarnessWorld) -> BTreeMap<String, f64> {
    let a = top.dot(&world.term_centroid);
    let p = sigmoid(6.0 * (a - 0.5));
    let q = 1.0 - p;
    let h = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    BTreeMap::from([
        ("entropy".to_owned(), h(p) + h(q)),
        ("answer_rank".to_owned(), 1.0 + (9.0 * q).round()),
        ("top1_prob".to_owned(), p.max(q)),
    ])
}

fn to_f32(state: &Array2<f64>) -> Array2<f32> {
    state.mapv(|v| v as f32)
}

/// Run one episode of the closed-loop process.
///
/// The number and order of random draws per boundary is independent of the
/// policy, so a policy that never fires reproduces the baseline exactly.
pub fn run_episode(
    world: &HarnessWorld,
    cfg: &HarnessConfig,
    mut policy: Option<&mut dyn SteeringPolicy>,
    rng: &mut ChaCha8Rng,
    example_id: &str,
) -> Episode {
    let l = world.n_layers();
    let d = world.dim();
    let m = world.manifold_dim();
    let top = l - 1;
    let gamma = Array1::from(world.gamma.clone());
    let one_minus = gamma.mapv(|g| 1.0 - g);
    let g = &world.shared_early_state;
    let m_term = &world.term_centroid;

    let target = sample_target(cfg, rng.random::<f64>());
    let drawn_incorrect = rng.random::<f64>() < cfg.incorrect_fraction;
    let k_star = target
        + if drawn_incorrect {
            cfg.incorrect_extra_steps
        } else {
            0
        };
    let window_start = cfg.drift_onset.min(k_star).max(1);
    let window_len = (k_star - window_start + 1) as f64;
    let drift_step = cfg.drift_scale / window_len;
    let in_window = |k: u32| drawn_incorrect && k >= window_start && k <= k_star;
    let toward_term = |k: u32| {
        let u = m_term - &world.centroid(k);
        let n = u.dot(&u).sqrt();
        u / n
    };

    let mut latent = Array1::<f64>::zeros(d);
    let mut planned = Array1::<f64>::zeros(d);
    let mut history: Vec<Array1<f64>> = Vec::new();
    let mut boundaries = Vec::new();
    let mut log = Vec::new();
    let mut prev_raw: Option<Array2<f64>> = None;
    let mut term_scores = Vec::new();
    let eps = cfg.loop_epsilon();
    let cap = cfg.step_cap();

    if let Some(p) = policy.as_deref_mut() {
        p.begin_episode();
    }

    let mut k = 0u32;
    let terminated_by = loop {
        k += 1;
        let noise = gaussian_matrix(rng, l, d);
        let lateral = Array1::from_shape_fn(m, |_| rng.sample::<f64, _>(StandardNormal));

        if in_window(k) {
            let u = toward_term(k);
            let mut xi = world.basis.dot(&lateral);
            let along = xi.dot(&u);
            xi.scaled_add(-along, &u);
            let mut drift = u * (-drift_step);
            drift.scaled_add(drift_step * cfg.lateral_scale / (m as f64).sqrt(), &xi);
            latent += &drift;
            planned += &drift;
        }

        let centroid = world.centroid(k);
        let (raw, noise_scale) = match (&prev_raw, k > cfg.max_steps) {
            (Some(prev), true) => {
                let s = cfg.stall_noise * cfg.noise_scale;
                (prev + &(&noise * s), s)
            }
            _ => {
                let mut h = Array2::<f64>::zeros((l, d));
                for (layer, mut row) in h.axis_iter_mut(Axis(0)).enumerate() {
                    row.scaled_add(one_minus[layer], g);
                    row.scaled_add(gamma[layer], &centroid);
                    if k == 1 {
                        row.scaled_add(one_minus[layer] * cfg.step_one_offset, &world.centroid(1));
                    }
                    row.scaled_add(gamma[layer], &latent);
                }
                h.scaled_add(cfg.noise_scale, &noise);
                (h, cfg.noise_scale)
            }
        };
        // Reference point of the termination score: the pre-noise state.
        let anchor: Array1<f64> = &raw.row(top) - &(&noise.row(top) * noise_scale);
        let progress = cfg.progress_slope * (k as f64 - k_star as f64 + 0.5);
        let score_of = |top_state: ArrayView1<'_, f64>| {
            cfg.term_threshold + progress + (&top_state - &anchor).dot(m_term)
        };
        let pre_score = score_of(raw.row(top));

        let mut state = raw.clone();
        if let Some(p) = policy.as_deref_mut() {
            let view = BoundaryView {
                step_index: k,
                world,
                config: cfg,
                history: &history,
                pre_score,
                would_terminate: pre_score > cfg.term_threshold,
            };
            let mut edited = raw.clone();
            if let Some(iv) = p.on_boundary(&view, &mut edited) {
                if iv.persistent {
                    let delta = &edited.row(top) - &raw.row(top);
                    latent += &delta;
                }
                log.push(InterventionRecord {
                    step_index: k,
                    kind: iv.kind,
                    magnitude: iv.magnitude,
                });
                state = edited;
            }
        }
        let score = score_of(state.row(top));
        term_scores.push(score);

        let top_state = state.row(top).to_owned();
        let mut record = BoundaryRecord::step(k, to_f32(&state));
        if cfg.emit_aux {
            record.aux = aux_features(top_state.view(), world);
        }
        boundaries.push(record);
        history.push(top_state);
        prev_raw = Some(raw);

        let looped = history.len() >= cfg.loop_window && {
            let w = &history[history.len() - cfg.loop_window..];
            w.iter().enumerate().all(|(i, a)| {
                w[i + 1..].iter().all(|b| {
                    let diff = a - b;
                    diff.dot(&diff).sqrt() <= eps
                })
            })
        };
        if score > cfg.term_threshold {
            break Termination::TermRule;
        }
        if looped {
            break Termination::LoopDetected;
        }
        if k >= cap {
            break Termination::StepCap;
        }
    };

    // Scheduled drift of steps the run never reached still lands in the answer.
    if drawn_incorrect {
        for kk in (k + 1).max(window_start)..=k_star {
            let u = toward_term(kk);
            latent.scaled_add(-drift_step, &u);
            planned.scaled_add(-drift_step, &u);
        }
    }

    let noise = gaussian_matrix(rng, l, d);
    let mut term = Array2::<f64>::zeros((l, d));
    for (layer, mut row) in term.axis_iter_mut(Axis(0)).enumerate() {
        row.scaled_add(one_minus[layer], g);
        row.scaled_add(gamma[layer], m_term);
    }
    term.scaled_add(cfg.noise_scale, &noise);
    let mut term_record = BoundaryRecord::term(to_f32(&term));
    if cfg.emit_aux {
        term_record.aux = aux_features(term.row(top), world);
    }
    boundaries.push(term_record);

    let err = latent.dot(&latent).sqrt();
    let planned_err = planned.dot(&planned).sqrt();
    let correct = if drawn_incorrect {
        err < cfg.repair_fraction * planned_err
    } else {
        err <= cfg.fail_radius
    };

    Episode {
        trace: TraceExample {
            example_id: example_id.to_owned(),
            step_count: k,
            correctness: if correct {
                Correctness::Correct
            } else {
                Correctness::Incorrect
            },
            boundaries,
        },
        intervention_log: log,
        terminated_by,
        target_steps: target,
        drawn_incorrect,
        latent_error_norm: err,
        planned_error_norm: planned_err,
        term_scores,
    }
}

pub fn example_id(index: usize) -> String {
    format!("ep{index:06}")
}

/// Episode `index` of the corpus seeded by `corpus_seed`.
pub fn run_indexed(
    world: &HarnessWorld,
    cfg: &HarnessConfig,
    policy: Option<&mut dyn SteeringPolicy>,
    corpus_seed: u64,
    index: usize,
) -> Episode {
    let mut rng = episode_rng(corpus_seed, index as u64);
    run_episode(world, cfg, policy, &mut rng, &example_id(index))
}

/// `n` baseline episodes in index order.
pub fn generate_episodes(
    world: &HarnessWorld,
    cfg: &HarnessConfig,
    n: usize,
    corpus_seed: u64,
) -> Vec<Episode> {
    (0..n)
        .into_par_iter()
        .map(|i| run_indexed(world, cfg, None, corpus_seed, i))
        .collect()
}

pub fn corpus_meta(cfg: &HarnessConfig) -> TraceMeta {
    TraceMeta::new(
        "synthetic-harness",
        &format!("harness-seed-{}", cfg.seed),
        cfg.n_layers,
        cfg.dim,
    )
}

/// Corpus drawn from an existing world with its own episode seed.
pub fn generate_corpus_in(
    world: &HarnessWorld,
    cfg: &HarnessConfig,
    n: usize,
    corpus_seed: u64,
) -> (TraceMeta, Vec<TraceExample>) {
    let episodes = generate_episodes(world, cfg, n, corpus_seed);
    (
        corpus_meta(cfg),
        episodes.into_iter().map(|e| e.trace).collect(),
    )
}

/// Build the world from `cfg.seed` and draw `n` episodes from it.
pub fn generate_corpus(cfg: &HarnessConfig, n: usize) -> Result<(TraceMeta, Vec<TraceExample>)> {
    let world = super::build_world(cfg)?;
    Ok(generate_corpus_in(&world, cfg, n, cfg.seed))
}
