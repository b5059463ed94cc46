//! Always-on and gated intervention policies with correction/reversion
//! accounting.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::additive::{AdditivePolicy, SteeringConfig};
use super::direction::SteeringDirection;
use super::ideal::{IdealTrajectory, TrajectoryPolicy};
use crate::error::{Error, Result};
use crate::harness::{run_indexed, Episode, HarnessConfig, HarnessWorld, SteeringPolicy};
use crate::predictor::TrainedPredictor;
use crate::trace::TraceExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Always,
    Gated,
}

impl PolicyMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "always" => Some(PolicyMode::Always),
            "gated" => Some(PolicyMode::Gated),
            _ => None,
        }
    }
}

/// Decides which examples receive the intervention.
#[derive(Debug, Clone)]
pub enum Gate {
    /// Flag when the predicted probability of correctness is below `threshold`.
    Predictor {
        model: Arc<TrainedPredictor>,
        threshold: f64,
    },
    /// Flag when a local or cumulative deviation threshold is exceeded.
    Trajectory(Arc<IdealTrajectory>),
}

impl Gate {
    /// Offline decision on a completed trace.
    pub fn flags(&self, trace: &TraceExample) -> Result<bool> {
        match self {
            Gate::Predictor { model, threshold } => {
                let p = model.score(std::slice::from_ref(trace))?[0];
                Ok(p.is_some_and(|p| p < *threshold))
            }
            Gate::Trajectory(ideal) => ideal.flags(trace),
        }
    }
}

#[derive(Debug, Clone)]
pub enum HarnessIntervention {
    Additive {
        direction: SteeringDirection,
        config: SteeringConfig,
    },
    TrajectoryCorrection {
        ideal: Arc<IdealTrajectory>,
        alpha_corr: f64,
    },
}

impl HarnessIntervention {
    fn policy(&self, always: bool) -> Result<Box<dyn SteeringPolicy + Send>> {
        Ok(match self {
            HarnessIntervention::Additive { direction, config } => {
                Box::new(AdditivePolicy::new(direction.clone(), config.clone())?)
            }
            HarnessIntervention::TrajectoryCorrection { ideal, alpha_corr } => {
                Box::new(TrajectoryPolicy::new(ideal.clone(), *alpha_corr, always))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomePair {
    pub example_id: String,
    pub flagged: bool,
    pub baseline_correct: bool,
    /// Outcome with the intervention applied; ignored for unflagged examples.
    pub policy_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub n_total: usize,
    pub n_flagged: usize,
    pub n_baseline_correct: usize,
    pub n_policy_correct: usize,
    pub accuracy_baseline: f64,
    pub accuracy_policy: f64,
    /// Flagged examples turned from incorrect to correct.
    pub corrected: usize,
    /// Flagged examples turned from correct to incorrect.
    pub reverted: usize,
    /// Baseline-correct examples still correct, over all baseline-correct.
    pub preservation_rate: f64,
    /// The same over flagged baseline-correct examples only.
    pub preservation_rate_flagged: Option<f64>,
}

impl PolicyOutcome {
    /// Aggregate outcome pairs. Unflagged examples keep their baseline result.
    pub fn from_pairs(pairs: &[OutcomePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Insufficient("no outcome pairs".into()));
        }
        let mut o = PolicyOutcome {
            n_total: pairs.len(),
            n_flagged: 0,
            n_baseline_correct: 0,
            n_policy_correct: 0,
            accuracy_baseline: 0.0,
            accuracy_policy: 0.0,
            corrected: 0,
            reverted: 0,
            preservation_rate: 1.0,
            preservation_rate_flagged: None,
        };
        let mut flagged_correct = 0usize;
        for p in pairs {
            let after = if p.flagged {
                p.policy_correct
            } else {
                p.baseline_correct
            };
            o.n_flagged += p.flagged as usize;
            o.n_baseline_correct += p.baseline_correct as usize;
            o.n_policy_correct += after as usize;
            if p.flagged {
                flagged_correct += p.baseline_correct as usize;
                match (p.baseline_correct, after) {
                    (false, true) => o.corrected += 1,
                    (true, false) => o.reverted += 1,
                    _ => {}
                }
            }
        }
        let n = o.n_total as f64;
        o.accuracy_baseline = o.n_baseline_correct as f64 / n;
        o.accuracy_policy = o.n_policy_correct as f64 / n;
        if o.n_baseline_correct > 0 {
            o.preservation_rate = 1.0 - o.reverted as f64 / o.n_baseline_correct as f64;
        }
        if flagged_correct > 0 {
            o.preservation_rate_flagged = Some(1.0 - o.reverted as f64 / flagged_correct as f64);
        }
        Ok(o)
    }

    /// Pairs realizing the given counts, for checking reported tables.
    pub fn synthetic_pairs(
        n_total: usize,
        n_baseline_correct: usize,
        flagged_incorrect: usize,
        flagged_correct: usize,
        corrected: usize,
        reverted: usize,
    ) -> Result<Vec<OutcomePair>> {
        if n_baseline_correct > n_total
            || flagged_incorrect > n_total - n_baseline_correct
            || flagged_correct > n_baseline_correct
            || corrected > flagged_incorrect
            || reverted > flagged_correct
        {
            return Err(Error::InvalidInput("inconsistent outcome counts".into()));
        }
        Ok((0..n_total)
            .map(|i| {
                let baseline_correct = i < n_baseline_correct;
                let (flagged, policy_correct) = if baseline_correct {
                    (i < flagged_correct, i >= reverted)
                } else {
                    let k = i - n_baseline_correct;
                    (k < flagged_incorrect, k < corrected)
                };
                OutcomePair {
                    example_id: format!("ex{i}"),
                    flagged,
                    baseline_correct,
                    policy_correct,
                }
            })
            .collect())
    }

    /// `accuracy_policy − accuracy_baseline`.
    pub fn accuracy_delta(&self) -> f64 {
        (self.n_policy_correct as f64 - self.n_baseline_correct as f64) / self.n_total as f64
    }

    /// The net change equals corrections minus reversions.
    pub fn accounting_holds(&self) -> bool {
        self.n_policy_correct as i64 - self.n_baseline_correct as i64
            == self.corrected as i64 - self.reverted as i64
    }

    pub fn flagged_fraction(&self) -> f64 {
        self.n_flagged as f64 / self.n_total as f64
    }
}

/// Per-example baseline and intervened outcomes produced outside the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub example_id: String,
    pub baseline_correct: bool,
    pub policy_correct: bool,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

/// CSV with columns `example_id,baseline_correct,policy_correct`.
pub fn read_outcome_csv(path: &Path) -> Result<Vec<OutcomeRecord>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                Error::InvalidInput(format!("{}: missing column `{name}`", path.display()))
            })
    };
    let (ci, cb, cp) = (
        col("example_id")?,
        col("baseline_correct")?,
        col("policy_correct")?,
    );
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let bad = |c: &str| {
            Error::InvalidInput(format!("{}: row {}: bad `{c}`", path.display(), line + 2))
        };
        out.push(OutcomeRecord {
            example_id: rec
                .get(ci)
                .ok_or_else(|| bad("example_id"))?
                .trim()
                .to_owned(),
            baseline_correct: rec
                .get(cb)
                .and_then(parse_flag)
                .ok_or_else(|| bad("baseline_correct"))?,
            policy_correct: rec
                .get(cp)
                .and_then(parse_flag)
                .ok_or_else(|| bad("policy_correct"))?,
        });
    }
    Ok(out)
}

/// Trace mode: the gate runs on stored traces, outcomes come from outside.
pub fn run_gated_policy_traces(
    traces: &[TraceExample],
    gate: Option<&Gate>,
    outcomes: &[OutcomeRecord],
    mode: PolicyMode,
) -> Result<PolicyOutcome> {
    let by_id: BTreeMap<&str, &OutcomeRecord> = outcomes
        .iter()
        .map(|o| (o.example_id.as_str(), o))
        .collect();
    let pairs = traces
        .iter()
        .map(|t| {
            let o = by_id.get(t.example_id.as_str()).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "missing outcome pair for example `{}`",
                    t.example_id
                ))
            })?;
            if let Some(c) = t.correctness.as_bool() {
                if c != o.baseline_correct {
                    return Err(Error::InvalidInput(format!(
                        "example `{}`: trace correctness disagrees with baseline outcome",
                        t.example_id
                    )));
                }
            }
            let flagged = match mode {
                PolicyMode::Always => true,
                PolicyMode::Gated => gate
                    .ok_or_else(|| Error::config("steering.gate", "gated mode needs a gate"))?
                    .flags(t)?,
            };
            Ok(OutcomePair {
                example_id: t.example_id.clone(),
                flagged,
                baseline_correct: o.baseline_correct,
                policy_correct: o.policy_correct,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PolicyOutcome::from_pairs(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePair {
    pub index: usize,
    pub target_steps: u32,
    pub flagged: bool,
    /// The policy actually edited a state.
    pub fired: bool,
    pub baseline_correct: bool,
    pub policy_correct: bool,
    pub baseline_steps: u32,
    pub policy_steps: u32,
    /// Steered episode equals the baseline bit for bit.
    pub identical: bool,
}

impl EpisodePair {
    pub fn outcome(&self) -> OutcomePair {
        OutcomePair {
            example_id: crate::harness::example_id(self.index),
            flagged: self.flagged,
            baseline_correct: self.baseline_correct,
            policy_correct: self.policy_correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessPolicyReport {
    pub outcome: PolicyOutcome,
    pub pairs: Vec<EpisodePair>,
    /// Episodes where the policy never fired yet the run changed.
    pub silent_mismatches: usize,
}

impl HarnessPolicyReport {
    pub fn subset(&self, keep: impl Fn(&EpisodePair) -> bool) -> Result<PolicyOutcome> {
        let pairs: Vec<OutcomePair> = self
            .pairs
            .iter()
            .filter(|p| keep(p))
            .map(EpisodePair::outcome)
            .collect();
        PolicyOutcome::from_pairs(&pairs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRange {
    pub n_episodes: usize,
    pub seed: u64,
}

fn pair_of(index: usize, base: &Episode, steered: Option<&Episode>, flagged: bool) -> EpisodePair {
    let s = steered.unwrap_or(base);
    EpisodePair {
        index,
        target_steps: base.target_steps,
        flagged,
        fired: s.fired(),
        baseline_correct: base.correct(),
        policy_correct: if flagged { s.correct() } else { base.correct() },
        baseline_steps: base.step_count(),
        policy_steps: s.step_count(),
        identical: s == base,
    }
}

/// Harness mode: every episode runs twice on the same seed, once without a
/// policy and once with it. A trajectory gate paired with trajectory
/// correction acts online; any other gate decides on the baseline trace.
pub fn run_gated_policy_harness(
    world: &HarnessWorld,
    cfg: &HarnessConfig,
    gate: Option<&Gate>,
    intervention: &HarnessIntervention,
    mode: PolicyMode,
    range: EpisodeRange,
) -> Result<HarnessPolicyReport> {
    if range.n_episodes == 0 {
        return Err(Error::InvalidInput(
            "policy run needs at least one episode".into(),
        ));
    }
    if mode == PolicyMode::Gated && gate.is_none() {
        return Err(Error::config("steering.gate", "gated mode needs a gate"));
    }
    let online = mode == PolicyMode::Gated
        && matches!(
            (gate, intervention),
            (
                Some(Gate::Trajectory(_)),
                HarnessIntervention::TrajectoryCorrection { .. }
            )
        );
    intervention.policy(true)?;

    let pairs = (0..range.n_episodes)
        .into_par_iter()
        .map(|i| -> Result<EpisodePair> {
            let base = run_indexed(world, cfg, None, range.seed, i);
            if online {
                let mut p = intervention.policy(false)?;
                let steered = run_indexed(world, cfg, Some(p.as_mut()), range.seed, i);
                let flagged = steered.fired();
                return Ok(pair_of(i, &base, Some(&steered), flagged));
            }
            let flagged = match mode {
                PolicyMode::Always => true,
                PolicyMode::Gated => gate.expect("checked above").flags(&base.trace)?,
            };
            if !flagged {
                return Ok(pair_of(i, &base, None, false));
            }
            let mut p = intervention.policy(true)?;
            let steered = run_indexed(world, cfg, Some(p.as_mut()), range.seed, i);
            Ok(pair_of(i, &base, Some(&steered), true))
        })
        .collect::<Result<Vec<_>>>()?;

    let silent_mismatches = pairs.iter().filter(|p| !p.fired && !p.identical).count();
    let outcomes: Vec<OutcomePair> = pairs.iter().map(EpisodePair::outcome).collect();
    Ok(HarnessPolicyReport {
        outcome: PolicyOutcome::from_pairs(&outcomes)?,
        pairs,
        silent_mismatches,
    })
}
