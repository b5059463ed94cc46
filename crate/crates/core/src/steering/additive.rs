//! Additive Shorten/Prolong steering `h ← h + α·s` and the length sweep.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::direction::SteeringDirection;
use crate::error::{Error, Result};
use crate::harness::{
    run_indexed, BoundaryView, HarnessConfig, HarnessWorld, Intervention, InterventionKind,
    SteeringPolicy, Termination,
};

pub const DEFAULT_ALPHA_CAP: f64 = 2.0;
const SET_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSet {
    Last5,
    /// Five layers centered at `⌊L/2⌋ − 1`.
    Mid5,
    Custom(Vec<usize>),
}

impl LayerSet {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "last5" => Some(LayerSet::Last5),
            "mid5" => Some(LayerSet::Mid5),
            other => {
                let v: std::result::Result<Vec<usize>, _> = other
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect();
                v.ok().filter(|v| !v.is_empty()).map(LayerSet::Custom)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            LayerSet::Last5 => "last5".into(),
            LayerSet::Mid5 => "mid5".into(),
            LayerSet::Custom(v) => v
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
        }
    }

    /// Sorted layer indices for a model with `n_layers` layers. Fixed-size
    /// sets shrink to every layer when the model has fewer than five.
    pub fn layers(&self, n_layers: usize) -> Result<Vec<usize>> {
        let k = SET_SIZE.min(n_layers);
        let mut v = match self {
            LayerSet::Last5 => (n_layers - k..n_layers).collect(),
            LayerSet::Mid5 => {
                let center = (n_layers / 2).saturating_sub(1);
                let start = center.saturating_sub(k / 2).min(n_layers - k);
                (start..start + k).collect()
            }
            LayerSet::Custom(v) => {
                if v.is_empty() {
                    return Err(Error::config(
                        "steering.layer_set",
                        "empty custom layer list",
                    ));
                }
                if let Some(bad) = v.iter().find(|&&l| l >= n_layers) {
                    return Err(Error::config(
                        "steering.layer_set",
                        format!("layer {bad} out of range for {n_layers} layers"),
                    ));
                }
                v.clone()
            }
        };
        v.sort_unstable();
        v.dedup();
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyAt {
    /// Only at a boundary where the unsteered run would stop.
    PreTermBoundary,
    #[default]
    EveryBoundary,
}

impl ApplyAt {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pre_term_boundary" => Some(ApplyAt::PreTermBoundary),
            "every_boundary" => Some(ApplyAt::EveryBoundary),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    /// Positive shortens, negative prolongs.
    pub alpha: f64,
    pub layer_set: LayerSet,
    pub apply_at: ApplyAt,
    pub alpha_cap: f64,
}

impl SteeringConfig {
    pub fn new(alpha: f64, layer_set: LayerSet, apply_at: ApplyAt) -> Self {
        SteeringConfig {
            alpha,
            layer_set,
            apply_at,
            alpha_cap: DEFAULT_ALPHA_CAP,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<Vec<usize>> {
        if !self.alpha.is_finite() || self.alpha.abs() > self.alpha_cap {
            return Err(Error::config(
                "steering.alpha",
                format!(
                    "|α| = {} exceeds the cap {}",
                    self.alpha.abs(),
                    self.alpha_cap
                ),
            ));
        }
        self.layer_set.layers(n_layers)
    }
}

/// Add `α·s^(ℓ)` to each configured layer of `state`. Returns the Euclidean
/// norm of the total edit.
pub fn apply_additive(
    state: &mut Array2<f64>,
    dir: &SteeringDirection,
    cfg: &SteeringConfig,
) -> Result<f64> {
    if state.dim() != dir.vectors.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state {:?} vs direction {:?}",
            state.dim(),
            dir.vectors.dim()
        )));
    }
    let layers = cfg.validate(state.nrows())?;
    let mut sq = 0.0;
    for l in layers {
        state.row_mut(l).scaled_add(cfg.alpha, &dir.vectors.row(l));
        sq += (cfg.alpha * dir.norms[l]).powi(2);
    }
    Ok(sq.sqrt())
}

/// Transient additive steering inside the harness loop.
#[derive(Debug, Clone)]
pub struct AdditivePolicy {
    pub direction: SteeringDirection,
    pub config: SteeringConfig,
}

impl AdditivePolicy {
    pub fn new(direction: SteeringDirection, config: SteeringConfig) -> Result<Self> {
        config.validate(direction.n_layers())?;
        Ok(AdditivePolicy { direction, config })
    }
}

impl SteeringPolicy for AdditivePolicy {
    fn on_boundary(
        &mut self,
        view: &BoundaryView<'_>,
        state: &mut Array2<f64>,
    ) -> Option<Intervention> {
        if self.config.alpha == 0.0 {
            return None;
        }
        if self.config.apply_at == ApplyAt::PreTermBoundary && !view.would_terminate {
            return None;
        }
        let magnitude = apply_additive(state, &self.direction, &self.config).ok()?;
        Some(Intervention {
            kind: InterventionKind::Additive,
            magnitude,
            persistent: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub alpha: f64,
    pub n_episodes: usize,
    pub mean_steps: f64,
    pub accuracy: f64,
    /// Fraction of runs stopped by the loop detector.
    pub loop_ratio: f64,
    pub step_cap_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSweepSpec {
    pub alphas: Vec<f64>,
    pub layer_set: LayerSet,
    pub apply_at: ApplyAt,
    pub n_episodes: usize,
    pub seed: u64,
}

impl Default for LengthSweepSpec {
    fn default() -> Self {
        LengthSweepSpec {
            alphas: vec![-0.4, -0.2, 0.0, 0.2, 0.4],
            layer_set: LayerSet::Last5,
            apply_at: ApplyAt::EveryBoundary,
            n_episodes: 500,
            seed: 9,
        }
    }
}

/// Mean step count, accuracy and loop ratio per α, with the same episode
/// seeds at every α.
pub fn length_sweep(
    world: &HarnessWorld,
    cfg: &HarnessConfig,
    direction: &SteeringDirection,
    spec: &LengthSweepSpec,
) -> Result<Vec<LengthRow>> {
    let (n_episodes, seed) = (spec.n_episodes, spec.seed);
    if n_episodes == 0 {
        return Err(Error::InvalidInput(
            "length sweep needs at least one episode".into(),
        ));
    }
    spec.alphas
        .iter()
        .map(|&alpha| {
            let policy = AdditivePolicy::new(
                direction.clone(),
                SteeringConfig::new(alpha, spec.layer_set.clone(), spec.apply_at),
            )?;
            let runs: Vec<(u32, bool, Termination)> = (0..n_episodes)
                .into_par_iter()
                .map(|i| {
                    let mut p = policy.clone();
                    let ep = run_indexed(world, cfg, Some(&mut p), seed, i);
                    (ep.step_count(), ep.correct(), ep.terminated_by)
                })
                .collect();
            let n = n_episodes as f64;
            Ok(LengthRow {
                alpha,
                n_episodes,
                mean_steps: runs.iter().map(|r| r.0 as f64).sum::<f64>() / n,
                accuracy: runs.iter().filter(|r| r.1).count() as f64 / n,
                loop_ratio: runs
                    .iter()
                    .filter(|r| r.2 == Termination::LoopDetected)
                    .count() as f64
                    / n,
                step_cap_ratio: runs.iter().filter(|r| r.2 == Termination::StepCap).count() as f64
                    / n,
            })
        })
        .collect()
}
