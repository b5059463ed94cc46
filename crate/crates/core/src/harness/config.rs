use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;

/// Parameters of the synthetic reasoning process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    /// Seeds the world (centroids, shared early state, manifold).
    pub seed: u64,
    pub dim: usize,
    pub n_layers: usize,
    pub max_steps: u32,
    /// `(K, probability)` pairs for the target step count.
    pub step_count_distribution: Vec<(u32, f64)>,
    pub noise_scale: f64,
    pub disentangle_exponent: f64,
    pub incorrect_fraction: f64,
    pub drift_scale: f64,
    pub term_threshold: f64,
    pub term_direction_seed: u64,
    /// Extra shared-state component on Step 1, fading with depth.
    pub step_one_offset: f64,
    /// Per-step increase of the termination drive.
    pub progress_slope: f64,
    /// First step (capped at K) at which incorrect runs start to drift.
    pub drift_onset: u32,
    /// Lateral (off-target) drift relative to the along-target drift.
    pub lateral_scale: f64,
    /// Largest latent error a drawn-correct run tolerates.
    pub fail_radius: f64,
    /// A drawn-incorrect run is repaired once its latent error falls below
    /// this fraction of the error it would have accumulated unaided.
    pub repair_fraction: f64,
    /// Dimension of the subspace holding all centroids (default `max_steps − 1`).
    pub manifold_dim: Option<usize>,
    /// Relative noise of repeated states once a run overshoots `max_steps`.
    pub stall_noise: f64,
    /// Hard step limit (default `max_steps + 4`).
    pub step_cap: Option<u32>,
    /// Extra target steps for drawn-incorrect runs (a length confound).
    pub incorrect_extra_steps: u32,
    pub loop_window: usize,
    /// Loop proximity radius (default `0.1·σ_noise·√d`).
    pub loop_epsilon: Option<f64>,
    /// Attach logit-lens style scalars to every boundary.
    pub emit_aux: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            seed: 42,
            dim: 64,
            n_layers: 8,
            max_steps: 8,
            step_count_distribution: vec![
                (3, 0.21),
                (4, 0.30),
                (5, 0.195),
                (6, 0.15),
                (7, 0.09),
                (8, 0.055),
            ],
            noise_scale: 0.05,
            disentangle_exponent: 1.0,
            incorrect_fraction: 0.25,
            drift_scale: 0.9,
            term_threshold: 0.8,
            term_direction_seed: 7,
            step_one_offset: 0.5,
            progress_slope: 0.5,
            drift_onset: 4,
            lateral_scale: 0.5,
            fail_radius: 0.36,
            repair_fraction: 0.4,
            manifold_dim: None,
            stall_noise: 0.05,
            step_cap: None,
            incorrect_extra_steps: 0,
            loop_window: 3,
            loop_epsilon: None,
            emit_aux: true,
        }
    }
}

impl HarnessConfig {
    pub fn manifold_dim(&self) -> usize {
        self.manifold_dim
            .unwrap_or((self.max_steps as usize).saturating_sub(1).max(2))
    }

    pub fn step_cap(&self) -> u32 {
        self.step_cap.unwrap_or(self.max_steps + 4)
    }

    pub fn loop_epsilon(&self) -> f64 {
        self.loop_epsilon
            .unwrap_or(0.1 * self.noise_scale * (self.dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| Err(Error::config(format!("harness.{key}"), detail));
        if self.dim < 8 {
            return bad("dim", format!("must be at least 8, got {}", self.dim));
        }
        if self.n_layers < 2 {
            return bad(
                "n_layers",
                format!("must be at least 2, got {}", self.n_layers),
            );
        }
        if self.max_steps < 1 {
            return bad("max_steps", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.incorrect_fraction) {
            return bad(
                "incorrect_fraction",
                format!("must lie in [0, 1], got {}", self.incorrect_fraction),
            );
        }
        for (key, v) in [
            ("noise_scale", self.noise_scale),
            ("drift_scale", self.drift_scale),
            ("disentangle_exponent", self.disentangle_exponent),
            ("lateral_scale", self.lateral_scale),
            ("stall_noise", self.stall_noise),
            ("step_one_offset", self.step_one_offset),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be finite and non-negative, got {v}"));
            }
        }
        for (key, v) in [
            ("term_threshold", self.term_threshold),
            ("progress_slope", self.progress_slope),
            ("fail_radius", self.fail_radius),
            ("repair_fraction", self.repair_fraction),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, format!("must be finite and positive, got {v}"));
            }
        }
        if self.step_count_distribution.is_empty() {
            return bad("step_count_distribution", "is empty".into());
        }
        let mut total = 0.0;
        for &(k, p) in &self.step_count_distribution {
            if k < 1 || k > self.max_steps {
                return bad(
                    "step_count_distribution",
                    format!("step count {k} outside 1..={}", self.max_steps),
                );
            }
            if !(0.0..=1.0).contains(&p) {
                return bad(
                    "step_count_distribution",
                    format!("probability {p} for K={k}"),
                );
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return bad(
                "step_count_distribution",
                format!("probabilities sum to {total}, expected 1"),
            );
        }
        let m = self.manifold_dim();
        if m < 2 || m > self.dim {
            return bad("manifold_dim", format!("{m} outside 2..={}", self.dim));
        }
        if self.step_cap() < self.max_steps {
            return bad(
                "step_cap",
                format!("must be at least max_steps ({})", self.max_steps),
            );
        }
        if self.loop_window < 2 {
            return bad("loop_window", "must be at least 2".into());
        }
        if let Some(e) = self.loop_epsilon {
            if !(e >= 0.0) {
                return bad("loop_epsilon", format!("must be non-negative, got {e}"));
            }
        }
        Ok(())
    }

    /// Overlay `harness.*` keys from a config file.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = HarnessConfig::default();
        let cfg = HarnessConfig {
            seed: kv.get_or("harness.seed", d.seed)?,
            dim: kv.get_or("harness.dim", d.dim)?,
            n_layers: kv.get_or("harness.n_layers", d.n_layers)?,
            max_steps: kv.get_or("harness.max_steps", d.max_steps)?,
            step_count_distribution: kv
                .get_pairs_or("harness.step_count_distribution", d.step_count_distribution)?,
            noise_scale: kv.get_or("harness.noise_scale", d.noise_scale)?,
            disentangle_exponent: kv
                .get_or("harness.disentangle_exponent", d.disentangle_exponent)?,
            incorrect_fraction: kv.get_or("harness.incorrect_fraction", d.incorrect_fraction)?,
            drift_scale: kv.get_or("harness.drift_scale", d.drift_scale)?,
            term_threshold: kv.get_or("harness.term_threshold", d.term_threshold)?,
            term_direction_seed: kv.get_or("harness.term_direction_seed", d.term_direction_seed)?,
            step_one_offset: kv.get_or("harness.step_one_offset", d.step_one_offset)?,
            progress_slope: kv.get_or("harness.progress_slope", d.progress_slope)?,
            drift_onset: kv.get_or("harness.drift_onset", d.drift_onset)?,
            lateral_scale: kv.get_or("harness.lateral_scale", d.lateral_scale)?,
            fail_radius: kv.get_or("harness.fail_radius", d.fail_radius)?,
            repair_fraction: kv.get_or("harness.repair_fraction", d.repair_fraction)?,
            manifold_dim: kv.get_opt("harness.manifold_dim")?,
            stall_noise: kv.get_or("harness.stall_noise", d.stall_noise)?,
            step_cap: kv.get_opt("harness.step_cap")?,
            incorrect_extra_steps: kv
                .get_or("harness.incorrect_extra_steps", d.incorrect_extra_steps)?,
            loop_window: kv.get_or("harness.loop_window", d.loop_window)?,
            loop_epsilon: kv.get_opt("harness.loop_epsilon")?,
            emit_aux: kv.get_or("harness.emit_aux", d.emit_aux)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
