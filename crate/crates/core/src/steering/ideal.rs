//! Ideal trajectory of correct runs and divergence-gated low-rank correction.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{BoundaryView, Intervention, InterventionKind, SteeringPolicy};
use crate::stats::{fit_pca_capped, quantile_sorted, PcaBasis};
use crate::trace::{Correctness, TraceExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealConfig {
    pub r: usize,
    pub r_steer: usize,
    /// Correct examples required at a step for it to be kept.
    pub min_per_step: usize,
    /// Layer to fit on; `None` means the top layer.
    pub layer: Option<usize>,
}

impl Default for IdealConfig {
    fn default() -> Self {
        IdealConfig {
            r: 64,
            r_steer: 32,
            min_per_step: 20,
            layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealTrajectory {
    pub basis: PcaBasis,
    pub layer: usize,
    /// `[J × r]`, row j−1 is μ_j.
    pub means: Array2<f64>,
    /// Mean distance of correct projections to μ_j.
    pub sigmas: Vec<f64>,
    pub counts: Vec<usize>,
    /// θ_j; `None` never fires.
    pub local_thresholds: Vec<Option<f64>>,
    /// Θ_j; `None` never fires.
    pub cumulative_thresholds: Vec<Option<f64>>,
    pub r_steer: usize,
    /// First step dropped for lack of correct examples.
    pub truncated_at: Option<u32>,
}

impl IdealTrajectory {
    pub fn n_steps(&self) -> usize {
        self.means.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.r
    }

    pub fn with_thresholds(mut self, t: &Thresholds) -> Result<Self> {
        if t.local.len() != self.n_steps() || t.cumulative.len() != self.n_steps() {
            return Err(Error::DimensionMismatch(format!(
                "{} thresholds for {} steps",
                t.local.len(),
                self.n_steps()
            )));
        }
        self.local_thresholds = t.local.clone();
        self.cumulative_thresholds = t.cumulative.clone();
        Ok(self)
    }

    /// `(δ_j, D_j)` for j = 1..=min(J, K).
    pub fn deviations(&self, trace: &TraceExample) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::new();
        let mut cum = 0.0;
        for j in 1..=(self.n_steps() as u32).min(trace.step_count) {
            let b = trace
                .select(crate::trace::Selector::Step(j))
                .ok_or_else(|| {
                    Error::invalid_example(
                        &trace.example_id,
                        "boundaries",
                        format!("missing step {j}"),
                    )
                })?;
            let x = Array1::from(b.layer_f64(self.layer));
            let z = self.basis.project(x.view());
            let diff = &z - &self.means.row(j as usize - 1);
            let delta = diff.dot(&diff).sqrt();
            out.push((delta, cum));
            cum += delta;
        }
        Ok(out)
    }

    /// True if any local or cumulative threshold is exceeded along the trace.
    pub fn flags(&self, trace: &TraceExample) -> Result<bool> {
        Ok(self
            .deviations(trace)?
            .iter()
            .enumerate()
            .any(|(i, &(d, c))| {
                exceeds(d, self.local_thresholds[i]) || exceeds(c, self.cumulative_thresholds[i])
            }))
    }
}

fn exceeds(v: f64, t: Option<f64>) -> bool {
    t.is_some_and(|t| v > t)
}

/// PCA on correct step states at one layer, then per-step means and spreads.
/// Examples that are not marked correct are ignored.
pub fn fit_ideal_trajectory(traces: &[TraceExample], cfg: &IdealConfig) -> Result<IdealTrajectory> {
    let correct: Vec<&TraceExample> = traces
        .iter()
        .filter(|t| t.correctness == Correctness::Correct)
        .collect();
    let Some(first) = correct.iter().find_map(|t| t.boundaries.first()) else {
        return Err(Error::Insufficient(
            "no correct example to fit an ideal trajectory".into(),
        ));
    };
    let (l, d) = first.activations.dim();
    let layer = cfg.layer.unwrap_or(l - 1);
    if layer >= l {
        return Err(Error::config(
            "steering.ideal_layer",
            format!("layer {layer} out of range"),
        ));
    }
    if cfg.r == 0 || cfg.r_steer == 0 {
        return Err(Error::config("steering.rank", "ranks must be at least 1"));
    }

    let rows: Vec<Vec<f64>> = correct
        .iter()
        .flat_map(|t| t.steps().map(|b| b.layer_f64(layer)))
        .collect();
    if rows.len() < 2 {
        return Err(Error::Insufficient(
            "fewer than two correct step states".into(),
        ));
    }
    let x = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]);
    let basis = fit_pca_capped(x.view(), cfg.r)?;

    let max_k = correct.iter().map(|t| t.step_count).max().unwrap_or(0);
    let mut means = Vec::new();
    let mut sigmas = Vec::new();
    let mut counts = Vec::new();
    let mut truncated_at = None;
    for j in 1..=max_k {
        let z: Vec<Array1<f64>> = correct
            .iter()
            .filter_map(|t| t.select(crate::trace::Selector::Step(j)))
            .map(|b| basis.project(Array1::from(b.layer_f64(layer)).view()))
            .collect();
        if z.len() < cfg.min_per_step {
            truncated_at = Some(j);
            break;
        }
        // Running mean: exact when every projection is identical.
        let mut mu = Array1::<f64>::zeros(basis.r);
        for (i, v) in z.iter().enumerate() {
            let step = v - &mu;
            mu.scaled_add(1.0 / (i + 1) as f64, &step);
        }
        let sigma = z
            .iter()
            .map(|v| (v - &mu).mapv(|e| e * e).sum().sqrt())
            .sum::<f64>()
            / z.len() as f64;
        counts.push(z.len());
        sigmas.push(sigma);
        means.push(mu);
    }
    if means.is_empty() {
        return Err(Error::Insufficient(format!(
            "step 1 has fewer than {} correct examples",
            cfg.min_per_step
        )));
    }
    let j = means.len();
    let r = basis.r;
    Ok(IdealTrajectory {
        means: Array2::from_shape_fn((j, r), |(a, b)| means[a][b]),
        sigmas,
        counts,
        local_thresholds: vec![None; j],
        cumulative_thresholds: vec![None; j],
        r_steer: cfg.r_steer.min(r),
        truncated_at,
        layer,
        basis,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Weight on the false-positive rate.
    pub lambda: f64,
    /// Objectives this close to the maximum count as ties.
    pub tie_tolerance: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            lambda: 1.0,
            tie_tolerance: 0.02,
        }
    }
}

/// Quantile levels 0.800, 0.805, …, 0.995.
pub fn quantile_grid() -> Vec<f64> {
    (0..40).map(|i| 0.80 + 0.005 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub quantile: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Grid search over quantiles of the correct-group values maximizing
/// `TPR − λ·FPR`; among near-ties the highest threshold wins.
pub fn choose_threshold(
    correct: &[f64],
    incorrect: &[f64],
    cfg: &CalibrationConfig,
) -> Result<ThresholdChoice> {
    if correct.is_empty() || incorrect.is_empty() {
        return Err(Error::Insufficient(format!(
            "threshold calibration needs both groups ({} correct, {} incorrect)",
            correct.len(),
            incorrect.len()
        )));
    }
    let mut sorted = correct.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rate = |v: &[f64], t: f64| v.iter().filter(|&&x| x > t).count() as f64 / v.len() as f64;
    let cands: Vec<(f64, ThresholdChoice)> = quantile_grid()
        .into_iter()
        .map(|q| {
            let t = quantile_sorted(&sorted, q);
            let (tpr, fpr) = (rate(incorrect, t), rate(correct, t));
            (
                tpr - cfg.lambda * fpr,
                ThresholdChoice {
                    threshold: t,
                    quantile: q,
                    tpr,
                    fpr,
                },
            )
        })
        .collect();
    let best = cands.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let pick = cands
        .iter()
        .filter(|c| c.0 >= best - cfg.tie_tolerance)
        .max_by(|a, b| {
            a.1.threshold
                .total_cmp(&b.1.threshold)
                .then(a.1.quantile.total_cmp(&b.1.quantile))
        })
        .expect("non-empty grid");
    Ok(pick.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub local: Vec<Option<f64>>,
    /// Θ_1 is always `None`: D_1 is zero by definition.
    pub cumulative: Vec<Option<f64>>,
    pub local_choice: Vec<ThresholdChoice>,
    pub cumulative_choice: Vec<Option<ThresholdChoice>>,
}

pub fn calibrate_thresholds(
    ideal: &IdealTrajectory,
    heldout_correct: &[TraceExample],
    heldout_incorrect: &[TraceExample],
    cfg: &CalibrationConfig,
) -> Result<Thresholds> {
    let devs = |ts: &[TraceExample]| -> Result<Vec<Vec<(f64, f64)>>> {
        ts.iter().map(|t| ideal.deviations(t)).collect()
    };
    let (dc, di) = (devs(heldout_correct)?, devs(heldout_incorrect)?);
    let mut out = Thresholds {
        local: Vec::new(),
        cumulative: Vec::new(),
        local_choice: Vec::new(),
        cumulative_choice: Vec::new(),
    };
    for j in 0..ideal.n_steps() {
        let col = |g: &[Vec<(f64, f64)>], cum: bool| -> Vec<f64> {
            g.iter()
                .filter_map(|v| v.get(j))
                .map(|p| if cum { p.1 } else { p.0 })
                .collect()
        };
        let local = choose_threshold(&col(&dc, false), &col(&di, false), cfg)
            .map_err(|e| Error::Insufficient(format!("step {}: {e}", j + 1)))?;
        out.local.push(Some(local.threshold));
        out.local_choice.push(local);
        if j == 0 {
            out.cumulative.push(None);
            out.cumulative_choice.push(None);
        } else {
            let cum = choose_threshold(&col(&dc, true), &col(&di, true), cfg)
                .map_err(|e| Error::Insufficient(format!("step {}: {e}", j + 1)))?;
            out.cumulative.push(Some(cum.threshold));
            out.cumulative_choice.push(Some(cum));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviationState {
    /// Last evaluated step; 0 before the first boundary.
    pub step: u32,
    /// δ at `step`, before any correction.
    pub delta: f64,
    /// D at `step`: sum of δ over earlier steps.
    pub cumulative: f64,
    pub fired: u32,
}

/// Evaluate the next step boundary and correct the state toward μ_j when a
/// threshold is exceeded. Returns the norm of the correction if one fired.
pub fn trajectory_steer_step(
    ideal: &IdealTrajectory,
    state: ArrayViewMut1<'_, f64>,
    dev: &mut DeviationState,
    alpha_corr: f64,
) -> Option<f64> {
    steer(ideal, state, dev, alpha_corr, false)
}

fn steer(
    ideal: &IdealTrajectory,
    mut state: ArrayViewMut1<'_, f64>,
    dev: &mut DeviationState,
    alpha_corr: f64,
    force: bool,
) -> Option<f64> {
    let j = dev.step as usize + 1;
    if dev.step > 0 {
        dev.cumulative += dev.delta;
    }
    dev.step = j as u32;
    dev.delta = 0.0;
    if j > ideal.n_steps() {
        return None;
    }
    let z = ideal.basis.project(state.view());
    let gap = &ideal.means.row(j - 1) - &z;
    dev.delta = gap.dot(&gap).sqrt();
    let fire = force
        || exceeds(dev.delta, ideal.local_thresholds[j - 1])
        || exceeds(dev.cumulative, ideal.cumulative_thresholds[j - 1]);
    if !fire {
        return None;
    }
    let rs = ideal.r_steer;
    let coef = gap.slice(s![..rs]).mapv(|v| v * alpha_corr);
    let correction = ideal.basis.components.slice(s![..rs, ..]).t().dot(&coef);
    state += &correction;
    dev.fired += 1;
    Some(coef.dot(&coef).sqrt())
}

/// Closed-loop correction at the ideal trajectory's layer. Corrections are
/// persistent: they carry into the latent state.
#[derive(Debug, Clone)]
pub struct TrajectoryPolicy {
    pub ideal: Arc<IdealTrajectory>,
    pub alpha_corr: f64,
    /// Correct at every boundary regardless of thresholds.
    pub always: bool,
    pub dev: DeviationState,
}

impl TrajectoryPolicy {
    pub fn new(ideal: Arc<IdealTrajectory>, alpha_corr: f64, always: bool) -> Self {
        TrajectoryPolicy {
            ideal,
            alpha_corr,
            always,
            dev: DeviationState::default(),
        }
    }
}

impl SteeringPolicy for TrajectoryPolicy {
    fn begin_episode(&mut self) {
        self.dev = DeviationState::default();
    }

    fn on_boundary(
        &mut self,
        _view: &BoundaryView<'_>,
        state: &mut Array2<f64>,
    ) -> Option<Intervention> {
        if self.ideal.layer >= state.nrows() || state.ncols() != self.ideal.basis.dim() {
            return None;
        }
        let row = state.row_mut(self.ideal.layer);
        let magnitude = steer(
            &self.ideal,
            row,
            &mut self.dev,
            self.alpha_corr,
            self.always,
        )?;
        Some(Intervention {
            kind: InterventionKind::TrajectoryCorrection,
            magnitude,
            persistent: true,
        })
    }
}
