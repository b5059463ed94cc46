//! Correctness prediction from trajectory features.
//!
//! Features are built per example from selected boundaries at one layer,
//! optionally reduced by PCA fit on training rows only, then scored with an
//! L2-regularized logistic model whose `C` is chosen by cross-validated AUC.
//! The positive class is "correct".

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{
    fit_logistic, fit_pca_capped, mean, roc_auc, ClassWeighting, LogisticConfig, LogisticModel,
    PcaBasis,
};
use crate::trace::{stratified_folds, stratified_partition, Selector, TraceExample};

pub const LOGIT_LENS_KEYS: [&str; 3] = ["entropy", "answer_rank", "top1_prob"];
/// Stand-in for logit-lens scalars of a boundary that does not exist.
pub const MISSING_SENTINEL: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Step 1 ⊕ step 2 (⊕ step 3).
    EarlyConcat {
        include_step3: bool,
    },
    /// Step 2 − step 1.
    EarlyDiff,
    /// Term ⊕ (last − second_last), each block reduced by its own PCA.
    LateTraj,
    FinalState {
        pca: bool,
    },
    StepCountOnly,
    /// Logit-lens scalars of the last two step boundaries, or their mean
    /// over every step boundary.
    LogitLens {
        all_boundaries: bool,
    },
}

impl FeatureKind {
    pub fn label(&self) -> &'static str {
        match self {
            FeatureKind::EarlyConcat {
                include_step3: false,
            } => "early_concat",
            FeatureKind::EarlyConcat {
                include_step3: true,
            } => "early_concat3",
            FeatureKind::EarlyDiff => "early_diff",
            FeatureKind::LateTraj => "late_traj",
            FeatureKind::FinalState { pca: false } => "final_state",
            FeatureKind::FinalState { pca: true } => "final_state_pca",
            FeatureKind::StepCountOnly => "step_count_only",
            FeatureKind::LogitLens {
                all_boundaries: false,
            } => "logit_lens",
            FeatureKind::LogitLens {
                all_boundaries: true,
            } => "logit_lens_all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "early_concat" => FeatureKind::EarlyConcat {
                include_step3: false,
            },
            "early_concat3" => FeatureKind::EarlyConcat {
                include_step3: true,
            },
            "early_diff" => FeatureKind::EarlyDiff,
            "late_traj" => FeatureKind::LateTraj,
            "final_state" => FeatureKind::FinalState { pca: false },
            "final_state_pca" => FeatureKind::FinalState { pca: true },
            "step_count_only" => FeatureKind::StepCountOnly,
            "logit_lens" => FeatureKind::LogitLens {
                all_boundaries: false,
            },
            "logit_lens_all" => FeatureKind::LogitLens {
                all_boundaries: true,
            },
            _ => return None,
        })
    }

    fn uses_pca(&self) -> bool {
        matches!(
            self,
            FeatureKind::LateTraj | FeatureKind::FinalState { pca: true }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub layer: usize,
    pub pca_r: usize,
}

impl FeatureSpec {
    pub fn new(kind: FeatureKind, layer: usize) -> Self {
        FeatureSpec {
            kind,
            layer,
            pca_r: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub c_grid: Vec<f64>,
    pub cv_folds: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            c_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0],
            cv_folds: 5,
            test_fraction: 0.1,
            seed: 42,
            max_iter: 500,
            tol: 1e-5,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() {
            return Err(Error::config("predictor.c_grid", "grid is empty"));
        }
        if let Some(c) = self.c_grid.iter().find(|c| !(**c > 0.0)) {
            return Err(Error::config(
                "predictor.c_grid",
                format!("non-positive value {c}"),
            ));
        }
        if self.cv_folds < 2 {
            return Err(Error::config("predictor.cv_folds", "need at least 2 folds"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config(
                "predictor.test_fraction",
                format!("must lie in (0, 1), got {}", self.test_fraction),
            ));
        }
        Ok(())
    }

    fn logistic(&self, c: f64) -> LogisticConfig {
        LogisticConfig {
            c,
            class_weighting: ClassWeighting::None,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

/// Raw per-example feature blocks before any reduction.
#[derive(Debug, Clone)]
pub struct FeatureBlocks {
    pub blocks: Vec<Array2<f64>>,
    pub labels: Vec<bool>,
    /// Index into the source corpus of each row.
    pub example_index: Vec<usize>,
    /// Examples lacking a required boundary.
    pub excluded_missing: usize,
    pub excluded_unknown: usize,
}

impl FeatureBlocks {
    pub fn n(&self) -> usize {
        self.labels.len()
    }
}

fn layer_vec(t: &TraceExample, sel: Selector, layer: usize) -> Option<Vec<f64>> {
    t.select(sel).map(|b| b.layer_f64(layer))
}

fn lens_scalars(t: &TraceExample, sel: Selector) -> Result<Option<Vec<f64>>> {
    let Some(b) = t.select(sel) else {
        return Ok(None);
    };
    LOGIT_LENS_KEYS
        .iter()
        .map(|k| {
            b.aux.get(*k).copied().ok_or_else(|| {
                Error::MissingFeature(format!(
                    "logit_lens requires aux feature `{k}` on every step boundary; example `{}` \
                     step {} lacks it",
                    t.example_id, b.step_index
                ))
            })
        })
        .collect::<Result<Vec<f64>>>()
        .map(Some)
}

/// Blocks of one example, or `None` if a required boundary is absent.
fn example_blocks(t: &TraceExample, spec: &FeatureSpec) -> Result<Option<Vec<Vec<f64>>>> {
    let l = spec.layer;
    Ok(match spec.kind {
        FeatureKind::EarlyConcat { include_step3 } => {
            let mut sels = vec![Selector::Step(1), Selector::Step(2)];
            if include_step3 {
                sels.push(Selector::Step(3));
            }
            let parts: Option<Vec<Vec<f64>>> = sels.iter().map(|&s| layer_vec(t, s, l)).collect();
            parts.map(|p| vec![p.concat()])
        }
        FeatureKind::EarlyDiff => match (
            layer_vec(t, Selector::Step(1), l),
            layer_vec(t, Selector::Step(2), l),
        ) {
            (Some(a), Some(b)) => Some(vec![b.iter().zip(&a).map(|(b, a)| b - a).collect()]),
            _ => None,
        },
        FeatureKind::LateTraj => match (
            layer_vec(t, Selector::Term, l),
            layer_vec(t, Selector::Last, l),
            layer_vec(t, Selector::SecondLast, l),
        ) {
            (Some(term), Some(last), Some(prev)) => Some(vec![
                term,
                last.iter().zip(&prev).map(|(a, b)| a - b).collect(),
            ]),
            _ => None,
        },
        FeatureKind::FinalState { .. } => layer_vec(t, Selector::Term, l).map(|v| vec![v]),
        FeatureKind::StepCountOnly => Some(vec![vec![t.step_count as f64]]),
        FeatureKind::LogitLens {
            all_boundaries: false,
        } => {
            let last = lens_scalars(t, Selector::Last)?;
            let prev = lens_scalars(t, Selector::SecondLast)?;
            match last {
                None => None,
                Some(last) => {
                    let prev =
                        prev.unwrap_or_else(|| vec![MISSING_SENTINEL; LOGIT_LENS_KEYS.len()]);
                    Some(vec![[prev, last].concat()])
                }
            }
        }
        FeatureKind::LogitLens {
            all_boundaries: true,
        } => {
            let mut acc = vec![0.0; LOGIT_LENS_KEYS.len()];
            let mut n = 0.0;
            for k in 1..=t.step_count {
                if let Some(v) = lens_scalars(t, Selector::Step(k))? {
                    acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                    n += 1.0;
                }
            }
            if n == 0.0 {
                None
            } else {
                Some(vec![acc.into_iter().map(|a| a / n).collect()])
            }
        }
    })
}

pub fn extract_blocks(traces: &[TraceExample], spec: &FeatureSpec) -> Result<FeatureBlocks> {
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut labels = Vec::new();
    let mut example_index = Vec::new();
    let (mut missing, mut unknown) = (0, 0);
    for (i, t) in traces.iter().enumerate() {
        if let Some(b) = t.boundaries.first() {
            if spec.layer >= b.activations.nrows() {
                return Err(Error::InvalidInput(format!(
                    "layer {} out of range for {} stored layers",
                    spec.layer,
                    b.activations.nrows()
                )));
            }
        }
        let Some(label) = t.correctness.as_bool() else {
            unknown += 1;
            continue;
        };
        match example_blocks(t, spec)? {
            Some(b) => {
                rows.push(b);
                labels.push(label);
                example_index.push(i);
            }
            None => missing += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::Insufficient(format!(
            "no example qualifies for {} features ({missing} lack a required boundary, \
             {unknown} have unknown correctness)",
            spec.kind.label()
        )));
    }
    let n_blocks = rows[0].len();
    let blocks = (0..n_blocks)
        .map(|b| {
            let w = rows[0][b].len();
            Array2::from_shape_fn((rows.len(), w), |(i, j)| rows[i][b][j])
        })
        .collect();
    Ok(FeatureBlocks {
        blocks,
        labels,
        example_index,
        excluded_missing: missing,
        excluded_unknown: unknown,
    })
}

fn select_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Per-block reduction fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub bases: Vec<Option<PcaBasis>>,
}

impl FeatureTransform {
    pub fn fit(blocks: &FeatureBlocks, rows: &[usize], spec: &FeatureSpec) -> Result<Self> {
        if spec.kind.uses_pca() && spec.pca_r == 0 {
            return Err(Error::config("predictor.pca_r", "must be at least 1"));
        }
        let bases = blocks
            .blocks
            .iter()
            .map(|b| {
                if spec.kind.uses_pca() {
                    fit_pca_capped(select_rows(b, rows).view(), spec.pca_r).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureTransform { bases })
    }

    pub fn apply(&self, blocks: &FeatureBlocks, rows: &[usize]) -> Result<Array2<f64>> {
        let parts = blocks
            .blocks
            .iter()
            .zip(&self.bases)
            .map(|(b, basis)| {
                let x = select_rows(b, rows);
                match basis {
                    Some(p) => p.project_rows(x.view()),
                    None => Ok(x),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<ArrayView2<'_, f64>> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(1), &views).map_err(|e| Error::DimensionMismatch(e.to_string()))
    }

    /// Bitwise identity of every fitted basis.
    pub fn same_as(&self, other: &FeatureTransform) -> bool {
        self.bases.len() == other.bases.len()
            && self
                .bases
                .iter()
                .zip(&other.bases)
                .all(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => a.same_basis(b),
                    (None, None) => true,
                    _ => false,
                })
    }
}

/// Feature matrix for a corpus. With `transform = None` the reduction is
/// fitted on these rows (training); otherwise the given one is reused.
pub fn build_features(
    traces: &[TraceExample],
    spec: &FeatureSpec,
    transform: Option<&FeatureTransform>,
) -> Result<(Array2<f64>, Vec<bool>, FeatureTransform, FeatureBlocks)> {
    let blocks = extract_blocks(traces, spec)?;
    let all: Vec<usize> = (0..blocks.n()).collect();
    let t = match transform {
        Some(t) => t.clone(),
        None => FeatureTransform::fit(&blocks, &all, spec)?,
    };
    let x = t.apply(&blocks, &all)?;
    Ok((x, blocks.labels.clone(), t, blocks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRow {
    pub feature: String,
    pub layer: usize,
    pub seed: u64,
    pub test_auc: f64,
    pub selected_c: f64,
    /// Mean validation AUC per grid value, in grid order.
    pub cv_auc: Vec<f64>,
    pub n_features: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub excluded_missing: usize,
    pub excluded_unknown: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedPredictor {
    pub spec: FeatureSpec,
    pub model: LogisticModel,
    pub transform: FeatureTransform,
    pub row: PredictorRow,
    /// Corpus indices of the held-out rows.
    pub test_examples: Vec<usize>,
}

impl TrainedPredictor {
    /// Predicted probability of correctness for each example, `None` where
    /// the required boundaries are missing.
    pub fn score(&self, traces: &[TraceExample]) -> Result<Vec<Option<f64>>> {
        let mut out = vec![None; traces.len()];
        let mut rows = Vec::new();
        let mut idx = Vec::new();
        for (i, t) in traces.iter().enumerate() {
            if let Some(b) = example_blocks(t, &self.spec)? {
                rows.push(b);
                idx.push(i);
            }
        }
        if rows.is_empty() {
            return Ok(out);
        }
        let blocks = FeatureBlocks {
            blocks: (0..rows[0].len())
                .map(|b| {
                    Array2::from_shape_fn((rows.len(), rows[0][b].len()), |(i, j)| rows[i][b][j])
                })
                .collect(),
            labels: vec![false; rows.len()],
            example_index: idx.clone(),
            excluded_missing: 0,
            excluded_unknown: 0,
        };
        let all: Vec<usize> = (0..rows.len()).collect();
        let x = self.transform.apply(&blocks, &all)?;
        let z = self.model.decision_rows(x.view())?;
        for (k, &i) in idx.iter().enumerate() {
            out[i] = Some(crate::stats::sigmoid(z[k]));
        }
        Ok(out)
    }
}

fn cv_auc_per_c(
    blocks: &FeatureBlocks,
    train_rows: &[usize],
    spec: &FeatureSpec,
    cfg: &PredictorConfig,
) -> Result<Vec<f64>> {
    let labels: Vec<bool> = train_rows.iter().map(|&i| blocks.labels[i]).collect();
    let folds = stratified_folds(&labels, cfg.cv_folds, cfg.seed)?;
    let per_fold = folds
        .par_iter()
        .enumerate()
        .map(|(f, held)| {
            let held_set: std::collections::BTreeSet<usize> = held.iter().copied().collect();
            let fit_rows: Vec<usize> = (0..train_rows.len())
                .filter(|i| !held_set.contains(i))
                .map(|i| train_rows[i])
                .collect();
            let val_rows: Vec<usize> = held.iter().map(|&i| train_rows[i]).collect();
            let y_fit: Vec<bool> = fit_rows.iter().map(|&i| blocks.labels[i]).collect();
            let y_val: Vec<bool> = val_rows.iter().map(|&i| blocks.labels[i]).collect();
            if y_val.iter().all(|&v| v) || y_val.iter().all(|&v| !v) {
                return Err(Error::SingleClass(format!(
                    "cross-validation fold {f} holds a single class"
                )));
            }
            let t = FeatureTransform::fit(blocks, &fit_rows, spec)?;
            let x_fit = t.apply(blocks, &fit_rows)?;
            let x_val = t.apply(blocks, &val_rows)?;
            cfg.c_grid
                .iter()
                .map(|&c| {
                    let m = fit_logistic(x_fit.view(), &y_fit, &cfg.logistic(c))?;
                    roc_auc(&m.decision_rows(x_val.view())?, &y_val)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..cfg.c_grid.len())
        .map(|c| mean(&per_fold.iter().map(|f| f[c]).collect::<Vec<_>>()))
        .collect())
}

pub fn train_on_blocks(
    blocks: &FeatureBlocks,
    spec: &FeatureSpec,
    cfg: &PredictorConfig,
) -> Result<TrainedPredictor> {
    cfg.validate()?;
    if spec.kind == FeatureKind::StepCountOnly {
        let first = blocks.blocks[0][[0, 0]];
        if blocks.blocks[0].column(0).iter().all(|&v| v == first) {
            return Err(Error::DegenerateFeature(format!(
                "step count is constant ({first}) across the corpus"
            )));
        }
    }
    let parts = stratified_partition(
        &blocks.labels,
        &[1.0 - cfg.test_fraction, cfg.test_fraction],
        cfg.seed,
    )?;
    let (train, test) = (&parts[0], &parts[1]);
    let cv = cv_auc_per_c(blocks, train, spec, cfg)?;
    // Grid order is ascending; strict improvement keeps the smaller C on ties.
    let mut best = 0;
    for (i, &a) in cv.iter().enumerate() {
        if a > cv[best] {
            best = i;
        }
    }
    let c = cfg.c_grid[best];
    let transform = FeatureTransform::fit(blocks, train, spec)?;
    let x_train = transform.apply(blocks, train)?;
    let y_train: Vec<bool> = train.iter().map(|&i| blocks.labels[i]).collect();
    let model = fit_logistic(x_train.view(), &y_train, &cfg.logistic(c))?;

    let test_transform = transform.clone();
    assert!(
        test_transform.same_as(&transform),
        "held-out rows must be projected with the training basis"
    );
    let x_test = test_transform.apply(blocks, test)?;
    let y_test: Vec<bool> = test.iter().map(|&i| blocks.labels[i]).collect();
    let test_auc = roc_auc(&model.decision_rows(x_test.view())?, &y_test)?;

    Ok(TrainedPredictor {
        spec: *spec,
        row: PredictorRow {
            feature: spec.kind.label().to_owned(),
            layer: spec.layer,
            seed: cfg.seed,
            test_auc,
            selected_c: c,
            cv_auc: cv,
            n_features: x_train.ncols(),
            n_train: train.len(),
            n_test: test.len(),
            excluded_missing: blocks.excluded_missing,
            excluded_unknown: blocks.excluded_unknown,
        },
        model,
        transform,
        test_examples: test.iter().map(|&i| blocks.example_index[i]).collect(),
    })
}

pub fn train_predictor(
    traces: &[TraceExample],
    spec: &FeatureSpec,
    cfg: &PredictorConfig,
) -> Result<TrainedPredictor> {
    let blocks = extract_blocks(traces, spec)?;
    train_on_blocks(&blocks, spec, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub rows: Vec<PredictorRow>,
    pub average_auc: f64,
    pub best_layer: usize,
    pub best_auc: f64,
}

pub fn layer_sweep_auc(
    traces: &[TraceExample],
    spec: &FeatureSpec,
    cfg: &PredictorConfig,
    layers: &[usize],
) -> Result<PredictorReport> {
    if layers.is_empty() {
        return Err(Error::InvalidInput("no layers to sweep".into()));
    }
    let rows = layers
        .par_iter()
        .map(|&l| train_predictor(traces, &FeatureSpec { layer: l, ..*spec }, cfg).map(|p| p.row))
        .collect::<Result<Vec<_>>>()?;
    let aucs: Vec<f64> = rows.iter().map(|r| r.test_auc).collect();
    let mut best = 0;
    for (i, &a) in aucs.iter().enumerate() {
        if a > aucs[best] {
            best = i;
        }
    }
    Ok(PredictorReport {
        average_auc: mean(&aucs),
        best_layer: rows[best].layer,
        best_auc: aucs[best],
        rows,
    })
}

/// Test AUC of a one-feature model on the step count.
pub fn baseline_step_count(traces: &[TraceExample], cfg: &PredictorConfig) -> Result<f64> {
    let spec = FeatureSpec::new(FeatureKind::StepCountOnly, 0);
    Ok(train_predictor(traces, &spec, cfg)?.row.test_auc)
}

/// Test AUC of a model on logit-lens scalars.
pub fn baseline_logit_lens(
    traces: &[TraceExample],
    cfg: &PredictorConfig,
    all_boundaries: bool,
) -> Result<f64> {
    let spec = FeatureSpec::new(FeatureKind::LogitLens { all_boundaries }, 0);
    Ok(train_predictor(traces, &spec, cfg)?.row.test_auc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthAudit {
    pub auc_original: f64,
    pub auc_balanced: f64,
    pub n_original: usize,
    pub n_balanced: usize,
    /// Step-count buckets holding a single class, removed entirely.
    pub dropped_buckets: Vec<u32>,
}

impl LengthAudit {
    pub fn drop(&self) -> f64 {
        self.auc_original - self.auc_balanced
    }
}

/// Equalize the step-count histogram of correct and incorrect examples by
/// down-sampling the majority class in each bucket, then retrain.
pub fn length_balance(traces: &[TraceExample], seed: u64) -> (Vec<usize>, Vec<u32>) {
    let mut buckets: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        match t.correctness.as_bool() {
            Some(true) => buckets.entry(t.step_count).or_default().0.push(i),
            Some(false) => buckets.entry(t.step_count).or_default().1.push(i),
            None => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for (k, (mut c, mut ic)) in buckets {
        if c.is_empty() || ic.is_empty() {
            dropped.push(k);
            continue;
        }
        let n = c.len().min(ic.len());
        c.shuffle(&mut rng);
        ic.shuffle(&mut rng);
        keep.extend_from_slice(&c[..n]);
        keep.extend_from_slice(&ic[..n]);
    }
    keep.sort_unstable();
    (keep, dropped)
}

pub fn length_balanced_audit(
    traces: &[TraceExample],
    spec: &FeatureSpec,
    cfg: &PredictorConfig,
) -> Result<LengthAudit> {
    let original = train_predictor(traces, spec, cfg)?;
    let (keep, dropped_buckets) = length_balance(traces, cfg.seed);
    let balanced: Vec<TraceExample> = keep.iter().map(|&i| traces[i].clone()).collect();
    let rebalanced = train_predictor(&balanced, spec, cfg)?;
    Ok(LengthAudit {
        auc_original: original.row.test_auc,
        auc_balanced: rebalanced.row.test_auc,
        n_original: original.row.n_train + original.row.n_test,
        n_balanced: rebalanced.row.n_train + rebalanced.row.n_test,
        dropped_buckets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{build_world, generate_corpus_in, HarnessConfig};
    use crate::trace::tests::tiny_example;
    use crate::trace::Correctness;

    fn corpus(cfg: &HarnessConfig, n: usize, seed: u64) -> Vec<TraceExample> {
        let w = build_world(cfg).unwrap();
        generate_corpus_in(&w, cfg, n, seed).1
    }

    fn quick() -> PredictorConfig {
        PredictorConfig {
            c_grid: vec![0.1, 1.0],
            cv_folds: 3,
            ..Default::default()
        }
    }

    #[test]
    fn early_diff_of_equal_states_is_zero() {
        let mut t = tiny_example("a", 3, 2, 4);
        let s1 = t.boundaries[0].activations.clone();
        t.boundaries[1].activations = s1;
        let b = example_blocks(&t, &FeatureSpec::new(FeatureKind::EarlyDiff, 1))
            .unwrap()
            .unwrap();
        assert!(b[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn late_traj_shape_and_exclusion() {
        let cfg = HarnessConfig {
            step_count_distribution: vec![(1, 0.2), (4, 0.8)],
            ..Default::default()
        };
        let traces = corpus(&cfg, 200, 1);
        let ones = traces.iter().filter(|t| t.step_count == 1).count();
        let spec = FeatureSpec {
            pca_r: 16,
            ..FeatureSpec::new(FeatureKind::LateTraj, 7)
        };
        let (x, y, t, blocks) = build_features(&traces, &spec, None).unwrap();
        assert_eq!(blocks.excluded_missing, ones);
        assert_eq!(x.ncols(), 2 * 16);
        assert_eq!(y.len(), 200 - ones);
        let (x2, _, t2, _) = build_features(&traces, &spec, Some(&t)).unwrap();
        assert!(t.same_as(&t2));
        assert_eq!(x, x2);
    }

    #[test]
    fn separable_labels_give_perfect_auc() {
        let mut traces: Vec<TraceExample> = (0..120)
            .map(|i| {
                let mut t = tiny_example(&format!("e{i}"), 2, 1, 3);
                let label = i % 3 == 0;
                t.correctness = if label {
                    Correctness::Correct
                } else {
                    Correctness::Incorrect
                };
                t
            })
            .collect();
        for (i, t) in traces.iter_mut().enumerate() {
            let v = if t.correctness == Correctness::Correct {
                1.0
            } else {
                -1.0
            };
            t.boundaries[2].activations[[0, 0]] = v + 0.01 * (i % 7) as f32;
        }
        let r = train_predictor(
            &traces,
            &FeatureSpec::new(FeatureKind::FinalState { pca: false }, 0),
            &quick(),
        )
        .unwrap();
        assert_eq!(r.row.test_auc, 1.0);
    }

    #[test]
    fn constant_step_count_is_degenerate() {
        let traces: Vec<TraceExample> = (0..40)
            .map(|i| {
                let mut t = tiny_example(&format!("e{i}"), 3, 1, 2);
                t.correctness = if i % 2 == 0 {
                    Correctness::Correct
                } else {
                    Correctness::Incorrect
                };
                t
            })
            .collect();
        assert!(matches!(
            baseline_step_count(&traces, &quick()),
            Err(Error::DegenerateFeature(_))
        ));
    }

    #[test]
    fn logit_lens_requires_aux() {
        let cfg = HarnessConfig {
            emit_aux: false,
            ..Default::default()
        };
        let traces = corpus(&cfg, 50, 2);
        let err = baseline_logit_lens(&traces, &quick(), false).unwrap_err();
        assert!(matches!(err, Error::MissingFeature(_)));
        assert!(err.to_string().contains("entropy"));
    }

    #[test]
    fn oracle_aux_feature_gives_perfect_auc() {
        let cfg = HarnessConfig::default();
        let mut traces = corpus(&cfg, 300, 3);
        for t in &mut traces {
            let y = if t.correctness == Correctness::Correct {
                1.0
            } else {
                0.0
            };
            for b in &mut t.boundaries {
                b.aux.insert("entropy".into(), y);
            }
        }
        assert_eq!(baseline_logit_lens(&traces, &quick(), false).unwrap(), 1.0);
    }

    #[test]
    fn single_step_runs_use_the_sentinel() {
        let cfg = HarnessConfig::default();
        let mut t = corpus(&cfg, 1, 4).remove(0);
        t.boundaries.drain(1..t.step_count as usize);
        t.step_count = 1;
        let b = example_blocks(
            &t,
            &FeatureSpec::new(
                FeatureKind::LogitLens {
                    all_boundaries: false,
                },
                0,
            ),
        )
        .unwrap()
        .unwrap();
        assert_eq!(&b[0][..3], &[MISSING_SENTINEL; 3]);
    }

    #[test]
    fn sweep_average_is_mean_of_rows() {
        let cfg = HarnessConfig::default();
        let traces = corpus(&cfg, 300, 5);
        let spec = FeatureSpec {
            pca_r: 8,
            ..FeatureSpec::new(FeatureKind::LateTraj, 0)
        };
        let rep = layer_sweep_auc(&traces, &spec, &quick(), &[5, 7]).unwrap();
        let m = rep.rows.iter().map(|r| r.test_auc).sum::<f64>() / 2.0;
        assert!((rep.average_auc - m).abs() <= 1e-12);
        let single = layer_sweep_auc(&traces, &spec, &quick(), &[7]).unwrap();
        let direct = train_predictor(&traces, &FeatureSpec { layer: 7, ..spec }, &quick()).unwrap();
        assert_eq!(single.rows[0], direct.row);
    }

    #[test]
    fn balanced_resampling_equalizes_histograms() {
        let cfg = HarnessConfig::default();
        let traces = corpus(&cfg, 400, 6);
        let (keep, _) = length_balance(&traces, 1);
        let mut hist: BTreeMap<u32, (i32, i32)> = BTreeMap::new();
        for &i in &keep {
            let e = hist.entry(traces[i].step_count).or_default();
            if traces[i].correctness == Correctness::Correct {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        assert!(hist.values().all(|(a, b)| a == b));
    }
}
