//! Between-step distances grouped by correctness, with bootstrap intervals.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{bootstrap_group_cis, distance, fit_pca, mean, BootstrapCI, Metric};
use crate::trace::{Correctness, Selector, TraceExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub from: Selector,
    pub to: Selector,
    pub layer: usize,
    pub metric: Metric,
}

impl TransitionSpec {
    pub fn label(&self) -> String {
        transition_label(self.from, self.to)
    }
}

pub fn transition_label(from: Selector, to: Selector) -> String {
    format!("{}->{}", from.label(), to.label())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDistances {
    pub correct: Vec<f64>,
    pub incorrect: Vec<f64>,
    /// Examples lacking one of the two boundaries.
    pub excluded_missing: usize,
    pub excluded_unknown: usize,
}

pub fn transition_distances(
    traces: &[TraceExample],
    spec: &TransitionSpec,
) -> Result<TransitionDistances> {
    if spec.from == spec.to {
        return Err(Error::InvalidInput(format!(
            "transition endpoints coincide ({})",
            spec.from
        )));
    }
    let mut out = TransitionDistances {
        correct: Vec::new(),
        incorrect: Vec::new(),
        excluded_missing: 0,
        excluded_unknown: 0,
    };
    for t in traces {
        let Some(label) = t.correctness.as_bool() else {
            out.excluded_unknown += 1;
            continue;
        };
        let (Some(a), Some(b)) = (t.select(spec.from), t.select(spec.to)) else {
            out.excluded_missing += 1;
            continue;
        };
        if spec.layer >= a.activations.nrows() {
            return Err(Error::InvalidInput(format!(
                "layer {} out of range for {} stored layers",
                spec.layer,
                a.activations.nrows()
            )));
        }
        let d = distance(
            &a.layer_f64(spec.layer),
            &b.layer_f64(spec.layer),
            spec.metric,
        )?;
        if label {
            out.correct.push(d);
        } else {
            out.incorrect.push(d);
        }
    }
    if out.correct.is_empty() || out.incorrect.is_empty() {
        return Err(Error::Insufficient(format!(
            "transition {} at layer {}: {} correct and {} incorrect distances after filtering",
            spec.label(),
            spec.layer,
            out.correct.len(),
            out.incorrect.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub transition: String,
    pub metric: Metric,
    pub layer: usize,
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    /// `mean_incorrect − mean_correct`; positive means incorrect runs move farther.
    pub delta_ic: f64,
    pub ci_correct: BootstrapCI,
    pub ci_incorrect: BootstrapCI,
    pub ci_delta: BootstrapCI,
    /// The two group intervals do not overlap.
    pub significant: bool,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub excluded_missing: usize,
    pub excluded_unknown: usize,
    /// Which corpus or partition the distances came from.
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub rows: Vec<DivergenceRow>,
    pub n_resamples: usize,
    pub seed: u64,
}

impl DivergenceReport {
    pub fn find(&self, from: Selector, to: Selector, metric: Metric) -> Option<&DivergenceRow> {
        let label = transition_label(from, to);
        self.rows
            .iter()
            .find(|r| r.transition == label && r.metric == metric)
    }
}

pub fn divergence_row(
    traces: &[TraceExample],
    spec: &TransitionSpec,
    n_resamples: usize,
    seed: u64,
    split: &str,
) -> Result<DivergenceRow> {
    let td = transition_distances(traces, spec)?;
    let cis = bootstrap_group_cis(&td.incorrect, &td.correct, n_resamples, seed)?;
    let (mc, mi) = (mean(&td.correct), mean(&td.incorrect));
    Ok(DivergenceRow {
        transition: spec.label(),
        metric: spec.metric,
        layer: spec.layer,
        mean_correct: mc,
        mean_incorrect: mi,
        delta_ic: mi - mc,
        ci_correct: cis.b,
        ci_incorrect: cis.a,
        ci_delta: cis.diff,
        significant: cis.a.disjoint(&cis.b),
        n_correct: td.correct.len(),
        n_incorrect: td.incorrect.len(),
        excluded_missing: td.excluded_missing,
        excluded_unknown: td.excluded_unknown,
        split: split.to_owned(),
    })
}

/// One row per (transition, metric), in the order given.
pub fn divergence_report(
    traces: &[TraceExample],
    transitions: &[(Selector, Selector)],
    metrics: &[Metric],
    layer: usize,
    n_resamples: usize,
    seed: u64,
    split: &str,
) -> Result<DivergenceReport> {
    let specs: Vec<TransitionSpec> = transitions
        .iter()
        .flat_map(|&(from, to)| {
            metrics.iter().map(move |&metric| TransitionSpec {
                from,
                to,
                layer,
                metric,
            })
        })
        .collect();
    let rows = specs
        .par_iter()
        .map(|s| divergence_row(traces, s, n_resamples, seed, split))
        .collect::<Result<Vec<_>>>()?;
    Ok(DivergenceReport {
        rows,
        n_resamples,
        seed,
    })
}

/// Plot-ready 2-D PCA coordinates of every boundary at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub example_id: String,
    pub boundary: String,
    pub correctness: Correctness,
    pub x: f64,
    pub y: f64,
}

pub fn pca_2d(traces: &[TraceExample], layer: usize) -> Result<Vec<ProjectedPoint>> {
    let rows: Vec<(&TraceExample, &crate::trace::BoundaryRecord)> = traces
        .iter()
        .flat_map(|t| t.boundaries.iter().map(move |b| (t, b)))
        .collect();
    let Some((_, first)) = rows.first() else {
        return Err(Error::Insufficient("no boundaries to project".into()));
    };
    let dim = first.activations.ncols();
    if layer >= first.activations.nrows() {
        return Err(Error::InvalidInput(format!("layer {layer} out of range")));
    }
    let mut x = Array2::<f64>::zeros((rows.len(), dim));
    for (i, (_, b)) in rows.iter().enumerate() {
        x.row_mut(i).assign(&b.layer(layer).mapv(f64::from));
    }
    let basis = fit_pca(
        x.view(),
        2.min(dim).min(rows.len().saturating_sub(1)).max(1),
    )?;
    let z = basis.project_rows(x.view())?;
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, (t, b))| ProjectedPoint {
            example_id: t.example_id.clone(),
            boundary: match b.kind {
                crate::trace::BoundaryKind::Step => format!("step{}", b.step_index),
                crate::trace::BoundaryKind::Term => "term".into(),
            },
            correctness: t.correctness,
            x: z[[i, 0]],
            y: if z.ncols() > 1 { z[[i, 1]] } else { 0.0 },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{build_world, generate_corpus_in, HarnessConfig};

    fn corpus(cfg: &HarnessConfig, n: usize, seed: u64) -> Vec<TraceExample> {
        let w = build_world(cfg).unwrap();
        generate_corpus_in(&w, cfg, n, seed).1
    }

    #[test]
    fn noiseless_null_gives_equal_distances() {
        let cfg = HarnessConfig {
            noise_scale: 0.0,
            drift_scale: 0.0,
            ..Default::default()
        };
        let traces = corpus(&cfg, 200, 1);
        let spec = TransitionSpec {
            from: Selector::Step(1),
            to: Selector::Step(2),
            layer: cfg.n_layers - 1,
            metric: Metric::Euclidean,
        };
        let td = transition_distances(&traces, &spec).unwrap();
        let all: Vec<f64> = td.correct.iter().chain(&td.incorrect).copied().collect();
        assert!(all.iter().all(|&d| d == all[0]));
    }

    #[test]
    fn single_step_runs_are_excluded_and_counted() {
        let cfg = HarnessConfig {
            step_count_distribution: vec![(1, 0.5), (3, 0.5)],
            ..Default::default()
        };
        let traces = corpus(&cfg, 200, 2);
        let ones = traces.iter().filter(|t| t.step_count == 1).count();
        let spec = TransitionSpec {
            from: Selector::SecondLast,
            to: Selector::Last,
            layer: 7,
            metric: Metric::Cosine,
        };
        let td = transition_distances(&traces, &spec).unwrap();
        assert_eq!(td.excluded_missing, ones);
        assert_eq!(td.correct.len() + td.incorrect.len(), 200 - ones);
    }

    #[test]
    fn report_shape_and_identities() {
        let cfg = HarnessConfig::default();
        let traces = corpus(&cfg, 300, 3);
        let rep = divergence_report(
            &traces,
            &[
                (Selector::Step(1), Selector::Step(2)),
                (Selector::Last, Selector::Term),
            ],
            &[Metric::Euclidean, Metric::Cosine],
            7,
            500,
            42,
            "all",
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 4);
        for r in &rep.rows {
            assert_eq!(r.delta_ic, r.mean_incorrect - r.mean_correct);
            assert_eq!(r.significant, r.ci_correct.disjoint(&r.ci_incorrect));
        }
    }

    #[test]
    fn coinciding_endpoints_rejected() {
        let traces = corpus(&HarnessConfig::default(), 20, 4);
        let spec = TransitionSpec {
            from: Selector::Last,
            to: Selector::Last,
            layer: 0,
            metric: Metric::Euclidean,
        };
        assert!(transition_distances(&traces, &spec).is_err());
    }

    #[test]
    fn scaling_activations() {
        let cfg = HarnessConfig::default();
        let traces = corpus(&cfg, 150, 5);
        let scaled: Vec<TraceExample> = traces
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for b in &mut t.boundaries {
                    b.activations.mapv_inplace(|v| v * 2.0);
                }
                t
            })
            .collect();
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let spec = TransitionSpec {
                from: Selector::Last,
                to: Selector::Term,
                layer: 7,
                metric,
            };
            let a = divergence_row(&traces, &spec, 200, 1, "a").unwrap();
            let b = divergence_row(&scaled, &spec, 200, 1, "b").unwrap();
            let factor = if metric == Metric::Euclidean {
                2.0
            } else {
                1.0
            };
            assert!((b.delta_ic - factor * a.delta_ic).abs() < 1e-5);
        }
    }

    #[test]
    fn projection_has_one_point_per_boundary() {
        let traces = corpus(&HarnessConfig::default(), 20, 6);
        let pts = pca_2d(&traces, 7).unwrap();
        assert_eq!(
            pts.len(),
            traces.iter().map(|t| t.boundaries.len()).sum::<usize>()
        );
    }
}
