//! Long-format CSV and JSON report writers. Every CSV has one row per cell
//! so plotting tools can consume it without reshaping.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DivergenceReport, ProjectedPoint};
use crate::predictor::PredictorRow;
use crate::probes::ProbeSweepReport;
use crate::steering::PolicyOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Some(ReportFormat::Csv),
            "json" => Some(ReportFormat::Json),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

fn report_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Report(format!("{}: {e}", path.display()))
}

pub fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Report(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Report(e.to_string()))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let bytes = csv_bytes(rows)?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| report_err(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| report_err(path, e))?;
    bytes.push(b'\n');
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| report_err(path, e))
}

/// Rows as CSV or as a JSON array, by format.
pub fn write_rows<R: Serialize>(path: &Path, rows: &[R], format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => write_csv(path, rows),
        ReportFormat::Json => write_json(path, rows),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub target: String,
    pub layer: usize,
    pub accuracy: Option<f64>,
    pub n_pos: Option<usize>,
    pub n_neg: Option<usize>,
    pub converged: Option<bool>,
    /// Why the cell is empty, if it is.
    pub note: String,
}

pub fn probe_rows(rep: &ProbeSweepReport) -> Vec<ProbeRow> {
    let mut out = Vec::new();
    for (ti, target) in rep.targets.iter().enumerate() {
        for (li, &layer) in rep.layers.iter().enumerate() {
            let cell = rep.cells[ti][li].as_ref();
            let note = rep
                .failures
                .iter()
                .find(|(t, l, _)| *t == ti && *l == li)
                .map(|f| f.2.clone())
                .unwrap_or_default();
            out.push(ProbeRow {
                target: target.label(),
                layer,
                accuracy: cell.map(|c| c.accuracy),
                n_pos: cell.map(|c| c.n_pos),
                n_neg: cell.map(|c| c.n_neg),
                converged: cell.map(|c| c.converged),
                note,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCsvRow {
    pub transition: String,
    pub metric: String,
    pub layer: usize,
    pub split: String,
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    pub delta_ic: f64,
    pub delta_lower95: f64,
    pub delta_upper95: f64,
    pub correct_lower95: f64,
    pub correct_upper95: f64,
    pub incorrect_lower95: f64,
    pub incorrect_upper95: f64,
    pub significant: bool,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub excluded_missing: usize,
    pub excluded_unknown: usize,
    pub n_resamples: usize,
    pub seed: u64,
}

pub fn divergence_rows(rep: &DivergenceReport) -> Vec<DivergenceCsvRow> {
    rep.rows
        .iter()
        .map(|r| DivergenceCsvRow {
            transition: r.transition.clone(),
            metric: r.metric.as_str().to_owned(),
            layer: r.layer,
            split: r.split.clone(),
            mean_correct: r.mean_correct,
            mean_incorrect: r.mean_incorrect,
            delta_ic: r.delta_ic,
            delta_lower95: r.ci_delta.lower95,
            delta_upper95: r.ci_delta.upper95,
            correct_lower95: r.ci_correct.lower95,
            correct_upper95: r.ci_correct.upper95,
            incorrect_lower95: r.ci_incorrect.lower95,
            incorrect_upper95: r.ci_incorrect.upper95,
            significant: r.significant,
            n_correct: r.n_correct,
            n_incorrect: r.n_incorrect,
            excluded_missing: r.excluded_missing,
            excluded_unknown: r.excluded_unknown,
            n_resamples: rep.n_resamples,
            seed: rep.seed,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorCsvRow {
    pub feature: String,
    pub layer: usize,
    pub seed: u64,
    pub test_auc: f64,
    pub selected_c: f64,
    pub n_features: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub excluded_missing: usize,
    pub excluded_unknown: usize,
}

pub fn predictor_rows(rows: &[PredictorRow]) -> Vec<PredictorCsvRow> {
    rows.iter()
        .map(|r| PredictorCsvRow {
            feature: r.feature.clone(),
            layer: r.layer,
            seed: r.seed,
            test_auc: r.test_auc,
            selected_c: r.selected_c,
            n_features: r.n_features,
            n_train: r.n_train,
            n_test: r.n_test,
            excluded_missing: r.excluded_missing,
            excluded_unknown: r.excluded_unknown,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub feature: String,
    pub layer: usize,
    pub seed: u64,
    pub c: f64,
    pub cv_auc: f64,
    pub selected: bool,
}

/// One row per (model, grid value) of the cross-validation curve.
pub fn cv_rows(rows: &[PredictorRow], c_grid: &[f64]) -> Vec<CvRow> {
    rows.iter()
        .flat_map(|r| {
            c_grid.iter().zip(&r.cv_auc).map(move |(&c, &a)| CvRow {
                feature: r.feature.clone(),
                layer: r.layer,
                seed: r.seed,
                c,
                cv_auc: a,
                selected: c == r.selected_c,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub example_id: String,
    pub boundary: String,
    pub correctness: String,
    pub x: f64,
    pub y: f64,
}

pub fn point_rows(points: &[ProjectedPoint]) -> Vec<PointRow> {
    points
        .iter()
        .map(|p| PointRow {
            example_id: p.example_id.clone(),
            boundary: p.boundary.clone(),
            correctness: format!("{:?}", p.correctness).to_ascii_lowercase(),
            x: p.x,
            y: p.y,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCsvRow {
    pub arm: String,
    pub n_total: usize,
    pub n_flagged: usize,
    pub accuracy_baseline: f64,
    pub accuracy_policy: f64,
    pub accuracy_delta: f64,
    pub corrected: usize,
    pub reverted: usize,
    pub preservation_rate: f64,
    pub preservation_rate_flagged: Option<f64>,
}

pub fn outcome_row(arm: &str, o: &PolicyOutcome) -> OutcomeCsvRow {
    OutcomeCsvRow {
        arm: arm.to_owned(),
        n_total: o.n_total,
        n_flagged: o.n_flagged,
        accuracy_baseline: o.accuracy_baseline,
        accuracy_policy: o.accuracy_policy,
        accuracy_delta: o.accuracy_delta(),
        corrected: o.corrected,
        reverted: o.reverted,
        preservation_rate: o.preservation_rate,
        preservation_rate_flagged: o.preservation_rate_flagged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{build_world, generate_corpus_in, HarnessConfig};
    use crate::probes::{sweep, ProbeSpec, ProbeTarget};
    use crate::steering::LengthRow;

    #[test]
    fn probe_grid_has_one_row_per_cell() {
        let cfg = HarnessConfig::default();
        let w = build_world(&cfg).unwrap();
        let traces = generate_corpus_in(&w, &cfg, 200, 1).1;
        let targets = [ProbeTarget::Step(1), ProbeTarget::Term];
        let rep = sweep(
            &traces,
            &targets,
            &[0, 7],
            &ProbeSpec::new(ProbeTarget::Term, 0),
        )
        .unwrap();
        let rows = probe_rows(&rep);
        assert_eq!(rows.len(), 4);
        let text = String::from_utf8(csv_bytes(&rows).unwrap()).unwrap();
        assert!(text.starts_with("target,layer,accuracy,n_pos,n_neg,converged,note\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn csv_is_deterministic() {
        let rows = vec![LengthRow {
            alpha: -0.2,
            n_episodes: 3,
            mean_steps: 4.0 / 3.0,
            accuracy: 1.0,
            loop_ratio: 0.0,
            step_cap_ratio: 0.0,
        }];
        assert_eq!(csv_bytes(&rows).unwrap(), csv_bytes(&rows).unwrap());
        let text = String::from_utf8(csv_bytes(&rows).unwrap()).unwrap();
        assert!(text.contains("1.3333333333333333"));
    }
}
