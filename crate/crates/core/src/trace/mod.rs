//! Step-boundary activation traces.
//!
//! A trace holds, for every example, the hidden-state snapshots taken at the
//! token immediately preceding each `Step k` marker and the final answer
//! marker. Snapshots are stored per layer as `f32` rows; analyses accumulate
//! in `f64`.

pub(crate) mod format;
mod split;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{
    decode_traces, encode_traces, encode_traces_unchecked, read_traces, write_traces,
    FORMAT_VERSION, MAGIC,
};
pub(crate) use split::stratified_folds;
pub use split::{split, stratified_partition, Split, SplitSpec, Stratify};

/// File-level metadata, stored as JSON in the trace header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub format_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    /// Number of layer snapshots per boundary (e.g. embedding + 32 blocks).
    pub n_layers: usize,
    pub dim: usize,
    pub boundary_kinds: Vec<String>,
}

impl TraceMeta {
    pub fn new(model_id: &str, dataset_id: &str, n_layers: usize, dim: usize) -> Self {
        TraceMeta {
            format_version: FORMAT_VERSION,
            model_id: model_id.to_owned(),
            dataset_id: dataset_id.to_owned(),
            n_layers,
            dim,
            boundary_kinds: vec!["step".to_owned(), "term".to_owned()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidMeta("n_layers must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidMeta("dim must be at least 1".into()));
        }
        if self.boundary_kinds.is_empty() {
            return Err(Error::InvalidMeta("boundary_kinds is empty".into()));
        }
        if self.boundary_kinds.iter().filter(|k| *k == "term").count() > 1 {
            return Err(Error::InvalidMeta(
                "boundary kind `term` listed more than once".into(),
            ));
        }
        Ok(())
    }

    fn allows(&self, kind: BoundaryKind) -> bool {
        self.boundary_kinds.iter().any(|k| k == kind.as_str())
    }
}

/// Final-answer correctness label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correctness {
    Incorrect,
    Correct,
    Unknown,
}

impl Correctness {
    pub fn code(self) -> u8 {
        match self {
            Correctness::Incorrect => 0,
            Correctness::Correct => 1,
            Correctness::Unknown => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Correctness::Incorrect),
            1 => Some(Correctness::Correct),
            2 => Some(Correctness::Unknown),
            _ => None,
        }
    }

    /// `Some(true)` for correct, `Some(false)` for incorrect, `None` if unknown.
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Correctness::Correct => Some(true),
            Correctness::Incorrect => Some(false),
            Correctness::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Step,
    Term,
}

impl BoundaryKind {
    pub fn code(self) -> u8 {
        match self {
            BoundaryKind::Step => 0,
            BoundaryKind::Term => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BoundaryKind::Step),
            1 => Some(BoundaryKind::Term),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryKind::Step => "step",
            BoundaryKind::Term => "term",
        }
    }
}

/// Activations captured at one boundary: `[n_layers × dim]`, layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRecord {
    pub kind: BoundaryKind,
    /// 1-based for steps, 0 for the term boundary.
    pub step_index: u32,
    pub activations: Array2<f32>,
    /// Optional per-boundary scalars (logit-lens entropy, answer rank, ...).
    pub aux: BTreeMap<String, f64>,
}

impl BoundaryRecord {
    pub fn step(step_index: u32, activations: Array2<f32>) -> Self {
        BoundaryRecord {
            kind: BoundaryKind::Step,
            step_index,
            activations,
            aux: BTreeMap::new(),
        }
    }

    pub fn term(activations: Array2<f32>) -> Self {
        BoundaryRecord {
            kind: BoundaryKind::Term,
            step_index: 0,
            activations,
            aux: BTreeMap::new(),
        }
    }

    pub fn layer(&self, layer: usize) -> ArrayView1<'_, f32> {
        self.activations.row(layer)
    }

    /// Layer activations widened to `f64`.
    pub fn layer_f64(&self, layer: usize) -> Vec<f64> {
        self.activations
            .row(layer)
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    fn label(&self) -> String {
        match self.kind {
            BoundaryKind::Step => format!("boundary[step {}]", self.step_index),
            BoundaryKind::Term => "boundary[term]".to_owned(),
        }
    }
}

/// Which boundary of an example an analysis refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Absolute step index (1-based).
    Step(u32),
    /// Step K.
    Last,
    /// Step K−1.
    SecondLast,
    Term,
}

impl Selector {
    pub fn label(&self) -> String {
        match self {
            Selector::Step(k) => format!("step{k}"),
            Selector::Last => "last".into(),
            Selector::SecondLast => "second_last".into(),
            Selector::Term => "term".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "last" => Some(Selector::Last),
            "second_last" | "second-last" => Some(Selector::SecondLast),
            "term" => Some(Selector::Term),
            _ => s
                .strip_prefix("step")
                .and_then(|k| k.trim_start_matches(['_', '-']).parse().ok())
                .filter(|&k: &u32| k >= 1)
                .map(Selector::Step),
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// One reasoning example: its step boundaries in emission order, optionally
/// followed by the term boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceExample {
    pub example_id: String,
    pub step_count: u32,
    pub correctness: Correctness,
    pub boundaries: Vec<BoundaryRecord>,
}

impl TraceExample {
    /// Resolve a selector; `None` when the example lacks that boundary.
    pub fn select(&self, selector: Selector) -> Option<&BoundaryRecord> {
        let step = |k: u32| {
            self.boundaries
                .iter()
                .find(|b| b.kind == BoundaryKind::Step && b.step_index == k)
        };
        match selector {
            Selector::Step(k) => step(k),
            Selector::Last => step(self.step_count),
            Selector::SecondLast => {
                if self.step_count < 2 {
                    None
                } else {
                    step(self.step_count - 1)
                }
            }
            Selector::Term => self.term(),
        }
    }

    pub fn term(&self) -> Option<&BoundaryRecord> {
        self.boundaries
            .last()
            .filter(|b| b.kind == BoundaryKind::Term)
    }

    pub fn steps(&self) -> impl Iterator<Item = &BoundaryRecord> {
        self.boundaries
            .iter()
            .filter(|b| b.kind == BoundaryKind::Step)
    }

    /// Check every structural invariant against the file metadata.
    pub fn validate(&self, meta: &TraceMeta) -> Result<()> {
        let id = self.example_id.as_str();
        if id.len() > u16::MAX as usize {
            return Err(Error::invalid_example(
                id,
                "example_id",
                "longer than 65535 bytes",
            ));
        }
        if self.step_count == 0 {
            return Err(Error::invalid_example(
                id,
                "step_count",
                "must be at least 1",
            ));
        }
        let n = self.boundaries.len();
        let mut expected_step = 1u32;
        for (i, b) in self.boundaries.iter().enumerate() {
            if !meta.allows(b.kind) {
                return Err(Error::invalid_example(
                    id,
                    b.label(),
                    format!(
                        "boundary kind `{}` not declared in metadata",
                        b.kind.as_str()
                    ),
                ));
            }
            match b.kind {
                BoundaryKind::Term => {
                    if i + 1 != n {
                        return Err(Error::invalid_example(
                            id,
                            b.label(),
                            "term boundary must be the last boundary",
                        ));
                    }
                    if b.step_index != 0 {
                        return Err(Error::invalid_example(
                            id,
                            b.label(),
                            format!("term boundary carries step index {}", b.step_index),
                        ));
                    }
                }
                BoundaryKind::Step => {
                    if b.step_index != expected_step {
                        return Err(Error::invalid_example(
                            id,
                            b.label(),
                            format!(
                                "non-contiguous step indices: expected step {expected_step}, found {}",
                                b.step_index
                            ),
                        ));
                    }
                    expected_step += 1;
                }
            }
            if b.activations.dim() != (meta.n_layers, meta.dim) {
                return Err(Error::invalid_example(
                    id,
                    b.label(),
                    format!(
                        "activations shape {:?}, metadata declares ({}, {})",
                        b.activations.dim(),
                        meta.n_layers,
                        meta.dim
                    ),
                ));
            }
            if let Some(pos) = b.activations.iter().position(|v| !v.is_finite()) {
                return Err(Error::invalid_example(
                    id,
                    b.label(),
                    format!(
                        "non-finite activation at layer {}, unit {}",
                        pos / meta.dim,
                        pos % meta.dim
                    ),
                ));
            }
            if let Some((k, _)) = b.aux.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::invalid_example(
                    id,
                    b.label(),
                    format!("non-finite aux feature `{k}`"),
                ));
            }
        }
        let n_steps = expected_step - 1;
        if n_steps != self.step_count {
            return Err(Error::invalid_example(
                id,
                "step_count",
                format!(
                    "declares K={} but holds {n_steps} step boundaries",
                    self.step_count
                ),
            ));
        }
        Ok(())
    }
}

/// Validate a whole trace set against its metadata.
pub fn validate_all(meta: &TraceMeta, examples: &[TraceExample]) -> Result<()> {
    meta.validate()?;
    examples.iter().try_for_each(|ex| ex.validate(meta))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_example(id: &str, k: u32, n_layers: usize, dim: usize) -> TraceExample {
        let mut boundaries: Vec<BoundaryRecord> = (1..=k)
            .map(|s| {
                BoundaryRecord::step(
                    s,
                    Array2::from_shape_fn((n_layers, dim), |(l, j)| {
                        (s as f32) + 0.1 * l as f32 - 0.01 * j as f32
                    }),
                )
            })
            .collect();
        boundaries.push(BoundaryRecord::term(Array2::from_elem(
            (n_layers, dim),
            -1.5,
        )));
        TraceExample {
            example_id: id.to_owned(),
            step_count: k,
            correctness: Correctness::Correct,
            boundaries,
        }
    }

    #[test]
    fn selectors_resolve_relative_steps() {
        let ex = tiny_example("a", 4, 2, 3);
        assert_eq!(ex.select(Selector::SecondLast).unwrap().step_index, 3);
        assert_eq!(ex.select(Selector::Last).unwrap().step_index, 4);
        assert_eq!(ex.select(Selector::Step(2)).unwrap().step_index, 2);
        assert!(ex.select(Selector::Step(5)).is_none());

        let one = tiny_example("b", 1, 2, 3);
        assert!(one.select(Selector::SecondLast).is_none());

        let seven = tiny_example("c", 7, 2, 3);
        assert_eq!(
            seven.select(Selector::Term).unwrap().kind,
            BoundaryKind::Term
        );
    }

    #[test]
    fn selector_parse() {
        assert_eq!(Selector::parse("step3"), Some(Selector::Step(3)));
        assert_eq!(Selector::parse("Step_1"), Some(Selector::Step(1)));
        assert_eq!(Selector::parse("second_last"), Some(Selector::SecondLast));
        assert_eq!(Selector::parse("step0"), None);
        assert_eq!(Selector::parse("nope"), None);
    }

    #[test]
    fn validation_reports_non_contiguous_steps() {
        let meta = TraceMeta::new("m", "d", 2, 3);
        let mut ex = tiny_example("gap", 3, 2, 3);
        ex.boundaries.remove(1);
        ex.step_count = 2;
        let err = ex.validate(&meta).unwrap_err().to_string();
        assert!(err.contains("non-contiguous step indices"), "{err}");
        assert!(err.contains("gap"));
    }

    #[test]
    fn validation_names_nan_boundary() {
        let meta = TraceMeta::new("m", "d", 2, 3);
        let mut ex = tiny_example("nan", 2, 2, 3);
        ex.boundaries[1].activations[[1, 2]] = f32::NAN;
        let err = ex.validate(&meta).unwrap_err().to_string();
        assert!(err.contains("boundary[step 2]"), "{err}");
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn term_must_be_last() {
        let meta = TraceMeta::new("m", "d", 2, 3);
        let mut ex = tiny_example("t", 2, 2, 3);
        let term = ex.boundaries.pop().unwrap();
        ex.boundaries.insert(0, term);
        assert!(ex.validate(&meta).is_err());
    }

    #[test]
    fn meta_rejects_duplicate_term_kind() {
        let mut meta = TraceMeta::new("m", "d", 2, 3);
        meta.boundary_kinds.push("term".into());
        assert!(meta.validate().is_err());
        meta.boundary_kinds.clear();
        assert!(meta.validate().is_err());
    }
}
