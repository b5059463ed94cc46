//! Termination-minus-step directions.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::TraceExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over steps within each example, then over examples.
    #[default]
    PerPrompt,
    /// Mean over every (example, step) pair.
    Pooled,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::PerPrompt => "per_prompt",
            Aggregation::Pooled => "pooled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "per_prompt" => Some(Aggregation::PerPrompt),
            "pooled" => Some(Aggregation::Pooled),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringDirection {
    /// `[n_layers × dim]`, row ℓ is s^(ℓ).
    pub vectors: Array2<f64>,
    pub norms: Vec<f64>,
    pub corpus_id: String,
    /// Examples that contributed.
    pub n_prompts: usize,
    pub aggregation: Aggregation,
}

impl SteeringDirection {
    pub fn from_vectors(
        vectors: Array2<f64>,
        corpus_id: impl Into<String>,
        n_prompts: usize,
        aggregation: Aggregation,
    ) -> Result<Self> {
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("steering direction".into()));
        }
        let norms = vectors
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        Ok(SteeringDirection {
            vectors,
            norms,
            corpus_id: corpus_id.into(),
            n_prompts,
            aggregation,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Average `h_term − h_step_k` per layer. Examples without a term boundary
/// or without any step boundary are skipped.
pub fn build_direction(
    traces: &[TraceExample],
    corpus_id: &str,
    aggregation: Aggregation,
) -> Result<SteeringDirection> {
    let Some(first) = traces.iter().find_map(|t| t.boundaries.first()) else {
        return Err(Error::Insufficient(
            "empty corpus; cannot build a direction".into(),
        ));
    };
    let (l, d) = first.activations.dim();
    let mut total = Array2::<f64>::zeros((l, d));
    let mut n_prompts = 0usize;
    let mut n_pairs = 0usize;
    for t in traces {
        let Some(term) = t.term() else { continue };
        let steps: Vec<_> = t.steps().collect();
        if steps.is_empty() {
            continue;
        }
        let term = term.activations.mapv(f64::from);
        let mut diff = Array2::<f64>::zeros((l, d));
        for s in &steps {
            diff += &(&term - &s.activations.mapv(f64::from));
        }
        match aggregation {
            Aggregation::PerPrompt => total.scaled_add(1.0 / steps.len() as f64, &diff),
            Aggregation::Pooled => total += &diff,
        }
        n_prompts += 1;
        n_pairs += steps.len();
    }
    if n_prompts == 0 {
        return Err(Error::Insufficient(
            "no example has both a term boundary and a step boundary".into(),
        ));
    }
    let denom = match aggregation {
        Aggregation::PerPrompt => n_prompts,
        Aggregation::Pooled => n_pairs,
    };
    total /= denom as f64;
    SteeringDirection::from_vectors(total, corpus_id, n_prompts, aggregation)
}

/// Cosine similarity of two vectors; zero when either is zero.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}
