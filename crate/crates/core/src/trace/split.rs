//! Seeded, stratified train/validation/test partitioning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TraceExample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratify {
    None,
    Correctness,
    StepCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    /// (train, validation, test).
    pub fractions: (f64, f64, f64),
    pub stratify_by: Stratify,
}

impl SplitSpec {
    pub fn new(seed: u64, train: f64, validation: f64, test: f64, stratify_by: Stratify) -> Self {
        SplitSpec {
            seed,
            fractions: (train, validation, test),
            stratify_by,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.fractions;
        for (name, f) in [("train", a), ("validation", b), ("test", c)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(
                    format!("split.{name}"),
                    format!("fraction {f} outside [0, 1]"),
                ));
            }
        }
        if ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "split.fractions",
                format!("fractions sum to {}, expected 1", a + b + c),
            ));
        }
        Ok(())
    }
}

/// Sorted index lists into the input slice.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition examples according to `spec`.
pub fn split(examples: &[TraceExample], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let keys: Vec<u32> = examples
        .iter()
        .map(|e| match spec.stratify_by {
            Stratify::None => 0,
            Stratify::Correctness => e.correctness.code() as u32,
            Stratify::StepCount => e.step_count,
        })
        .collect();
    let (a, b, c) = spec.fractions;
    let mut parts = stratified_partition(&keys, &[a, b, c], spec.seed)?.into_iter();
    Ok(Split {
        train: parts.next().unwrap_or_default(),
        validation: parts.next().unwrap_or_default(),
        test: parts.next().unwrap_or_default(),
    })
}

/// Split indices `0..keys.len()` into `fractions.len()` disjoint, exhaustive,
/// sorted parts, stratified by key. Every part with a positive fraction
/// receives at least one member of each stratum.
pub fn stratified_partition<K: Ord + Clone>(
    keys: &[K],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() {
        return Err(Error::InvalidInput("no partitions requested".into()));
    }
    let requested = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut strata: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        strata.entry(k.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = vec![Vec::new(); fractions.len()];
    for (s, members) in strata.values_mut().enumerate() {
        let n = members.len();
        if n < requested {
            return Err(Error::Insufficient(format!(
                "stratum of size {n} cannot populate {requested} partitions"
            )));
        }
        members.shuffle(&mut rng);
        let counts = allocate(n, fractions, s);
        let mut start = 0;
        for (p, &cnt) in counts.iter().enumerate() {
            parts[p].extend_from_slice(&members[start..start + cnt]);
            start += cnt;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Largest-remainder apportionment of `n` items; ties rotate with `salt`.
fn allocate(n: usize, fractions: &[f64], salt: usize) -> Vec<usize> {
    let total: f64 = fractions.iter().sum();
    let m = fractions.len();
    let quotas: Vec<f64> = fractions.iter().map(|f| n as f64 * f / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(((a + m - salt % m) % m).cmp(&((b + m - salt % m) % m)))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &p in order.iter().cycle().filter(|&&p| fractions[p] > 0.0) {
        if left == 0 {
            break;
        }
        counts[p] += 1;
        left -= 1;
    }
    // Guarantee a member for every requested part by borrowing from the largest.
    for p in 0..m {
        if fractions[p] > 0.0 && counts[p] == 0 {
            let donor = (0..m)
                .max_by_key(|&q| (counts[q], usize::MAX - q))
                .expect("m > 0");
            counts[donor] -= 1;
            counts[p] += 1;
        }
    }
    counts
}

/// Stratified k-fold assignment: returns the held-out index set of each fold.
pub(crate) fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let fractions = vec![1.0 / k as f64; k];
    stratified_partition(labels, &fractions, seed)
}
