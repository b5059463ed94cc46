//! Step-identity probes: one-vs-rest linear classifiers per boundary type
//! and layer, layer sweeps, cross-corpus transfer and shuffled-label controls.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{fit_logistic, mean, std_dev, ClassWeighting, LogisticConfig, LogisticModel};
use crate::trace::{stratified_partition, BoundaryKind, BoundaryRecord, TraceExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Step(u32),
    Term,
}

impl ProbeTarget {
    pub fn label(&self) -> String {
        match self {
            ProbeTarget::Step(k) => format!("step{k}"),
            ProbeTarget::Term => "term".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "term" {
            return Some(ProbeTarget::Term);
        }
        s.strip_prefix("step")
            .and_then(|k| k.trim_start_matches(['_', '-']).parse().ok())
            .filter(|&k: &u32| k >= 1)
            .map(ProbeTarget::Step)
    }

    pub fn matches(&self, b: &BoundaryRecord) -> bool {
        match self {
            ProbeTarget::Step(k) => b.kind == BoundaryKind::Step && b.step_index == *k,
            ProbeTarget::Term => b.kind == BoundaryKind::Term,
        }
    }
}

impl std::fmt::Display for ProbeTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePool {
    /// Every non-target boundary, including the term boundary.
    All,
    /// Only step boundaries with a different index.
    StepsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub target: ProbeTarget,
    pub layer: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub fit: LogisticConfig,
    pub negatives: NegativePool,
    /// Down-sample the majority class to the minority size before splitting.
    pub balance_classes: bool,
}

impl ProbeSpec {
    pub fn new(target: ProbeTarget, layer: usize) -> Self {
        ProbeSpec {
            target,
            layer,
            seed: 42,
            test_fraction: 0.2,
            fit: LogisticConfig {
                c: 1.0,
                class_weighting: ClassWeighting::Balanced,
                max_iter: 2000,
                tol: 1e-6,
            },
            negatives: NegativePool::All,
            balance_classes: false,
        }
    }

    pub fn at_layer(&self, layer: usize) -> Self {
        ProbeSpec {
            layer,
            ..self.clone()
        }
    }

    pub fn for_target(&self, target: ProbeTarget) -> Self {
        ProbeSpec {
            target,
            ..self.clone()
        }
    }
}

pub const MIN_CLASS_INSTANCES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub model: LogisticModel,
    pub test_accuracy: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_train: usize,
    pub n_test: usize,
}

/// All boundary instances of a corpus at one layer.
#[derive(Debug, Clone)]
pub struct LayerInstances {
    pub layer: usize,
    pub x: Array2<f64>,
    pub kinds: Vec<(BoundaryKind, u32)>,
}

impl LayerInstances {
    pub fn collect(traces: &[TraceExample], layer: usize) -> Result<Self> {
        let n: usize = traces.iter().map(|t| t.boundaries.len()).sum();
        let first = traces
            .iter()
            .flat_map(|t| t.boundaries.first())
            .next()
            .ok_or_else(|| Error::Insufficient("corpus holds no boundaries".into()))?;
        let (n_layers, dim) = first.activations.dim();
        if layer >= n_layers {
            return Err(Error::InvalidInput(format!(
                "layer {layer} out of range for {n_layers} stored layers"
            )));
        }
        let mut x = Array2::<f64>::zeros((n, dim));
        let mut kinds = Vec::with_capacity(n);
        let mut i = 0;
        for t in traces {
            for b in &t.boundaries {
                if b.activations.dim() != (n_layers, dim) {
                    return Err(Error::DimensionMismatch(format!(
                        "example `{}` has activations {:?}, expected ({n_layers}, {dim})",
                        t.example_id,
                        b.activations.dim()
                    )));
                }
                x.row_mut(i).assign(&b.layer(layer).mapv(f64::from));
                kinds.push((b.kind, b.step_index));
                i += 1;
            }
        }
        Ok(LayerInstances { layer, x, kinds })
    }

    fn record_matches(target: ProbeTarget, kind: (BoundaryKind, u32)) -> bool {
        match target {
            ProbeTarget::Step(k) => kind == (BoundaryKind::Step, k),
            ProbeTarget::Term => kind.0 == BoundaryKind::Term,
        }
    }

    /// Row indices and labels for one target under a negative pool.
    pub fn labelled(
        &self,
        target: ProbeTarget,
        negatives: NegativePool,
    ) -> (Vec<usize>, Vec<bool>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, &kind) in self.kinds.iter().enumerate() {
            let pos = Self::record_matches(target, kind);
            if !pos && negatives == NegativePool::StepsOnly && kind.0 == BoundaryKind::Term {
                continue;
            }
            rows.push(i);
            labels.push(pos);
        }
        (rows, labels)
    }
}

fn counts(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l).count();
    (p, labels.len() - p)
}

fn require_counts(target: ProbeTarget, layer: usize, n_pos: usize, n_neg: usize) -> Result<()> {
    if n_pos < MIN_CLASS_INSTANCES || n_neg < MIN_CLASS_INSTANCES {
        return Err(Error::Insufficient(format!(
            "probe {target} at layer {layer}: {n_pos} positive and {n_neg} negative instances \
             (need at least {MIN_CLASS_INSTANCES} of each)"
        )));
    }
    Ok(())
}

/// Seeded down-sampling of the majority class.
fn balance(rows: &mut Vec<usize>, labels: &mut Vec<bool>, rng: &mut ChaCha8Rng) {
    let (n_pos, n_neg) = counts(labels);
    let keep = n_pos.min(n_neg);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut chosen: Vec<usize> = pos[..keep].iter().chain(&neg[..keep]).copied().collect();
    chosen.sort_unstable();
    *labels = chosen.iter().map(|&i| labels[i]).collect();
    *rows = chosen.iter().map(|&i| rows[i]).collect();
}

fn gather(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (o, &r) in rows.iter().enumerate() {
        out.row_mut(o).assign(&x.row(r));
    }
    out
}

fn fit_on(
    inst: &LayerInstances,
    spec: &ProbeSpec,
    mut rows: Vec<usize>,
    mut labels: Vec<bool>,
    permute: Option<&mut ChaCha8Rng>,
) -> Result<ProbeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.balance_classes {
        balance(&mut rows, &mut labels, &mut rng);
    }
    if let Some(prng) = permute {
        labels.shuffle(prng);
    }
    let (n_pos, n_neg) = counts(&labels);
    require_counts(spec.target, spec.layer, n_pos, n_neg)?;
    let parts = stratified_partition(
        &labels,
        &[1.0 - spec.test_fraction, spec.test_fraction],
        spec.seed,
    )?;
    let (train, test) = (&parts[0], &parts[1]);
    let pick = |idx: &[usize]| {
        let r: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
        let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        (gather(&inst.x, &r), y)
    };
    let (xtr, ytr) = pick(train);
    let (xte, yte) = pick(test);
    let model = fit_logistic(xtr.view(), &ytr, &spec.fit)?;
    let test_accuracy = model.accuracy(xte.view(), &yte)?;
    Ok(ProbeResult {
        model,
        test_accuracy,
        n_pos,
        n_neg,
        n_train: ytr.len(),
        n_test: yte.len(),
    })
}

fn check_spec(spec: &ProbeSpec) -> Result<()> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::config(
            "probe.test_fraction",
            format!("must lie in (0, 1), got {}", spec.test_fraction),
        ));
    }
    Ok(())
}

/// Probe on pre-collected instances.
pub fn train_probe_on(inst: &LayerInstances, spec: &ProbeSpec) -> Result<ProbeResult> {
    check_spec(spec)?;
    let (rows, labels) = inst.labelled(spec.target, spec.negatives);
    fit_on(inst, spec, rows, labels, None)
}

pub fn train_probe(traces: &[TraceExample], spec: &ProbeSpec) -> Result<ProbeResult> {
    let inst = LayerInstances::collect(traces, spec.layer)?;
    train_probe_on(&inst, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub accuracy: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSweepReport {
    pub targets: Vec<ProbeTarget>,
    pub layers: Vec<usize>,
    /// `cells[t][l]`; `None` where the probe could not be trained.
    pub cells: Vec<Vec<Option<ProbeCell>>>,
    /// Reason for each absent cell, keyed as `(target index, layer index)`.
    pub failures: Vec<(usize, usize, String)>,
    pub best_layer: Vec<Option<usize>>,
}

impl ProbeSweepReport {
    pub fn accuracy(&self, target: ProbeTarget, layer: usize) -> Option<f64> {
        let t = self.targets.iter().position(|&x| x == target)?;
        let l = self.layers.iter().position(|&x| x == layer)?;
        self.cells[t][l].as_ref().map(|c| c.accuracy)
    }

    /// Accuracy row for one target across the swept layers.
    pub fn row(&self, target: ProbeTarget) -> Vec<Option<f64>> {
        match self.targets.iter().position(|&x| x == target) {
            Some(t) => self.cells[t]
                .iter()
                .map(|c| c.as_ref().map(|c| c.accuracy))
                .collect(),
            None => vec![None; self.layers.len()],
        }
    }
}

pub fn sweep(
    traces: &[TraceExample],
    targets: &[ProbeTarget],
    layers: &[usize],
    base: &ProbeSpec,
) -> Result<ProbeSweepReport> {
    check_spec(base)?;
    let per_layer: Vec<Vec<Result<ProbeResult>>> = layers
        .par_iter()
        .map(|&layer| {
            let inst = LayerInstances::collect(traces, layer)?;
            Ok(targets
                .par_iter()
                .map(|&t| train_probe_on(&inst, &base.for_target(t).at_layer(layer)))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = vec![vec![None; layers.len()]; targets.len()];
    let mut failures = Vec::new();
    for (li, col) in per_layer.into_iter().enumerate() {
        for (ti, res) in col.into_iter().enumerate() {
            match res {
                Ok(r) => {
                    cells[ti][li] = Some(ProbeCell {
                        accuracy: r.test_accuracy,
                        n_pos: r.n_pos,
                        n_neg: r.n_neg,
                        converged: r.model.converged,
                        iterations: r.model.iterations,
                    })
                }
                Err(e) => failures.push((ti, li, e.to_string())),
            }
        }
    }
    let best_layer = cells
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (li, c) in row.iter().enumerate() {
                if let Some(c) = c {
                    if best.is_none_or(|(_, a)| c.accuracy > a) {
                        best = Some((li, c.accuracy));
                    }
                }
            }
            best.map(|(li, _)| layers[li])
        })
        .collect();
    Ok(ProbeSweepReport {
        targets: targets.to_vec(),
        layers: layers.to_vec(),
        cells,
        failures,
        best_layer,
    })
}

/// Accuracy of a frozen probe on every boundary instance of another corpus.
pub fn transfer(probe: &LogisticModel, spec: &ProbeSpec, other: &[TraceExample]) -> Result<f64> {
    let inst = LayerInstances::collect(other, spec.layer)?;
    if inst.x.ncols() != probe.dim() {
        return Err(Error::DimensionMismatch(format!(
            "probe expects dim {}, target corpus has dim {}",
            probe.dim(),
            inst.x.ncols()
        )));
    }
    let (rows, labels) = inst.labelled(spec.target, spec.negatives);
    if rows.is_empty() {
        return Err(Error::Insufficient("target corpus has no instances".into()));
    }
    let x = gather(&inst.x, &rows);
    probe.accuracy(x.view(), &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleSummary {
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Train on uniformly permuted labels `n_repeats` times.
pub fn shuffled_control(
    traces: &[TraceExample],
    spec: &ProbeSpec,
    n_repeats: usize,
    seed: u64,
) -> Result<ShuffleSummary> {
    check_spec(spec)?;
    if n_repeats == 0 {
        return Err(Error::InvalidInput("n_repeats must be positive".into()));
    }
    let inst = LayerInstances::collect(traces, spec.layer)?;
    let (rows, labels) = inst.labelled(spec.target, spec.negatives);
    let (n_pos, n_neg) = counts(&labels);
    require_counts(spec.target, spec.layer, n_pos, n_neg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accuracies = Vec::with_capacity(n_repeats);
    for _ in 0..n_repeats {
        let r = fit_on(&inst, spec, rows.clone(), labels.clone(), Some(&mut rng))?;
        accuracies.push(r.test_accuracy);
    }
    Ok(ShuffleSummary {
        mean: mean(&accuracies),
        std: std_dev(&accuracies),
        accuracies,
    })
}

/// Per-instance step label from a bank of one-vs-rest probes.
pub fn predict_target(
    probes: &[(ProbeTarget, LogisticModel)],
    x: ArrayView1<'_, f64>,
) -> Option<ProbeTarget> {
    probes
        .iter()
        .map(|(t, m)| (*t, m.decision(x)))
        .fold(
            None,
            |best: Option<(ProbeTarget, f64)>, (t, z)| match best {
                Some((_, bz)) if bz >= z => best,
                _ => Some((t, z)),
            },
        )
        .map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{build_world, generate_corpus_in, HarnessConfig};
    use proptest::prelude::*;

    fn small_corpus(cfg: &HarnessConfig, n: usize, seed: u64) -> Vec<TraceExample> {
        let world = build_world(cfg).unwrap();
        generate_corpus_in(&world, cfg, n, seed).1
    }

    #[test]
    fn parse_targets() {
        assert_eq!(ProbeTarget::parse("step3"), Some(ProbeTarget::Step(3)));
        assert_eq!(ProbeTarget::parse("term"), Some(ProbeTarget::Term));
        assert_eq!(ProbeTarget::parse("x"), None);
    }

    #[test]
    fn term_probe_at_top_layer() {
        let cfg = HarnessConfig::default();
        let traces = small_corpus(&cfg, 400, 1);
        let r = train_probe(
            &traces,
            &ProbeSpec::new(ProbeTarget::Term, cfg.n_layers - 1),
        )
        .unwrap();
        assert!(r.test_accuracy >= 0.95, "{}", r.test_accuracy);
        assert_eq!(r.n_pos, 400);
    }

    #[test]
    fn single_layer_sweep_matches_train_probe() {
        let cfg = HarnessConfig::default();
        let traces = small_corpus(&cfg, 200, 2);
        let spec = ProbeSpec::new(ProbeTarget::Step(2), 3);
        let direct = train_probe(&traces, &spec).unwrap();
        let rep = sweep(&traces, &[ProbeTarget::Step(2)], &[3], &spec).unwrap();
        assert_eq!(
            rep.accuracy(ProbeTarget::Step(2), 3),
            Some(direct.test_accuracy)
        );
        assert_eq!(rep.best_layer, vec![Some(3)]);
    }

    #[test]
    fn insufficient_instances_report_counts() {
        let cfg = HarnessConfig::default();
        let traces = small_corpus(&cfg, 30, 3);
        let err = train_probe(&traces, &ProbeSpec::new(ProbeTarget::Step(8), 7))
            .unwrap_err()
            .to_string();
        assert!(err.contains("positive"), "{err}");
    }

    #[test]
    fn sweep_marks_failed_cells_absent() {
        let cfg = HarnessConfig::default();
        let traces = small_corpus(&cfg, 30, 3);
        let rep = sweep(
            &traces,
            &[ProbeTarget::Step(1), ProbeTarget::Step(8)],
            &[7],
            &ProbeSpec::new(ProbeTarget::Term, 0),
        )
        .unwrap();
        assert!(rep.cells[0][0].is_some());
        assert!(rep.cells[1][0].is_none());
        assert_eq!(rep.failures.len(), 1);
    }

    #[test]
    fn self_transfer_is_close_to_in_corpus() {
        let cfg = HarnessConfig::default();
        let traces = small_corpus(&cfg, 300, 4);
        let spec = ProbeSpec::new(ProbeTarget::Step(3), 5);
        let r = train_probe(&traces, &spec).unwrap();
        let t = transfer(&r.model, &spec, &traces).unwrap();
        assert!(
            (t - r.test_accuracy).abs() <= 0.02,
            "{t} vs {}",
            r.test_accuracy
        );
    }

    #[test]
    fn shuffled_control_is_reproducible() {
        let cfg = HarnessConfig::default();
        let traces = small_corpus(&cfg, 100, 5);
        let spec = ProbeSpec {
            balance_classes: true,
            ..ProbeSpec::new(ProbeTarget::Step(1), 7)
        };
        let a = shuffled_control(&traces, &spec, 1, 9).unwrap();
        let b = shuffled_control(&traces, &spec, 1, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn steps_only_pool_drops_term() {
        let cfg = HarnessConfig::default();
        let traces = small_corpus(&cfg, 50, 6);
        let inst = LayerInstances::collect(&traces, 0).unwrap();
        let (all, _) = inst.labelled(ProbeTarget::Step(1), NegativePool::All);
        let (steps, _) = inst.labelled(ProbeTarget::Step(1), NegativePool::StepsOnly);
        assert_eq!(all.len() - steps.len(), 50);
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_positive_rescaling(
            seed in any::<u64>(),
            scales in proptest::collection::vec(0.01f64..100.0, 3),
            x in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank: Vec<(ProbeTarget, LogisticModel)> = (1..=3)
                .map(|k| {
                    (ProbeTarget::Step(k), LogisticModel {
                        weights: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        bias: rng.random_range(-1.0..1.0),
                        reg_strength: 1.0,
                        class_weighting: ClassWeighting::Balanced,
                        converged: true,
                        iterations: 1,
                    })
                })
                .collect();
            let x = ndarray::Array1::from(x);
            let scaled: Vec<(ProbeTarget, LogisticModel)> = bank
                .iter()
                .zip(&scales)
                .map(|((t, m), s)| {
                    let mut m = m.clone();
                    m.weights.iter_mut().for_each(|w| *w *= s);
                    m.bias *= s;
                    (*t, m)
                })
                .collect();
            // Rescaling each probe separately can change which score is largest only
            // through magnitudes; rescaling all by one factor must not.
            let common: Vec<(ProbeTarget, LogisticModel)> = bank
                .iter()
                .map(|(t, m)| {
                    let mut m = m.clone();
                    m.weights.iter_mut().for_each(|w| *w *= scales[0]);
                    m.bias *= scales[0];
                    (*t, m)
                })
                .collect();
            prop_assert_eq!(predict_target(&bank, x.view()), predict_target(&common, x.view()));
            for ((_, a), (_, b)) in bank.iter().zip(&scaled) {
                prop_assert_eq!(a.decision(x.view()) > 0.0, b.decision(x.view()) > 0.0);
            }
        }
    }
}
