//! Cross-module properties checked on harness corpora.

use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajlab::geometry::{divergence_report, divergence_row, TransitionSpec};
use trajlab::harness::{build_world, generate_corpus_in, HarnessConfig};
use trajlab::stats::{fit_pca, Metric};
use trajlab::trace::{Correctness, Selector, TraceExample};

fn corpus(n: usize, seed: u64) -> Vec<TraceExample> {
    let cfg = HarnessConfig::default();
    let world = build_world(&cfg).unwrap();
    generate_corpus_in(&world, &cfg, n, seed).1
}

fn scaled(traces: &[TraceExample], c: f32) -> Vec<TraceExample> {
    let mut out = traces.to_vec();
    for t in &mut out {
        for b in &mut t.boundaries {
            b.activations.mapv_inplace(|v| v * c);
        }
    }
    out
}

fn last_to_term(metric: Metric) -> TransitionSpec {
    TransitionSpec {
        from: Selector::Last,
        to: Selector::Term,
        layer: 7,
        metric,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn euclidean_delta_scales_and_cosine_delta_does_not(c in 0.25f32..8.0) {
        let base = corpus(120, 3);
        let big = scaled(&base, c);
        let e0 = divergence_row(&base, &last_to_term(Metric::Euclidean), 200, 1, "all").unwrap();
        let e1 = divergence_row(&big, &last_to_term(Metric::Euclidean), 200, 1, "all").unwrap();
        prop_assert!((e1.delta_ic - c as f64 * e0.delta_ic).abs() <= 1e-5 * e1.delta_ic.abs().max(1.0));
        let c0 = divergence_row(&base, &last_to_term(Metric::Cosine), 200, 1, "all").unwrap();
        let c1 = divergence_row(&big, &last_to_term(Metric::Cosine), 200, 1, "all").unwrap();
        prop_assert!((c1.delta_ic - c0.delta_ic).abs() <= 1e-5);
    }

    #[test]
    fn training_projection_has_zero_mean(
        n in 5usize..60,
        d in 2usize..20,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rand::Rng::random_range(&mut rng, -3.0..3.0));
        let r = d.min(n - 1).max(1);
        let p = fit_pca(x.view(), r).unwrap();
        let z = p.project_rows(x.view()).unwrap();
        for col in z.columns() {
            prop_assert!(col.mean().unwrap().abs() <= 1e-8);
        }
        for w in p.explained_variance.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }
}

#[test]
fn shuffled_correctness_destroys_significance() {
    let base = corpus(400, 11);
    let labels: Vec<Correctness> = base.iter().map(|t| t.correctness).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let transitions = [(Selector::Last, Selector::Term)];
    let metrics = [Metric::Euclidean, Metric::Cosine];
    let (mut flagged, mut tests) = (0, 0);
    for i in 0..100 {
        let mut perm = labels.clone();
        perm.shuffle(&mut rng);
        let mut traces = base.clone();
        for (t, c) in traces.iter_mut().zip(perm) {
            t.correctness = c;
        }
        let rep =
            divergence_report(&traces, &transitions, &metrics, 7, 1000, i, "shuffled").unwrap();
        for r in &rep.rows {
            tests += 1;
            flagged += r.significant as usize;
        }
    }
    let rate = flagged as f64 / tests as f64;
    assert!(rate <= 0.05, "flag rate {rate}");
}

#[test]
fn default_corpus_has_positive_late_delta() {
    let traces = corpus(600, 2);
    for metric in [Metric::Euclidean, Metric::Cosine] {
        let row = divergence_row(&traces, &last_to_term(metric), 1000, 1, "all").unwrap();
        assert!(
            row.delta_ic > 0.0,
            "{metric:?}: incorrect runs should move farther"
        );
        assert!(row.significant);
    }
}
