//! Synthetic reasoning process with a closed intervention loop.
//!
//! This is an explicit generative model, not a claim about language models.
//! Step centroids live in a low-dimensional subspace; states mix a shared
//! early-layer component into the step centroid with depth (`γ_ℓ`); runs
//! drawn as incorrect accumulate a latent error over their late steps; and
//! a run stops once its termination score clears the threshold. Policies
//! edit the state at each boundary before the score is computed.

mod config;
mod episode;
mod world;

pub use config::HarnessConfig;
pub use episode::{
    corpus_meta, episode_rng, example_id, generate_corpus, generate_corpus_in, generate_episodes,
    run_episode, run_indexed, BoundaryView, Episode, Intervention, InterventionKind,
    InterventionRecord, SteeringPolicy, Termination,
};
pub use world::{build_world, HarnessWorld};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{decode_traces, encode_traces, Correctness, Selector};
    use ndarray::Array2;

    struct PullToTerm(f64);

    impl SteeringPolicy for PullToTerm {
        fn on_boundary(
            &mut self,
            view: &BoundaryView<'_>,
            state: &mut Array2<f64>,
        ) -> Option<Intervention> {
            let top = state.nrows() - 1;
            let delta = (&view.world.term_centroid - &state.row(top)) * self.0;
            let magnitude = delta.dot(&delta).sqrt();
            state.row_mut(top).scaled_add(1.0, &delta);
            Some(Intervention {
                kind: InterventionKind::Additive,
                magnitude,
                persistent: false,
            })
        }
    }

    /// Scribbles on the state but reports no intervention.
    struct Silent;

    impl SteeringPolicy for Silent {
        fn on_boundary(
            &mut self,
            _: &BoundaryView<'_>,
            state: &mut Array2<f64>,
        ) -> Option<Intervention> {
            state.fill(3.0);
            None
        }
    }

    struct AddTerm(f64);

    impl SteeringPolicy for AddTerm {
        fn on_boundary(
            &mut self,
            view: &BoundaryView<'_>,
            state: &mut Array2<f64>,
        ) -> Option<Intervention> {
            let top = state.nrows() - 1;
            state
                .row_mut(top)
                .scaled_add(self.0, &view.world.term_centroid);
            Some(Intervention {
                kind: InterventionKind::Additive,
                magnitude: self.0.abs(),
                persistent: false,
            })
        }
    }

    #[test]
    fn noiseless_limit_lands_on_centroids() {
        let cfg = HarnessConfig {
            incorrect_fraction: 0.0,
            noise_scale: 0.0,
            ..Default::default()
        };
        let world = build_world(&cfg).unwrap();
        for ep in generate_episodes(&world, &cfg, 50, 3) {
            assert_eq!(ep.trace.correctness, Correctness::Correct);
            assert_eq!(ep.step_count(), ep.target_steps);
            for b in ep.trace.steps() {
                let expect = world.centroid(b.step_index);
                for (a, e) in b.layer(cfg.n_layers - 1).iter().zip(expect.iter()) {
                    assert_eq!(*a, *e as f32);
                }
            }
        }
    }

    #[test]
    fn pulling_toward_term_shortens_runs() {
        let cfg = HarnessConfig::default();
        let world = build_world(&cfg).unwrap();
        let (mut base, mut steered) = (0u64, 0u64);
        for i in 0..500 {
            base += run_indexed(&world, &cfg, None, 11, i).step_count() as u64;
            steered +=
                run_indexed(&world, &cfg, Some(&mut PullToTerm(0.5)), 11, i).step_count() as u64;
        }
        assert!(steered < base, "steered {steered} vs baseline {base}");
    }

    #[test]
    fn silent_policy_reproduces_baseline() {
        let cfg = HarnessConfig::default();
        let world = build_world(&cfg).unwrap();
        for i in 0..40 {
            let a = run_indexed(&world, &cfg, None, 5, i);
            let b = run_indexed(&world, &cfg, Some(&mut Silent), 5, i);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn score_increases_with_term_component() {
        let cfg = HarnessConfig::default();
        let world = build_world(&cfg).unwrap();
        let first = |c: f64| run_indexed(&world, &cfg, Some(&mut AddTerm(c)), 9, 0).term_scores[0];
        let scores: Vec<f64> = [-0.5, -0.1, 0.0, 0.2, 0.7]
            .iter()
            .map(|&c| first(c))
            .collect();
        for w in scores.windows(2) {
            assert!(w[1] > w[0], "{scores:?}");
        }
    }

    #[test]
    fn corpus_matches_configuration() {
        let cfg = HarnessConfig::default();
        let (meta, traces) = generate_corpus(&cfg, 2000).unwrap();
        let incorrect = traces
            .iter()
            .filter(|t| t.correctness == Correctness::Incorrect)
            .count() as f64
            / 2000.0;
        assert!(
            (incorrect - cfg.incorrect_fraction).abs() <= 0.03,
            "{incorrect}"
        );
        let mut tv = 0.0;
        for &(k, p) in &cfg.step_count_distribution {
            let f = traces.iter().filter(|t| t.step_count == k).count() as f64 / 2000.0;
            tv += (f - p).abs();
        }
        let outside = traces
            .iter()
            .filter(|t| {
                !cfg.step_count_distribution
                    .iter()
                    .any(|(k, _)| *k == t.step_count)
            })
            .count() as f64
            / 2000.0;
        tv = 0.5 * (tv + outside);
        assert!(tv <= 0.05, "total variation {tv}");
        let bytes = encode_traces(&meta, &traces).unwrap();
        assert_eq!(decode_traces(&bytes).unwrap().1, traces);
    }

    /// Two-sample Kolmogorov–Smirnov p-value (asymptotic).
    fn ks_p_value(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut dmax) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            dmax = dmax.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        let ne = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
        let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * dmax;
        let mut p = 0.0;
        for k in 1..100 {
            let term =
                2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
            p += term;
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn null_drift_makes_groups_indistinguishable() {
        let cfg = HarnessConfig {
            drift_scale: 0.0,
            ..Default::default()
        };
        let world = build_world(&cfg).unwrap();
        let eps = generate_episodes(&world, &cfg, 1000, 21);
        let top = cfg.n_layers - 1;
        let (mut c, mut inc) = (Vec::new(), Vec::new());
        for e in &eps {
            let (Some(a), Some(b)) = (
                e.trace.select(Selector::Last),
                e.trace.select(Selector::Term),
            ) else {
                continue;
            };
            let d = (&a.layer(top).mapv(f64::from) - &b.layer(top).mapv(f64::from))
                .mapv(|v| v * v)
                .sum()
                .sqrt();
            if e.drawn_incorrect {
                inc.push(d);
            } else {
                c.push(d);
            }
        }
        assert!(ks_p_value(&c, &inc) > 0.01);
    }
}
