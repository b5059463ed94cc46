use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::HarnessConfig;
use crate::error::{Error, Result};

/// Fixed geometry shared by every episode of a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessWorld {
    /// Orthonormal `d × m` basis of the subspace holding all centroids.
    pub basis: Array2<f64>,
    /// Unit-norm step centroids, `max_steps × d`.
    pub step_centroids: Array2<f64>,
    pub term_centroid: Array1<f64>,
    pub shared_early_state: Array1<f64>,
    /// `γ_ℓ = (ℓ / (L − 1))^p`.
    pub gamma: Vec<f64>,
}

/// Largest allowed pairwise cosine between centroids (60° minimum angle).
const MAX_COSINE: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 200_000;

impl HarnessWorld {
    pub fn dim(&self) -> usize {
        self.term_centroid.len()
    }

    pub fn n_layers(&self) -> usize {
        self.gamma.len()
    }

    pub fn manifold_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Centroid used for step `k` (1-based; steps past the last reuse it).
    pub fn centroid(&self, k: u32) -> ndarray::ArrayView1<'_, f64> {
        let idx = (k.max(1) as usize - 1).min(self.step_centroids.nrows() - 1);
        self.step_centroids.row(idx)
    }

    /// Mean of the step centroids.
    pub fn mean_centroid(&self) -> Array1<f64> {
        self.step_centroids
            .mean_axis(ndarray::Axis(0))
            .expect("at least one centroid")
    }
}

pub fn build_world(cfg: &HarnessConfig) -> Result<HarnessWorld> {
    cfg.validate()?;
    let d = cfg.dim;
    let m = cfg.manifold_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut basis = Array2::from_shape_fn((d, m), |_| rng.sample::<f64, _>(StandardNormal));
    for j in 0..m {
        for i in 0..j {
            let p = basis.column(j).dot(&basis.column(i));
            let ci = basis.column(i).to_owned();
            basis.column_mut(j).scaled_add(-p, &ci);
        }
        let n = basis.column(j).dot(&basis.column(j)).sqrt();
        basis.column_mut(j).mapv_inplace(|v| v / n);
    }

    let k_max = cfg.max_steps as usize;
    let mut placed: Vec<Array1<f64>> = Vec::with_capacity(k_max + 1);
    for _ in 0..k_max {
        let v = place(&mut rng, &basis, &placed).ok_or_else(|| placement_error(cfg))?;
        placed.push(v);
    }
    let mut term_rng = ChaCha8Rng::seed_from_u64(cfg.term_direction_seed);
    let term = place(&mut term_rng, &basis, &placed).ok_or_else(|| placement_error(cfg))?;

    let g = {
        let v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let n = v.dot(&v).sqrt();
        v / n
    };
    let l = cfg.n_layers;
    let gamma = (0..l)
        .map(|i| (i as f64 / (l - 1) as f64).powf(cfg.disentangle_exponent))
        .collect();

    let mut centroids = Array2::zeros((k_max, d));
    for (i, v) in placed.iter().enumerate() {
        centroids.row_mut(i).assign(v);
    }
    Ok(HarnessWorld {
        basis,
        step_centroids: centroids,
        term_centroid: term,
        shared_early_state: g,
        gamma,
    })
}

fn place(rng: &mut ChaCha8Rng, basis: &Array2<f64>, placed: &[Array1<f64>]) -> Option<Array1<f64>> {
    let m = basis.ncols();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let c = Array1::from_shape_fn(m, |_| rng.sample::<f64, _>(StandardNormal));
        let v = basis.dot(&c);
        let n = v.dot(&v).sqrt();
        if n == 0.0 {
            continue;
        }
        let v = v / n;
        if placed.iter().all(|u| u.dot(&v) <= MAX_COSINE) {
            return Some(v);
        }
    }
    None
}

fn placement_error(cfg: &HarnessConfig) -> Error {
    Error::Harness(format!(
        "cannot place {} centroids at pairwise angles of at least 60° in a {}-dimensional \
         subspace; increase harness.dim or harness.manifold_dim",
        cfg.max_steps + 1,
        cfg.manifold_dim()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = HarnessConfig::default();
        assert_eq!(build_world(&cfg).unwrap(), build_world(&cfg).unwrap());
    }

    #[test]
    fn centroid_angles_at_least_sixty_degrees() {
        let w = build_world(&HarnessConfig::default()).unwrap();
        let mut all: Vec<Array1<f64>> = w
            .step_centroids
            .rows()
            .into_iter()
            .map(|r| r.to_owned())
            .collect();
        all.push(w.term_centroid.clone());
        for (i, a) in all.iter().enumerate() {
            assert!((a.dot(a) - 1.0).abs() < 1e-12);
            for b in &all[i + 1..] {
                assert!(a.dot(b) <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn linear_depth_schedule_for_unit_exponent() {
        let w = build_world(&HarnessConfig::default()).unwrap();
        for (l, g) in w.gamma.iter().enumerate() {
            assert!((g - l as f64 / 7.0).abs() < 1e-15);
        }
        let flat = build_world(&HarnessConfig {
            disentangle_exponent: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert!(flat.gamma.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn impossible_placement_is_reported() {
        let cfg = HarnessConfig {
            manifold_dim: Some(2),
            ..Default::default()
        };
        let err = build_world(&cfg).unwrap_err().to_string();
        assert!(err.contains("increase harness.dim"), "{err}");
    }
}
