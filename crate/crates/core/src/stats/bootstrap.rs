//! Percentile bootstrap confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mean, quantile_sorted};
use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lower95: f64,
    pub upper95: f64,
    pub n_resamples: usize,
    pub seed: u64,
    /// The percentile band did not contain the point estimate and was widened.
    pub widened: bool,
}

impl BootstrapCI {
    pub fn contains(&self, v: f64) -> bool {
        self.lower95 <= v && v <= self.upper95
    }

    pub fn disjoint(&self, other: &BootstrapCI) -> bool {
        self.upper95 < other.lower95 || other.upper95 < self.lower95
    }

    fn from_distribution(point: f64, mut stats: Vec<f64>, seed: u64) -> Self {
        stats.sort_by(f64::total_cmp);
        let n_resamples = stats.len();
        let mut lower95 = quantile_sorted(&stats, 0.025);
        let mut upper95 = reflected_upper(&stats);
        let widened = point < lower95 || point > upper95;
        lower95 = lower95.min(point);
        upper95 = upper95.max(point);
        BootstrapCI {
            point,
            lower95,
            upper95,
            n_resamples,
            seed,
            widened,
        }
    }
}

/// Upper 97.5% quantile computed as the mirror of the lower one so that
/// negating the distribution reflects the interval.
fn reflected_upper(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * 0.025;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let hi_idx = n - 1 - lo;
    if frac == 0.0 || hi_idx == 0 {
        return sorted[hi_idx];
    }
    sorted[hi_idx] - frac * (sorted[hi_idx] - sorted[hi_idx - 1])
}

/// CIs for both group means and their difference `mean(a) − mean(b)`,
/// all computed from the same resamples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupCis {
    pub a: BootstrapCI,
    pub b: BootstrapCI,
    pub diff: BootstrapCI,
}

/// FNV-1a over the bit patterns, so each group's resampling stream depends
/// only on its own contents.
fn fingerprint(x: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn resampled_means(x: &[f64], n_resamples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fingerprint(x));
    let n = x.len();
    (0..n_resamples)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                s += x[rng.random_range(0..n)];
            }
            s / n as f64
        })
        .collect()
}

fn check(x: &[f64], name: &str) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Insufficient(format!(
            "bootstrap group `{name}` is empty"
        )));
    }
    if x.len() < 2 {
        return Err(Error::Insufficient(format!(
            "bootstrap group `{name}` has {} sample, need at least 2",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("bootstrap group `{name}`")));
    }
    Ok(())
}

pub fn bootstrap_group_cis(
    a: &[f64],
    b: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<GroupCis> {
    check(a, "a")?;
    check(b, "b")?;
    if n_resamples == 0 {
        return Err(Error::InvalidInput("n_resamples must be positive".into()));
    }
    let ma = resampled_means(a, n_resamples, seed);
    let mb = resampled_means(b, n_resamples, seed);
    let diff: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| x - y).collect();
    let (pa, pb) = (mean(a), mean(b));
    Ok(GroupCis {
        a: BootstrapCI::from_distribution(pa, ma, seed),
        b: BootstrapCI::from_distribution(pb, mb, seed),
        diff: BootstrapCI::from_distribution(pa - pb, diff, seed),
    })
}

/// Percentile CI of `mean(a) − mean(b)`.
pub fn bootstrap_ci(a: &[f64], b: &[f64], n_resamples: usize, seed: u64) -> Result<BootstrapCI> {
    Ok(bootstrap_group_cis(a, b, n_resamples, seed)?.diff)
}

/// Percentile CI of `mean(x)`.
pub fn bootstrap_mean_ci(x: &[f64], n_resamples: usize, seed: u64) -> Result<BootstrapCI> {
    check(x, "x")?;
    if n_resamples == 0 {
        return Err(Error::InvalidInput("n_resamples must be positive".into()));
    }
    let m = resampled_means(x, n_resamples, seed);
    Ok(BootstrapCI::from_distribution(mean(x), m, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng, n: usize, mu: f64) -> Vec<f64> {
        (0..n)
            .map(|_| mu + rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    #[test]
    fn constant_groups_give_zero_interval() {
        let ci = bootstrap_ci(&[2.5; 10], &[2.5; 10], 500, 42).unwrap();
        assert_eq!((ci.point, ci.lower95, ci.upper95), (0.0, 0.0, 0.0));
        assert!(!ci.widened);
    }

    #[test]
    fn shifted_groups_exclude_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = normal(&mut rng, 500, 1.0);
        let b = normal(&mut rng, 500, 0.0);
        let ci = bootstrap_ci(&a, &b, DEFAULT_RESAMPLES, DEFAULT_SEED).unwrap();
        assert!((ci.point - 1.0).abs() < 0.2);
        assert!(ci.lower95 > 0.0);
    }

    #[test]
    fn swapping_groups_reflects_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = normal(&mut rng, 40, 0.3);
        let b = normal(&mut rng, 55, 0.0);
        let ab = bootstrap_ci(&a, &b, 2000, 9).unwrap();
        let ba = bootstrap_ci(&b, &a, 2000, 9).unwrap();
        assert_eq!(ab.point, -ba.point);
        assert!((ab.lower95 + ba.upper95).abs() <= 1e-12);
        assert!((ab.upper95 + ba.lower95).abs() <= 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = normal(&mut rng, 30, 0.0);
        let b = normal(&mut rng, 30, 0.0);
        assert_eq!(
            bootstrap_group_cis(&a, &b, 1000, 5).unwrap(),
            bootstrap_group_cis(&a, &b, 1000, 5).unwrap()
        );
    }

    #[test]
    fn empty_or_singleton_groups_error() {
        assert!(bootstrap_ci(&[], &[1.0, 2.0], 10, 1).is_err());
        assert!(bootstrap_ci(&[1.0], &[1.0, 2.0], 10, 1).is_err());
    }

    #[test]
    fn coverage_of_true_difference() {
        let mut hits = 0;
        for trial in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let a = normal(&mut rng, 500, 1.0);
            let b = normal(&mut rng, 500, 0.0);
            let ci = bootstrap_ci(&a, &b, 1000, trial).unwrap();
            if ci.contains(1.0) {
                hits += 1;
            }
        }
        assert!(hits >= 180, "coverage {hits}/200");
    }

    #[test]
    fn point_always_inside_band() {
        let x = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 100.0];
        let ci = bootstrap_mean_ci(&x, 50, 1).unwrap();
        assert!(ci.lower95 <= ci.point && ci.point <= ci.upper95);
    }
}
