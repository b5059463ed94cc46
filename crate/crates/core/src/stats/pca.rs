//! Principal component analysis with a fixed sign convention.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Array1<f64>,
    /// `r × dim`, orthonormal rows.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub r: usize,
    /// Set when every input row was identical.
    pub degenerate: bool,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `U (x − mean)`.
    pub fn project(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let centered = &x - &self.mean;
        self.components.dot(&centered)
    }

    pub fn project_rows(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "basis dim {} vs data dim {}",
                self.dim(),
                x.ncols()
            )));
        }
        let centered = &x - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.components.t()))
    }

    /// `mean + Uᵀ z`.
    pub fn reconstruct(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self.components.t().dot(&z) + &self.mean
    }

    /// Bitwise identity of two bases (used as a train/test leakage guard).
    pub fn same_basis(&self, other: &PcaBasis) -> bool {
        let bits = |a: &Array2<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        self.r == other.r
            && self.mean.len() == other.mean.len()
            && self
                .mean
                .iter()
                .zip(other.mean.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && bits(&self.components) == bits(&other.components)
    }
}

/// Fit with `1 ≤ r ≤ min(n − 1, d)`.
pub fn fit_pca(x: ArrayView2<'_, f64>, r: usize) -> Result<PcaBasis> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Insufficient(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if r == 0 || r > (n - 1).min(d) {
        return Err(Error::InvalidInput(format!(
            "PCA rank {r} outside [1, {}] for {n}×{d} data",
            (n - 1).min(d)
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("n ≥ 2");
    let xc = &x - &mean.view().insert_axis(Axis(0));
    let scale = 1.0 / (n - 1) as f64;

    let (mut components, mut variance) = if d <= n {
        let cov = xc.t().dot(&xc) * scale;
        let (vals, vecs) = sorted_eigen(&cov);
        let comps = Array2::from_shape_fn((r, d), |(i, j)| vecs[(j, i)]);
        (comps, vals[..r].to_vec())
    } else {
        // Gram path: eigenvectors of Xc Xcᵀ map to components through Xcᵀ.
        let gram = xc.dot(&xc.t()) * scale;
        let (vals, vecs) = sorted_eigen(&gram);
        let mut comps = Array2::<f64>::zeros((r, d));
        for i in 0..r {
            if vals[i] > 0.0 {
                let v = Array1::from_shape_fn(n, |k| vecs[(k, i)]);
                let u = xc.t().dot(&v);
                comps.row_mut(i).assign(&u);
            }
        }
        (comps, vals[..r].to_vec())
    };
    let total: f64 = variance.iter().sum();
    let degenerate = x.rows().into_iter().all(|row| row == x.row(0));
    let floor = 1e-12 * total.max(0.0);
    for v in &mut variance {
        if *v < floor || *v < 0.0 {
            *v = 0.0;
        }
    }
    if degenerate {
        variance.iter_mut().for_each(|v| *v = 0.0);
    }
    orthonormalize(&mut components, &variance);
    apply_sign_convention(&mut components);
    Ok(PcaBasis {
        mean,
        components,
        explained_variance: variance,
        r,
        degenerate,
    })
}

/// Fit with the rank clipped to `min(r, d, n − 1)`.
pub fn fit_pca_capped(x: ArrayView2<'_, f64>, r: usize) -> Result<PcaBasis> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::Insufficient(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    fit_pca(x, r.min(d).min(n - 1).max(1))
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
fn sorted_eigen(m: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let k = m.nrows();
    let dm = DMatrix::from_fn(k, k, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(k, k, |row, col| eig.eigenvectors[(row, order[col])]);
    (vals, vecs)
}

/// Modified Gram-Schmidt. Rows with zero variance or that collapse are
/// replaced by the first standard basis vector not yet spanned.
fn orthonormalize(c: &mut Array2<f64>, variance: &[f64]) {
    let (r, d) = c.dim();
    let mut next_axis = 0;
    for i in 0..r {
        let mut ok = variance[i] > 0.0 && reduce(c, i) > 1e-8;
        while !ok {
            let mut row = c.row_mut(i);
            row.fill(0.0);
            row[next_axis % d] = 1.0;
            next_axis += 1;
            ok = reduce(c, i) > 1e-8 || next_axis > 2 * d;
        }
        let norm = c.row(i).dot(&c.row(i)).sqrt();
        c.row_mut(i).mapv_inplace(|v| v / norm);
    }
}

/// Project out rows `0..i` from row `i` (twice, for stability) and return its norm.
fn reduce(c: &mut Array2<f64>, i: usize) -> f64 {
    let norm0 = c.row(i).dot(&c.row(i)).sqrt();
    if norm0 == 0.0 {
        return 0.0;
    }
    c.row_mut(i).mapv_inplace(|v| v / norm0);
    for _ in 0..2 {
        for j in 0..i {
            let p = c.row(i).dot(&c.row(j));
            let rj = c.row(j).to_owned();
            c.row_mut(i).scaled_add(-p, &rj);
        }
    }
    c.row(i).dot(&c.row(i)).sqrt()
}

/// Flip each row so that its largest-magnitude entry is non-negative.
fn apply_sign_convention(c: &mut Array2<f64>) {
    for mut row in c.rows_mut() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    fn max_orthonormality_error(c: &Array2<f64>) -> f64 {
        let g = c.dot(&c.t());
        let mut worst: f64 = 0.0;
        for ((i, j), v) in g.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
        worst
    }

    fn max_reconstruction_error(b: &PcaBasis, x: &Array2<f64>) -> f64 {
        let z = b.project_rows(x.view()).unwrap();
        let mut worst: f64 = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            let rec = b.reconstruct(z.row(i));
            worst = worst.max((&rec - &row).iter().fold(0.0, |m, v| m.max(v.abs())));
        }
        worst
    }

    #[test]
    fn full_rank_reconstruction_and_orthonormality() {
        let x = gaussian(1, 50, 8);
        let b = fit_pca(x.view(), 8).unwrap();
        assert!(max_orthonormality_error(&b.components) <= 1e-8);
        assert!(max_reconstruction_error(&b, &x) <= 1e-8);
    }

    #[test]
    fn plane_in_ten_dims_is_recovered() {
        let coeffs = gaussian(2, 40, 2);
        let basis = gaussian(3, 2, 10);
        let offset = gaussian(4, 1, 10);
        let x = coeffs.dot(&basis) + &offset.row(0);
        let b = fit_pca(x.view(), 2).unwrap();
        assert!(max_reconstruction_error(&b, &x) <= 1e-8);
    }

    #[test]
    fn identical_rows_are_flagged() {
        let x = Array2::from_shape_fn((6, 4), |(_, j)| j as f64 * 0.5 - 1.0);
        let b = fit_pca(x.view(), 3).unwrap();
        assert!(b.degenerate);
        assert!(b.explained_variance.iter().all(|&v| v == 0.0));
        assert!(max_orthonormality_error(&b.components) <= 1e-12);
    }

    #[test]
    fn rank_out_of_range() {
        let x = gaussian(5, 5, 3);
        assert!(fit_pca(x.view(), 0).is_err());
        assert!(fit_pca(x.view(), 4).is_err());
        assert_eq!(fit_pca_capped(x.view(), 100).unwrap().r, 3);
    }

    #[test]
    fn gram_path_agrees_with_covariance_path() {
        let x = gaussian(6, 12, 30);
        let wide = fit_pca(x.view(), 5).unwrap();
        let cov = {
            let mean = x.mean_axis(Axis(0)).unwrap();
            let xc = &x - &mean;
            xc.t().dot(&xc) / 11.0
        };
        for i in 0..5 {
            let u = wide.components.row(i);
            let cu = cov.dot(&u);
            let lam = u.dot(&cu);
            assert!((lam - wide.explained_variance[i]).abs() < 1e-9);
            let resid = &cu - &(&u * lam);
            assert!(resid.iter().all(|v| v.abs() < 1e-8));
        }
        assert!(max_orthonormality_error(&wide.components) <= 1e-8);
    }

    #[test]
    fn signs_are_deterministic() {
        let x = gaussian(7, 30, 6);
        let a = fit_pca(x.view(), 4).unwrap();
        let b = fit_pca(x.view(), 4).unwrap();
        assert!(a.same_basis(&b));
        for row in a.components.rows() {
            let big = row
                .iter()
                .cloned()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(big >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn basis_invariants(seed in any::<u64>(), n in 3usize..40, d in 2usize..12) {
            let x = gaussian(seed, n, d);
            let r = (n - 1).min(d);
            let b = fit_pca(x.view(), r).unwrap();
            prop_assert!(max_orthonormality_error(&b.components) <= 1e-8);
            for w in b.explained_variance.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            let z = b.project_rows(x.view()).unwrap();
            for m in z.mean_axis(Axis(0)).unwrap().iter() {
                prop_assert!(m.abs() <= 1e-8);
            }
        }
    }
}
