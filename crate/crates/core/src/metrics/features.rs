//! Fixed random-projection features and the distances computed on them.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::rng;

pub const FEATURE_DIM: usize = 128;
pub const DEFAULT_PROJ_SEED: u64 = 42;
/// Ridge added to each covariance before the matrix square root.
pub const COV_SHRINKAGE: f64 = 1e-6;

/// `dim × 128` matrix with `N(0, 1/dim)` entries, row-major from one stream.
pub fn projection(dim: usize, proj_seed: u64) -> Array2<f64> {
    let mut r = rng::stream(proj_seed, &[dim as u64, FEATURE_DIM as u64]);
    let s = 1.0 / (dim as f64).sqrt();
    Array2::from_shape_simple_fn((dim, FEATURE_DIM), || s * rng::normal(&mut r))
}

/// Flattens each item (all items must have the same length) and projects
/// it to 128 dimensions.
pub fn extract_features<'a, I>(items: I, proj_seed: u64) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let items: Vec<&[f32]> = items.into_iter().collect();
    let Some(first) = items.first() else {
        return Ok(Array2::zeros((0, FEATURE_DIM)));
    };
    let dim = first.len();
    if let Some(bad) = items.iter().find(|x| x.len() != dim) {
        return Err(Error::Dimension(format!("item of length {} among items of length {dim}", bad.len())));
    }
    let mut x = Array2::<f64>::zeros((items.len(), dim));
    for (mut row, it) in x.rows_mut().into_iter().zip(&items) {
        row.iter_mut().zip(it.iter()).for_each(|(d, &s)| *d = s as f64);
    }
    Ok(x.dot(&projection(dim, proj_seed)))
}

fn gaussian_fit(x: ArrayView2<f64>) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mu = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = &x - &mu;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let mut sigma = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    for i in 0..d {
        sigma[(i, i)] += COV_SHRINKAGE;
    }
    (nalgebra::DVector::from_iterator(d, mu.iter().copied()), sigma)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, with the cross term taken as
/// `tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})` and clamped at zero.
pub fn frechet_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    let rows = a.nrows().min(b.nrows());
    if rows < 2 {
        return Err(Error::Dimension(format!("feature sets have {} and {} rows; need at least 2 each", a.nrows(), b.nrows())));
    }
    let (mu_a, sa) = gaussian_fit(a);
    let (mu_b, sb) = gaussian_fit(b);
    let ra = sym_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Mean pairwise Euclidean distance between feature rows, over √128.
pub fn diversity_of_features(f: ArrayView2<f64>) -> Result<f64> {
    let n = f.nrows();
    if n < 2 {
        return Err(Error::Count { needed: 2, got: n });
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = f.row(i).iter().zip(f.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            sum += d.sqrt();
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64 / (FEATURE_DIM as f64).sqrt())
}

/// Diversity of a set of equally shaped videos.
pub fn diversity<'a, I>(videos: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let items: Vec<&[f32]> = videos.into_iter().collect();
    if items.len() < 2 {
        return Err(Error::Count { needed: 2, got: items.len() });
    }
    diversity_of_features(extract_features(items, DEFAULT_PROJ_SEED)?.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gaussian(n: usize, d: usize, shift: &[f64], seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, &[]);
        Array2::from_shape_fn((n, d), |(_, j)| rng::normal(&mut r) + shift.get(j).copied().unwrap_or(0.0))
    }

    #[test]
    fn identity_and_symmetry() {
        let a = gaussian(300, 16, &[], 1);
        let b = gaussian(200, 16, &[0.5], 2);
        assert!(frechet_distance(a.view(), a.view()).unwrap() < 1e-6);
        let ab = frechet_distance(a.view(), b.view()).unwrap();
        let ba = frechet_distance(b.view(), a.view()).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
    }

    #[test]
    fn shifted_gaussians_approach_mean_gap() {
        let mu = [1.0, -2.0, 0.5, 1.5];
        let want: f64 = mu.iter().map(|m| m * m).sum();
        let a = gaussian(20000, 4, &[], 3);
        let b = gaussian(20000, 4, &mu, 4);
        let d = frechet_distance(a.view(), b.view()).unwrap();
        assert!((d - want).abs() / want < 0.05, "{d} vs {want}");
    }

    #[test]
    fn frechet_rejects_bad_shapes() {
        let a = gaussian(10, 4, &[], 1);
        assert!(matches!(frechet_distance(a.view(), gaussian(10, 5, &[], 1).view()), Err(Error::Dimension(_))));
        assert!(matches!(frechet_distance(a.view(), gaussian(1, 4, &[], 1).view()), Err(Error::Dimension(_))));
    }

    #[test]
    fn features_are_reproducible() {
        let x: Vec<f32> = (0..300).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..300).map(|i| (i as f32 * 0.11).cos()).collect();
        let f1 = extract_features([&x[..], &x[..], &y[..]], 42).unwrap();
        let f2 = extract_features([&x[..], &x[..], &y[..]], 42).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.dim(), (3, FEATURE_DIM));
        assert_eq!(f1.row(0), f1.row(1));
        assert_ne!(f1.row(0), f1.row(2));
        assert!(extract_features([&x[..], &x[..10]], 42).is_err());
    }

    #[test]
    fn diversity_basics() {
        let v = vec![0.25f32; 64];
        assert_eq!(diversity(std::iter::repeat(&v[..]).take(25)).unwrap(), 0.0);
        assert!(matches!(diversity([&v[..]]), Err(Error::Count { needed: 2, got: 1 })));
    }

    #[test]
    fn duplicating_an_outlier_raises_the_mean_distance() {
        // Three coincident rows and one at distance L: mean L/2; with the
        // outlier doubled, 6 of 10 pairs are at L.
        let mut f = Array2::<f64>::zeros((5, FEATURE_DIM));
        f.row_mut(3).fill(1.0);
        let before = diversity_of_features(f.slice(ndarray::s![..4, ..])).unwrap();
        f.row_mut(4).fill(1.0);
        let after = diversity_of_features(f.view()).unwrap();
        assert!((before - 0.5).abs() < 1e-12 && (after - 0.6).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn duplicate_does_not_raise_diversity_of_generic_sets(seed in 0u64..1000, n in 2usize..6, dup in 0usize..6) {
            let f = gaussian(n, FEATURE_DIM, &[], seed);
            let base = diversity_of_features(f.view()).unwrap();
            let mut rows: Vec<_> = f.rows().into_iter().map(|r| r.to_owned()).collect();
            rows.push(rows[dup % n].clone());
            let g = ndarray::stack(ndarray::Axis(0), &rows.iter().map(|r| r.view()).collect::<Vec<_>>()).unwrap();
            prop_assert!(diversity_of_features(g.view()).unwrap() <= base + 1e-12);
        }

        #[test]
        fn diversity_ignores_order(seed in 0u64..1000, n in 2usize..7) {
            let f = gaussian(n, FEATURE_DIM, &[], seed);
            let mut rev = f.clone();
            rev.invert_axis(ndarray::Axis(0));
            let a = diversity_of_features(f.view()).unwrap();
            let b = diversity_of_features(rev.view()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
