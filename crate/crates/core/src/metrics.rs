//! Wasserstein distances between samples and Gaussians.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, sqrt_psd};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub standard_error: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub seed: Option<u64>,
}

/// Exact W2 between two empirical measures on the line.
///
/// Mass is split into `n·m` equal units so the monotone coupling is computed
/// with integer bookkeeping.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("w2_1d needs nonempty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        return Ok((s / a.len() as f64).sqrt());
    }
    let (n, m) = (a.len() as u64, b.len() as u64);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (m, n);
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let take = ra.min(rb);
        acc += take as f64 * (a[i] - b[j]).powi(2);
        ra -= take;
        rb -= take;
        if ra == 0 {
            i += 1;
            ra = m;
        }
        if rb == 0 {
            j += 1;
            rb = n;
        }
    }
    Ok((acc / (n * m) as f64).sqrt())
}

fn project(x: &DMatrix<f64>, u: &DVector<f64>) -> Vec<f64> {
    (x * u).iter().copied().collect()
}

/// Mean of `w2_1d` over `n_proj` seeded uniform directions, with its standard error.
pub fn sliced_w2(a: &DMatrix<f64>, b: &DMatrix<f64>, n_proj: usize, seed: u64) -> Result<(f64, f64)> {
    let d = a.ncols();
    if d == 0 || b.ncols() != d {
        return Err(Error::Domain("sliced_w2 needs samples of equal positive dimension".into()));
    }
    if n_proj == 0 {
        return Err(Error::Domain("sliced_w2 needs at least one projection".into()));
    }
    let vals = (0..n_proj)
        .into_par_iter()
        .map(|j| {
            let u = if d == 1 {
                DVector::from_element(1, 1.0)
            } else {
                rng::normals(&mut rng::stream(seed, &[tag::PROJECTIONS, j as u64]), d).normalize()
            };
            w2_1d(&project(a, &u), &project(b, &u))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(linalg::mean_se(&vals))
}

/// Bures–Wasserstein distance between two Gaussians.
pub fn gaussian_w2(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    for c in [c1, c2] {
        if (c - c.transpose()).abs().max() > 1e-10 || linalg::min_eigenvalue(c) <= 0.0 {
            return Err(Error::Domain("gaussian_w2 needs symmetric positive definite covariances".into()));
        }
    }
    let r2 = sqrt_psd(c2);
    let cross = sqrt_psd(&(&r2 * c1 * &r2));
    let tr = (c1 + c2 - cross * 2.0).trace();
    Ok(((m1 - m2).norm_squared() + tr.max(0.0)).sqrt())
}

const THRESHOLD_RESAMPLES: usize = 50;

/// 95th percentile of sliced W2 between independent size-`n` samples of one distribution.
pub fn same_distribution_threshold(
    n: usize,
    d: usize,
    n_proj: usize,
    seed: u64,
    generator: &(dyn Fn(usize, u64) -> DMatrix<f64> + Sync),
) -> f64 {
    let vals: Vec<f64> = (0..THRESHOLD_RESAMPLES)
        .into_par_iter()
        .map(|r| {
            let base = rng::splitmix64(seed ^ rng::splitmix64(r as u64 + 1));
            let a = generator(n, rng::splitmix64(base ^ 1));
            let b = generator(n, rng::splitmix64(base ^ 2));
            debug_assert_eq!(a.ncols(), d);
            sliced_w2(&a, &b, n_proj, base).map(|v| v.0).unwrap_or(f64::INFINITY)
        })
        .collect();
    linalg::quantile(&vals, 0.95)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::GaussianMixture;
    use proptest::prelude::*;
    use rand::Rng;

    fn gauss_sample(n: usize, mean: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[]);
        (0..n).map(|_| mean + sd * rng::normal(&mut r)).collect()
    }

    fn to_mat(pts: &[DVector<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(pts.len(), pts[0].len(), |i, k| pts[i][k])
    }

    #[test]
    fn w2_1d_examples() {
        assert_eq!(w2_1d(&[1.0, 3.0, 2.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(w2_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        // brute force over both couplings
        let cost = |p: [usize; 2]| ((0.0f64 - [1.0, 3.0][p[0]]).powi(2) + (2.0f64 - [1.0, 3.0][p[1]]).powi(2)) / 2.0;
        assert_eq!(cost([0, 1]).min(cost([1, 0])), 1.0);
        assert!(w2_1d(&[], &[1.0]).is_err());
        // unequal sizes: {0} vs {0, 2} moves half the mass by 2
        assert!((w2_1d(&[0.0], &[0.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn w2_1d_equal_variance_gaussians() {
        let n = 200_000;
        let a = gauss_sample(n, 0.0, 1.0, 1);
        let b = gauss_sample(n, 1.0, 1.0, 2);
        let w = w2_1d(&a, &b).unwrap();
        // SE of the mean difference dominates for equal-shape samples
        let se = (2.0 / n as f64).sqrt();
        assert!((w - 1.0).abs() < 3.0 * se + 5e-3, "{w}");
    }

    #[test]
    fn unequal_sizes_match_replication() {
        let a = gauss_sample(30, 0.0, 1.0, 3);
        let b = gauss_sample(45, 0.5, 2.0, 4);
        let rep_a: Vec<f64> = a.iter().flat_map(|x| std::iter::repeat_n(*x, 3)).collect();
        let rep_b: Vec<f64> = b.iter().flat_map(|x| std::iter::repeat_n(*x, 2)).collect();
        let want = w2_1d(&rep_a, &rep_b).unwrap();
        assert!((w2_1d(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn sliced_examples() {
        let g = GaussianMixture::standard(3);
        let a = to_mat(&g.sample(500, 1));
        assert_eq!(sliced_w2(&a, &a, 16, 0).unwrap().0, 0.0);
        let a1 = DMatrix::from_column_slice(5, 1, &[0.1, 0.5, -1.0, 2.0, 0.0]);
        let b1 = DMatrix::from_column_slice(4, 1, &[0.3, -0.2, 1.0, 0.7]);
        let want = w2_1d(a1.as_slice(), b1.as_slice()).unwrap();
        assert!((sliced_w2(&a1, &b1, 7, 3).unwrap().0 - want).abs() < 1e-15);
    }

    #[test]
    fn translation_matches_mean_absolute_projection() {
        // E|<u, v>| for u uniform on S^2 is ‖v‖/2
        let g = GaussianMixture::standard(3);
        let a = to_mat(&g.sample(200, 1));
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let b = DMatrix::from_fn(200, 3, |i, k| a[(i, k)] + v[k]);
        let (val, se) = sliced_w2(&a, &b, 2000, 9).unwrap();
        assert!((val - v.norm() / 2.0).abs() < 3.0 * se, "{val} {se}");
    }

    #[test]
    fn gaussian_w2_examples() {
        let i2 = DMatrix::identity(2, 2);
        let z = DVector::zeros(2);
        assert!(gaussian_w2(&z, &i2, &z, &i2).unwrap() < 1e-12);
        let v = DVector::from_vec(vec![3.0, 4.0]);
        assert!((gaussian_w2(&z, &i2, &v, &i2).unwrap() - 5.0).abs() < 1e-12);
        let one = DMatrix::from_element(1, 1, 1.0);
        let four = DMatrix::from_element(1, 1, 4.0);
        let z1 = DVector::zeros(1);
        assert!((gaussian_w2(&z1, &one, &z1, &four).unwrap() - 1.0).abs() < 1e-12);
        assert!(gaussian_w2(&z1, &one, &z1, &DMatrix::from_element(1, 1, -1.0)).is_err());
    }

    #[test]
    fn gaussian_w2_agrees_with_samples() {
        let n = 200_000;
        let a = gauss_sample(n, 0.0, 1.0, 5);
        let b = gauss_sample(n, 0.3, 2.0, 6);
        let emp = w2_1d(&a, &b).unwrap();
        let exact = gaussian_w2(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 0.3),
            &DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        // replicate to estimate the sampling spread
        let reps: Vec<f64> = (0..10)
            .map(|r| w2_1d(&gauss_sample(n, 0.0, 1.0, 100 + r), &gauss_sample(n, 0.3, 2.0, 200 + r)).unwrap())
            .collect();
        let (m, se) = linalg::mean_se(&reps);
        let sd = se * (reps.len() as f64).sqrt();
        assert!((emp - exact).abs() < 3.0 * sd + 0.01, "{emp} {exact}");
        assert!((m - exact).abs() < 0.01);
    }

    #[test]
    fn threshold_behaviour() {
        let g = GaussianMixture::standard(2);
        let gen = |n: usize, s: u64| to_mat(&g.sample(n, s));
        let t_small = same_distribution_threshold(1000, 2, 16, 1, &gen);
        let t_big = same_distribution_threshold(10_000, 2, 16, 1, &gen);
        assert!(t_small > 0.0 && t_big < t_small);
        let point = |n: usize, _s: u64| DMatrix::from_element(n, 2, 0.5);
        assert_eq!(same_distribution_threshold(100, 2, 8, 1, &point), 0.0);
    }

    #[test]
    fn rotation_invariance_in_expectation() {
        let g = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-1.0, 0.0]), DVector::from_vec(vec![1.0, 0.5])],
            vec![DMatrix::identity(2, 2) * 0.2, DMatrix::identity(2, 2) * 0.5],
        )
        .unwrap();
        let a = to_mat(&g.sample(400, 1));
        let b = to_mat(&GaussianMixture::standard(2).sample(400, 2));
        let th: f64 = 0.7;
        let rot = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let (ra, rb) = (&a * rot.transpose(), &b * rot.transpose());
        let plain: Vec<f64> = (0..20).map(|s| sliced_w2(&a, &b, 32, s).unwrap().0).collect();
        let rotated: Vec<f64> = (0..20).map(|s| sliced_w2(&ra, &rb, 32, 1000 + s).unwrap().0).collect();
        let (m1, s1) = linalg::mean_se(&plain);
        let (m2, s2) = linalg::mean_se(&rotated);
        assert!((m1 - m2).abs() < 3.0 * (s1 * s1 + s2 * s2).sqrt());
    }

    proptest! {
        #[test]
        fn triangle_inequality(seed in 0u64..1000) {
            let mut r = rng::stream(seed, &[]);
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random::<f64>() * 4.0 - 2.0).collect() };
            let (x, y, z) = (draw(7), draw(11), draw(5));
            let xy = w2_1d(&x, &y).unwrap();
            let yz = w2_1d(&y, &z).unwrap();
            let xz = w2_1d(&x, &z).unwrap();
            prop_assert!(xz <= xy + yz + 1e-12);
            prop_assert!((xy - w2_1d(&y, &x).unwrap()).abs() < 1e-12);
        }
    }
}
