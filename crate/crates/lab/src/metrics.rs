//! Unlearning accuracy, Fréchet distance between fitted Gaussians and k-NN
//! precision/recall, all on raw 2D coordinates.

use rand::Rng;
use sfd_core::gmm::{Forgetting, GmmSpec};
use sfd_core::mat2::{self, Mat2, Vec2};

use crate::error::{contract, Result};
use crate::sampling::sample_class;

/// Added to both covariances before the matrix square root.
pub const COV_REGULARIZER: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Unlearning {
    /// Fraction not classified as the forgotten class.
    pub ua: f64,
    /// Fraction classified as the override class.
    pub override_rate: f64,
}

/// Bayes-classifies samples generated under the forgotten class.
pub fn unlearning_accuracy(spec: &GmmSpec, samples: &[f64], roles: Forgetting) -> Result<Unlearning> {
    let n = samples.len() / 2;
    if n == 0 {
        return Err(contract("unlearning accuracy needs at least one sample"));
    }
    let (mut kept, mut overridden) = (0usize, 0usize);
    for p in samples.chunks(2) {
        let (label, _) = spec.bayes_classify(&[p[0], p[1]]);
        if label == roles.forget {
            kept += 1;
        } else if label == roles.override_with {
            overridden += 1;
        }
    }
    Ok(Unlearning {
        ua: (n - kept) as f64 / n as f64,
        override_rate: overridden as f64 / n as f64,
    })
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(samples: &[f64]) -> Result<(Vec2, Mat2)> {
    let n = samples.len() / 2;
    if n < 2 {
        return Err(contract("fitting a Gaussian needs at least two samples"));
    }
    let mut m = [0.0; 2];
    for p in samples.chunks(2) {
        m[0] += p[0];
        m[1] += p[1];
    }
    m = [m[0] / n as f64, m[1] / n as f64];
    let mut c = [0.0; 4];
    for p in samples.chunks(2) {
        let d = [p[0] - m[0], p[1] - m[1]];
        c = mat2::add(&c, &mat2::outer(&d, &d));
    }
    Ok((m, mat2::scale(&c, 1.0 / (n - 1) as f64)))
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})` between two Gaussians.
pub fn frechet_from_moments(ma: &Vec2, ca: &Mat2, mb: &Vec2, cb: &Mat2) -> f64 {
    let reg = mat2::scale(&mat2::IDENTITY, COV_REGULARIZER);
    let (ca, cb) = (mat2::add(ca, &reg), mat2::add(cb, &reg));
    let prod = mat2::mul(&ca, &cb);
    // Tr √M = √(Tr M + 2 √det M) for M with non-negative spectrum
    let tr_sqrt = (mat2::trace(&prod) + 2.0 * mat2::det(&prod).max(0.0).sqrt()).max(0.0).sqrt();
    let dm = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2);
    (dm + mat2::trace(&ca) + mat2::trace(&cb) - 2.0 * tr_sqrt).max(0.0)
}

pub fn frechet_gaussian(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, ca) = fit_gaussian(a)?;
    let (mb, cb) = fit_gaussian(b)?;
    Ok(frechet_from_moments(&ma, &ca, &mb, &cb))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii(points: &[f64], k: usize) -> Vec<f64> {
    let n = points.len() / 2;
    let mut d = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            d.clear();
            let p = &points[2 * i..2 * i + 2];
            d.extend((0..n).filter(|&j| j != i).map(|j| sq_dist(p, &points[2 * j..2 * j + 2])));
            *d.select_nth_unstable_by(k - 1, f64::total_cmp).1
        })
        .collect()
}

/// Fraction of `queries` that fall inside at least one k-NN ball of `support`.
fn coverage(support: &[f64], radii: &[f64], queries: &[f64]) -> f64 {
    let hits = queries
        .chunks(2)
        .filter(|q| support.chunks(2).zip(radii).any(|(s, &r)| sq_dist(q, s) <= r))
        .count();
    hits as f64 / (queries.len() / 2) as f64
}

/// k-NN manifold precision and recall.
pub fn precision_recall_knn(real: &[f64], fake: &[f64], k: usize) -> Result<(f64, f64)> {
    let (nr, nf) = (real.len() / 2, fake.len() / 2);
    if nr == 0 || nf == 0 {
        return Err(contract("precision/recall needs non-empty sets"));
    }
    if k == 0 || k >= nr.min(nf) {
        return Err(contract(format!("k = {k} must lie in [1, {})", nr.min(nf))));
    }
    let precision = coverage(real, &knn_radii(real, k), fake);
    let recall = coverage(fake, &knn_radii(fake, k), real);
    Ok((precision, recall))
}

/// Fréchet distance between two independent `n`-sample draws of class `c`,
/// maximized over `repeats` pairs.
pub fn noise_floor<R: Rng + ?Sized>(spec: &GmmSpec, c: usize, n: usize, repeats: usize, rng: &mut R) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..repeats {
        let a = sample_class(spec, c, n, rng)?;
        let b = sample_class(spec, c, n, rng)?;
        worst = worst.max(frechet_gaussian(&a, &b)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roles() -> Forgetting {
        Forgetting {
            forget: 0,
            override_with: 1,
        }
    }

    #[test]
    fn override_mean_samples_are_fully_unlearned() {
        let spec = GmmSpec::default_benchmark();
        let m = spec.class_mean(1);
        let s: Vec<f64> = (0..50).flat_map(|_| m).collect();
        let u = unlearning_accuracy(&spec, &s, roles()).unwrap();
        assert_eq!((u.ua, u.override_rate), (1.0, 1.0));
        assert!(unlearning_accuracy(&spec, &[], roles()).is_err());
    }

    #[test]
    fn teacher_samples_of_forgotten_class_have_bayes_error_ua() {
        // P(misclassified) for N((2,2), 0.25 I) against neighbours at distance 4:
        // the nearest boundaries are the two axes, 2 away = 4 standard deviations
        let spec = GmmSpec::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_class(&spec, 0, 100_000, &mut rng).unwrap();
        let u = unlearning_accuracy(&spec, &s, roles()).unwrap();
        let tail = 3.167e-5; // P(N(0,1) > 4)
        let bayes = 1.0 - (1.0 - tail) * (1.0 - tail);
        assert!(u.ua < 1e-3);
        assert!((u.ua - bayes).abs() < 5.0 * (bayes / 1e5).sqrt() + 1e-5);
    }

    #[test]
    fn frechet_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = GmmSpec::default_benchmark();
        let a = sample_class(&spec, 2, 1000, &mut rng).unwrap();
        assert!(frechet_gaussian(&a, &a).unwrap() < 1e-10);
        let d = frechet_from_moments(&[0.0, 0.0], &mat2::IDENTITY, &[1.0, 0.0], &mat2::IDENTITY);
        assert!((d - 1.0).abs() < 1e-9);
        // N(0, I) vs N(0, 4I): Tr(I + 4I − 2·2I) = 1 per axis
        let d = frechet_from_moments(&[0.0, 0.0], &mat2::IDENTITY, &[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]);
        assert!((d - 2.0).abs() < 1e-9);
        assert!(frechet_gaussian(&[1.0, 1.0], &a).is_err());
    }

    #[test]
    fn frechet_matches_general_sqrtm_for_correlated_covariances() {
        let ca = [0.7, 0.3, 0.3, 0.4];
        let cb = [0.2, -0.05, -0.05, 0.9];
        let ma = [0.1, 0.2];
        let mb = [-0.3, 0.5];
        // oracle: Tr √(Σ_a Σ_b) through Σ_a^{1/2} Σ_b Σ_a^{1/2}, which is symmetric
        let ra = mat2::sqrtm(&ca).unwrap();
        let inner = mat2::mul(&mat2::mul(&ra, &cb), &ra);
        let tr = mat2::trace(&mat2::sqrtm(&inner).unwrap());
        let want = 0.16 + 0.09 + mat2::trace(&ca) + mat2::trace(&cb) - 2.0 * tr;
        assert!((frechet_from_moments(&ma, &ca, &mb, &cb) - want).abs() < 1e-9);
    }

    #[test]
    fn two_draws_stay_under_their_calibrated_floor() {
        let spec = GmmSpec::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let floor = noise_floor(&spec, 1, 10_000, 20, &mut rng).unwrap();
        let a = sample_class(&spec, 1, 10_000, &mut rng).unwrap();
        let b = sample_class(&spec, 1, 10_000, &mut rng).unwrap();
        let d = frechet_gaussian(&a, &b).unwrap();
        assert!(d < 2.0 * floor, "{d} vs floor {floor}");
        assert!(floor > 0.0 && floor < 0.01);
    }

    #[test]
    fn knn_examples() {
        let spec = GmmSpec::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let real = sample_class(&spec, 3, 1000, &mut rng).unwrap();
        assert_eq!(precision_recall_knn(&real, &real, 3).unwrap(), (1.0, 1.0));
        let far: Vec<f64> = real.iter().map(|v| v + 100.0).collect();
        assert_eq!(precision_recall_knn(&real, &far, 3).unwrap().0, 0.0);
        let fake = sample_class(&spec, 3, 1000, &mut rng).unwrap();
        let (p, r) = precision_recall_knn(&real, &fake, 3).unwrap();
        assert!(p >= 0.9 && r >= 0.9, "{p} {r}");
        assert!(precision_recall_knn(&real, &fake, 0).is_err());
        assert!(precision_recall_knn(&real, &fake, 1000).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ua_and_kept_fraction_sum_to_one(pts in proptest::collection::vec(-5.0f64..5.0, 2..60)) {
            let spec = GmmSpec::default_benchmark();
            let pts = &pts[..pts.len() / 2 * 2];
            let u = unlearning_accuracy(&spec, pts, roles()).unwrap();
            let kept = pts.chunks(2).filter(|p| spec.bayes_classify(&[p[0], p[1]]).0 == 0).count();
            let n = pts.len() / 2;
            prop_assert_eq!(u.ua + kept as f64 / n as f64, 1.0);
            prop_assert!(u.override_rate <= u.ua);
        }

        #[test]
        fn frechet_is_symmetric(a in proptest::collection::vec(-3.0f64..3.0, 8..40), b in proptest::collection::vec(-3.0f64..3.0, 8..40)) {
            let (a, b) = (&a[..a.len() / 2 * 2], &b[..b.len() / 2 * 2]);
            let ab = frechet_gaussian(a, b).unwrap();
            let ba = frechet_gaussian(b, a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        }

        #[test]
        fn knn_is_translation_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 20..60),
            b in proptest::collection::vec(-3.0f64..3.0, 20..60),
            dx in -10.0f64..10.0,
            dy in -10.0f64..10.0,
        ) {
            let (a, b) = (&a[..a.len() / 2 * 2], &b[..b.len() / 2 * 2]);
            let shift = |v: &[f64]| v.chunks(2).flat_map(|p| [p[0] + dx, p[1] + dy]).collect::<Vec<_>>();
            let base = precision_recall_knn(a, b, 3).unwrap();
            let moved = precision_recall_knn(&shift(a), &shift(b), 3).unwrap();
            // translation can flip ties on the ball boundary by rounding only
            prop_assert!((base.0 - moved.0).abs() <= 2.0 / (b.len() / 2) as f64);
            prop_assert!((base.1 - moved.1).abs() <= 2.0 / (a.len() / 2) as f64);
        }
    }
}
