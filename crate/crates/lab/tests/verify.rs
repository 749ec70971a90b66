use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfd_core::gmm::GmmSpec;
use sfd_core::schedule::{Schedule, ScheduleConfig};
use sfd_lab::verify::*;

fn schedule() -> Schedule {
    Schedule::new(ScheduleConfig::default()).unwrap()
}

#[test]
fn tweedie_holds_on_default_spec() {
    let dev = verify_tweedie(&GmmSpec::default_benchmark(), &schedule(), 1000, 6.0, 1);
    assert!(dev < 1e-10, "{dev}");
}

#[test]
fn tweedie_single_standard_normal_is_exact_to_rounding() {
    let spec = GmmSpec::isotropic([0.0, 0.0], 1.0);
    let s = schedule();
    let dev = verify_tweedie(&spec, &s, 500, 3.0, 2);
    // rounding of (z + σ² s) / a at the smallest a
    let ulp_scale = 16.0 * f64::EPSILON * 3.0 / s.a(s.steps() - 1);
    assert!(dev < ulp_scale, "{dev} vs {ulp_scale}");
}

#[test]
fn tweedie_deviation_does_not_grow_with_probe_magnitude() {
    let s = schedule();
    let spec = GmmSpec::default_benchmark();
    let near = verify_tweedie(&spec, &s, 500, 1.0, 3);
    let far = verify_tweedie(&spec, &s, 500, 10.0, 3);
    assert!(near < 1e-10 && far < 1e-10, "{near} {far}");
}

#[test]
fn inner_product_identical_scores_give_zero_on_both_sides() {
    let s = schedule();
    let spec = GmmSpec::isotropic([0.5, -1.0], 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = verify_inner_product(&spec, 0, &spec, 0, &s, 300, 20_000, &mut rng).unwrap();
    assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
    assert!(r.passes());
}

#[test]
fn inner_product_shifted_gaussian_pair() {
    // N(0, I) teacher against a N((1, 0), I) generator: both sides equal
    // a²/(a² + σ²)² · 1 = a² exactly, since the marginals are unit-variance
    let s = schedule();
    let teacher = GmmSpec::isotropic([0.0, 0.0], 1.0);
    let generator = GmmSpec::isotropic([1.0, 0.0], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in [s.t_min(), 375, s.t_max()] {
        let r = verify_inner_product(&teacher, 0, &generator, 0, &s, t, 200_000, &mut rng).unwrap();
        assert!(r.passes(), "{r:?}");
        assert!((r.lhs - s.a_sq(t)).abs() < 1e-9, "{r:?}");
        assert!((r.rhs - s.a_sq(t)).abs() < 4.0 * r.se_rhs, "{r:?}");
    }
}

#[test]
fn inner_product_holds_on_random_pairs() {
    let results = inner_product_suite(&schedule(), 3, 100_000, 11).unwrap();
    assert_eq!(results.len(), 9);
    for r in &results {
        assert!(r.passes(), "{r:?}");
        assert!(r.lhs > 0.0);
    }
}

#[test]
fn every_loss_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let checks = gradient_suite(seed).unwrap();
        assert_eq!(checks.len(), 6);
        for c in &checks {
            assert!(c.rel_err < GRAD_TOLERANCE, "seed {seed}: {c:?}");
        }
    }
}
