//! Discrete variance-preserving forward diffusion.
//!
//! `z_t = a_t x + σ_t ε` with `a_t = √ᾱ_t`, `ᾱ_t = ∏_{s≤t}(1 − β_s)` and
//! `σ_t = √(1 − ᾱ_t)`, plus the Tweedie conversions between a score and the
//! posterior mean it implies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub sigma_init: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            t_min: 38,
            t_max: 712,
            sigma_init: 2.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    a: Vec<f64>,
    sigma: Vec<f64>,
    t_init: usize,
}

impl Schedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            t_min,
            t_max,
            sigma_init,
        } = config;
        if steps < 2 {
            return Err(contract(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(contract(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if !(t_min < t_max && t_max < steps) {
            return Err(contract(format!(
                "need 0 <= t_min < t_max < {steps}, got t_min={t_min}, t_max={t_max}"
            )));
        }
        if !(sigma_init > 0.0 && sigma_init.is_finite()) {
            return Err(contract(format!("sigma_init must be positive, got {sigma_init}")));
        }

        let beta: Vec<f64> = (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
            .collect();
        let alpha_bar: Vec<f64> = beta
            .iter()
            .scan(1.0, |prod, b| {
                *prod *= 1.0 - b;
                Some(*prod)
            })
            .collect();
        let a: Vec<f64> = alpha_bar.iter().map(|ab| ab.sqrt()).collect();
        let sigma: Vec<f64> = alpha_bar.iter().map(|ab| (1.0 - ab).sqrt()).collect();

        // noise level the generator input is scaled to; see `t_init`
        let t_init = (t_min + 1..=t_max)
            .min_by(|&i, &j| {
                let di = (sigma[i] / a[i] - sigma_init).abs();
                let dj = (sigma[j] / a[j] - sigma_init).abs();
                di.total_cmp(&dj)
            })
            .expect("non-empty window");

        Ok(Self {
            config,
            beta,
            alpha_bar,
            a,
            sigma,
            t_init,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// `a_t`.
    pub fn a(&self, t: usize) -> f64 {
        self.a[t]
    }

    /// `σ_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// `a_t²`, stored exactly as the cumulative product.
    pub fn a_sq(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `σ_t² = 1 − a_t²`.
    pub fn sigma_sq(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t]
    }

    /// `a_t² / σ_t⁴`, the factor converting x-space squared error into score space.
    pub fn snr_weight(&self, t: usize) -> f64 {
        let s2 = self.sigma_sq(t);
        self.a_sq(t) / (s2 * s2)
    }

    pub fn t_min(&self) -> usize {
        self.config.t_min
    }

    pub fn t_max(&self) -> usize {
        self.config.t_max
    }

    pub fn sigma_init(&self) -> f64 {
        self.config.sigma_init
    }

    /// Index in `(t_min, t_max]` minimizing `|σ_t / a_t − σ_init|`.
    pub fn t_init(&self) -> usize {
        self.t_init
    }

    /// `z_t = a_t x + σ_t ε`, row-agnostic.
    pub fn perturb(&self, x: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), eps.len());
        let (a, s) = (self.a[t], self.sigma[t]);
        x.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
    }

    /// `(z + σ_t² s) / a_t`.
    pub fn score_to_mean(&self, z: &[f64], score: &[f64], t: usize) -> Vec<f64> {
        let (a, s2) = (self.a[t], self.sigma_sq(t));
        z.iter().zip(score).map(|(z, s)| (z + s2 * s) / a).collect()
    }

    /// `(a_t x̂ − z) / σ_t²`.
    pub fn mean_to_score(&self, z: &[f64], x_hat: &[f64], t: usize) -> Vec<f64> {
        let (a, s2) = (self.a[t], self.sigma_sq(t));
        z.iter().zip(x_hat).map(|(z, x)| (a * x - z) / s2).collect()
    }

    /// Uniform draw from `[t_min, t_max]` inclusive.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        uniform_timestep(rng, self.config.t_min, self.config.t_max)
    }

    /// Sinusoidal features of `t / T`: `dim / 2` sines then `dim / 2` cosines.
    pub fn time_features(&self, t: usize, dim: usize) -> Vec<f64> {
        time_features(t as f64 / self.steps() as f64, dim)
    }
}

/// Uniform integer in `[lo, hi]` inclusive.
pub fn uniform_timestep<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Sinusoidal embedding of a normalized time `u ∈ [0, 1]`.
pub fn time_features(u: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            let frac = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            // frequencies 1 .. 1000 on a log scale
            (frac * 1000f64.ln()).exp()
        })
        .collect();
    out.extend(freqs.iter().map(|f| (u * f).sin()));
    out.extend(freqs.iter().map(|f| (u * f).cos()));
    out.resize(dim, 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sched() -> Schedule {
        Schedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn first_coefficient() {
        let s = sched();
        assert!((s.a(0) - (1.0f64 - 1e-4).sqrt()).abs() < 1e-15);
        assert!((s.a(0) - 0.99995).abs() < 1e-8);
    }

    #[test]
    fn variance_preserving_exact() {
        let s = sched();
        for t in 0..s.steps() {
            assert_eq!(s.a_sq(t) + s.sigma_sq(t), 1.0, "t={t}");
            assert!((s.a(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn monotone_coefficients() {
        let s = sched();
        for t in 1..s.steps() {
            assert!(s.a(t) < s.a(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
    }

    #[test]
    fn table_window_defaults() {
        let s = sched();
        assert_eq!((s.t_min(), s.t_max()), (38, 712));
        assert_eq!(s.sigma_init(), 2.5);
        let ti = s.t_init();
        assert!(s.t_min() < ti && ti <= s.t_max());
        let ratio = |t: usize| s.sigma(t) / s.a(t);
        assert!((ratio(ti) - 2.5).abs() <= (ratio(ti - 1) - 2.5).abs());
        assert!((ratio(ti) - 2.5).abs() <= (ratio(ti + 1) - 2.5).abs());
    }

    #[test]
    fn rejects_bad_windows() {
        let bad = |f: fn(&mut ScheduleConfig)| {
            let mut c = ScheduleConfig::default();
            f(&mut c);
            Schedule::new(c).is_err()
        };
        assert!(bad(|c| c.t_min = c.t_max));
        assert!(bad(|c| c.t_max = c.steps));
        assert!(bad(|c| c.beta_start = 0.0));
        assert!(bad(|c| c.beta_end = 1.0));
        assert!(bad(|c| c.beta_start = 0.05));
        assert!(bad(|c| c.sigma_init = -1.0));
    }

    #[test]
    fn perturb_examples() {
        let s = sched();
        assert_eq!(s.perturb(&[1.0, -2.0], 100, &[0.0, 0.0]), vec![s.a(100), -2.0 * s.a(100)]);
        let z = s.perturb(&[1.0, 0.0], 0, &[0.0, 1.0]);
        assert!((z[0] - 0.99995).abs() < 1e-8);
        assert!((z[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn perturb_covariance_matches_sigma_sq() {
        let s = sched();
        let t = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let e: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let z = s.perturb(&[0.0, 0.0], t, &e);
            sxx += z[0] * z[0];
            syy += z[1] * z[1];
            sxy += z[0] * z[1];
        }
        let v = s.sigma_sq(t);
        let n = n as f64;
        assert!((sxx / n / v - 1.0).abs() < 0.03);
        assert!((syy / n / v - 1.0).abs() < 0.03);
        assert!((sxy / n / v).abs() < 0.03);
    }

    #[test]
    fn tweedie_conversions_invert() {
        let s = sched();
        for &t in &[0usize, 38, 400, 712, 999] {
            let z = [0.3, -1.7];
            let score = [2.0, -0.25];
            let back = s.mean_to_score(&z, &s.score_to_mean(&z, &score, t), t);
            for (b, o) in back.iter().zip(&score) {
                assert!((b - o).abs() < 1e-12 * o.abs().max(1.0), "t={t}");
            }
            assert_eq!(s.score_to_mean(&z, &[0.0, 0.0], t), vec![z[0] / s.a(t), z[1] / s.a(t)]);
            let zero = s.mean_to_score(&z, &[z[0] / s.a(t), z[1] / s.a(t)], t);
            assert!(zero.iter().all(|v| v.abs() < 1e-12));
            let m = s.mean_to_score(&z, &[0.0, 0.0], t);
            assert_eq!(m, vec![-z[0] / s.sigma_sq(t), -z[1] / s.sigma_sq(t)]);
        }
    }

    #[test]
    fn timestep_window() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let width = s.t_max() - s.t_min() + 1;
        let n = 1_000_000;
        let mut counts = vec![0usize; width];
        for _ in 0..n {
            let t = s.sample_timestep(&mut rng);
            assert!((38..=712).contains(&t));
            counts[t - s.t_min()] += 1;
        }
        let p = 1.0 / width as f64;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, c) in counts.iter().enumerate() {
            assert!((*c as f64 - mean).abs() < 5.0 * sd, "bin {i}: {c}");
        }
    }

    #[test]
    fn degenerate_window_always_t_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| uniform_timestep(&mut rng, 5, 5) == 5));
    }

    #[test]
    fn time_features_bounded() {
        let f = time_features(0.37, 16);
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|v| v.abs() <= 1.0));
    }
}
