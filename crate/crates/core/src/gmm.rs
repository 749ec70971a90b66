//! Class-conditional 2D Gaussian mixtures with closed-form diffused quantities.
//!
//! Under `z = a x + σ ε` a component `N(μ, Σ)` becomes `N(a μ, a² Σ + σ² I)`,
//! so every diffused class density is again a mixture and its score,
//! posterior mean and the Jacobian of that mean are available exactly. All
//! mixture weights are handled in log space.
//!
//! This module exposes density queries only. Drawing samples from a mixture
//! lives with the evaluation code, outside the training path.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::mat2::{self, Mat2, Vec2};
use crate::schedule::Schedule;

/// Noise level `(a, σ²)` of the forward process. `clean()` is `t = 0` without noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Level {
    pub a: f64,
    pub sigma_sq: f64,
}

impl Level {
    pub fn clean() -> Self {
        Self { a: 1.0, sigma_sq: 0.0 }
    }

    pub fn at(schedule: &Schedule, t: usize) -> Self {
        Self {
            a: schedule.a(t),
            sigma_sq: schedule.sigma_sq(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec2,
    /// Row-major 2×2 covariance.
    pub cov: Mat2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMixture {
    pub components: Vec<Component>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub priors: Vec<f64>,
    pub classes: Vec<ClassMixture>,
}

/// One diffused component prepared for queries.
#[derive(Clone, Copy, Debug)]
struct Diffused {
    log_weight: f64,
    mean: Vec2,
    prec: Mat2,
    log_norm: f64,
    /// `a Σ S⁻¹`, the gain of the component posterior mean.
    gain: Mat2,
    src_mean: Vec2,
}

impl GmmSpec {
    /// Four unit-weight classes at `(±2, ±2)` with covariance `0.25 I` and
    /// uniform priors. Class 0 sits at `(2, 2)`, then counter-clockwise.
    pub fn default_benchmark() -> Self {
        let means = [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]];
        Self {
            priors: vec![0.25; 4],
            classes: means
                .iter()
                .map(|&mean| ClassMixture {
                    components: vec![Component {
                        weight: 1.0,
                        mean,
                        cov: [0.25, 0.0, 0.0, 0.25],
                    }],
                })
                .collect(),
        }
    }

    /// Single class, single isotropic Gaussian.
    pub fn isotropic(mean: Vec2, var: f64) -> Self {
        Self {
            priors: vec![1.0],
            classes: vec![ClassMixture {
                components: vec![Component {
                    weight: 1.0,
                    mean,
                    cov: [var, 0.0, 0.0, var],
                }],
            }],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(contract("mixture spec has no classes"));
        }
        if self.priors.len() != self.classes.len() {
            return Err(contract(format!(
                "{} priors for {} classes",
                self.priors.len(),
                self.classes.len()
            )));
        }
        check_simplex("class priors", self.priors.iter().copied())?;
        for (c, class) in self.classes.iter().enumerate() {
            if class.components.is_empty() {
                return Err(contract(format!("class {c} has no components")));
            }
            check_simplex(
                &format!("class {c} component weights"),
                class.components.iter().map(|k| k.weight),
            )?;
            for (k, comp) in class.components.iter().enumerate() {
                if !mat2::is_spd(&comp.cov) {
                    return Err(contract(format!(
                        "class {c} component {k} covariance {:?} is not symmetric positive-definite",
                        comp.cov
                    )));
                }
                if comp.mean.iter().any(|v| !v.is_finite()) {
                    return Err(contract(format!("class {c} component {k} mean is not finite")));
                }
            }
        }
        Ok(())
    }

    fn check_class(&self, c: usize) {
        assert!(c < self.classes.len(), "class {c} out of range");
    }

    fn diffused(&self, c: usize, level: Level) -> Vec<Diffused> {
        self.check_class(c);
        let Level { a, sigma_sq } = level;
        self.classes[c]
            .components
            .iter()
            .map(|comp| {
                let cov = mat2::add(&mat2::scale(&comp.cov, a * a), &mat2::scale(&mat2::IDENTITY, sigma_sq));
                let prec = mat2::inverse(&cov).expect("diffused covariance is SPD");
                Diffused {
                    log_weight: comp.weight.ln(),
                    mean: [a * comp.mean[0], a * comp.mean[1]],
                    prec,
                    log_norm: -(2.0 * PI).ln() - 0.5 * mat2::det(&cov).ln(),
                    gain: mat2::scale(&mat2::mul(&comp.cov, &prec), a),
                    src_mean: comp.mean,
                }
            })
            .collect()
    }

    /// Per-component `(log w_k + log N(z; m_k, S_k), S_k⁻¹(z − m_k))`.
    fn terms(comps: &[Diffused], z: &Vec2) -> Vec<(f64, Vec2)> {
        comps
            .iter()
            .map(|d| {
                let r = [z[0] - d.mean[0], z[1] - d.mean[1]];
                let pr = mat2::apply(&d.prec, &r);
                let quad = r[0] * pr[0] + r[1] * pr[1];
                (d.log_weight + d.log_norm - 0.5 * quad, pr)
            })
            .collect()
    }

    fn responsibilities(terms: &[(f64, Vec2)]) -> (f64, Vec<f64>) {
        let lse = log_sum_exp(terms.iter().map(|t| t.0));
        (lse, terms.iter().map(|t| (t.0 - lse).exp()).collect())
    }

    /// `log p_t(z | c)`.
    pub fn log_density(&self, z: &Vec2, c: usize, level: Level) -> f64 {
        let comps = self.diffused(c, level);
        log_sum_exp(Self::terms(&comps, z).iter().map(|t| t.0))
    }

    /// `∇_z log p_t(z | c) = Σ_k r_k(z) · (−S_k⁻¹ (z − a μ_k))`.
    pub fn diffused_score(&self, z: &Vec2, c: usize, level: Level) -> Vec2 {
        let comps = self.diffused(c, level);
        let terms = Self::terms(&comps, z);
        let (_, r) = Self::responsibilities(&terms);
        let mut s = [0.0; 2];
        for (rk, (_, pr)) in r.iter().zip(&terms) {
            s[0] -= rk * pr[0];
            s[1] -= rk * pr[1];
        }
        s
    }

    /// `E[x | z_t = z, c]`, computed from the per-component Gaussian posteriors
    /// `μ_k + a Σ_k S_k⁻¹ (z − a μ_k)` rather than from the score.
    pub fn posterior_mean(&self, z: &Vec2, c: usize, level: Level) -> Vec2 {
        self.posterior_mean_with_jacobian(z, c, level).0
    }

    /// Posterior mean and its Jacobian `∂E[x|z]/∂z` (row-major).
    pub fn posterior_mean_with_jacobian(&self, z: &Vec2, c: usize, level: Level) -> (Vec2, Mat2) {
        let comps = self.diffused(c, level);
        let terms = Self::terms(&comps, z);
        let (_, r) = Self::responsibilities(&terms);
        let means: Vec<Vec2> = comps
            .iter()
            .map(|d| {
                let dz = [z[0] - d.mean[0], z[1] - d.mean[1]];
                let g = mat2::apply(&d.gain, &dz);
                [d.src_mean[0] + g[0], d.src_mean[1] + g[1]]
            })
            .collect();
        let mut mean = [0.0; 2];
        let mut score = [0.0; 2];
        for ((rk, m), (_, pr)) in r.iter().zip(&means).zip(&terms) {
            mean[0] += rk * m[0];
            mean[1] += rk * m[1];
            score[0] -= rk * pr[0];
            score[1] -= rk * pr[1];
        }
        // J = Σ_k r_k [a Σ_k S_k⁻¹ + m_k (g_k − s)ᵀ], g_k = −S_k⁻¹(z − a μ_k)
        let mut jac = [0.0; 4];
        for (((rk, m), (_, pr)), d) in r.iter().zip(&means).zip(&terms).zip(&comps) {
            let dg = [-pr[0] - score[0], -pr[1] - score[1]];
            let term = mat2::add(&d.gain, &mat2::outer(m, &dg));
            for (j, t) in jac.iter_mut().zip(term.iter()) {
                *j += rk * t;
            }
        }
        (mean, jac)
    }

    /// Posterior class probabilities of a clean point and the Bayes decision.
    /// Ties go to the lowest class index.
    pub fn bayes_classify(&self, x: &Vec2) -> (usize, Vec<f64>) {
        let logits: Vec<f64> = (0..self.num_classes())
            .map(|c| self.priors[c].ln() + self.log_density(x, c, Level::clean()))
            .collect();
        let lse = log_sum_exp(logits.iter().copied());
        let post: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        (best, post)
    }

    /// Mean of class `c` at `t = 0`.
    pub fn class_mean(&self, c: usize) -> Vec2 {
        self.check_class(c);
        self.classes[c].components.iter().fold([0.0; 2], |acc, k| {
            [acc[0] + k.weight * k.mean[0], acc[1] + k.weight * k.mean[1]]
        })
    }

    /// Covariance of class `c` at `t = 0` (law of total covariance).
    pub fn class_cov(&self, c: usize) -> Mat2 {
        let mu = self.class_mean(c);
        self.classes[c].components.iter().fold([0.0; 4], |acc, k| {
            let d = [k.mean[0] - mu[0], k.mean[1] - mu[1]];
            let within = mat2::add(&k.cov, &mat2::outer(&d, &d));
            mat2::add(&acc, &mat2::scale(&within, k.weight))
        })
    }
}

fn check_simplex(what: &str, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut sum = 0.0;
    for v in values {
        if !(v > 0.0 && v.is_finite()) {
            return Err(contract(format!("{what} must be positive, found {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(contract(format!("{what} sum to {sum}, not 1")));
    }
    Ok(())
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Which class to forget and which class it is overridden with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forgetting {
    pub forget: usize,
    pub override_with: usize,
}

/// Class roles for a run. Without a forgetting pair every class is "remaining"
/// and training is plain distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRoles {
    num_classes: usize,
    forgetting: Option<Forgetting>,
    remaining: Vec<usize>,
}

impl ClassRoles {
    pub fn new(num_classes: usize, forgetting: Option<Forgetting>) -> Result<Self> {
        if num_classes == 0 {
            return Err(contract("no classes"));
        }
        if let Some(f) = forgetting {
            if f.forget >= num_classes || f.override_with >= num_classes {
                return Err(contract(format!(
                    "forget/override classes ({}, {}) out of range for {num_classes} classes",
                    f.forget, f.override_with
                )));
            }
            if f.forget == f.override_with {
                return Err(contract("override class must differ from the forgotten class"));
            }
        }
        let remaining = (0..num_classes)
            .filter(|&c| forgetting.is_none_or(|f| f.forget != c))
            .collect();
        Ok(Self {
            num_classes,
            forgetting,
            remaining,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn forgetting(&self) -> Option<Forgetting> {
        self.forgetting
    }

    /// `C_r`: every class except the forgotten one.
    pub fn remaining(&self) -> &[usize] {
        &self.remaining
    }

    /// Sampling distribution over classes for the fake score network: uniform over all classes.
    pub fn score_sampling_weights(&self) -> Vec<f64> {
        vec![1.0 / self.num_classes as f64; self.num_classes]
    }
}
