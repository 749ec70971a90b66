//! Loss functions for score forgetting distillation.
//!
//! Every loss here is written in the x-prediction (posterior mean)
//! parameterization. Point batches are `n×2` graph nodes; per-row weights are
//! plain slices and therefore constants on the graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{contract, Result, SfdError};
use crate::schedule::Schedule;

/// Denominator floor for `ω_t`.
pub const OMEGA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_psi: f64,
    pub mu_psi: f64,
    pub lambda_theta: f64,
    pub mu_theta: f64,
    /// Hybrid coefficient `α` (`η` in the training loop).
    pub alpha: f64,
}

impl LossWeights {
    /// Joint-mode defaults.
    pub fn joint() -> Self {
        Self {
            lambda_psi: 1.0,
            mu_psi: 0.01,
            lambda_theta: 1.0,
            mu_theta: 0.01,
            alpha: 1.2,
        }
    }

    /// Second stage of two-stage training: every weight at 1.
    pub fn second_stage(alpha: f64) -> Self {
        Self {
            lambda_psi: 1.0,
            mu_psi: 1.0,
            lambda_theta: 1.0,
            mu_theta: 1.0,
            alpha,
        }
    }

    /// Pure distillation: forgetting terms switched off.
    pub fn distill_only(alpha: f64) -> Self {
        Self {
            lambda_psi: 1.0,
            mu_psi: 0.0,
            lambda_theta: 1.0,
            mu_theta: 0.0,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_psi, self.mu_psi, self.lambda_theta, self.mu_theta, self.alpha];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(contract(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::joint()
    }
}

fn rows(g: &Graph, v: Var) -> Result<usize> {
    match g.shape(v).as_slice() {
        [n, 2] => Ok(*n),
        other => Err(SfdError::ShapeMismatch {
            op: "point batch",
            lhs: other.to_vec(),
            rhs: vec![0, 2],
        }),
    }
}

fn col(g: &Graph, values: &[f64]) -> Result<Var> {
    g.constant(Tensor::matrix(values.len(), 1, values.to_vec())?)
}

/// Per-row weighted squared error, averaged over rows:
/// `(1/n) Σ_i w_i ‖pred_i − target_i‖²`.
///
/// With `w_i = γ_t a_t²/σ_t⁴` this is the denoising score-matching loss; the
/// trainer uses `γ_t = σ_t⁴/a_t²`, i.e. unit weights.
pub fn dsm_loss(g: &Graph, pred: Var, target: Var, row_weights: &[f64]) -> Result<Var> {
    let n = rows(g, pred)?;
    if row_weights.len() != n {
        return Err(contract(format!("{} weights for {n} rows", row_weights.len())));
    }
    let sq = g.row_sum(g.square(g.sub(pred, target)?)?)?;
    let w = col(g, row_weights)?;
    g.mean(g.mul(sq, w)?)
}

/// `ω_t = (σ_t⁴ / a_t²) · C / ‖x_φ − x‖₁`, the denominator floored at [`OMEGA_FLOOR`].
pub fn omega(schedule: &Schedule, t: usize, x_phi: &[f64], x: &[f64]) -> f64 {
    let c = x.len() as f64;
    let l1: f64 = x_phi.iter().zip(x).map(|(a, b)| (a - b).abs()).sum();
    c / l1.max(OMEGA_FLOOR) / schedule.snr_weight(t)
}

/// Row weights `ω_t a_t² / σ_t⁴` of the hybrid loss, computed from values only
/// so they carry no gradient.
pub fn hybrid_weights(schedule: &Schedule, times: &[usize], x_phi: &[f64], x: &[f64]) -> Vec<f64> {
    times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let r = 2 * i..2 * i + 2;
            omega(schedule, t, &x_phi[r.clone()], &x[r]) * schedule.snr_weight(t)
        })
        .collect()
}

/// `(1/n) Σ_i w_i ‖s_φ − s_ψ‖²` on score values.
pub fn sfd_naive(scores_phi: &[f64], scores_psi: &[f64], weights: &[f64]) -> f64 {
    let terms = sfd_naive_terms(scores_phi, scores_psi, weights);
    terms.iter().sum::<f64>() / terms.len() as f64
}

pub fn sfd_naive_terms(scores_phi: &[f64], scores_psi: &[f64], weights: &[f64]) -> Vec<f64> {
    scores_phi
        .chunks(2)
        .zip(scores_psi.chunks(2))
        .zip(weights)
        .map(|((a, b), w)| w * ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)))
        .collect()
}

/// Per-row `w_i (x_φ − x_ψ)ᵀ(x_φ − x)`: the inner-product form of the SFD loss
/// once `w_i` includes `a_t²/σ_t⁴`.
pub fn sfd_inner_terms(x_phi: &[f64], x_psi: &[f64], x: &[f64], weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let (p, q, o) = (&x_phi[2 * i..2 * i + 2], &x_psi[2 * i..2 * i + 2], &x[2 * i..2 * i + 2]);
            w * ((p[0] - q[0]) * (p[0] - o[0]) + (p[1] - q[1]) * (p[1] - o[1]))
        })
        .collect()
}

/// Hybrid SFD loss
/// `(1/n) Σ_i w_i [(1 − α)‖x_φ − x_ψ‖² + (x_φ − x_ψ)ᵀ(x_ψ − x)]`
/// with `w_i` from [`hybrid_weights`]. `x_phi` and `x_psi` must be evaluated
/// at the `z_t` produced from `x`.
pub fn sfd_hybrid(g: &Graph, x_phi: Var, x_psi: Var, x: Var, alpha: f64, row_weights: &[f64]) -> Result<Var> {
    let n = rows(g, x)?;
    if row_weights.len() != n {
        return Err(contract(format!("{} weights for {n} rows", row_weights.len())));
    }
    let d = g.sub(x_phi, x_psi)?;
    let sq = g.row_sum(g.square(d)?)?;
    let inner = g.row_sum(g.mul(d, g.sub(x_psi, x)?)?)?;
    let per_row = if alpha == 1.0 {
        inner
    } else {
        g.add(g.scale(sq, 1.0 - alpha)?, inner)?
    };
    let w = col(g, row_weights)?;
    g.mean(g.mul(per_row, w)?)
}

/// Fake-score update loss
/// `λ_ψ · L_dsm(remaining) + μ_ψ · L_dsm(forgetting)`.
/// Both terms use unit effective weights; targets are generator outputs and
/// must enter the graph as constants.
pub fn psi_update_loss(
    g: &Graph,
    remaining: (Var, Var),
    forgetting: Option<(Var, Var)>,
    weights: &LossWeights,
) -> Result<Var> {
    let unit = |v: Var| vec![1.0; rows(g, v).unwrap_or(0)];
    let (pr, tr) = remaining;
    let mut loss = g.scale(dsm_loss(g, pr, tr, &unit(pr))?, weights.lambda_psi)?;
    if let Some((pf, tf)) = forgetting {
        if weights.mu_psi != 0.0 {
            let f = dsm_loss(g, pf, tf, &unit(pf))?;
            loss = g.add(loss, g.scale(f, weights.mu_psi)?)?;
        }
    }
    Ok(loss)
}

/// Generator update loss `λ_θ · L̂(c_r, c_r) + μ_θ · L̂(c_o, c_f)`.
pub fn theta_update_loss(g: &Graph, distill: Var, forget: Option<Var>, weights: &LossWeights) -> Result<Var> {
    let mut loss = g.scale(distill, weights.lambda_theta)?;
    if let Some(f) = forget {
        if weights.mu_theta != 0.0 {
            loss = g.add(loss, g.scale(f, weights.mu_theta)?)?;
        }
    }
    Ok(loss)
}

/// Upstream gradient for `x` under the KL variant:
/// `w_i · (s_ψ(z, c₂) − s_φ(z, c₁))` per row, `w_i = ω_t a_t`.
pub fn sfd_kl_upstream(scores_psi: &[f64], scores_phi: &[f64], row_weights: &[f64]) -> Vec<f64> {
    scores_psi
        .chunks(2)
        .zip(scores_phi.chunks(2))
        .zip(row_weights)
        .flat_map(|((q, p), w)| [w * (q[0] - p[0]), w * (q[1] - p[1])])
        .collect()
}

/// KL-variant row weights `ω_t a_t`.
pub fn kl_weights(schedule: &Schedule, times: &[usize], x_phi: &[f64], x: &[f64]) -> Vec<f64> {
    times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let r = 2 * i..2 * i + 2;
            omega(schedule, t, &x_phi[r.clone()], &x[r]) * schedule.a(t)
        })
        .collect()
}

/// Surrogate `(1/n) Σ_i sg(u_i)ᵀ x_i` whose gradient with respect to `x` is the
/// injected upstream `u / n`.
pub fn straight_through(g: &Graph, x: Var, upstream: &[f64]) -> Result<Var> {
    let n = rows(g, x)?;
    let u = g.constant(Tensor::matrix(n, 2, upstream.to_vec())?)?;
    g.scale(g.dot(x, u)?, 1.0 / n as f64)
}
