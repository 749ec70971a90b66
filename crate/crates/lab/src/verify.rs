//! Numerical verification suite: the Fisher-divergence / inner-product
//! identity on analytic mixture pairs, the Tweedie identity of the analytic
//! teacher, and finite-difference checks of every graph loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use sfd_core::autodiff::{Graph, Tensor};
use sfd_core::gmm::{ClassMixture, Component, Forgetting, GmmSpec, Level};
use sfd_core::gradcheck::{finite_difference, max_relative_error, FD_STEP};
use sfd_core::losses::{dsm_loss, psi_update_loss, sfd_hybrid, sfd_inner_terms, sfd_naive_terms, theta_update_loss, LossWeights};
use sfd_core::models::{MlpConfig, TeacherBackend, WarmupConfig};
use sfd_core::schedule::Schedule;
use sfd_core::trainer::{Batch, Mode, SfdConfig, Trainer};

use crate::error::Result;
use crate::sampling::sample_class;

/// Monte-Carlo estimates of `E‖s_φ − s_θ‖²` and `E[a²/σ⁴ (x_φ − x_θ)ᵀ(x_φ − x)]`
/// over one sample stream.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IdentityCheck {
    pub t: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub se_lhs: f64,
    pub se_rhs: f64,
    /// Standard error of the paired difference.
    pub se_diff: f64,
}

impl IdentityCheck {
    /// `|lhs − rhs| ≤ 3 · se_diff` (the exact-zero case counts as a pass).
    pub fn passes(&self) -> bool {
        (self.lhs - self.rhs).abs() <= 3.0 * self.se_diff
    }
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn stderr(&self) -> f64 {
        let m = self.mean();
        ((self.sum_sq / self.n - m * m).max(0.0) * self.n / (self.n - 1.0) / self.n).sqrt()
    }
}

/// Draws `x` from `generator` class `c2`, perturbs to level `t`, and compares
/// the two forms with the teacher queried at class `c1`.
#[allow(clippy::too_many_arguments)]
pub fn verify_inner_product<R: Rng + ?Sized>(
    teacher: &GmmSpec,
    c1: usize,
    generator: &GmmSpec,
    c2: usize,
    schedule: &Schedule,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<IdentityCheck> {
    let level = Level::at(schedule, t);
    let snr = schedule.snr_weight(t);
    let (mut l, mut r, mut d) = (Moments::default(), Moments::default(), Moments::default());
    let chunk = 10_000;
    let mut done = 0;
    while done < n {
        let m = chunk.min(n - done);
        let x = sample_class(generator, c2, m, rng)?;
        let eps: Vec<f64> = (0..2 * m).map(|_| StandardNormal.sample(rng)).collect();
        let z = schedule.perturb(&x, t, &eps);
        let (mut s_phi, mut s_theta, mut x_phi, mut x_theta) =
            (Vec::with_capacity(2 * m), Vec::with_capacity(2 * m), Vec::with_capacity(2 * m), Vec::with_capacity(2 * m));
        for p in z.chunks(2) {
            let p = [p[0], p[1]];
            s_phi.extend(teacher.diffused_score(&p, c1, level));
            s_theta.extend(generator.diffused_score(&p, c2, level));
            x_phi.extend(teacher.posterior_mean(&p, c1, level));
            x_theta.extend(generator.posterior_mean(&p, c2, level));
        }
        let lhs = sfd_naive_terms(&s_phi, &s_theta, &vec![1.0; m]);
        let rhs = sfd_inner_terms(&x_phi, &x_theta, &x, &vec![snr; m]);
        for (a, b) in lhs.iter().zip(&rhs) {
            l.push(*a);
            r.push(*b);
            d.push(a - b);
        }
        done += m;
    }
    Ok(IdentityCheck {
        t,
        lhs: l.mean(),
        rhs: r.mean(),
        se_lhs: l.stderr(),
        se_rhs: r.stderr(),
        se_diff: d.stderr(),
    })
}

/// Single-class mixture with 1–3 components, means in `[-2, 2]²`, covariance
/// eigenvalues in `[0.2, 1.5]`.
pub fn random_class_spec<R: Rng + ?Sized>(rng: &mut R) -> GmmSpec {
    let k = rng.random_range(1..=3);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let components = raw
        .iter()
        .map(|w| {
            let (l1, l2) = (rng.random_range(0.2..1.5), rng.random_range(0.2..1.5));
            let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (c, s) = (th.cos(), th.sin());
            Component {
                weight: w / total,
                mean: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                cov: [c * c * l1 + s * s * l2, c * s * (l1 - l2), c * s * (l1 - l2), s * s * l1 + c * c * l2],
            }
        })
        .collect();
    GmmSpec {
        priors: vec![1.0],
        classes: vec![ClassMixture { components }],
    }
}

/// `pairs` random teacher/generator pairs at `t_min`, the midpoint and `t_max`.
pub fn inner_product_suite(schedule: &Schedule, pairs: usize, n: usize, seed: u64) -> Result<Vec<IdentityCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts = [schedule.t_min(), (schedule.t_min() + schedule.t_max()) / 2, schedule.t_max()];
    let mut out = Vec::new();
    for _ in 0..pairs {
        let teacher = random_class_spec(&mut rng);
        let generator = random_class_spec(&mut rng);
        for &t in &ts {
            out.push(verify_inner_product(&teacher, 0, &generator, 0, schedule, t, n, &mut rng)?);
        }
    }
    Ok(out)
}

/// Largest `|x̂ − (z + σ² s)/a|` over random probes with `|z_i| ≤ radius`.
pub fn verify_tweedie(spec: &GmmSpec, schedule: &Schedule, probes: usize, radius: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let z = [rng.random_range(-radius..radius), rng.random_range(-radius..radius)];
        let c = rng.random_range(0..spec.num_classes());
        let t = rng.random_range(0..schedule.steps());
        let level = Level::at(schedule, t);
        let direct = spec.posterior_mean(&z, c, level);
        let via_score = schedule.score_to_mean(&z, &spec.diffused_score(&z, c, level), t);
        worst = worst.max((direct[0] - via_score[0]).abs()).max((direct[1] - via_score[1]).abs());
    }
    worst
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: &'static str,
    pub rel_err: f64,
    pub params: usize,
}

pub const GRAD_TOLERANCE: f64 = 1e-5;

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect()
}

fn check(name: &'static str, x0: &[f64], f: impl Fn(&[f64], bool) -> sfd_core::Result<(f64, Vec<f64>)>) -> Result<GradCheck> {
    let (_, analytic) = f(x0, true)?;
    let numeric = finite_difference(|x| Ok(f(x, false)?.0), x0, FD_STEP)?;
    Ok(GradCheck {
        name,
        rel_err: max_relative_error(&analytic, &numeric),
        params: x0.len(),
    })
}

/// Finite-difference checks of every graph loss on a randomized small network
/// wired exactly as in training. Stop-gradient weights are frozen at the base point.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GmmSpec::default_benchmark();
    let teacher = TeacherBackend::Analytic(spec);
    let roles = Forgetting { forget: 0, override_with: 1 };
    let mut config = SfdConfig {
        mode: Mode::Joint,
        forgetting: Some(roles),
        model: MlpConfig {
            hidden: vec![6, 5],
            class_dim: 3,
            time_dim: 4,
        },
        warmup: WarmupConfig::default(),
        ..SfdConfig::default()
    };
    config.train.batch_size = 5;
    let trainer = Trainer::new(config.clone(), &teacher)?;
    let kl_trainer = Trainer::new(SfdConfig { mode: Mode::Kl, ..config.clone() }, &teacher)?;
    let net = trainer.generator().net.clone();
    let theta = random_vec(&mut rng, net.num_params(), 0.5);
    let psi = random_vec(&mut rng, net.num_params(), 0.5);
    let b_r: Batch = trainer.draw(&mut rng, 2);
    let b_f: Batch = trainer.draw(&mut rng, roles.forget);
    let weights = LossWeights { mu_psi: 0.3, mu_theta: 0.7, ..LossWeights::joint() };
    let alpha = weights.alpha;
    let mut out = Vec::new();

    // weights of the hybrid terms at the base point
    let frozen = |tr: &Trainer, b: &Batch, class: usize| -> sfd_core::Result<Vec<f64>> {
        let g = Graph::new();
        let bound = net.bind(&g, &theta, false)?;
        Ok(tr.theta_term(&g, &bound, &psi, b, class, alpha, None)?.1)
    };
    let w_r = frozen(&trainer, &b_r, 2)?;
    let w_f = frozen(&trainer, &b_f, roles.override_with)?;
    let kl_r = frozen(&kl_trainer, &b_r, 2)?;

    out.push(check("dsm (fake score params)", &psi, |p, grad| {
        let g = Graph::new();
        let bound = net.bind(&g, p, grad)?;
        let (pred, target) = trainer.psi_term(&g, &theta, &bound, &b_r)?;
        let loss = dsm_loss(&g, pred, target, &[1.0; 5])?;
        finish(&g, loss, grad, |gr| net.flat_grad(&bound, gr))
    })?);

    out.push(check("psi update (both terms)", &psi, |p, grad| {
        let g = Graph::new();
        let bound = net.bind(&g, p, grad)?;
        let r = trainer.psi_term(&g, &theta, &bound, &b_r)?;
        let f = trainer.psi_term(&g, &theta, &bound, &b_f)?;
        let loss = psi_update_loss(&g, r, Some(f), &weights)?;
        finish(&g, loss, grad, |gr| net.flat_grad(&bound, gr))
    })?);

    let x_phi = random_vec(&mut rng, 10, 1.0);
    let x_psi = random_vec(&mut rng, 10, 1.0);
    let x = random_vec(&mut rng, 10, 1.0);
    let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..2.0)).collect();
    let inputs: Vec<f64> = x_phi.iter().chain(&x_psi).chain(&x).copied().collect();
    out.push(check("hybrid (direct inputs)", &inputs, |v, grad| {
        let g = Graph::new();
        let part = |i: usize| g.leaf(Tensor::matrix(5, 2, v[10 * i..10 * i + 10].to_vec()).unwrap(), grad);
        let (a, b, c) = (part(0)?, part(1)?, part(2)?);
        let loss = sfd_hybrid(&g, a, b, c, alpha, &w)?;
        finish(&g, loss, grad, |gr| {
            Ok([a, b, c].iter().flat_map(|v| gr.get(*v).unwrap().to_vec()).collect())
        })
    })?);

    out.push(check("hybrid distillation term (generator params)", &theta, |p, grad| {
        let g = Graph::new();
        let bound = net.bind(&g, p, grad)?;
        let (loss, _) = trainer.theta_term(&g, &bound, &psi, &b_r, 2, alpha, Some(&w_r))?;
        finish(&g, loss, grad, |gr| net.flat_grad(&bound, gr))
    })?);

    out.push(check("theta update (distill + forget)", &theta, |p, grad| {
        let g = Graph::new();
        let bound = net.bind(&g, p, grad)?;
        let (d, _) = trainer.theta_term(&g, &bound, &psi, &b_r, 2, alpha, Some(&w_r))?;
        let (f, _) = trainer.theta_term(&g, &bound, &psi, &b_f, roles.override_with, alpha, Some(&w_f))?;
        let loss = theta_update_loss(&g, d, Some(f), &weights)?;
        finish(&g, loss, grad, |gr| net.flat_grad(&bound, gr))
    })?);

    // KL: the analytic gradient is (1/n) Σ u_i ∂x_i/∂θ with the upstream u
    // rebuilt here from the scores at the base point and held fixed
    let sched = trainer.schedule();
    let x0 = trainer.generator().generate(&theta, sched, &b_r.noise, &b_r.classes)?;
    let z: Vec<f64> = (0..5)
        .flat_map(|i| sched.perturb(&x0[2 * i..2 * i + 2], b_r.times[i], &b_r.eps[2 * i..2 * i + 2]))
        .collect();
    let m_phi = teacher.mean(sched, &z, &[2; 5], &b_r.times)?;
    let m_psi = trainer.fake_score().mean(&psi, sched, &z, &b_r.classes, &b_r.times)?;
    let upstream: Vec<f64> = (0..10)
        .map(|j| {
            let t = b_r.times[j / 2];
            let (s_psi, s_phi) = ((sched.a(t) * m_psi[j] - z[j]) / sched.sigma_sq(t), (sched.a(t) * m_phi[j] - z[j]) / sched.sigma_sq(t));
            kl_r[j / 2] * (s_psi - s_phi)
        })
        .collect();
    let analytic = {
        let g = Graph::new();
        let bound = net.bind(&g, &theta, true)?;
        let (loss, _) = kl_trainer.theta_term(&g, &bound, &psi, &b_r, 2, alpha, Some(&kl_r))?;
        net.flat_grad(&bound, &g.backward(loss)?)?
    };
    let numeric = finite_difference(
        |p| {
            let x = trainer.generator().generate(p, sched, &b_r.noise, &b_r.classes)?;
            Ok(x.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>() / 5.0)
        },
        &theta,
        FD_STEP,
    )?;
    out.push(GradCheck {
        name: "kl straight-through (generator params)",
        rel_err: max_relative_error(&analytic, &numeric),
        params: theta.len(),
    });
    Ok(out)
}

fn finish(
    g: &Graph,
    loss: sfd_core::autodiff::Var,
    grad: bool,
    extract: impl FnOnce(&sfd_core::autodiff::Gradients) -> sfd_core::Result<Vec<f64>>,
) -> sfd_core::Result<(f64, Vec<f64>)> {
    let v = g.scalar(loss);
    if !grad {
        return Ok((v, Vec::new()));
    }
    let gr = g.backward(loss)?;
    Ok((v, extract(&gr)?))
}
