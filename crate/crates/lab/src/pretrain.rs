//! Denoising score-matching pretraining of an MLP teacher on samples of an
//! analytic mixture. This path consumes teacher samples and is kept apart
//! from SFD training, which only ever sees the resulting network.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sfd_core::autodiff::{Adam, AdamConfig, Graph, Tensor};
use sfd_core::checkpoint;
use sfd_core::gmm::{GmmSpec, Level};
use sfd_core::losses::dsm_loss;
use sfd_core::models::{CondMlp, MlpConfig, TeacherBackend, POINT_DIM};
use sfd_core::schedule::{Schedule, ScheduleConfig};

use crate::error::{contract, Result};
use crate::sampling::sample_labelled;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, decayed linearly to zero.
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 256,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Contents of a pretrained-teacher file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherFile {
    pub model: MlpConfig,
    pub num_classes: usize,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub final_loss: f64,
    pub params: Vec<f64>,
}

impl TeacherFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(self, path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(checkpoint::load(path)?)
    }

    pub fn backend(&self) -> Result<TeacherBackend> {
        Ok(TeacherBackend::Pretrained {
            net: CondMlp::new(self.model.clone(), self.num_classes)?,
            params: self.params.clone(),
        })
    }
}

/// Trains `x_φ(z, c, t)` by unit-weight DSM over the training window
/// `[t_min, t_max]`. Aborts on a non-finite loss.
pub fn pretrain_dsm(spec: &GmmSpec, schedule: &Schedule, model: &MlpConfig, cfg: &PretrainConfig) -> Result<TeacherFile> {
    spec.validate()?;
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(contract(format!("invalid pretraining settings {cfg:?}")));
    }
    let net = CondMlp::new(model.clone(), spec.num_classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.init_params(&mut rng);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        },
        params.len(),
    );
    let b = cfg.batch_size;
    let unit = vec![1.0; b];
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let (x, classes) = sample_labelled(spec, b, &mut rng)?;
        let times: Vec<usize> = (0..b).map(|_| schedule.sample_timestep(&mut rng)).collect();
        let eps: Vec<f64> = (0..2 * b).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z: Vec<f64> = (0..b)
            .flat_map(|i| schedule.perturb(&x[2 * i..2 * i + 2], times[i], &eps[2 * i..2 * i + 2]))
            .collect();
        let g = Graph::at_step(step as u64);
        let bound = net.bind(&g, &params, true)?;
        let zv = g.constant(Tensor::matrix(b, POINT_DIM, z)?)?;
        let tf = g.constant(net.time_matrix(schedule, &times)?)?;
        let pred = net.forward(&g, &bound, zv, &classes, tf)?;
        let target = g.constant(Tensor::matrix(b, POINT_DIM, x)?)?;
        let loss = dsm_loss(&g, pred, target, &unit)?;
        final_loss = g.scalar(loss);
        let grads = g.backward(loss)?;
        let grad = net.flat_grad(&bound, &grads)?;
        opt.config.lr = cfg.lr * (1.0 - step as f64 / cfg.steps as f64);
        opt.step(&mut params, &grad)?;
    }
    Ok(TeacherFile {
        model: model.clone(),
        num_classes: spec.num_classes(),
        schedule: *schedule.config(),
        pretrain: cfg.clone(),
        final_loss,
        params,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProbeError {
    /// Mean `‖x_net − x̂‖` over probes.
    pub mean_l2: f64,
    pub max_l2: f64,
    /// Mean `‖s_net − s‖` over probes.
    pub score_mean_l2: f64,
}

/// Compares a network's posterior mean with the analytic one at `probes`
/// points `z_t` drawn from the diffused teacher, `t` uniform over the middle
/// third of the training window.
pub fn probe_error(
    spec: &GmmSpec,
    schedule: &Schedule,
    net: &CondMlp,
    params: &[f64],
    probes: usize,
    seed: u64,
) -> Result<ProbeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = schedule.t_max() - schedule.t_min();
    let (lo, hi) = (schedule.t_min() + span / 3, schedule.t_min() + 2 * span / 3);
    let (x, classes) = sample_labelled(spec, probes, &mut rng)?;
    let times: Vec<usize> = (0..probes).map(|_| rng.random_range(lo..=hi)).collect();
    let eps: Vec<f64> = (0..2 * probes).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z: Vec<f64> = (0..probes)
        .flat_map(|i| schedule.perturb(&x[2 * i..2 * i + 2], times[i], &eps[2 * i..2 * i + 2]))
        .collect();
    let out = net.eval(params, schedule, &z, &classes, &times)?;
    let (mut sum, mut max, mut score_sum) = (0.0, 0.0f64, 0.0);
    for i in 0..probes {
        let zi = [z[2 * i], z[2 * i + 1]];
        let want = spec.posterior_mean(&zi, classes[i], Level::at(schedule, times[i]));
        let d = ((out[2 * i] - want[0]).powi(2) + (out[2 * i + 1] - want[1]).powi(2)).sqrt();
        sum += d;
        max = max.max(d);
        score_sum += d * schedule.a(times[i]) / schedule.sigma_sq(times[i]);
    }
    let n = probes as f64;
    Ok(ProbeError {
        mean_l2: sum / n,
        max_l2: max,
        score_mean_l2: score_sum / n,
    })
}
