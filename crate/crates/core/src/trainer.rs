//! Alternating fake-score / generator optimization.
//!
//! One [`Trainer::train_step`] is one fake-score update followed by one
//! generator update, each on freshly drawn noise, classes and timesteps. The
//! trainer only talks to the teacher through [`ScoreOracle`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::error::{contract, Result, SfdError};
use crate::gmm::{ClassRoles, Forgetting};
use crate::losses::{
    hybrid_weights, kl_weights, psi_update_loss, sfd_hybrid, sfd_kl_upstream, straight_through, theta_update_loss,
    LossWeights,
};
use crate::models::{
    ema_update, init_networks, BoundParams, CondMlp, FakeScore, Generator, MlpConfig, ScoreOracle, TeacherBackend,
    WarmupConfig, WarmupReport, POINT_DIM,
};
use crate::schedule::{Schedule, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Distillation and forgetting from the start.
    Joint,
    /// Distill with forgetting off, then fine-tune with all weights at 1 and EMA off.
    TwoStage,
    /// Joint schedule with the KL-gradient generator update.
    Kl,
    /// Plain score distillation; no forgetting terms.
    DistillOnly,
}

impl std::str::FromStr for Mode {
    type Err = SfdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "two-stage" => Ok(Self::TwoStage),
            "kl" => Ok(Self::Kl),
            "distill-only" => Ok(Self::DistillOnly),
            other => Err(contract(format!(
                "unknown mode {other:?} (expected joint, two-stage, kl or distill-only)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::TwoStage => "two-stage",
            Self::Kl => "kl",
            Self::DistillOnly => "distill-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Budget for joint, kl and distill-only modes.
    pub steps: u64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub theta_opt: AdamConfig,
    pub psi_opt: AdamConfig,
    pub ema: bool,
    pub ema_decay: f64,
    pub seed: u64,
    pub eval_interval: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 20_000,
            stage1_steps: 20_000,
            stage2_steps: 5_000,
            theta_opt: AdamConfig::default(),
            psi_opt: AdamConfig::default(),
            ema: true,
            ema_decay: 0.999,
            seed: 0,
            eval_interval: 500,
            checkpoint_interval: 5_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfdConfig {
    pub mode: Mode,
    pub forgetting: Option<Forgetting>,
    pub loss: LossWeights,
    pub train: TrainSettings,
    pub schedule: ScheduleConfig,
    pub model: MlpConfig,
    pub warmup: WarmupConfig,
}

impl Default for SfdConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Joint,
            forgetting: Some(Forgetting {
                forget: 0,
                override_with: 1,
            }),
            loss: LossWeights::joint(),
            train: TrainSettings::default(),
            schedule: ScheduleConfig::default(),
            model: MlpConfig::default(),
            warmup: WarmupConfig::default(),
        }
    }
}

impl SfdConfig {
    /// Every problem with the configuration, not just the first.
    pub fn problems(&self, num_classes: usize) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = Schedule::new(self.schedule) {
            out.push(e.to_string());
        }
        if let Err(e) = self.loss.validate() {
            out.push(e.to_string());
        }
        if let Err(e) = CondMlp::new(self.model.clone(), num_classes.max(1)) {
            out.push(e.to_string());
        }
        if let Err(e) = ClassRoles::new(num_classes, self.forgetting) {
            out.push(e.to_string());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            out.push("train.batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            out.push(format!("train.ema_decay {} outside [0, 1)", t.ema_decay));
        }
        if t.eval_interval == 0 {
            out.push("train.eval_interval must be positive".into());
        }
        for (name, opt) in [("theta_opt", &t.theta_opt), ("psi_opt", &t.psi_opt)] {
            let ok = opt.lr > 0.0
                && opt.lr.is_finite()
                && (0.0..1.0).contains(&opt.beta1)
                && (0.0..1.0).contains(&opt.beta2)
                && opt.eps > 0.0;
            if !ok {
                out.push(format!("train.{name} has invalid Adam settings {opt:?}"));
            }
        }
        let w = &self.warmup;
        if w.batch_size == 0 || w.lr.is_nan() || w.lr <= 0.0 || w.reference_std.is_nan() || w.reference_std <= 0.0 {
            out.push(format!("invalid warmup settings {:?}", self.warmup));
        }
        match self.mode {
            Mode::TwoStage if t.stage1_steps == 0 || t.stage2_steps == 0 => {
                out.push("two-stage mode needs positive stage1_steps and stage2_steps".into())
            }
            Mode::Joint | Mode::Kl if self.forgetting.is_none() => {
                out.push(format!("{} mode needs a forgetting pair", self.mode))
            }
            Mode::TwoStage if self.forgetting.is_none() => out.push("two-stage mode needs a forgetting pair".into()),
            _ => {}
        }
        out
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let p = self.problems(num_classes);
        if p.is_empty() {
            Ok(())
        } else {
            Err(contract(p.join("; ")))
        }
    }

    pub fn total_steps(&self) -> u64 {
        match self.mode {
            Mode::TwoStage => self.train.stage1_steps + self.train.stage2_steps,
            _ => self.train.steps,
        }
    }

    /// Stage (1 or 2) that the update numbered `step` (0-based) belongs to.
    pub fn stage_of(&self, step: u64) -> u8 {
        match self.mode {
            Mode::TwoStage if step >= self.train.stage1_steps => 2,
            _ => 1,
        }
    }

    /// Loss weights in effect during `stage`.
    pub fn weights_for(&self, stage: u8) -> LossWeights {
        match (self.mode, stage) {
            (Mode::TwoStage, 1) | (Mode::DistillOnly, _) => LossWeights::distill_only(self.loss.alpha),
            (Mode::TwoStage, _) => LossWeights::second_stage(self.loss.alpha),
            _ => self.loss,
        }
    }

    pub fn ema_enabled(&self, stage: u8) -> bool {
        self.train.ema && !(self.mode == Mode::TwoStage && stage == 2)
    }

    /// Forgetting pair as used by training; distill-only mode ignores it.
    pub fn active_forgetting(&self) -> Option<Forgetting> {
        match self.mode {
            Mode::DistillOnly => None,
            _ => self.forgetting,
        }
    }
}

/// Everything that evolves during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub step: u64,
    pub stage: u8,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub ema: Vec<f64>,
    pub theta_opt: Adam,
    pub psi_opt: Adam,
    pub rng: ChaCha8Rng,
    pub warmup: WarmupReport,
}

impl RunState {
    /// Generator parameters used for evaluation: EMA when enabled for the
    /// current stage, the raw parameters otherwise.
    pub fn eval_params<'a>(&'a self, config: &SfdConfig) -> &'a [f64] {
        if config.ema_enabled(self.stage) {
            &self.ema
        } else {
            &self.theta
        }
    }
}

/// Loss values from one [`Trainer::train_step`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub psi: f64,
    pub psi_remaining: f64,
    pub psi_forget: f64,
    pub theta: f64,
    pub theta_distill: f64,
    pub theta_forget: f64,
}

impl StepLosses {
    fn accumulate(&mut self, o: &StepLosses) {
        self.psi += o.psi;
        self.psi_remaining += o.psi_remaining;
        self.psi_forget += o.psi_forget;
        self.theta += o.theta;
        self.theta_distill += o.theta_distill;
        self.theta_forget += o.theta_forget;
    }

    fn scaled(&self, s: f64) -> StepLosses {
        StepLosses {
            psi: self.psi * s,
            psi_remaining: self.psi_remaining * s,
            psi_forget: self.psi_forget * s,
            theta: self.theta * s,
            theta_distill: self.theta_distill * s,
            theta_forget: self.theta_forget * s,
        }
    }
}

/// Callbacks from [`Trainer::run`].
pub trait Observer {
    /// Called at step 0 (with `None`) and after every `eval_interval` steps or
    /// at the end of the budget, with the mean losses since the previous call.
    fn evaluate(&mut self, state: &RunState, losses: Option<&StepLosses>) -> Result<()>;

    /// Called every `checkpoint_interval` steps and at stage boundaries.
    fn checkpoint(&mut self, _state: &RunState) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl Observer for Silent {
    fn evaluate(&mut self, _: &RunState, _: Option<&StepLosses>) -> Result<()> {
        Ok(())
    }
}

/// Randomness for one single-class batch. Generated points and `z_t` are
/// recomputed from it: `x = g_θ(noise, c)`, `z_t = a_t x + σ_t eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub classes: Vec<usize>,
    /// `σ_init · n`, row-major `n×2`.
    pub noise: Vec<f64>,
    pub times: Vec<usize>,
    pub eps: Vec<f64>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect()
}

pub struct Trainer<'a> {
    config: SfdConfig,
    teacher: &'a dyn ScoreOracle,
    schedule: Schedule,
    roles: ClassRoles,
    generator: Generator,
    fake: FakeScore,
}

/// Fresh state: seeded RNG, network initialization and warmup.
pub fn initial_state(config: &SfdConfig, teacher: &TeacherBackend) -> Result<RunState> {
    config.validate(teacher.num_classes())?;
    let schedule = Schedule::new(config.schedule)?;
    let net = CondMlp::new(config.model.clone(), teacher.num_classes())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let (theta, psi, warmup) = init_networks(teacher, &net, &schedule, &config.warmup, &mut rng)?;
    Ok(RunState {
        step: 0,
        stage: config.stage_of(0),
        ema: theta.clone(),
        theta_opt: Adam::new(config.train.theta_opt, theta.len()),
        psi_opt: Adam::new(config.train.psi_opt, psi.len()),
        theta,
        psi,
        rng,
        warmup,
    })
}

impl<'a> Trainer<'a> {
    pub fn new(config: SfdConfig, teacher: &'a dyn ScoreOracle) -> Result<Self> {
        let k = teacher.num_classes();
        config.validate(k)?;
        let schedule = Schedule::new(config.schedule)?;
        let roles = ClassRoles::new(k, config.active_forgetting())?;
        let net = CondMlp::new(config.model.clone(), k)?;
        Ok(Self {
            config,
            teacher,
            schedule,
            roles,
            generator: Generator { net: net.clone() },
            fake: FakeScore { net },
        })
    }

    pub fn config(&self) -> &SfdConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn fake_score(&self) -> &FakeScore {
        &self.fake
    }

    pub fn roles(&self) -> &ClassRoles {
        &self.roles
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng, class: usize) -> Batch {
        let n = self.config.train.batch_size;
        let noise = normals(rng, n * POINT_DIM, self.schedule.sigma_init());
        let times = (0..n).map(|_| self.schedule.sample_timestep(rng)).collect();
        let eps = normals(rng, n * POINT_DIM, 1.0);
        Batch {
            classes: vec![class; n],
            noise,
            times,
            eps,
        }
    }

    /// `z = a_t x + σ_t ε` on the graph, differentiable in `x`.
    fn perturb_on_graph(&self, g: &Graph, x: Var, d: &Batch) -> Result<Var> {
        let n = d.times.len();
        let a: Vec<f64> = d.times.iter().map(|&t| self.schedule.a(t)).collect();
        let noise: Vec<f64> = (0..n)
            .flat_map(|i| {
                let s = self.schedule.sigma(d.times[i]);
                [s * d.eps[2 * i], s * d.eps[2 * i + 1]]
            })
            .collect();
        let a = g.constant(Tensor::matrix(n, 1, a)?)?;
        let noise = g.constant(Tensor::matrix(n, POINT_DIM, noise)?)?;
        g.add(g.mul_col(x, a)?, noise)
    }

    /// Fake-score DSM prediction and (constant) target for one batch.
    pub fn psi_term(&self, g: &Graph, theta: &[f64], psi: &BoundParams, d: &Batch) -> Result<(Var, Var)> {
        let x = self.generator.generate(theta, &self.schedule, &d.noise, &d.classes)?;
        let n = d.classes.len();
        let z: Vec<f64> = (0..n)
            .flat_map(|i| self.schedule.perturb(&x[2 * i..2 * i + 2], d.times[i], &d.eps[2 * i..2 * i + 2]))
            .collect();
        let z = g.constant(Tensor::matrix(n, POINT_DIM, z)?)?;
        let pred = self.fake.forward(g, psi, &self.schedule, z, &d.classes, &d.times)?;
        let target = g.constant(Tensor::matrix(n, POINT_DIM, x)?)?;
        Ok((pred, target))
    }

    /// Generator loss term for one batch: the teacher is queried at
    /// `teacher_class`, the fake score at the batch's own class. `frozen`
    /// replaces the per-row weights (`ω_t a_t²/σ_t⁴`, or `ω_t a_t` in KL mode)
    /// that are otherwise computed from the current values.
    #[allow(clippy::too_many_arguments)]
    pub fn theta_term(
        &self,
        g: &Graph,
        theta: &BoundParams,
        psi: &[f64],
        d: &Batch,
        teacher_class: usize,
        alpha: f64,
        frozen: Option<&[f64]>,
    ) -> Result<(Var, Vec<f64>)> {
        let n = d.classes.len();
        let teacher_classes = vec![teacher_class; n];
        let x = self.generator.forward(g, theta, &self.schedule, &d.noise, &d.classes)?;
        if self.config.mode == Mode::Kl {
            let xv = g.values(x);
            let z: Vec<f64> = (0..n)
                .flat_map(|i| self.schedule.perturb(&xv[2 * i..2 * i + 2], d.times[i], &d.eps[2 * i..2 * i + 2]))
                .collect();
            let x_phi = self.teacher.mean(&self.schedule, &z, &teacher_classes, &d.times)?;
            let x_psi = self.fake.mean(psi, &self.schedule, &z, &d.classes, &d.times)?;
            let to_scores = |m: &[f64]| -> Vec<f64> {
                (0..n)
                    .flat_map(|i| self.schedule.mean_to_score(&z[2 * i..2 * i + 2], &m[2 * i..2 * i + 2], d.times[i]))
                    .collect()
            };
            let w = frozen.map_or_else(|| kl_weights(&self.schedule, &d.times, &x_phi, &xv), <[f64]>::to_vec);
            let up = sfd_kl_upstream(&to_scores(&x_psi), &to_scores(&x_phi), &w);
            return Ok((straight_through(g, x, &up)?, w));
        }
        let z = self.perturb_on_graph(g, x, d)?;
        let x_phi = self.teacher.mean_on_graph(g, &self.schedule, z, &teacher_classes, &d.times)?;
        let psi_bound = self.fake.net.bind(g, psi, false)?;
        let x_psi = self.fake.forward(g, &psi_bound, &self.schedule, z, &d.classes, &d.times)?;
        let w = frozen.map_or_else(
            || hybrid_weights(&self.schedule, &d.times, &g.values(x_phi), &g.values(x)),
            <[f64]>::to_vec,
        );
        Ok((sfd_hybrid(g, x_phi, x_psi, x, alpha, &w)?, w))
    }

    /// One fake-score update followed by one generator update.
    pub fn train_step(&self, state: &mut RunState) -> Result<StepLosses> {
        let stage = self.config.stage_of(state.step);
        if stage != state.stage {
            self.enter_stage_two(state);
        }
        let weights = self.config.weights_for(stage);
        let forgetting = self.roles.forgetting().filter(|_| weights.mu_psi > 0.0 || weights.mu_theta > 0.0);
        // the first stage of two-stage training distills every class
        let all: Vec<usize>;
        let remaining = if self.config.mode == Mode::TwoStage && stage == 1 {
            all = (0..self.roles.num_classes()).collect();
            &all[..]
        } else {
            self.roles.remaining()
        };
        let mut losses = StepLosses::default();

        // fake score update
        let c_r = remaining[state.rng.random_range(0..remaining.len())];
        let d_r = self.draw(&mut state.rng, c_r);
        let d_f = forgetting.map(|f| self.draw(&mut state.rng, f.forget));
        let g = Graph::at_step(state.step);
        let psi = self.fake.net.bind(&g, &state.psi, true)?;
        let rem = self.psi_term(&g, &state.theta, &psi, &d_r)?;
        let fgt = match &d_f {
            Some(d) => Some(self.psi_term(&g, &state.theta, &psi, d)?),
            None => None,
        };
        let loss = psi_update_loss(&g, rem, fgt, &weights)?;
        losses.psi = finite(g.scalar(loss), "psi loss", state.step)?;
        losses.psi_remaining = mse(&g, rem);
        losses.psi_forget = fgt.map(|p| mse(&g, p)).unwrap_or(0.0);
        let grads = g.backward(loss)?;
        let grad = self.fake.net.flat_grad(&psi, &grads)?;
        drop(g);
        state.psi_opt.step(&mut state.psi, &grad)?;

        // generator update on fresh draws
        let c_r = remaining[state.rng.random_range(0..remaining.len())];
        let d_r = self.draw(&mut state.rng, c_r);
        let d_f = forgetting.map(|f| self.draw(&mut state.rng, f.forget));
        let g = Graph::at_step(state.step);
        let theta = self.generator.net.bind(&g, &state.theta, true)?;
        let (distill, _) = self.theta_term(&g, &theta, &state.psi, &d_r, c_r, weights.alpha, None)?;
        let forget = match (&d_f, forgetting) {
            (Some(d), Some(f)) => Some(self.theta_term(&g, &theta, &state.psi, d, f.override_with, weights.alpha, None)?.0),
            _ => None,
        };
        let loss = theta_update_loss(&g, distill, forget, &weights)?;
        losses.theta = finite(g.scalar(loss), "theta loss", state.step)?;
        losses.theta_distill = g.scalar(distill);
        losses.theta_forget = forget.map(|f| g.scalar(f)).unwrap_or(0.0);
        let grads = g.backward(loss)?;
        let grad = self.generator.net.flat_grad(&theta, &grads)?;
        drop(g);
        state.theta_opt.step(&mut state.theta, &grad)?;

        if self.config.ema_enabled(stage) {
            ema_update(&mut state.ema, &state.theta, self.config.train.ema_decay);
        }
        state.step += 1;
        Ok(losses)
    }

    /// Moves a state that just finished stage 1 into stage 2: the generator
    /// continues from its EMA weights and EMA tracking stops.
    fn enter_stage_two(&self, state: &mut RunState) {
        if self.config.train.ema {
            state.theta.clone_from(&state.ema);
        }
        state.stage = 2;
    }

    /// Runs until the configured budget is exhausted, starting from whatever
    /// step `state` is at.
    pub fn run(&self, state: &mut RunState, observer: &mut dyn Observer) -> Result<()> {
        let total = self.config.total_steps();
        let interval = self.config.train.eval_interval;
        let ckpt = self.config.train.checkpoint_interval;
        if state.step == 0 {
            observer.evaluate(state, None)?;
        }
        let mut window = StepLosses::default();
        let mut count = 0u64;
        while state.step < total {
            let l = self.train_step(state)?;
            window.accumulate(&l);
            count += 1;
            let boundary = self.config.mode == Mode::TwoStage && state.step == self.config.train.stage1_steps;
            if state.step.is_multiple_of(interval) || state.step == total || boundary {
                observer.evaluate(state, Some(&window.scaled(1.0 / count as f64)))?;
                window = StepLosses::default();
                count = 0;
            }
            if (ckpt > 0 && state.step.is_multiple_of(ckpt)) || boundary || state.step == total {
                observer.checkpoint(state)?;
            }
        }
        Ok(())
    }
}

fn finite(v: f64, what: &'static str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(SfdError::NumericOverflow { op: what, step: Some(step) })
    }
}

fn mse(g: &Graph, (pred, target): (Var, Var)) -> f64 {
    let (p, t) = (g.values(pred), g.values(target));
    let n = p.len() / POINT_DIM;
    p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64
}
