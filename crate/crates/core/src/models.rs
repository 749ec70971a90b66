//! Conditional MLPs for the one-step generator and the fake score network,
//! and the teacher backends the trainer queries.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Gradients, Graph, Tensor, Var};
use crate::error::{contract, Result, SfdError};
use crate::gmm::{GmmSpec, Level};
use crate::schedule::Schedule;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub class_dim: usize,
    pub time_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            class_dim: 16,
            time_dim: 16,
        }
    }
}

/// `(weight offset, bias offset, fan_in, fan_out)` of one dense layer.
type LayerOffsets = (usize, usize, usize, usize);

/// Offsets of each parameter block in the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    embed: (usize, usize),
    layers: Vec<LayerOffsets>,
    total: usize,
}

/// `MLP([point ‖ class embedding ‖ time features]) -> 2`, SiLU between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CondMlp {
    config: MlpConfig,
    num_classes: usize,
    layout: Layout,
}

/// Parameters of a [`CondMlp`] registered on a graph.
pub struct BoundParams {
    leaves: Vec<Var>,
}

pub const POINT_DIM: usize = 2;

impl CondMlp {
    pub fn new(config: MlpConfig, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(contract("network needs at least one class"));
        }
        if config.hidden.is_empty() || config.hidden.contains(&0) {
            return Err(contract(format!("invalid hidden widths {:?}", config.hidden)));
        }
        if config.class_dim == 0 || config.time_dim < 2 || !config.time_dim.is_multiple_of(2) {
            return Err(contract("class_dim must be positive and time_dim even and >= 2"));
        }
        let mut total = num_classes * config.class_dim;
        let embed = (0, total);
        let mut layers = Vec::new();
        let mut fan_in = POINT_DIM + config.class_dim + config.time_dim;
        for &width in config.hidden.iter().chain(std::iter::once(&POINT_DIM)) {
            let w = total;
            total += fan_in * width;
            let b = total;
            total += width;
            layers.push((w, b, fan_in, width));
            fan_in = width;
        }
        Ok(Self {
            config,
            num_classes,
            layout: Layout { embed, layers, total },
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Embedding range and `(weight, bias, fan_in, fan_out)` offsets per dense layer.
    #[cfg(test)]
    pub(crate) fn blocks(&self) -> ((usize, usize), &[LayerOffsets]) {
        (self.layout.embed, &self.layout.layers)
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Uniform `±1/√fan_in` weights, zero biases, standard-normal class embeddings.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.layout.total];
        let (e0, e1) = self.layout.embed;
        for v in &mut p[e0..e1] {
            *v = StandardNormal.sample(rng);
        }
        for &(w, _, fan_in, fan_out) in &self.layout.layers {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p[w..w + fan_in * fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn bind(&self, g: &Graph, params: &[f64], trainable: bool) -> Result<BoundParams> {
        if params.len() != self.layout.total {
            return Err(SfdError::ShapeMismatch {
                op: "bind",
                lhs: vec![params.len()],
                rhs: vec![self.layout.total],
            });
        }
        let (e0, e1) = self.layout.embed;
        let mut leaves = vec![g.leaf(
            Tensor::matrix(self.num_classes, self.config.class_dim, params[e0..e1].to_vec())?,
            trainable,
        )?];
        for &(w, b, fan_in, fan_out) in &self.layout.layers {
            leaves.push(g.leaf(
                Tensor::matrix(fan_in, fan_out, params[w..w + fan_in * fan_out].to_vec())?,
                trainable,
            )?);
            leaves.push(g.leaf(Tensor::matrix(1, fan_out, params[b..b + fan_out].to_vec())?, trainable)?);
        }
        Ok(BoundParams { leaves })
    }

    /// Flattens the gradients of bound trainable parameters in layout order.
    pub fn flat_grad(&self, bound: &BoundParams, grads: &Gradients) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.layout.total);
        for &leaf in &bound.leaves {
            let g = grads
                .get(leaf)
                .ok_or_else(|| contract("parameters were bound as constants"))?;
            out.extend_from_slice(g);
        }
        Ok(out)
    }

    /// Time-feature matrix, one row per entry of `times` (normalized by `T`).
    pub fn time_matrix(&self, schedule: &Schedule, times: &[usize]) -> Result<Tensor> {
        let d = self.config.time_dim;
        let mut data = Vec::with_capacity(times.len() * d);
        for &t in times {
            data.extend(schedule.time_features(t, d));
        }
        Tensor::matrix(times.len(), d, data)
    }

    /// Forward pass on `points (n×2)` with per-row classes and time features.
    pub fn forward(
        &self,
        g: &Graph,
        bound: &BoundParams,
        points: Var,
        classes: &[usize],
        time_feats: Var,
    ) -> Result<Var> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(contract(format!("class {c} out of range for {} classes", self.num_classes)));
        }
        let emb = g.gather_rows(bound.leaves[0], classes)?;
        let mut h = g.concat_cols(&[points, emb, time_feats])?;
        let n_layers = self.layout.layers.len();
        for i in 0..n_layers {
            let w = bound.leaves[1 + 2 * i];
            let b = bound.leaves[2 + 2 * i];
            h = g.add_row(g.matmul(h, w)?, b)?;
            if i + 1 < n_layers {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Gradient-free batch evaluation; `points` is row-major `n×2`.
    pub fn eval(
        &self,
        params: &[f64],
        schedule: &Schedule,
        points: &[f64],
        classes: &[usize],
        times: &[usize],
    ) -> Result<Vec<f64>> {
        let n = classes.len();
        let g = Graph::new();
        let bound = self.bind(&g, params, false)?;
        let x = g.constant(Tensor::matrix(n, POINT_DIM, points.to_vec())?)?;
        let tf = g.constant(self.time_matrix(schedule, times)?)?;
        let out = self.forward(&g, &bound, x, classes, tf)?;
        Ok(g.values(out))
    }
}

/// One-step generator `x = g_θ(σ_init n, c)`.
///
/// The network sees `a_{t_init} · σ_init n`, the scale a variance-preserving
/// denoiser expects at `t_init`, so teacher weights can be copied in directly.
#[derive(Clone, Debug)]
pub struct Generator {
    pub net: CondMlp,
}

impl Generator {
    pub fn forward(
        &self,
        g: &Graph,
        bound: &BoundParams,
        schedule: &Schedule,
        scaled_noise: &[f64],
        classes: &[usize],
    ) -> Result<Var> {
        let n = classes.len();
        let t0 = schedule.t_init();
        let a = schedule.a(t0);
        let input: Vec<f64> = scaled_noise.iter().map(|v| a * v).collect();
        let x = g.constant(Tensor::matrix(n, POINT_DIM, input)?)?;
        let tf = g.constant(self.net.time_matrix(schedule, &vec![t0; n])?)?;
        self.net.forward(g, bound, x, classes, tf)
    }

    pub fn generate(
        &self,
        params: &[f64],
        schedule: &Schedule,
        scaled_noise: &[f64],
        classes: &[usize],
    ) -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound = self.net.bind(&g, params, false)?;
        let out = self.forward(&g, &bound, schedule, scaled_noise, classes)?;
        Ok(g.values(out))
    }
}

/// Fake score network in x-prediction form: `x_ψ(z, c, t)`.
#[derive(Clone, Debug)]
pub struct FakeScore {
    pub net: CondMlp,
}

impl FakeScore {
    pub fn forward(
        &self,
        g: &Graph,
        bound: &BoundParams,
        schedule: &Schedule,
        z: Var,
        classes: &[usize],
        times: &[usize],
    ) -> Result<Var> {
        let tf = g.constant(self.net.time_matrix(schedule, times)?)?;
        self.net.forward(g, bound, z, classes, tf)
    }

    pub fn mean(
        &self,
        params: &[f64],
        schedule: &Schedule,
        z: &[f64],
        classes: &[usize],
        times: &[usize],
    ) -> Result<Vec<f64>> {
        self.net.eval(params, schedule, z, classes, times)
    }
}

/// Read-only access to a frozen teacher: posterior means (and scores through
/// them) at noised points. This is everything the trainer can ask a teacher.
pub trait ScoreOracle {
    fn num_classes(&self) -> usize;

    fn mean_on_graph(&self, g: &Graph, schedule: &Schedule, z: Var, classes: &[usize], times: &[usize])
        -> Result<Var>;

    fn mean(&self, schedule: &Schedule, z: &[f64], classes: &[usize], times: &[usize]) -> Result<Vec<f64>>;
}

impl ScoreOracle for TeacherBackend {
    fn num_classes(&self) -> usize {
        TeacherBackend::num_classes(self)
    }

    fn mean_on_graph(
        &self,
        g: &Graph,
        schedule: &Schedule,
        z: Var,
        classes: &[usize],
        times: &[usize],
    ) -> Result<Var> {
        TeacherBackend::mean_on_graph(self, g, schedule, z, classes, times)
    }

    fn mean(&self, schedule: &Schedule, z: &[f64], classes: &[usize], times: &[usize]) -> Result<Vec<f64>> {
        TeacherBackend::mean(self, schedule, z, classes, times)
    }
}

/// Frozen pretrained score source. Only posterior-mean and score queries are
/// exposed; nothing here can produce samples of the data distribution.
#[derive(Clone, Debug)]
pub enum TeacherBackend {
    Analytic(GmmSpec),
    Pretrained { net: CondMlp, params: Vec<f64> },
}

impl TeacherBackend {
    pub fn num_classes(&self) -> usize {
        match self {
            Self::Analytic(spec) => spec.num_classes(),
            Self::Pretrained { net, .. } => net.num_classes(),
        }
    }

    /// `x_φ(z, c, t)` recorded on `g`, differentiable with respect to `z`.
    pub fn mean_on_graph(
        &self,
        g: &Graph,
        schedule: &Schedule,
        z: Var,
        classes: &[usize],
        times: &[usize],
    ) -> Result<Var> {
        match self {
            Self::Analytic(spec) => {
                let zv = g.values(z);
                let n = classes.len();
                let mut out = Vec::with_capacity(2 * n);
                let mut jac = Vec::with_capacity(4 * n);
                for i in 0..n {
                    let (m, j) = spec.posterior_mean_with_jacobian(
                        &[zv[2 * i], zv[2 * i + 1]],
                        classes[i],
                        Level::at(schedule, times[i]),
                    );
                    out.extend_from_slice(&m);
                    jac.extend_from_slice(&j);
                }
                g.row_map(z, Tensor::matrix(n, POINT_DIM, out)?, jac)
            }
            Self::Pretrained { net, params } => {
                let bound = net.bind(g, params, false)?;
                let tf = g.constant(net.time_matrix(schedule, times)?)?;
                net.forward(g, &bound, z, classes, tf)
            }
        }
    }

    /// `x_φ(z, c, t)` for a batch, no gradients.
    pub fn mean(&self, schedule: &Schedule, z: &[f64], classes: &[usize], times: &[usize]) -> Result<Vec<f64>> {
        match self {
            Self::Analytic(spec) => Ok((0..classes.len())
                .flat_map(|i| {
                    spec.posterior_mean(&[z[2 * i], z[2 * i + 1]], classes[i], Level::at(schedule, times[i]))
                })
                .collect()),
            Self::Pretrained { net, params } => net.eval(params, schedule, z, classes, times),
        }
    }

    /// `s_φ(z, c, t)` through the posterior-mean parameterization.
    pub fn score(&self, schedule: &Schedule, z: &[f64], classes: &[usize], times: &[usize]) -> Result<Vec<f64>> {
        let m = self.mean(schedule, z, classes, times)?;
        Ok(z.chunks(2)
            .zip(m.chunks(2))
            .zip(times)
            .flat_map(|((z, m), &t)| schedule.mean_to_score(z, m, t))
            .collect())
    }
}

/// Settings for fitting both networks to an analytic teacher before SFD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub generator_steps: usize,
    pub fake_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Standard deviation of the broad reference used to place fake-score probes.
    pub reference_std: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            generator_steps: 2000,
            fake_steps: 4000,
            batch_size: 256,
            lr: 1e-3,
            reference_std: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub generator_initial: f64,
    pub generator_final: f64,
    pub fake_initial: f64,
    pub fake_final: f64,
}

fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    let d = Normal::new(0.0, scale).expect("positive scale");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn random_classes<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn mse_to_target(g: &Graph, out: Var, target: Vec<f64>) -> Result<Var> {
    let n = target.len() / POINT_DIM;
    let tv = g.constant(Tensor::matrix(n, POINT_DIM, target)?)?;
    let diff = g.sub(out, tv)?;
    // per-point squared norm, averaged over points
    g.scale(g.sum(g.square(diff)?)?, 1.0 / n as f64)
}

/// `(θ₀, ψ₀)`: copies of the teacher weights for a pretrained teacher; for an
/// analytic teacher, both networks are regressed onto the teacher's
/// posterior mean first (generator at `t_init` on pure noise, fake score over
/// the diffusion window). Only teacher mean queries are used.
pub fn init_networks<R: Rng + ?Sized>(
    teacher: &TeacherBackend,
    net: &CondMlp,
    schedule: &Schedule,
    warmup: &WarmupConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, WarmupReport)> {
    match teacher {
        TeacherBackend::Pretrained { net: tnet, params } => {
            if tnet != net {
                return Err(contract(format!(
                    "teacher architecture {:?} ({} classes) does not match {:?} ({} classes)",
                    tnet.config(),
                    tnet.num_classes(),
                    net.config(),
                    net.num_classes()
                )));
            }
            Ok((params.clone(), params.clone(), WarmupReport::default()))
        }
        TeacherBackend::Analytic(_) => {
            let k = net.num_classes();
            if teacher.num_classes() != k {
                return Err(contract("teacher and network disagree on the number of classes"));
            }
            let gen = Generator { net: net.clone() };
            let fake = FakeScore { net: net.clone() };
            let mut theta = net.init_params(rng);
            let mut psi = net.init_params(rng);
            let mut report = WarmupReport::default();
            let b = warmup.batch_size;
            let t0 = schedule.t_init();
            let adam_cfg = AdamConfig {
                lr: warmup.lr,
                beta1: 0.9,
                ..AdamConfig::default()
            };

            let mut opt = Adam::new(adam_cfg, theta.len());
            for step in 0..warmup.generator_steps {
                let noise = standard_normals(rng, 2 * b, schedule.sigma_init());
                let classes = random_classes(rng, b, k);
                let z: Vec<f64> = noise.iter().map(|v| schedule.a(t0) * v).collect();
                let target = teacher.mean(schedule, &z, &classes, &vec![t0; b])?;
                let g = Graph::at_step(step as u64);
                let bound = net.bind(&g, &theta, true)?;
                let out = gen.forward(&g, &bound, schedule, &noise, &classes)?;
                let loss = mse_to_target(&g, out, target)?;
                let lv = g.scalar(loss);
                if step == 0 {
                    report.generator_initial = lv;
                }
                report.generator_final = lv;
                let grads = g.backward(loss)?;
                opt.step(&mut theta, &net.flat_grad(&bound, &grads)?)?;
            }

            let mut opt = Adam::new(adam_cfg, psi.len());
            for step in 0..warmup.fake_steps {
                let classes = random_classes(rng, b, k);
                let times: Vec<usize> = (0..b).map(|_| schedule.sample_timestep(rng)).collect();
                // half the probes around the generator's outputs, half from a broad reference
                let half = b / 2;
                let noise = standard_normals(rng, 2 * half, schedule.sigma_init());
                let mut x = gen.generate(&theta, schedule, &noise, &classes[..half])?;
                x.extend(standard_normals(rng, 2 * (b - half), warmup.reference_std));
                let eps = standard_normals(rng, 2 * b, 1.0);
                let z: Vec<f64> = (0..b)
                    .flat_map(|i| schedule.perturb(&x[2 * i..2 * i + 2], times[i], &eps[2 * i..2 * i + 2]))
                    .collect();
                let target = teacher.mean(schedule, &z, &classes, &times)?;
                let g = Graph::at_step(step as u64);
                let bound = net.bind(&g, &psi, true)?;
                let zv = g.constant(Tensor::matrix(b, POINT_DIM, z)?)?;
                let out = fake.forward(&g, &bound, schedule, zv, &classes, &times)?;
                let loss = mse_to_target(&g, out, target)?;
                let lv = g.scalar(loss);
                if step == 0 {
                    report.fake_initial = lv;
                }
                report.fake_final = lv;
                let grads = g.backward(loss)?;
                opt.step(&mut psi, &net.flat_grad(&bound, &grads)?)?;
            }
            Ok((theta, psi, report))
        }
    }
}

/// `ema ← decay · ema + (1 − decay) · params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    debug_assert!((0.0..1.0).contains(&decay));
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, max_relative_error, FD_STEP};
    use crate::schedule::ScheduleConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(k: usize) -> CondMlp {
        CondMlp::new(
            MlpConfig {
                hidden: vec![6, 5],
                class_dim: 3,
                time_dim: 4,
            },
            k,
        )
        .unwrap()
    }

    fn sched() -> Schedule {
        Schedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn parameter_count() {
        let net = CondMlp::new(MlpConfig::default(), 4).unwrap();
        let input = 2 + 16 + 16;
        let expect = 4 * 16 + (input * 128 + 128) + 2 * (128 * 128 + 128) + (128 * 2 + 2);
        assert_eq!(net.num_params(), expect);
    }

    #[test]
    fn generator_is_deterministic_and_two_dimensional() {
        let s = sched();
        for k in [1, 3, 7] {
            let net = small_net(k);
            let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(5));
            let gen = Generator { net };
            let noise = [0.3, -1.2, 2.0, 0.1];
            let a = gen.generate(&p, &s, &noise, &[0, k - 1]).unwrap();
            let b = gen.generate(&p, &s, &noise, &[0, k - 1]).unwrap();
            assert_eq!(a.len(), 4);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_seed_same_init() {
        let net = small_net(2);
        let a = net.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        let b = net.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn generator_parameter_gradient_matches_finite_differences() {
        let s = sched();
        let net = small_net(3);
        let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let gen = Generator { net: net.clone() };
        let noise = [0.5, -0.7, 1.1, 0.2, -2.0, 0.9];
        let classes = [0, 2, 1];
        let w = [0.3, -1.0, 0.8, 0.5, -0.2, 0.6];
        let f = |params: &[f64]| -> Result<(f64, Vec<f64>)> {
            let g = Graph::new();
            let bound = net.bind(&g, params, true)?;
            let out = gen.forward(&g, &bound, &s, &noise, &classes)?;
            let wv = g.constant(Tensor::matrix(3, 2, w.to_vec())?)?;
            let loss = g.dot(out, wv)?;
            let grads = g.backward(loss)?;
            Ok((g.scalar(loss), net.flat_grad(&bound, &grads)?))
        };
        let (_, analytic) = f(&p).unwrap();
        let numeric = finite_difference(|q| Ok(f(q)?.0), &p, FD_STEP).unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn untrained_fake_is_finite_on_wide_inputs() {
        let s = sched();
        let net = CondMlp::new(MlpConfig::default(), 4).unwrap();
        let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let fake = FakeScore { net };
        let mut z = Vec::new();
        for i in 0..=20 {
            for j in 0..=20 {
                z.push(-10.0 + i as f64);
                z.push(-10.0 + j as f64);
            }
        }
        let n = z.len() / 2;
        let classes: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let times: Vec<usize> = (0..n).map(|i| i % 1000).collect();
        let out = fake.mean(&p, &s, &z, &classes, &times).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        let far: Vec<f64> = z.iter().map(|v| v * 2.5).collect();
        assert!(fake.mean(&p, &s, &far, &classes, &times).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fake_score_round_trip() {
        let s = sched();
        let net = small_net(2);
        let p = net.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let fake = FakeScore { net };
        let z = [0.4, -0.9];
        let x = fake.mean(&p, &s, &z, &[1], &[250]).unwrap();
        let score = s.mean_to_score(&z, &x, 250);
        let back = s.score_to_mean(&z, &score, 250);
        assert!((back[0] - x[0]).abs() < 1e-12 && (back[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn pretrained_copy_is_bit_identical() {
        let s = sched();
        let net = small_net(2);
        let phi = net.init_params(&mut ChaCha8Rng::seed_from_u64(8));
        let teacher = TeacherBackend::Pretrained {
            net: net.clone(),
            params: phi.clone(),
        };
        let (theta, psi, _) =
            init_networks(&teacher, &net, &s, &WarmupConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(theta, phi);
        assert_eq!(psi, phi);
        let z = [0.1, 0.2, -0.3, 1.4];
        let fake = FakeScore { net: net.clone() };
        assert_eq!(
            fake.mean(&psi, &s, &z, &[0, 1], &[100, 600]).unwrap(),
            teacher.mean(&s, &z, &[0, 1], &[100, 600]).unwrap()
        );
    }

    #[test]
    fn pretrained_copy_rejects_architecture_mismatch() {
        let s = sched();
        let teacher = TeacherBackend::Pretrained {
            net: small_net(2),
            params: small_net(2).init_params(&mut ChaCha8Rng::seed_from_u64(0)),
        };
        let other = small_net(3);
        assert!(init_networks(&teacher, &other, &s, &WarmupConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn analytic_warmup_reduces_matching_loss_and_is_seeded() {
        let s = sched();
        let net = CondMlp::new(
            MlpConfig {
                hidden: vec![32, 32],
                class_dim: 4,
                time_dim: 8,
            },
            4,
        )
        .unwrap();
        let teacher = TeacherBackend::Analytic(GmmSpec::default_benchmark());
        let warm = WarmupConfig {
            generator_steps: 300,
            fake_steps: 300,
            batch_size: 64,
            ..WarmupConfig::default()
        };
        let run = |seed| init_networks(&teacher, &net, &s, &warm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (t1, p1, r) = run(3);
        assert!(r.generator_final <= 0.1 * r.generator_initial, "{r:?}");
        assert!(r.fake_final <= 0.1 * r.fake_initial, "{r:?}");
        let (t2, p2, _) = run(3);
        assert_eq!((t1, p1), (t2, p2));
    }

    #[test]
    fn analytic_teacher_graph_mean_matches_direct_query() {
        let s = sched();
        let teacher = TeacherBackend::Analytic(GmmSpec::default_benchmark());
        let z = [0.2, 0.3, -1.0, 0.5];
        let g = Graph::new();
        let zv = g.param(Tensor::matrix(2, 2, z.to_vec()).unwrap()).unwrap();
        let out = teacher.mean_on_graph(&g, &s, zv, &[0, 3], &[100, 500]).unwrap();
        assert_eq!(g.values(out), teacher.mean(&s, &z, &[0, 3], &[100, 500]).unwrap());
        let score = teacher.score(&s, &z[..2], &[0], &[100]).unwrap();
        let spec = GmmSpec::default_benchmark();
        let direct = spec.diffused_score(&[0.2, 0.3], 0, Level::at(&s, 100));
        assert!((score[0] - direct[0]).abs() < 1e-9 && (score[1] - direct[1]).abs() < 1e-9);
    }

    #[test]
    fn ema_behaviour() {
        let mut ema = vec![1.0, -1.0];
        ema_update(&mut ema, &[3.0, 5.0], 0.0);
        assert_eq!(ema, vec![3.0, 5.0]);

        let decay: f64 = 0.9;
        let mut ema = vec![0.0];
        for _ in 0..25 {
            ema_update(&mut ema, &[2.0], decay);
        }
        assert!(((2.0 - ema[0]) - decay.powi(25) * 2.0).abs() < 1e-12);
    }
}
