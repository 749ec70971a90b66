//! Run directories: evaluation snapshots, metrics log, checkpoints, samples
//! and the final summary.
//!
//! ```text
//! <run>/config.toml        effective configuration
//! <run>/run.json           code version, seed, mode, Fréchet noise floors
//! <run>/metrics.jsonl      one MetricsRecord per line
//! <run>/checkpoints/step-<NNNNNNNN>.ckpt
//! <run>/samples.csv        class,x,y from the final generator
//! <run>/summary.json
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sfd_core::checkpoint;
use sfd_core::gmm::{Forgetting, GmmSpec};
use sfd_core::models::{CondMlp, Generator, TeacherBackend};
use sfd_core::schedule::Schedule;
use sfd_core::trainer::{initial_state, Mode, Observer, RunState, SfdConfig, StepLosses, Trainer};
use sfd_core::SfdError;

use crate::config::{EvalSection, RunConfig, TeacherKind};
use crate::error::{contract, io_at, LabError, Result};
use crate::metrics::{frechet_gaussian, noise_floor, precision_recall_knn, unlearning_accuracy};
use crate::pretrain::TeacherFile;
use crate::sampling::sample_class;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_INFO_FILE: &str = "run.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of `metrics.jsonl`. Fields that were not computed at a snapshot are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: u8,
    /// Thousands of generated points consumed per network, `step · batch / 1000`.
    pub kimg: f64,
    /// Mean losses since the previous record; absent at step 0.
    pub losses: Option<StepLosses>,
    pub ua: Option<f64>,
    pub override_rate: Option<f64>,
    /// Per class index; `null` for classes not evaluated.
    pub frechet: Option<Vec<Option<f64>>>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricsRecord {
    /// Largest Fréchet distance over `classes`, if all were evaluated.
    pub fn worst_frechet(&self, classes: &[usize]) -> Option<f64> {
        let f = self.frechet.as_ref()?;
        classes.iter().map(|&c| f.get(c).copied().flatten()).try_fold(0.0f64, |m, v| v.map(|v| m.max(v)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub version: String,
    pub seed: u64,
    pub mode: Mode,
    pub teacher: TeacherKind,
    pub remaining: Vec<usize>,
    pub forgetting: Option<Forgetting>,
    /// Per-class Fréchet noise floor (max over repeated independent draw pairs).
    pub frechet_floor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub steps: u64,
    pub kimg: f64,
    pub ua: Option<f64>,
    pub override_rate: Option<f64>,
    pub frechet: Vec<Option<f64>>,
    pub frechet_floor: Vec<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// First step whose UA exceeds 5%.
    pub ua_onset_step: Option<u64>,
    /// First step whose UA reaches 95%.
    pub ua95_step: Option<u64>,
    /// Two-stage only: first step of stage 2, and the first stage-2 step with UA ≥ 95%.
    pub stage2_start: Option<u64>,
    pub stage2_ua95_step: Option<u64>,
}

/// What a run checkpoint holds: the training configuration (checked on resume) and state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub config: SfdConfig,
    pub state: RunState,
}

pub fn teacher_backend(config: &RunConfig) -> Result<TeacherBackend> {
    match config.teacher.kind {
        TeacherKind::Analytic => Ok(TeacherBackend::Analytic(config.teacher.spec.clone())),
        TeacherKind::Pretrained => {
            let path = config
                .teacher
                .checkpoint
                .as_ref()
                .ok_or_else(|| LabError::Config(vec!["teacher.checkpoint missing".into()]))?;
            let file = TeacherFile::load(path)?;
            if file.schedule != config.schedule {
                return Err(contract("pretrained teacher was trained with a different schedule"));
            }
            if file.num_classes != config.teacher.spec.num_classes() {
                return Err(contract("pretrained teacher class count differs from teacher.spec"));
            }
            file.backend()
        }
    }
}

/// Fixed evaluation references and noise, shared by every snapshot of a run.
pub struct EvalContext {
    spec: GmmSpec,
    schedule: Schedule,
    generator: Generator,
    forgetting: Option<Forgetting>,
    remaining: Vec<usize>,
    cfg: EvalSection,
    noise: Vec<f64>,
    references: Vec<Vec<f64>>,
    pr_reference: Vec<f64>,
    pub floors: Vec<f64>,
}

impl EvalContext {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let spec = config.teacher.spec.clone();
        let sfd = config.sfd_config();
        let schedule = Schedule::new(sfd.schedule)?;
        let k = spec.num_classes();
        let generator = Generator {
            net: CondMlp::new(sfd.model.clone(), k)?,
        };
        let forgetting = sfd.forgetting;
        let remaining: Vec<usize> = (0..k).filter(|&c| forgetting.is_none_or(|f| f.forget != c)).collect();
        let cfg = config.eval.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.samples_per_class;
        let noise = (0..2 * n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                schedule.sigma_init() * v
            })
            .collect();
        let references = (0..k)
            .map(|c| sample_class(&spec, c, n, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let floors = (0..k)
            .map(|c| noise_floor(&spec, c, n, cfg.floor_repeats, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let pr_reference = pooled(&references, &remaining, cfg.pr_samples);
        Ok(Self {
            spec,
            schedule,
            generator,
            forgetting,
            remaining,
            cfg,
            noise,
            references,
            pr_reference,
            floors,
        })
    }

    pub fn remaining(&self) -> &[usize] {
        &self.remaining
    }

    pub fn generate(&self, params: &[f64], class: usize) -> Result<Vec<f64>> {
        let n = self.cfg.samples_per_class;
        Ok(self.generator.generate(params, &self.schedule, &self.noise, &vec![class; n])?)
    }

    pub fn snapshot(&self, step: u64, stage: u8, batch: usize, losses: Option<&StepLosses>, params: &[f64], full: bool) -> Result<MetricsRecord> {
        let mut rec = MetricsRecord {
            step,
            stage,
            kimg: (step * batch as u64) as f64 / 1000.0,
            losses: losses.copied(),
            ua: None,
            override_rate: None,
            frechet: None,
            precision: None,
            recall: None,
        };
        if let Some(f) = self.forgetting {
            let u = unlearning_accuracy(&self.spec, &self.generate(params, f.forget)?, f)?;
            rec.ua = Some(u.ua);
            rec.override_rate = Some(u.override_rate);
        }
        if full {
            let k = self.spec.num_classes();
            let mut frechet = vec![None; k];
            let mut generated = vec![Vec::new(); k];
            for c in 0..k {
                let x = self.generate(params, c)?;
                frechet[c] = Some(frechet_gaussian(&x, &self.references[c])?);
                generated[c] = x;
            }
            let fake = pooled(&generated, &self.remaining, self.cfg.pr_samples);
            let (p, r) = precision_recall_knn(&self.pr_reference, &fake, self.cfg.knn_k)?;
            rec.frechet = Some(frechet);
            rec.precision = Some(p);
            rec.recall = Some(r);
        }
        Ok(rec)
    }
}

/// Up to `total` points taken round-robin from the listed classes.
fn pooled(per_class: &[Vec<f64>], classes: &[usize], total: usize) -> Vec<f64> {
    let per = total / classes.len().max(1);
    classes
        .iter()
        .flat_map(|&c| per_class[c][..2 * per.min(per_class[c].len() / 2)].iter().copied())
        .collect()
}

struct RunObserver<'a> {
    ctx: &'a EvalContext,
    config: &'a SfdConfig,
    full_every: u64,
    dir: PathBuf,
    metrics: fs::File,
    records: Vec<MetricsRecord>,
    last_good: Option<PathBuf>,
}

impl RunObserver<'_> {
    fn is_full(&self, step: u64) -> bool {
        let interval = self.config.train.eval_interval;
        let boundary = self.config.mode == Mode::TwoStage && step == self.config.train.stage1_steps;
        step.is_multiple_of(interval * self.full_every) || step == self.config.total_steps() || boundary
    }
}

fn core_io(path: &Path) -> impl FnOnce(std::io::Error) -> SfdError + '_ {
    move |e| SfdError::Contract(format!("{}: {e}", path.display()))
}

impl Observer for RunObserver<'_> {
    fn evaluate(&mut self, state: &RunState, losses: Option<&StepLosses>) -> sfd_core::Result<()> {
        let full = self.is_full(state.step);
        let rec = self
            .ctx
            .snapshot(state.step, state.stage, self.config.train.batch_size, losses, state.eval_params(self.config), full)
            .map_err(|e| match e {
                LabError::Core(c) => c,
                other => SfdError::Contract(other.to_string()),
            })?;
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        let path = self.dir.join(METRICS_FILE);
        self.metrics.write_all(line.as_bytes()).map_err(core_io(&path))?;
        self.metrics.flush().map_err(core_io(&path))?;
        self.records.push(rec);
        Ok(())
    }

    fn checkpoint(&mut self, state: &RunState) -> sfd_core::Result<()> {
        let path = checkpoint_path(&self.dir, state.step);
        checkpoint::save(
            &RunCheckpoint {
                config: self.config.clone(),
                state: state.clone(),
            },
            &path,
        )?;
        self.last_good = Some(path);
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step-{step:08}.ckpt"))
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Err(LabError::Missing(path));
    }
    let f = fs::File::open(&path).map_err(io_at(&path))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(io_at(&path))?;
            serde_json::from_str(&line).map_err(|e| LabError::Parse {
                what: format!("{} line {}", path.display(), i + 1),
                source: Box::new(e),
            })
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_at(path))
}

pub fn summarize(config: &SfdConfig, records: &[MetricsRecord], floors: &[f64]) -> Summary {
    let last_full = records.iter().rev().find(|r| r.frechet.is_some());
    let last = records.last();
    let first = |pred: &dyn Fn(&MetricsRecord) -> bool| records.iter().find(|r| pred(r)).map(|r| r.step);
    let stage2_start = (config.mode == Mode::TwoStage).then_some(config.train.stage1_steps);
    Summary {
        mode: config.mode,
        steps: last.map_or(0, |r| r.step),
        kimg: last.map_or(0.0, |r| r.kimg),
        ua: last.and_then(|r| r.ua),
        override_rate: last.and_then(|r| r.override_rate),
        frechet: last_full.and_then(|r| r.frechet.clone()).unwrap_or_default(),
        frechet_floor: floors.to_vec(),
        precision: last_full.and_then(|r| r.precision),
        recall: last_full.and_then(|r| r.recall),
        ua_onset_step: first(&|r| r.ua.is_some_and(|u| u > 0.05)),
        ua95_step: first(&|r| r.ua.is_some_and(|u| u >= 0.95)),
        stage2_start,
        stage2_ua95_step: stage2_start
            .and_then(|s| first(&|r| r.step > s && r.ua.is_some_and(|u| u >= 0.95))),
    }
}

/// Runs (or resumes) training into `dir` and writes every artifact.
pub fn execute(config: &RunConfig, dir: &Path, resume: Option<&Path>) -> Result<Summary> {
    config.validate()?;
    let sfd = config.sfd_config();
    if !sfd.train.checkpoint_interval.is_multiple_of(sfd.train.eval_interval) {
        return Err(LabError::Config(vec![
            "train.checkpoint_interval must be a multiple of eval.interval".into(),
        ]));
    }
    let teacher = teacher_backend(config)?;
    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(io_at(dir))?;
    let ctx = EvalContext::new(config)?;

    let mut state = match resume {
        Some(path) => {
            let ck: RunCheckpoint = checkpoint::load(path)?;
            if ck.config != sfd {
                return Err(contract(format!(
                    "checkpoint {} was written by a different training configuration",
                    path.display()
                )));
            }
            ck.state
        }
        None => initial_state(&sfd, &teacher)?,
    };

    let mut records = Vec::new();
    if resume.is_some() {
        records = read_metrics(dir)?;
        records.retain(|r| r.step <= state.step);
    }
    let metrics_path = dir.join(METRICS_FILE);
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_file(&metrics_path, text.as_bytes())?;
    write_file(&dir.join(CONFIG_FILE), config.to_toml()?.as_bytes())?;
    let info = RunInfo {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: sfd.train.seed,
        mode: sfd.mode,
        teacher: config.teacher.kind,
        remaining: ctx.remaining().to_vec(),
        forgetting: sfd.forgetting,
        frechet_floor: ctx.floors.clone(),
    };
    write_file(&dir.join(RUN_INFO_FILE), &serde_json::to_vec_pretty(&info).expect("info serializes"))?;

    let metrics = fs::OpenOptions::new().append(true).open(&metrics_path).map_err(io_at(&metrics_path))?;
    let mut obs = RunObserver {
        ctx: &ctx,
        config: &sfd,
        full_every: config.eval.full_every,
        dir: dir.to_path_buf(),
        metrics,
        records,
        last_good: resume.map(Path::to_path_buf),
    };
    let trainer = Trainer::new(sfd.clone(), &teacher)?;
    if let Err(e) = trainer.run(&mut state, &mut obs) {
        return Err(LabError::Aborted {
            step: state.step,
            cause: e.to_string(),
            last_good: obs.last_good.clone(),
        });
    }

    if config.io.save_samples {
        let params = state.eval_params(&sfd);
        let mut csv = String::from("class,x,y\n");
        for c in 0..config.teacher.spec.num_classes() {
            for p in ctx.generate(params, c)?.chunks(2) {
                csv.push_str(&format!("{c},{},{}\n", p[0], p[1]));
            }
        }
        write_file(&dir.join(SAMPLES_FILE), csv.as_bytes())?;
    }
    let summary = summarize(&sfd, &obs.records, &ctx.floors);
    write_file(&dir.join(SUMMARY_FILE), &serde_json::to_vec_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}

/// Re-evaluates a run checkpoint with the full metric set.
pub fn evaluate_checkpoint(config: &RunConfig, path: &Path) -> Result<MetricsRecord> {
    let ck: RunCheckpoint = checkpoint::load(path)?;
    let ctx = EvalContext::new(config)?;
    ctx.snapshot(
        ck.state.step,
        ck.state.stage,
        ck.config.train.batch_size,
        None,
        ck.state.eval_params(&ck.config),
        true,
    )
}
