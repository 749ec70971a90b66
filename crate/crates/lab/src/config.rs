//! Run configuration file (TOML).
//!
//! Sections: `[teacher]`, `[schedule]`, `[model]`, `[loss]`, `[train]`,
//! `[eval]`, `[io]`. Unknown keys are rejected everywhere. Serialization
//! writes every field, so a written file documents all defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfd_core::autodiff::AdamConfig;
use sfd_core::gmm::{Forgetting, GmmSpec};
use sfd_core::losses::LossWeights;
use sfd_core::models::{MlpConfig, WarmupConfig};
use sfd_core::schedule::ScheduleConfig;
use sfd_core::trainer::{Mode, SfdConfig, TrainSettings};

use crate::error::{LabError, Result};
use crate::pretrain::PretrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    /// Closed-form mixture scores.
    Analytic,
    /// MLP trained by `pretrain`, loaded from `teacher.checkpoint`.
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    /// Pretrained-teacher file, relative paths resolved against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// The mixture: scores for the analytic backend, and the evaluation
    /// reference for both backends.
    pub spec: GmmSpec,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub class_dim: usize,
    pub time_dim: usize,
    pub warmup: WarmupConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda_psi: f64,
    pub mu_psi: f64,
    pub lambda_theta: f64,
    pub mu_theta: f64,
    pub alpha: f64,
    /// Absent means no class is forgotten.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgetting: Option<Forgetting>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub ema: bool,
    pub ema_decay: f64,
    pub checkpoint_interval: u64,
    pub theta_opt: AdamConfig,
    pub psi_opt: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Steps between metric records (UA and mean losses).
    pub interval: u64,
    /// Fréchet and precision/recall are added every `full_every` records.
    pub full_every: u64,
    pub samples_per_class: usize,
    /// Pooled remaining-class points per side for precision/recall.
    pub pr_samples: usize,
    pub knn_k: usize,
    /// Independent draw pairs for the Fréchet noise floor.
    pub floor_repeats: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    pub output_root: PathBuf,
    /// Defaults to `<mode>-seed<seed>` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_name: Option<String>,
    pub save_samples: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub teacher: TeacherSection,
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sfd = SfdConfig::default();
        let t = sfd.train;
        Self {
            teacher: TeacherSection {
                kind: TeacherKind::Analytic,
                checkpoint: None,
                spec: GmmSpec::default_benchmark(),
                pretrain: PretrainConfig::default(),
            },
            schedule: sfd.schedule,
            model: ModelSection {
                hidden: sfd.model.hidden,
                class_dim: sfd.model.class_dim,
                time_dim: sfd.model.time_dim,
                warmup: sfd.warmup,
            },
            loss: LossSection {
                lambda_psi: sfd.loss.lambda_psi,
                mu_psi: sfd.loss.mu_psi,
                lambda_theta: sfd.loss.lambda_theta,
                mu_theta: sfd.loss.mu_theta,
                alpha: sfd.loss.alpha,
                forgetting: sfd.forgetting,
            },
            train: TrainSection {
                mode: sfd.mode,
                seed: t.seed,
                batch_size: t.batch_size,
                steps: t.steps,
                stage1_steps: t.stage1_steps,
                stage2_steps: t.stage2_steps,
                ema: t.ema,
                ema_decay: t.ema_decay,
                checkpoint_interval: t.checkpoint_interval,
                theta_opt: t.theta_opt,
                psi_opt: t.psi_opt,
            },
            eval: EvalSection {
                interval: 50,
                full_every: 10,
                samples_per_class: 10_000,
                pr_samples: 2_000,
                knn_k: 3,
                floor_repeats: 20,
                seed: 1234,
            },
            io: IoSection {
                output_root: PathBuf::from("runs"),
                run_name: None,
                save_samples: true,
            },
        }
    }
}

fn parse_err(what: impl Into<String>, e: impl std::error::Error + Send + Sync + 'static) -> LabError {
    LabError::Parse {
        what: what.into(),
        source: Box::new(e),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| parse_err("run config", e))
    }

    /// Fails only for values TOML cannot hold (integers above `i64::MAX`).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| parse_err("serializing run config", e))
    }

    /// Reads a config file; a relative teacher checkpoint path is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_at(path))?;
        let mut c = Self::from_toml(&text).map_err(|e| match e {
            LabError::Parse { source, .. } => parse_err(path.display().to_string(), ParseMessage(source.to_string())),
            other => other,
        })?;
        if let (Some(ckpt), Some(dir)) = (&c.teacher.checkpoint, path.parent()) {
            if ckpt.is_relative() {
                c.teacher.checkpoint = Some(dir.join(ckpt));
            }
        }
        Ok(c)
    }

    pub fn sfd_config(&self) -> SfdConfig {
        let t = &self.train;
        SfdConfig {
            mode: t.mode,
            forgetting: self.loss.forgetting,
            loss: LossWeights {
                lambda_psi: self.loss.lambda_psi,
                mu_psi: self.loss.mu_psi,
                lambda_theta: self.loss.lambda_theta,
                mu_theta: self.loss.mu_theta,
                alpha: self.loss.alpha,
            },
            train: TrainSettings {
                batch_size: t.batch_size,
                steps: t.steps,
                stage1_steps: t.stage1_steps,
                stage2_steps: t.stage2_steps,
                theta_opt: t.theta_opt,
                psi_opt: t.psi_opt,
                ema: t.ema,
                ema_decay: t.ema_decay,
                seed: t.seed,
                eval_interval: self.eval.interval,
                checkpoint_interval: t.checkpoint_interval,
            },
            schedule: self.schedule,
            model: MlpConfig {
                hidden: self.model.hidden.clone(),
                class_dim: self.model.class_dim,
                time_dim: self.model.time_dim,
            },
            warmup: self.model.warmup,
        }
    }

    /// All problems, collected before any compute starts.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let k = self.teacher.spec.num_classes();
        if let Err(e) = self.teacher.spec.validate() {
            out.push(format!("teacher.spec: {e}"));
        }
        out.extend(self.sfd_config().problems(k));
        if self.teacher.kind == TeacherKind::Pretrained && self.teacher.checkpoint.is_none() {
            out.push("teacher.kind = \"pretrained\" requires teacher.checkpoint".into());
        }
        let e = &self.eval;
        if e.full_every == 0 {
            out.push("eval.full_every must be positive".into());
        }
        if e.samples_per_class < 2 {
            out.push("eval.samples_per_class must be at least 2".into());
        }
        if e.knn_k == 0 || e.knn_k >= e.pr_samples {
            out.push(format!("eval.knn_k = {} must lie in [1, pr_samples)", e.knn_k));
        }
        let seeds = [("train.seed", self.train.seed), ("eval.seed", e.seed), ("teacher.pretrain.seed", self.teacher.pretrain.seed)];
        for (name, v) in seeds {
            if v > i64::MAX as u64 {
                out.push(format!("{name} = {v} exceeds the TOML integer range"));
            }
        }
        if e.floor_repeats == 0 {
            out.push("eval.floor_repeats must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(p))
        }
    }

    pub fn run_name(&self) -> String {
        self.io
            .run_name
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", self.train.mode, self.train.seed))
    }
}

#[derive(Debug)]
struct ParseMessage(String);

impl std::fmt::Display for ParseMessage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ParseMessage {}
