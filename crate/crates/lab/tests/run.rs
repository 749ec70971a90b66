use std::fs;
use std::path::Path;

use sfd_core::models::WarmupConfig;
use sfd_core::trainer::Mode;
use sfd_lab::config::{RunConfig, TeacherKind};
use sfd_lab::run::*;
use sfd_lab::{plots, LabError};

fn small(mode: Mode) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.hidden = vec![16];
    c.model.class_dim = 4;
    c.model.time_dim = 4;
    c.model.warmup = WarmupConfig {
        generator_steps: 20,
        fake_steps: 20,
        batch_size: 32,
        ..WarmupConfig::default()
    };
    c.train.mode = mode;
    c.train.batch_size = 16;
    c.train.steps = 60;
    c.train.stage1_steps = 30;
    c.train.stage2_steps = 30;
    c.train.checkpoint_interval = 20;
    c.eval.interval = 10;
    c.eval.full_every = 2;
    c.eval.samples_per_class = 300;
    c.eval.pr_samples = 120;
    c.eval.floor_repeats = 3;
    c
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn run_directory_is_complete_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(Mode::Joint);
    let summary = execute(&c, dir.path(), None).unwrap();
    for f in [CONFIG_FILE, RUN_INFO_FILE, METRICS_FILE, SAMPLES_FILE, SUMMARY_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(lines(&dir.path().join(METRICS_FILE)), 7);
    assert_eq!(lines(&dir.path().join(SAMPLES_FILE)), 1 + 4 * 300);
    for step in [20, 40, 60] {
        assert!(checkpoint_path(dir.path(), step).exists());
    }
    let copy = RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(copy, c);
    let info: RunInfo = serde_json::from_slice(&fs::read(dir.path().join(RUN_INFO_FILE)).unwrap()).unwrap();
    assert_eq!((info.seed, info.mode, info.remaining.clone()), (0, Mode::Joint, vec![1, 2, 3]));
    assert!(!info.version.is_empty());
    assert_eq!(info.frechet_floor.len(), 4);

    let records = read_metrics(dir.path()).unwrap();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 10, 20, 30, 40, 50, 60]);
    assert!(records[0].losses.is_none() && records[1].losses.is_some());
    let full: Vec<u64> = records.iter().filter(|r| r.frechet.is_some()).map(|r| r.step).collect();
    assert_eq!(full, vec![0, 20, 40, 60]);
    for r in &records {
        let ua = r.ua.unwrap();
        assert!((0.0..=1.0).contains(&ua) && r.override_rate.unwrap() <= ua);
        if let (Some(p), Some(q)) = (r.precision, r.recall) {
            assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q));
        }
        assert_eq!(r.kimg, r.step as f64 * 16.0 / 1000.0);
    }
    assert_eq!(summary.steps, 60);
    assert_eq!(summary.frechet.len(), 4);
    assert!(summary.frechet.iter().all(|f| f.unwrap() >= 0.0));
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = small(Mode::Joint);
    execute(&c, a.path(), None).unwrap();
    execute(&c, b.path(), None).unwrap();
    let read = |d: &Path| fs::read(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_one() {
    let full = tempfile::tempdir().unwrap();
    let c = small(Mode::TwoStage);
    execute(&c, full.path(), None).unwrap();

    // an interrupted run: everything up to the step-20 checkpoint, plus a
    // metrics log that already ran past it
    let part = tempfile::tempdir().unwrap();
    fs::create_dir_all(part.path().join(CHECKPOINT_DIR)).unwrap();
    let ckpt = checkpoint_path(part.path(), 20);
    fs::copy(checkpoint_path(full.path(), 20), &ckpt).unwrap();
    fs::copy(full.path().join(METRICS_FILE), part.path().join(METRICS_FILE)).unwrap();
    execute(&c, part.path(), Some(&ckpt)).unwrap();

    for f in [METRICS_FILE, SUMMARY_FILE, SAMPLES_FILE] {
        assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(part.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(
        fs::read(checkpoint_path(full.path(), 60)).unwrap(),
        fs::read(checkpoint_path(part.path(), 60)).unwrap()
    );
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(Mode::Joint);
    execute(&c, dir.path(), None).unwrap();
    let mut other = c.clone();
    other.loss.mu_theta = 0.5;
    let ckpt = checkpoint_path(dir.path(), 20);
    assert!(execute(&other, dir.path(), Some(&ckpt)).is_err());
}

#[test]
fn two_stage_records_are_tagged_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let summary = execute(&small(Mode::TwoStage), dir.path(), None).unwrap();
    let records = read_metrics(dir.path()).unwrap();
    for r in &records {
        assert_eq!(r.stage, if r.step <= 30 { 1 } else { 2 }, "step {}", r.step);
    }
    assert!(records.iter().find(|r| r.step == 30).unwrap().frechet.is_some());
    assert_eq!(summary.stage2_start, Some(30));
}

#[test]
fn divergence_aborts_with_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(Mode::Joint);
    c.train.theta_opt.lr = 1e300;
    c.train.psi_opt.lr = 1e300;
    match execute(&c, dir.path(), None) {
        Err(LabError::Aborted { step, last_good, .. }) => {
            assert!(step < 60);
            assert!(last_good.is_none_or(|p| p.exists()));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_config_fails_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(Mode::Joint);
    c.train.batch_size = 0;
    c.eval.floor_repeats = 0;
    match execute(&c, &dir.path().join("run"), None) {
        Err(LabError::Config(p)) => assert_eq!(p.len(), 2),
        other => panic!("{other:?}"),
    }
    assert!(!dir.path().join("run").exists());
}

#[test]
fn plot_exports_have_one_row_per_record() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    execute(&small(Mode::Joint), a.path(), None).unwrap();
    execute(&small(Mode::TwoStage), b.path(), None).unwrap();
    let out = tempfile::tempdir().unwrap();
    let written = plots::export(a.path(), Some(b.path()), out.path(), 4, &[1, 2, 3]).unwrap();
    assert_eq!(written.len(), 4);
    for name in ["ua_curve.csv", "frechet_curve.csv", "loss_curves.csv"] {
        let text = fs::read_to_string(out.path().join(name)).unwrap();
        assert_eq!(text.lines().count(), 1 + 7, "{name}");
        let steps: Vec<u64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }
    let header = fs::read_to_string(out.path().join("frechet_curve.csv")).unwrap();
    assert!(header.starts_with("step,stage,kimg,frechet_c0,frechet_c1,frechet_c2,frechet_c3,frechet_remaining_mean\n"));
    let cmp = fs::read_to_string(out.path().join("comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 1 + 7);

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(plots::export(empty.path(), None, out.path(), 4, &[1]), Err(LabError::Missing(_))));
}

#[test]
fn pretrained_teacher_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(Mode::Joint);
    let file = sfd_lab::pretrain::pretrain_dsm(
        &c.teacher.spec,
        &sfd_core::schedule::Schedule::new(c.schedule).unwrap(),
        &c.sfd_config().model,
        &sfd_lab::pretrain::PretrainConfig {
            steps: 30,
            batch_size: 32,
            ..Default::default()
        },
    )
    .unwrap();
    let path = dir.path().join("teacher.ckpt");
    file.save(&path).unwrap();
    c.teacher.kind = TeacherKind::Pretrained;
    c.teacher.checkpoint = Some(path);
    let summary = execute(&c, &dir.path().join("run"), None).unwrap();
    assert_eq!(summary.steps, 60);
}
