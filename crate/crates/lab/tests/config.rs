use proptest::prelude::*;
use sfd_core::trainer::Mode;
use sfd_lab::config::*;
use sfd_lab::LabError;

#[test]
fn default_round_trips_and_lists_every_section() {
    let c = RunConfig::default();
    let text = c.to_toml().unwrap();
    for section in ["[teacher]", "[schedule]", "[model]", "[loss]", "[train]", "[eval]", "[io]"] {
        assert!(text.contains(section), "{section} missing from\n{text}");
    }
    let back = RunConfig::from_toml(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_toml().unwrap(), text);
    assert!(c.validate().is_ok());
}

#[test]
fn defaults_are_the_joint_recipe() {
    let c = RunConfig::default();
    assert_eq!(c.train.mode, Mode::Joint);
    assert_eq!(c.train.batch_size, 128);
    assert_eq!((c.loss.lambda_psi, c.loss.mu_psi, c.loss.lambda_theta, c.loss.mu_theta), (1.0, 0.01, 1.0, 0.01));
    assert_eq!(c.loss.alpha, 1.2);
    assert_eq!(c.eval.samples_per_class, 10_000);
    assert_eq!(c.eval.knn_k, 3);
    assert_eq!(c.sfd_config().train.eval_interval, c.eval.interval);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = RunConfig::default().to_toml().unwrap().replace("[train]\n", "[train]\nlearning_rate = 0.1\n");
    match RunConfig::from_toml(&text) {
        Err(LabError::Parse { source, .. }) => assert!(source.to_string().contains("learning_rate"), "{source}"),
        other => panic!("{other:?}"),
    }
    let text = RunConfig::default().to_toml().unwrap() + "\n[extra]\nx = 1\n";
    assert!(RunConfig::from_toml(&text).is_err());
}

#[test]
fn validation_reports_all_problems_at_once() {
    let mut c = RunConfig::default();
    c.train.batch_size = 0;
    c.eval.knn_k = 0;
    c.teacher.kind = TeacherKind::Pretrained;
    c.loss.alpha = -2.0;
    match c.validate() {
        Err(LabError::Config(p)) => assert_eq!(p.len(), 4, "{p:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn seeds_beyond_toml_integers_are_a_validation_error() {
    let mut c = RunConfig::default();
    c.train.seed = u64::MAX;
    assert!(matches!(c.validate(), Err(LabError::Config(_))));
    assert!(c.to_toml().is_err());
}

#[test]
fn omitted_forgetting_means_plain_distillation() {
    let mut c = RunConfig::default();
    c.loss.forgetting = None;
    c.train.mode = Mode::DistillOnly;
    let text = c.to_toml().unwrap();
    assert!(!text.contains("forgetting"));
    let back = RunConfig::from_toml(&text).unwrap();
    assert_eq!(back.loss.forgetting, None);
    assert!(back.validate().is_ok());
}

#[test]
fn relative_teacher_checkpoint_resolves_against_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::default();
    c.teacher.kind = TeacherKind::Pretrained;
    c.teacher.checkpoint = Some("teacher.ckpt".into());
    let path = dir.path().join("run.toml");
    std::fs::write(&path, c.to_toml().unwrap()).unwrap();
    let back = RunConfig::load(&path).unwrap();
    assert_eq!(back.teacher.checkpoint.unwrap(), dir.path().join("teacher.ckpt"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_edits_round_trip(
        seed in 0..=i64::MAX as u64,
        lr in 1e-7f64..1.0,
        mu in 0.0f64..10.0,
        alpha in 0.0f64..3.0,
        steps in 1u64..1_000_000,
        mode in prop::sample::select(vec![Mode::Joint, Mode::TwoStage, Mode::Kl, Mode::DistillOnly]),
    ) {
        let mut c = RunConfig::default();
        c.train.seed = seed;
        c.train.theta_opt.lr = lr;
        c.loss.mu_theta = mu;
        c.loss.alpha = alpha;
        c.train.steps = steps;
        c.train.mode = mode;
        let once = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&once, &c);
        prop_assert_eq!(RunConfig::from_toml(&once.to_toml().unwrap()).unwrap(), once);
    }
}
