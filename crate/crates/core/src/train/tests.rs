use super::*;
use crate::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use crate::corpus::{generate, GeneratorConfig};

fn setup() -> (Corpus, TeacherModel, TeacherModel, TeacherCache, TrainConfig) {
    let corpus = generate(&GeneratorConfig::imbalanced(120, 5)).unwrap();
    let ti = TeacherModel::oracle(Modality::Image);
    let tt = TeacherModel::oracle(Modality::Text);
    let cache = TeacherCache::compute(&corpus, &ti, &tt).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    (corpus, ti, tt, cache, cfg)
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig::default();
    let total = 100;
    assert_eq!(lr_at(0, total, &cfg), 0.0);
    assert_eq!(lr_at(10, total, &cfg), cfg.lr_peak);
    assert!((lr_at(5, total, &cfg) - cfg.lr_peak / 2.0).abs() < 1e-15);
    assert!((lr_at(total, total, &cfg) - cfg.lr_floor).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for s in 10..=total {
        let lr = lr_at(s, total, &cfg);
        assert!(lr <= prev + 1e-15 && lr >= cfg.lr_floor - 1e-15);
        prev = lr;
    }
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_floor: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    assert_ne!(TrainConfig::default().hash(), TrainConfig { seed: 1, ..TrainConfig::default() }.hash());
}

#[test]
fn runs_are_deterministic_and_teachers_stay_frozen() {
    let (corpus, ti, tt, cache, cfg) = setup();
    let before = (ti.param_hash(), tt.param_hash());
    let a = train_run(&corpus, &cache, &cfg).unwrap();
    let b = train_run(&corpus, &cache, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(checkpoint_bytes(&a, &cfg).unwrap(), checkpoint_bytes(&b, &cfg).unwrap());
    assert_eq!(before, (ti.param_hash(), tt.param_hash()));
    assert_eq!(a.step, total_steps(&corpus, &cfg).unwrap());
    assert_eq!(a.lambda_trajectory.len() as u64, a.step + 1);
    assert!(a.lambda_trajectory.iter().all(|l| *l > 0.0 && *l < 1.0));
    assert!(a.loss_history.iter().all(|r| r.total.is_finite()));
    let c = train_run(&corpus, &cache, &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn resumed_run_is_bit_identical() {
    let (corpus, _, _, cache, cfg) = setup();
    let full = train_run(&corpus, &cache, &cfg).unwrap();

    let mut part = RunState::new(&cfg).unwrap();
    run_steps(&mut part, &corpus, &cache, &cfg, Some(11), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mid.ckpt");
    save_checkpoint(&part, &cfg, &p).unwrap();
    let (mut resumed, cfg2) = load_checkpoint(&p).unwrap();
    assert_eq!(resumed, part);
    run_steps(&mut resumed, &corpus, &cache, &cfg2, None, None).unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn run_log_has_one_line_per_step() {
    let (corpus, _, _, cache, cfg) = setup();
    let mut state = RunState::new(&cfg).unwrap();
    let mut buf: Vec<u8> = Vec::new();
    run_steps(&mut state, &corpus, &cache, &cfg, Some(5), Some(&mut buf)).unwrap();
    let lines: Vec<StepRecord> = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines, state.loss_history);
    assert_eq!(lines[0].step, 0);
    assert!(lines[0].lr > 0.0);
}

#[test]
fn fixed_lambda_never_moves() {
    let (corpus, _, _, cache, cfg) = setup();
    let cfg = TrainConfig {
        lambda_mode: LambdaMode::Fixed(0.2),
        ..cfg
    };
    let s = train_run(&corpus, &cache, &cfg).unwrap();
    assert!(s.lambda_trajectory.iter().all(|l| (l - 0.2).abs() < 1e-12));
    assert!(s.loss_history.iter().all(|r| r.lambda == 0.2));
}

#[test]
fn ablated_term_matches_run_without_it() {
    let (corpus, _, _, cache, cfg) = setup();
    let cfg = TrainConfig {
        epochs: 1,
        ablations: Ablations::without(crate::losses::LossName::Sa),
        ..cfg
    };
    let s = train_run(&corpus, &cache, &cfg).unwrap();
    assert!(s.loss_history.iter().all(|r| r.sa == 0.0));
    // λ only enters through the structure term
    assert!(s.lambda_trajectory.iter().all(|l| *l == 0.5));
}

#[test]
fn too_small_train_split_is_a_config_error() {
    let (corpus, _, _, cache, cfg) = setup();
    let cfg = TrainConfig {
        batch_size: 500,
        ..cfg
    };
    assert!(matches!(train_run(&corpus, &cache, &cfg), Err(Error::Config(_))));
}
