use std::fs;

use drk_core::data::{self, DatasetSpec};
use drk_core::metrics::PREC_THRESHOLDS;
use drk_core::model::MicroModel;
use drk_core::train::{self, TrainConfig, CHECKPOINT_FILE, HISTORY_FILE, HISTORY_HEADER};

fn quick_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.optim.milestones = vec![1, 2];
    cfg
}

#[test]
fn writes_history_and_reloadable_checkpoint() {
    let samples = data::generate(&DatasetSpec {
        n_samples: 40,
        ..DatasetSpec::default()
    })
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let out = train::train(&samples, &cfg, Some(tmp.path())).unwrap();

    let history = fs::read_to_string(tmp.path().join(HISTORY_FILE)).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], HISTORY_HEADER);
    assert_eq!(lines.len(), 1 + cfg.epochs);
    let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, [cfg.optim.lr_at(0), cfg.optim.lr_at(1), cfg.optim.lr_at(2)]);
    assert!(out.history.iter().all(|r| r.loss_total.is_finite() && r.val_miou.is_some()));

    let reloaded = MicroModel::load(&tmp.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(reloaded.params(), out.model.params());

    let (_, val) = train::split_indices(samples.len(), cfg.val_fraction);
    assert_eq!(val.len(), 8);
    let report = train::evaluate_model(&reloaded, &samples, &val, cfg.threshold).unwrap();
    assert_eq!(Some(&report), out.final_eval.as_ref());
    assert_eq!(report.prec_at.len(), PREC_THRESHOLDS.len());
    assert!(tmp.path().read_dir().unwrap().count() == 2);
}

#[test]
fn seed_changes_outcome() {
    let samples = data::generate(&DatasetSpec {
        n_samples: 16,
        ..DatasetSpec::default()
    })
    .unwrap();
    let mut cfg = quick_config();
    cfg.epochs = 1;
    let a = train::train(&samples, &cfg, None).unwrap();
    let b = train::train(&samples, &cfg, None).unwrap();
    assert_eq!(a.history, b.history);
    cfg.seed = 1;
    let c = train::train(&samples, &cfg, None).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn rejects_bad_configs() {
    let samples = data::generate(&DatasetSpec {
        n_samples: 4,
        ..DatasetSpec::default()
    })
    .unwrap();
    let mut cfg = quick_config();
    cfg.batch_size = 0;
    assert!(train::train(&samples, &cfg, None).is_err());
    assert!(train::train(&[], &quick_config(), None).is_err());

    let mut cfg = TrainConfig::default();
    assert!(cfg.apply_text("lr = fast").is_err());
    assert!(cfg.apply_text("epochs 3").is_err());
    let mut cfg = TrainConfig::default();
    cfg.apply_text("# comment\nlr = 0.01  # trailing\nmilestones = 5, 8\nclip_norm = 1.5\n")
        .unwrap();
    assert_eq!(cfg.optim.base_lr, 0.01);
    assert_eq!(cfg.optim.milestones, [5, 8]);
    assert_eq!(cfg.optim.clip_max_norm, 1.5);
}
