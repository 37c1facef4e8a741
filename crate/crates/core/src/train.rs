//! Training loop, evaluation and the four-variant ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::ToySample;
use crate::enhance::BlockFeatures;
use crate::error::{Error, Result};
use crate::loss::{raf, AdaptiveWeight, Normalize, RafConfig};
use crate::metrics::{binarize, iou, EvalReport, Mask, PREC_THRESHOLDS};
use crate::model::{param_names, stack_batch, MicroModel, ModelConfig};
use crate::optim::{clip_grads, OptimConfig, OptimState};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "model.dckp";
pub const HISTORY_HEADER: &str = "epoch,lr,loss_total,loss_bce,loss_focal,loss_dice,val_miou";
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub loss: RafConfig,
    pub model: ModelConfig,
    pub eval_every_epoch: bool,
    pub val_fraction: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 30 epochs, batch 16, lr 3e-3 decayed at epochs
    /// 10 and 20.
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            optim: OptimConfig {
                base_lr: 3e-3,
                milestones: vec![10, 20],
                ..OptimConfig::default()
            },
            loss: RafConfig {
                normalize: Normalize::Mean,
                ..RafConfig::default()
            },
            model: ModelConfig::default(),
            eval_every_epoch: true,
            val_fraction: 0.2,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 50 epochs, batch 64, lr 1e-4 decayed by 0.1 at
    /// epochs 15 and 30.
    pub fn paper_scale() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            optim: OptimConfig::default(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::validation(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::validation("threshold must lie in [0, 1)"));
        }
        self.optim.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// Applies `key = value` lines over `self`. `#` starts a comment; unknown
    /// keys and malformed values are validation errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|m| Error::validation(format!("line {}: {m}", lineno + 1)))?;
        }
        self.validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value '{v}' for {key}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(format!("bad value '{v}' for {key}, expected true or false")),
            }
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lr" => self.optim.base_lr = num(key, value)?,
            "milestones" => {
                self.optim.milestones = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<std::result::Result<_, _>>()?
            }
            "decay" => self.optim.decay = num(key, value)?,
            "clip_norm" => self.optim.clip_max_norm = num(key, value)?,
            "lambda_bce" => self.loss.lambda_bce = num(key, value)?,
            "lambda_focal" => self.loss.lambda_focal = num(key, value)?,
            "lambda_dice" => self.loss.lambda_dice = num(key, value)?,
            "alpha" => self.loss.alpha = num(key, value)?,
            "gamma" => self.loss.gamma = num(key, value)?,
            "dice_eps" => self.loss.eps = num(key, value)?,
            "adaptive" => {
                self.loss.adaptive = match value {
                    "absdiff" => AdaptiveWeight::AbsDiff,
                    "focal" => AdaptiveWeight::FocalStyle,
                    _ => return Err(format!("bad value '{value}' for adaptive")),
                }
            }
            "normalize" => {
                self.loss.normalize = match value {
                    "sum" => Normalize::Sum,
                    "mean" => Normalize::Mean,
                    _ => return Err(format!("bad value '{value}' for normalize")),
                }
            }
            "eval_every_epoch" => self.eval_every_epoch = flag(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "channels" => self.model.channels = num(key, value)?,
            "coord_channels" => self.model.coord_channels = flag(key, value)?,
            "reduction" => self.model.reduction = num(key, value)?,
            "head_bias" => self.model.head_bias = num(key, value)?,
            "deformable" => self.model.features.deformable = flag(key, value)?,
            "se" => self.model.features.se = flag(key, value)?,
            "residual" => self.model.features.residual = flag(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_bce: f64,
    pub loss_focal: f64,
    pub loss_dice: f64,
    pub val_miou: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let miou = r.val_miou.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.loss_total, r.loss_bce, r.loss_focal, r.loss_dice, miou
        );
    }
    out
}

/// Train and validation indices: the last `val_fraction` of the samples by
/// index are held out.
pub fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MicroModel,
    pub history: Vec<EpochRecord>,
    /// Validation report after the final epoch, when a split exists.
    pub final_eval: Option<EvalReport>,
}

fn batch_tensors(data: &[ToySample], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = idx.iter().map(|&i| &data[i].image).collect();
    let attrs: Vec<&Tensor> = idx.iter().map(|&i| &data[i].attr).collect();
    stack_batch(&images, &attrs)
}

/// Foreground probabilities for each listed sample, `[1, 1, H, W]` each.
pub fn predict(model: &MicroModel, data: &[ToySample], idx: &[usize]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, a) = batch_tensors(data, chunk)?;
        let p = model.forward(&x, &a)?;
        let (_, _, h, w) = p.nchw()?;
        for (k, _) in chunk.iter().enumerate() {
            let slice = p.data()[k * h * w..(k + 1) * h * w].to_vec();
            out.push(Tensor::from_vec_typed(&[1, 1, h, w], slice, DType::F64)?);
        }
    }
    Ok(out)
}

pub fn predict_masks(
    model: &MicroModel,
    data: &[ToySample],
    idx: &[usize],
    threshold: f64,
) -> Result<Vec<Mask>> {
    predict(model, data, idx)?
        .iter()
        .map(|p| binarize(p, threshold))
        .collect()
}

pub fn evaluate_model(
    model: &MicroModel,
    data: &[ToySample],
    idx: &[usize],
    threshold: f64,
) -> Result<EvalReport> {
    let masks = predict_masks(model, data, idx, threshold)?;
    let per_sample = idx
        .iter()
        .zip(&masks)
        .map(|(&i, m)| Ok((data[i].sample_id.clone(), iou(m, &data[i].mask)?)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_ious(per_sample)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_progress(dir: &Path, model: &MicroModel, history: &[EpochRecord]) -> Result<()> {
    let mut ckpt = Vec::new();
    model.write_checkpoint(&mut ckpt)?;
    write_atomic(&dir.join(CHECKPOINT_FILE), &ckpt)?;
    write_atomic(&dir.join(HISTORY_FILE), history_csv(history).as_bytes())
}

/// Trains on the leading split of `data`. With `out` set, the history CSV
/// and the checkpoint are rewritten after every epoch, so a diverged run
/// leaves the last good checkpoint in place.
pub fn train(data: &[ToySample], cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training needs a nonempty dataset"));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction);
    let mut model = MicroModel::init(cfg.seed, &cfg.model)?;
    let mut opt = OptimState::new(&model.params(), cfg.optim.clone())?;
    let shuffle_root = Rng::new(cfg.seed).fork("shuffle");
    let targets: Vec<Tensor> = data.iter().map(|s| s.mask.to_tensor()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = opt.lr_at(epoch);
        let mut order = train_idx.clone();
        shuffle_root.fork(&format!("epoch/{epoch}")).shuffle(&mut order);
        let mut sums = [0.0; 4];
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, a) = batch_tensors(data, batch)?;
            let tr = model.trace(&x, &a)?;
            let (_, _, h, w) = tr.prob.nchw()?;
            let hw = h * w;
            let inv = 1.0 / batch.len() as f64;
            let mut grad = Vec::with_capacity(tr.prob.len());
            for (k, &i) in batch.iter().enumerate() {
                let p = Tensor::from_vec_typed(
                    &[1, 1, h, w],
                    tr.prob.data()[k * hw..(k + 1) * hw].to_vec(),
                    DType::F64,
                )?;
                let l = raf(&p, &targets[i], &cfg.loss)?;
                if !l.total.is_finite() {
                    return Err(Error::Training(format!(
                        "loss diverged at epoch {epoch}, batch {bi}"
                    )));
                }
                for (s, v) in sums.iter_mut().zip([l.total, l.bce, l.focal, l.dice]) {
                    *s += v;
                }
                grad.extend(l.grad_p.data().iter().map(|g| g * inv));
            }
            let grad = Tensor::from_vec_typed(tr.prob.dims(), grad, DType::F64)?;
            let mut grads = model.backward(&tr, &a, &grad)?;
            clip_grads(&mut grads, cfg.optim.clip_max_norm);
            opt.adam_step(model.params_mut(), &grads, lr, param_names())?;
        }
        let n = train_idx.len() as f64;
        let last = epoch + 1 == cfg.epochs;
        let val_miou = if !val_idx.is_empty() && (cfg.eval_every_epoch || last) {
            Some(evaluate_model(&model, data, &val_idx, cfg.threshold)?.miou)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            lr,
            loss_total: sums[0] / n,
            loss_bce: sums[1] / n,
            loss_focal: sums[2] / n,
            loss_dice: sums[3] / n,
            val_miou,
        });
        if let Some(dir) = out {
            save_progress(dir, &model, &history)?;
        }
    }
    let final_eval = if val_idx.is_empty() {
        None
    } else {
        Some(evaluate_model(&model, data, &val_idx, cfg.threshold)?)
    };
    Ok(TrainOutcome {
        model,
        history,
        final_eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// plain conv in place of the block, BCE only
    Baseline,
    /// plain conv, full fusion loss
    FusionLoss,
    /// deformable conv and residual shortcut, full fusion loss
    DeformResidual,
    /// everything, including channel attention
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::FusionLoss,
        Variant::DeformResidual,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::FusionLoss => "+raf",
            Variant::DeformResidual => "+deform+residual",
            Variant::Full => "+se",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let on = |d, r, s| BlockFeatures {
            deformable: d,
            residual: r,
            se: s,
        };
        let (features, bce_only) = match self {
            Variant::Baseline => (on(false, false, false), true),
            Variant::FusionLoss => (on(false, false, false), false),
            Variant::DeformResidual => (on(true, true, false), false),
            Variant::Full => (on(true, true, true), false),
        };
        cfg.model.features = features;
        if bce_only {
            cfg.loss = cfg.loss.with_lambdas(1.0, 0.0, 0.0);
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Final validation mIoU for each seed, in seed order.
    pub seed_miou: Vec<f64>,
    pub miou: f64,
    /// Mean Prec@K over seeds, for K in 50..=90.
    pub prec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const HEADER: &'static str = "variant,iou,p50,p60,p70,p80,p90";

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = write!(out, "{},{:.4}", r.variant.name(), r.miou);
            for p in &r.prec {
                let _ = write!(out, ",{p:.4}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains every variant once per seed on identical data and schedules.
/// `progress` is called after each run with `(variant, seed, report)`.
pub fn ablate(
    data: &[ToySample],
    base: &TrainConfig,
    seeds: &[u64],
    mut progress: impl FnMut(Variant, u64, &EvalReport),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::validation("ablation needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        let mut seed_miou = Vec::with_capacity(seeds.len());
        let mut prec = vec![0.0; PREC_THRESHOLDS.len()];
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            let outcome = train(data, &cfg, None)?;
            let report = outcome
                .final_eval
                .ok_or_else(|| Error::validation("ablation needs a validation split"))?;
            progress(v, seed, &report);
            seed_miou.push(report.miou);
            for (acc, (_, p)) in prec.iter_mut().zip(&report.prec_at) {
                *acc += p / seeds.len() as f64;
            }
        }
        let miou = seed_miou.iter().sum::<f64>() / seeds.len() as f64;
        rows.push(AblationRow {
            variant: v,
            seed_miou,
            miou,
            prec,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn tiny_data(n: usize) -> Vec<ToySample> {
        generate(&DatasetSpec {
            n_samples: n,
            image_size: 32,
            seed: 1,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn split_is_by_index() {
        let (t, v) = split_indices(10, 0.2);
        assert_eq!(t, (0..8).collect::<Vec<_>>());
        assert_eq!(v, vec![8, 9]);
        let (t, v) = split_indices(1, 0.2);
        assert_eq!((t.len(), v.len()), (1, 0));
    }

    #[test]
    fn smoke_one_epoch() {
        let data = tiny_data(8);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg, None).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].loss_total.is_finite());
        assert!(out.history[0].val_miou.is_some());
    }

    #[test]
    fn config_text() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# comment\nepochs = 3\nmilestones = 1, 2\nse = false # trailing\n\nadaptive = focal\n")
            .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.optim.milestones, vec![1, 2]);
        assert!(!cfg.model.features.se);
        assert_eq!(cfg.loss.adaptive, AdaptiveWeight::FocalStyle);
        for bad in ["bogus = 1", "epochs = x", "epochs", "epochs = 0", "se = maybe"] {
            let mut c = TrainConfig::default();
            assert!(matches!(c.apply_text(bad), Err(Error::Validation(_))), "{bad}");
        }
    }

    #[test]
    fn variants_differ_only_where_intended() {
        let base = TrainConfig::default();
        let c = Variant::DeformResidual.apply(&base);
        let d = Variant::Full.apply(&base);
        assert_eq!(c.loss, d.loss);
        assert!(!c.model.features.se && d.model.features.se);
        let mc = MicroModel::init(3, &c.model).unwrap();
        let md = MicroModel::init(3, &d.model).unwrap();
        assert_eq!(mc.params(), md.params());
        let a = Variant::Baseline.apply(&base);
        assert_eq!((a.loss.lambda_focal, a.loss.lambda_dice), (0.0, 0.0));
    }

    #[test]
    fn history_csv_layout() {
        let h = vec![EpochRecord {
            epoch: 0,
            lr: 0.001,
            loss_total: 1.5,
            loss_bce: 0.5,
            loss_focal: 0.25,
            loss_dice: 0.75,
            val_miou: None,
        }];
        assert_eq!(
            history_csv(&h),
            format!("{HISTORY_HEADER}\n0,0.001,1.5,0.5,0.25,0.75,\n")
        );
    }
}
