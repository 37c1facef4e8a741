//! Referring-aware fusion loss: binary cross-entropy, focal loss and a
//! pixel-adaptive Dice loss, combined with per-term weights.
//!
//! All functions take probabilities `p` (not logits) and binary targets `y`
//! of identical dims and return the loss value together with `d loss / d p`.
//! Log terms are evaluated at `p` clamped to `[clamp, 1 - clamp]`; the
//! gradient is the derivative at the clamped point, passed straight through.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CLAMP: f64 = 1e-7;

/// Per-pixel Dice weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptiveWeight {
    /// `|p - y|`
    AbsDiff,
    /// `(1 - p)^gamma`
    FocalStyle,
}

/// Pixel reduction for the BCE and focal terms. The Dice term is a ratio and
/// is unaffected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RafConfig {
    pub lambda_bce: f64,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
    pub adaptive: AdaptiveWeight,
    pub clamp: f64,
    pub normalize: Normalize,
}

impl Default for RafConfig {
    fn default() -> Self {
        RafConfig {
            lambda_bce: 1.0,
            lambda_focal: 1.0,
            lambda_dice: 1.0,
            alpha: 0.25,
            gamma: 2.0,
            eps: 1.0,
            adaptive: AdaptiveWeight::AbsDiff,
            clamp: DEFAULT_CLAMP,
            normalize: Normalize::Sum,
        }
    }
}

impl RafConfig {
    /// BCE-only objective with otherwise default settings.
    pub fn bce_only() -> Self {
        RafConfig {
            lambda_focal: 0.0,
            lambda_dice: 0.0,
            ..RafConfig::default()
        }
    }

    pub fn with_lambdas(mut self, bce: f64, focal: f64, dice: f64) -> Self {
        self.lambda_bce = bce;
        self.lambda_focal = focal;
        self.lambda_dice = dice;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_bce, self.lambda_focal, self.lambda_dice];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::validation(format!(
                "loss weights must be finite and nonnegative, got {lambdas:?}"
            )));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::validation("at least one loss weight must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::validation(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::validation(format!("eps must be > 0, got {}", self.eps)));
        }
        check_clamp(self.clamp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub bce: f64,
    pub focal: f64,
    pub dice: f64,
    pub grad_p: Tensor,
}

fn check_clamp(clamp: f64) -> Result<()> {
    if clamp > 0.0 && clamp < 0.5 {
        Ok(())
    } else {
        Err(Error::validation(format!("clamp must lie in (0, 0.5), got {clamp}")))
    }
}

fn check_inputs(p: &Tensor, y: &Tensor) -> Result<()> {
    if p.dims() != y.dims() {
        return Err(Error::shape(format!(
            "predictions {:?} and targets {:?} differ in shape",
            p.dims(),
            y.dims()
        )));
    }
    if let Some(i) = y.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::validation(format!(
            "target value {} at index {i} is not binary",
            y.data()[i]
        )));
    }
    if let Some(i) = p.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("prediction at index {i} is not finite")));
    }
    if let Some(i) = p.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::validation(format!(
            "prediction {} at index {i} is outside [0, 1]",
            p.data()[i]
        )));
    }
    Ok(())
}

fn sum_ordered(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, |a, b| a + b)
}

/// `-sum_i [y log p + (1 - y) log(1 - p)]`.
pub fn bce(p: &Tensor, y: &Tensor, clamp: f64) -> Result<(f64, Tensor)> {
    check_inputs(p, y)?;
    check_clamp(clamp)?;
    let mut grad = Vec::with_capacity(p.len());
    let loss = sum_ordered(p.data().iter().zip(y.data()).map(|(&pi, &yi)| {
        let pc = pi.clamp(clamp, 1.0 - clamp);
        grad.push(-(yi / pc - (1.0 - yi) / (1.0 - pc)));
        -(yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln())
    }));
    Ok((loss, Tensor::from_raw(p.dims().to_vec(), grad, p.dtype())))
}

/// `-sum_i [a y (1 - p)^g log p + (1 - a)(1 - y) p^g log(1 - p)]`.
pub fn focal(p: &Tensor, y: &Tensor, alpha: f64, gamma: f64, clamp: f64) -> Result<(f64, Tensor)> {
    check_inputs(p, y)?;
    check_clamp(clamp)?;
    if !(alpha > 0.0 && alpha < 1.0) || !(gamma >= 0.0) {
        return Err(Error::validation(format!(
            "focal loss needs alpha in (0, 1) and gamma >= 0, got alpha={alpha} gamma={gamma}"
        )));
    }
    let mut grad = Vec::with_capacity(p.len());
    let loss = sum_ordered(p.data().iter().zip(y.data()).map(|(&pi, &yi)| {
        let pc = pi.clamp(clamp, 1.0 - clamp);
        let q = 1.0 - pc;
        let (lp, lq) = (pc.ln(), q.ln());
        let pos = alpha * yi;
        let neg = (1.0 - alpha) * (1.0 - yi);
        let d_pos = pos * (q.powf(gamma) / pc - gamma * q.powf(gamma - 1.0) * lp);
        let d_neg = neg * (gamma * pc.powf(gamma - 1.0) * lq - pc.powf(gamma) / q);
        grad.push(-(d_pos + d_neg));
        -(pos * q.powf(gamma) * lp + neg * pc.powf(gamma) * lq)
    }));
    Ok((loss, Tensor::from_raw(p.dims().to_vec(), grad, p.dtype())))
}

/// Per-pixel Dice weights for `mode`, evaluated at the unclamped `p`.
pub fn adaptive_weights(p: &Tensor, y: &Tensor, mode: AdaptiveWeight, gamma: f64) -> Result<Tensor> {
    check_inputs(p, y)?;
    let data = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pi, &yi)| match mode {
            AdaptiveWeight::AbsDiff => (pi - yi).abs(),
            AdaptiveWeight::FocalStyle => (1.0 - pi).powf(gamma),
        })
        .collect();
    Ok(Tensor::from_raw(p.dims().to_vec(), data, p.dtype()))
}

/// Weighted Dice loss `1 - (2 sum w p y + eps) / (sum w p + sum w y + eps)`
/// with the weights `w` held fixed.
pub fn weighted_dice(p: &Tensor, y: &Tensor, w: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    check_inputs(p, y)?;
    if w.dims() != p.dims() {
        return Err(Error::shape(format!(
            "dice weights {:?} do not match predictions {:?}",
            w.dims(),
            p.dims()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::validation(format!("eps must be > 0, got {eps}")));
    }
    let triples = || p.data().iter().zip(y.data()).zip(w.data());
    let inter = sum_ordered(triples().map(|((&pi, &yi), &wi)| wi * pi * yi));
    let sp = sum_ordered(triples().map(|((&pi, _), &wi)| wi * pi));
    let sy = sum_ordered(triples().map(|((_, &yi), &wi)| wi * yi));
    let num = 2.0 * inter + eps;
    let den = sp + sy + eps;
    let loss = 1.0 - num / den;
    let grad = triples()
        .map(|((_, &yi), &wi)| -(2.0 * wi * yi * den - num * wi) / (den * den))
        .collect();
    Ok((loss, Tensor::from_raw(p.dims().to_vec(), grad, p.dtype())))
}

/// Pixel-adaptive Dice loss. The weights are treated as constants when
/// differentiating.
pub fn adaptive_dice(
    p: &Tensor,
    y: &Tensor,
    mode: AdaptiveWeight,
    gamma: f64,
    eps: f64,
) -> Result<(f64, Tensor)> {
    let w = adaptive_weights(p, y, mode, gamma)?;
    weighted_dice(p, y, &w, eps)
}

/// `lambda_bce * bce + lambda_focal * focal + lambda_dice * dice`.
pub fn raf(p: &Tensor, y: &Tensor, cfg: &RafConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let (mut b, mut gb) = bce(p, y, cfg.clamp)?;
    let (mut f, mut gf) = focal(p, y, cfg.alpha, cfg.gamma, cfg.clamp)?;
    let (d, gd) = adaptive_dice(p, y, cfg.adaptive, cfg.gamma, cfg.eps)?;
    if cfg.normalize == Normalize::Mean {
        let inv = 1.0 / p.len() as f64;
        b *= inv;
        f *= inv;
        gb = gb.scale(inv);
        gf = gf.scale(inv);
    }
    let total = cfg.lambda_bce * b + cfg.lambda_focal * f + cfg.lambda_dice * d;
    let grad = gb
        .data()
        .iter()
        .zip(gf.data())
        .zip(gd.data())
        .map(|((&x, &yv), &z)| cfg.lambda_bce * x + cfg.lambda_focal * yv + cfg.lambda_dice * z)
        .collect();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {total}")));
    }
    Ok(LossOutput {
        total,
        bce: b,
        focal: f,
        dice: d,
        grad_p: Tensor::from_raw(p.dims().to_vec(), grad, p.dtype()),
    })
}
