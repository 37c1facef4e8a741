//! Seeded gradient-check suites, one per differentiable component.
//!
//! Every instance draws fresh random inputs and parameters, reduces the
//! component output to a scalar with a fixed random projection, and compares
//! the analytic gradient of every input and parameter tensor against
//! [`fd_gradient`].

use std::fmt;

use super::{check, fd_gradient, GradReport, STEP, TOL_DEFORM, TOL_LOSS, TOL_SMOOTH};
use crate::enhance::{
    deform_conv_bwd, deform_conv_fwd, deform_sample_bwd, deform_sample_fwd, dyn_conv_apply,
    dyn_conv_bwd, enhance_block_bwd, enhance_block_fwd, residual_bwd, residual_fuse, se_bwd,
    se_fwd, BlockFeatures, DeformConvParams, DynConvParams, EnhanceParams, ResidualParams,
    SeParams,
};
use crate::error::{Error, Result};
use crate::layers::{
    conv2d_bwd, conv2d_fwd, linear_bwd, linear_fwd, uniform_tensor, upsample_bilinear,
    upsample_bilinear_bwd, Conv2dParams, LinearParams,
};
use crate::loss::{
    adaptive_dice, adaptive_weights, bce, focal, raf, weighted_dice, AdaptiveWeight, RafConfig,
    DEFAULT_CLAMP,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Absolute error below which an element passes regardless of its relative
/// error; about the rounding noise of a central difference at `STEP`.
pub const ABS_TOL: f64 = 1e-9;
pub const DEFAULT_INSTANCES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Conv2d,
    Linear,
    Upsample,
    Bilinear,
    Deform,
    Se,
    Residual,
    Enhance,
    DynConv,
    Bce,
    Focal,
    Dice,
    Raf,
}

impl Target {
    pub const ALL: [Target; 13] = [
        Target::Conv2d,
        Target::Linear,
        Target::Upsample,
        Target::Bilinear,
        Target::Deform,
        Target::Se,
        Target::Residual,
        Target::Enhance,
        Target::DynConv,
        Target::Bce,
        Target::Focal,
        Target::Dice,
        Target::Raf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Conv2d => "conv2d",
            Target::Linear => "linear",
            Target::Upsample => "upsample",
            Target::Bilinear => "bilinear",
            Target::Deform => "deform",
            Target::Se => "se",
            Target::Residual => "residual",
            Target::Enhance => "enhance",
            Target::DynConv => "dynconv",
            Target::Bce => "bce",
            Target::Focal => "focal",
            Target::Dice => "dice",
            Target::Raf => "raf",
        }
    }

    pub fn parse(name: &str) -> Option<Target> {
        Target::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Target::Bilinear | Target::Deform | Target::Enhance => TOL_DEFORM,
            Target::Bce | Target::Focal | Target::Dice | Target::Raf => TOL_LOSS,
            _ => TOL_SMOOTH,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct ModuleReport {
    pub target: Target,
    pub tolerance: f64,
    pub instances: usize,
    /// One entry per checked tensor, labelled `instance/tensor`.
    pub checks: Vec<(String, GradReport)>,
}

impl ModuleReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, (_, r)| m.max(r.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|(_, r)| r.passed)
    }

    pub fn worst(&self) -> Option<&(String, GradReport)> {
        self.checks
            .iter()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
    }

    /// `module=<name> max_rel_err=<e> pass=<bool>`
    pub fn line(&self) -> String {
        format!(
            "module={} max_rel_err={:.3e} pass={}",
            self.target,
            self.max_rel_err(),
            self.passed()
        )
    }
}

struct Collector {
    tol: f64,
    prefix: String,
    checks: Vec<(String, GradReport)>,
}

impl Collector {
    fn probe<F>(&mut self, label: &str, base: &Tensor, analytic: &Tensor, f: F) -> Result<()>
    where
        F: Fn(&Tensor) -> Result<f64>,
    {
        let numeric = fd_gradient(f, base, STEP)?;
        let report = check(analytic, &numeric, self.tol, ABS_TOL)?;
        self.checks.push((format!("{}/{label}", self.prefix), report));
        Ok(())
    }
}

pub fn run(target: Target, seed: u64, instances: usize) -> Result<ModuleReport> {
    if instances == 0 {
        return Err(Error::validation("gradient check needs at least one instance"));
    }
    let root = Rng::new(seed);
    let mut col = Collector {
        tol: target.tolerance(),
        prefix: String::new(),
        checks: Vec::new(),
    };
    for i in 0..instances {
        col.prefix = format!("#{i}");
        let mut rng = root.fork(&format!("{target}/{i}"));
        match target {
            Target::Conv2d => conv2d_case(&mut rng, i, &mut col)?,
            Target::Linear => linear_case(&mut rng, &mut col)?,
            Target::Upsample => upsample_case(&mut rng, i, &mut col)?,
            Target::Bilinear => bilinear_case(&mut rng, &mut col)?,
            Target::Deform => deform_case(&mut rng, &mut col)?,
            Target::Se => se_case(&mut rng, &mut col)?,
            Target::Residual => residual_case(&mut rng, i, &mut col)?,
            Target::Enhance => enhance_case(&mut rng, i, &mut col)?,
            Target::DynConv => dynconv_case(&mut rng, &mut col)?,
            Target::Bce | Target::Focal | Target::Dice | Target::Raf => {
                loss_case(target, &mut rng, i, &mut col)?
            }
        }
    }
    Ok(ModuleReport {
        target,
        tolerance: target.tolerance(),
        instances,
        checks: col.checks,
    })
}

pub fn run_all(seed: u64, instances: usize) -> Result<Vec<ModuleReport>> {
    Target::ALL
        .into_iter()
        .map(|t| run(t, seed, instances))
        .collect()
}

fn uni(rng: &mut Rng, dims: &[usize]) -> Result<Tensor> {
    uniform_tensor(rng, dims, -1.0, 1.0)
}

fn conv2d_case(rng: &mut Rng, i: usize, col: &mut Collector) -> Result<()> {
    let (stride, pad) = if i.is_multiple_of(2) { (1, 1) } else { (2, 1) };
    let x = uni(rng, &[2, 3, 6, 5])?;
    let p = Conv2dParams::new(uni(rng, &[4, 3, 3, 3])?, uni(rng, &[4])?, stride, pad)?;
    let r = uni(rng, conv2d_fwd(&x, &p)?.dims())?;
    let g = conv2d_bwd(&x, &p, &r)?;
    col.probe("x", &x, &g.x, |t| conv2d_fwd(t, &p)?.dot(&r))?;
    col.probe("weight", &p.weight, &g.weight, |t| {
        conv2d_fwd(&x, &Conv2dParams { weight: t.clone(), ..p.clone() })?.dot(&r)
    })?;
    col.probe("bias", &p.bias, &g.bias, |t| {
        conv2d_fwd(&x, &Conv2dParams { bias: t.clone(), ..p.clone() })?.dot(&r)
    })
}

fn linear_case(rng: &mut Rng, col: &mut Collector) -> Result<()> {
    let x = uni(rng, &[3, 5])?;
    let p = LinearParams::new(uni(rng, &[4, 5])?, uni(rng, &[4])?)?;
    let r = uni(rng, &[3, 4])?;
    let g = linear_bwd(&x, &p, &r)?;
    col.probe("x", &x, &g.x, |t| linear_fwd(t, &p)?.dot(&r))?;
    col.probe("weight", &p.weight, &g.weight, |t| {
        linear_fwd(&x, &LinearParams { weight: t.clone(), ..p.clone() })?.dot(&r)
    })?;
    col.probe("bias", &p.bias, &g.bias, |t| {
        linear_fwd(&x, &LinearParams { bias: t.clone(), ..p.clone() })?.dot(&r)
    })
}

fn upsample_case(rng: &mut Rng, i: usize, col: &mut Collector) -> Result<()> {
    let factor = 2 + i % 2;
    let x = uni(rng, &[1, 2, 3, 4])?;
    let r = uni(rng, upsample_bilinear(&x, factor)?.dims())?;
    let g = upsample_bilinear_bwd(x.dims(), factor, &r)?;
    col.probe("x", &x, &g, |t| upsample_bilinear(t, factor)?.dot(&r))
}

/// Random value whose distance to the nearest integer lies in `[0.1, 0.4]`.
fn off_lattice(rng: &mut Rng, span: i32) -> f64 {
    let base = rng.int_in(0, (2 * span) as usize) as f64 - span as f64;
    let frac = rng.uniform(0.1, 0.4);
    if rng.bool() {
        base + frac
    } else {
        base - frac
    }
}

fn min_lattice_distance(t: &Tensor) -> f64 {
    t.data()
        .iter()
        .map(|v| (v - v.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

fn bilinear_case(rng: &mut Rng, col: &mut Collector) -> Result<()> {
    let x = uni(rng, &[1, 2, 5, 5])?;
    let main = Conv2dParams::new(uni(rng, &[3, 2, 3, 3])?, uni(rng, &[3])?, 1, 1)?;
    let od = [1, 18, 5, 5];
    let off: Vec<f64> = (0..od.iter().product::<usize>()).map(|_| off_lattice(rng, 2)).collect();
    let offsets = Tensor::from_vec(&od, off)?;
    let r = uni(rng, &[1, 3, 5, 5])?;
    let g = deform_sample_bwd(&x, &offsets, &main, &r)?;
    col.probe("x", &x, &g.x, |t| deform_sample_fwd(t, &offsets, &main)?.dot(&r))?;
    col.probe("offsets", &offsets, &g.offsets, |t| deform_sample_fwd(&x, t, &main)?.dot(&r))?;
    col.probe("weight", &main.weight, &g.weight, |t| {
        deform_sample_fwd(&x, &offsets, &Conv2dParams { weight: t.clone(), ..main.clone() })?.dot(&r)
    })?;
    col.probe("bias", &main.bias, &g.bias, |t| {
        deform_sample_fwd(&x, &offsets, &Conv2dParams { bias: t.clone(), ..main.clone() })?.dot(&r)
    })
}

/// Offset branch with small random weights and a bias that sits every
/// offset channel off the integer lattice, so the sampled coordinates stay
/// clear of bilinear kinks under small perturbations.
fn nudged_offset_branch(rng: &mut Rng, c_in: usize, k: usize) -> Result<Conv2dParams> {
    let scale = 0.07 / (c_in * k * k) as f64;
    let w = uniform_tensor(rng, &[2 * k * k, c_in, k, k], -scale, scale)?;
    let b: Vec<f64> = (0..2 * k * k)
        .map(|_| rng.int_in(0, 2) as f64 - 1.0 + rng.uniform(0.15, 0.35))
        .collect();
    Conv2dParams::new(w, Tensor::from_vec(&[2 * k * k], b)?, 1, k / 2)
}

fn deform_case(rng: &mut Rng, col: &mut Collector) -> Result<()> {
    let x = uni(rng, &[2, 2, 5, 5])?;
    let main = Conv2dParams::new(uni(rng, &[3, 2, 3, 3])?, uni(rng, &[3])?, 1, 1)?;
    let p = DeformConvParams::new(main, nudged_offset_branch(rng, 2, 3)?)?;
    let (y, offsets) = deform_conv_fwd(&x, &p)?;
    if min_lattice_distance(&offsets) < 0.05 {
        return Err(Error::Numeric("offsets landed too close to the sampling lattice".into()));
    }
    let r = uni(rng, y.dims())?;
    let g = deform_conv_bwd(&x, &p, &r)?;
    let eval = |q: &DeformConvParams, xin: &Tensor| -> Result<f64> { deform_conv_fwd(xin, q)?.0.dot(&r) };
    col.probe("x", &x, &g.x, |t| eval(&p, t))?;
    col.probe("main_weight", &p.main.weight, &g.main_weight, |t| {
        let mut q = p.clone();
        q.main.weight = t.clone();
        eval(&q, &x)
    })?;
    col.probe("main_bias", &p.main.bias, &g.main_bias, |t| {
        let mut q = p.clone();
        q.main.bias = t.clone();
        eval(&q, &x)
    })?;
    col.probe("offset_weight", &p.offset_branch.weight, &g.offset_weight, |t| {
        let mut q = p.clone();
        q.offset_branch.weight = t.clone();
        eval(&q, &x)
    })?;
    col.probe("offset_bias", &p.offset_branch.bias, &g.offset_bias, |t| {
        let mut q = p.clone();
        q.offset_branch.bias = t.clone();
        eval(&q, &x)
    })
}

/// Random SE parameters whose hidden pre-activations stay clear of the ReLU
/// kink for input `x`.
fn se_params_clear_of_kink(rng: &mut Rng, x: &Tensor, reduction: usize) -> Result<SeParams> {
    let c = x.dims()[1];
    let hidden = SeParams::hidden_width(c, reduction);
    for _ in 0..100 {
        let p = SeParams::new(
            LinearParams::new(uni(rng, &[hidden, c])?, uni(rng, &[hidden])?)?,
            LinearParams::new(uni(rng, &[c, hidden])?, uni(rng, &[c])?)?,
            reduction,
        )?;
        let a1 = linear_fwd(&crate::layers::gap_fwd(x)?, &p.fc1)?;
        if a1.data().iter().all(|v| v.abs() > 1e-3) {
            return Ok(p);
        }
    }
    Err(Error::Numeric("could not draw SE parameters away from the ReLU kink".into()))
}

fn se_case(rng: &mut Rng, col: &mut Collector) -> Result<()> {
    let x = uni(rng, &[2, 8, 4, 4])?;
    let p = se_params_clear_of_kink(rng, &x, 4)?;
    let r = uni(rng, x.dims())?;
    let g = se_bwd(&x, &p, &r)?;
    let eval = |q: &SeParams, xin: &Tensor| -> Result<f64> { se_fwd(xin, q)?.0.dot(&r) };
    col.probe("x", &x, &g.x, |t| eval(&p, t))?;
    col.probe("fc1_weight", &p.fc1.weight, &g.fc1_weight, |t| {
        let mut q = p.clone();
        q.fc1.weight = t.clone();
        eval(&q, &x)
    })?;
    col.probe("fc1_bias", &p.fc1.bias, &g.fc1_bias, |t| {
        let mut q = p.clone();
        q.fc1.bias = t.clone();
        eval(&q, &x)
    })?;
    col.probe("fc2_weight", &p.fc2.weight, &g.fc2_weight, |t| {
        let mut q = p.clone();
        q.fc2.weight = t.clone();
        eval(&q, &x)
    })?;
    col.probe("fc2_bias", &p.fc2.bias, &g.fc2_bias, |t| {
        let mut q = p.clone();
        q.fc2.bias = t.clone();
        eval(&q, &x)
    })
}

fn residual_case(rng: &mut Rng, i: usize, col: &mut Collector) -> Result<()> {
    let factor = 1 + i % 2;
    let x = uni(rng, &[1, 3, 4, 4])?;
    let x_se = uni(rng, &[1, 2, 4 * factor, 4 * factor])?;
    let p = ResidualParams::new(Conv2dParams::new(uni(rng, &[2, 3, 1, 1])?, uni(rng, &[2])?, 1, 0)?, factor)?;
    let r = uni(rng, x_se.dims())?;
    let g = residual_bwd(&x, &p, &r)?;
    col.probe("x", &x, &g.x, |t| residual_fuse(t, &x_se, &p)?.dot(&r))?;
    col.probe("x_se", &x_se, &g.x_se, |t| residual_fuse(&x, t, &p)?.dot(&r))?;
    col.probe("weight", &p.shortcut.weight, &g.weight, |t| {
        let mut q = p.clone();
        q.shortcut.weight = t.clone();
        residual_fuse(&x, &x_se, &q)?.dot(&r)
    })?;
    col.probe("bias", &p.shortcut.bias, &g.bias, |t| {
        let mut q = p.clone();
        q.shortcut.bias = t.clone();
        residual_fuse(&x, &x_se, &q)?.dot(&r)
    })
}

fn enhance_case(rng: &mut Rng, i: usize, col: &mut Collector) -> Result<()> {
    // the first instances use the 1x4x6x6, s=1 configuration; the last one
    // exercises the upsampling head with s=2
    let (factor, side) = if i + 1 == DEFAULT_INSTANCES { (2, 4) } else { (1, 6) };
    let (c, k) = (4, 3);
    let x = uni(rng, &[1, c, side, side])?;
    let main = Conv2dParams::new(uniform_tensor(rng, &[c, c, k, k], -0.5, 0.5)?, uni(rng, &[c])?, 1, 1)?;
    let deform = DeformConvParams::new(main, nudged_offset_branch(rng, c, k)?)?;
    let residual = ResidualParams::new(Conv2dParams::new(uni(rng, &[c, c, 1, 1])?, uni(rng, &[c])?, 1, 0)?, factor)?;

    let u = upsample_bilinear(&x, factor)?;
    let (y, offsets) = deform_conv_fwd(&u, &deform)?;
    if min_lattice_distance(&offsets) < 0.05 {
        return Err(Error::Numeric("offsets landed too close to the sampling lattice".into()));
    }
    let se = se_params_clear_of_kink(rng, &y, crate::enhance::DEFAULT_REDUCTION)?;
    let p = EnhanceParams::new(deform, se, residual, BlockFeatures::default())?;
    let r = uni(rng, enhance_block_fwd(&x, &p)?.dims())?;
    let g = enhance_block_bwd(&x, &p, &r)?;

    let eval = |q: &EnhanceParams, xin: &Tensor| -> Result<f64> { enhance_block_fwd(xin, q)?.dot(&r) };
    col.probe("x", &x, &g.x, |t| eval(&p, t))?;
    type Field = fn(&mut EnhanceParams) -> &mut Tensor;
    let fields: [(&str, Field, &Tensor); 10] = [
        ("main_weight", |q| &mut q.deform.main.weight, &g.main_weight),
        ("main_bias", |q| &mut q.deform.main.bias, &g.main_bias),
        ("offset_weight", |q| &mut q.deform.offset_branch.weight, &g.offset_weight),
        ("offset_bias", |q| &mut q.deform.offset_branch.bias, &g.offset_bias),
        ("fc1_weight", |q| &mut q.se.fc1.weight, &g.fc1_weight),
        ("fc1_bias", |q| &mut q.se.fc1.bias, &g.fc1_bias),
        ("fc2_weight", |q| &mut q.se.fc2.weight, &g.fc2_weight),
        ("fc2_bias", |q| &mut q.se.fc2.bias, &g.fc2_bias),
        ("shortcut_weight", |q| &mut q.residual.shortcut.weight, &g.shortcut_weight),
        ("shortcut_bias", |q| &mut q.residual.shortcut.bias, &g.shortcut_bias),
    ];
    for (label, field, analytic) in fields {
        let mut base = p.clone();
        let base_t = field(&mut base).clone();
        col.probe(label, &base_t, analytic, |t| {
            let mut q = p.clone();
            *field(&mut q) = t.clone();
            eval(&q, &x)
        })?;
    }
    Ok(())
}

fn dynconv_case(rng: &mut Rng, col: &mut Collector) -> Result<()> {
    let x = uni(rng, &[2, 3, 4, 4])?;
    let emb = uni(rng, &[2, 5])?;
    let p = DynConvParams::new(LinearParams::new(uni(rng, &[12, 5])?, uni(rng, &[12])?)?, 3, 3)?;
    let r = uni(rng, x.dims())?;
    let g = dyn_conv_bwd(&x, &emb, &p, &r)?;
    col.probe("x", &x, &g.x, |t| dyn_conv_apply(t, &emb, &p)?.dot(&r))?;
    col.probe("emb", &emb, &g.emb, |t| dyn_conv_apply(&x, t, &p)?.dot(&r))?;
    col.probe("weight", &p.kernel_gen.weight, &g.weight, |t| {
        let mut q = p.clone();
        q.kernel_gen.weight = t.clone();
        dyn_conv_apply(&x, &emb, &q)?.dot(&r)
    })?;
    col.probe("bias", &p.kernel_gen.bias, &g.bias, |t| {
        let mut q = p.clone();
        q.kernel_gen.bias = t.clone();
        dyn_conv_apply(&x, &emb, &q)?.dot(&r)
    })
}

/// Predictions in `[0.2, 0.8]` and a binary target with both classes present.
fn loss_inputs(rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let dims = [1, 1, 4, 4];
    let p = uniform_tensor(rng, &dims, 0.2, 0.8)?;
    let mut y: Vec<f64> = (0..16).map(|_| if rng.bool() { 1.0 } else { 0.0 }).collect();
    y[0] = 1.0;
    y[15] = 0.0;
    Ok((p, Tensor::from_vec(&dims, y)?))
}

fn loss_case(target: Target, rng: &mut Rng, i: usize, col: &mut Collector) -> Result<()> {
    let (p, y) = loss_inputs(rng)?;
    let mode = if i.is_multiple_of(2) {
        AdaptiveWeight::AbsDiff
    } else {
        AdaptiveWeight::FocalStyle
    };
    let cfg = RafConfig {
        adaptive: mode,
        ..RafConfig::default()
    };
    match target {
        Target::Bce => {
            let (_, g) = bce(&p, &y, DEFAULT_CLAMP)?;
            col.probe("p", &p, &g, |t| Ok(bce(t, &y, DEFAULT_CLAMP)?.0))
        }
        Target::Focal => {
            let (_, g) = focal(&p, &y, cfg.alpha, cfg.gamma, DEFAULT_CLAMP)?;
            col.probe("p", &p, &g, |t| Ok(focal(t, &y, cfg.alpha, cfg.gamma, DEFAULT_CLAMP)?.0))
        }
        Target::Dice => {
            let (_, g) = adaptive_dice(&p, &y, mode, cfg.gamma, cfg.eps)?;
            let frozen = adaptive_weights(&p, &y, mode, cfg.gamma)?;
            col.probe("p", &p, &g, |t| Ok(weighted_dice(t, &y, &frozen, cfg.eps)?.0))
        }
        Target::Raf => {
            let out = raf(&p, &y, &cfg)?;
            let frozen = adaptive_weights(&p, &y, mode, cfg.gamma)?;
            col.probe("p", &p, &out.grad_p, |t| {
                Ok(cfg.lambda_bce * bce(t, &y, cfg.clamp)?.0
                    + cfg.lambda_focal * focal(t, &y, cfg.alpha, cfg.gamma, cfg.clamp)?.0
                    + cfg.lambda_dice * weighted_dice(t, &y, &frozen, cfg.eps)?.0)
            })
        }
        _ => unreachable!("not a loss target"),
    }
}
