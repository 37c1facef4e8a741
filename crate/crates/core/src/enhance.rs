//! Deformable-attentive enhancement block and language-modulated dynamic
//! convolution.
//!
//! The block maps `x: [N, C_in, H, W]` to `[N, C_out, sH, sW]`:
//!
//! ```text
//! u     = upsample(x, s)
//! y     = deform_conv(u)            offsets from a k x k conv over u
//! x_se  = sigmoid(fc2(relu(fc1(gap(y))))) * y
//! out   = x_se + conv1x1(u)
//! ```
//!
//! The upsample sits at the head of both paths so the residual addition is
//! shape-consistent. Deformable sampling has no modulation mask.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{
    activation, activation_bwd, conv2d_bwd, conv2d_fwd, gap_bwd, gap_fwd, gemm_bias,
    gemm_bias_bwd, linear_bwd, linear_fwd, sigmoid, sum_in_order, upsample_bilinear,
    upsample_bilinear_bwd, Activation, Conv2dParams, ConvGeom, LinearParams, Stencil,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_REDUCTION: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformConvParams {
    pub main: Conv2dParams,
    /// Produces `2*k*k` channels: `(dy, dx)` for tap `t = u*k + v` live in
    /// channels `2t` and `2t + 1`.
    pub offset_branch: Conv2dParams,
}

impl DeformConvParams {
    pub fn new(main: Conv2dParams, offset_branch: Conv2dParams) -> Result<Self> {
        let k = main.kernel();
        if offset_branch.out_channels() != 2 * k * k {
            return Err(Error::shape(format!(
                "offset branch must emit {} channels for a {k}x{k} kernel, got {}",
                2 * k * k,
                offset_branch.out_channels()
            )));
        }
        if offset_branch.in_channels() != main.in_channels()
            || offset_branch.kernel() != k
            || offset_branch.stride != main.stride
            || offset_branch.padding != main.padding
        {
            return Err(Error::shape(
                "offset branch geometry (channels in, k, stride, padding) must match the main conv",
            ));
        }
        Ok(DeformConvParams {
            main,
            offset_branch,
        })
    }

    /// Kaiming main weights; zeroed offset branch, so the layer starts out as
    /// a standard convolution. Stride 1 with same-padding.
    pub fn init(rng: &mut Rng, c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        let main = Conv2dParams::kaiming(rng, c_out, c_in, k, 1, k / 2)?;
        let offset_branch = Conv2dParams::zeros(2 * k * k, c_in, k, 1, k / 2)?;
        Self::new(main, offset_branch)
    }

    pub fn kernel(&self) -> usize {
        self.main.kernel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformSampleGrads {
    pub x: Tensor,
    pub offsets: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformConvGrads {
    pub x: Tensor,
    pub main_weight: Tensor,
    pub main_bias: Tensor,
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
}

fn check_offsets(offsets: &Tensor, n: usize, g: &ConvGeom) -> Result<()> {
    let expect = [n, 2 * g.k * g.k, g.ho, g.wo];
    if offsets.dims() != expect {
        return Err(Error::shape(format!(
            "offsets dims {:?} do not match {expect:?}",
            offsets.dims()
        )));
    }
    Ok(())
}

/// Sampling stencils for every `(tap, position)` of one sample; shared by all
/// input channels.
fn stencils(off: &[f64], g: &ConvGeom) -> Vec<Stencil> {
    let np = g.positions();
    let mut out = Vec::with_capacity(g.k * g.k * np);
    for u in 0..g.k {
        for v in 0..g.k {
            let t = u * g.k + v;
            let dy = &off[2 * t * np..(2 * t + 1) * np];
            let dx = &off[(2 * t + 1) * np..(2 * t + 2) * np];
            for i in 0..g.ho {
                let by = (i * g.stride + u) as f64 - g.pad as f64;
                for j in 0..g.wo {
                    let bx = (j * g.stride + v) as f64 - g.pad as f64;
                    let p = i * g.wo + j;
                    out.push(Stencil::new(by + dy[p], bx + dx[p], g.h, g.w));
                }
            }
        }
    }
    out
}

fn deform_im2col(x: &[f64], st: &[Stencil], g: &ConvGeom) -> Vec<f64> {
    let np = g.positions();
    let kk = g.k * g.k;
    let mut cols = vec![0.0; g.rows() * np];
    for c in 0..g.c_in {
        let plane = &x[c * g.plane()..(c + 1) * g.plane()];
        for t in 0..kk {
            let r = c * kk + t;
            let row = &mut cols[r * np..(r + 1) * np];
            for (d, s) in row.iter_mut().zip(&st[t * np..(t + 1) * np]) {
                *d = s.sample(plane);
            }
        }
    }
    cols
}

/// Deformable convolution with explicitly supplied offsets
/// `[N, 2k^2, Ho, Wo]`.
pub fn deform_sample_fwd(x: &Tensor, offsets: &Tensor, main: &Conv2dParams) -> Result<Tensor> {
    let g = main.geometry(x)?;
    let n = x.dims()[0];
    check_offsets(offsets, n, &g)?;
    let sample = g.c_in * g.plane();
    let off_sample = 2 * g.k * g.k * g.positions();
    let per: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let st = stencils(&offsets.data()[ni * off_sample..(ni + 1) * off_sample], &g);
            let cols = deform_im2col(&x.data()[ni * sample..(ni + 1) * sample], &st, &g);
            gemm_bias(main.weight.data(), main.bias.data(), &cols, g.rows(), g.positions())
        })
        .collect();
    Ok(Tensor::from_raw(
        vec![n, main.out_channels(), g.ho, g.wo],
        per.concat(),
        x.dtype(),
    ))
}

pub fn deform_sample_bwd(
    x: &Tensor,
    offsets: &Tensor,
    main: &Conv2dParams,
    grad_y: &Tensor,
) -> Result<DeformSampleGrads> {
    let g = main.geometry(x)?;
    let n = x.dims()[0];
    check_offsets(offsets, n, &g)?;
    let expect = [n, main.out_channels(), g.ho, g.wo];
    if grad_y.dims() != expect {
        return Err(Error::shape(format!(
            "grad_y dims {:?} do not match forward output {expect:?}",
            grad_y.dims()
        )));
    }
    let np = g.positions();
    let kk = g.k * g.k;
    let sample = g.c_in * g.plane();
    let off_sample = 2 * kk * np;
    let out_sample = main.out_channels() * np;
    let per: Vec<_> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let xs = &x.data()[ni * sample..(ni + 1) * sample];
            let st = stencils(&offsets.data()[ni * off_sample..(ni + 1) * off_sample], &g);
            let cols = deform_im2col(xs, &st, &g);
            let go = &grad_y.data()[ni * out_sample..(ni + 1) * out_sample];
            let (gw, gb, gcols) = gemm_bias_bwd(main.weight.data(), &cols, go, g.rows(), np);

            let mut gx = vec![0.0; sample];
            let mut goff = vec![0.0; off_sample];
            for c in 0..g.c_in {
                let plane = &xs[c * g.plane()..(c + 1) * g.plane()];
                let gplane = &mut gx[c * g.plane()..(c + 1) * g.plane()];
                for t in 0..kk {
                    let r = c * kk + t;
                    let grow = &gcols[r * np..(r + 1) * np];
                    let (gdy, gdx) = goff[2 * t * np..(2 * t + 2) * np].split_at_mut(np);
                    for p in 0..np {
                        let s = &st[t * np + p];
                        let gc = grow[p];
                        s.scatter(gplane, gc);
                        let (dy, dx) = s.coord_grad(plane);
                        gdy[p] += gc * dy;
                        gdx[p] += gc * dx;
                    }
                }
            }
            (gx, goff, gw, gb)
        })
        .collect();

    let mut gx = Vec::with_capacity(n * sample);
    let mut goff = Vec::with_capacity(n * off_sample);
    let mut gws = Vec::with_capacity(n);
    let mut gbs = Vec::with_capacity(n);
    for (a, b, c, d) in per {
        gx.extend(a);
        goff.extend(b);
        gws.push(c);
        gbs.push(d);
    }
    Ok(DeformSampleGrads {
        x: Tensor::from_raw(x.dims().to_vec(), gx, x.dtype()),
        offsets: Tensor::from_raw(offsets.dims().to_vec(), goff, offsets.dtype()),
        weight: Tensor::from_raw(
            main.weight.dims().to_vec(),
            sum_in_order(gws, main.weight.len()),
            main.weight.dtype(),
        ),
        bias: Tensor::from_raw(
            main.bias.dims().to_vec(),
            sum_in_order(gbs, main.bias.len()),
            main.bias.dtype(),
        ),
    })
}

/// Returns the block output and the offsets the branch produced.
pub fn deform_conv_fwd(x: &Tensor, p: &DeformConvParams) -> Result<(Tensor, Tensor)> {
    let offsets = conv2d_fwd(x, &p.offset_branch)?;
    let y = deform_sample_fwd(x, &offsets, &p.main)?;
    Ok((y, offsets))
}

pub fn deform_conv_bwd(x: &Tensor, p: &DeformConvParams, grad_y: &Tensor) -> Result<DeformConvGrads> {
    let offsets = conv2d_fwd(x, &p.offset_branch)?;
    deform_conv_bwd_with_offsets(x, p, &offsets, grad_y)
}

/// [`deform_conv_bwd`] reusing the offsets returned by [`deform_conv_fwd`].
pub fn deform_conv_bwd_with_offsets(
    x: &Tensor,
    p: &DeformConvParams,
    offsets: &Tensor,
    grad_y: &Tensor,
) -> Result<DeformConvGrads> {
    let sg = deform_sample_bwd(x, offsets, &p.main, grad_y)?;
    let og = conv2d_bwd(x, &p.offset_branch, &sg.offsets)?;
    let gx = sg
        .x
        .data()
        .iter()
        .zip(og.x.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(DeformConvGrads {
        x: Tensor::from_raw(x.dims().to_vec(), gx, x.dtype()),
        main_weight: sg.weight,
        main_bias: sg.bias,
        offset_weight: og.weight,
        offset_bias: og.bias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeParams {
    /// `[C/r, C]`
    pub fc1: LinearParams,
    /// `[C, C/r]`
    pub fc2: LinearParams,
    pub reduction: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeGrads {
    pub x: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl SeParams {
    /// Bottleneck width `ceil(C / r)`, at least 1.
    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        channels.div_ceil(reduction.max(1)).max(1)
    }

    pub fn new(fc1: LinearParams, fc2: LinearParams, reduction: usize) -> Result<Self> {
        let c = fc1.in_features();
        if reduction == 0 {
            return Err(Error::validation("SE reduction ratio must be >= 1"));
        }
        let hidden = Self::hidden_width(c, reduction);
        if fc1.out_features() != hidden || fc2.in_features() != hidden || fc2.out_features() != c {
            return Err(Error::shape(format!(
                "SE layers must be [{hidden}, {c}] and [{c}, {hidden}], got {:?} and {:?}",
                fc1.weight.dims(),
                fc2.weight.dims()
            )));
        }
        Ok(SeParams {
            fc1,
            fc2,
            reduction,
        })
    }

    pub fn init(rng: &mut Rng, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::hidden_width(channels, reduction.max(1));
        Self::new(
            LinearParams::kaiming(rng, hidden, channels)?,
            LinearParams::kaiming(rng, channels, hidden)?,
            reduction,
        )
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_features()
    }
}

/// Pre-sigmoid gate logits `fc2(relu(fc1(gap(x))))`, `[N, C]`.
pub fn se_gate_logits(x: &Tensor, p: &SeParams) -> Result<Tensor> {
    let (_, c, _, _) = x.nchw()?;
    if c != p.channels() {
        return Err(Error::shape(format!(
            "SE block expects {} channels, got {c}",
            p.channels()
        )));
    }
    let z = gap_fwd(x)?;
    let h = activation(Activation::Relu, &linear_fwd(&z, &p.fc1)?);
    linear_fwd(&h, &p.fc2)
}

fn scale_channels(x: &Tensor, s: &[f64]) -> Tensor {
    let hw = x.dims()[2] * x.dims()[3];
    let data = x
        .data()
        .chunks_exact(hw)
        .zip(s)
        .flat_map(|(plane, &sc)| plane.iter().map(move |&v| sc * v))
        .collect();
    Tensor::from_raw(x.dims().to_vec(), data, x.dtype())
}

/// Returns the recalibrated features and the channel gate `s: [N, C]`.
pub fn se_fwd(x: &Tensor, p: &SeParams) -> Result<(Tensor, Tensor)> {
    let s = activation(Activation::Sigmoid, &se_gate_logits(x, p)?);
    Ok((scale_channels(x, s.data()), s))
}

pub fn se_bwd(x: &Tensor, p: &SeParams, grad_out: &Tensor) -> Result<SeGrads> {
    if grad_out.dims() != x.dims() {
        return Err(Error::shape(format!(
            "SE gradient dims {:?} do not match input {:?}",
            grad_out.dims(),
            x.dims()
        )));
    }
    let (n, c, h, w) = x.nchw()?;
    let z = gap_fwd(x)?;
    let a1 = linear_fwd(&z, &p.fc1)?;
    let hdn = activation(Activation::Relu, &a1);
    let a2 = linear_fwd(&hdn, &p.fc2)?;
    let s: Vec<f64> = a2.data().iter().map(|&v| sigmoid(v)).collect();

    let hw = h * w;
    let mut grad_a2 = Vec::with_capacity(n * c);
    for (idx, (xp, gp)) in x
        .data()
        .chunks_exact(hw)
        .zip(grad_out.data().chunks_exact(hw))
        .enumerate()
    {
        let gs = xp.iter().zip(gp).fold(0.0, |a, (xv, gv)| a + xv * gv);
        grad_a2.push(gs * s[idx] * (1.0 - s[idx]));
    }
    let grad_a2 = Tensor::from_raw(vec![n, c], grad_a2, x.dtype());
    let g2 = linear_bwd(&hdn, &p.fc2, &grad_a2)?;
    let grad_a1 = activation_bwd(Activation::Relu, &a1, &g2.x)?;
    let g1 = linear_bwd(&z, &p.fc1, &grad_a1)?;
    let gx_pool = gap_bwd(x.dims(), &g1.x)?;

    let direct = scale_channels(grad_out, &s);
    let gx = direct
        .data()
        .iter()
        .zip(gx_pool.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(SeGrads {
        x: Tensor::from_raw(x.dims().to_vec(), gx, x.dtype()),
        fc1_weight: g1.weight,
        fc1_bias: g1.bias,
        fc2_weight: g2.weight,
        fc2_bias: g2.bias,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualParams {
    /// 1x1, `C_in -> C_out`
    pub shortcut: Conv2dParams,
    pub factor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGrads {
    pub x: Tensor,
    pub x_se: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ResidualParams {
    pub fn new(shortcut: Conv2dParams, factor: usize) -> Result<Self> {
        if shortcut.kernel() != 1 || shortcut.stride != 1 || shortcut.padding != 0 {
            return Err(Error::shape("residual shortcut must be a 1x1 stride-1 convolution"));
        }
        if factor == 0 {
            return Err(Error::validation("upsample factor must be >= 1"));
        }
        Ok(ResidualParams { shortcut, factor })
    }

    pub fn init(rng: &mut Rng, c_out: usize, c_in: usize, factor: usize) -> Result<Self> {
        Self::new(Conv2dParams::kaiming(rng, c_out, c_in, 1, 1, 0)?, factor)
    }
}

/// `x_se + shortcut(upsample(x, s))`.
pub fn residual_fuse(x: &Tensor, x_se: &Tensor, p: &ResidualParams) -> Result<Tensor> {
    let res = conv2d_fwd(&upsample_bilinear(x, p.factor)?, &p.shortcut)?;
    if res.dims() != x_se.dims() {
        return Err(Error::shape(format!(
            "shortcut path emits {:?} but main path emits {:?}",
            res.dims(),
            x_se.dims()
        )));
    }
    let data = x_se.data().iter().zip(res.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::from_raw(res.dims().to_vec(), data, x_se.dtype()))
}

pub fn residual_bwd(x: &Tensor, p: &ResidualParams, grad_out: &Tensor) -> Result<ResidualGrads> {
    let u = upsample_bilinear(x, p.factor)?;
    let g = conv2d_bwd(&u, &p.shortcut, grad_out)?;
    Ok(ResidualGrads {
        x: upsample_bilinear_bwd(x.dims(), p.factor, &g.x)?,
        x_se: grad_out.clone(),
        weight: g.weight,
        bias: g.bias,
    })
}

/// Which stages of the block are active. Disabling `deformable` samples on
/// the regular grid with the main kernel; the offset branch is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockFeatures {
    pub deformable: bool,
    pub se: bool,
    pub residual: bool,
}

impl Default for BlockFeatures {
    fn default() -> Self {
        BlockFeatures {
            deformable: true,
            se: true,
            residual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceParams {
    pub deform: DeformConvParams,
    pub se: SeParams,
    pub residual: ResidualParams,
    pub features: BlockFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub reduction: usize,
    pub factor: usize,
    pub features: BlockFeatures,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            c_in: 4,
            c_out: 4,
            kernel: DEFAULT_KERNEL,
            reduction: DEFAULT_REDUCTION,
            factor: 1,
            features: BlockFeatures::default(),
        }
    }
}

impl EnhanceParams {
    pub fn new(
        deform: DeformConvParams,
        se: SeParams,
        residual: ResidualParams,
        features: BlockFeatures,
    ) -> Result<Self> {
        let c_out = deform.main.out_channels();
        if se.channels() != c_out {
            return Err(Error::shape(format!(
                "SE block covers {} channels but the deformable conv emits {c_out}",
                se.channels()
            )));
        }
        if residual.shortcut.in_channels() != deform.main.in_channels()
            || residual.shortcut.out_channels() != c_out
        {
            return Err(Error::shape("shortcut channels must mirror the deformable conv"));
        }
        if deform.main.stride != 1 || deform.main.padding != deform.kernel() / 2 {
            return Err(Error::shape(
                "deformable conv inside the block must preserve spatial size",
            ));
        }
        Ok(EnhanceParams {
            deform,
            se,
            residual,
            features,
        })
    }

    /// Each parameter group draws from its own fork of `rng`, so toggling a
    /// feature leaves every other group's initial values untouched.
    pub fn init(rng: &Rng, cfg: &EnhanceConfig) -> Result<Self> {
        let k = cfg.kernel;
        if k.is_multiple_of(2) {
            return Err(Error::validation(format!("kernel size must be odd, got {k}")));
        }
        let deform = DeformConvParams::init(&mut rng.fork("deform"), cfg.c_out, cfg.c_in, k)?;
        let se = SeParams::init(&mut rng.fork("se"), cfg.c_out, cfg.reduction)?;
        let residual = ResidualParams::init(&mut rng.fork("residual"), cfg.c_out, cfg.c_in, cfg.factor)?;
        Self::new(deform, se, residual, cfg.features)
    }

    pub fn factor(&self) -> usize {
        self.residual.factor
    }

    pub fn out_channels(&self) -> usize {
        self.deform.main.out_channels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceGrads {
    pub x: Tensor,
    pub main_weight: Tensor,
    pub main_bias: Tensor,
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
    pub shortcut_weight: Tensor,
    pub shortcut_bias: Tensor,
}

/// Intermediate values kept from the forward pass.
#[derive(Debug, Clone)]
pub struct EnhanceTrace {
    pub input_dims: Vec<usize>,
    pub upsampled: Tensor,
    /// offsets produced by the branch, when the block is deformable
    pub offsets: Option<Tensor>,
    pub conv_out: Tensor,
    pub output: Tensor,
}

pub fn enhance_block_trace(x: &Tensor, p: &EnhanceParams) -> Result<EnhanceTrace> {
    let (_, c, _, _) = x.nchw()?;
    if c != p.deform.main.in_channels() {
        return Err(Error::shape(format!(
            "enhance block expects {} channels, got {c}",
            p.deform.main.in_channels()
        )));
    }
    let u = upsample_bilinear(x, p.factor())?;
    let (y, offsets) = if p.features.deformable {
        let (y, off) = deform_conv_fwd(&u, &p.deform)?;
        (y, Some(off))
    } else {
        (conv2d_fwd(&u, &p.deform.main)?, None)
    };
    let x_se = if p.features.se { se_fwd(&y, &p.se)?.0 } else { y.clone() };
    let output = if p.features.residual {
        let res = conv2d_fwd(&u, &p.residual.shortcut)?;
        let data = x_se.data().iter().zip(res.data()).map(|(a, b)| a + b).collect();
        Tensor::from_raw(res.dims().to_vec(), data, x_se.dtype())
    } else {
        x_se
    };
    Ok(EnhanceTrace {
        input_dims: x.dims().to_vec(),
        upsampled: u,
        offsets,
        conv_out: y,
        output,
    })
}

pub fn enhance_block_fwd(x: &Tensor, p: &EnhanceParams) -> Result<Tensor> {
    Ok(enhance_block_trace(x, p)?.output)
}

pub fn enhance_block_bwd_traced(
    trace: &EnhanceTrace,
    p: &EnhanceParams,
    grad_out: &Tensor,
) -> Result<EnhanceGrads> {
    if grad_out.dims() != trace.output.dims() {
        return Err(Error::shape(format!(
            "enhance gradient dims {:?} do not match output {:?}",
            grad_out.dims(),
            trace.output.dims()
        )));
    }
    let u = &trace.upsampled;
    let zeros = |t: &Tensor| t.zeros_like();

    let (g_y, fc1_w, fc1_b, fc2_w, fc2_b) = if p.features.se {
        let g = se_bwd(&trace.conv_out, &p.se, grad_out)?;
        (g.x, g.fc1_weight, g.fc1_bias, g.fc2_weight, g.fc2_bias)
    } else {
        (
            grad_out.clone(),
            zeros(&p.se.fc1.weight),
            zeros(&p.se.fc1.bias),
            zeros(&p.se.fc2.weight),
            zeros(&p.se.fc2.bias),
        )
    };

    let (mut g_u, main_w, main_b, off_w, off_b) = if let Some(off) = &trace.offsets {
        let g = deform_conv_bwd_with_offsets(u, &p.deform, off, &g_y)?;
        (g.x, g.main_weight, g.main_bias, g.offset_weight, g.offset_bias)
    } else {
        let g = conv2d_bwd(u, &p.deform.main, &g_y)?;
        (
            g.x,
            g.weight,
            g.bias,
            zeros(&p.deform.offset_branch.weight),
            zeros(&p.deform.offset_branch.bias),
        )
    };

    let (sc_w, sc_b) = if p.features.residual {
        let g = conv2d_bwd(u, &p.residual.shortcut, grad_out)?;
        let sum = g_u.data().iter().zip(g.x.data()).map(|(a, b)| a + b).collect();
        g_u = Tensor::from_raw(u.dims().to_vec(), sum, u.dtype());
        (g.weight, g.bias)
    } else {
        (zeros(&p.residual.shortcut.weight), zeros(&p.residual.shortcut.bias))
    };

    Ok(EnhanceGrads {
        x: upsample_bilinear_bwd(&trace.input_dims, p.factor(), &g_u)?,
        main_weight: main_w,
        main_bias: main_b,
        offset_weight: off_w,
        offset_bias: off_b,
        fc1_weight: fc1_w,
        fc1_bias: fc1_b,
        fc2_weight: fc2_w,
        fc2_bias: fc2_b,
        shortcut_weight: sc_w,
        shortcut_bias: sc_b,
    })
}

pub fn enhance_block_bwd(x: &Tensor, p: &EnhanceParams, grad_out: &Tensor) -> Result<EnhanceGrads> {
    let trace = enhance_block_trace(x, p)?;
    enhance_block_bwd_traced(&trace, p, grad_out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynConvParams {
    /// Maps `[D]` to `C_out*C_in + C_out` values: a row-major `[C_out, C_in]`
    /// kernel followed by the bias.
    pub kernel_gen: LinearParams,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynConvGrads {
    pub x: Tensor,
    pub emb: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DynConvParams {
    pub fn new(kernel_gen: LinearParams, c_in: usize, c_out: usize) -> Result<Self> {
        if kernel_gen.out_features() != c_out * c_in + c_out {
            return Err(Error::shape(format!(
                "kernel generator must emit {} values for a {c_in}->{c_out} kernel, got {}",
                c_out * c_in + c_out,
                kernel_gen.out_features()
            )));
        }
        Ok(DynConvParams {
            kernel_gen,
            c_in,
            c_out,
        })
    }

    /// Kaiming generator weights; the generator bias encodes the identity
    /// kernel when `c_in == c_out`, zero otherwise.
    pub fn init(rng: &mut Rng, emb_dim: usize, c_in: usize, c_out: usize) -> Result<Self> {
        let mut gen = LinearParams::kaiming(rng, c_out * c_in + c_out, emb_dim)?;
        if c_in == c_out {
            let mut b = vec![0.0; c_out * c_in + c_out];
            for o in 0..c_out {
                b[o * c_in + o] = 1.0;
            }
            gen.bias = Tensor::from_vec(&[b.len()], b)?;
        }
        Self::new(gen, c_in, c_out)
    }

    pub fn emb_dim(&self) -> usize {
        self.kernel_gen.in_features()
    }
}

fn check_dyn_inputs(x: &Tensor, emb: &Tensor, p: &DynConvParams) -> Result<(usize, usize)> {
    let (n, c, h, w) = x.nchw()?;
    if c != p.c_in {
        return Err(Error::shape(format!(
            "dynamic conv expects {} channels, got {c}",
            p.c_in
        )));
    }
    if emb.dims() != [n, p.emb_dim()] {
        return Err(Error::shape(format!(
            "need one {}-dim embedding per sample ([{n}, {}]), got {:?}",
            p.emb_dim(),
            p.emb_dim(),
            emb.dims()
        )));
    }
    Ok((n, h * w))
}

/// Generated per-sample kernels and biases, `[N, C_out*C_in + C_out]`.
pub fn dyn_kernels(emb: &Tensor, p: &DynConvParams) -> Result<Tensor> {
    linear_fwd(emb, &p.kernel_gen)
}

pub fn dyn_conv_apply(x: &Tensor, emb: &Tensor, p: &DynConvParams) -> Result<Tensor> {
    let (n, hw) = check_dyn_inputs(x, emb, p)?;
    let gen = dyn_kernels(emb, p)?;
    let width = gen.dims()[1];
    let mut out = Vec::with_capacity(n * p.c_out * hw);
    for ni in 0..n {
        let kern = &gen.data()[ni * width..(ni + 1) * width];
        let (k, b) = kern.split_at(p.c_out * p.c_in);
        let xs = &x.data()[ni * p.c_in * hw..(ni + 1) * p.c_in * hw];
        out.extend(gemm_bias(k, b, xs, p.c_in, hw));
    }
    Ok(Tensor::from_raw(
        vec![n, p.c_out, x.dims()[2], x.dims()[3]],
        out,
        x.dtype(),
    ))
}

pub fn dyn_conv_bwd(x: &Tensor, emb: &Tensor, p: &DynConvParams, grad_out: &Tensor) -> Result<DynConvGrads> {
    let (n, hw) = check_dyn_inputs(x, emb, p)?;
    let expect = [n, p.c_out, x.dims()[2], x.dims()[3]];
    if grad_out.dims() != expect {
        return Err(Error::shape(format!(
            "dynamic conv gradient dims {:?} do not match {expect:?}",
            grad_out.dims()
        )));
    }
    let gen = dyn_kernels(emb, p)?;
    let width = gen.dims()[1];
    let mut gx = Vec::with_capacity(x.len());
    let mut ggen = Vec::with_capacity(n * width);
    for ni in 0..n {
        let kern = &gen.data()[ni * width..(ni + 1) * width];
        let xs = &x.data()[ni * p.c_in * hw..(ni + 1) * p.c_in * hw];
        let go = &grad_out.data()[ni * p.c_out * hw..(ni + 1) * p.c_out * hw];
        let (gk, gb, gxs) = gemm_bias_bwd(&kern[..p.c_out * p.c_in], xs, go, p.c_in, hw);
        gx.extend(gxs);
        ggen.extend(gk);
        ggen.extend(gb);
    }
    let ggen = Tensor::from_raw(vec![n, width], ggen, gen.dtype());
    let lg = linear_bwd(emb, &p.kernel_gen, &ggen)?;
    Ok(DynConvGrads {
        x: Tensor::from_raw(x.dims().to_vec(), gx, x.dtype()),
        emb: lg.x,
        weight: lg.weight,
        bias: lg.bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::uniform_tensor;

    fn random_deform(rng: &mut Rng, c_out: usize, c_in: usize, k: usize) -> DeformConvParams {
        let main = Conv2dParams::new(
            uniform_tensor(rng, &[c_out, c_in, k, k], -1.0, 1.0).unwrap(),
            uniform_tensor(rng, &[c_out], -1.0, 1.0).unwrap(),
            1,
            k / 2,
        )
        .unwrap();
        DeformConvParams::new(main, Conv2dParams::zeros(2 * k * k, c_in, k, 1, k / 2).unwrap()).unwrap()
    }

    #[test]
    fn zero_offsets_reduce_to_standard_conv() {
        let mut rng = Rng::new(21);
        let x = uniform_tensor(&mut rng, &[2, 3, 5, 6], -1.0, 1.0).unwrap();
        let p = random_deform(&mut rng, 4, 3, 3);
        let (y, off) = deform_conv_fwd(&x, &p).unwrap();
        assert!(off.data().iter().all(|&v| v == 0.0));
        assert_eq!(y, conv2d_fwd(&x, &p.main).unwrap());

        let gy = uniform_tensor(&mut rng, y.dims(), -1.0, 1.0).unwrap();
        let dg = deform_conv_bwd(&x, &p, &gy).unwrap();
        let cg = conv2d_bwd(&x, &p.main, &gy).unwrap();
        assert_eq!(dg.x, cg.x);
        assert_eq!(dg.main_weight, cg.weight);
        assert_eq!(dg.main_bias, cg.bias);
    }

    #[test]
    fn integer_offset_matches_shifted_conv() {
        let mut rng = Rng::new(4);
        let x = uniform_tensor(&mut rng, &[1, 1, 5, 5], -1.0, 1.0).unwrap();
        let mut p = random_deform(&mut rng, 1, 1, 3);
        // dy = +1 on every tap, dx = 0
        let mut b = vec![0.0; 18];
        for t in 0..9 {
            b[2 * t] = 1.0;
        }
        p.offset_branch.bias = Tensor::from_vec(&[18], b).unwrap();
        let (y, _) = deform_conv_fwd(&x, &p).unwrap();

        // oracle: sample the zero-extended image one row further down at
        // every tap, then apply the 3x3 weights directly
        let xz = |r: isize, c: isize| -> f64 {
            if (0..5).contains(&r) && (0..5).contains(&c) {
                x.data()[r as usize * 5 + c as usize]
            } else {
                0.0
            }
        };
        let w = p.main.weight.data();
        for i in 0..5isize {
            for j in 0..5isize {
                let mut acc = p.main.bias.data()[0];
                for u in 0..3isize {
                    for v in 0..3isize {
                        acc += w[(u * 3 + v) as usize] * xz(i + u - 1 + 1, j + v - 1);
                    }
                }
                let got = y.at4(0, 0, i as usize, j as usize);
                assert!((got - acc).abs() <= 1e-14, "({i}, {j}): {got} vs {acc}");
            }
        }
    }

    #[test]
    fn deform_bwd_zero_upstream() {
        let mut rng = Rng::new(8);
        let x = uniform_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0).unwrap();
        let mut p = random_deform(&mut rng, 2, 2, 3);
        p.offset_branch.weight = uniform_tensor(&mut rng, &[18, 2, 3, 3], -0.1, 0.1).unwrap();
        let g = deform_conv_bwd(&x, &p, &Tensor::zeros(&[1, 2, 4, 4]).unwrap()).unwrap();
        for t in [&g.x, &g.main_weight, &g.main_bias, &g.offset_weight, &g.offset_bias] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deform_rejects_bad_offset_branch() {
        let main = Conv2dParams::zeros(2, 2, 3, 1, 1).unwrap();
        let off = Conv2dParams::zeros(9, 2, 3, 1, 1).unwrap();
        assert!(matches!(DeformConvParams::new(main.clone(), off), Err(Error::Shape(_))));
        let off = Conv2dParams::zeros(18, 2, 3, 2, 1).unwrap();
        assert!(matches!(DeformConvParams::new(main, off), Err(Error::Shape(_))));
    }

    #[test]
    fn se_zero_weights_give_half_gate() {
        let mut rng = Rng::new(2);
        let x = uniform_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0).unwrap();
        let p = SeParams::new(LinearParams::zeros(1, 4).unwrap(), LinearParams::zeros(4, 1).unwrap(), 16)
            .unwrap();
        let (xs, s) = se_fwd(&x, &p).unwrap();
        assert_eq!(s.dims(), &[2, 4]);
        assert!(s.data().iter().all(|&v| v == 0.5));
        assert_eq!(xs, x.scale(0.5));
    }

    #[test]
    fn se_saturates_with_large_bias() {
        let mut rng = Rng::new(12);
        let x = uniform_tensor(&mut rng, &[1, 4, 3, 3], -1.0, 1.0).unwrap();
        let mut p = SeParams::init(&mut rng, 4, 2).unwrap();
        p.fc2.weight = Tensor::zeros(&[4, 2]).unwrap();
        p.fc2.bias = Tensor::new(&[4], 40.0).unwrap();
        let (xs, s) = se_fwd(&x, &p).unwrap();
        assert!(s.data().iter().all(|&v| (1.0 - v).abs() <= 1e-15));
        assert!(xs.max_abs_diff(&x).unwrap() <= 1e-15);
    }

    #[test]
    fn se_hidden_width_clamps() {
        assert_eq!(SeParams::hidden_width(8, 16), 1);
        assert_eq!(SeParams::hidden_width(32, 16), 2);
        assert_eq!(SeParams::hidden_width(33, 16), 3);
        assert_eq!(SeParams::hidden_width(4, 1), 4);
    }

    #[test]
    fn residual_dead_and_pure_shortcut() {
        let mut rng = Rng::new(30);
        let x = uniform_tensor(&mut rng, &[1, 3, 4, 4], -1.0, 1.0).unwrap();
        let x_se = uniform_tensor(&mut rng, &[1, 3, 4, 4], -1.0, 1.0).unwrap();
        let dead = ResidualParams::new(Conv2dParams::zeros(3, 3, 1, 1, 0).unwrap(), 1).unwrap();
        assert_eq!(residual_fuse(&x, &x_se, &dead).unwrap(), x_se);

        let mut eye = vec![0.0; 9];
        for c in 0..3 {
            eye[c * 3 + c] = 1.0;
        }
        let ident = ResidualParams::new(
            Conv2dParams::new(
                Tensor::from_vec(&[3, 3, 1, 1], eye).unwrap(),
                Tensor::zeros(&[3]).unwrap(),
                1,
                0,
            )
            .unwrap(),
            1,
        )
        .unwrap();
        assert_eq!(residual_fuse(&x, &x.zeros_like(), &ident).unwrap(), x);

        let up = ResidualParams::new(Conv2dParams::zeros(3, 3, 1, 1, 0).unwrap(), 2).unwrap();
        assert!(matches!(residual_fuse(&x, &x_se, &up), Err(Error::Shape(_))));
    }

    #[test]
    fn enhance_shapes_and_zero_network() {
        let rng = Rng::new(5);
        for factor in [1, 2] {
            let cfg = EnhanceConfig {
                c_in: 3,
                c_out: 5,
                factor,
                ..EnhanceConfig::default()
            };
            let p = EnhanceParams::init(&rng, &cfg).unwrap();
            let x = uniform_tensor(&mut Rng::new(1), &[2, 3, 4, 6], -1.0, 1.0).unwrap();
            let y = enhance_block_fwd(&x, &p).unwrap();
            assert_eq!(y.dims(), &[2, 5, 4 * factor, 6 * factor]);
        }

        let cfg = EnhanceConfig::default();
        let mut p = EnhanceParams::init(&rng, &cfg).unwrap();
        for t in [
            &mut p.deform.main.weight,
            &mut p.deform.main.bias,
            &mut p.se.fc1.weight,
            &mut p.se.fc2.weight,
            &mut p.residual.shortcut.weight,
        ] {
            *t = t.zeros_like();
        }
        let x = uniform_tensor(&mut Rng::new(3), &[1, 4, 5, 5], -1.0, 1.0).unwrap();
        let y = enhance_block_fwd(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn enhance_init_is_isolated_per_group() {
        let rng = Rng::new(77);
        let full = EnhanceParams::init(&rng, &EnhanceConfig::default()).unwrap();
        let no_se = EnhanceParams::init(
            &rng,
            &EnhanceConfig {
                features: BlockFeatures {
                    se: false,
                    ..BlockFeatures::default()
                },
                ..EnhanceConfig::default()
            },
        )
        .unwrap();
        assert_eq!(full.deform, no_se.deform);
        assert_eq!(full.se, no_se.se);
        assert_eq!(full.residual, no_se.residual);
    }

    #[test]
    fn dyn_conv_identity_and_instance_specificity() {
        let mut rng = Rng::new(6);
        let x = uniform_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0).unwrap();
        let emb = uniform_tensor(&mut rng, &[2, 5], -1.0, 1.0).unwrap();

        let mut gen = LinearParams::zeros(12, 5).unwrap();
        let mut b = vec![0.0; 12];
        for c in 0..3 {
            b[c * 3 + c] = 1.0;
        }
        gen.bias = Tensor::from_vec(&[12], b).unwrap();
        let p = DynConvParams::new(gen, 3, 3).unwrap();
        assert_eq!(dyn_conv_apply(&x, &emb, &p).unwrap(), x);

        let p = DynConvParams::init(&mut rng, 5, 3, 3).unwrap();
        let plane = uniform_tensor(&mut rng, &[1, 3, 4, 4], -1.0, 1.0).unwrap();
        let same = Tensor::from_vec(&[2, 3, 4, 4], [plane.data(), plane.data()].concat()).unwrap();
        let y = dyn_conv_apply(&same, &emb, &p).unwrap();
        let half = y.len() / 2;
        assert_ne!(&y.data()[..half], &y.data()[half..]);

        let bad = Tensor::zeros(&[3, 5]).unwrap();
        assert!(matches!(dyn_conv_apply(&x, &bad, &p), Err(Error::Shape(_))));
    }
}
