//! Differentiable building blocks with hand-written backward passes.
//!
//! Convolution runs as im2col followed by a small GEMM. The deformable
//! convolution in [`crate::enhance`] reuses the same column layout and GEMM,
//! so with zero offsets both produce bit-identical results.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{rand_normal, DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dGrads {
    pub x: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_out, _, kh, kw) = weight.nchw()?;
        if kh != kw {
            return Err(Error::shape(format!("kernel must be square, got {kh}x{kw}")));
        }
        if bias.dims() != [c_out] {
            return Err(Error::shape(format!(
                "bias dims {:?} do not match {c_out} output channels",
                bias.dims()
            )));
        }
        if stride == 0 {
            return Err(Error::validation("stride must be >= 1"));
        }
        Ok(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[c_out, c_in, k, k])?,
            Tensor::zeros(&[c_out])?,
            stride,
            padding,
        )
    }

    /// Kaiming-normal weights (fan-in `C_in * k * k`) and zero bias.
    pub fn kaiming(
        rng: &mut Rng,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = kaiming_init(rng, &[c_out, c_in, k, k], c_in * k * k)?;
        Self::new(weight, Tensor::zeros(&[c_out])?, stride, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::shape(format!(
                "{h}x{w} input with padding {} is smaller than the {k}x{k} kernel",
                self.padding
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    pub(crate) fn geometry(&self, x: &Tensor) -> Result<ConvGeom> {
        let (_, c, h, w) = x.nchw()?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {c} channels, convolution expects {}",
                self.in_channels()
            )));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        Ok(ConvGeom {
            c_in: c,
            h,
            w,
            k: self.kernel(),
            stride: self.stride,
            pad: self.padding,
            ho,
            wo,
        })
    }
}

/// Spatial bookkeeping for one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Column matrix `[C_in*k*k, Ho*Wo]` for one sample on the integer grid.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let np = g.positions();
    let mut cols = vec![0.0; g.rows() * np];
    for c in 0..g.c_in {
        let plane = &x[c * g.plane()..(c + 1) * g.plane()];
        for u in 0..g.k {
            for v in 0..g.k {
                let r = (c * g.k + u) * g.k + v;
                let row = &mut cols[r * np..(r + 1) * np];
                for i in 0..g.ho {
                    let iy = (i * g.stride + u) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[i * g.wo..(i + 1) * g.wo];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let ix = (j * g.stride + v) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column gradient back onto the input grid.
pub(crate) fn col2im(grad_cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let np = g.positions();
    let mut gx = vec![0.0; g.c_in * g.plane()];
    for c in 0..g.c_in {
        let plane = &mut gx[c * g.plane()..(c + 1) * g.plane()];
        for u in 0..g.k {
            for v in 0..g.k {
                let r = (c * g.k + u) * g.k + v;
                let row = &grad_cols[r * np..(r + 1) * np];
                for i in 0..g.ho {
                    let iy = (i * g.stride + u) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (j, &gc) in row[i * g.wo..(i + 1) * g.wo].iter().enumerate() {
                        let ix = (j * g.stride + v) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += gc;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `out[o, p] = bias[o] + sum_r w[o, r] * cols[r, p]`, accumulated in `r`
/// order for every output element.
pub(crate) fn gemm_bias(w: &[f64], bias: &[f64], cols: &[f64], rows: usize, np: usize) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just verified.
        return unsafe { gemm_bias_avx2(w, bias, cols, rows, np) };
    }
    gemm_bias_body(w, bias, cols, rows, np)
}

// Same code compiled for wider vectors. Rust never contracts a multiply and
// an add into a fused operation, so results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_bias_avx2(w: &[f64], bias: &[f64], cols: &[f64], rows: usize, np: usize) -> Vec<f64> {
    gemm_bias_body(w, bias, cols, rows, np)
}

#[inline(always)]
fn gemm_bias_body(w: &[f64], bias: &[f64], cols: &[f64], rows: usize, np: usize) -> Vec<f64> {
    accumulate_rows(w, rows, 1, bias, cols, rows, np)
}

/// `out[o, p] = init[o] + sum_i coef[o*so + i*si] * src[i*np + p]`, summed in
/// `i` order. Tiles of 4 outputs x 8 positions stay in registers.
#[inline(always)]
fn accumulate_rows(
    coef: &[f64],
    so: usize,
    si: usize,
    init: &[f64],
    src: &[f64],
    n_in: usize,
    np: usize,
) -> Vec<f64> {
    const TO: usize = 4;
    const TP: usize = 8;
    let n_out = init.len();
    let mut out = vec![0.0; n_out * np];
    let p_full = np - np % TP;
    let mut o = 0;
    while o + TO <= n_out {
        let mut p0 = 0;
        while p0 < p_full {
            let mut acc = [[0.0; TP]; TO];
            for (t, row) in acc.iter_mut().enumerate() {
                *row = [init[o + t]; TP];
            }
            for i in 0..n_in {
                let sv: &[f64; TP] = src[i * np + p0..i * np + p0 + TP].try_into().unwrap();
                for (t, row) in acc.iter_mut().enumerate() {
                    let c = coef[(o + t) * so + i * si];
                    for l in 0..TP {
                        row[l] += c * sv[l];
                    }
                }
            }
            for (t, row) in acc.iter().enumerate() {
                out[(o + t) * np + p0..(o + t) * np + p0 + TP].copy_from_slice(row);
            }
            p0 += TP;
        }
        for t in 0..TO {
            let dst = &mut out[(o + t) * np + p_full..(o + t + 1) * np];
            dst.fill(init[o + t]);
            for i in 0..n_in {
                let c = coef[(o + t) * so + i * si];
                for (d, &v) in dst.iter_mut().zip(&src[i * np + p_full..(i + 1) * np]) {
                    *d += c * v;
                }
            }
        }
        o += TO;
    }
    for o in o..n_out {
        let dst = &mut out[o * np..(o + 1) * np];
        dst.fill(init[o]);
        for i in 0..n_in {
            let c = coef[o * so + i * si];
            for (d, &v) in dst.iter_mut().zip(&src[i * np..(i + 1) * np]) {
                *d += c * v;
            }
        }
    }
    out
}

/// Dot product with four interleaved partial sums, combined in a fixed
/// order.
#[inline(always)]
pub(crate) fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Returns `(grad_w, grad_bias, grad_cols)` for one sample of [`gemm_bias`].
pub(crate) fn gemm_bias_bwd(
    w: &[f64],
    cols: &[f64],
    grad_out: &[f64],
    rows: usize,
    np: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just verified.
        return unsafe { gemm_bias_bwd_avx2(w, cols, grad_out, rows, np) };
    }
    gemm_bias_bwd_body(w, cols, grad_out, rows, np)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_bias_bwd_avx2(
    w: &[f64],
    cols: &[f64],
    grad_out: &[f64],
    rows: usize,
    np: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    gemm_bias_bwd_body(w, cols, grad_out, rows, np)
}

#[inline(always)]
fn gemm_bias_bwd_body(
    w: &[f64],
    cols: &[f64],
    grad_out: &[f64],
    rows: usize,
    np: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c_out = grad_out.len() / np;
    let mut gw = vec![0.0; c_out * rows];
    let mut gb = vec![0.0; c_out];
    for o in 0..c_out {
        let go = &grad_out[o * np..(o + 1) * np];
        gb[o] = go.iter().fold(0.0, |a, &v| a + v);
        for r in 0..rows {
            gw[o * rows + r] = dot4(go, &cols[r * np..(r + 1) * np]);
        }
    }
    let gcols = accumulate_rows(w, 1, rows, &vec![0.0; rows], grad_out, c_out, np);
    (gw, gb, gcols)
}

/// Sums per-sample parameter gradients in batch order.
pub(crate) fn sum_in_order(parts: impl IntoIterator<Item = Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    acc
}

pub fn conv2d_fwd(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let g = p.geometry(x)?;
    let n = x.dims()[0];
    let sample = g.c_in * g.plane();
    let (rows, np) = (g.rows(), g.positions());
    let per: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let xs = &x.data()[ni * sample..(ni + 1) * sample];
            if g.is_pointwise() {
                gemm_bias(p.weight.data(), p.bias.data(), xs, rows, np)
            } else {
                gemm_bias(p.weight.data(), p.bias.data(), &im2col(xs, &g), rows, np)
            }
        })
        .collect();
    let dims = vec![n, p.out_channels(), g.ho, g.wo];
    Ok(Tensor::from_raw(dims, per.concat(), x.dtype()))
}

pub fn conv2d_bwd(x: &Tensor, p: &Conv2dParams, grad_out: &Tensor) -> Result<Conv2dGrads> {
    let g = p.geometry(x)?;
    let n = x.dims()[0];
    let expect = [n, p.out_channels(), g.ho, g.wo];
    if grad_out.dims() != expect {
        return Err(Error::shape(format!(
            "grad_out dims {:?} do not match forward output {expect:?}",
            grad_out.dims()
        )));
    }
    let sample = g.c_in * g.plane();
    let (rows, np) = (g.rows(), g.positions());
    let out_sample = p.out_channels() * np;
    let per: Vec<_> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let xs = &x.data()[ni * sample..(ni + 1) * sample];
            let go = &grad_out.data()[ni * out_sample..(ni + 1) * out_sample];
            if g.is_pointwise() {
                let (gw, gb, gx) = gemm_bias_bwd(p.weight.data(), xs, go, rows, np);
                (gx, gw, gb)
            } else {
                let (gw, gb, gcols) = gemm_bias_bwd(p.weight.data(), &im2col(xs, &g), go, rows, np);
                (col2im(&gcols, &g), gw, gb)
            }
        })
        .collect();
    let mut gx = Vec::with_capacity(n * sample);
    let mut gws = Vec::with_capacity(n);
    let mut gbs = Vec::with_capacity(n);
    for (a, b, c) in per {
        gx.extend(a);
        gws.push(b);
        gbs.push(c);
    }
    Ok(Conv2dGrads {
        x: Tensor::from_raw(x.dims().to_vec(), gx, x.dtype()),
        weight: Tensor::from_raw(
            p.weight.dims().to_vec(),
            sum_in_order(gws, p.weight.len()),
            p.weight.dtype(),
        ),
        bias: Tensor::from_raw(
            p.bias.dims().to_vec(),
            sum_in_order(gbs, p.bias.len()),
            p.bias.dtype(),
        ),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub x: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out, _] = *weight.dims() else {
            return Err(Error::shape(format!(
                "linear weight must be [out, in], got {:?}",
                weight.dims()
            )));
        };
        if bias.dims() != [out] {
            return Err(Error::shape(format!(
                "linear bias dims {:?} do not match {out} outputs",
                bias.dims()
            )));
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn zeros(out: usize, inp: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[out, inp])?, Tensor::zeros(&[out])?)
    }

    pub fn kaiming(rng: &mut Rng, out: usize, inp: usize) -> Result<Self> {
        Self::new(kaiming_init(rng, &[out, inp], inp)?, Tensor::zeros(&[out])?)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        match *x.dims() {
            [n, d] if d == self.in_features() => Ok(n),
            _ => Err(Error::shape(format!(
                "linear layer expects [N, {}], got {:?}",
                self.in_features(),
                x.dims()
            ))),
        }
    }
}

/// `y = x W^T + b` for `x: [N, in]`.
pub fn linear_fwd(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let n = p.check_input(x)?;
    let (out, inp) = (p.out_features(), p.in_features());
    let w = p.weight.data();
    let mut y = Vec::with_capacity(n * out);
    for row in x.data().chunks_exact(inp) {
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            y.push(wr.iter().zip(row).fold(p.bias.data()[o], |a, (w, x)| a + w * x));
        }
    }
    Ok(Tensor::from_raw(vec![n, out], y, x.dtype()))
}

pub fn linear_bwd(x: &Tensor, p: &LinearParams, grad_out: &Tensor) -> Result<LinearGrads> {
    let n = p.check_input(x)?;
    let (out, inp) = (p.out_features(), p.in_features());
    if grad_out.dims() != [n, out] {
        return Err(Error::shape(format!(
            "grad_out dims {:?} do not match [{n}, {out}]",
            grad_out.dims()
        )));
    }
    let w = p.weight.data();
    let mut gx = vec![0.0; n * inp];
    let mut gw = vec![0.0; out * inp];
    let mut gb = vec![0.0; out];
    for ni in 0..n {
        let xr = &x.data()[ni * inp..(ni + 1) * inp];
        let gr = &grad_out.data()[ni * out..(ni + 1) * out];
        let gxr = &mut gx[ni * inp..(ni + 1) * inp];
        for (o, &g) in gr.iter().enumerate() {
            gb[o] += g;
            let wr = &w[o * inp..(o + 1) * inp];
            let gwr = &mut gw[o * inp..(o + 1) * inp];
            for i in 0..inp {
                gwr[i] += g * xr[i];
                gxr[i] += g * wr[i];
            }
        }
    }
    Ok(LinearGrads {
        x: Tensor::from_raw(x.dims().to_vec(), gx, x.dtype()),
        weight: Tensor::from_raw(p.weight.dims().to_vec(), gw, p.weight.dtype()),
        bias: Tensor::from_raw(p.bias.dims().to_vec(), gb, p.bias.dtype()),
    })
}

/// Interpolation stencil for one fractional coordinate pair.
///
/// The lower corner is `ceil(p) - 1`, so the fractional weight lies in
/// `(0, 1]`. At an exact lattice point the whole weight sits on the pixel
/// itself and the coordinate derivative is the one of the cell to its left
/// (above, for `y`).
/// `f64::ceil` without the libm call on targets lacking a rounding
/// instruction. Exact for |v| < 2^52; larger values are already integral.
#[inline(always)]
fn ceil(v: f64) -> f64 {
    if v.abs() >= 4_503_599_627_370_496.0 || v.is_nan() {
        return v;
    }
    let t = v as i64 as f64;
    if t < v {
        t + 1.0
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    /// flat plane index of each corner; 0 for corners outside the image
    pub idx: [u32; 4],
    /// interpolation weight of each corner, 0 outside the image
    pub wt: [f64; 4],
    /// bit `i` set when corner `i` lies inside the image
    pub valid: u8,
    pub ly: f64,
    pub lx: f64,
}

impl Stencil {
    #[inline]
    pub fn new(py: f64, px: f64, h: usize, w: usize) -> Stencil {
        let y0 = ceil(py) - 1.0;
        let x0 = ceil(px) - 1.0;
        let ly = py - y0;
        let lx = px - x0;
        // saturating casts push far-away corners out of range
        let (yi, xi) = (y0 as i64, x0 as i64);
        let ys = [yi, yi, yi + 1, yi + 1];
        let xs = [xi, xi + 1, xi, xi + 1];
        let full = [
            (1.0 - ly) * (1.0 - lx),
            (1.0 - ly) * lx,
            ly * (1.0 - lx),
            ly * lx,
        ];
        let mut st = Stencil {
            idx: [0; 4],
            wt: [0.0; 4],
            valid: 0,
            ly,
            lx,
        };
        for i in 0..4 {
            if (ys[i] as u64) < h as u64 && (xs[i] as u64) < w as u64 {
                st.idx[i] = (ys[i] as usize * w + xs[i] as usize) as u32;
                st.wt[i] = full[i];
                st.valid |= 1 << i;
            }
        }
        st
    }

    #[inline]
    fn corners(&self, plane: &[f64]) -> [f64; 4] {
        let mut v = [0.0; 4];
        for i in 0..4 {
            if self.valid & (1 << i) != 0 {
                v[i] = plane[self.idx[i] as usize];
            }
        }
        v
    }

    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..4 {
            acc += self.wt[i] * plane[self.idx[i] as usize];
        }
        acc
    }

    /// `(d/dy, d/dx)` of [`Stencil::sample`].
    #[inline]
    pub fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let [v00, v01, v10, v11] = self.corners(plane);
        let dy = (1.0 - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        let dx = (1.0 - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        (dy, dx)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [f64], g: f64) {
        for i in 0..4 {
            if self.valid & (1 << i) != 0 {
                plane[self.idx[i] as usize] += self.wt[i] * g;
            }
        }
    }
}

/// Bilinear interpolation of channel `c` of sample `n` at `(py, px)` with
/// zero padding outside the image.
pub fn bilinear_sample(x: &Tensor, px: f64, py: f64, n: usize, c: usize) -> Result<f64> {
    let (nn, cc, h, w) = x.nchw()?;
    if n >= nn || c >= cc {
        return Err(Error::shape(format!(
            "sample {n}, channel {c} out of range for dims {:?}",
            x.dims()
        )));
    }
    if !px.is_finite() || !py.is_finite() {
        return Ok(0.0);
    }
    let plane = &x.data()[(n * cc + c) * h * w..(n * cc + c + 1) * h * w];
    Ok(Stencil::new(py, px, h, w).sample(plane))
}

/// Partial derivatives `(d/dpy, d/dpx)` of [`bilinear_sample`].
pub fn bilinear_sample_coord_grad(
    x: &Tensor,
    px: f64,
    py: f64,
    n: usize,
    c: usize,
) -> Result<(f64, f64)> {
    let (_, cc, h, w) = x.nchw()?;
    let plane = &x.data()[(n * cc + c) * h * w..(n * cc + c + 1) * h * w];
    Ok(Stencil::new(py, px, h, w).coord_grad(plane))
}

/// Per-axis source taps for align-corners-false upsampling: the source
/// coordinate `(dst + 0.5) / factor - 0.5` is clamped to `[0, len - 1]`.
fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|d| {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l = if i0 == len - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::validation("upsample factor must be >= 1"));
    }
    let (n, c, h, w) = x.nchw()?;
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, ly) in &ty {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, lx) in &tx {
                let top = (1.0 - lx) * r0[x0] + lx * r0[x1];
                let bot = (1.0 - lx) * r1[x0] + lx * r1[x1];
                out.push((1.0 - ly) * top + ly * bot);
            }
        }
    }
    Ok(Tensor::from_raw(vec![n, c, ho, wo], out, x.dtype()))
}

/// Gradient of [`upsample_bilinear`] with respect to its input.
pub fn upsample_bilinear_bwd(input_dims: &[usize], factor: usize, grad_out: &Tensor) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::validation("upsample factor must be >= 1"));
    }
    let &[n, c, h, w] = input_dims else {
        return Err(Error::shape(format!("expected NCHW dims, got {input_dims:?}")));
    };
    let expect = [n, c, h * factor, w * factor];
    if grad_out.dims() != expect {
        return Err(Error::shape(format!(
            "grad_out dims {:?} do not match {expect:?}",
            grad_out.dims()
        )));
    }
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let wo = w * factor;
    let ty = upsample_taps(h, factor);
    let tx = upsample_taps(w, factor);
    let mut gx = vec![0.0; n * c * h * w];
    for (gplane, go) in gx.chunks_exact_mut(h * w).zip(grad_out.data().chunks_exact(expect[2] * wo)) {
        for (yo, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = go[yo * wo + xo];
                let (gt, gb) = ((1.0 - ly) * g, ly * g);
                gplane[y0 * w + x0] += (1.0 - lx) * gt;
                gplane[y0 * w + x1] += lx * gt;
                gplane[y1 * w + x0] += (1.0 - lx) * gb;
                gplane[y1 * w + x1] += lx * gb;
            }
        }
    }
    Ok(Tensor::from_raw(input_dims.to_vec(), gx, grad_out.dtype()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Gradient with respect to the activation input `x`.
pub fn activation_bwd(kind: Activation, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.dims() != grad_out.dims() {
        return Err(Error::shape(format!(
            "activation input {:?} and gradient {:?} differ",
            x.dims(),
            grad_out.dims()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| match kind {
            Activation::Relu => {
                if v > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                g * s * (1.0 - s)
            }
        })
        .collect();
    Ok(Tensor::from_raw(x.dims().to_vec(), data, grad_out.dtype()))
}

/// Per-channel spatial mean, `[N, C, H, W] -> [N, C]`.
pub fn gap_fwd(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    let hw = (h * w) as f64;
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().fold(0.0, |a, &v| a + v) / hw)
        .collect();
    Ok(Tensor::from_raw(vec![n, c], data, x.dtype()))
}

pub fn gap_bwd(input_dims: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = input_dims else {
        return Err(Error::shape(format!("expected NCHW dims, got {input_dims:?}")));
    };
    if grad_out.dims() != [n, c] {
        return Err(Error::shape(format!(
            "GAP gradient dims {:?} do not match [{n}, {c}]",
            grad_out.dims()
        )));
    }
    let hw = (h * w) as f64;
    let mut gx = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat_n(g / hw, h * w));
    }
    Ok(Tensor::from_raw(input_dims.to_vec(), gx, grad_out.dtype()))
}

/// Normal samples with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_init(rng: &mut Rng, dims: &[usize], fan_in: usize) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::validation("kaiming fan_in must be >= 1"));
    }
    rand_normal(rng, dims, 0.0, kaiming_std(fan_in))
}

pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Convenience for tests and the gradient-check suite.
pub fn uniform_tensor(rng: &mut Rng, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let len: usize = dims.iter().product();
    let data = (0..len).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_vec_typed(dims, data, DType::F64)
}
