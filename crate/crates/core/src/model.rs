//! Micro referring-segmentation model.
//!
//! ```text
//! image -> conv s2 -> relu -> conv s2 -> relu           (H/4)
//!       -> concat(attr tiled, coords) -> 1x1 -> relu
//!       -> enhance block (x2 upsample)                   (H/2)
//!       -> dynamic 1x1 conv from attr -> relu
//!       -> 1x1 head -> bilinear x2 -> sigmoid            (H)
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::enhance::{
    dyn_conv_apply, dyn_conv_bwd, enhance_block_bwd_traced, enhance_block_trace, BlockFeatures,
    DynConvParams, EnhanceConfig, EnhanceParams, EnhanceTrace,
};
use crate::error::{Error, Result};
use crate::layers::{
    activation, activation_bwd, conv2d_bwd, conv2d_fwd, sigmoid, upsample_bilinear,
    upsample_bilinear_bwd, Activation, Conv2dParams,
};
use crate::rng::Rng;
use crate::tensor::{read_dten, write_dten, DType, Tensor};

pub const DCKP_MAGIC: &[u8; 4] = b"DCKP";
pub const DCKP_VERSION: u8 = 0x01;
const CONFIG_PREFIX: &str = "config.";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub attr_dim: usize,
    /// Append normalized (y, x) coordinate planes to the fusion input.
    pub coord_channels: bool,
    pub kernel: usize,
    pub reduction: usize,
    pub features: BlockFeatures,
    /// Initial head bias, a logit prior for the foreground rate.
    pub head_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 8,
            attr_dim: crate::data::ATTR_DIM,
            coord_channels: true,
            kernel: 3,
            reduction: 4,
            features: BlockFeatures::default(),
            head_bias: -2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.attr_dim == 0 || self.reduction == 0 {
            return Err(Error::validation(
                "channels, attr_dim and reduction must be positive",
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::validation(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !self.head_bias.is_finite() {
            return Err(Error::validation("head_bias must be finite"));
        }
        Ok(())
    }

    fn fusion_in(&self) -> usize {
        self.channels + self.attr_dim + if self.coord_channels { 2 } else { 0 }
    }

    fn entries(&self) -> Vec<(&'static str, f64)> {
        let f = self.features;
        vec![
            ("channels", self.channels as f64),
            ("attr_dim", self.attr_dim as f64),
            ("coord_channels", f64::from(u8::from(self.coord_channels))),
            ("kernel", self.kernel as f64),
            ("reduction", self.reduction as f64),
            ("deformable", f64::from(u8::from(f.deformable))),
            ("se", f64::from(u8::from(f.se))),
            ("residual", f64::from(u8::from(f.residual))),
            ("head_bias", self.head_bias),
        ]
    }

    fn from_entries(get: impl Fn(&str) -> Option<f64>) -> std::result::Result<Self, String> {
        let need = |k: &str| get(k).ok_or_else(|| format!("missing {CONFIG_PREFIX}{k}"));
        let count = |k: &str| -> std::result::Result<usize, String> {
            let v = need(k)?;
            if v < 0.0 || v.fract() != 0.0 || v > 1e9 {
                return Err(format!("{CONFIG_PREFIX}{k} = {v} is not a count"));
            }
            Ok(v as usize)
        };
        let flag = |k: &str| -> std::result::Result<bool, String> {
            match need(k)? {
                v if v == 0.0 => Ok(false),
                v if v == 1.0 => Ok(true),
                v => Err(format!("{CONFIG_PREFIX}{k} = {v} is not 0 or 1")),
            }
        };
        Ok(ModelConfig {
            channels: count("channels")?,
            attr_dim: count("attr_dim")?,
            coord_channels: flag("coord_channels")?,
            kernel: count("kernel")?,
            reduction: count("reduction")?,
            features: BlockFeatures {
                deformable: flag("deformable")?,
                se: flag("se")?,
                residual: flag("residual")?,
            },
            head_bias: need("head_bias")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroModel {
    pub config: ModelConfig,
    pub enc1: Conv2dParams,
    pub enc2: Conv2dParams,
    pub fusion: Conv2dParams,
    pub enhance: EnhanceParams,
    pub dynconv: DynConvParams,
    pub head: Conv2dParams,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ModelTrace {
    input: Tensor,
    a1: Tensor,
    r1: Tensor,
    a2: Tensor,
    fused_in: Tensor,
    f: Tensor,
    enh: EnhanceTrace,
    d: Tensor,
    rd: Tensor,
    logits_dims: Vec<usize>,
    pub prob: Tensor,
}

pub const PARAM_NAMES: [&str; 20] = [
    "enc1.weight",
    "enc1.bias",
    "enc2.weight",
    "enc2.bias",
    "fusion.weight",
    "fusion.bias",
    "enhance.deform.weight",
    "enhance.deform.bias",
    "enhance.offset.weight",
    "enhance.offset.bias",
    "enhance.se.fc1.weight",
    "enhance.se.fc1.bias",
    "enhance.se.fc2.weight",
    "enhance.se.fc2.bias",
    "enhance.shortcut.weight",
    "enhance.shortcut.bias",
    "dynconv.weight",
    "dynconv.bias",
    "head.weight",
    "head.bias",
];

/// Names of the trainable tensors, in registry order.
pub fn param_names() -> &'static [&'static str] {
    &PARAM_NAMES
}

fn tile_and_concat(v: &Tensor, attr: &Tensor, coords: bool) -> Result<Tensor> {
    let (n, c, h, w) = v.nchw()?;
    let d = attr.dims()[1];
    let hw = h * w;
    let extra = if coords { 2 } else { 0 };
    let total = c + d + extra;
    let mut out = Vec::with_capacity(n * total * hw);
    for ni in 0..n {
        out.extend_from_slice(&v.data()[ni * c * hw..(ni + 1) * c * hw]);
        for &a in &attr.data()[ni * d..(ni + 1) * d] {
            out.extend(std::iter::repeat_n(a, hw));
        }
        if coords {
            for y in 0..h {
                let cy = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
                out.extend(std::iter::repeat_n(cy, w));
            }
            for _ in 0..h {
                out.extend((0..w).map(|x| 2.0 * (x as f64 + 0.5) / w as f64 - 1.0));
            }
        }
    }
    Tensor::from_vec_typed(&[n, total, h, w], out, v.dtype())
}

fn leading_channels(t: &Tensor, keep: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.nchw()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * keep * hw);
    for ni in 0..n {
        out.extend_from_slice(&t.data()[ni * c * hw..(ni * c + keep) * hw]);
    }
    Tensor::from_vec_typed(&[n, keep, h, w], out, t.dtype())
}

impl MicroModel {
    /// Kaiming-initialized model; each stage draws from its own fork of the
    /// seed stream.
    pub fn init(seed: u64, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let c = cfg.channels;
        let k = cfg.kernel;
        let enc1 = Conv2dParams::kaiming(&mut root.fork("enc1"), c, 3, k, 2, k / 2)?;
        let enc2 = Conv2dParams::kaiming(&mut root.fork("enc2"), c, c, k, 2, k / 2)?;
        let fusion = Conv2dParams::kaiming(&mut root.fork("fusion"), c, cfg.fusion_in(), 1, 1, 0)?;
        let enhance = EnhanceParams::init(
            &root.fork("enhance"),
            &EnhanceConfig {
                c_in: c,
                c_out: c,
                kernel: k,
                reduction: cfg.reduction,
                factor: 2,
                features: cfg.features,
            },
        )?;
        let dynconv = DynConvParams::init(&mut root.fork("dynconv"), cfg.attr_dim, c, c)?;
        let mut head = Conv2dParams::kaiming(&mut root.fork("head"), 1, c, 1, 1, 0)?;
        head.bias = Tensor::from_vec(&[1], vec![cfg.head_bias])?;
        Ok(MicroModel {
            config: cfg.clone(),
            enc1,
            enc2,
            fusion,
            enhance,
            dynconv,
            head,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let e = &self.enhance;
        vec![
            &self.enc1.weight,
            &self.enc1.bias,
            &self.enc2.weight,
            &self.enc2.bias,
            &self.fusion.weight,
            &self.fusion.bias,
            &e.deform.main.weight,
            &e.deform.main.bias,
            &e.deform.offset_branch.weight,
            &e.deform.offset_branch.bias,
            &e.se.fc1.weight,
            &e.se.fc1.bias,
            &e.se.fc2.weight,
            &e.se.fc2.bias,
            &e.residual.shortcut.weight,
            &e.residual.shortcut.bias,
            &self.dynconv.kernel_gen.weight,
            &self.dynconv.kernel_gen.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let e = &mut self.enhance;
        vec![
            &mut self.enc1.weight,
            &mut self.enc1.bias,
            &mut self.enc2.weight,
            &mut self.enc2.bias,
            &mut self.fusion.weight,
            &mut self.fusion.bias,
            &mut e.deform.main.weight,
            &mut e.deform.main.bias,
            &mut e.deform.offset_branch.weight,
            &mut e.deform.offset_branch.bias,
            &mut e.se.fc1.weight,
            &mut e.se.fc1.bias,
            &mut e.se.fc2.weight,
            &mut e.se.fc2.bias,
            &mut e.residual.shortcut.weight,
            &mut e.residual.shortcut.bias,
            &mut self.dynconv.kernel_gen.weight,
            &mut self.dynconv.kernel_gen.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_inputs(&self, images: &Tensor, attrs: &Tensor) -> Result<()> {
        let (n, c, h, w) = images.nchw()?;
        if c != 3 {
            return Err(Error::shape(format!("images must have 3 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "image size {h}x{w} must be divisible by 4"
            )));
        }
        if attrs.dims() != [n, self.config.attr_dim] {
            return Err(Error::shape(format!(
                "attrs must be [{n}, {}], got {:?}",
                self.config.attr_dim,
                attrs.dims()
            )));
        }
        Ok(())
    }

    /// Forward pass on `images [N, 3, H, W]` and `attrs [N, D]`.
    pub fn trace(&self, images: &Tensor, attrs: &Tensor) -> Result<ModelTrace> {
        self.check_inputs(images, attrs)?;
        let a1 = conv2d_fwd(images, &self.enc1)?;
        let r1 = activation(Activation::Relu, &a1);
        let a2 = conv2d_fwd(&r1, &self.enc2)?;
        let r2 = activation(Activation::Relu, &a2);
        let fused_in = tile_and_concat(&r2, attrs, self.config.coord_channels)?;
        let f = conv2d_fwd(&fused_in, &self.fusion)?;
        let rf = activation(Activation::Relu, &f);
        let enh = enhance_block_trace(&rf, &self.enhance)?;
        let d = dyn_conv_apply(&enh.output, attrs, &self.dynconv)?;
        let rd = activation(Activation::Relu, &d);
        let logits = conv2d_fwd(&rd, &self.head)?;
        let up = upsample_bilinear(&logits, 2)?;
        let prob = up.map(sigmoid);
        Ok(ModelTrace {
            input: images.clone(),
            a1,
            r1,
            a2,
            fused_in,
            f,
            enh,
            d,
            rd,
            logits_dims: logits.dims().to_vec(),
            prob,
        })
    }

    /// Foreground probabilities `[N, 1, H, W]`.
    pub fn forward(&self, images: &Tensor, attrs: &Tensor) -> Result<Tensor> {
        Ok(self.trace(images, attrs)?.prob)
    }

    /// Parameter gradients in registry order, given `dL/dprob`.
    pub fn backward(&self, tr: &ModelTrace, attrs: &Tensor, grad_prob: &Tensor) -> Result<Vec<Tensor>> {
        if grad_prob.dims() != tr.prob.dims() {
            return Err(Error::shape(format!(
                "gradient dims {:?} do not match output {:?}",
                grad_prob.dims(),
                tr.prob.dims()
            )));
        }
        let dz_data = grad_prob
            .data()
            .iter()
            .zip(tr.prob.data())
            .map(|(g, p)| g * p * (1.0 - p))
            .collect();
        let dz = Tensor::from_vec_typed(tr.prob.dims(), dz_data, tr.prob.dtype())?;
        let dlogits = upsample_bilinear_bwd(&tr.logits_dims, 2, &dz)?;
        let gh = conv2d_bwd(&tr.rd, &self.head, &dlogits)?;
        let dd = activation_bwd(Activation::Relu, &tr.d, &gh.x)?;
        let gd = dyn_conv_bwd(&tr.enh.output, attrs, &self.dynconv, &dd)?;
        let ge = enhance_block_bwd_traced(&tr.enh, &self.enhance, &gd.x)?;
        let df = activation_bwd(Activation::Relu, &tr.f, &ge.x)?;
        let gf = conv2d_bwd(&tr.fused_in, &self.fusion, &df)?;
        let dr2 = leading_channels(&gf.x, self.config.channels)?;
        let da2 = activation_bwd(Activation::Relu, &tr.a2, &dr2)?;
        let g2 = conv2d_bwd(&tr.r1, &self.enc2, &da2)?;
        let da1 = activation_bwd(Activation::Relu, &tr.a1, &g2.x)?;
        let g1 = conv2d_bwd(&tr.input, &self.enc1, &da1)?;
        Ok(vec![
            g1.weight,
            g1.bias,
            g2.weight,
            g2.bias,
            gf.weight,
            gf.bias,
            ge.main_weight,
            ge.main_bias,
            ge.offset_weight,
            ge.offset_bias,
            ge.fc1_weight,
            ge.fc1_bias,
            ge.fc2_weight,
            ge.fc2_bias,
            ge.shortcut_weight,
            ge.shortcut_bias,
            gd.weight,
            gd.bias,
            gh.weight,
            gh.bias,
        ])
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e| Error::io("<checkpoint stream>", e);
        let cfg = self.config.entries();
        let params = self.params();
        let count = (cfg.len() + params.len()) as u32;
        w.write_all(DCKP_MAGIC).map_err(io)?;
        w.write_all(&[DCKP_VERSION]).map_err(io)?;
        w.write_all(&count.to_le_bytes()).map_err(io)?;
        let mut entry = |name: &str, t: &Tensor| -> Result<()> {
            w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            write_dten(t, w)
        };
        for (k, v) in cfg {
            entry(&format!("{CONFIG_PREFIX}{k}"), &Tensor::scalar(v))?;
        }
        for (name, t) in param_names().iter().zip(params) {
            entry(name, t)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let src = "<checkpoint stream>";
        let bad = |m: String| Error::format(src, m);
        let mut head = [0u8; 9];
        r.read_exact(&mut head)
            .map_err(|_| bad("truncated header".into()))?;
        if &head[..4] != DCKP_MAGIC {
            return Err(bad("bad magic, expected DCKP".into()));
        }
        if head[4] != DCKP_VERSION {
            return Err(bad(format!("unsupported version {}", head[4])));
        }
        let count = u32::from_le_bytes([head[5], head[6], head[7], head[8]]) as usize;
        let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)
                .map_err(|_| bad(format!("truncated entry {i}")))?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)
                .map_err(|_| bad(format!("truncated name of entry {i}")))?;
            let name =
                String::from_utf8(name).map_err(|_| bad(format!("entry {i} name is not UTF-8")))?;
            let t = read_dten(r)?;
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(bad(format!("duplicate entry '{name}'")));
            }
            entries.push((name, t));
        }
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let cfg = ModelConfig::from_entries(|k| {
            find(&format!("{CONFIG_PREFIX}{k}"))
                .filter(|t| t.len() == 1)
                .map(|t| t.data()[0])
        })
        .map_err(bad)?;
        let mut model = MicroModel::init(0, &cfg)?;
        for (name, slot) in param_names().iter().zip(model.params_mut()) {
            let t = find(name).ok_or_else(|| bad(format!("missing entry '{name}'")))?;
            if t.dims() != slot.dims() {
                return Err(bad(format!(
                    "entry '{name}' has dims {:?}, expected {:?}",
                    t.dims(),
                    slot.dims()
                )));
            }
            *slot = t.clone();
        }
        if let Some((n, _)) = entries.iter().find(|(n, _)| {
            !n.starts_with(CONFIG_PREFIX) && !param_names().contains(&n.as_str())
        }) {
            return Err(bad(format!("unknown entry '{n}'")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w).map_err(|e| e.at_path(path))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = bytes.as_slice();
        let m = Self::read_checkpoint(&mut cursor).map_err(|e| e.at_path(path))?;
        if !cursor.is_empty() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(m)
    }
}

/// Stacks per-sample images and attribute vectors into batch tensors.
pub fn stack_batch(images: &[&Tensor], attrs: &[&Tensor]) -> Result<(Tensor, Tensor)> {
    if images.is_empty() || images.len() != attrs.len() {
        return Err(Error::validation("batch needs matching, nonempty images and attrs"));
    }
    let idims = images[0].dims().to_vec();
    let d = attrs[0].len();
    let mut img = Vec::with_capacity(images.len() * images[0].len());
    let mut att = Vec::with_capacity(images.len() * d);
    for (i, a) in images.iter().zip(attrs) {
        if i.dims() != idims || a.len() != d {
            return Err(Error::shape("batch members differ in shape"));
        }
        img.extend_from_slice(i.data());
        att.extend_from_slice(a.data());
    }
    let mut dims = vec![images.len()];
    dims.extend(&idims);
    Ok((
        Tensor::from_vec_typed(&dims, img, DType::F64)?,
        Tensor::from_vec_typed(&[attrs.len(), d], att, DType::F64)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::uniform_tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channels: 3,
            attr_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn inputs(seed: u64, n: usize, hw: usize, d: usize) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        (
            uniform_tensor(&mut rng, &[n, 3, hw, hw], 0.0, 1.0).unwrap(),
            uniform_tensor(&mut rng, &[n, d], 0.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn output_shape_and_range() {
        let m = MicroModel::init(1, &tiny()).unwrap();
        let (x, a) = inputs(2, 2, 16, 4);
        let p = m.forward(&x, &a).unwrap();
        assert_eq!(p.dims(), &[2, 1, 16, 16]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(m.forward(&inputs(2, 1, 18, 4).0, &inputs(2, 1, 18, 4).1).is_err());
    }

    #[test]
    fn registry_matches_names() {
        let mut m = MicroModel::init(1, &tiny()).unwrap();
        assert_eq!(m.params().len(), param_names().len());
        let dims: Vec<Vec<usize>> = m.params().iter().map(|t| t.dims().to_vec()).collect();
        let dims_mut: Vec<Vec<usize>> = m.params_mut().iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, dims_mut);
        let (x, a) = inputs(3, 1, 8, 4);
        let tr = m.trace(&x, &a).unwrap();
        let g = m.backward(&tr, &a, &tr.prob.zeros_like()).unwrap();
        for (gi, d) in g.iter().zip(&dims) {
            assert_eq!(gi.dims(), d.as_slice());
        }
    }

    #[test]
    fn se_toggle_leaves_other_params_identical() {
        let c = ModelConfig::default();
        let no_se = ModelConfig {
            features: BlockFeatures {
                se: false,
                ..BlockFeatures::default()
            },
            ..ModelConfig::default()
        };
        let a = MicroModel::init(5, &c).unwrap();
        let b = MicroModel::init(5, &no_se).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.enhance.features, b.enhance.features);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut m = MicroModel::init(7, &tiny()).unwrap();
        // keep deformable sampling off the lattice
        let ob = &mut m.enhance.deform.offset_branch;
        let mut rng = Rng::new(99);
        ob.bias = uniform_tensor(&mut rng, ob.bias.dims(), 0.15, 0.35).unwrap();
        ob.weight = uniform_tensor(&mut rng, ob.weight.dims(), -0.01, 0.01).unwrap();
        let (x, a) = inputs(8, 2, 8, 4);
        let r = uniform_tensor(&mut rng, &[2, 1, 8, 8], -1.0, 1.0).unwrap();
        let tr = m.trace(&x, &a).unwrap();
        let grads = m.backward(&tr, &a, &r).unwrap();

        let h = 1e-6;
        for (pi, name) in param_names().iter().enumerate() {
            let len = m.params()[pi].len();
            for j in [0, len / 2, len - 1] {
                let mut plus = m.clone();
                let mut minus = m.clone();
                plus.params_mut()[pi].data_mut()[j] += h;
                minus.params_mut()[pi].data_mut()[j] -= h;
                let fp = plus.forward(&x, &a).unwrap().dot(&r).unwrap();
                let fm = minus.forward(&x, &a).unwrap().dot(&r).unwrap();
                let num = (fp - fm) / (2.0 * h);
                let ana = grads[pi].data()[j];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{j}]: analytic {ana} numeric {num}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MicroModel::init(3, &tiny()).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DCKP");
        let back = MicroModel::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let (x, a) = inputs(4, 1, 8, 4);
        assert_eq!(m.forward(&x, &a).unwrap(), back.forward(&x, &a).unwrap());

        let mut cut = buf.clone();
        cut.truncate(buf.len() - 3);
        assert!(matches!(
            MicroModel::read_checkpoint(&mut cut.as_slice()),
            Err(Error::Format { .. })
        ));
        let mut bad = buf;
        bad[0] = b'X';
        assert!(MicroModel::read_checkpoint(&mut bad.as_slice()).is_err());
    }
}
