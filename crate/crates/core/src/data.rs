//! Synthetic referring dataset: scenes of colored shapes, an attribute
//! vector naming exactly one of them, and that shape's mask.
//!
//! Attribute layout (`D = 15`): one-hot shape (3), one-hot color (6),
//! one-hot size bucket (2), one-hot quadrant (4). Every shape lies entirely
//! inside its quadrant and no two shapes overlap, so masks are hard-edged
//! and unambiguous.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::rng::Rng;
use crate::tensor::{read_dten, write_dten};
use crate::tensor::{DType, Tensor};

pub const ATTR_DIM: usize = 15;
pub const INDEX_FILE: &str = "index.txt";
const MAX_RETRIES: usize = 100;
const BACKGROUND: [f64; 3] = [0.05, 0.05, 0.05];

pub const COLORS: [[f64; 3]; 6] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.15, 0.25, 0.95],
    [0.95, 0.9, 0.1],
    [0.85, 0.1, 0.85],
    [0.1, 0.85, 0.9],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeBucket {
    Small,
    Large,
}

/// Quadrant index: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub kind: ShapeKind,
    pub color: usize,
    pub size: SizeBucket,
    pub quadrant: usize,
}

impl Attributes {
    pub fn encode(&self) -> Tensor {
        let mut v = vec![0.0; ATTR_DIM];
        let kind = ShapeKind::ALL.iter().position(|&k| k == self.kind).unwrap_or(0);
        v[kind] = 1.0;
        v[3 + self.color] = 1.0;
        v[9 + usize::from(self.size == SizeBucket::Large)] = 1.0;
        v[11 + self.quadrant] = 1.0;
        Tensor::from_raw(vec![ATTR_DIM], v, DType::F32)
    }

    pub fn decode(attr: &Tensor) -> Result<Self> {
        if attr.dims() != [ATTR_DIM] {
            return Err(Error::shape(format!(
                "attribute vector must be [{ATTR_DIM}], got {:?}",
                attr.dims()
            )));
        }
        let d = attr.data();
        let hot = |lo: usize, n: usize| -> Result<usize> {
            let field = &d[lo..lo + n];
            let ones: Vec<usize> = (0..n).filter(|&i| field[i] == 1.0).collect();
            if ones.len() != 1 || field.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::validation(format!(
                    "attribute field at {lo}..{} is not one-hot",
                    lo + n
                )));
            }
            Ok(ones[0])
        };
        Ok(Attributes {
            kind: ShapeKind::ALL[hot(0, 3)?],
            color: hot(3, 6)?,
            size: if hot(9, 2)? == 0 {
                SizeBucket::Small
            } else {
                SizeBucket::Large
            },
            quadrant: hot(11, 4)?,
        })
    }
}

/// One placed shape; `radius` is the half-extent of its bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneShape {
    pub attrs: Attributes,
    pub cy: usize,
    pub cx: usize,
    pub radius: usize,
}

impl SceneShape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let py = y as f64 + 0.5 - self.cy as f64;
        let px = x as f64 + 0.5 - self.cx as f64;
        let r = self.radius as f64;
        match self.attrs.kind {
            ShapeKind::Circle => py * py + px * px <= r * r,
            ShapeKind::Square => py.abs() <= r && px.abs() <= r,
            ShapeKind::Triangle => py <= r && px.abs() <= (py + r) / 2.0,
        }
    }

    fn bbox(&self) -> (usize, usize, usize, usize) {
        (
            self.cy - self.radius,
            self.cx - self.radius,
            self.cy + self.radius,
            self.cx + self.radius,
        )
    }

    fn overlaps(&self, other: &SceneShape, margin: usize) -> bool {
        let (a0, a1, a2, a3) = self.bbox();
        let (b0, b1, b2, b3) = other.bbox();
        a0 < b2 + margin && b0 < a2 + margin && a1 < b3 + margin && b1 < a3 + margin
    }

    pub fn render(&self, height: usize, width: usize) -> Mask {
        let mut data = vec![0u8; height * width];
        for y in 0..height {
            for x in 0..width {
                data[y * width + x] = u8::from(self.contains(y, x));
            }
        }
        Mask::new(height, width, data).expect("rendered mask is binary")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub shapes: Vec<SceneShape>,
    pub referent: usize,
}

impl Scene {
    /// Indices of shapes matching every attribute field.
    pub fn matching(&self, attrs: &Attributes) -> Vec<usize> {
        (0..self.shapes.len())
            .filter(|&i| self.shapes[i].attrs == *attrs)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub sample_id: String,
    /// `[3, H, W]` in [0, 1].
    pub image: Tensor,
    /// `[ATTR_DIM]`.
    pub attr: Tensor,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub seed: u64,
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_samples: 1000,
            image_size: 64,
            min_distractors: 1,
            max_distractors: 4,
            seed: 0,
            min_fraction: 0.01,
            max_fraction: 0.25,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::validation("n_samples must be at least 1"));
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(2) {
            return Err(Error::validation(format!(
                "image_size must be even and at least 32, got {}",
                self.image_size
            )));
        }
        if self.min_distractors > self.max_distractors {
            return Err(Error::validation(format!(
                "min_distractors {} exceeds max_distractors {}",
                self.min_distractors, self.max_distractors
            )));
        }
        let (lo, hi) = (self.min_fraction, self.max_fraction);
        if !(lo > 0.0 && hi < 1.0 && lo < hi) {
            return Err(Error::validation(format!(
                "foreground fraction bounds must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Inclusive radius range for a size bucket, scaled with the image size.
    pub fn radius_range(&self, size: SizeBucket) -> (usize, usize) {
        let s = |v: usize| (v * self.image_size + 32) / 64;
        match size {
            SizeBucket::Small => (s(4), s(7)),
            SizeBucket::Large => (s(8), s(11)),
        }
    }
}

fn sample_attrs(rng: &mut Rng) -> Attributes {
    Attributes {
        kind: ShapeKind::ALL[rng.int_in(0, 2)],
        color: rng.int_in(0, COLORS.len() - 1),
        size: if rng.bool() {
            SizeBucket::Large
        } else {
            SizeBucket::Small
        },
        quadrant: rng.int_in(0, 3),
    }
}

fn place(spec: &DatasetSpec, rng: &mut Rng, attrs: Attributes) -> SceneShape {
    let (rlo, rhi) = spec.radius_range(attrs.size);
    let radius = rng.int_in(rlo, rhi);
    let half = spec.image_size / 2;
    let oy = (attrs.quadrant / 2) * half;
    let ox = (attrs.quadrant % 2) * half;
    // bounding box stays inside the quadrant
    let cy = oy + rng.int_in(radius, half - 1 - radius);
    let cx = ox + rng.int_in(radius, half - 1 - radius);
    SceneShape {
        attrs,
        cy,
        cx,
        radius,
    }
}

fn sample_scene(spec: &DatasetSpec, rng: &mut Rng) -> Result<Scene> {
    let hw = spec.image_size * spec.image_size;
    for _ in 0..MAX_RETRIES {
        let n_distractors = rng.int_in(spec.min_distractors, spec.max_distractors);
        let mut shapes: Vec<SceneShape> = Vec::with_capacity(n_distractors + 1);
        let mut ok = true;
        for _ in 0..=n_distractors {
            let mut placed = None;
            for _ in 0..MAX_RETRIES {
                let attrs = sample_attrs(rng);
                if shapes.iter().any(|s| s.attrs == attrs) {
                    continue;
                }
                let cand = place(spec, rng, attrs);
                if shapes.iter().any(|s| s.overlaps(&cand, 2)) {
                    continue;
                }
                placed = Some(cand);
                break;
            }
            match placed {
                Some(s) => shapes.push(s),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let referent = rng.int_in(0, shapes.len() - 1);
        let frac = shapes[referent]
            .render(spec.image_size, spec.image_size)
            .count() as f64
            / hw as f64;
        if frac >= spec.min_fraction && frac <= spec.max_fraction {
            return Ok(Scene { shapes, referent });
        }
    }
    Err(Error::Generation(format!(
        "no valid scene after {MAX_RETRIES} attempts for image_size {} with up to {} distractors",
        spec.image_size, spec.max_distractors
    )))
}

fn render_image(scene: &Scene, size: usize) -> Tensor {
    let hw = size * size;
    let mut data = vec![0.0; 3 * hw];
    for (c, &b) in BACKGROUND.iter().enumerate() {
        data[c * hw..(c + 1) * hw].fill(b);
    }
    for shape in &scene.shapes {
        let (y0, x0, y1, x1) = shape.bbox();
        let rgb = COLORS[shape.attrs.color];
        for y in y0..=y1.min(size - 1) {
            for x in x0..=x1.min(size - 1) {
                if shape.contains(y, x) {
                    for c in 0..3 {
                        data[c * hw + y * size + x] = rgb[c];
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![3, size, size], data, DType::F32)
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Samples together with the scenes they were rendered from.
pub fn generate_with_scenes(spec: &DatasetSpec) -> Result<Vec<(ToySample, Scene)>> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    (0..spec.n_samples)
        .map(|i| {
            let mut rng = root.fork(&format!("sample/{i}"));
            let scene = sample_scene(spec, &mut rng)?;
            let referent = &scene.shapes[scene.referent];
            let sample = ToySample {
                sample_id: sample_id(i),
                image: render_image(&scene, spec.image_size),
                attr: referent.attrs.encode(),
                mask: referent.render(spec.image_size, spec.image_size),
            };
            Ok((sample, scene))
        })
        .collect()
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<ToySample>> {
    Ok(generate_with_scenes(spec)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

pub fn write_pgm(mask: &Mask, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend(mask.data().iter().map(|&v| v * 255));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::format(path, msg))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Mask, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("missing P5 magic".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} '{t}'"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(format!("maxval must be 255, got {maxval}"));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let n = width * height;
    let raster = bytes.get(start..).unwrap_or(&[]);
    if raster.len() != n {
        return Err(format!(
            "expected {n} raster bytes for {width}x{height}, found {}",
            raster.len()
        ));
    }
    let mut data = Vec::with_capacity(n);
    for (i, &b) in raster.iter().enumerate() {
        match b {
            0 => data.push(0),
            255 => data.push(1),
            _ => return Err(format!("pixel {i} has value {b}, expected 0 or 255")),
        }
    }
    Mask::new(height, width, data).map_err(|e| e.to_string())
}

fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dten(t, &mut w).map_err(|e| e.at_path(path))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let t = read_dten(&mut cursor).map_err(|e| e.at_path(path))?;
    if !cursor.is_empty() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after tensor", cursor.len()),
        ));
    }
    Ok(t)
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_tensor(t, path)
}

pub fn save(dir: &Path, samples: &[ToySample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for s in samples {
        index.push_str(&s.sample_id);
        index.push('\n');
        write_tensor(&s.image, &dir.join(format!("{}.img.dten", s.sample_id)))?;
        write_tensor(&s.attr, &dir.join(format!("{}.attr.dten", s.sample_id)))?;
        write_pgm(&s.mask, &dir.join(format!("{}.mask.pgm", s.sample_id)))?;
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn read_index(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::format(&path, "index lists no samples"));
    }
    Ok(ids)
}

/// Reads `<id>.mask.pgm` for every id, e.g. a directory of predictions laid
/// out like a dataset.
pub fn read_masks(dir: &Path, ids: &[&str]) -> Result<Vec<Mask>> {
    ids.iter()
        .map(|id| read_pgm(&dir.join(format!("{id}.mask.pgm"))))
        .collect()
}

pub fn load(dir: &Path) -> Result<Vec<ToySample>> {
    read_index(dir)?
        .into_iter()
        .map(|id| {
            let img_path = dir.join(format!("{id}.img.dten"));
            let image = read_tensor(&img_path)?;
            if image.rank() != 3 || image.dims()[0] != 3 {
                return Err(Error::format(
                    &img_path,
                    format!("image must be [3, H, W], got {:?}", image.dims()),
                ));
            }
            let attr_path = dir.join(format!("{id}.attr.dten"));
            let attr = read_tensor(&attr_path)?;
            if attr.dims() != [ATTR_DIM] {
                return Err(Error::format(
                    &attr_path,
                    format!("attribute vector must be [{ATTR_DIM}], got {:?}", attr.dims()),
                ));
            }
            let mask_path = dir.join(format!("{id}.mask.pgm"));
            let mask = read_pgm(&mask_path)?;
            if [mask.height(), mask.width()] != image.dims()[1..] {
                return Err(Error::format(
                    &mask_path,
                    format!(
                        "mask is {}x{} but image is {:?}",
                        mask.height(),
                        mask.width(),
                        &image.dims()[1..]
                    ),
                ));
            }
            Ok(ToySample {
                sample_id: id,
                image,
                attr,
                mask,
            })
        })
        .collect()
}
