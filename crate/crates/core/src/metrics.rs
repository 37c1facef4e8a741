//! Segmentation metrics: per-sample IoU, mean IoU and precision at IoU
//! thresholds.
//!
//! Conventions: two empty masks agree perfectly (IoU 1), a threshold counts
//! a sample only when its IoU strictly exceeds it, and binarization uses a
//! strict `prob > threshold` test.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PREC_THRESHOLDS: [u32; 5] = [50, 60, 70, 80, 90];
pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

/// Binary `H x W` mask stored row-major as 0/1 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::validation(format!(
                "mask value {} at index {i} is not binary",
                data[i]
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Mask values as a `[1, 1, H, W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(
            vec![1, 1, self.height, self.width],
            self.data.iter().map(|&v| f64::from(v)).collect(),
            crate::tensor::DType::F64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub pred: Mask,
    pub gt: Mask,
    pub sample_id: String,
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(a & b);
        union += usize::from(a | b);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `1` where `prob > threshold`. Accepts any tensor whose leading extents are
/// all 1; the last two axes are height and width.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<Mask> {
    let dims = prob.dims();
    let (h, w) = match *dims {
        [w] => (1, w),
        _ => (dims[dims.len() - 2], dims[dims.len() - 1]),
    };
    if dims[..dims.len().saturating_sub(2)].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!(
            "cannot binarize a batch of masks, got dims {dims:?}"
        )));
    }
    let data = prob.data().iter().map(|&v| u8::from(v > threshold)).collect();
    Mask::new(h, w, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_sample: Vec<(String, f64)>,
    pub miou: f64,
    /// `(K, fraction of samples with IoU > K/100)` for each threshold.
    pub prec_at: Vec<(u32, f64)>,
}

impl EvalReport {
    pub fn from_ious(per_sample: Vec<(String, f64)>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::validation("evaluation needs at least one sample"));
        }
        let n = per_sample.len() as f64;
        let miou = per_sample.iter().fold(0.0, |a, (_, v)| a + v) / n;
        let prec_at = PREC_THRESHOLDS
            .iter()
            .map(|&k| {
                let t = f64::from(k) / 100.0;
                let hits = per_sample.iter().filter(|(_, v)| *v > t).count();
                (k, hits as f64 / n)
            })
            .collect();
        Ok(EvalReport {
            per_sample,
            miou,
            prec_at,
        })
    }

    pub fn prec(&self, k: u32) -> Option<f64> {
        self.prec_at.iter().find(|(t, _)| *t == k).map(|(_, v)| *v)
    }

    /// `sample_id,iou` rows followed by `miou,<v>` and `prec@K,<v>` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,iou\n");
        for (id, v) in &self.per_sample {
            let _ = writeln!(out, "{id},{v}");
        }
        let _ = writeln!(out, "miou,{}", self.miou);
        for (k, v) in &self.prec_at {
            let _ = writeln!(out, "prec@{k},{v}");
        }
        out
    }
}

pub fn evaluate(pairs: &[MaskPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::validation("evaluation needs at least one sample"));
    }
    let per_sample = pairs
        .iter()
        .map(|p| Ok((p.sample_id.clone(), iou(&p.pred, &p.gt)?)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_ious(per_sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| u8::from(b == b'#')))
            .collect();
        Mask::new(h, w, data).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = mask(&["##..", "##..", "....", "...."]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask(&["....", "....", "..##", "..##"]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        // 4 and 4 pixels overlapping in 2
        let c = mask(&[".##.", ".##.", "....", "...."]);
        assert_eq!(iou(&a, &c).unwrap(), 2.0 / 6.0);

        let e = Mask::empty(4, 4).unwrap();
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &a).unwrap(), 0.0);
        assert!(matches!(iou(&a, &Mask::empty(3, 4).unwrap()), Err(Error::Shape(_))));
        assert!(matches!(Mask::new(1, 2, vec![0, 2]), Err(Error::Validation(_))));
    }

    #[test]
    fn binarize_is_strict() {
        let t = Tensor::new(&[1, 1, 2, 2], 0.4).unwrap();
        assert_eq!(binarize(&t, 0.5).unwrap().count(), 0);
        let t = Tensor::from_vec(&[2, 2], vec![0.5, 0.50001, 0.2, 0.9]).unwrap();
        assert_eq!(binarize(&t, 0.5).unwrap().data(), &[0, 1, 0, 1]);
        assert!(binarize(&Tensor::new(&[2, 1, 2, 2], 0.4).unwrap(), 0.5).is_err());
    }

    #[test]
    fn evaluate_worked_example() {
        let r = EvalReport::from_ious(vec![
            ("a".into(), 0.55),
            ("b".into(), 0.65),
            ("c".into(), 0.95),
        ])
        .unwrap();
        assert_eq!(r.prec(50), Some(1.0));
        assert_eq!(r.prec(60), Some(2.0 / 3.0));
        assert_eq!(r.prec(70), Some(1.0 / 3.0));
        assert_eq!(r.prec(80), Some(1.0 / 3.0));
        assert_eq!(r.prec(90), Some(1.0 / 3.0));
        assert!((r.miou - (0.55 + 0.65 + 0.95) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_ties_and_perfect() {
        let r = EvalReport::from_ious(vec![("x".into(), 0.5)]).unwrap();
        assert_eq!(r.prec(50), Some(0.0));

        let m = mask(&["#.", ".#"]);
        let pairs: Vec<MaskPair> = (0..3)
            .map(|i| MaskPair {
                pred: m.clone(),
                gt: m.clone(),
                sample_id: format!("s{i}"),
            })
            .collect();
        let r = evaluate(&pairs).unwrap();
        assert_eq!(r.miou, 1.0);
        assert!(r.prec_at.iter().all(|&(_, v)| v == 1.0));
        assert!(matches!(evaluate(&[]), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport::from_ious(vec![("s0".into(), 0.25), ("s1".into(), 1.0)]).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sample_id,iou");
        assert_eq!(lines[1], "s0,0.25");
        assert_eq!(lines[2], "s1,1");
        assert_eq!(lines[3], "miou,0.625");
        assert_eq!(lines[4], "prec@50,0.5");
        assert_eq!(lines.len(), 3 + 1 + 5);
    }
}
