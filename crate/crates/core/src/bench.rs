//! Kernel micro-benchmarks: median wall time per call after warmup.

use std::fmt;
use std::time::Instant;

use crate::enhance::{deform_conv_fwd, DeformConvParams};
use crate::error::{Error, Result};
use crate::layers::{conv2d_fwd, uniform_tensor, Conv2dParams};
use crate::rng::Rng;

pub const WARMUP: usize = 3;
const BENCH_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchOp {
    Conv,
    Deform,
}

impl BenchOp {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(BenchOp::Conv),
            "deform" => Ok(BenchOp::Deform),
            _ => Err(Error::validation(format!(
                "unknown op '{s}', expected conv or deform"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::Conv => "conv",
            BenchOp::Deform => "deform",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub op: BenchOp,
    pub size: usize,
    pub iters: usize,
    pub median_secs: f64,
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "op={} size={} iters={} median_us={:.3}",
            self.op.name(),
            self.size,
            self.iters,
            self.median_secs * 1e6
        )
    }
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Times `iters` calls of `f` after [`WARMUP`] untimed calls.
pub fn time_median(iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if iters == 0 {
        return Err(Error::validation("iters must be >= 1"));
    }
    for _ in 0..WARMUP {
        f()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&mut samples))
}

/// 3x3, stride 1, same-padded 8->8 channel layer on a `1 x 8 x size x size`
/// input. Deformable offsets are random and off the sampling lattice.
pub fn run(op: BenchOp, size: usize, iters: usize) -> Result<BenchResult> {
    if size < 3 {
        return Err(Error::validation(format!("size must be >= 3, got {size}")));
    }
    let mut rng = Rng::new(0);
    let c = BENCH_CHANNELS;
    let x = uniform_tensor(&mut rng, &[1, c, size, size], -1.0, 1.0)?;
    let median_secs = match op {
        BenchOp::Conv => {
            let p = Conv2dParams::kaiming(&mut rng, c, c, 3, 1, 1)?;
            time_median(iters, || conv2d_fwd(&x, &p).map(drop))?
        }
        BenchOp::Deform => {
            let mut p = DeformConvParams::init(&mut rng, c, c, 3)?;
            let ob = &mut p.offset_branch;
            ob.weight = uniform_tensor(&mut rng, ob.weight.dims(), -0.05, 0.05)?;
            ob.bias = uniform_tensor(&mut rng, ob.bias.dims(), -1.5, 1.5)?;
            time_median(iters, || deform_conv_fwd(&x, &p).map(drop))?
        }
    };
    Ok(BenchResult {
        op,
        size,
        iters,
        median_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn warmup_calls_are_untimed() {
        let mut calls = 0;
        time_median(5, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 5 + WARMUP);
        assert!(time_median(0, || Ok(())).is_err());
    }

    #[test]
    fn runs_both_ops() {
        for op in [BenchOp::Conv, BenchOp::Deform] {
            let r = run(op, 8, 2).unwrap();
            assert!(r.median_secs >= 0.0);
            assert!(r.to_string().starts_with(&format!("op={}", op.name())));
        }
        assert!(BenchOp::parse("fft").is_err());
        assert!(run(BenchOp::Conv, 2, 1).is_err());
    }
}
