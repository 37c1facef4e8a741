//! Adam with milestone learning-rate decay and global-norm gradient
//! clipping.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    /// 0 disables clipping.
    pub clip_max_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            milestones: vec![15, 30],
            decay: 0.1,
            clip_max_norm: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.base_lr) || !pos(self.decay) || !pos(self.eps) {
            return Err(Error::validation("lr, decay and eps must be positive"));
        }
        if !(self.clip_max_norm.is_finite() && self.clip_max_norm >= 0.0) {
            return Err(Error::validation("clip_max_norm must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// `base_lr * decay^(number of milestones <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.decay.powi(passed as i32)
    }
}

/// First and second moments for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &[&Tensor], config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimState {
            m: params.iter().map(|p| p.zeros_like()).collect(),
            v: params.iter().map(|p| p.zeros_like()).collect(),
            step: 0,
            config,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.config.lr_at(epoch)
    }

    /// One bias-corrected Adam update at learning rate `lr`. `names` label
    /// parameters in error messages.
    pub fn adam_step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Tensor],
        lr: f64,
        names: &[&str],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let label = |i: usize| names.get(i).copied().unwrap_or("?");
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dims() != g.dims() || p.dims() != self.m[i].dims() {
                return Err(Error::shape(format!(
                    "parameter {} has dims {:?} but gradient has {:?}",
                    label(i),
                    p.dims(),
                    g.dims()
                )));
            }
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for {} at element {j}",
                    label(i)
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let dtype = p.dtype();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + c.eps);
                if dtype == DType::F32 {
                    *w = dtype.round(*w);
                }
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. `max_norm == 0` disables clipping. Returns the norm
/// before clipping.
pub fn clip_grads(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = Tensor::new(&[3], 0.5).unwrap();
        let g = Tensor::new(&[3], 1.0).unwrap();
        let mut st = OptimState::new(&[&p], OptimConfig::default()).unwrap();
        st.adam_step(vec![&mut p], &[g], 1e-4, &["p"]).unwrap();
        let expect = 0.5 - 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!(p.data().iter().all(|&v| (v - expect).abs() < 1e-18));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = Tensor::from_vec(&[2], vec![0.3, -1.2]).unwrap();
        let before = p.clone();
        let mut st = OptimState::new(&[&p], OptimConfig::default()).unwrap();
        for _ in 0..3 {
            st.adam_step(vec![&mut p], &[Tensor::zeros(&[2]).unwrap()], 1e-3, &["p"])
                .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_bad_grads() {
        let mut p = Tensor::zeros(&[2]).unwrap();
        let mut st = OptimState::new(&[&p], OptimConfig::default()).unwrap();
        let bad = Tensor::from_vec(&[2], vec![0.0, f64::NAN]).unwrap();
        match st.adam_step(vec![&mut p], &[bad], 1e-3, &["enc1.weight"]) {
            Err(Error::Training(m)) => assert!(m.contains("enc1.weight")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            st.adam_step(vec![&mut p], &[Tensor::zeros(&[3]).unwrap()], 1e-3, &["p"]),
            Err(Error::Shape(_))
        ));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_examples() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(14), 1e-4);
        assert!((c.lr_at(15) - 1e-5).abs() < 1e-18);
        assert!((c.lr_at(29) - 1e-5).abs() < 1e-18);
        assert!((c.lr_at(30) - 1e-6).abs() < 1e-19);
        assert!((c.lr_at(50) - 1e-6).abs() < 1e-19);
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor::from_vec(&[2], vec![6.0, 8.0]).unwrap()];
        assert_eq!(clip_grads(&mut g, 1.0), 10.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);

        let mut g = vec![Tensor::from_vec(&[2], vec![0.3, 0.4]).unwrap()];
        let before = g.clone();
        clip_grads(&mut g, 1.0);
        assert_eq!(g, before);
        let mut big = vec![Tensor::new(&[4], 100.0).unwrap()];
        let before = big.clone();
        clip_grads(&mut big, 0.0);
        assert_eq!(big, before);
    }
}
