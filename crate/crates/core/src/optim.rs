//! Adam with coupled weight decay, a multi-step learning-rate schedule and
//! global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{MerlinError, Result};
use crate::model::Checkpoint;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            milestones: vec![1, 10, 25, 50, 75, 90, 100],
            gamma: 0.5,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(MerlinError::Config("lr and eps must be positive, weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MerlinError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(MerlinError::Config(format!("gamma {} must lie in (0, 1]", self.gamma)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(MerlinError::Config(format!("clip_norm {c} must be positive")));
            }
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            milestones: self.milestones.clone(),
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MerlinError::Config(format!(
                "milestones {:?} must be strictly increasing",
                self.milestones
            )));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch. A milestone `k` takes effect from
    /// epoch `k + 1`.
    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        if epoch < 1 {
            return Err(MerlinError::Usage("epochs are 1-based".into()));
        }
        let passed = self.milestones.iter().filter(|&&m| m < epoch).count();
        Ok(self.base_lr * self.gamma.powi(passed as i32))
    }
}

/// Scales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(MerlinError::Usage(format!("max_norm {max_norm} must be positive")));
    }
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    Ok(norm)
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { step: 0, m, v }
    }

    /// Stores moments under `{prefix}m.{name}` / `{prefix}v.{name}` and the
    /// step counter as metadata `{prefix}step`.
    pub fn export(&self, ckpt: &mut Checkpoint, prefix: &str, names: &[String]) -> Result<()> {
        if names.len() != self.m.len() {
            return Err(MerlinError::Usage(format!(
                "{} names for {} optimizer slots",
                names.len(),
                self.m.len()
            )));
        }
        ckpt.set_meta(&format!("{prefix}step"), self.step);
        for ((name, m), v) in names.iter().zip(&self.m).zip(&self.v) {
            ckpt.insert(&format!("{prefix}m.{name}"), m.clone());
            ckpt.insert(&format!("{prefix}v.{name}"), v.clone());
        }
        Ok(())
    }

    pub fn import(ckpt: &Checkpoint, prefix: &str, names: &[String]) -> Result<Self> {
        let step = ckpt.meta(&format!("{prefix}step"))?;
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in names {
            m.push(ckpt.tensor(&format!("{prefix}m.{name}"))?.clone());
            v.push(ckpt.tensor(&format!("{prefix}v.{name}"))?.clone());
        }
        Ok(Self { step, m, v })
    }

    /// One bias-corrected Adam update at learning rate `lr`, with
    /// `weight_decay · param` added to each gradient first.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], cfg: &OptimizerConfig, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(MerlinError::Usage(format!(
                "adam_step: {} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(MerlinError::Usage(format!(
                    "adam_step: slot {i} param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi + cfg.weight_decay * *x;
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let s = OptimizerConfig::default().schedule();
        assert_eq!(s.lr_at_epoch(1).unwrap(), 2e-4);
        assert_eq!(s.lr_at_epoch(2).unwrap(), 1e-4);
        assert_eq!(s.lr_at_epoch(10).unwrap(), 1e-4);
        assert_eq!(s.lr_at_epoch(11).unwrap(), 5e-5);
        assert!((s.lr_at_epoch(30).unwrap() - 2.5e-5).abs() < 1e-20);
        assert!(s.lr_at_epoch(0).is_err());
        let mut prev = f64::INFINITY;
        for e in 1..=120 {
            let lr = s.lr_at_epoch(e).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn milestones_must_increase() {
        let cfg = OptimizerConfig { milestones: vec![3, 3], ..OptimizerConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::from_vec(vec![6.0]), Tensor::from_vec(vec![8.0])];
        assert_eq!(clip_global_norm(&mut g, 5.0).unwrap(), 10.0);
        assert_eq!(g[0].data(), &[3.0]);
        assert_eq!(g[1].data(), &[4.0]);
        let mut small = vec![Tensor::from_vec(vec![3.0, 0.0])];
        clip_global_norm(&mut small, 5.0).unwrap();
        assert_eq!(small[0].data(), &[3.0, 0.0]);
        assert!(clip_global_norm(&mut small, 0.0).is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut p = Tensor::scalar(0.7);
        let mut st = AdamState::new([&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(1.0)], &cfg, 2e-4).unwrap();
        let expected = 0.7 - 2e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut st = AdamState::new([&p]);
        for _ in 0..3 {
            st.step(&mut [&mut p], &[Tensor::zeros(&[2])], &cfg, 1e-3).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn decay_is_coupled_into_gradient() {
        // with g = 0 the decayed gradient wd·p drives a full-size first step
        let cfg = OptimizerConfig::default();
        let mut p = Tensor::scalar(3.0);
        let mut st = AdamState::new([&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(0.0)], &cfg, 1e-3).unwrap();
        let g = 1e-4 * 3.0;
        let expected = 3.0 - 1e-3 * g / (g + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new([&p]);
        let r = st.step(&mut [&mut p], &[Tensor::zeros(&[3])], &OptimizerConfig::default(), 1e-3);
        assert!(matches!(r, Err(MerlinError::Usage(_))));
    }

    #[test]
    fn state_round_trips_bitwise() {
        let cfg = OptimizerConfig::default();
        let mut p = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let mut st = AdamState::new([&p]);
        st.step(&mut [&mut p], &[Tensor::from_vec(vec![0.5, -1.0, 2.0])], &cfg, 1e-3).unwrap();
        let names = vec!["w".to_string()];
        let mut ck = Checkpoint::new();
        st.export(&mut ck, "adam.", &names).unwrap();
        let back = AdamState::import(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), "adam.", &names).unwrap();
        assert_eq!(back, st);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(vals in prop::collection::vec(-100.0f64..100.0, 1..30)) {
            let mut g = vec![Tensor::from_vec(vals)];
            clip_global_norm(&mut g, 5.0).unwrap();
            prop_assert!(g[0].sq_norm().sqrt() <= 5.0 + 1e-9);
        }

        #[test]
        fn step_size_bounded_by_lr(
            grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..6),
            init in prop::collection::vec(-1.0f64..1.0, 4),
        ) {
            let cfg = OptimizerConfig { weight_decay: 0.0, clip_norm: None, ..OptimizerConfig::default() };
            let lr = 1e-3;
            let mut p = Tensor::from_vec(init);
            let mut st = AdamState::new([&p]);
            for g in grads {
                let before = p.clone();
                st.step(&mut [&mut p], &[Tensor::from_vec(g)], &cfg, lr).unwrap();
                for (a, b) in before.data().iter().zip(p.data()) {
                    prop_assert!((a - b).abs() <= lr * 1.1);
                }
            }
        }
    }
}
