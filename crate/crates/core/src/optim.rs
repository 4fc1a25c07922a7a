//! Adam with a one-drop learning-rate schedule. State lives per parameter
//! name in sorted maps, so stepping order is deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::store::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// First epoch (0-based) that uses the dropped rate.
    pub lr_drop_epoch: usize,
    pub lr_after_drop: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

impl OptimizerConfig {
    /// Desk schedule: 1e-3 dropping to 1e-4 at 81% of the epoch budget.
    pub fn desk_default(epochs: usize) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            lr_drop_epoch: (epochs as f64 * 0.81).round() as usize,
            lr_after_drop: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.lr_after_drop >= 0.0) {
            return Err(CueError::Config(format!(
                "learning rates must be nonnegative, got {} and {}",
                self.lr, self.lr_after_drop
            )));
        }
        if self.lr_drop_epoch >= epochs {
            return Err(CueError::Config(format!(
                "lr_drop_epoch {} must be below epochs {epochs}",
                self.lr_drop_epoch
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return Err(CueError::Config(format!(
                "betas must lie in [0,1) and eps be positive, got ({b1}, {b2}), {}",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr_after_drop
        } else {
            self.lr
        }
    }
}

#[derive(Debug)]
pub struct Adam<E: Scalar> {
    cfg: OptimizerConfig,
    m: BTreeMap<String, Tensor<E>>,
    v: BTreeMap<String, Tensor<E>>,
    step_count: u64,
}

impl<E: Scalar> Adam<E> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Adam {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore<E>, lr: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = self.cfg.betas;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let eps = self.cfg.eps;
        for (name, param) in store.iter_mut() {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.value.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.value.shape()));
            if m.shape() != param.value.shape() {
                return Err(CueError::Shape(format!(
                    "optimizer state for {name} has shape {:?}, parameter {:?}",
                    m.shape(),
                    param.value.shape()
                )));
            }
            let g = param.grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = param.value.data_mut();
            for i in 0..g.len() {
                let gi = g[i].to_f64();
                let mi = b1 * md[i].to_f64() + (1.0 - b1) * gi;
                let vi = b2 * vd[i].to_f64() + (1.0 - b2) * gi * gi;
                md[i] = E::from_f64(mi);
                vd[i] = E::from_f64(vi);
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                pd[i] = E::from_f64(pd[i].to_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
            param.value.check_finite(name)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig::desk_default(30)
    }

    fn store_with(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert("p", Tensor::from_vec(&[n], values).unwrap()).unwrap();
        s
    }

    fn set_grad(store: &mut ParamStore<f64>, g: Vec<f64>) {
        let n = g.len();
        store
            .accumulate_grad("p", &Tensor::from_vec(&[n], g).unwrap())
            .unwrap();
    }

    #[test]
    fn desk_schedule_drops_at_81_percent() {
        let c = cfg();
        assert_eq!(c.lr_drop_epoch, 24);
        assert_eq!(c.lr_for_epoch(0), 1e-3);
        assert_eq!(c.lr_for_epoch(23), 1e-3);
        assert_eq!(c.lr_for_epoch(24), 1e-4);
        c.validate(30).unwrap();

        // The full-scale schedule (drop at 65 of 80) is representable.
        let paper = OptimizerConfig {
            lr: 1e-4,
            lr_drop_epoch: 65,
            lr_after_drop: 1e-5,
            ..cfg()
        };
        paper.validate(80).unwrap();
        assert_eq!(paper.lr_for_epoch(64), 1e-4);
        assert_eq!(paper.lr_for_epoch(65), 1e-5);
    }

    #[test]
    fn validation_rejects_bad_schedules() {
        let mut c = cfg();
        c.lr_drop_epoch = 30;
        assert!(c.validate(30).is_err());
        c.lr_drop_epoch = 24;
        c.betas = (1.0, 0.999);
        assert!(c.validate(30).is_err());
        c.betas = (0.9, 0.999);
        c.eps = 0.0;
        assert!(c.validate(30).is_err());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut store = store_with(vec![1.0, -2.0, 3.5]);
        let before: Vec<u64> = store.value("p").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let mut opt = Adam::new(cfg());
        for _ in 0..5 {
            store.zero_grads();
            set_grad(&mut store, vec![0.3, -4.0, 100.0]);
            opt.step(&mut store, 0.0).unwrap();
        }
        let after: Vec<u64> = store.value("p").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_moves_by_lr_regardless_of_gradient_scale() {
        // Bias correction makes the first update lr * sign(g) up to eps.
        for scale in [1e-6, 1.0, 1e6] {
            let mut store = store_with(vec![0.0]);
            set_grad(&mut store, vec![scale]);
            let mut opt = Adam::new(cfg());
            opt.step(&mut store, 1e-3).unwrap();
            let p = store.value("p").unwrap().data()[0];
            assert!(
                (p + 1e-3).abs() < 1e-5,
                "gradient scale {scale}: stepped to {p}"
            );
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(p) = sum (p - target)^2 with analytic gradient.
        let target = [3.0, -1.5, 0.25];
        let mut store = store_with(vec![0.0, 0.0, 0.0]);
        let mut opt = Adam::new(cfg());
        for _ in 0..2000 {
            let p: Vec<f64> = store.value("p").unwrap().data().to_vec();
            store.zero_grads();
            set_grad(
                &mut store,
                p.iter().zip(target).map(|(pi, t)| 2.0 * (pi - t)).collect(),
            );
            opt.step(&mut store, 1e-2).unwrap();
        }
        for (p, t) in store.value("p").unwrap().data().iter().zip(target) {
            assert!((p - t).abs() < 1e-3, "{p} vs {t}");
        }
    }

    #[test]
    fn stepping_is_bitwise_deterministic() {
        let run = || {
            let mut store = store_with(vec![0.7, -0.2]);
            let mut opt = Adam::new(cfg());
            for i in 0..50 {
                store.zero_grads();
                set_grad(&mut store, vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]);
                opt.step(&mut store, 1e-3).unwrap();
            }
            store
                .value("p")
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
