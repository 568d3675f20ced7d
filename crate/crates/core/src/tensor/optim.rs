use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::ParameterSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and step counter. The learning rate is held here so a
/// scheduler can adjust it between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        let zeros = |_: ()| -> IndexMap<String, Vec<f64>> {
            params
                .iter()
                .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(()),
            second: zeros(()),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One bias-corrected Adam update of every parameter from its gradient.
pub fn adam_step(params: &mut ParameterSet, state: &mut OptimizerState) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(Error::invalid(format!("parameter {name} has no gradient")));
        }
        let m = state
            .first
            .get(name)
            .ok_or_else(|| Error::invalid(format!("optimizer has no state for {name}")))?;
        if m.len() != t.numel() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: state {} vs parameter {}", m.len(), t.numel()),
            ));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = state.first.get_mut(name).expect("checked above");
        let v = state.second.get_mut(name).expect("checked above");
        for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            // moments of idle parameters decay into subnormals, which are
            // very slow on common hardware; their update is below resolution
            if m.abs() < f64::MIN_POSITIVE {
                *m = 0.0;
            }
            if *v < f64::MIN_POSITIVE {
                *v = 0.0;
            }
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub rel_threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            factor: 0.5,
            min_lr: 1e-7,
            rel_threshold: 1e-4,
        }
    }
}

/// Reduce-on-plateau for a minimized metric.
///
/// A metric improves when it is below `best * (1 - rel_threshold)`. After
/// `patience` consecutive epochs without improvement the rate is multiplied
/// by `factor` (floored at `min_lr`) and the counter restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
    history: Vec<f64>,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, config: PlateauConfig) -> Result<Self> {
        if !(config.factor > 0.0 && config.factor < 1.0) {
            return Err(Error::invalid(format!(
                "plateau factor {} outside (0, 1)",
                config.factor
            )));
        }
        if config.min_lr < 0.0 || initial_lr < 0.0 {
            return Err(Error::invalid("learning rates must be non-negative"));
        }
        Ok(Self {
            config,
            lr: initial_lr,
            best: None,
            bad_epochs: 0,
            history: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::NonFinite(format!("scheduler metric {metric}")));
        }
        self.history.push(metric);
        let improved = match self.best {
            None => true,
            Some(best) => metric < best - best.abs() * self.config.rel_threshold,
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                // never raise a rate that already sits below the floor
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr.min(self.lr));
                self.bad_epochs = 0;
            }
        }
        Ok(self.lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_params(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    fn set_grad(p: &mut ParameterSet, g: f64) {
        let t = p.get_mut("x").unwrap();
        t.zero_grad();
        t.accumulate_grad(&[g]);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_params(1.5);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            set_grad(&mut p, 0.0);
            adam_step(&mut p, &mut s).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data(), &[1.5]);
    }

    #[test]
    fn idle_moments_flush_to_zero() {
        let mut p = scalar_params(0.0);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        set_grad(&mut p, 1.0);
        adam_step(&mut p, &mut s).unwrap();
        for _ in 0..8000 {
            set_grad(&mut p, 0.0);
            adam_step(&mut p, &mut s).unwrap();
            let (m, v) = (s.first["x"][0], s.second["x"][0]);
            assert!(m == 0.0 || m.abs() >= f64::MIN_POSITIVE);
            assert!(v == 0.0 || v >= f64::MIN_POSITIVE);
        }
        assert_eq!(s.first["x"][0], 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_params(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut s = OptimizerState::new(cfg, &p);
        set_grad(&mut p, 1.0);
        adam_step(&mut p, &mut s).unwrap();
        // m_hat = v_hat = 1  =>  step = -0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = scalar_params(0.0);
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        assert!(adam_step(&mut p, &mut s).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut p = scalar_params(0.3);
            let mut s = OptimizerState::new(AdamConfig::default(), &p);
            for g in [0.5, -1.0, 2.0, 0.1] {
                set_grad(&mut p, g);
                adam_step(&mut p, &mut s).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    fn sched(patience: usize) -> PlateauScheduler {
        PlateauScheduler::new(
            1.0,
            PlateauConfig {
                patience,
                factor: 0.5,
                min_lr: 0.1,
                rel_threshold: 1e-4,
            },
        )
        .unwrap()
    }

    #[test]
    fn improving_metric_keeps_rate() {
        let mut s = sched(2);
        for i in 0..20 {
            assert_eq!(s.step(100.0 - i as f64).unwrap(), 1.0);
        }
    }

    #[test]
    fn flat_metric_halves_once_after_patience_plus_one() {
        let mut s = sched(3);
        let lrs: Vec<f64> = (0..4).map(|_| s.step(5.0).unwrap()).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn rate_is_floored() {
        let mut s = sched(1);
        for _ in 0..50 {
            s.step(1.0).unwrap();
        }
        assert_eq!(s.lr(), 0.1);
    }

    #[test]
    fn rejects_bad_config_and_metric() {
        assert!(PlateauScheduler::new(1.0, PlateauConfig { factor: 1.0, ..Default::default() }).is_err());
        assert!(sched(1).step(f64::NAN).is_err());
    }
}
