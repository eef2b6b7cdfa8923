use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are created lazily per
/// parameter name on first update.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter named in `trainable`.
    /// Parameters absent from `trainable` are left untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &Gradients<T>,
        trainable: &[String],
        lr: f64,
    ) -> Result<()> {
        for name in trainable {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("no gradient for `{name}`")))?;
            let p = params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    detail: format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let lr_t = T::of(lr);
        let decay = T::of(lr * c.weight_decay);
        let eps = T::of(c.eps);

        for name in trainable {
            let g = grads.get(name).expect("checked");
            let p = params.get_mut(name).expect("checked");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros_like(p), Tensor::zeros_like(p)));
            let w = p.data_mut();
            for (((wi, mi), vi), &gi) in w
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *wi = *wi - decay * *wi - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < self.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps ({}) < warmup_steps ({})",
                self.total_steps, self.warmup_steps
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("peak_lr {} invalid", self.peak_lr)));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at `total_steps`.
pub fn lr_at(schedule: &ScheduleConfig, step: usize) -> Result<f64> {
    schedule.validate()?;
    let ScheduleConfig {
        peak_lr,
        warmup_steps,
        total_steps,
    } = *schedule;
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    if step >= total_steps {
        return Ok(if total_steps == warmup_steps && step == warmup_steps {
            peak_lr
        } else {
            0.0
        });
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn single(name: &str, w: f64, g: f64) -> (BTreeMap<String, Tensor<f64>>, Gradients<f64>) {
        let mut graph = Graph::<f64>::new();
        let wv = graph.param(name, &Tensor::scalar(w));
        let s = graph.scale(wv, g).unwrap();
        let loss = graph.sum(s).unwrap();
        let grads = graph.backward(loss).unwrap();
        let mut params = BTreeMap::new();
        params.insert(name.to_string(), Tensor::scalar(w));
        (params, grads)
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let (mut params, grads) = single("w", 0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut params, &grads, &["w".into()], 0.1).unwrap();
        assert_eq!(params["w"].item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let (mut params, grads) = single("w", 0.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut params, &grads, &["w".into()], 0.1).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params["w"].item() - expected).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decay_only() {
        let (mut params, grads) = single("w", 2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.step(&mut params, &grads, &["w".into()], 0.5).unwrap();
        assert!((params["w"].item() - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_rejected_before_mutation() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), Tensor::scalar(1.0f64));
        params.insert("b".to_string(), Tensor::scalar(1.0f64));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::scalar(0.5f64));
        grads.insert("b".to_string(), Tensor::scalar(f64::NAN));
        let grads = Gradients::from_map(grads);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut params, &grads, &["a".into(), "b".into()], 0.1);
        assert!(matches!(err, Err(Error::NonFiniteGradient(ref n)) if n == "b"));
        assert_eq!(params["a"].item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn schedule_points() {
        let s = ScheduleConfig {
            peak_lr: 8e-4,
            warmup_steps: 100,
            total_steps: 1000,
        };
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 100).unwrap(), 8e-4);
        let mid = lr_at(&s, 550).unwrap();
        assert!((mid - 4e-4).abs() < 1e-15);
        assert!(lr_at(&s, 1000).unwrap().abs() < 1e-20);
        assert!(lr_at(&s, 50).unwrap() > 0.0);
    }

    #[test]
    fn schedule_rejects_inverted_steps() {
        let s = ScheduleConfig {
            peak_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 5,
        };
        assert!(matches!(lr_at(&s, 0), Err(Error::Config(_))));
    }
}
