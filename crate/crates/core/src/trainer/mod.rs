//! Pretraining, linear probing, fine-tuning, self-distillation, weight
//! interpolation and the training-set sweep.

mod config;
mod downstream;
mod pretrain;
mod sweep;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Binder;
use crate::numerics::{lr_at, AdamW, AdamWConfig, Graph, Real, ScheduleConfig, Tensor, Var};
use crate::rng::Rng;

pub use config::{StageConfig, TrainConfig};
pub use downstream::{
    finetune, linear_probe, linear_probe_from_features, masd_train, probe_features, wiseft_assemble,
};
pub use pretrain::pretrain;
pub use sweep::{
    checkpoint_path, run_sweep, JobFailure, SweepOptions, SweepOutput, SweepPlan,
};

/// Per-step training losses of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean of the first and last `window` losses.
    pub fn ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[n - w..])))
    }
}

/// Shuffled example order for one epoch.
pub(crate) fn epoch_order(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

pub(crate) fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// One optimizer over a fixed set of trainable parameters.
pub(crate) struct Stepper<T> {
    opt: AdamW<T>,
    schedule: ScheduleConfig,
    trainable: BTreeSet<String>,
    step: usize,
    pub log: TrainLog,
}

impl<T: Real> Stepper<T> {
    pub fn new(trainable: BTreeSet<String>, opt: AdamWConfig, schedule: ScheduleConfig) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            opt: AdamW::new(opt),
            schedule,
            trainable,
            step: 0,
            log: TrainLog::default(),
        })
    }

    /// Builds the loss with `build`, backpropagates and updates every
    /// trainable parameter the loss reached.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        build: impl FnOnce(&mut Graph<T>, &mut Binder<T>) -> Result<Var>,
    ) -> Result<f64> {
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NumericOverflow { .. } | Error::NonFiniteGradient(_) => Error::Diverged { step },
            other => other,
        };
        let (loss, grads) = {
            let mut g = Graph::new();
            let mut b = Binder::new(params, &self.trainable);
            let l = build(&mut g, &mut b).map_err(diverged)?;
            let v = g.value(l).item().f64();
            if !v.is_finite() {
                return Err(Error::Diverged { step });
            }
            (v, g.backward(l)?)
        };
        let names: Vec<String> = self
            .trainable
            .iter()
            .filter(|n| grads.get(n).is_some())
            .cloned()
            .collect();
        let lr = lr_at(&self.schedule, step)?;
        self.opt.step(params, &grads, &names, lr).map_err(diverged)?;
        self.step += 1;
        self.log.losses.push(loss);
        Ok(loss)
    }
}
