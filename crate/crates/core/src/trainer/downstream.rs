use std::collections::BTreeSet;

use crate::datagen::{Label, ModalitySet, MultimodalExample};
use crate::error::{Error, Result};
use crate::model::{
    self, encoder_params, head_params, interpolate, shared_params, Batch, Binder, DownstreamMethod,
    ModelCheckpoint, BN_MEAN, BN_VAR,
};
use crate::numerics::{Graph, Real, Tensor};
use crate::objectives::{masd_is_degenerate, masd_loss, task_loss};
use crate::rng;
use crate::trainer::{epoch_order, steps_per_epoch, Stepper, TrainConfig, TrainLog};

const FEATURE_CHUNK: usize = 256;

fn check_set<T: Real>(ck: &ModelCheckpoint<T>, set: ModalitySet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptyModalitySet);
    }
    if !ck.meta.universe.contains_set(set) {
        return Err(Error::MissingModality(format!("{set:?} outside universe")));
    }
    Ok(())
}

/// Fused frozen-backbone features `E(x|set)`, one row per example.
pub fn probe_features<T: Real>(backbone: &ModelCheckpoint<T>, xs: &[MultimodalExample], set: ModalitySet) -> Result<Tensor<T>> {
    check_set(backbone, set)?;
    if xs.is_empty() {
        return Err(Error::EmptyDataset("probe"));
    }
    let none = BTreeSet::new();
    let mut parts = Vec::new();
    for chunk in xs.chunks(FEATURE_CHUNK) {
        let refs: Vec<&MultimodalExample> = chunk.iter().collect();
        let batch = Batch::<T>::new(&refs, set, backbone.meta.universe.len())?;
        let mut g = Graph::new();
        let mut b = Binder::new(&backbone.params, &none);
        let embs = model::encode_set(&mut g, &mut b, &backbone.meta, &batch, set)?;
        let fused = model::fuse(&mut g, &embs)?;
        parts.push(g.value(fused).clone());
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::vstack(&refs)
}

fn downstream_meta<T: Real>(ck: &mut ModelCheckpoint<T>, method: DownstreamMethod, set: ModalitySet, seed: u64) {
    ck.meta.downstream = method;
    ck.meta.train_set = Some(ck.meta.universe.format(set));
    ck.meta.seeds.insert("downstream".into(), seed);
}

/// Linear probe: frozen backbone, per-dimension standardization fitted on
/// the training features, head trained alone.
pub fn linear_probe<T: Real>(
    backbone: &ModelCheckpoint<T>,
    train: &[MultimodalExample],
    set: ModalitySet,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint<T>, TrainLog)> {
    let feats = probe_features(backbone, train, set)?;
    let labels: Vec<Option<Label>> = train.iter().map(|x| x.label.clone()).collect();
    linear_probe_from_features(backbone, &feats, &labels, set, cfg)
}

/// Same as `linear_probe`, starting from precomputed features.
pub fn linear_probe_from_features<T: Real>(
    backbone: &ModelCheckpoint<T>,
    feats: &Tensor<T>,
    labels: &[Option<Label>],
    set: ModalitySet,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint<T>, TrainLog)> {
    cfg.validate()?;
    check_set(backbone, set)?;
    let n = feats.rows();
    if n == 0 {
        return Err(Error::EmptyDataset("probe"));
    }
    if labels.len() != n {
        return Err(Error::shape("linear_probe", format!("{n} feature rows, {} labels", labels.len())));
    }
    let d = feats.cols();
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(feats.row_slice(r)) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for r in 0..n {
        for ((s, m), v) in var.iter_mut().zip(&mean).zip(feats.row_slice(r)) {
            *s += (v.f64() - m).powi(2);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);

    let mut ck = backbone.clone();
    ck.params.insert(BN_MEAN.into(), Tensor::row(&mean.iter().map(|&v| T::of(v)).collect::<Vec<_>>()));
    ck.params.insert(BN_VAR.into(), Tensor::row(&var.iter().map(|&v| T::of(v)).collect::<Vec<_>>()));
    downstream_meta(&mut ck, DownstreamMethod::Probe, set, cfg.seed);

    let stage = cfg.probe;
    let trainable: BTreeSet<String> = head_params().into_iter().collect();
    let mut stepper = Stepper::new(trainable, cfg.optimizer, stage.schedule(steps_per_epoch(n, stage.batch_size)))?;
    let name = ck.meta.universe.format(set);
    let mut order_rng = rng::stream(cfg.seed, &["probe", &name]);
    let task = ck.meta.task;
    for _ in 0..stage.epochs {
        let order = epoch_order(&mut order_rng, n);
        for idx in order.chunks(stage.batch_size) {
            let x = feats.select_rows(idx);
            let y: Vec<Option<Label>> = idx.iter().map(|&i| labels[i].clone()).collect();
            stepper.step(&mut ck.params, |g, b| {
                let xv = g.constant(x);
                let logits = model::classify(g, b, xv)?;
                task_loss(g, logits, &y, &task)
            })?;
        }
    }
    Ok((ck, stepper.log))
}

/// Fine-tuning: head initialized from the probe; encoders of `set`, any
/// shared layer and the head are trained.
pub fn finetune<T: Real>(
    backbone: &ModelCheckpoint<T>,
    probe: &ModelCheckpoint<T>,
    train: &[MultimodalExample],
    set: ModalitySet,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint<T>, TrainLog)> {
    downstream_train(backbone, probe, train, set, None, DownstreamMethod::Finetune, cfg)
}

/// Fine-tuning plus self-distillation on the unlabeled pool `sd`. When the
/// distillation term vanishes (`lambda = 0` or `set` is the whole universe)
/// this follows the fine-tuning trajectory exactly.
pub fn masd_train<T: Real>(
    backbone: &ModelCheckpoint<T>,
    probe: &ModelCheckpoint<T>,
    train: &[MultimodalExample],
    set: ModalitySet,
    sd: &[MultimodalExample],
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint<T>, TrainLog)> {
    downstream_train(backbone, probe, train, set, Some(sd), DownstreamMethod::Masd, cfg)
}

fn downstream_train<T: Real>(
    backbone: &ModelCheckpoint<T>,
    probe: &ModelCheckpoint<T>,
    train: &[MultimodalExample],
    set: ModalitySet,
    sd: Option<&[MultimodalExample]>,
    method: DownstreamMethod,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint<T>, TrainLog)> {
    cfg.validate()?;
    check_set(backbone, set)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("downstream train"));
    }
    let mut ck = backbone.clone();
    for name in head_params().into_iter().chain([BN_MEAN.to_string(), BN_VAR.to_string()]) {
        let t = probe.params.get(&name).ok_or_else(|| Error::ParamMismatch {
            name: name.clone(),
            detail: "missing in probe checkpoint".into(),
        })?;
        if t.shape() != ck.params[&name].shape() {
            let detail = format!("probe {:?} vs backbone {:?}", t.shape(), ck.params[&name].shape());
            return Err(Error::ParamMismatch { name, detail });
        }
        ck.params.insert(name, t.clone());
    }
    downstream_meta(&mut ck, method, set, cfg.seed);

    let full = ck.meta.universe.full();
    let distill = method == DownstreamMethod::Masd && !masd_is_degenerate(set, full, &cfg.masd);
    let sd = match (distill, sd) {
        (false, _) => None,
        (true, Some(sd)) if !sd.is_empty() => Some(sd),
        (true, _) => return Err(Error::EmptyDataset("self-distillation pool")),
    };
    let scope = if distill { full } else { set };
    let mut trainable: BTreeSet<String> = scope.indices().flat_map(|m| encoder_params(&ck.meta, m)).collect();
    trainable.extend(shared_params(&ck.meta));
    trainable.extend(head_params());

    let stage = cfg.finetune;
    let spe = steps_per_epoch(train.len(), stage.batch_size);
    let mut stepper = Stepper::new(trainable, cfg.optimizer, stage.schedule(spe))?;
    let name = ck.meta.universe.format(set);
    let mut order_rng = rng::stream(cfg.seed, &["downstream", &name]);
    let mut sd_rng = rng::stream(cfg.seed, &["masd", &name]);
    let mut sd_order: Vec<usize> = Vec::new();
    let mut sd_pos = 0;
    let meta = ck.meta.clone();
    let n_mod = meta.universe.len();
    for _ in 0..stage.epochs {
        let order = epoch_order(&mut order_rng, train.len());
        for idx in order.chunks(stage.batch_size) {
            let refs: Vec<&MultimodalExample> = idx.iter().map(|&i| &train[i]).collect();
            let batch_t = Batch::<T>::new(&refs, set, n_mod)?;
            match sd {
                None => {
                    stepper.step(&mut ck.params, |g, b| {
                        let logits = model::logits(g, b, &meta, &batch_t, set)?;
                        task_loss(g, logits, &batch_t.labels, &meta.task)
                    })?;
                }
                Some(pool) => {
                    let want = stage.batch_size.min(pool.len());
                    let mut sd_refs = Vec::with_capacity(want);
                    while sd_refs.len() < want {
                        if sd_pos == sd_order.len() {
                            sd_order = epoch_order(&mut sd_rng, pool.len());
                            sd_pos = 0;
                        }
                        sd_refs.push(&pool[sd_order[sd_pos]]);
                        sd_pos += 1;
                    }
                    let batch_sd = Batch::<T>::new(&sd_refs, full, n_mod)?;
                    stepper.step(&mut ck.params, |g, b| {
                        masd_loss(g, b, &meta, &batch_t, &batch_sd, set, &cfg.masd)
                    })?;
                }
            }
        }
    }
    Ok((ck, stepper.log))
}

/// `alpha * theta_masd + (1 - alpha) * theta_probe`, labelled as WiseFT.
pub fn wiseft_assemble<T: Real>(masd: &ModelCheckpoint<T>, probe: &ModelCheckpoint<T>, alpha: f64) -> Result<ModelCheckpoint<T>> {
    let mut ck = interpolate(masd, probe, alpha)?;
    ck.meta.downstream = DownstreamMethod::Wiseft;
    Ok(ck)
}
