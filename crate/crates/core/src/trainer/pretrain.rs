use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;

use crate::datagen::{mask_view, DatasetBundle, MultimodalExample};
use crate::error::{Error, Result};
use crate::model::{
    self, dec_param, encoder_params, shared_params, Batch, CheckpointMeta, DownstreamMethod, ModelCheckpoint,
    ModelDims, PretrainMethod,
};
use crate::numerics::{Real, Tensor};
use crate::objectives::{contrastive_total, mae_loss, MaeTerm};
use crate::rng;
use crate::trainer::{epoch_order, steps_per_epoch, Stepper, TrainConfig, TrainLog};

pub(crate) fn backbone_meta(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<CheckpointMeta> {
    let mut seeds = BTreeMap::new();
    seeds.insert("pretrain".to_string(), cfg.seed);
    Ok(CheckpointMeta {
        universe: bundle.universe.clone(),
        task: bundle.task,
        dims: ModelDims::for_bundle(bundle, cfg.hidden, cfg.embed_dim)?,
        pretrain: cfg.pretrain_method,
        downstream: DownstreamMethod::None,
        train_set: None,
        seeds,
        parents: Vec::new(),
        alpha: None,
    })
}

/// Self-supervised pretraining on `D` with every modality present.
pub fn pretrain<T: Real>(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<(ModelCheckpoint<T>, TrainLog)> {
    cfg.validate()?;
    let data = &bundle.pretrain;
    if data.is_empty() {
        return Err(Error::EmptyDataset("pretrain"));
    }
    let full = bundle.universe.full();
    if let Some(x) = data.iter().find(|x| x.modalities() != full) {
        return Err(Error::MissingModality(format!("pretraining example {} lacks modalities", x.id)));
    }
    let meta = backbone_meta(bundle, cfg)?;
    let mut ck = ModelCheckpoint::<T>::init(meta, cfg.seed);
    let n_mod = bundle.universe.len();
    let mut trainable: BTreeSet<String> = (0..n_mod).flat_map(|m| encoder_params(&ck.meta, m)).collect();
    trainable.extend(shared_params(&ck.meta));
    if cfg.pretrain_method == PretrainMethod::Mae {
        for m in 0..n_mod {
            trainable.insert(dec_param(&ck.meta.universe, m, "w"));
            trainable.insert(dec_param(&ck.meta.universe, m, "b"));
        }
    } else if n_mod < 2 {
        return Err(Error::Config("contrastive pretraining needs at least 2 modalities".into()));
    }
    let stage = cfg.pretrain;
    let spe = steps_per_epoch(data.len(), stage.batch_size);
    let mut stepper = Stepper::new(trainable, cfg.optimizer, stage.schedule(spe))?;
    let mut order_rng = rng::stream(cfg.seed, &["pretrain", "order"]);
    let mut mask_rng = rng::stream(cfg.seed, &["pretrain", "mask"]);
    let meta = ck.meta.clone();
    for _ in 0..stage.epochs {
        let order = epoch_order(&mut order_rng, data.len());
        for idx in order.chunks(stage.batch_size) {
            let refs: Vec<&MultimodalExample> = idx.iter().map(|&i| &data[i]).collect();
            match cfg.pretrain_method {
                PretrainMethod::Contrastive => {
                    let batch = Batch::<T>::new(&refs, full, n_mod)?;
                    stepper.step(&mut ck.params, |g, b| {
                        let embs = model::encode_set(g, b, &meta, &batch, full)?;
                        contrastive_total(g, &embs, &cfg.contrastive)
                    })?;
                }
                PretrainMethod::Mae => {
                    let views = MaeBatch::new(&refs, &meta, cfg, &mut mask_rng)?;
                    stepper.step(&mut ck.params, |g, b| {
                        let mut embs = Vec::with_capacity(n_mod);
                        for (m, v) in views.modalities.iter().enumerate() {
                            let vis = g.constant(v.visible.clone());
                            embs.push(model::encode(g, b, &meta, m, vis, v.visible_per_example)?);
                        }
                        let fused = model::fuse(g, &embs)?;
                        let mut recons = Vec::with_capacity(n_mod);
                        for m in 0..n_mod {
                            let w = b.get(g, &dec_param(&meta.universe, m, "w"))?;
                            let bias = b.get(g, &dec_param(&meta.universe, m, "b"))?;
                            let r = g.matmul(fused, w)?;
                            recons.push(g.add_row(r, bias)?);
                        }
                        let terms: Vec<MaeTerm<T>> = views
                            .modalities
                            .iter()
                            .zip(&recons)
                            .map(|(v, &recon)| MaeTerm {
                                recon,
                                target: &v.target,
                                masked: &v.masked,
                                token_dim: v.token_dim,
                            })
                            .collect();
                        mae_loss(g, &terms)
                    })?;
                }
            }
        }
    }
    Ok((ck, stepper.log))
}

struct MaeModality<T> {
    /// Visible token rows of every example, stacked.
    visible: Tensor<T>,
    visible_per_example: usize,
    /// `B x (T * token_dim)` full tokens.
    target: Tensor<T>,
    masked: Vec<Vec<usize>>,
    token_dim: usize,
}

struct MaeBatch<T> {
    modalities: Vec<MaeModality<T>>,
}

impl<T: Real> MaeBatch<T> {
    fn new(xs: &[&MultimodalExample], meta: &CheckpointMeta, cfg: &TrainConfig, rng: &mut rng::Rng) -> Result<Self> {
        let mut modalities = Vec::with_capacity(meta.universe.len());
        for m in 0..meta.universe.len() {
            let ratio = cfg.mask_ratio_for(meta.universe.name(m));
            let (t, d) = (meta.dims.tokens[m], meta.dims.token_dims[m]);
            let mut visible = Vec::new();
            let mut target = Vec::with_capacity(xs.len() * t * d);
            let mut masked = Vec::with_capacity(xs.len());
            let mut per = 0;
            for x in xs {
                let tok = x
                    .tokens(m)
                    .ok_or_else(|| Error::MissingModality(meta.universe.name(m).to_string()))?;
                let view = mask_view(tok, ratio, rng.random())?;
                per = view.visible_idx.len();
                visible.extend(view.visible.data().iter().map(|&v| T::of(v as f64)));
                target.extend(tok.data().iter().map(|&v| T::of(v as f64)));
                masked.push(view.masked_idx);
            }
            if per == 0 {
                return Err(Error::Config(format!(
                    "mask ratio {ratio} leaves no visible token for `{}`",
                    meta.universe.name(m)
                )));
            }
            modalities.push(MaeModality {
                visible: Tensor::matrix(xs.len() * per, d, visible)?,
                visible_per_example: per,
                target: Tensor::matrix(xs.len(), t * d, target)?,
                masked,
                token_dim: d,
            });
        }
        Ok(Self { modalities })
    }
}
