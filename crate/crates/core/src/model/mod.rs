//! Per-modality encoders, mean fusion, the classifier head, checkpoints and
//! weight-space interpolation.

mod batch;
mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetBundle, ModalitySet, ModalityUniverse, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::rng;

pub use batch::Batch;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, interpolate, load, save};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMethod {
    #[default]
    Contrastive,
    Mae,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownstreamMethod {
    #[default]
    None,
    Probe,
    Finetune,
    Masd,
    Wiseft,
}

impl DownstreamMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Probe => "probe",
            Self::Finetune => "finetune",
            Self::Masd => "masd",
            Self::Wiseft => "wiseft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "none" => Self::None,
            "probe" => Self::Probe,
            "finetune" => Self::Finetune,
            "masd" => Self::Masd,
            "wiseft" => Self::Wiseft,
            other => return Err(Error::Config(format!("unknown downstream method `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Tokens per example, per modality.
    pub tokens: Vec<usize>,
    pub token_dims: Vec<usize>,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl ModelDims {
    pub fn for_bundle(bundle: &DatasetBundle, hidden: usize, embed_dim: usize) -> Result<Self> {
        let shapes = bundle.token_shapes()?;
        Ok(Self {
            tokens: shapes.iter().map(|s| s.0).collect(),
            token_dims: shapes.iter().map(|s| s.1).collect(),
            hidden,
            embed_dim,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub universe: ModalityUniverse,
    pub task: TaskSpec,
    pub dims: ModelDims,
    pub pretrain: PretrainMethod,
    pub downstream: DownstreamMethod,
    /// Formatted training-modality set, absent for a bare backbone.
    pub train_set: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub parents: Vec<String>,
    pub alpha: Option<f64>,
}

impl CheckpointMeta {
    /// Shared layer exists iff the backbone was pretrained with MAE.
    pub fn shared_layer(&self) -> bool {
        self.pretrain == PretrainMethod::Mae
    }

    pub fn label(&self) -> String {
        match &self.train_set {
            Some(s) => format!("{}:{s}", self.downstream.name()),
            None => self.downstream.name().to_string(),
        }
    }
}

/// Named parameters for every encoder in the universe plus the head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint<T = f32> {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor<T>>,
}

pub fn enc_param(universe: &ModalityUniverse, m: usize, leaf: &str) -> String {
    format!("enc.{}.{leaf}", universe.name(m))
}

pub fn dec_param(universe: &ModalityUniverse, m: usize, leaf: &str) -> String {
    format!("dec.{}.{leaf}", universe.name(m))
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
pub const BN_MEAN: &str = "head.bn_mean";
pub const BN_VAR: &str = "head.bn_var";
pub const SHARED_W: &str = "shared.w";
pub const SHARED_B: &str = "shared.b";

/// Parameter names grouped by role.
pub fn encoder_params(meta: &CheckpointMeta, m: usize) -> Vec<String> {
    ["embed.w", "fc1.w", "fc1.b", "fc2.w", "fc2.b"]
        .iter()
        .map(|leaf| enc_param(&meta.universe, m, leaf))
        .collect()
}

pub fn shared_params(meta: &CheckpointMeta) -> Vec<String> {
    if meta.shared_layer() {
        vec![SHARED_W.into(), SHARED_B.into()]
    } else {
        Vec::new()
    }
}

pub fn head_params() -> Vec<String> {
    vec![HEAD_W.into(), HEAD_B.into()]
}

fn shapes(meta: &CheckpointMeta) -> Vec<(String, usize, usize)> {
    let d = &meta.dims;
    let (h, e) = (d.hidden, d.embed_dim);
    let mut v = Vec::new();
    for m in 0..meta.universe.len() {
        let p = |leaf| enc_param(&meta.universe, m, leaf);
        v.push((p("embed.w"), d.token_dims[m], h));
        v.push((p("fc1.w"), h, h));
        v.push((p("fc1.b"), 1, h));
        v.push((p("fc2.w"), h, e));
        v.push((p("fc2.b"), 1, e));
        if meta.shared_layer() {
            let width = d.tokens[m] * d.token_dims[m];
            v.push((dec_param(&meta.universe, m, "w"), e, width));
            v.push((dec_param(&meta.universe, m, "b"), 1, width));
        }
    }
    if meta.shared_layer() {
        v.push((SHARED_W.into(), e, e));
        v.push((SHARED_B.into(), 1, e));
    }
    v.push((HEAD_W.into(), e, meta.task.classes));
    v.push((HEAD_B.into(), 1, meta.task.classes));
    v.push((BN_MEAN.into(), 1, e));
    v.push((BN_VAR.into(), 1, e));
    v
}

impl<T: Real> ModelCheckpoint<T> {
    /// Seeded initialization: weights `N(0, 1/fan_in)`, biases and BN mean
    /// zero, BN variance one. Each tensor draws from its own stream.
    pub fn init(meta: CheckpointMeta, seed: u64) -> Self {
        let mut params = BTreeMap::new();
        for (name, r, c) in shapes(&meta) {
            let t = if name == BN_VAR {
                Tensor::full(r, c, T::one())
            } else if name.ends_with(".b") || name == BN_MEAN {
                Tensor::zeros(r, c)
            } else {
                let mut g = rng::stream(seed, &["init", &name]);
                let s = 1.0 / (r as f64).sqrt();
                Tensor::from_fn(r, c, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut g);
                    T::of(z * s)
                })
            };
            params.insert(name, t);
        }
        Self { meta, params }
    }

    /// Checks that the parameter set matches the layout implied by `meta`.
    pub fn validate(&self) -> Result<()> {
        let expected = shapes(&self.meta);
        for (name, r, c) in &expected {
            match self.params.get(name) {
                None => {
                    return Err(Error::ParamMismatch {
                        name: name.clone(),
                        detail: "missing".into(),
                    })
                }
                Some(t) if t.shape() != [*r, *c] => {
                    return Err(Error::ParamMismatch {
                        name: name.clone(),
                        detail: format!("shape {:?}, expected [{r}, {c}]", t.shape()),
                    })
                }
                _ => {}
            }
        }
        if self.params.len() != expected.len() {
            let known: BTreeSet<&String> = expected.iter().map(|e| &e.0).collect();
            let extra = self.params.keys().find(|k| !known.contains(k)).expect("extra");
            return Err(Error::ParamMismatch {
                name: extra.clone(),
                detail: "unexpected parameter".into(),
            });
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }

    pub fn cast<U: Real>(&self) -> ModelCheckpoint<U> {
        ModelCheckpoint {
            meta: self.meta.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Binds checkpoint tensors to a graph. Names in `trainable` become
/// differentiable leaves; everything else enters as a constant.
pub struct Binder<'a, T> {
    params: &'a BTreeMap<String, Tensor<T>>,
    trainable: &'a BTreeSet<String>,
    constants: BTreeMap<String, Var>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(params: &'a BTreeMap<String, Tensor<T>>, trainable: &'a BTreeSet<String>) -> Self {
        Self {
            params,
            trainable,
            constants: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let t = self.params.get(name).ok_or_else(|| Error::ParamMismatch {
            name: name.into(),
            detail: "not in checkpoint".into(),
        })?;
        if self.trainable.contains(name) {
            return Ok(g.param(name, t));
        }
        if let Some(&v) = self.constants.get(name) {
            return Ok(v);
        }
        let v = g.constant(t.clone());
        self.constants.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn tensor(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }
}

fn linear<T: Real>(g: &mut Graph<T>, b: &mut Binder<T>, x: Var, w: &str, bias: &str) -> Result<Var> {
    let wv = b.get(g, w)?;
    let bv = b.get(g, bias)?;
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

/// Encodes modality `m` for a batch. `tokens` holds the batch's token rows
/// stacked example by example, `group` rows per example.
/// embed -> mean-pool -> relu MLP -> (shared layer) -> `B x d`.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    meta: &CheckpointMeta,
    m: usize,
    tokens: Var,
    group: usize,
) -> Result<Var> {
    let u = &meta.universe;
    let we = b.get(g, &enc_param(u, m, "embed.w"))?;
    let e = g.matmul(tokens, we)?;
    let pooled = g.mean_row_groups(e, group)?;
    let h = linear(g, b, pooled, &enc_param(u, m, "fc1.w"), &enc_param(u, m, "fc1.b"))?;
    let h = g.relu(h)?;
    let out = linear(g, b, h, &enc_param(u, m, "fc2.w"), &enc_param(u, m, "fc2.b"))?;
    if meta.shared_layer() {
        linear(g, b, out, SHARED_W, SHARED_B)
    } else {
        Ok(out)
    }
}

/// `E(x) = (1/|M'|) sum_m E_m(x|m)`, summed in the order given.
pub fn fuse<T: Real>(g: &mut Graph<T>, embeddings: &[Var]) -> Result<Var> {
    let (&first, rest) = embeddings.split_first().ok_or(Error::EmptyModalitySet)?;
    let mut acc = first;
    for &e in rest {
        acc = g.add(acc, e)?;
    }
    if embeddings.len() == 1 {
        return Ok(acc);
    }
    g.scale(acc, 1.0 / embeddings.len() as f64)
}

/// Frozen batch norm without affine parameters.
pub fn batch_norm<T: Real>(g: &mut Graph<T>, b: &Binder<T>, x: Var) -> Result<Var> {
    let mean = b.tensor(BN_MEAN);
    let var = b.tensor(BN_VAR);
    let d = mean.cols();
    if g.value(x).cols() != d {
        return Err(Error::shape(
            "batch_norm",
            format!("features {:?} vs statistics of width {d}", g.value(x).shape()),
        ));
    }
    let neg = g.constant(mean.map(|v| -v));
    let centred = g.add_row(x, neg)?;
    let inv = Tensor::from_fn(d, d, |r, c| {
        if r == c {
            T::one() / (var.get(0, r) + T::of(BN_EPS)).sqrt()
        } else {
            T::zero()
        }
    });
    let inv = g.constant(inv);
    g.matmul(centred, inv)
}

/// Head logits from fused features: frozen BN, then a linear map to `C`.
pub fn classify<T: Real>(g: &mut Graph<T>, b: &mut Binder<T>, fused: Var) -> Result<Var> {
    let z = batch_norm(g, b, fused)?;
    linear(g, b, z, HEAD_W, HEAD_B)
}

/// Per-modality embeddings for every modality in `set`, in index order.
pub fn encode_set<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    meta: &CheckpointMeta,
    batch: &Batch<T>,
    set: ModalitySet,
) -> Result<Vec<Var>> {
    set.indices()
        .map(|m| {
            let (tokens, group) = batch.tokens(m).ok_or_else(|| {
                Error::MissingModality(meta.universe.name(m).to_string())
            })?;
            let v = g.constant(tokens.clone());
            encode(g, b, meta, m, v, group)
        })
        .collect()
}

/// Logits of `f_theta(x|set)`.
pub fn logits<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    meta: &CheckpointMeta,
    batch: &Batch<T>,
    set: ModalitySet,
) -> Result<Var> {
    if set.is_empty() {
        return Err(Error::EmptyModalitySet);
    }
    let embs = encode_set(g, b, meta, batch, set)?;
    let fused = fuse(g, &embs)?;
    classify(g, b, fused)
}
