//! Losses: pairwise InfoNCE, masked reconstruction, downstream task losses
//! and modality-augmented self-distillation.

use serde::{Deserialize, Serialize};

use crate::datagen::{Label, ModalitySet, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{self, Batch, Binder, CheckpointMeta};
use crate::numerics::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub normalize: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            normalize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasdConfig {
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for MasdConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperature: 1.0,
        }
    }
}

/// `-sum(a * mask) / rows`: mean over rows of the masked row sums, negated.
fn neg_row_mean_of_masked<T: Real>(g: &mut Graph<T>, a: Var, mask: Tensor<T>) -> Result<Var> {
    let rows = g.value(a).rows();
    let m = g.constant(mask);
    let picked = g.mul(a, m)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0 / rows as f64)
}

/// Symmetric InfoNCE between paired rows of `za` and `zb`.
pub fn infonce_pair<T: Real>(g: &mut Graph<T>, za: Var, zb: Var, cfg: &ContrastiveConfig) -> Result<Var> {
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(Error::Config(format!("temperature {} must be > 0", cfg.temperature)));
    }
    let (sa, sb) = (g.value(za).shape().to_vec(), g.value(zb).shape().to_vec());
    if sa != sb {
        return Err(Error::shape("infonce_pair", format!("{sa:?} vs {sb:?}")));
    }
    let b = sa[0];
    if b == 0 {
        return Err(Error::EmptyDataset("contrastive batch"));
    }
    let (za, zb) = if cfg.normalize {
        (g.l2_normalize_rows(za)?, g.l2_normalize_rows(zb)?)
    } else {
        (za, zb)
    };
    let zbt = g.transpose(zb)?;
    let sim = g.matmul(za, zbt)?;
    let logits = g.scale(sim, 1.0 / cfg.temperature)?;
    let lab = g.log_softmax_rows(logits)?;
    let l_ab = neg_row_mean_of_masked(g, lab, Tensor::identity(b))?;
    let logits_t = g.transpose(logits)?;
    let lba = g.log_softmax_rows(logits_t)?;
    let l_ba = neg_row_mean_of_masked(g, lba, Tensor::identity(b))?;
    let both = g.add(l_ab, l_ba)?;
    g.scale(both, 0.5)
}

/// Sum of `infonce_pair` over all unordered modality pairs.
pub fn contrastive_total<T: Real>(g: &mut Graph<T>, embeddings: &[Var], cfg: &ContrastiveConfig) -> Result<Var> {
    if embeddings.len() < 2 {
        return Err(Error::Invalid(format!(
            "contrastive loss needs at least 2 modalities, got {}",
            embeddings.len()
        )));
    }
    let mut total: Option<Var> = None;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let l = infonce_pair(g, embeddings[i], embeddings[j], cfg)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
    }
    Ok(total.expect("n >= 2"))
}

/// One modality's reconstruction target. `recon` and `target` are
/// `B x (T * token_dim)`; `masked[b]` lists the masked token rows of example `b`.
pub struct MaeTerm<'a, T> {
    pub recon: Var,
    pub target: &'a Tensor<T>,
    pub masked: &'a [Vec<usize>],
    pub token_dim: usize,
}

/// Mean squared error over masked token rows only, summed over modalities.
pub fn mae_loss<T: Real>(g: &mut Graph<T>, terms: &[MaeTerm<T>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for term in terms {
        let shape = g.value(term.recon).shape().to_vec();
        if shape != term.target.shape() {
            return Err(Error::shape(
                "mae_loss",
                format!("reconstruction {shape:?} vs target {:?}", term.target.shape()),
            ));
        }
        if term.masked.len() != shape[0] || term.token_dim == 0 || !shape[1].is_multiple_of(term.token_dim) {
            return Err(Error::shape("mae_loss", "mask list does not match batch layout"));
        }
        let tokens = shape[1] / term.token_dim;
        let mut weight = Tensor::<T>::zeros(shape[0], shape[1]);
        let mut count = 0usize;
        for (b, rows) in term.masked.iter().enumerate() {
            for &t in rows {
                if t >= tokens {
                    return Err(Error::Invalid(format!("mask index {t} >= {tokens} tokens")));
                }
                let base = b * shape[1] + t * term.token_dim;
                for w in &mut weight.data_mut()[base..base + term.token_dim] {
                    if *w == T::zero() {
                        count += 1;
                    }
                    *w = T::one();
                }
            }
        }
        if count == 0 {
            continue;
        }
        let tgt = g.constant(term.target.clone());
        let diff = g.sub(term.recon, tgt)?;
        let w = g.constant(weight);
        let masked = g.mul(diff, w)?;
        let sq = g.mul(masked, masked)?;
        let s = g.sum(sq)?;
        let l = g.scale(s, 1.0 / count as f64)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    total.ok_or_else(|| Error::Invalid("mae loss: no masked tokens in any modality".into()))
}

fn label_matrix<T: Real>(labels: &[Option<Label>], task: &TaskSpec) -> Result<Tensor<T>> {
    let mut y = Tensor::zeros(labels.len(), task.classes);
    for (r, l) in labels.iter().enumerate() {
        let l = l.as_ref().ok_or_else(|| Error::Label(format!("row {r} unlabeled")))?;
        l.check(task)?;
        for c in l.positives() {
            y.data_mut()[r * task.classes + c] = T::one();
        }
    }
    Ok(y)
}

/// Softmax cross-entropy (single-label) or mean per-class sigmoid BCE (multi-label).
pub fn task_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[Option<Label>], task: &TaskSpec) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape != [labels.len(), task.classes] {
        return Err(Error::shape(
            "task_loss",
            format!("logits {shape:?} for {} labels x {} classes", labels.len(), task.classes),
        ));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset("task batch"));
    }
    let y = label_matrix::<T>(labels, task)?;
    match task.kind {
        TaskKind::SingleLabel => {
            let lp = g.log_softmax_rows(logits)?;
            neg_row_mean_of_masked(g, lp, y)
        }
        TaskKind::MultiLabel => {
            let yv = g.constant(y);
            bce_with_logits(g, logits, yv)
        }
    }
}

/// `mean(softplus(x) - y * x)`, the BCE of `sigmoid(x)` against targets `y`.
fn bce_with_logits<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let n = g.value(x).numel();
    let sp = g.softplus(x)?;
    let xy = g.mul(x, y)?;
    let d = g.sub(sp, xy)?;
    let s = g.sum(d)?;
    g.scale(s, 1.0 / n as f64)
}

/// Distillation from `teacher` logits into `student` logits. The caller
/// decides whether `teacher` carries gradient.
pub fn distill_loss<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var, kind: TaskKind, temperature: f64) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("distillation temperature {temperature} must be > 0")));
    }
    let (s, t) = if temperature == 1.0 {
        (student, teacher)
    } else {
        (g.scale(student, 1.0 / temperature)?, g.scale(teacher, 1.0 / temperature)?)
    };
    match kind {
        TaskKind::SingleLabel => {
            let p = g.softmax_rows(t)?;
            let lq = g.log_softmax_rows(s)?;
            let rows = g.value(s).rows();
            let prod = g.mul(p, lq)?;
            let sum = g.sum(prod)?;
            g.scale(sum, -1.0 / rows as f64)
        }
        TaskKind::MultiLabel => {
            let q = g.sigmoid(t)?;
            bce_with_logits(g, s, q)
        }
    }
}

/// True when the distillation term vanishes and MASD reduces to the task loss.
pub fn masd_is_degenerate(train_set: ModalitySet, full: ModalitySet, cfg: &MasdConfig) -> bool {
    cfg.lambda == 0.0 || train_set == full
}

/// `task(f(x_T | M_T)) + lambda * distill(student = f(x_SD | M \ M_T),
/// teacher = stop_grad(f(x_SD | M_T)))`.
#[allow(clippy::too_many_arguments)]
pub fn masd_loss<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    meta: &CheckpointMeta,
    batch_t: &Batch<T>,
    batch_sd: &Batch<T>,
    train_set: ModalitySet,
    cfg: &MasdConfig,
) -> Result<Var> {
    if cfg.lambda.is_nan() || cfg.lambda < 0.0 {
        return Err(Error::Config(format!("lambda {} must be >= 0", cfg.lambda)));
    }
    let full = meta.universe.full();
    let task_logits = model::logits(g, b, meta, batch_t, train_set)?;
    let task = task_loss(g, task_logits, &batch_t.labels, &meta.task)?;
    if masd_is_degenerate(train_set, full, cfg) {
        return Ok(task);
    }
    if batch_sd.modalities() != full {
        let missing = full.difference(batch_sd.modalities()).indices().next().expect("nonempty");
        return Err(Error::MissingModality(meta.universe.name(missing).to_string()));
    }
    let teacher = model::logits(g, b, meta, batch_sd, train_set)?;
    let teacher = g.stop_grad(teacher)?;
    let student = model::logits(g, b, meta, batch_sd, full.difference(train_set))?;
    let d = distill_loss(g, student, teacher, meta.task.kind, cfg.temperature)?;
    let wd = g.scale(d, cfg.lambda)?;
    g.add(task, wd)
}
