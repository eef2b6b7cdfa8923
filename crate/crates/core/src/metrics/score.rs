use std::collections::BTreeSet;

use crate::datagen::{Label, ModalitySet, MultimodalExample, TaskKind};
use crate::error::{Error, Result};
use crate::model::{self, Batch, Binder, ModelCheckpoint};
use crate::numerics::{Graph, Real, Tensor};

const EVAL_CHUNK: usize = 256;

/// Average precision of one class. Items are ranked by descending score;
/// equal scores keep their original order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean over classes with at least one positive of the per-class AP.
/// `scores` and `labels` are `N` rows of `C` entries.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("mean_average_precision", "score/label row counts differ"));
    }
    let c = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != c) || labels.iter().any(|r| r.len() != c) {
        return Err(Error::shape("mean_average_precision", "ragged rows"));
    }
    let mut total = 0.0;
    let mut classes = 0usize;
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let y: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        if let Some(ap) = average_precision(&s, &y) {
            total += ap;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(Error::Label("no class has a positive example".into()));
    }
    Ok(total / classes as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("accuracy", format!("{} score rows, {} labels", scores.len(), labels.len())));
    }
    let hits = scores.iter().zip(labels).filter(|(s, &y)| argmax(s) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Logits for every example of `xs` under each evaluation set in `sets`.
/// Per-modality embeddings are computed once per chunk and shared by all sets.
pub fn logits_for_sets<T: Real>(ck: &ModelCheckpoint<T>, xs: &[MultimodalExample], sets: &[ModalitySet]) -> Result<Vec<Vec<Vec<f64>>>> {
    if xs.is_empty() {
        return Err(Error::EmptyDataset("evaluation"));
    }
    let full = ck.meta.universe.full();
    for &s in sets {
        if s.is_empty() {
            return Err(Error::EmptyModalitySet);
        }
        if !s.is_subset(full) {
            return Err(Error::MissingModality(format!("set {s:?} outside universe")));
        }
    }
    let needed = sets.iter().fold(ModalitySet::EMPTY, |a, &s| a.union(s));
    let none = BTreeSet::new();
    let mut out = vec![Vec::with_capacity(xs.len()); sets.len()];
    for chunk in xs.chunks(EVAL_CHUNK) {
        let refs: Vec<&MultimodalExample> = chunk.iter().collect();
        let batch = Batch::<T>::new(&refs, needed, ck.meta.universe.len())?;
        let mut g = Graph::new();
        let mut b = Binder::new(&ck.params, &none);
        let embs = model::encode_set(&mut g, &mut b, &ck.meta, &batch, needed)?;
        let by_modality: Vec<(usize, _)> = needed.indices().zip(embs).collect();
        for (si, &s) in sets.iter().enumerate() {
            let parts: Vec<_> = by_modality
                .iter()
                .filter(|(m, _)| s.contains(*m))
                .map(|&(_, v)| v)
                .collect();
            let fused = model::fuse(&mut g, &parts)?;
            let logits = model::classify(&mut g, &mut b, fused)?;
            let t: &Tensor<T> = g.value(logits);
            for r in 0..t.rows() {
                out[si].push(t.row_slice(r).iter().map(|v| v.f64()).collect());
            }
        }
    }
    Ok(out)
}

/// Scores a set of logits against labels: accuracy for single-label tasks,
/// mAP over sigmoid scores for multi-label tasks.
pub fn score_logits(logits: &[Vec<f64>], labels: &[Option<Label>], kind: TaskKind) -> Result<f64> {
    let labels: Vec<&Label> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.as_ref().ok_or_else(|| Error::Label(format!("evaluation example {i} unlabeled"))))
        .collect::<Result<_>>()?;
    match kind {
        TaskKind::SingleLabel => {
            let y: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    other => Err(Error::Label(format!("{other:?} in single-label task"))),
                })
                .collect::<Result<_>>()?;
            accuracy(logits, &y)
        }
        TaskKind::MultiLabel => {
            let y: Vec<Vec<bool>> = labels
                .iter()
                .map(|l| match l {
                    Label::Multi(v) => Ok(v.clone()),
                    other => Err(Error::Label(format!("{other:?} in multi-label task"))),
                })
                .collect::<Result<_>>()?;
            // sigmoid is monotone, so ranking by logits gives the same AP
            mean_average_precision(logits, &y)
        }
    }
}

/// Score of `ck` on `xs` restricted to each set in `sets`.
pub fn evaluate_sets<T: Real>(ck: &ModelCheckpoint<T>, xs: &[MultimodalExample], sets: &[ModalitySet]) -> Result<Vec<f64>> {
    let logits = logits_for_sets(ck, xs, sets)?;
    let labels: Vec<Option<Label>> = xs.iter().map(|x| x.label.clone()).collect();
    logits
        .iter()
        .map(|l| score_logits(l, &labels, ck.meta.task.kind))
        .collect()
}

/// Score of `ck` on `D_E | M_E`.
pub fn evaluate<T: Real>(ck: &ModelCheckpoint<T>, xs: &[MultimodalExample], eval_set: ModalitySet) -> Result<f64> {
    Ok(evaluate_sets(ck, xs, &[eval_set])?[0])
}
