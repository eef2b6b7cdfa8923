use serde::{Deserialize, Serialize};

use crate::datagen::ModalitySet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    /// Binary indicator per class.
    Multi(Vec<bool>),
}

impl Label {
    pub fn check(&self, task: &TaskSpec) -> Result<()> {
        match (self, task.kind) {
            (Label::Class(c), TaskKind::SingleLabel) if *c < task.classes => Ok(()),
            (Label::Multi(v), TaskKind::MultiLabel) if v.len() == task.classes => Ok(()),
            _ => Err(Error::Label(format!(
                "{self:?} does not fit {:?} with {} classes",
                task.kind, task.classes
            ))),
        }
    }

    pub fn positives(&self) -> Vec<usize> {
        match self {
            Label::Class(c) => vec![*c],
            Label::Multi(v) => v
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect(),
        }
    }
}

/// One aligned example: a token matrix (tokens x token_dim) per present
/// modality, plus an optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalExample {
    pub id: u64,
    tokens: Vec<Option<Tensor<f32>>>,
    pub label: Option<Label>,
}

impl MultimodalExample {
    pub fn new(id: u64, tokens: Vec<Option<Tensor<f32>>>, label: Option<Label>) -> Self {
        Self { id, tokens, label }
    }

    pub fn modalities(&self) -> ModalitySet {
        ModalitySet::from_indices(
            self.tokens
                .iter()
                .enumerate()
                .filter_map(|(i, t)| t.as_ref().map(|_| i)),
        )
    }

    pub fn tokens(&self, m: usize) -> Option<&Tensor<f32>> {
        self.tokens.get(m).and_then(Option::as_ref)
    }

    pub fn universe_len(&self) -> usize {
        self.tokens.len()
    }

    /// `x|_m`: keeps exactly the token matrices for `m`.
    pub fn restrict(&self, m: ModalitySet) -> Result<Self> {
        if m.is_empty() {
            return Err(Error::EmptyModalitySet);
        }
        let have = self.modalities();
        if let Some(missing) = m.difference(have).indices().next() {
            return Err(Error::MissingModality(format!("index {missing}")));
        }
        let tokens = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| if m.contains(i) { t.clone() } else { None })
            .collect();
        Ok(Self {
            id: self.id,
            tokens,
            label: self.label.clone(),
        })
    }

    /// Mean over token rows per modality (one pre-pooled "token").
    pub fn pooled(&self) -> Self {
        let tokens = self
            .tokens
            .iter()
            .map(|t| {
                t.as_ref().map(|t| {
                    let (rows, cols) = (t.rows(), t.cols());
                    let mut acc = vec![0.0f64; cols];
                    for r in 0..rows {
                        for (a, &v) in acc.iter_mut().zip(t.row_slice(r)) {
                            *a += v as f64;
                        }
                    }
                    let data = acc.into_iter().map(|a| (a / rows as f64) as f32).collect();
                    Tensor::matrix(1, cols, data).expect("shape")
                })
            })
            .collect();
        Self {
            id: self.id,
            tokens,
            label: self.label.clone(),
        }
    }
}
