use crate::datagen::{Label, ModalitySet, MultimodalExample};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Examples stacked per modality: `B * T_m` token rows for every modality
/// in the batch's set.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    size: usize,
    tokens: Vec<Option<(Tensor<T>, usize)>>,
    pub labels: Vec<Option<Label>>,
}

impl<T: Real> Batch<T> {
    /// Stacks `examples` restricted to `set`. Every example must carry
    /// every modality in `set` with equal token shapes.
    pub fn new(examples: &[&MultimodalExample], set: ModalitySet, universe_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset("batch"));
        }
        let mut tokens = Vec::with_capacity(universe_len);
        for m in 0..universe_len {
            if !set.contains(m) {
                tokens.push(None);
                continue;
            }
            let first = examples[0]
                .tokens(m)
                .ok_or_else(|| Error::MissingModality(format!("index {m}")))?;
            let (t, d) = (first.rows(), first.cols());
            let mut data = Vec::with_capacity(examples.len() * t * d);
            for x in examples {
                let tm = x
                    .tokens(m)
                    .ok_or_else(|| Error::MissingModality(format!("index {m} in example {}", x.id)))?;
                if tm.shape() != first.shape() {
                    return Err(Error::shape(
                        "batch",
                        format!("example {} modality {m} has shape {:?}", x.id, tm.shape()),
                    ));
                }
                data.extend(tm.data().iter().map(|&v| T::of(v as f64)));
            }
            tokens.push(Some((Tensor::matrix(examples.len() * t, d, data)?, t)));
        }
        Ok(Self {
            size: examples.len(),
            tokens,
            labels: examples.iter().map(|x| x.label.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Stacked token rows and rows per example.
    pub fn tokens(&self, m: usize) -> Option<(&Tensor<T>, usize)> {
        self.tokens.get(m)?.as_ref().map(|(t, g)| (t, *g))
    }

    pub fn modalities(&self) -> ModalitySet {
        ModalitySet::from_indices((0..self.tokens.len()).filter(|&m| self.tokens[m].is_some()))
    }
}
