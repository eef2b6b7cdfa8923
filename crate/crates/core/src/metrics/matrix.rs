use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{ModalitySet, ModalityUniverse};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Map,
    #[default]
    Accuracy,
}

/// `p(M_E; M_T)` over (training set, evaluation set) pairs. Cells may be absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub universe: ModalityUniverse,
    pub kind: ScoreKind,
    cells: BTreeMap<(ModalitySet, ModalitySet), f64>,
}

impl ScoreMatrix {
    pub fn new(universe: ModalityUniverse, kind: ScoreKind) -> Self {
        Self {
            universe,
            kind,
            cells: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, train: ModalitySet, eval: ModalitySet, score: f64) -> Result<()> {
        for s in [train, eval] {
            if s.is_empty() {
                return Err(Error::EmptyModalitySet);
            }
            if !self.universe.contains_set(s) {
                return Err(Error::Invalid(format!("set {s:?} outside universe")));
            }
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Invalid(format!("score {score} outside [0, 1]")));
        }
        self.cells.insert((train, eval), score);
        Ok(())
    }

    pub fn get(&self, train: ModalitySet, eval: ModalitySet) -> Option<f64> {
        self.cells.get(&(train, eval)).copied()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Training sets with at least one cell, in canonical order.
    pub fn train_sets(&self) -> Vec<ModalitySet> {
        let set: BTreeSet<ModalitySet> = self.cells.keys().map(|k| k.0).collect();
        let mut v: Vec<_> = set.into_iter().collect();
        self.universe.sort_canonical(&mut v);
        v
    }

    /// `(train, eval, score)` in canonical order of training then evaluation set.
    pub fn iter(&self) -> Vec<(ModalitySet, ModalitySet, f64)> {
        let order = self.universe.nonempty_subsets();
        let rank: BTreeMap<ModalitySet, usize> = order.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut v: Vec<_> = self.cells.iter().map(|(&(t, e), &s)| (t, e, s)).collect();
        v.sort_by_key(|&(t, e, _)| (rank[&t], rank[&e]));
        v
    }

    /// CSV text: `train_set,eval_set,score` with 6-decimal fractions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_set,eval_set,score\n");
        for (t, e, s) in self.iter() {
            writeln!(out, "{},{},{s:.6}", self.universe.format(t), self.universe.format(e)).expect("string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses CSV text. Lines starting with `#` are comments. When no
    /// universe is given it is inferred from the modality names, sorted.
    pub fn from_csv(text: &str, universe: Option<ModalityUniverse>, kind: ScoreKind) -> Result<Self> {
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = l.split(',').map(str::trim).collect();
            if !header_seen {
                if fields != ["train_set", "eval_set", "score"] {
                    return Err(Error::Matrix {
                        line,
                        detail: "expected header `train_set,eval_set,score`".into(),
                    });
                }
                header_seen = true;
                continue;
            }
            if fields.len() != 3 {
                return Err(Error::Matrix {
                    line,
                    detail: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let score: f64 = fields[2].parse().map_err(|_| Error::Matrix {
                line,
                detail: format!("bad score `{}`", fields[2]),
            })?;
            rows.push((line, fields[0].to_string(), fields[1].to_string(), score));
        }
        if !header_seen {
            return Err(Error::Matrix {
                line: 0,
                detail: "missing header".into(),
            });
        }
        let universe = match universe {
            Some(u) => u,
            None => {
                let names: BTreeSet<&str> = rows
                    .iter()
                    .flat_map(|r| r.1.split('+').chain(r.2.split('+')))
                    .collect();
                ModalityUniverse::new(names).map_err(|e| Error::Matrix {
                    line: 0,
                    detail: e.to_string(),
                })?
            }
        };
        let mut m = Self::new(universe, kind);
        for (line, t, e, score) in rows {
            let wrap = |e: Error| Error::Matrix {
                line,
                detail: e.to_string(),
            };
            let ts = m.universe.parse(&t).map_err(wrap)?;
            let es = m.universe.parse(&e).map_err(wrap)?;
            if m.get(ts, es).is_some() {
                return Err(Error::Matrix {
                    line,
                    detail: format!("duplicate cell ({t}, {e})"),
                });
            }
            m.insert(ts, es, score).map_err(wrap)?;
        }
        Ok(m)
    }

    pub fn read_csv(path: &Path, universe: Option<ModalityUniverse>, kind: ScoreKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, universe, kind)
    }
}
