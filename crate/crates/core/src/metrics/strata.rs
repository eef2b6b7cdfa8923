use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datagen::{ModalitySet, ModalityUniverse};
use crate::error::{Error, Result};
use crate::metrics::ScoreMatrix;

/// Which evaluation sets count for a given training set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    /// Every nonempty evaluation set.
    Overall,
    /// `M_E` a strict subset of `M_T`.
    Missing,
    /// `M_T` a strict subset of `M_E`.
    Added,
    /// `M_E` disjoint from `M_T`.
    Transfer,
    /// `|M_T ∩ M_E| = k`.
    Overlap(usize),
    /// `M_E = M_T` and `|M_T| = k`.
    Matched(usize),
}

impl Stratum {
    pub fn contains(self, train: ModalitySet, eval: ModalitySet) -> bool {
        match self {
            Stratum::Overall => true,
            Stratum::Missing => eval.is_strict_subset(train),
            Stratum::Added => train.is_strict_subset(eval),
            Stratum::Transfer => train.is_disjoint(eval),
            Stratum::Overlap(k) => train.intersection(eval).len() == k,
            Stratum::Matched(k) => train == eval && train.len() == k,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let k = |p: &str| -> Result<usize> {
            p.parse()
                .map_err(|_| Error::Config(format!("bad stratum `{s}`")))
        };
        Ok(match s {
            "overall" => Stratum::Overall,
            "missing" => Stratum::Missing,
            "added" => Stratum::Added,
            "transfer" => Stratum::Transfer,
            _ => {
                if let Some(p) = s.strip_prefix("overlap-") {
                    Stratum::Overlap(k(p)?)
                } else if let Some(p) = s.strip_prefix("matched-") {
                    Stratum::Matched(k(p)?)
                } else {
                    return Err(Error::Config(format!("unknown stratum `{s}`")));
                }
            }
        })
    }

    /// Expands a comma-separated list. `overlap` and `matched` expand to
    /// every k for the universe; `all` expands to everything.
    pub fn parse_list(s: &str, n: usize) -> Result<Vec<Stratum>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "overlap" => out.extend((0..=n).map(Stratum::Overlap)),
                "matched" => out.extend((1..=n).map(Stratum::Matched)),
                "all" => out.extend(Self::all(n)),
                "summary" => out.extend(Self::SUMMARY),
                p => out.push(Self::parse(p)?),
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty strata list".into()));
        }
        let mut seen = Vec::new();
        out.retain(|s| {
            let fresh = !seen.contains(s);
            seen.push(*s);
            fresh
        });
        Ok(out)
    }

    pub const SUMMARY: [Stratum; 4] = [Stratum::Overall, Stratum::Missing, Stratum::Added, Stratum::Transfer];

    pub fn all(n: usize) -> Vec<Stratum> {
        let mut v = Self::SUMMARY.to_vec();
        v.extend((0..=n).map(Stratum::Overlap));
        v.extend((1..=n).map(Stratum::Matched));
        v
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stratum::Overall => write!(f, "overall"),
            Stratum::Missing => write!(f, "missing"),
            Stratum::Added => write!(f, "added"),
            Stratum::Transfer => write!(f, "transfer"),
            Stratum::Overlap(k) => write!(f, "overlap-{k}"),
            Stratum::Matched(k) => write!(f, "matched-{k}"),
        }
    }
}

/// Every `(M_T, M_E)` pair of the stratum, canonical order.
pub fn enumerate_pairs(universe: &ModalityUniverse, stratum: Stratum) -> Vec<(ModalitySet, ModalitySet)> {
    let sets = universe.nonempty_subsets();
    let mut out = Vec::new();
    for &t in &sets {
        for &e in &sets {
            if stratum.contains(t, e) {
                out.push((t, e));
            }
        }
    }
    out
}

fn stratum_scores(m: &ScoreMatrix, train: ModalitySet, stratum: Stratum) -> Option<Vec<f64>> {
    let candidates: Vec<ModalitySet> = m
        .universe
        .nonempty_subsets()
        .into_iter()
        .filter(|&e| stratum.contains(train, e))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    candidates.iter().map(|&e| m.get(train, e)).collect()
}

/// Mean score over the stratum's evaluation sets. Absent when the stratum
/// is empty for `train` or any of its cells is missing.
pub fn performance(m: &ScoreMatrix, train: ModalitySet, stratum: Stratum) -> Option<f64> {
    let s = stratum_scores(m, train, stratum)?;
    Some(s.iter().sum::<f64>() / s.len() as f64)
}

/// Worst score over the stratum's evaluation sets.
pub fn robustness(m: &ScoreMatrix, train: ModalitySet, stratum: Stratum) -> Option<f64> {
    let s = stratum_scores(m, train, stratum)?;
    s.into_iter().reduce(f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub p: f64,
    pub r: f64,
    pub p_best: f64,
    pub r_best: f64,
    /// Number of training sets averaged.
    pub count: usize,
}

/// Mean and max of `P(M_T)` / `R(M_T)` over training sets where both are defined.
pub fn aggregate(m: &ScoreMatrix, stratum: Stratum) -> Option<Aggregate> {
    let pr: Vec<(f64, f64)> = m
        .train_sets()
        .into_iter()
        .filter_map(|t| Some((performance(m, t, stratum)?, robustness(m, t, stratum)?)))
        .collect();
    if pr.is_empty() {
        return None;
    }
    let n = pr.len() as f64;
    Some(Aggregate {
        p: pr.iter().map(|x| x.0).sum::<f64>() / n,
        r: pr.iter().map(|x| x.1).sum::<f64>() / n,
        p_best: pr.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max),
        r_best: pr.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max),
        count: pr.len(),
    })
}

/// Highest-scoring evaluation set per training set. Ties go to the smaller
/// set, then to the lexicographically smaller formatted name.
pub fn best_eval_sets(m: &ScoreMatrix) -> BTreeMap<ModalitySet, (ModalitySet, f64)> {
    let mut out: BTreeMap<ModalitySet, (ModalitySet, f64)> = BTreeMap::new();
    for (t, e, s) in m.iter() {
        let better = match out.get(&t) {
            None => true,
            Some(&(be, bs)) => {
                s > bs || (s == bs && (e.len(), m.universe.format(e)) < (be.len(), m.universe.format(be)))
            }
        };
        if better {
            out.insert(t, (e, s));
        }
    }
    out
}
