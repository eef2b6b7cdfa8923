use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_MODALITIES: usize = 16;

/// Subset of a modality universe, stored as a bitmask over modality indices.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalitySet(u32);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);

    pub fn from_bits(bits: u32) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    /// All modalities of a universe of size `n`.
    pub fn full(n: usize) -> Self {
        assert!(n <= MAX_MODALITIES);
        Self(((1u64 << n) - 1) as u32)
    }

    pub fn singleton(i: usize) -> Self {
        assert!(i < MAX_MODALITIES);
        Self(1 << i)
    }

    pub fn from_indices(idx: impl IntoIterator<Item = usize>) -> Self {
        idx.into_iter()
            .fold(Self::EMPTY, |s, i| s.union(Self::singleton(i)))
    }

    pub fn contains(self, i: usize) -> bool {
        i < MAX_MODALITIES && self.0 & (1 << i) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, o: Self) -> Self {
        Self(self.0 | o.0)
    }

    pub fn intersection(self, o: Self) -> Self {
        Self(self.0 & o.0)
    }

    pub fn difference(self, o: Self) -> Self {
        Self(self.0 & !o.0)
    }

    pub fn is_subset(self, o: Self) -> bool {
        self.0 & !o.0 == 0
    }

    pub fn is_strict_subset(self, o: Self) -> bool {
        self.is_subset(o) && self != o
    }

    pub fn is_superset(self, o: Self) -> bool {
        o.is_subset(self)
    }

    pub fn is_disjoint(self, o: Self) -> bool {
        self.0 & o.0 == 0
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..MAX_MODALITIES).filter(move |&i| self.contains(i))
    }
}

impl fmt::Debug for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.indices()).finish()
    }
}

/// Ordered, named set of modalities. Names are unique and contain neither
/// `+` nor `,`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityUniverse {
    names: Vec<String>,
}

impl ModalityUniverse {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() || names.len() > MAX_MODALITIES {
            return Err(Error::Config(format!(
                "modality universe must have 1..={MAX_MODALITIES} modalities, got {}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(['+', ',', ';']) || n.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid modality name `{n}`")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate modality name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn full(&self) -> ModalitySet {
        ModalitySet::full(self.len())
    }

    pub fn contains_set(&self, s: ModalitySet) -> bool {
        s.is_subset(self.full())
    }

    /// Sorted modality names of `s`, as used in file formats.
    pub fn sorted_names(&self, s: ModalitySet) -> Vec<&str> {
        let mut v: Vec<&str> = s.indices().map(|i| self.name(i)).collect();
        v.sort_unstable();
        v
    }

    /// `+`-joined sorted names, e.g. `audio+video`.
    pub fn format(&self, s: ModalitySet) -> String {
        self.sorted_names(s).join("+")
    }

    pub fn parse(&self, text: &str) -> Result<ModalitySet> {
        let mut set = ModalitySet::EMPTY;
        for part in text.trim().split('+') {
            let i = self
                .index_of(part.trim())
                .ok_or_else(|| Error::MissingModality(part.trim().to_string()))?;
            set = set.union(ModalitySet::singleton(i));
        }
        if set.is_empty() {
            return Err(Error::EmptyModalitySet);
        }
        Ok(set)
    }

    /// Every nonempty subset in canonical order: by size, then by formatted name.
    pub fn nonempty_subsets(&self) -> Vec<ModalitySet> {
        let mut v: Vec<ModalitySet> = (1..=self.full().bits())
            .map(ModalitySet::from_bits)
            .collect();
        self.sort_canonical(&mut v);
        v
    }

    pub fn sort_canonical(&self, sets: &mut [ModalitySet]) {
        sets.sort_by_cached_key(|&s| (s.len(), self.format(s)));
    }
}
