//! Concept strings, the concept dictionary and negative-concept sampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::sample::Source;
use crate::error::{Error, Result};

/// Turn a category/definition pair or a region caption into a concept string.
///
/// Detection concepts take the form `"{category}, {definition}."`; dense-caption
/// concepts are the caption itself with a terminal period.
pub fn build_concept(category: Option<&str>, text: &str, source: Source) -> Result<String> {
    let text = text.trim();
    match source {
        Source::Detection => {
            let category = category.map(str::trim).unwrap_or_default();
            if category.is_empty() {
                return Err(Error::InvalidConcept("empty category name".into()));
            }
            let definition = text.trim_end_matches('.').trim_end();
            if definition.is_empty() {
                return Err(Error::InvalidConcept(format!(
                    "category {category:?} has an empty definition"
                )));
            }
            Ok(format!("{category}, {definition}."))
        }
        Source::DenseCaption => {
            if text.is_empty() {
                return Err(Error::InvalidConcept("empty caption".into()));
            }
            if text.ends_with('.') {
                Ok(text.to_string())
            } else {
                Ok(format!("{text}."))
            }
        }
    }
}

/// True when `s` follows the `"category, definition."` template.
pub fn is_detection_concept(s: &str) -> bool {
    let Some(body) = s.strip_suffix('.') else {
        return false;
    };
    match body.split_once(", ") {
        Some((cat, def)) => !cat.trim().is_empty() && !def.trim().is_empty(),
        None => false,
    }
}

/// Training-frequency tier of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyTier {
    Rare,
    Common,
    Frequent,
}

impl FrequencyTier {
    /// `≤10` training images is rare, `11..=100` common, above that frequent.
    pub fn from_count(count: u64) -> Self {
        match count {
            0..=10 => FrequencyTier::Rare,
            11..=100 => FrequencyTier::Common,
            _ => FrequencyTier::Frequent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictEntry {
    pub definition: String,
    pub frequency: u64,
}

/// Category name → definition and training-occurrence count.
///
/// Serialized as a JSON object `name → {definition, frequency}`; iteration
/// order is the lexical order of names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptDictionary {
    entries: BTreeMap<String, DictEntry>,
}

impl ConceptDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, definition: &str, frequency: u64) -> Result<()> {
        if name.trim().is_empty() {
            return Err(Error::InvalidConcept("empty category name".into()));
        }
        if definition.trim().is_empty() {
            return Err(Error::InvalidConcept(format!(
                "category {name:?} has an empty definition"
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::InvalidConcept(format!("duplicate category {name:?}")));
        }
        self.entries.insert(
            name.to_string(),
            DictEntry {
                definition: definition.to_string(),
                frequency,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&DictEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &DictEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_frequency(&mut self, name: &str, frequency: u64) {
        if let Some(e) = self.entries.get_mut(name) {
            e.frequency = frequency;
        }
    }

    /// Concept string for `name`, falling back to `"{name}."` for unknown categories.
    pub fn concept_for(&self, name: &str) -> String {
        match self.entries.get(name) {
            Some(e) => build_concept(Some(name), &e.definition, Source::Detection)
                .unwrap_or_else(|_| format!("{name}.")),
            None => format!("{}.", name.trim_end_matches('.')),
        }
    }

    /// All concept strings in name order.
    pub fn concepts(&self) -> Vec<String> {
        self.names().map(|n| self.concept_for(n)).collect()
    }

    pub fn tier(&self, name: &str) -> Option<FrequencyTier> {
        self.entries
            .get(name)
            .map(|e| FrequencyTier::from_count(e.frequency))
    }

    pub fn tiers(&self) -> HashMap<String, FrequencyTier> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), FrequencyTier::from_count(e.frequency)))
            .collect()
    }

    /// Keep only the named categories.
    pub fn restricted_to<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Self {
        let keep: HashSet<&str> = names.into_iter().collect();
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let dict: Self = serde_json::from_str(&text)?;
        for (name, e) in &dict.entries {
            if e.definition.trim().is_empty() {
                return Err(Error::InvalidConcept(format!(
                    "category {name:?} has an empty definition"
                )));
            }
        }
        Ok(dict)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Positive concepts followed by sampled negatives, without duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptSet {
    concepts: Vec<String>,
    n_pos: usize,
    requested: usize,
}

impl ConceptSet {
    /// A set with no negatives; duplicates among `positives` collapse to their first occurrence.
    pub fn positives_only(positives: &[String]) -> Self {
        let concepts = dedup_in_order(positives);
        let n_pos = concepts.len();
        Self {
            concepts,
            n_pos,
            requested: n_pos,
        }
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn m(&self) -> usize {
        self.concepts.len()
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_neg(&self) -> usize {
        self.concepts.len() - self.n_pos
    }

    /// The `M` that was asked for; larger than [`ConceptSet::m`] when the dictionary ran short.
    pub fn requested_m(&self) -> usize {
        self.requested
    }

    pub fn positives(&self) -> &[String] {
        &self.concepts[..self.n_pos]
    }

    pub fn negatives(&self) -> &[String] {
        &self.concepts[self.n_pos..]
    }

    pub fn index_of(&self, concept: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == concept)
    }
}

fn dedup_in_order(items: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .iter()
        .filter(|s| seen.insert(s.as_str()))
        .cloned()
        .collect()
}

/// Pad `positives` with negatives drawn uniformly without replacement from
/// the dictionary concepts that are not positives.
///
/// The draw is a forward partial Fisher–Yates shuffle of the candidate pool
/// (dictionary name order) driven by `ChaCha8Rng::seed_from_u64(seed)`. When the
/// pool is too small the set comes back with `M < target_m`.
pub fn sample_negatives(
    positives: &[String],
    dictionary: &ConceptDictionary,
    target_m: usize,
    seed: u64,
) -> Result<ConceptSet> {
    let positives = dedup_in_order(positives);
    if target_m < positives.len() {
        return Err(Error::Contract(format!(
            "target M {target_m} is smaller than the {} unique positives",
            positives.len()
        )));
    }
    let taken: HashSet<&str> = positives.iter().map(String::as_str).collect();
    let pool: Vec<String> = dictionary
        .concepts()
        .into_iter()
        .filter(|c| !taken.contains(c.as_str()))
        .collect();
    let take = (target_m - positives.len()).min(pool.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for i in 0..take {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }

    let n_pos = positives.len();
    let mut concepts = positives;
    concepts.extend(order[..take].iter().map(|&i| pool[i].clone()));
    Ok(ConceptSet {
        concepts,
        n_pos,
        requested: target_m,
    })
}

/// Batch-wide concept set: per-sample positives merged in sample order, then
/// padded with negatives. Also returns, per sample, the concept index of each region.
pub fn batch_concepts<S: AsRef<[String]>>(
    per_sample: &[S],
    dictionary: &ConceptDictionary,
    target_m: usize,
    seed: u64,
) -> Result<(ConceptSet, Vec<Vec<usize>>)> {
    let merged: Vec<String> = per_sample
        .iter()
        .flat_map(|s| s.as_ref().iter().cloned())
        .collect();
    let unique = dedup_in_order(&merged).len();
    let set = sample_negatives(&merged, dictionary, target_m.max(unique), seed)?;
    let index: HashMap<&str, usize> = set
        .concepts()
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let per_sample_idx = per_sample
        .iter()
        .map(|s| s.as_ref().iter().map(|c| index[c.as_str()]).collect())
        .collect();
    Ok((set, per_sample_idx))
}
