use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::embed::cosine;
use super::entry::EntryKind;
use crate::text::tokenize;

/// Identifies an entry across kinds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntryRef {
    pub kind: EntryKind,
    pub id: String,
}

impl EntryRef {
    pub fn new(kind: EntryKind, id: &str) -> Self {
        Self {
            kind,
            id: id.to_string(),
        }
    }
}

/// Inverted keyword index plus the embedding table used by hybrid search.
#[derive(Debug, Clone, Default)]
pub struct KbIndex {
    /// token → entry → term frequency
    keyword_index: HashMap<String, BTreeMap<EntryRef, u32>>,
    /// entry → its distinct tokens, kept so replacement can unlink postings
    entry_tokens: HashMap<EntryRef, BTreeSet<String>>,
    /// risk-pattern id → embedding
    vector_index: BTreeMap<String, Arc<Vec<f64>>>,
}

impl KbIndex {
    pub fn insert(&mut self, entry: EntryRef, text: &str, embedding: Option<Arc<Vec<f64>>>) {
        self.remove(&entry);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t).or_default() += 1;
        }
        for (token, n) in &tf {
            self.keyword_index
                .entry(token.clone())
                .or_default()
                .insert(entry.clone(), *n);
        }
        if entry.kind == EntryKind::RiskPattern {
            if let Some(v) = embedding {
                self.vector_index.insert(entry.id.clone(), v);
            }
        }
        self.entry_tokens.insert(entry, tf.into_keys().collect());
    }

    pub fn remove(&mut self, entry: &EntryRef) {
        if let Some(tokens) = self.entry_tokens.remove(entry) {
            for t in tokens {
                if let Some(postings) = self.keyword_index.get_mut(&t) {
                    postings.remove(entry);
                    if postings.is_empty() {
                        self.keyword_index.remove(&t);
                    }
                }
            }
        }
        if entry.kind == EntryKind::RiskPattern {
            self.vector_index.remove(&entry.id);
        }
    }

    pub fn contains(&self, entry: &EntryRef) -> bool {
        self.entry_tokens.contains_key(entry)
    }

    pub fn postings(&self, token: &str) -> Option<&BTreeMap<EntryRef, u32>> {
        self.keyword_index.get(token)
    }

    pub fn embedding(&self, pattern_id: &str) -> Option<&Arc<Vec<f64>>> {
        self.vector_index.get(pattern_id)
    }

    pub fn vector_ids(&self) -> impl Iterator<Item = &String> {
        self.vector_index.keys()
    }

    pub fn posting_count(&self, entry: &EntryRef) -> usize {
        self.keyword_index.values().filter(|p| p.contains_key(entry)).count()
    }

    /// For every entry of `kind`, the fraction of distinct query tokens it
    /// contains. Entries sharing no token are absent.
    pub fn keyword_overlap(&self, kind: EntryKind, query_tokens: &BTreeSet<String>) -> HashMap<String, f64> {
        let mut hits: HashMap<String, usize> = HashMap::new();
        for t in query_tokens {
            if let Some(postings) = self.keyword_index.get(t) {
                for e in postings.keys().filter(|e| e.kind == kind) {
                    *hits.entry(e.id.clone()).or_default() += 1;
                }
            }
        }
        let n = query_tokens.len().max(1) as f64;
        hits.into_iter().map(|(id, h)| (id, h as f64 / n)).collect()
    }

    /// `alpha · keyword_overlap + (1 − alpha) · cosine` for each candidate
    /// pattern id, sorted by score descending then id ascending.
    pub fn hybrid_rank<'a>(
        &self,
        candidates: impl Iterator<Item = &'a str>,
        query_tokens: &BTreeSet<String>,
        query_embedding: &[f64],
        alpha: f64,
    ) -> Vec<(String, f64)> {
        let overlap = self.keyword_overlap(EntryKind::RiskPattern, query_tokens);
        let mut scored: Vec<(String, f64)> = candidates
            .map(|id| {
                let kw = overlap.get(id).copied().unwrap_or(0.0);
                let cos = self.vector_index.get(id).map_or(0.0, |v| cosine(query_embedding, v));
                (id.to_string(), alpha * kw + (1.0 - alpha) * cos)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replace_leaves_single_posting_set() {
        let mut idx = KbIndex::default();
        let r = EntryRef::new(EntryKind::RiskPattern, "p1");
        idx.insert(r.clone(), "bulk orders bulk", None);
        idx.insert(r.clone(), "refund abuse", None);
        assert!(idx.postings("bulk").is_none());
        assert_eq!(idx.postings("refund").unwrap().get(&r), Some(&1));
        assert_eq!(idx.posting_count(&r), 2);
        idx.remove(&r);
        assert!(!idx.contains(&r));
        assert!(idx.postings("refund").is_none());
    }

    #[test]
    fn overlap_is_normalized_by_query_tokens() {
        let mut idx = KbIndex::default();
        idx.insert(EntryRef::new(EntryKind::RiskPattern, "a"), "x y z", None);
        idx.insert(EntryRef::new(EntryKind::Term, "t"), "x y z w", None);
        let q: BTreeSet<String> = ["x", "y", "q", "r"].iter().map(|s| s.to_string()).collect();
        let o = idx.keyword_overlap(EntryKind::RiskPattern, &q);
        assert_eq!(o.len(), 1);
        assert_eq!(o["a"], 0.5);
    }
}
