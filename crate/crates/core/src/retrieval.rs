//! Similarity-based demonstration retrieval.
//!
//! Each instance is embedded from `text ⊕ aspect ⊕ caption`; for every
//! label the support instance with the highest cosine similarity to the
//! query becomes that label's demonstration.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::dataset::{Instance, LabelSpace};
use crate::error::{Error, Result};

/// Text fed to the sentence embedder for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingInput(pub String);

impl EmbeddingInput {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// `text aspect caption`, single-space joined, empty parts skipped.
pub fn compose_embedding_input(instance: &Instance) -> EmbeddingInput {
    let parts = [
        Some(instance.text.as_str()),
        instance.aspect.as_deref(),
        instance.caption.as_deref(),
    ];
    let joined = parts
        .into_iter()
        .flatten()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    EmbeddingInput(joined)
}

/// Cosine similarity clamped to `[-1, 1]`. A zero vector scores 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Retrieval(format!(
            "cannot compare vectors of dimension {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        log::warn!("cosine with a zero vector; scoring it as 0");
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub query_id: String,
    pub support_id: String,
    pub label: String,
    pub score: f64,
}

/// Embeddings keyed by composed input text, so identical inputs are fetched
/// once even when ids collide across manifests.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingCache {
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        EmbeddingCache::default()
    }

    /// Fetches every missing embedding in one batch.
    pub fn warm<'a>(&mut self, backend: &dyn Backend, instances: impl IntoIterator<Item = &'a Instance>) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        for inst in instances {
            let key = compose_embedding_input(inst).0;
            if !self.vectors.contains_key(&key) && !missing.contains(&key) {
                missing.push(key);
            }
        }
        if missing.is_empty() {
            return Ok(());
        }
        let vectors = backend.embed_batch(&missing)?;
        if vectors.len() != missing.len() {
            return Err(Error::Retrieval(format!(
                "embedder returned {} vectors for {} texts",
                vectors.len(),
                missing.len()
            )));
        }
        self.vectors.extend(missing.into_iter().zip(vectors));
        Ok(())
    }

    pub fn get(&self, instance: &Instance) -> Option<&[f64]> {
        self.vectors
            .get(&compose_embedding_input(instance).0)
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Picks, for each label in label-space order, the most similar support
/// instance carrying that label. Ties go to the lowest support index; the
/// query itself is never its own demonstration.
pub fn select_with_embeddings<'s>(
    query: &Instance,
    query_vec: &[f64],
    support: &'s [Instance],
    support_vecs: &[&[f64]],
    label_space: &LabelSpace,
) -> Result<Vec<(&'s Instance, SimilarityRecord)>> {
    assert_eq!(support.len(), support_vecs.len(), "one vector per support instance");
    let mut best: Vec<Option<(usize, f64)>> = vec![None; label_space.len()];
    for (j, (inst, vec)) in support.iter().zip(support_vecs).enumerate() {
        if inst.id == query.id {
            continue;
        }
        let Some(li) = label_space.index_of(&inst.label) else {
            return Err(Error::Retrieval(format!(
                "support `{}` has label `{}` outside the label space",
                inst.id, inst.label
            )));
        };
        let score = cosine(query_vec, vec)?;
        match best[li] {
            Some((_, s)) if s >= score => {}
            _ => best[li] = Some((j, score)),
        }
    }
    best.into_iter()
        .zip(label_space.labels())
        .map(|(pick, label)| {
            let (j, score) =
                pick.ok_or_else(|| Error::Retrieval(format!("no support instance for label `{label}`")))?;
            Ok((
                &support[j],
                SimilarityRecord {
                    query_id: query.id.clone(),
                    support_id: support[j].id.clone(),
                    label: label.clone(),
                    score,
                },
            ))
        })
        .collect()
}

/// Demonstration retriever over a frozen support set.
pub struct Retriever<'s> {
    support: &'s [Instance],
    label_space: LabelSpace,
    cache: EmbeddingCache,
}

impl<'s> Retriever<'s> {
    /// Embeds the support set up front.
    pub fn new(backend: &dyn Backend, support: &'s [Instance], label_space: LabelSpace) -> Result<Self> {
        let mut cache = EmbeddingCache::new();
        cache.warm(backend, support)?;
        Ok(Retriever {
            support,
            label_space,
            cache,
        })
    }

    /// Embeds queries ahead of time so `select` never calls the backend.
    pub fn warm<'q>(&mut self, backend: &dyn Backend, queries: impl IntoIterator<Item = &'q Instance>) -> Result<()> {
        self.cache.warm(backend, queries)
    }

    pub fn support(&self) -> &'s [Instance] {
        self.support
    }

    /// Selection for a query whose embedding is already cached.
    pub fn select(&self, query: &Instance) -> Result<Vec<(&'s Instance, SimilarityRecord)>> {
        let query_vec = self
            .cache
            .get(query)
            .ok_or_else(|| Error::Retrieval(format!("query `{}` has no cached embedding", query.id)))?;
        let support_vecs: Vec<&[f64]> = self
            .support
            .iter()
            .map(|s| self.cache.get(s).expect("support embedded at construction"))
            .collect();
        select_with_embeddings(query, query_vec, self.support, &support_vecs, &self.label_space)
    }
}

/// One-shot selection: embeds what is needed and picks per-label
/// demonstrations for `query`.
pub fn select_demonstrations<'s>(
    query: &Instance,
    support: &'s [Instance],
    label_space: &LabelSpace,
    embedder: &dyn Backend,
) -> Result<Vec<(&'s Instance, SimilarityRecord)>> {
    let mut retriever = Retriever::new(embedder, support, label_space.clone())?;
    retriever.warm(embedder, [query])?;
    retriever.select(query)
}
