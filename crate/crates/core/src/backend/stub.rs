use sha2::{Digest, Sha256};

use super::{check_mask_request, Backend, BackendError, Logits, MaskRequest, SessionKey};

pub(crate) const DEFAULT_EMBED_DIM: usize = 64;

/// Character n-gram size used by the stub embedder.
const NGRAM: usize = 3;

/// Deterministic in-process backend.
///
/// Every output is a pure function of the input bytes and the seed:
/// - mask logits are SHA-256 of `full_text ‖ 0x1f ‖ word ‖ 0x1f ‖ seed_le`,
///   top 53 bits mapped linearly onto `[-3, 3]`;
/// - embeddings are signed feature-hashed character trigrams (FNV-1a 64,
///   seed-prefixed), L2-normalised;
/// - image projection is a fixed pseudo-random affine map derived from the
///   seed.
#[derive(Debug, Clone)]
pub struct StubBackend {
    seed: u64,
    embed_dim: usize,
}

impl StubBackend {
    pub fn new(seed: u64, embed_dim: usize) -> Self {
        assert!(embed_dim >= 1, "embedding dimension must be positive");
        StubBackend { seed, embed_dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Logit for `word` at the mask of `full_text`.
    pub fn logit(&self, full_text: &str, word: &str) -> f64 {
        let mut h = Sha256::new();
        h.update(full_text.as_bytes());
        h.update([0x1f]);
        h.update(word.as_bytes());
        h.update([0x1f]);
        h.update(self.seed.to_le_bytes());
        let digest = h.finalize();
        let top = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
        -3.0 + 6.0 * unit_interval(top)
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let chars: Vec<char> = std::iter::once('\u{2}')
            .chain(text.chars())
            .chain(std::iter::once('\u{3}'))
            .collect();
        let mut v = vec![0.0; self.embed_dim];
        let mut buf = String::new();
        for gram in chars.windows(NGRAM.min(chars.len())) {
            buf.clear();
            buf.extend(gram);
            let h = fnv1a(self.seed, buf.as_bytes());
            let idx = (h % self.embed_dim as u64) as usize;
            v[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // all n-grams cancelled out; fall back to a seed-derived axis
            let idx = (fnv1a(self.seed, b"\x00empty") % self.embed_dim as u64) as usize;
            v[idx] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    fn projection_weight(&self, tag: &[u8], i: usize, j: usize) -> f64 {
        let mut bytes = Vec::with_capacity(tag.len() + 16);
        bytes.extend_from_slice(tag);
        bytes.extend_from_slice(&(i as u64).to_le_bytes());
        bytes.extend_from_slice(&(j as u64).to_le_bytes());
        2.0 * unit_interval(fnv1a(self.seed, &bytes)) - 1.0
    }
}

fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    // finalizer from splitmix64 to spread low-entropy inputs
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub(crate) fn derive_seed(base: u64, key: &SessionKey) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(key.template.as_deref().unwrap_or("").as_bytes());
    h.update([0x1f]);
    h.update(key.split_seed.to_le_bytes());
    h.update(key.repeat.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Backend for StubBackend {
    fn describe(&self) -> String {
        format!("stub:{}", self.seed)
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn score_mask_batch(&self, items: &[MaskRequest<'_>]) -> Vec<Result<Logits, BackendError>> {
        items
            .iter()
            .map(|item| {
                check_mask_request(item)?;
                Ok(item
                    .words
                    .iter()
                    .map(|w| (w.clone(), self.logit(item.prompt.full_text(), w)))
                    .collect())
            })
            .collect()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }

    fn project_image(&self, features: &[f32], n_slots: usize) -> Result<Vec<Vec<f64>>, BackendError> {
        if features.is_empty() {
            return Err(BackendError::InvalidRequest("empty image feature vector".into()));
        }
        if n_slots == 0 {
            return Err(BackendError::InvalidRequest("zero image slots requested".into()));
        }
        let scale = 1.0 / (features.len() as f64).sqrt();
        let out_dim = self.embed_dim * n_slots;
        let flat: Vec<f64> = (0..out_dim)
            .map(|j| {
                let dot: f64 = features
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f64::from(x) * self.projection_weight(b"W", i, j))
                    .sum();
                dot * scale + 0.1 * self.projection_weight(b"b", 0, j)
            })
            .collect();
        Ok(flat.chunks(self.embed_dim).map(<[f64]>::to_vec).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::cosine;

    #[test]
    fn logits_in_range_and_seeded() {
        let a = StubBackend::new(1, 8);
        let b = StubBackend::new(2, 8);
        let l = a.logit("<s> x <mask> </s>", "great");
        assert!((-3.0..=3.0).contains(&l));
        assert_eq!(l, a.logit("<s> x <mask> </s>", "great"));
        assert_ne!(l, b.logit("<s> x <mask> </s>", "great"));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let s = StubBackend::new(0, 32);
        for t in ["", "a", "abc", "a much longer sentence with words"] {
            let v = s.embed_text(t);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9, "{t:?} → {n}");
        }
    }

    #[test]
    fn ngram_similarity_ordering() {
        let s = StubBackend::new(0, 64);
        let near = cosine(&s.embed_text("aaaa"), &s.embed_text("aaab")).unwrap();
        let far = cosine(&s.embed_text("aaaa"), &s.embed_text("zzzz")).unwrap();
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn projection_shapes_and_linearity() {
        let s = StubBackend::new(5, 16);
        for n in 1..=4 {
            let out = s.project_image(&[0.5, -1.0, 2.0], n).unwrap();
            assert_eq!(out.len(), n);
            assert!(out.iter().all(|v| v.len() == 16));
        }
        // affine: f(2x) - f(x) = f(x) - f(0-ish) is linear in x
        let x = s.project_image(&[1.0, 0.0], 1).unwrap();
        let x2 = s.project_image(&[2.0, 0.0], 1).unwrap();
        let x3 = s.project_image(&[3.0, 0.0], 1).unwrap();
        for j in 0..16 {
            let d1 = x2[0][j] - x[0][j];
            let d2 = x3[0][j] - x2[0][j];
            assert!((d1 - d2).abs() < 1e-9);
        }
        assert!(s.project_image(&[], 1).is_err());
        assert!(s.project_image(&[1.0], 0).is_err());
    }

    #[test]
    fn session_seeds_differ() {
        let k = |t: Option<&str>, s, r| SessionKey {
            template: t.map(str::to_string),
            split_seed: s,
            repeat: r,
        };
        let base = derive_seed(0, &k(Some("c3"), 13, 0));
        assert_eq!(base, derive_seed(0, &k(Some("c3"), 13, 0)));
        assert_ne!(base, derive_seed(0, &k(Some("c4"), 13, 0)));
        assert_ne!(base, derive_seed(0, &k(Some("c3"), 21, 0)));
        assert_ne!(base, derive_seed(0, &k(Some("c3"), 13, 1)));
        assert_ne!(base, derive_seed(1, &k(Some("c3"), 13, 0)));
    }
}
