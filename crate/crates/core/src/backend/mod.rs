//! Model backend contract.
//!
//! Every scorer implements [`Backend`]: mask scoring over verbalizer words,
//! text embedding, and (optionally) projection of image features into
//! text-embedding slots. Backends are picked by URI: `stub:SEED` runs the
//! in-process [`StubBackend`], `http://…` / `https://…` talks to a remote
//! service speaking the [`wire`] protocol.

pub mod conformance;
mod http;
mod stub;
pub mod wire;

pub use http::HttpBackend;
pub use stub::StubBackend;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::prompt::AssembledPrompt;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend returned HTTP {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("backend rejected item: {0}")]
    ItemRejected(String),
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("backend contract violation: {0}")]
    Contract(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("capability not supported: {0}")]
    Unsupported(&'static str),
    #[error("invalid backend uri `{0}`")]
    BadUri(String),
}

/// Word → logit at the mask position.
pub type Logits = BTreeMap<String, f64>;

/// One item of a mask-scoring batch.
#[derive(Debug, Clone, Copy)]
pub struct MaskRequest<'a> {
    pub prompt: &'a AssembledPrompt,
    pub words: &'a [String],
}

pub trait Backend: Send + Sync {
    /// Human-readable identity, e.g. `stub:13`.
    fn describe(&self) -> String;

    /// Whether identical requests always yield identical outputs.
    fn is_deterministic(&self) -> bool;

    /// Scores each item independently; one bad item does not fail the rest.
    fn score_mask_batch(&self, items: &[MaskRequest<'_>]) -> Vec<Result<Logits, BackendError>>;

    /// Embeds texts into vectors of a fixed per-session dimension.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;

    /// Projects a pooled image feature vector into `n_slots` vectors of the
    /// text-embedding dimension.
    fn project_image(&self, _features: &[f32], _n_slots: usize) -> Result<Vec<Vec<f64>>, BackendError> {
        Err(BackendError::Unsupported("project_image"))
    }

    fn score_mask(&self, prompt: &AssembledPrompt, words: &[String]) -> Result<Logits, BackendError> {
        self.score_mask_batch(&[MaskRequest { prompt, words }])
            .pop()
            .unwrap_or_else(|| Err(BackendError::Protocol("empty batch result".into())))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let mut v = self.embed_batch(&[text.to_string()])?;
        v.pop()
            .ok_or_else(|| BackendError::Protocol("empty embedding batch".into()))
    }
}

/// Validates the shape of a mask-scoring request before it is sent.
pub(crate) fn check_mask_request(item: &MaskRequest<'_>) -> Result<(), BackendError> {
    if item.words.is_empty() {
        return Err(BackendError::InvalidRequest("no verbalizer words".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = item.words.iter().find(|w| !seen.insert(w.as_str())) {
        return Err(BackendError::InvalidRequest(format!("duplicate word `{dup}`")));
    }
    if item.prompt.mask_count() != 1 {
        return Err(BackendError::InvalidRequest(format!(
            "prompt has {} masks",
            item.prompt.mask_count()
        )));
    }
    Ok(())
}

/// Checks that a backend answered with exactly one finite logit per word.
pub fn check_logits(words: &[String], logits: &Logits) -> Result<(), BackendError> {
    if logits.len() != words.len() {
        return Err(BackendError::Contract(format!(
            "{} logits for {} words",
            logits.len(),
            words.len()
        )));
    }
    for w in words {
        match logits.get(w) {
            Some(v) if v.is_finite() => {}
            Some(v) => return Err(BackendError::Contract(format!("non-finite logit {v} for `{w}`"))),
            None => return Err(BackendError::Contract(format!("missing logit for `{w}`"))),
        }
    }
    Ok(())
}

/// Parsed backend URI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Stub { seed: u64 },
    Http { base_url: String },
}

impl std::str::FromStr for BackendSpec {
    type Err = BackendError;

    fn from_str(uri: &str) -> Result<Self, BackendError> {
        let uri = uri.trim();
        if uri == "stub" {
            return Ok(BackendSpec::Stub { seed: 0 });
        }
        if let Some(seed) = uri.strip_prefix("stub:") {
            let seed = seed.parse().map_err(|_| BackendError::BadUri(uri.to_string()))?;
            return Ok(BackendSpec::Stub { seed });
        }
        if uri.starts_with("http://") || uri.starts_with("https://") {
            return Ok(BackendSpec::Http {
                base_url: uri.trim_end_matches('/').to_string(),
            });
        }
        Err(BackendError::BadUri(uri.to_string()))
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Stub { seed } => write!(f, "stub:{seed}"),
            BackendSpec::Http { base_url } => f.write_str(base_url),
        }
    }
}

/// Identifies one backend session within an experiment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionKey {
    /// Template the session classifies with; `None` for the shared session.
    pub template: Option<String>,
    pub split_seed: u64,
    pub repeat: u32,
}

/// Options applied when opening a backend.
#[derive(Debug, Clone)]
pub struct BackendOptions {
    pub embed_dim: usize,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub timeout: std::time::Duration,
}

impl Default for BackendOptions {
    fn default() -> Self {
        BackendOptions {
            embed_dim: stub::DEFAULT_EMBED_DIM,
            batch_size: 8,
            max_in_flight: 4,
            timeout: std::time::Duration::from_secs(60),
        }
    }
}

impl BackendSpec {
    /// Opens a session. Stub sessions derive their seed from the base seed
    /// and the session key, so each run and template behaves like a
    /// separately trained scorer. HTTP sessions send the template as the
    /// checkpoint tag.
    pub fn open(&self, key: &SessionKey, opts: &BackendOptions) -> Box<dyn Backend> {
        match self {
            BackendSpec::Stub { seed } => {
                let derived = stub::derive_seed(*seed, key);
                Box::new(StubBackend::new(derived, opts.embed_dim))
            }
            BackendSpec::Http { base_url } => {
                Box::new(HttpBackend::new(base_url.clone(), opts).with_checkpoint(key.template.clone()))
            }
        }
    }

    /// Opens a session without any run-specific derivation.
    pub fn open_plain(&self, opts: &BackendOptions) -> Box<dyn Backend> {
        match self {
            BackendSpec::Stub { seed } => Box::new(StubBackend::new(*seed, opts.embed_dim)),
            BackendSpec::Http { base_url } => Box::new(HttpBackend::new(base_url.clone(), opts)),
        }
    }
}
