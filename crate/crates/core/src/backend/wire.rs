//! JSON wire schemas for the remote inference service (`/v1`).
//!
//! These types are the client side of `docs/backend-api.md`; a service
//! implementation can depend on this module to share the exact shapes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::prompt::AssembledPrompt;

pub const HEALTH_PATH: &str = "/v1/healthz";
pub const MLM_SCORES_PATH: &str = "/v1/mlm-scores";
pub const EMBED_PATH: &str = "/v1/embed";
pub const PROJECT_IMAGE_PATH: &str = "/v1/project-image";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    #[serde(default)]
    pub embed_dim: Option<usize>,
    #[serde(default)]
    pub deterministic: bool,
}

/// Byte range of one prompt block (query or demonstration) in `prompt`,
/// with the pre-projected slot vectors that replace its `<IMG_k>` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBlock {
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmScoreItem {
    pub id: String,
    pub prompt: String,
    pub blocks: Vec<WireBlock>,
    pub words: Vec<String>,
}

impl MlmScoreItem {
    pub fn from_prompt(prompt: &AssembledPrompt, words: &[String]) -> Self {
        let blocks = prompt
            .block_spans()
            .into_iter()
            .map(|(block, start, end)| WireBlock {
                start,
                end,
                image_features: prompt
                    .blocks()
                    .nth(block)
                    .and_then(|b| b.image_features())
                    .map(<[Vec<f32>]>::to_vec),
            })
            .collect();
        MlmScoreItem {
            id: prompt.id().to_string(),
            prompt: prompt.full_text().to_string(),
            blocks,
            words: words.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmScoresRequest {
    /// Checkpoint tag, e.g. one fine-tuned model per template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub items: Vec<MlmScoreItem>,
}

/// Per-item outcome: exactly one of `logits` or `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmScoreResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmScoresResponse {
    pub results: Vec<MlmScoreResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectImageRequest {
    pub features: Vec<f32>,
    pub n_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectImageResponse {
    pub slots: Vec<Vec<f64>>,
}

/// Body of any non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
