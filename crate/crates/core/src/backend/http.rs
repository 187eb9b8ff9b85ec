use std::sync::{Condvar, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{
    EmbedRequest, EmbedResponse, ErrorBody, HealthResponse, MlmScoreItem, MlmScoresRequest, MlmScoresResponse,
    ProjectImageRequest, ProjectImageResponse, EMBED_PATH, HEALTH_PATH, MLM_SCORES_PATH, PROJECT_IMAGE_PATH,
};
use super::{check_logits, check_mask_request, Backend, BackendError, BackendOptions, Logits, MaskRequest};

/// Client for a remote inference service.
pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
    checkpoint: Option<String>,
    batch_size: usize,
    permits: Permits,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, opts: &BackendOptions) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(opts.timeout).build();
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            checkpoint: None,
            batch_size: opts.batch_size.max(1),
            permits: Permits::new(opts.max_in_flight.max(1)),
        }
    }

    pub fn with_checkpoint(mut self, checkpoint: Option<String>) -> Self {
        self.checkpoint = checkpoint;
        self
    }

    pub fn health(&self) -> Result<HealthResponse, BackendError> {
        let _permit = self.permits.acquire();
        let resp = self
            .agent
            .get(&format!("{}{HEALTH_PATH}", self.base_url))
            .call()
            .map_err(map_ureq_error)?;
        resp.into_json().map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, BackendError> {
        let _permit = self.permits.acquire();
        let resp = self
            .agent
            .post(&format!("{}{path}", self.base_url))
            .send_json(body)
            .map_err(map_ureq_error)?;
        resp.into_json().map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn score_chunk(&self, items: &[(usize, MlmScoreItem)]) -> Vec<Result<Logits, BackendError>> {
        let request = MlmScoresRequest {
            checkpoint: self.checkpoint.clone(),
            items: items.iter().map(|(_, item)| item.clone()).collect(),
        };
        let response: MlmScoresResponse = match self.post(MLM_SCORES_PATH, &request) {
            Ok(r) => r,
            Err(e) => return vec![Err(e); items.len()],
        };
        if response.results.len() != items.len() {
            let err = BackendError::Protocol(format!("{} results for {} items", response.results.len(), items.len()));
            return vec![Err(err); items.len()];
        }
        response
            .results
            .into_iter()
            .zip(items)
            .map(|(result, (_, item))| match (result.logits, result.error) {
                (Some(logits), None) => {
                    check_logits(&item.words, &logits)?;
                    Ok(logits)
                }
                (None, Some(error)) => Err(BackendError::ItemRejected(error)),
                _ => Err(BackendError::Protocol(
                    "result must carry exactly one of `logits` or `error`".into(),
                )),
            })
            .collect()
    }
}

impl Backend for HttpBackend {
    fn describe(&self) -> String {
        match &self.checkpoint {
            Some(c) => format!("{} [{c}]", self.base_url),
            None => self.base_url.clone(),
        }
    }

    fn is_deterministic(&self) -> bool {
        // services advertise this through `health`
        false
    }

    fn score_mask_batch(&self, items: &[MaskRequest<'_>]) -> Vec<Result<Logits, BackendError>> {
        let mut results: Vec<Option<Result<Logits, BackendError>>> = vec![None; items.len()];
        let mut pending = Vec::new();
        for (i, item) in items.iter().enumerate() {
            match check_mask_request(item) {
                Ok(()) => pending.push((i, MlmScoreItem::from_prompt(item.prompt, item.words))),
                Err(e) => results[i] = Some(Err(e)),
            }
        }
        for chunk in pending.chunks(self.batch_size) {
            for ((i, _), result) in chunk.iter().zip(self.score_chunk(chunk)) {
                results[*i] = Some(result);
            }
        }
        results.into_iter().map(|r| r.expect("every item resolved")).collect()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let mut vectors = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size.max(32)) {
            let resp: EmbedResponse = self.post(EMBED_PATH, &EmbedRequest { texts: chunk.to_vec() })?;
            if resp.vectors.len() != chunk.len() {
                return Err(BackendError::Protocol(format!(
                    "{} vectors for {} texts",
                    resp.vectors.len(),
                    chunk.len()
                )));
            }
            vectors.extend(resp.vectors);
        }
        if let Some(first) = vectors.first() {
            let dim = first.len();
            if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
                return Err(BackendError::Contract("embedding dimension is not constant".into()));
            }
        }
        Ok(vectors)
    }

    fn project_image(&self, features: &[f32], n_slots: usize) -> Result<Vec<Vec<f64>>, BackendError> {
        let resp: ProjectImageResponse = self.post(
            PROJECT_IMAGE_PATH,
            &ProjectImageRequest {
                features: features.to_vec(),
                n_slots,
            },
        )?;
        if resp.slots.len() != n_slots {
            return Err(BackendError::Contract(format!(
                "{} slot vectors, expected {n_slots}",
                resp.slots.len()
            )));
        }
        Ok(resp.slots)
    }
}

fn map_ureq_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Status(status, resp) => {
            let message = resp
                .into_string()
                .ok()
                .map(|body| match serde_json::from_str::<ErrorBody>(&body) {
                    Ok(b) => b.error,
                    Err(_) => body,
                })
                .unwrap_or_default();
            BackendError::Rejected { status, message }
        }
        ureq::Error::Transport(t) => BackendError::Unreachable(t.to_string()),
    }
}

/// Counting semaphore bounding concurrent requests.
struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("permit lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("permit lock");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("permit lock") += 1;
        self.0.freed.notify_one();
    }
}
