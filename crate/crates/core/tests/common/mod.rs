#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use multipoint::backend::wire::{
    EmbedRequest, EmbedResponse, ErrorBody, HealthResponse, MlmScoreResult, MlmScoresRequest, MlmScoresResponse,
    ProjectImageRequest, ProjectImageResponse,
};
use multipoint::backend::{Backend, StubBackend};
use multipoint::dataset::{write_instances, Instance, LabelSpace};
use multipoint::prompt::{render_demonstration, render_query, PromptTemplate, TemplateId};

/// Golden rows as `(key, expected)`, where key is e.g. `c3.demo`.
pub fn golden_rows() -> Vec<(String, String)> {
    include_str!("../golden/templates.tsv")
        .lines()
        .map(|line| {
            let (k, v) = line.split_once('\t').expect("tab-separated golden row");
            (k.to_string(), v.to_string())
        })
        .collect()
}

/// Renders the instance behind golden row `key`.
pub fn render_golden(key: &str) -> String {
    let (name, form) = key.split_once('.').expect("template.form");
    let id: TemplateId = name.parse().expect("template id");
    let template = PromptTemplate::builtin(id, 1, 2).expect("builtin");
    let (instance, space, label) = match name {
        "c1" => (coarse_instance(), LabelSpace::sentiment3(id.grain()), "Negative"),
        "c2" => (coarse_instance(), LabelSpace::sentiment3(id.grain()), "Neutral"),
        "c3" => (coarse_instance(), LabelSpace::sentiment3(id.grain()), "Positive"),
        "c4" => (coarse_instance(), LabelSpace::tumemo(), "Happy"),
        "f1" => (fine_instance(), LabelSpace::sentiment3(id.grain()), "Negative"),
        "f2" => (fine_instance(), LabelSpace::sentiment3(id.grain()), "Neutral"),
        "f3" => (fine_instance(), LabelSpace::sentiment3(id.grain()), "Positive"),
        "f4" => (fine_instance(), LabelSpace::masad(), "Negative"),
        other => panic!("no golden instance for {other}"),
    };
    let rendered = match form {
        "query" => render_query(&instance, &template),
        "demo" => render_demonstration(&instance, &template, label, &space),
        other => panic!("unknown form {other}"),
    };
    rendered.expect("golden renders").text().to_string()
}

fn coarse_instance() -> Instance {
    Instance::coarse("g-c", "The market rallied today", "a man holding a sign", "Positive")
}

fn fine_instance() -> Instance {
    Instance::fine(
        "g-f",
        "Long lines at the airport",
        "the security check",
        "people waiting in a hall",
        "Negative",
    )
}

const CUES: [[&str; 3]; 3] = [
    ["awful", "broken", "angry"],
    ["plain", "usual", "routine"],
    ["lovely", "bright", "happy"],
];
const FILLER: [&str; 8] = ["market", "city", "weather", "team", "phone", "movie", "dinner", "train"];

/// A deterministic coarse sentiment3 manifest of `n` instances with label
/// proportions of roughly 25/30/45 percent.
pub fn synthetic_instances(n: usize) -> Vec<Instance> {
    let labels = ["Negative", "Neutral", "Positive"];
    (0..n)
        .map(|i| {
            let class = match i % 20 {
                0..=4 => 0,
                5..=10 => 1,
                _ => 2,
            };
            let cue = CUES[class][i % 3];
            let text = format!("the {} was {cue} number {i}", FILLER[i % FILLER.len()]);
            let caption = format!("a photo of a {} scene", FILLER[(i / 3) % FILLER.len()]);
            Instance::coarse(&format!("syn-{i:04}"), &text, &caption, labels[class])
        })
        .collect()
}

pub fn write_synthetic(path: &Path, n: usize) {
    write_instances(path, &synthetic_instances(n)).expect("write synthetic manifest");
}

/// An HTTP inference service backed by the stub, for client tests.
pub struct MockService {
    pub addr: SocketAddr,
    _runtime: tokio::runtime::Runtime,
}

impl MockService {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

type Shared = Arc<StubBackend>;

async fn health(State(stub): State<Shared>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        embed_dim: Some(stub.embed_dim()),
        deterministic: true,
    })
}

async fn mlm_scores(State(stub): State<Shared>, Json(req): Json<MlmScoresRequest>) -> Json<MlmScoresResponse> {
    let checkpoint_salt = req.checkpoint.as_deref().unwrap_or("");
    let results = req
        .items
        .iter()
        .map(|item| {
            if item.words.is_empty() {
                return MlmScoreResult {
                    logits: None,
                    error: Some(format!("item `{}` has no words", item.id)),
                };
            }
            let text = format!("{checkpoint_salt}{}", item.prompt);
            MlmScoreResult {
                logits: Some(item.words.iter().map(|w| (w.clone(), stub.logit(&text, w))).collect()),
                error: None,
            }
        })
        .collect();
    Json(MlmScoresResponse { results })
}

async fn embed(State(stub): State<Shared>, Json(req): Json<EmbedRequest>) -> Json<EmbedResponse> {
    Json(EmbedResponse {
        vectors: req.texts.iter().map(|t| stub.embed_text(t)).collect(),
    })
}

async fn project(
    State(stub): State<Shared>,
    Json(req): Json<ProjectImageRequest>,
) -> Result<Json<ProjectImageResponse>, (StatusCode, Json<ErrorBody>)> {
    stub.project_image(&req.features, req.n_slots)
        .map(|slots| Json(ProjectImageResponse { slots }))
        .map_err(|e| {
            (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(ErrorBody { error: e.to_string() }),
            )
        })
}

pub fn spawn_mock(seed: u64) -> MockService {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .expect("tokio runtime");
    let stub: Shared = Arc::new(StubBackend::new(seed, 64));
    let app = Router::new()
        .route("/v1/healthz", get(health))
        .route("/v1/mlm-scores", post(mlm_scores))
        .route("/v1/embed", post(embed))
        .route("/v1/project-image", post(project))
        .with_state(stub);
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .expect("bind mock service");
    let addr = listener.local_addr().expect("local addr");
    runtime.spawn(async move {
        axum::serve(listener, app).await.expect("mock service");
    });
    MockService {
        addr,
        _runtime: runtime,
    }
}
