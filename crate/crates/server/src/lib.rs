//! Read-only JSON inference service over a loaded checkpoint.
//!
//! Routes: `POST /predict`, `GET /prototypes/{label}`, `GET /labels` and
//! `GET /health`. All state is built at startup and never mutated.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use protodx::corpus::Corpus;
use protodx::explain::{top_labels, ExemplarIndex, ExemplarMode};
use protodx::protonet::ProtoModel;

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_EXEMPLARS: usize = 3;

/// Everything the handlers read. Built once, shared immutably.
pub struct AppState {
    pub model: ProtoModel<f32>,
    pub model_hash: String,
    exemplars: Option<(ExemplarIndex, Corpus)>,
}

impl AppState {
    /// Precomputes the exemplar index when a training corpus is given and
    /// the model has prototypes. `train` must use the model vocabulary.
    pub fn new(model: ProtoModel<f32>, train: Option<Corpus>) -> protodx::Result<Self> {
        let model_hash = model.model_hash()?;
        let exemplars = match train {
            Some(c) if model.variant.is_proto() => Some((ExemplarIndex::build(&model, &c)?, c)),
            Some(_) => {
                log::warn!("{} has no prototypes; exemplar endpoint disabled", model.variant);
                None
            }
            None => None,
        };
        Ok(AppState {
            model,
            model_hash,
            exemplars,
        })
    }

    pub fn exemplar_index(&self) -> Option<&ExemplarIndex> {
        self.exemplars.as_ref().map(|(i, _)| i)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub code: String,
}

struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, code: &str, error: impl Into<String>) -> Self {
        Failure(
            status,
            ApiError {
                error: error.into(),
                code: code.into(),
            },
        )
    }

    fn bad_request(code: &str, error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, error)
    }

    fn internal(e: protodx::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, Failure>;

#[derive(Debug, Deserialize)]
pub struct PredictRequest {
    pub text: String,
    pub top_k: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictedLabel {
    pub label: String,
    pub probability: f64,
    /// Null for linear heads.
    pub distance: Option<f64>,
    /// One score per entry of `tokens`.
    pub token_scores: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictResponse {
    pub labels: Vec<PredictedLabel>,
    pub tokens: Vec<String>,
}

async fn predict(
    State(state): State<Arc<AppState>>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> ApiResult<PredictResponse> {
    let Json(req) = body.map_err(|e| Failure::bad_request("invalid_request", e.body_text()))?;
    let top_k = req.top_k.unwrap_or(DEFAULT_TOP_K as i64);
    if top_k < 1 {
        return Err(Failure::bad_request("invalid_top_k", format!("top_k must be >= 1, got {top_k}")));
    }
    let model = &state.model;
    let (words, ids) = model.encode_text(&req.text);
    if ids.is_empty() {
        return Err(Failure::bad_request("empty_text", "text contains no tokens"));
    }
    let r = model.forward_tokens(&ids).map_err(Failure::internal)?;
    let picked = top_labels(r.probabilities.as_slice().expect("contiguous"), top_k as usize);
    let labels = picked
        .into_iter()
        .map(|c| PredictedLabel {
            label: model.labels[c].clone(),
            probability: r.probabilities[c] as f64,
            distance: model.variant.is_proto().then(|| r.scores[c] as f64),
            token_scores: r.token_scores(c, ids.len()).into_iter().map(f64::from).collect(),
        })
        .collect();
    Ok(Json(PredictResponse { labels, tokens: words }))
}

#[derive(Debug, Deserialize)]
pub struct PrototypeQuery {
    pub k: Option<i64>,
    pub mode: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ExemplarEntry {
    pub doc_id: String,
    pub distance: f64,
    pub top_spans: Vec<[usize; 2]>,
    pub tokens: Vec<String>,
    pub attention: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PrototypesResponse {
    pub label: String,
    pub mode: ExemplarMode,
    pub exemplars: Vec<ExemplarEntry>,
}

async fn prototypes(
    State(state): State<Arc<AppState>>,
    Path(label): Path<String>,
    query: Result<Query<PrototypeQuery>, QueryRejection>,
) -> ApiResult<PrototypesResponse> {
    let Query(q) = query.map_err(|e| Failure::bad_request("invalid_query", e.body_text()))?;
    let Some(id) = state.model.label_id(&label) else {
        return Err(Failure::new(StatusCode::NOT_FOUND, "unknown_label", format!("no label `{label}`")));
    };
    let k = q.k.unwrap_or(DEFAULT_EXEMPLARS as i64);
    if k < 1 {
        return Err(Failure::bad_request("invalid_k", format!("k must be >= 1, got {k}")));
    }
    let mode: ExemplarMode = q
        .mode
        .as_deref()
        .unwrap_or("typical")
        .parse()
        .map_err(|e: protodx::Error| Failure::bad_request("invalid_mode", e.to_string()))?;
    let Some((index, train)) = &state.exemplars else {
        return Err(Failure::new(
            StatusCode::NOT_FOUND,
            "no_exemplar_index",
            "server was started without a prototype model and training corpus",
        ));
    };
    let exemplars = index
        .query(id, k as usize, mode)
        .map_err(Failure::internal)?
        .into_iter()
        .map(|e| ExemplarEntry {
            tokens: train.document(&e.doc_id).map(|d| d.words.clone()).unwrap_or_default(),
            doc_id: e.doc_id,
            distance: e.distance,
            top_spans: e.top_spans,
            attention: e.attention,
        })
        .collect();
    Ok(Json(PrototypesResponse { label, mode, exemplars }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelInfo {
    pub id: usize,
    pub name: String,
    pub train_freq: usize,
    pub val_roc_auc: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelsResponse {
    pub labels: Vec<LabelInfo>,
}

async fn labels(State(state): State<Arc<AppState>>) -> Json<LabelsResponse> {
    let m = &state.model;
    let labels = m
        .labels
        .iter()
        .enumerate()
        .map(|(id, name)| LabelInfo {
            id,
            name: name.clone(),
            train_freq: m.label_train_freq[id],
            val_roc_auc: m.label_val_roc_auc.get(id).copied().flatten(),
        })
        .collect();
    Json(LabelsResponse { labels })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct HealthResponse {
    pub model_hash: String,
    pub n_labels: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        model_hash: state.model_hash.clone(),
        n_labels: state.model.n_labels(),
    })
}

async fn not_found() -> Failure {
    Failure::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

/// The service routes. `allow_origins` enables CORS for those origins.
pub fn router(state: Arc<AppState>, allow_origins: &[String]) -> Result<Router, String> {
    let mut app = Router::new()
        .route("/predict", post(predict))
        .route("/prototypes/{label}", get(prototypes))
        .route("/labels", get(labels))
        .route("/health", get(health))
        .fallback(not_found)
        .with_state(state);
    if !allow_origins.is_empty() {
        let origins = allow_origins
            .iter()
            .map(|o| HeaderValue::from_str(o).map_err(|_| format!("invalid origin `{o}`")))
            .collect::<Result<Vec<_>, _>>()?;
        let cors = CorsLayer::new()
            .allow_origin(AllowOrigin::list(origins))
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([axum::http::header::CONTENT_TYPE]);
        app = app.layer(cors);
    }
    Ok(app)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, allow_origins: &[String]) -> std::io::Result<()> {
    let app = router(state, allow_origins).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
