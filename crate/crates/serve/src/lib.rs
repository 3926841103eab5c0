//! HTTP chat service: next-emotion prediction and reply generation over a
//! frozen checkpoint, plus the static files of the chat UI.

pub mod api;

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use anyhow::Context;
use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use empt_core::checkpoint;
use empt_core::decoder::{self, ReplyConditioning, SamplingParams};
use empt_core::input::Turn;
use empt_core::model::Params;
use empt_core::{Act, Emotion, Error, Topic, Vocab};
use tower_http::services::ServeDir;

use api::{ChatRequest, ChatResponse, ErrorBody, Meta, ModelInfo};

/// Request bodies beyond this are refused with 413.
pub const MAX_BODY_BYTES: usize = 1 << 20;

/// A loaded model. Shared read-only between requests.
pub struct Service {
    model: Params<f32>,
    vocab: Vocab,
    model_hash: String,
    defaults: SamplingParams,
    meta_json: Bytes,
}

impl Service {
    pub fn new(model: Params<f32>, vocab: Vocab, model_hash: String, step: u64, defaults: SamplingParams) -> Self {
        let config = model.config();
        let meta = Meta {
            emotions: Emotion::ALL.to_vec(),
            acts: Act::ALL.to_vec(),
            topics: Topic::ALL.to_vec(),
            sampling: defaults.clone(),
            model: ModelInfo {
                config_hash: config.hash(),
                model_hash: model_hash.clone(),
                n_layers: config.n_layers,
                d_model: config.d_model,
                vocab_size: config.vocab_size,
                max_positions: config.max_positions,
                step,
            },
        };
        let meta_json = Bytes::from(serde_json::to_vec(&meta).expect("meta serialises"));
        Self {
            model,
            vocab,
            model_hash,
            defaults,
            meta_json,
        }
    }

    /// Loads a checkpoint, its vocabulary and the file hash.
    pub fn load(ckpt: &Path, defaults: SamplingParams) -> empt_core::Result<Self> {
        let loaded = checkpoint::load(ckpt)?;
        let (vocab, _) = checkpoint::load_vocab(ckpt, &loaded.sidecar)?;
        let hash = checkpoint::file_sha256(ckpt)?;
        Ok(Self::new(loaded.params, vocab, hash, loaded.sidecar.step, defaults))
    }

    /// Predicts the next emotion, then samples a reply under it (or under
    /// `force_emotion`).
    pub fn chat(&self, req: &ChatRequest) -> empt_core::Result<ChatResponse> {
        let sampling = req.sampling.clone().unwrap_or_else(|| self.defaults.clone());
        sampling.validate()?;
        let history: Vec<Turn> = req
            .history
            .iter()
            .map(|t| Turn {
                speaker: t.speaker.speaker(),
                text: t.text.clone(),
                emotion: t.emotion,
                act: t.act,
            })
            .collect();
        let act = req.force_act.unwrap_or(Act::Inform);
        let scores = self.model.predict_emotion(&self.vocab, req.topic, &history, Some(act))?;
        let predicted = scores[0].emotion;
        let emotion = req.force_emotion.unwrap_or(predicted);
        let cond = ReplyConditioning {
            topic: req.topic,
            emotion: Some(emotion),
            act: Some(act),
        };
        let reply = decoder::generate(&self.model, &self.vocab, &history, cond, &sampling, 0)?;
        Ok(ChatResponse {
            reply: reply.text,
            predicted_emotion: predicted,
            emotion_scores: scores.iter().map(|s| (s.emotion, s.score)).collect(),
            emotion_used: emotion,
            act_used: act,
            token_count: reply.token_ids.len(),
            finished: reply.finished,
            model_hash: self.model_hash.clone(),
        })
    }
}

/// The service slot. Routes answer 503 until a model is installed.
#[derive(Default)]
pub struct AppState {
    service: OnceLock<Arc<Service>>,
}

impl AppState {
    pub fn loaded(service: Service) -> Arc<Self> {
        let state = Self::default();
        let _ = state.service.set(Arc::new(service));
        Arc::new(state)
    }

    /// Returns false if a model was already installed.
    pub fn install(&self, service: Service) -> bool {
        self.service.set(Arc::new(service)).is_ok()
    }

    fn get(&self) -> Result<Arc<Service>, ApiError> {
        self.service
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is not loaded yet", None))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                field,
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Overflow(_) => Self::new(StatusCode::PAYLOAD_TOO_LARGE, e.to_string(), Some("history".into())),
            Error::Config { ref field, .. } => {
                let field = field.clone();
                Self::new(StatusCode::BAD_REQUEST, e.to_string(), Some(field))
            }
            other => {
                log::error!("chat request failed: {other}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string(), None)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.status, serde_json::to_vec(&self.body).expect("error serialises").into())
    }
}

fn json_response(status: StatusCode, body: Bytes) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

/// Parses the body, reporting the path of the first offending field.
pub fn parse_request(body: &[u8]) -> Result<ChatRequest, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        ApiError::new(StatusCode::BAD_REQUEST, e.into_inner().to_string(), field)
    })
}

async fn chat(State(state): State<Arc<AppState>>, body: Body) -> Result<Response, ApiError> {
    let service = state.get()?;
    let bytes = axum::body::to_bytes(body, MAX_BODY_BYTES)
        .await
        .map_err(|_| ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "request body too large", None))?;
    let req = parse_request(&bytes)?;
    let out = tokio::task::spawn_blocking(move || service.chat(&req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None))??;
    let body = serde_json::to_vec(&out).expect("response serialises");
    Ok(json_response(StatusCode::OK, body.into()))
}

async fn meta(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    Ok(json_response(StatusCode::OK, state.get()?.meta_json.clone()))
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint", None)
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method not allowed", None)
}

/// `/api/chat`, `/api/meta`, and the files under `static_dir` for
/// everything else.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/chat", post(chat))
        .route("/meta", get(meta))
        .fallback(api_not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Binds `addr` and serves until ctrl-c. The model loads in the background;
/// requests get 503 until it is ready. A failed load stops the server.
pub async fn serve(addr: &str, ckpt: PathBuf, static_dir: Option<PathBuf>, defaults: SamplingParams) -> anyhow::Result<()> {
    let state = Arc::new(AppState::default());
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on {}", listener.local_addr()?);
    let (failed_tx, failed_rx) = tokio::sync::oneshot::channel();
    let loading = state.clone();
    tokio::task::spawn_blocking(move || match Service::load(&ckpt, defaults) {
        Ok(service) => {
            log::info!("model {} loaded from {}", service.model_hash, ckpt.display());
            loading.install(service);
        }
        Err(e) => {
            let _ = failed_tx.send(e);
        }
    });
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<Option<Error>>();
    tokio::spawn(async move {
        let reason = tokio::select! {
            _ = tokio::signal::ctrl_c() => None,
            Ok(e) = failed_rx => Some(e),
        };
        let _ = stop_tx.send(reason);
    });
    let (reason_tx, reason_rx) = tokio::sync::oneshot::channel();
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async move {
            let reason = stop_rx.await.unwrap_or(None);
            let _ = reason_tx.send(reason);
        })
        .await?;
    match reason_rx.await {
        Ok(Some(e)) => Err(anyhow::Error::new(e).context("loading the checkpoint")),
        _ => Ok(()),
    }
}
