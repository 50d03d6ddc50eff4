use std::convert::Infallible;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use kvserve_core::backend::{BackendError, Tokenizer};
use kvserve_core::scheduler::{Completion, EngineError, EngineEvent, FinishReason};
use kvserve_core::streaming::StreamDecoder;
use kvserve_core::{GenerationRequest, MediaItem, RequestId, Timestamp};
use serde_json::json;
use tokio::sync::mpsc::{self, UnboundedReceiver};

use crate::api::{
    ChatChunk, ChatRequest, ChatResponse, Choice, ChunkChoice, Delta, ErrorBody, ErrorDetail,
    ModelCard, ModelList, ResponseMessage, Role, Usage,
};
use crate::template::{media_source, render};
use crate::AppState;

pub(crate) const ARRIVAL_HEADER: &str = "x-engine-arrival-ms";
pub(crate) const FIRST_TOKEN_HEADER: &str = "x-engine-first-token-ms";
pub(crate) const FINISH_HEADER: &str = "x-engine-finish-ms";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request_error", message)
    }

    fn body(&self) -> ErrorBody {
        ErrorBody {
            error: ErrorDetail {
                message: self.message.clone(),
                kind: self.kind.to_string(),
                code: None,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::QueueFull | EngineError::ShuttingDown => StatusCode::SERVICE_UNAVAILABLE,
            EngineError::Invalid(_) | EngineError::Backend(BackendError::ContextOverflow { .. }) => {
                StatusCode::BAD_REQUEST
            }
            EngineError::Encoder { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let kind = if status == StatusCode::INTERNAL_SERVER_ERROR {
            "server_error"
        } else if status == StatusCode::SERVICE_UNAVAILABLE {
            "service_unavailable"
        } else {
            "invalid_request_error"
        };
        ApiError::new(status, kind, e.to_string())
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn completion_id(id: RequestId) -> String {
    format!("chatcmpl-{}", id.0)
}

fn ms_header(t: Timestamp) -> HeaderValue {
    HeaderValue::from_str(&format!("{:.3}", t.as_millis_f64())).expect("ascii number")
}

pub async fn list_models(State(state): State<AppState>) -> Json<ModelList> {
    Json(ModelList {
        object: "list".into(),
        data: vec![ModelCard {
            id: state.model().to_string(),
            object: "model".into(),
            created: 0,
            owned_by: "kvserve".into(),
        }],
    })
}

pub async fn cache_stats(State(state): State<AppState>) -> Json<serde_json::Value> {
    let s = state.engine().stats();
    let text = s.text_cache.map(|t| {
        json!({
            "hits": t.full_hits + t.partial_hits,
            "misses": t.misses,
            "evictions": t.evictions,
            "bytes_resident": t.bytes_resident,
            "byte_budget": t.byte_budget,
            "entries": t.entries,
            "full_hits": t.full_hits,
            "partial_hits": t.partial_hits,
            "rejected": t.rejected,
        })
    });
    let media = s.media_cache.map(|m| {
        json!({
            "hits": m.hits,
            "misses": m.misses,
            "evictions": m.evictions,
            "bytes_resident": m.bytes_resident,
            "byte_budget": m.byte_budget,
            "entries": m.entries,
            "kv_hits": m.kv_hits,
            "kv_misses": m.kv_misses,
            "rejected": m.rejected,
        })
    });
    Json(json!({
        "text_cache": text,
        "media_cache": media,
        "engine": {
            "queued": s.queued,
            "active": s.active,
            "steps": s.steps,
            "completed": s.completed,
            "failed": s.failed,
            "generated_tokens": s.generated_tokens,
            "clock_ms": s.clock_ms,
        },
    }))
}

pub async fn chat_completions(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: ChatRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))?;
    if req.messages.is_empty() {
        return Err(ApiError::bad_request("messages must not be empty"));
    }
    if req.model != state.model() {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "invalid_request_error",
            format!("model `{}` does not exist; this server runs `{}`", req.model, state.model()),
        ));
    }
    let engine = state.engine();
    if engine.is_shutting_down() {
        return Err(EngineError::ShuttingDown.into());
    }
    let max_tokens = req
        .max_completion_tokens
        .or(req.max_tokens)
        .unwrap_or(state.inner.default_max_tokens);
    if max_tokens == 0 {
        return Err(ApiError::bad_request("max_tokens must be at least 1"));
    }

    let tokenizer = state.inner.tokenizer;
    let prompt = render(&tokenizer, &req.messages);
    let sources = prompt
        .image_urls
        .iter()
        .map(|u| media_source(u, state.inner.allow_local_files))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let media = if sources.is_empty() {
        Vec::new()
    } else {
        let options = state.inner.decode.clone();
        tokio::task::spawn_blocking(move || {
            sources
                .into_iter()
                .map(|s| MediaItem::decode(s, &options))
                .collect::<Result<Vec<_>, _>>()
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "server_error", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request_error", e.to_string()))?
    };

    let id = engine.next_request_id();
    let mut request = GenerationRequest::text(id.0, prompt.tokens, max_tokens, tokenizer.eos())
        .with_media(media)
        .arriving_at(engine.now());
    request.ignore_eos = req.ignore_eos;
    request.stream = req.stream;
    let arrival = request.arrival_time;

    let (tx, mut rx) = mpsc::unbounded_channel();
    engine.submit(request, move |ev| tx.send(ev).is_ok())?;

    // Hold the response until the request is admitted, so early failures
    // still get a proper status code.
    let first = match rx.recv().await {
        Some(EngineEvent::Failed { error, .. }) => return Err(error.into()),
        Some(ev) => ev,
        None => return Err(EngineError::ShuttingDown.into()),
    };

    let meta = ResponseMeta {
        id: completion_id(id),
        created: unix_now(),
        model: state.model().to_string(),
    };
    if req.stream {
        Ok(stream_response(meta, tokenizer, arrival, first, rx))
    } else {
        let completion = await_completion(first, &mut rx).await?;
        Ok(json_response(meta, &tokenizer, completion))
    }
}

struct ResponseMeta {
    id: String,
    created: u64,
    model: String,
}

async fn await_completion(
    first: EngineEvent,
    rx: &mut UnboundedReceiver<EngineEvent>,
) -> Result<Completion, ApiError> {
    let mut next = Some(first);
    loop {
        match next {
            Some(EngineEvent::Finished(c)) => return Ok(c),
            Some(EngineEvent::Failed { error, .. }) => return Err(error.into()),
            Some(_) => {}
            None => return Err(EngineError::ShuttingDown.into()),
        }
        next = rx.recv().await;
    }
}

fn finish_reason(r: FinishReason) -> String {
    match r {
        FinishReason::Stop => "stop".into(),
        FinishReason::Length => "length".into(),
    }
}

fn json_response<T: Tokenizer>(meta: ResponseMeta, tokenizer: &T, c: Completion) -> Response {
    let content = tokenizer.decode(&c.output);
    let usage = Usage {
        prompt_tokens: c.prompt_positions,
        completion_tokens: c.output.len() as u64,
        total_tokens: c.prompt_positions + c.output.len() as u64,
    };
    let body = ChatResponse {
        id: meta.id,
        object: "chat.completion".into(),
        created: meta.created,
        model: meta.model,
        choices: vec![Choice {
            index: 0,
            message: ResponseMessage {
                role: Role::Assistant,
                content,
            },
            finish_reason: finish_reason(c.finish_reason),
        }],
        usage,
    };
    let mut headers = HeaderMap::new();
    headers.insert(ARRIVAL_HEADER, ms_header(c.timings.arrival));
    headers.insert(FIRST_TOKEN_HEADER, ms_header(c.timings.first_token));
    headers.insert(FINISH_HEADER, ms_header(c.timings.finished));
    (headers, Json(body)).into_response()
}

fn sse_frame<T: serde::Serialize>(payload: &T) -> Bytes {
    let json = serde_json::to_string(payload).expect("serializable payload");
    Bytes::from(format!("data: {json}\n\n"))
}

fn chunk(meta: &ResponseMeta, delta: Delta, finish: Option<String>) -> ChatChunk {
    ChatChunk {
        id: meta.id.clone(),
        object: "chat.completion.chunk".into(),
        created: meta.created,
        model: meta.model.clone(),
        choices: vec![ChunkChoice {
            index: 0,
            delta,
            finish_reason: finish,
        }],
    }
}

fn stream_response<T: Tokenizer + Send + 'static>(
    meta: ResponseMeta,
    tokenizer: T,
    arrival: Timestamp,
    first: EngineEvent,
    mut events: UnboundedReceiver<EngineEvent>,
) -> Response {
    let (out, frames) = mpsc::channel::<Bytes>(64);
    tokio::spawn(async move {
        let mut decoder = StreamDecoder::new(&tokenizer);
        let role = Delta {
            role: Some(Role::Assistant),
            content: None,
        };
        if out.send(sse_frame(&chunk(&meta, role, None))).await.is_err() {
            return;
        }
        let mut next = Some(first);
        while let Some(ev) = next {
            let frame = match ev {
                EngineEvent::Token { token, .. } => {
                    let text = decoder.push_token(token);
                    (!text.is_empty()).then(|| {
                        sse_frame(&chunk(&meta, Delta { role: None, content: Some(text) }, None))
                    })
                }
                EngineEvent::Finished(c) => {
                    let tail = decoder.finish();
                    if !tail.is_empty() {
                        let delta = Delta { role: None, content: Some(tail) };
                        if out.send(sse_frame(&chunk(&meta, delta, None))).await.is_err() {
                            return;
                        }
                    }
                    let done = chunk(&meta, Delta::default(), Some(finish_reason(c.finish_reason)));
                    let _ = out.send(sse_frame(&done)).await;
                    break;
                }
                EngineEvent::Failed { error, .. } => {
                    let _ = out.send(sse_frame(&ApiError::from(error).body())).await;
                    break;
                }
                EngineEvent::Admitted { .. } => None,
            };
            if let Some(frame) = frame {
                if out.send(frame).await.is_err() {
                    return;
                }
            }
            next = events.recv().await;
        }
        let _ = out.send(Bytes::from_static(b"data: [DONE]\n\n")).await;
    });

    let body = Body::from_stream(futures::stream::unfold(frames, |mut rx| async move {
        rx.recv().await.map(|b| (Ok::<_, Infallible>(b), rx))
    }));
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .header(ARRIVAL_HEADER, ms_header(arrival))
        .body(body)
        .expect("valid response")
}
