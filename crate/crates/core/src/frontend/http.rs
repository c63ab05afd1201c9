use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::task::JoinSet;

use super::{Frontend, FrontendConfig, FrontendError, PredictionRequest, RegisterRequest};

fn error_json(e: &FrontendError) -> serde_json::Value {
    json!({ "error": e.to_string(), "status": e.status() })
}

impl IntoResponse for FrontendError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(error_json(&self))).into_response()
    }
}

/// Routes: `POST /predict` (NDJSON), `POST /admin/register`, `GET /admin/plans`,
/// `GET /metrics`, `GET /healthz`.
pub fn router(frontend: Arc<Frontend>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/admin/register", post(register))
        .route("/admin/plans", get(plans))
        .route("/metrics", get(metrics))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(frontend)
}

/// One request per body line, answered by one response line each, in order. The
/// status is that of the first failed line, or 200.
async fn predict(State(fe): State<Arc<Frontend>>, body: String) -> Response {
    let mut set = JoinSet::new();
    let mut n = 0;
    for (i, line) in body.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        n += 1;
        let parsed: Result<PredictionRequest, _> = serde_json::from_str(line);
        let fe = fe.clone();
        set.spawn(async move {
            let r = match parsed {
                Ok(req) => fe.predict(req).await,
                Err(e) => Err(FrontendError::BadRequest(format!("line {}: {e}", i + 1))),
            };
            (i, r)
        });
    }
    if n == 0 {
        return FrontendError::BadRequest("empty body".into()).into_response();
    }
    let mut results: Vec<Option<_>> = (0..n).map(|_| None).collect();
    while let Some(done) = set.join_next().await {
        match done {
            Ok((i, r)) => results[i] = Some(r),
            Err(e) => return FrontendError::Internal(e.to_string()).into_response(),
        }
    }
    let mut status = StatusCode::OK;
    let mut out = String::new();
    for r in results.into_iter().map(|r| r.expect("joined")) {
        let v = match r {
            Ok(resp) => serde_json::to_value(resp).expect("response serializes"),
            Err(e) => {
                if status == StatusCode::OK {
                    status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
                }
                error_json(&e)
            }
        };
        out.push_str(&v.to_string());
        out.push('\n');
    }
    (status, [(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response()
}

async fn register(State(fe): State<Arc<Frontend>>, Json(req): Json<RegisterRequest>) -> Response {
    let res = tokio::task::spawn_blocking(move || fe.register_bundle(&req.path, req.reserve)).await;
    match res {
        Ok(Ok(info)) => Json(info).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => FrontendError::Internal(e.to_string()).into_response(),
    }
}

async fn plans(State(fe): State<Arc<Frontend>>) -> Response {
    Json(fe.plans()).into_response()
}

async fn metrics(State(fe): State<Arc<Frontend>>) -> Response {
    Json(fe.metrics()).into_response()
}

/// Runs the service until the process exits. HTTP handling uses its own
/// `frontend_threads`, disjoint from the executor workers.
pub fn serve(config: FrontendConfig) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(config.frontend_threads.max(1))
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let fe = Frontend::from_config(&config).map_err(std::io::Error::other)?;
        let listener = tokio::net::TcpListener::bind(config.listen).await?;
        eprintln!(
            "listening on {} with {} plans",
            listener.local_addr()?,
            fe.plans().len()
        );
        axum::serve(listener, router(Arc::new(fe))).await
    })
}
