//! HTTP API. Each handler delegates to one [`Engine`] operation on the
//! blocking pool.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use riskscope_core::case_model::CaseInput;
use riskscope_core::engine::{DatasetKind, Engine, EngineError, ErrorClass, Page};
use riskscope_core::eval::{Ablation, BenchmarkConfig, BenchmarkReport, GoldCase};
use riskscope_core::flywheel::{AnnotationRecord, ReviewDecision};
use riskscope_core::kb::{EntryKind, KbEntry, ReviewStatus};
use riskscope_core::rnr::Actor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::auth;

/// Page size used when a list request gives none, and the largest allowed.
pub const DEFAULT_LIMIT: usize = 50;
pub const MAX_LIMIT: usize = 500;

/// Actor used for every request while authentication is off.
pub const LOCAL_ACTOR: &str = "local";

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    /// HMAC secret for bearer tokens; `None` turns authentication off.
    pub auth_secret: Option<Arc<[u8]>>,
    /// Directory dataset exports are written to. Clients cannot choose it.
    pub export_dir: PathBuf,
    /// Most recent benchmark report, for the dashboard.
    latest_benchmark: Arc<Mutex<Option<BenchmarkReport>>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, auth_secret: Option<Vec<u8>>, export_dir: PathBuf) -> Self {
        Self {
            engine,
            auth_secret: auth_secret.map(Arc::from),
            export_dir,
            latest_benchmark: Arc::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "ValidationFailed", message)
    }
}

pub fn status_for(class: ErrorClass) -> StatusCode {
    match class {
        ErrorClass::Validation => StatusCode::BAD_REQUEST,
        ErrorClass::Unauthorized => StatusCode::FORBIDDEN,
        ErrorClass::NotFound => StatusCode::NOT_FOUND,
        ErrorClass::Conflict => StatusCode::CONFLICT,
        ErrorClass::Gateway => StatusCode::BAD_GATEWAY,
        ErrorClass::Embedder => StatusCode::SERVICE_UNAVAILABLE,
        ErrorClass::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        Self::new(status_for(e.class()), e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = %self.code, "{}", self.message);
        }
        let body = ErrorBody {
            error: self.code,
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body whose rejections come back as 400 with the error body.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(json_rejection(e)),
        }
    }
}

fn json_rejection(e: JsonRejection) -> ApiError {
    ApiError::bad_request(e.body_text())
}

/// Query string whose rejections come back as 400.
pub struct Params<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        match Query::<T>::from_request_parts(parts, state).await {
            Ok(Query(v)) => Ok(Params(v)),
            Err(e) => Err(query_rejection(e)),
        }
    }
}

fn query_rejection(e: QueryRejection) -> ApiError {
    ApiError::bad_request(e.body_text())
}

/// The authenticated caller. With authentication off every request acts as
/// an expert named [`LOCAL_ACTOR`].
pub struct Caller(pub Actor);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let Some(secret) = &state.auth_secret else {
            return Ok(Caller(Actor::expert(LOCAL_ACTOR)));
        };
        let unauthorized = |m: &str| ApiError::new(StatusCode::UNAUTHORIZED, "Unauthenticated", m);
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| unauthorized("missing bearer token"))?;
        auth::verify(secret, token.trim())
            .map(Caller)
            .map_err(|e| unauthorized(&e.to_string()))
    }
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, EngineError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "Internal",
            e.to_string(),
        )),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageParams {
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

impl PageParams {
    fn window(&self) -> ApiResult<(usize, usize)> {
        let limit = self.limit.unwrap_or(DEFAULT_LIMIT);
        if limit == 0 || limit > MAX_LIMIT {
            return Err(ApiError::bad_request(format!("limit must lie in 1..={MAX_LIMIT}")));
        }
        Ok((self.offset.unwrap_or(0), limit))
    }
}

async fn submit_case(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Body(case): Body<CaseInput>,
) -> ApiResult<impl IntoResponse> {
    let id = blocking(move || s.engine.submit_case(&actor, case)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "case_id": id }))))
}

async fn investigate(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.engine.investigate(&actor, &id)).await?))
}

async fn case_report(
    State(s): State<AppState>,
    Caller(_): Caller,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.engine.latest_report(&id)).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewBody {
    pub decision: ReviewDecision,
}

async fn review(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Path(id): Path<String>,
    Body(body): Body<ReviewBody>,
) -> ApiResult<impl IntoResponse> {
    let outcome = blocking(move || s.engine.review(&actor, &id, body.decision)).await?;
    Ok(Json(json!({ "outcome": outcome })))
}

async fn annotation_queue(
    State(s): State<AppState>,
    Caller(_): Caller,
    Params(p): Params<PageParams>,
) -> ApiResult<impl IntoResponse> {
    let (offset, limit) = p.window()?;
    Ok(Json(s.engine.annotation_queue(offset, limit)))
}

async fn annotate(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Body(record): Body<AnnotationRecord>,
) -> ApiResult<impl IntoResponse> {
    let engine = s.engine.clone();
    let case_id = record.case_id.clone();
    blocking(move || engine.annotate(&actor, record)).await?;
    let stored = s.engine.flywheel().annotation(&case_id);
    Ok((StatusCode::CREATED, Json(stored)))
}

async fn annotation(
    State(s): State<AppState>,
    Caller(_): Caller,
    Path(case_id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    s.engine.flywheel().annotation(&case_id).map(Json).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "NotFound",
            format!("no annotation for case {case_id}"),
        )
    })
}

async fn cot(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Path(case_id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || s.engine.synthesize_cot(&actor, &case_id)).await?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbListParams {
    pub kind: Option<EntryKind>,
    pub status: Option<ReviewStatus>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

async fn kb_entries(
    State(s): State<AppState>,
    Caller(_): Caller,
    Params(p): Params<KbListParams>,
) -> ApiResult<impl IntoResponse> {
    let (offset, limit) = PageParams {
        offset: p.offset,
        limit: p.limit,
    }
    .window()?;
    Ok(Json(s.engine.kb_entries(p.kind, p.status, offset, limit)))
}

async fn kb_upsert(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Body(entry): Body<KbEntry>,
) -> ApiResult<impl IntoResponse> {
    let id = blocking(move || s.engine.kb_upsert(&actor, entry)).await?;
    Ok(Json(json!({ "id": id })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbReviewBody {
    pub status: ReviewStatus,
}

async fn kb_review(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Path((kind, id)): Path<(String, String)>,
    Body(body): Body<KbReviewBody>,
) -> ApiResult<impl IntoResponse> {
    let kind: EntryKind = kind.parse().map_err(ApiError::bad_request)?;
    Ok(Json(
        blocking(move || s.engine.kb_review(&actor, kind, &id, body.status)).await?,
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateBody {
    pub desc: String,
}

async fn calibrate(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Path(id): Path<String>,
    Body(body): Body<CalibrateBody>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(
        blocking(move || s.engine.calibrate_pattern(&actor, &id, &body.desc)).await?,
    ))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowParams {
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

async fn acceptance(
    State(s): State<AppState>,
    Caller(_): Caller,
    Params(w): Params<WindowParams>,
) -> ApiResult<impl IntoResponse> {
    let reviews = s
        .engine
        .flywheel()
        .reviews()
        .into_iter()
        .filter(|r| w.from.is_none_or(|f| r.reviewed_at >= f) && w.to.is_none_or(|t| r.reviewed_at < t))
        .count();
    Ok(Json(json!({
        "acceptance_rate": s.engine.acceptance_rate(w.from, w.to),
        "reviews": reviews,
        "queue_depth": s.engine.flywheel().queue().len(),
        "from": w.from,
        "to": w.to,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkBody {
    pub gold: Vec<GoldCase>,
    #[serde(default)]
    pub ablation: Ablation,
    pub term_k: Option<usize>,
    pub pattern_k: Option<usize>,
}

async fn run_benchmark(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Body(body): Body<BenchmarkBody>,
) -> ApiResult<impl IntoResponse> {
    let settings = s.engine.settings();
    let config = BenchmarkConfig {
        ablation: body.ablation,
        term_k: body.term_k.unwrap_or(settings.term_k),
        pattern_k: body.pattern_k.unwrap_or(settings.pattern_k),
    };
    let engine = s.engine.clone();
    let report = blocking(move || engine.run_benchmark(&actor, &body.gold, config)).await?;
    *s.latest_benchmark.lock().unwrap_or_else(|p| p.into_inner()) = Some(report.clone());
    Ok(Json(report))
}

async fn latest_benchmark(State(s): State<AppState>, Caller(_): Caller) -> ApiResult<Json<BenchmarkReport>> {
    s.latest_benchmark
        .lock()
        .unwrap_or_else(|p| p.into_inner())
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no benchmark has run"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportParams {
    pub kind: String,
}

async fn export_dataset(
    State(s): State<AppState>,
    Caller(actor): Caller,
    Params(p): Params<ExportParams>,
) -> ApiResult<impl IntoResponse> {
    let kind: DatasetKind = p.kind.parse().map_err(ApiError::bad_request)?;
    let path = s.export_dir.join(format!("{}.jsonl", p.kind));
    let shown = path.display().to_string();
    let rows = blocking(move || s.engine.export_dataset(&actor, kind, &path)).await?;
    Ok(Json(json!({ "kind": kind, "rows": rows, "path": shown })))
}

async fn audit(
    State(s): State<AppState>,
    Caller(_): Caller,
    Params(p): Params<PageParams>,
) -> ApiResult<impl IntoResponse> {
    let (offset, limit) = p.window()?;
    Ok(Json(Page::of(s.engine.audit_log(), offset, limit)))
}

async fn kb_audit(
    State(s): State<AppState>,
    Caller(_): Caller,
    Params(p): Params<PageParams>,
) -> ApiResult<impl IntoResponse> {
    let (offset, limit) = p.window()?;
    let log = blocking(move || s.engine.kb().audit_log().map_err(EngineError::from)).await?;
    Ok(Json(Page::of(log, offset, limit)))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn openapi_doc() -> Json<Value> {
    Json(openapi())
}

/// One row of the endpoint table the router and the OpenAPI document share.
pub struct Endpoint {
    pub method: &'static str,
    pub path: &'static str,
    pub summary: &'static str,
    /// Whether the expert role is required.
    pub expert: bool,
}

const fn ep(method: &'static str, path: &'static str, summary: &'static str, expert: bool) -> Endpoint {
    Endpoint {
        method,
        path,
        summary,
        expert,
    }
}

pub const ENDPOINTS: &[Endpoint] = &[
    ep("post", "/cases", "Store a case", true),
    ep(
        "post",
        "/cases/{id}/investigate",
        "Draft then refine a case; returns the RefinedReport",
        true,
    ),
    ep("get", "/cases/{id}/report", "Latest RefinedReport of a case", false),
    ep(
        "post",
        "/reports/{id}/review",
        "Accept or reject a report; rejected cases are queued",
        true,
    ),
    ep(
        "get",
        "/annotation/queue",
        "Cases waiting for annotation (offset, limit)",
        false,
    ),
    ep("post", "/annotations", "Record an annotation for a queued case", true),
    ep("get", "/annotations/{case_id}", "Stored annotation of a case", false),
    ep(
        "post",
        "/cot/{case_id}",
        "Synthesize a reasoning sample from an annotation",
        true,
    ),
    ep(
        "get",
        "/kb/entries",
        "Knowledge entries (kind, status, offset, limit)",
        false,
    ),
    ep(
        "post",
        "/kb/entries",
        "Upsert a knowledge entry; business logic goes in as a hotfix",
        true,
    ),
    ep(
        "post",
        "/kb/entries/{kind}/{id}/review",
        "Set the review status of a knowledge entry",
        true,
    ),
    ep(
        "post",
        "/kb/patterns/{id}/calibrate",
        "Replace a risk pattern description",
        true,
    ),
    ep(
        "get",
        "/kb/audit",
        "Knowledge-base write history (offset, limit)",
        false,
    ),
    ep("get", "/metrics/acceptance", "Acceptance rate over [from, to)", false),
    ep("post", "/benchmark/run", "Run the benchmark over a gold set", true),
    ep("get", "/benchmark/latest", "Most recent benchmark report", false),
    ep(
        "post",
        "/datasets/export",
        "Write the sft or dpo dataset (kind); returns the row count",
        true,
    ),
    ep("get", "/audit", "Service audit log (offset, limit)", false),
    ep("get", "/health", "Liveness", false),
    ep("get", "/openapi.json", "This document", false),
];

pub fn openapi() -> Value {
    let mut paths = serde_json::Map::new();
    for e in ENDPOINTS {
        let params: Vec<Value> = e
            .path
            .split('/')
            .filter_map(|seg| seg.strip_prefix('{')?.strip_suffix('}'))
            .map(|name| json!({ "name": name, "in": "path", "required": true, "schema": { "type": "string" } }))
            .collect();
        let mut op = json!({
            "summary": e.summary,
            "parameters": params,
            "responses": {
                "200": { "description": "OK" },
                "400": { "description": "Validation failure" },
                "404": { "description": "Not found" },
            },
        });
        if e.expert {
            op["security"] = json!([{ "bearer": [] }]);
            op["x-required-role"] = json!("expert");
        }
        let item = paths.entry(e.path.to_string()).or_insert_with(|| json!({}));
        item[e.method] = op;
    }
    json!({
        "openapi": "3.0.3",
        "info": { "title": "riskscope", "version": env!("CARGO_PKG_VERSION") },
        "components": { "securitySchemes": { "bearer": { "type": "http", "scheme": "bearer" } } },
        "paths": paths,
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/cases", post(submit_case))
        .route("/cases/{id}/investigate", post(investigate))
        .route("/cases/{id}/report", get(case_report))
        .route("/reports/{id}/review", post(review))
        .route("/annotation/queue", get(annotation_queue))
        .route("/annotations", post(annotate))
        .route("/annotations/{case_id}", get(annotation))
        .route("/cot/{case_id}", post(cot))
        .route("/kb/entries", get(kb_entries).post(kb_upsert))
        .route("/kb/entries/{kind}/{id}/review", post(kb_review))
        .route("/kb/patterns/{id}/calibrate", post(calibrate))
        .route("/kb/audit", get(kb_audit))
        .route("/metrics/acceptance", get(acceptance))
        .route("/benchmark/run", post(run_benchmark))
        .route("/benchmark/latest", get(latest_benchmark))
        .route("/datasets/export", post(export_dataset))
        .route("/audit", get(audit))
        .route("/health", get(health))
        .route("/openapi.json", get(openapi_doc))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, listen: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn openapi_lists_every_endpoint() {
        let doc = openapi();
        for e in ENDPOINTS {
            assert!(doc["paths"][e.path][e.method].is_object(), "{} {}", e.method, e.path);
        }
        assert_eq!(doc["paths"]["/cases/{id}/report"]["get"]["parameters"][0]["name"], "id");
    }

    #[test]
    fn status_mapping() {
        assert_eq!(status_for(ErrorClass::Conflict), StatusCode::CONFLICT);
        assert_eq!(status_for(ErrorClass::Gateway), StatusCode::BAD_GATEWAY);
        assert_eq!(status_for(ErrorClass::Embedder), StatusCode::SERVICE_UNAVAILABLE);
    }
}
