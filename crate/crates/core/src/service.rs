// SPDX-License-Identifier: MIT OR Apache-2.0

//! Read-only HTTP API over a loaded checkpoint and search index.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query as UrlQuery, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::apps::{
    bias_sweep, top_named, Classifier, Edit, ManipulationRequest, ManipulationResult, NamedActivation, Query,
    ReturnSpace, SearchHit, SearchIndex, SearchSpace,
};
use crate::concepts::ConceptAssignment;
use crate::error::{MsaeError, Result};
use crate::metrics::ProbeModel;

/// Everything the handlers read. Never mutated after construction.
#[derive(Debug)]
pub struct ServiceState {
    index: SearchIndex,
    concepts: Vec<ConceptAssignment>,
    probe: Option<ProbeModel>,
}

impl ServiceState {
    pub fn new(index: SearchIndex, concepts: Vec<ConceptAssignment>, probe: Option<ProbeModel>) -> Result<Self> {
        let d = index.checkpoint().config.d;
        if !concepts.is_empty() && (concepts.len() != d || concepts.iter().enumerate().any(|(i, a)| a.neuron != i)) {
            return Err(MsaeError::Validation(format!("concept assignments must list neurons 0..{d} in order")));
        }
        if let Some(p) = &probe {
            if p.dim() != index.checkpoint().config.n {
                return Err(MsaeError::Shape(format!("probe dimension {} but model n={}", p.dim(), index.checkpoint().config.n)));
            }
        }
        Ok(Self { index, concepts, probe })
    }

    pub fn index(&self) -> &SearchIndex {
        &self.index
    }

    fn names(&self) -> Option<&[ConceptAssignment]> {
        (!self.concepts.is_empty()).then_some(self.concepts.as_slice())
    }

    /// Top activations labelled with concept names where the neuron has a
    /// valid assignment.
    fn labelled(&self, z: ndarray::ArrayView1<'_, f64>, c: usize) -> Vec<NamedActivation> {
        let mut out = top_named(z, c, None);
        if let Some(names) = self.names() {
            for a in &mut out {
                a.concept = names.get(a.neuron).filter(|x| x.valid).map(|x| x.concept.clone());
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }
}

impl From<MsaeError> for ApiError {
    fn from(e: MsaeError) -> Self {
        let status = match &e {
            MsaeError::NotFound(_) => StatusCode::NOT_FOUND,
            MsaeError::Shape(_) => StatusCode::UNPROCESSABLE_ENTITY,
            MsaeError::InvalidArgument(_) | MsaeError::Validation(_) | MsaeError::NonFinite(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "status": self.status.as_u16() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;
type Shared = Arc<ServiceState>;

/// Any body that fails to parse is a 400, whatever the reason.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn blocking<T, F>(f: F) -> std::result::Result<T, ApiError>
where
    F: FnOnce() -> std::result::Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() })?
}

async fn health(State(s): State<Shared>) -> Json<Value> {
    let ck = s.index.checkpoint();
    Json(json!({
        "status": "ok",
        "model": {
            "variant": ck.config.variant,
            "n": ck.config.n,
            "d": ck.config.d,
            "softcap": ck.config.softcap,
            "train_modality": ck.train_modality,
        },
        "index": { "samples": s.index.len(), "modality": s.index.modality() },
        "concepts": { "total": s.concepts.len(), "valid": s.concepts.iter().filter(|a| a.valid).count() },
        "probe": s.probe.as_ref().map(|p| p.classes()),
    }))
}

#[derive(Debug, Deserialize)]
struct ConceptsParams {
    #[serde(default)]
    valid_only: bool,
}

async fn concepts(State(s): State<Shared>, UrlQuery(p): UrlQuery<ConceptsParams>) -> Json<Vec<ConceptAssignment>> {
    Json(s.concepts.iter().filter(|a| !p.valid_only || a.valid).cloned().collect())
}

#[derive(Debug, Deserialize)]
struct ActivationParams {
    top: Option<usize>,
    #[serde(default)]
    named_only: bool,
}

#[derive(Debug, Serialize)]
struct ActivationsResponse {
    id: String,
    activations: Vec<NamedActivation>,
}

async fn sample_activations(
    State(s): State<Shared>,
    Path(id): Path<String>,
    UrlQuery(p): UrlQuery<ActivationParams>,
) -> ApiResult<ActivationsResponse> {
    let top = p.top.unwrap_or(10);
    let activations = if p.named_only {
        s.index.top_activations(&id, top, Some(&s.concepts))?
    } else {
        let i = s.index.position(&id)?;
        s.labelled(s.index.activations(i), top)
    };
    Ok(Json(ActivationsResponse { id, activations }))
}

fn source(query_id: Option<String>, sample: Option<String>, vector: Option<Vec<f64>>) -> std::result::Result<Query, ApiError> {
    match (query_id.or(sample), vector) {
        (Some(id), None) => Ok(Query::Sample(id)),
        (None, Some(v)) => Ok(Query::Vector(v)),
        _ => Err(ApiError::bad_request("give exactly one of a sample id or a vector")),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchBody {
    #[serde(default)]
    query_id: Option<String>,
    #[serde(default)]
    sample: Option<String>,
    #[serde(default)]
    vector: Option<Vec<f64>>,
    #[serde(default = "default_space")]
    space: SearchSpace,
    #[serde(default = "default_t")]
    t: usize,
}

fn default_space() -> SearchSpace {
    SearchSpace::Embedding
}

fn default_t() -> usize {
    10
}

#[derive(Debug, Serialize)]
struct SearchResponse {
    space: SearchSpace,
    hits: Vec<SearchHit>,
}

async fn search(State(s): State<Shared>, body: Bytes) -> ApiResult<SearchResponse> {
    let req: SearchBody = parse_body(&body)?;
    let query = source(req.query_id, req.sample, req.vector)?;
    blocking(move || {
        let hits = s.index.search(&query, req.space, req.t)?;
        Ok(Json(SearchResponse { space: req.space, hits }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManipulateBody {
    #[serde(default)]
    query_id: Option<String>,
    #[serde(default)]
    sample: Option<String>,
    #[serde(default)]
    vector: Option<Vec<f64>>,
    #[serde(default)]
    edits: Vec<Edit>,
    #[serde(default)]
    return_space: ReturnSpace,
    /// Number of top activations to report for the edited vector.
    #[serde(default)]
    top: Option<usize>,
    /// Also search the edited raw vector in embedding space.
    #[serde(default)]
    search: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ManipulateResponse {
    #[serde(flatten)]
    result: ManipulationResult,
    top_activations: Vec<NamedActivation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    neighbors: Option<Vec<SearchHit>>,
}

async fn manipulate(State(s): State<Shared>, body: Bytes) -> ApiResult<ManipulateResponse> {
    let mut req: ManipulateBody = parse_body(&body)?;
    let source = source(req.query_id.take(), req.sample.take(), req.vector.take())?;
    blocking(move || {
        let result = s.index.manipulate(&ManipulationRequest { source, edits: req.edits, return_space: req.return_space })?;
        let top_activations = s.labelled(ndarray::ArrayView1::from(&result.edited_activations), req.top.unwrap_or(10));
        let neighbors = req
            .search
            .map(|t| s.index.search(&Query::Vector(result.edited_raw.clone()), SearchSpace::Embedding, t))
            .transpose()?;
        Ok(Json(ManipulateResponse { result, top_activations, neighbors }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepBody {
    neuron: usize,
    magnitudes: Vec<f64>,
    #[serde(default)]
    query_id: Option<String>,
    #[serde(default)]
    sample: Option<String>,
    #[serde(default)]
    vector: Option<Vec<f64>>,
    #[serde(default)]
    classifier: Option<Classifier>,
    /// Class scored by the server's probe when no classifier is given.
    #[serde(default)]
    class: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SweepResponse {
    neuron: usize,
    magnitudes: Vec<f64>,
    probabilities: Vec<f64>,
    plateau: bool,
    plateau_start: Option<usize>,
}

async fn sweep(State(s): State<Shared>, body: Bytes) -> ApiResult<SweepResponse> {
    let mut req: SweepBody = parse_body(&body)?;
    let source = source(req.query_id.take(), req.sample.take(), req.vector.take())?;
    let clf = match (req.classifier, &s.probe) {
        (Some(c), _) => c,
        (None, Some(p)) => Classifier::Probe { model: p.clone(), class: req.class.unwrap_or(0) },
        (None, None) => return Err(ApiError::bad_request("no classifier given and the server has no probe loaded")),
    };
    if req.neuron >= s.index.checkpoint().config.d {
        return Err(MsaeError::NotFound(format!("neuron {}", req.neuron)).into());
    }
    blocking(move || {
        let mut sw = bias_sweep(&s.index, &clf, &[source], req.neuron, &req.magnitudes)?;
        Ok(Json(SweepResponse {
            neuron: sw.neuron,
            magnitudes: sw.magnitudes,
            probabilities: sw.probabilities.pop().unwrap_or_default(),
            plateau: sw.plateau[0],
            plateau_start: sw.plateau_start[0],
        }))
    })
    .await
}

async fn openapi() -> Json<Value> {
    Json(openapi_document())
}

/// OpenAPI 3 description of the routes.
pub fn openapi_document() -> Value {
    let err = json!({ "description": "error", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } });
    let ok = |schema: &str| json!({ "description": "ok", "content": { "application/json": { "schema": { "$ref": format!("#/components/schemas/{schema}") } } } });
    let body = |schema: &str| json!({ "required": true, "content": { "application/json": { "schema": { "$ref": format!("#/components/schemas/{schema}") } } } });
    json!({
        "openapi": "3.0.3",
        "info": { "title": "msae", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/health": { "get": { "summary": "Status and model summary", "responses": { "200": { "description": "ok" } } } },
            "/concepts": { "get": {
                "summary": "Concept assignments",
                "parameters": [{ "name": "valid_only", "in": "query", "schema": { "type": "boolean" } }],
                "responses": { "200": { "description": "ok", "content": { "application/json": { "schema": { "type": "array", "items": { "$ref": "#/components/schemas/ConceptAssignment" } } } } } }
            } },
            "/samples/{id}/activations": { "get": {
                "summary": "Top activations of an indexed sample",
                "parameters": [
                    { "name": "id", "in": "path", "required": true, "schema": { "type": "string" } },
                    { "name": "top", "in": "query", "schema": { "type": "integer", "minimum": 0 } },
                    { "name": "named_only", "in": "query", "schema": { "type": "boolean" } }
                ],
                "responses": { "200": ok("Activations"), "404": err }
            } },
            "/search": { "post": { "summary": "Nearest neighbours", "requestBody": body("SearchRequest"),
                "responses": { "200": ok("SearchResponse"), "400": err, "404": err, "422": err } } },
            "/manipulate": { "post": { "summary": "Edit latent magnitudes", "requestBody": body("ManipulateRequest"),
                "responses": { "200": ok("ManipulateResponse"), "400": err, "404": err, "422": err, "500": err } } },
            "/sweep": { "post": { "summary": "Classifier probability over a magnitude grid", "requestBody": body("SweepRequest"),
                "responses": { "200": ok("SweepResponse"), "400": err, "404": err, "422": err, "500": err } } },
            "/spec": { "get": { "summary": "This document", "responses": { "200": { "description": "ok" } } } }
        },
        "components": { "schemas": {
            "Error": { "type": "object", "properties": { "error": { "type": "string" }, "status": { "type": "integer" } } },
            "Vector": { "type": "array", "items": { "type": "number" } },
            "NamedActivation": { "type": "object", "properties": {
                "neuron": { "type": "integer" }, "concept": { "type": "string", "nullable": true }, "activation": { "type": "number" } } },
            "Activations": { "type": "object", "properties": {
                "id": { "type": "string" }, "activations": { "type": "array", "items": { "$ref": "#/components/schemas/NamedActivation" } } } },
            "ConceptAssignment": { "type": "object", "properties": {
                "neuron": { "type": "integer" }, "concept": { "type": "string" }, "concept_index": { "type": "integer" },
                "similarity": { "type": "number" }, "second_concept": { "type": "string" }, "second_similarity": { "type": "number" },
                "ratio": { "type": "number", "nullable": true }, "passes_sim": { "type": "boolean" }, "passes_ratio": { "type": "boolean" },
                "is_best_for_concept": { "type": "boolean" }, "valid": { "type": "boolean" } } },
            "SearchHit": { "type": "object", "properties": {
                "index": { "type": "integer" }, "id": { "type": "string" }, "score": { "type": "number" } } },
            "SearchRequest": { "type": "object", "properties": {
                "query_id": { "type": "string" }, "vector": { "$ref": "#/components/schemas/Vector" },
                "space": { "type": "string", "enum": ["embedding", "activation"] }, "t": { "type": "integer" } } },
            "SearchResponse": { "type": "object", "properties": {
                "space": { "type": "string" }, "hits": { "type": "array", "items": { "$ref": "#/components/schemas/SearchHit" } } } },
            "Edit": { "type": "object", "required": ["neuron", "magnitude"], "properties": {
                "neuron": { "type": "integer" }, "magnitude": { "type": "number", "minimum": 0 } } },
            "ManipulateRequest": { "type": "object", "properties": {
                "sample": { "type": "string" }, "vector": { "$ref": "#/components/schemas/Vector" },
                "edits": { "type": "array", "items": { "$ref": "#/components/schemas/Edit" } },
                "return_space": { "type": "string", "enum": ["raw", "activation"] },
                "top": { "type": "integer" }, "search": { "type": "integer" } } },
            "ManipulateResponse": { "type": "object", "properties": {
                "vector": { "$ref": "#/components/schemas/Vector" }, "return_space": { "type": "string" },
                "edited_raw": { "$ref": "#/components/schemas/Vector" }, "edited_activations": { "$ref": "#/components/schemas/Vector" },
                "reconstruction_raw": { "$ref": "#/components/schemas/Vector" },
                "displacement": { "type": "number" }, "distance_to_input": { "type": "number" },
                "top_activations": { "type": "array", "items": { "$ref": "#/components/schemas/NamedActivation" } },
                "neighbors": { "type": "array", "items": { "$ref": "#/components/schemas/SearchHit" } } } },
            "SweepRequest": { "type": "object", "required": ["neuron", "magnitudes"], "properties": {
                "neuron": { "type": "integer" }, "magnitudes": { "$ref": "#/components/schemas/Vector" },
                "sample": { "type": "string" }, "vector": { "$ref": "#/components/schemas/Vector" },
                "classifier": { "type": "object" }, "class": { "type": "integer" } } },
            "SweepResponse": { "type": "object", "properties": {
                "neuron": { "type": "integer" }, "magnitudes": { "$ref": "#/components/schemas/Vector" },
                "probabilities": { "$ref": "#/components/schemas/Vector" },
                "plateau": { "type": "boolean" }, "plateau_start": { "type": "integer", "nullable": true } } }
        } }
    })
}

fn cors_layer(origins: &[String]) -> Result<CorsLayer> {
    let layer = CorsLayer::new().allow_methods([Method::GET, Method::POST]).allow_headers([header::CONTENT_TYPE]);
    if origins.is_empty() {
        return Ok(layer.allow_origin(Any));
    }
    let values = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| MsaeError::InvalidArgument(format!("bad CORS origin {o:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(layer.allow_origin(AllowOrigin::list(values)))
}

/// The application router. An empty origin list allows any origin.
pub fn router(state: Arc<ServiceState>, cors_origins: &[String]) -> Result<Router> {
    Ok(Router::new()
        .route("/health", get(health))
        .route("/concepts", get(concepts))
        .route("/samples/{id}/activations", get(sample_activations))
        .route("/search", post(search))
        .route("/manipulate", post(manipulate))
        .route("/sweep", post(sweep))
        .route("/spec", get(openapi))
        .layer(cors_layer(cors_origins)?)
        .with_state(state))
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: ServiceState, addr: SocketAddr, cors_origins: Vec<String>) -> Result<()> {
    let app = router(Arc::new(state), &cors_origins)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| MsaeError::io(addr.to_string(), e))?;
    let local = listener.local_addr().map_err(|e| MsaeError::io(addr.to_string(), e))?;
    eprintln!("listening on http://{local}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| MsaeError::io(local.to_string(), e))
}

pub fn serve_blocking(state: ServiceState, addr: SocketAddr, cors_origins: Vec<String>) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| MsaeError::io("<tokio runtime>", e))?;
    rt.block_on(serve(state, addr, cors_origins))
}
