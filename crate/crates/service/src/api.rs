use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use rand::seq::IndexedRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use wheelgen_core::conditioning::Provenance;
use wheelgen_core::exemplars::{AnnotationTask, Dataset};
use wheelgen_core::request::{normalize_keyword, validate_service_limits, Violation};
use wheelgen_core::{Error, FeedbackDelta, GenerationRecord, GenerationRequest, ImageRef, ImageTensor};

use crate::annotation::{Round, VoteError, DEFAULT_PERCENTILE, DEFAULT_QUORUM};
use crate::fsutil::valid_id;
use crate::jobs::Job;
use crate::{image_url, AppState};

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/generate", post(generate))
        .route("/jobs/{id}", get(get_job))
        .route("/generations/{id}", get(get_generation).delete(delete_generation))
        .route("/generations/{id}/lineage", get(lineage))
        .route("/generations/{id}/feedback", post(feedback))
        .route("/generations/{id}/replay", post(replay))
        .route("/images", post(upload_image))
        .route("/images/{sha}", get(get_image))
        .route("/backends", get(backends))
        .route("/keywords", get(keywords))
        .route("/keywords/{kw}/exemplars", get(keyword_exemplars))
        .route("/exemplars/{id}/image", get(exemplar_image))
        .route("/annotation", post(create_annotation))
        .route("/annotation/{task}", get(get_annotation))
        .route("/annotation/{task}/votes", post(vote))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    violations: Vec<Violation>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn invalid(violations: Vec<Violation>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: "request failed validation".into(),
            violations,
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid(v) => Self::invalid(v),
            Error::Reference(m) => Self::new(StatusCode::CONFLICT, m),
            Error::Param(_) | Error::VoteRejected(_) | Error::EmptySet(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
            }
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if !self.violations.is_empty() {
            body["violations"] = json!(self.violations);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

// ---- sessions and jobs

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct NewSession {
    #[serde(default)]
    name: Option<String>,
}

async fn create_session(State(s): State<Shared>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: NewSession = if body.iter().all(u8::is_ascii_whitespace) {
        NewSession::default()
    } else {
        parse(&body)?
    };
    let session = s.sessions.create(req.name).map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = s.sessions.get(&id).ok_or_else(|| ApiError::not_found(format!("session {id} not found")))?;
    let jobs: Vec<String> = s.jobs.for_session(&id).into_iter().map(|j| j.id).collect();
    Ok(Json(json!({ "session": session, "jobs": jobs })))
}

fn accepted(job: &Job) -> (StatusCode, Json<Value>) {
    (
        StatusCode::ACCEPTED,
        Json(json!({ "job_id": job.id, "state": job.state, "url": format!("/jobs/{}", job.id) })),
    )
}

/// Deployment checks, service limits and image availability, all reported together.
fn admit(s: &AppState, req: &GenerationRequest) -> ApiResult<GenerationRequest> {
    let mut violations = validate_service_limits(req);
    let normalized = match s.generator.check(req) {
        Ok(r) => Some(r),
        Err(Error::Invalid(v)) => {
            violations.extend(v);
            None
        }
        Err(e) => return Err(e.into()),
    };
    let mut refs: Vec<(String, &ImageRef)> = Vec::new();
    refs.extend(req.sketch.iter().map(|r| ("sketch".to_string(), r)));
    refs.extend(req.template.iter().map(|r| ("template".to_string(), r)));
    for (i, g) in req.concepts.iter().enumerate() {
        for (j, insp) in g.inspirations.iter().enumerate() {
            refs.push((format!("concepts[{i}].inspirations[{j}].image"), &insp.image));
        }
    }
    for (field, r) in refs {
        if s.generator.images().png_bytes(&r.sha256).is_err() {
            violations.push(Violation::new(field, format!("image {} is not in the image store", r.sha256)));
        }
    }
    match normalized {
        Some(r) if violations.is_empty() => Ok(r),
        _ => Err(ApiError::invalid(violations)),
    }
}

async fn generate(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    if s.sessions.get(&id).is_none() {
        return Err(ApiError::not_found(format!("session {id} not found")));
    }
    let mut value: Value = parse(&body)?;
    if let Some(obj) = value.as_object_mut() {
        let missing = obj.get("backend_id").and_then(Value::as_str).is_none_or(|b| b.trim().is_empty());
        if missing {
            obj.insert("backend_id".into(), Value::String(s.default_backend.clone()));
        }
    }
    let req: GenerationRequest = serde_json::from_value(value)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))?;
    blocking(move || {
        let req = admit(&s, &req)?;
        let job = s.jobs.submit(Job::new(req, Some(id), None)).map_err(ApiError::internal)?;
        Ok(accepted(&job))
    })
    .await
}

async fn get_job(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    s.jobs.get(&id).map(Json).ok_or_else(|| ApiError::not_found(format!("job {id} not found")))
}

// ---- generations

fn record(s: &AppState, id: &str) -> ApiResult<GenerationRecord> {
    s.records.get(id).ok_or_else(|| ApiError::not_found(format!("record {id} not found")))
}

#[derive(Serialize)]
struct RecordView {
    #[serde(flatten)]
    record: GenerationRecord,
    output_urls: Vec<String>,
}

async fn get_generation(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<RecordView>> {
    let record = record(&s, &id)?;
    let output_urls = record.outputs.iter().map(|o| image_url(&o.sha256)).collect();
    Ok(Json(RecordView { record, output_urls }))
}

async fn delete_generation(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    record(&s, &id)?;
    match s.records.delete(&id) {
        Ok(_) => Ok(StatusCode::NO_CONTENT),
        Err(Error::Reference(m)) => Err(ApiError::not_found(m)),
        Err(Error::Param(m)) => Err(ApiError::new(StatusCode::CONFLICT, m)),
        Err(e) => Err(ApiError::internal(e)),
    }
}

#[derive(Serialize)]
struct LineageEntry {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    parent_id: Option<String>,
    created_at: DateTime<Utc>,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    feedback: Option<FeedbackDelta>,
    exemplar_ids: Vec<String>,
    resolved_conditioning: Provenance,
    output_urls: Vec<String>,
}

async fn lineage(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    record(&s, &id)?;
    let chain = s.records.lineage(&id).map_err(ApiError::internal)?;
    let entries: Vec<LineageEntry> = chain
        .into_iter()
        .map(|r| LineageEntry {
            exemplar_ids: r.resolved_conditioning.exemplar_ids(),
            output_urls: r.outputs.iter().map(|o| image_url(&o.sha256)).collect(),
            id: r.id,
            parent_id: r.parent_id,
            created_at: r.created_at,
            seed: r.request.seed,
            feedback: r.feedback,
            resolved_conditioning: r.resolved_conditioning,
        })
        .collect();
    Ok(Json(json!({ "record_id": id, "chain": entries })))
}

async fn feedback(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    record(&s, &id)?;
    let delta: FeedbackDelta = if body.iter().all(u8::is_ascii_whitespace) {
        FeedbackDelta::default()
    } else {
        parse(&body)?
    };
    blocking(move || {
        let child = match s.generator.child_request(&s.records, &id, &delta, &mut rand::rng()) {
            Ok(c) => c,
            Err(Error::Reference(m)) if !s.records.contains(&id) => return Err(ApiError::not_found(m)),
            Err(e) => return Err(e.into()),
        };
        let child = admit(&s, &child)?;
        let job = s.jobs.submit(Job::new(child, None, Some((id, delta)))).map_err(ApiError::internal)?;
        Ok(accepted(&job))
    })
    .await
}

async fn replay(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let rec = record(&s, &id)?;
    blocking(move || {
        let identical = s.generator.verify_replay(&rec)?;
        Ok(Json(json!({ "record_id": rec.id, "identical": identical })))
    })
    .await
}

// ---- images

async fn upload_image(State(s): State<Shared>, body: Bytes) -> ApiResult<impl IntoResponse> {
    blocking(move || {
        let img = ImageTensor::from_encoded(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("not a decodable image: {e}")))?;
        let r = s.generator.images().put(&img)?;
        let url = image_url(&r.sha256);
        Ok((StatusCode::CREATED, Json(json!({ "image": r, "url": url }))))
    })
    .await
}

fn png(bytes: Vec<u8>, etag: &str) -> Response {
    (
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable".to_string()),
            (header::ETAG, format!("\"{etag}\"")),
        ],
        bytes,
    )
        .into_response()
}

async fn get_image(State(s): State<Shared>, Path(sha): Path<String>) -> ApiResult<Response> {
    let sha = sha.trim_end_matches(".png").to_ascii_lowercase();
    match s.generator.images().png_bytes(&sha) {
        Ok(bytes) => Ok(png(bytes, &sha)),
        Err(_) => Err(ApiError::not_found(format!("image {sha} not found"))),
    }
}

async fn backends(State(s): State<Shared>) -> Json<Value> {
    let list: Vec<Value> = s
        .generator
        .backends()
        .ids()
        .map(|id| json!({ "id": id, "default": id == s.default_backend }))
        .collect();
    Json(json!({ "canvas": s.generator.canvas(), "backends": list }))
}

// ---- keywords and annotation

async fn keywords(State(s): State<Shared>) -> Json<Value> {
    let store = s.generator.exemplars();
    let list: Vec<Value> = store
        .keywords()
        .into_iter()
        .map(|(kw, n)| {
            let set = store.exemplar_set(&kw);
            json!({ "keyword": kw, "images": n, "exemplars": set.map_or(0, |s| s.wheel_ids.len()) })
        })
        .collect();
    Json(json!({ "keywords": list }))
}

async fn keyword_exemplars(State(s): State<Shared>, Path(kw): Path<String>) -> ApiResult<Json<Value>> {
    let kw = normalize_keyword(&kw);
    let store = s.generator.exemplars();
    if let Some(set) = store.exemplar_set(&kw) {
        let members: Vec<Value> = set
            .wheel_ids
            .iter()
            .map(|id| {
                let votes = store.entry(id).and_then(|e| e.votes.get(&kw)).copied().unwrap_or(0);
                json!({ "id": id, "votes": votes, "image_url": format!("/exemplars/{id}/image") })
            })
            .collect();
        return Ok(Json(json!({
            "keyword": kw,
            "below_quorum": false,
            "exemplars": members,
            "threshold_votes": set.threshold_votes,
            "percentile": set.percentile,
        })));
    }
    let rounds = s.annotations.for_keyword(&kw);
    if rounds.is_empty() && !store.keywords().contains_key(&kw) {
        return Err(ApiError::not_found(format!("keyword `{kw}` is unknown")));
    }
    let explanation = match rounds.iter().max_by_key(|r| r.votes.rater_count) {
        Some(r) => format!(
            "annotation task `{}` has {} of the {} raters it needs before aggregation",
            r.task.id, r.votes.rater_count, r.quorum
        ),
        None => format!("no annotation task exists for `{kw}`"),
    };
    Ok(Json(json!({
        "keyword": kw,
        "below_quorum": true,
        "exemplars": [],
        "explanation": explanation,
    })))
}

async fn exemplar_image(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let img = s.generator.exemplars().image(&id).map_err(|_| ApiError::not_found(format!("exemplar {id} not found")))?;
    Ok(png(img.to_png()?, &id))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewRound {
    #[serde(default)]
    id: Option<String>,
    keyword: String,
    #[serde(default)]
    candidates: Option<Vec<String>>,
    #[serde(default)]
    selections_per_rater: Option<usize>,
    #[serde(default)]
    quorum: Option<u32>,
    #[serde(default)]
    percentile: Option<f64>,
}

async fn create_annotation(State(s): State<Shared>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: NewRound = parse(&body)?;
    let id = req.id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    let mut violations = Vec::new();
    if !valid_id(&id) {
        violations.push(Violation::new("id", "must be 1-128 of [A-Za-z0-9_-]"));
    }
    let quorum = req.quorum.unwrap_or(DEFAULT_QUORUM);
    if quorum == 0 {
        violations.push(Violation::new("quorum", "must be at least 1"));
    }
    let percentile = req.percentile.unwrap_or(DEFAULT_PERCENTILE);
    if !(percentile > 0.0 && percentile <= 1.0) {
        violations.push(Violation::new("percentile", "must be in (0, 1]"));
    }
    let store = s.generator.exemplars();
    let wheels: Vec<String> = store.entries().filter(|e| e.kind == Dataset::Wheel).map(|e| e.id.clone()).collect();
    let candidates = match req.candidates {
        Some(c) => {
            for id in c.iter().filter(|id| !wheels.contains(id)) {
                violations.push(Violation::new("candidates", format!("`{id}` is not a wheel in the exemplar store")));
            }
            c
        }
        None => wheels
            .choose_multiple(&mut rand::rng(), AnnotationTask::DEFAULT_CANDIDATES)
            .cloned()
            .collect(),
    };
    if !violations.is_empty() {
        return Err(ApiError::invalid(violations));
    }
    let selections = req.selections_per_rater.unwrap_or(AnnotationTask::DEFAULT_SELECTIONS);
    let task = AnnotationTask::new(&id, &req.keyword, candidates, selections)?;
    let round = Round::new(task, quorum, percentile);
    if !s.annotations.create(round.clone()).map_err(ApiError::internal)? {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("annotation task {id} already exists")));
    }
    Ok((StatusCode::CREATED, Json(round)))
}

async fn get_annotation(State(s): State<Shared>, Path(task): Path<String>) -> ApiResult<Json<Round>> {
    s.annotations
        .get(&task)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("annotation task {task} not found")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Ballot {
    rater_id: String,
    selected: Vec<String>,
}

async fn vote(State(s): State<Shared>, Path(task): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let ballot: Ballot = parse(&body)?;
    if ballot.rater_id.trim().is_empty() {
        return Err(ApiError::invalid(vec![Violation::new("rater_id", "must be nonempty")]));
    }
    blocking(move || {
        let round = s.annotations.vote(&task, &ballot.rater_id, &ballot.selected).map_err(|e| match e {
            VoteError::UnknownTask => ApiError::not_found(format!("annotation task {task} not found")),
            VoteError::DuplicateRater(m) => ApiError::new(StatusCode::CONFLICT, m),
            VoteError::Rejected(m) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m),
            VoteError::Storage(e) => ApiError::internal(format!("{e:#}")),
        })?;
        if let Some(set) = &round.exemplars {
            let counts: BTreeMap<String, u32> = round.votes.counts.clone();
            s.generator.update_exemplars(|store| {
                store.set_exemplars(set.clone(), &counts);
                store.save()
            })?;
        }
        Ok(Json(json!({
            "task_id": round.task.id,
            "rater_count": round.votes.rater_count,
            "quorum": round.quorum,
            "reached_quorum": round.reached_quorum(),
            "exemplars": round.exemplars,
        })))
    })
    .await
}
