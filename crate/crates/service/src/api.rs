//! HTTP handlers and routing.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use elicit_core::compat::{build_map, Thresholds};
use elicit_core::curation::{filter_set, FilterConfig};
use elicit_core::demo::{encode_trajectory, parse_set, DemonstrationSet};
use elicit_core::elicitation::{ElicitationSession, FeedbackCandidate, Phase, SessionConfig};
use elicit_core::policy::{train_ensemble, MlpConfig, PolicyEnsemble, TrainConfig, DEFAULT_ENSEMBLE_SIZE};
use elicit_core::study::ThresholdSource;
use elicit_core::toyworld::{
    desk_train_config, evaluate_policy, generate_corpus, mlp_config_for, DemonstratorStyle, StyleKind, WorldConfig,
};

use crate::error::{parse_body, ApiError, ApiResult};
use crate::protocol::{ServerMessage, PROTOCOL_VERSION};
use crate::runtime::SessionRuntime;
use crate::state::{AppState, JobKind, JobOutput, JobStatus, SessionSlot};
use crate::ws::stream;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route(
            "/health",
            get(|| async { Json(json!({ "v": PROTOCOL_VERSION, "status": "ok" })) }),
        )
        .route("/datasets", get(list_datasets).post(upload_dataset))
        .route("/datasets/generate", post(generate_dataset))
        .route("/datasets/{id}", get(get_dataset))
        .route("/policies", get(list_policies).post(upload_policy))
        .route("/policies/{id}", get(get_policy))
        .route("/train", post(start_train))
        .route("/filter", post(start_filter))
        .route("/eval", post(start_eval))
        .route("/jobs/{id}", get(get_job))
        .route("/maps", post(create_map))
        .route("/maps/{file}", get(get_map))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/begin", post(begin))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/discard", post(discard))
        .route("/sessions/{id}/retrain", post(retrain))
        .route("/sessions/{id}/prompts", get(prompts))
        .route("/sessions/{id}/feedback", get(feedback))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

fn created<T: Serialize>(body: T) -> Response {
    (StatusCode::CREATED, Json(body)).into_response()
}

fn accepted(job: JobStatus) -> Response {
    (StatusCode::ACCEPTED, Json(job)).into_response()
}

fn ndjson(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Serialize)]
struct DatasetSummary {
    dataset_id: String,
    name: String,
    task_id: String,
    trajectories: usize,
    pairs: usize,
}

fn summary(id: String, set: &DemonstrationSet) -> DatasetSummary {
    DatasetSummary {
        dataset_id: id,
        name: set.name().to_owned(),
        task_id: set.task_id().to_owned(),
        trajectories: set.len(),
        pairs: set.pair_count(),
    }
}

async fn list_datasets(State(app): State<AppState>) -> Json<Value> {
    let items: Vec<DatasetSummary> = app.datasets().into_iter().map(|(id, s)| summary(id, &s)).collect();
    Json(json!({ "v": PROTOCOL_VERSION, "datasets": items }))
}

/// Body is a trajectory-record stream, one record per line.
async fn upload_dataset(
    State(app): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::field("body", "not UTF-8"))?;
    let name = q.get("name").map(String::as_str).unwrap_or("upload");
    let set = parse_set(name, text)?;
    if set.is_empty() {
        return Err(ApiError::field("body", "dataset has no trajectories"));
    }
    let id = app.insert_dataset(set.clone())?;
    Ok(created(summary(id, &set)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    style: StyleKind,
    count: usize,
    #[serde(default)]
    seed: u64,
    noise_std: Option<f64>,
    speed: Option<f64>,
    #[serde(default)]
    world: WorldConfig,
    name: Option<String>,
}

/// Scripted corpus generation for clients without a recorder.
async fn generate_dataset(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: GenerateRequest = parse_body(&body)?;
    if req.count == 0 {
        return Err(ApiError::field("count", "must be positive"));
    }
    let mut style = DemonstratorStyle::new(req.style);
    if let Some(n) = req.noise_std {
        style = style.with_noise(n);
    }
    if let Some(s) = req.speed {
        style = style.with_speed(s);
    }
    let set = blocking(move || Ok(generate_corpus(&[(style, req.count)], &req.world, req.seed)?)).await?;
    let set = match req.name {
        Some(n) => set.renamed(n),
        None => set,
    };
    let id = app.insert_dataset(set.clone())?;
    Ok(created(summary(id, &set)))
}

async fn get_dataset(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let set = app.dataset(&id)?;
    Ok(ndjson(elicit_core::demo::format_set(&set)))
}

#[derive(Serialize)]
struct PolicySummary {
    policy_id: String,
    fingerprint: String,
    k: usize,
    config: MlpConfig,
}

fn policy_summary(id: String, e: &PolicyEnsemble) -> PolicySummary {
    PolicySummary {
        policy_id: id,
        fingerprint: e.fingerprint(),
        k: e.k(),
        config: e.config().clone(),
    }
}

async fn list_policies(State(app): State<AppState>) -> Json<Value> {
    let items: Vec<PolicySummary> = app
        .policies()
        .into_iter()
        .map(|(id, e)| policy_summary(id, &e))
        .collect();
    Json(json!({ "v": PROTOCOL_VERSION, "policies": items }))
}

/// Body is an ensemble checkpoint.
async fn upload_policy(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::field("body", "not UTF-8"))?;
    let e = Arc::new(PolicyEnsemble::from_checkpoint_json(text)?);
    let id = app.insert_policy(e.clone())?;
    Ok(created(policy_summary(id, &e)))
}

async fn get_policy(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let e = app.policy(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], e.to_checkpoint_json()).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    dataset_id: String,
    mlp: Option<MlpConfig>,
    train: Option<TrainConfig>,
    ensemble_size: Option<usize>,
    #[serde(default)]
    seed: u64,
}

async fn start_train(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: TrainRequest = parse_body(&body)?;
    let data = app.dataset(&req.dataset_id)?;
    let (sd, ad) = data
        .dims()
        .ok_or_else(|| ApiError::field("dataset_id", "dataset is empty"))?;
    let mlp = req.mlp.unwrap_or_else(|| mlp_config_for(sd, ad));
    let train = req.train.unwrap_or_else(|| desk_train_config(req.seed));
    let k = req.ensemble_size.unwrap_or(DEFAULT_ENSEMBLE_SIZE);
    mlp.validate()?;
    train.validate()?;
    let job = app.spawn_job(JobKind::Train, move |app| {
        let e = Arc::new(train_ensemble(&data, &mlp, &train, k)?);
        let id = app.insert_policy(e.clone())?;
        Ok(JobOutput {
            result_ref: Some(format!("/policies/{id}")),
            result: Some(json!({ "policy_id": id, "fingerprint": e.fingerprint() })),
        })
    });
    Ok(accepted(job))
}

fn default_source() -> ThresholdSource {
    ThresholdSource::Preset {
        name: "square-nut".into(),
    }
}

fn fixed_thresholds(source: &ThresholdSource) -> ApiResult<Thresholds> {
    source
        .fixed()
        .map_err(|e| ApiError::field("thresholds", e.to_string()))?
        .ok_or_else(|| ApiError::field("thresholds", "regressed thresholds are only available to studies"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterRequest {
    policy_id: String,
    dataset_id: String,
    #[serde(default = "default_source")]
    thresholds: ThresholdSource,
    #[serde(default)]
    filter: FilterConfig,
}

async fn start_filter(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: FilterRequest = parse_body(&body)?;
    let (e, data) = (app.policy(&req.policy_id)?, app.dataset(&req.dataset_id)?);
    let th = fixed_thresholds(&req.thresholds)?;
    req.filter.validate()?;
    let job = app.spawn_job(JobKind::Filter, move |app| {
        let (kept, stats) = filter_set(&e, &data, &th, &req.filter)?;
        let result = json!({ "stats": stats, "thresholds": th });
        let result_ref = if kept.is_empty() {
            None
        } else {
            let name = format!("{}-filtered", data.name());
            let id = app.insert_dataset(kept.renamed(name))?;
            Some(format!("/datasets/{id}"))
        };
        Ok(JobOutput {
            result_ref,
            result: Some(result),
        })
    });
    Ok(accepted(job))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRequest {
    policy_id: String,
    #[serde(default)]
    world: WorldConfig,
    #[serde(default = "default_episodes")]
    episodes: usize,
    #[serde(default)]
    seed: u64,
}

fn default_episodes() -> usize {
    50
}

async fn start_eval(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: EvalRequest = parse_body(&body)?;
    let e = app.policy(&req.policy_id)?;
    req.world.validate()?;
    if req.episodes == 0 {
        return Err(ApiError::field("episodes", "must be positive"));
    }
    let job = app.spawn_job(JobKind::Eval, move |_| {
        let rate = evaluate_policy(&e, &req.world, req.episodes, req.seed)?;
        Ok(JobOutput {
            result_ref: None,
            result: Some(json!({ "success_rate": rate, "episodes": req.episodes, "seed": req.seed })),
        })
    });
    Ok(accepted(job))
}

async fn get_job(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    Ok(Json(app.job(&id)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapRequest {
    policy_id: String,
    dataset_id: String,
    #[serde(default = "default_source")]
    thresholds: ThresholdSource,
}

async fn create_map(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: MapRequest = parse_body(&body)?;
    let (e, data) = (app.policy(&req.policy_id)?, app.dataset(&req.dataset_id)?);
    let th = fixed_thresholds(&req.thresholds)?;
    let map = blocking(move || Ok(build_map(&e, &data, &th)?)).await?;
    let body = json!({
        "records": map.records.len(),
        "mean_score": map.mean_score(),
        "thresholds": map.thresholds,
        "base_policy_fingerprint": map.base_policy_fingerprint,
    });
    let id = app.insert_map(map)?;
    let mut body = body;
    body["map_id"] = json!(id);
    body["csv"] = json!(format!("/maps/{id}.csv"));
    Ok(created(body))
}

async fn get_map(State(app): State<AppState>, Path(file): Path<String>) -> ApiResult<Response> {
    let id = file
        .strip_suffix(".csv")
        .ok_or_else(|| ApiError::not_found("map file", &file))?;
    let csv = app.map_csv(id)?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionRequest {
    operator_id: String,
    policy_id: String,
    base_dataset_id: String,
    #[serde(default = "default_source")]
    thresholds: ThresholdSource,
    #[serde(default)]
    config: SessionConfig,
    #[serde(default)]
    world: WorldConfig,
    #[serde(default)]
    seed: u64,
    train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub created_at: u64,
    pub phase: Phase,
    pub websocket_endpoint: String,
}

fn handle(slot: &SessionSlot, phase: Phase) -> SessionHandle {
    SessionHandle {
        session_id: slot.id.clone(),
        created_at: slot.created_at_ms,
        phase,
        websocket_endpoint: format!("/sessions/{}/stream", slot.id),
    }
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: SessionRequest = parse_body(&body)?;
    let (e, base) = (app.policy(&req.policy_id)?, app.dataset(&req.base_dataset_id)?);
    let th = fixed_thresholds(&req.thresholds)?;
    let tick_ms = app.config().tick_ms();
    let slot = app.insert_session(|id| {
        let train = req.train.clone().unwrap_or_else(|| desk_train_config(req.seed));
        train.validate()?;
        let s = ElicitationSession::open(id, req.operator_id.clone(), base, e, th, req.config.clone(), req.seed)?;
        Ok((SessionRuntime::new(s, req.world.clone(), req.seed, tick_ms)?, train))
    })?;
    let phase = slot.lock().runtime.session().phase();
    Ok(created(handle(&slot, phase)))
}

#[derive(Serialize)]
struct SessionView {
    #[serde(flatten)]
    handle: SessionHandle,
    v: u32,
    operator_id: String,
    demo_index: usize,
    accepted: usize,
    rejected: usize,
    prompts: Vec<String>,
    candidates: Vec<FeedbackCandidate>,
    thresholds: Thresholds,
    ensemble_fingerprint: String,
    retrains: usize,
    step: Option<usize>,
    writer_connected: bool,
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let slot = app.session(&id)?;
    let st = slot.lock();
    let s = st.runtime.session();
    Ok(Json(SessionView {
        handle: handle(&slot, s.phase()),
        v: PROTOCOL_VERSION,
        operator_id: s.operator_id().to_owned(),
        demo_index: s.demo_index(),
        accepted: s.accepted().len(),
        rejected: s.rejected_count(),
        prompts: s.prompts().to_vec(),
        candidates: s.candidates().to_vec(),
        thresholds: *s.thresholds(),
        ensemble_fingerprint: s.ensemble().fingerprint(),
        retrains: s.retrain_count(),
        step: st.runtime.world().map(|w| w.step_count),
        writer_connected: slot.has_writer(),
    }))
}

fn http_writer(slot: &SessionSlot) -> ApiResult<()> {
    if slot.has_writer() {
        Err(ApiError::conflict("a stream writer holds this session"))
    } else {
        Ok(())
    }
}

/// `{"v":1,"messages":[...]}` with each message spelled exactly as on the stream.
fn messages_body(msgs: &[ServerMessage], extra: Option<(&str, Value)>) -> Response {
    let texts: Vec<String> = msgs.iter().map(ServerMessage::to_text).collect();
    let mut body = format!(r#"{{"v":{PROTOCOL_VERSION},"messages":[{}]"#, texts.join(","));
    if let Some((key, value)) = extra {
        body.push_str(&format!(",{}:{}", json!(key), value));
    }
    body.push('}');
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn begin(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    http_writer(&slot)?;
    let mut st = slot.lock();
    let msgs = st.runtime.begin()?;
    slot.publish(&msgs);
    app.persist_events(&slot, &mut st);
    Ok(messages_body(&msgs, None))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRequest {
    action: Vec<f64>,
}

async fn step(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: StepRequest = parse_body(&body)?;
    let slot = app.session(&id)?;
    http_writer(&slot)?;
    let mut st = slot.lock();
    let msgs = st.runtime.step_now(&req.action)?;
    slot.publish(&msgs);
    app.persist_events(&slot, &mut st);
    Ok(messages_body(&msgs, None))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscardRequest {
    #[serde(default = "default_reason")]
    reason: String,
}

fn default_reason() -> String {
    "client abort".into()
}

/// Throws away the demonstration in progress and restarts it.
async fn discard(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: DiscardRequest = parse_body(&body)?;
    let slot = app.session(&id)?;
    http_writer(&slot)?;
    let mut st = slot.lock();
    if st.runtime.session().phase() != Phase::Demonstrating {
        return Err(ApiError::conflict("discard is only allowed while demonstrating"));
    }
    let msgs = st.runtime.restart_demo(&req.reason)?;
    slot.publish(&msgs);
    app.persist_events(&slot, &mut st);
    Ok(messages_body(&msgs, None))
}

/// Runs the finalize rule and, when the batch rule asks for it, starts a retrain job.
pub(crate) fn finalize_locked(
    app: &AppState,
    slot: &Arc<SessionSlot>,
    st: &mut crate::state::SlotState,
) -> ApiResult<(Vec<ServerMessage>, Option<JobStatus>)> {
    let (outcome, msgs) = st.runtime.finalize()?;
    slot.publish(&msgs);
    app.persist_events(slot, st);
    let job = if outcome.retrain_due {
        Some(spawn_retrain(app, slot, st)?)
    } else {
        None
    };
    Ok((msgs, job))
}

async fn finalize(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    http_writer(&slot)?;
    let mut st = slot.lock();
    let (msgs, job) = finalize_locked(&app, &slot, &mut st)?;
    Ok(messages_body(&msgs, Some(("retrain_job", json!(job)))))
}

fn spawn_retrain(app: &AppState, slot: &Arc<SessionSlot>, st: &crate::state::SlotState) -> ApiResult<JobStatus> {
    let s = st.runtime.session();
    let data = s.training_set()?;
    let mlp = s.ensemble().config().clone();
    let k = s.ensemble().k();
    let train = st.train.clone();
    let slot = slot.clone();
    Ok(app.spawn_job(JobKind::Retrain, move |app| {
        let e = Arc::new(train_ensemble(&data, &mlp, &train, k)?);
        let id = app.insert_policy(e.clone())?;
        let mut st = slot.lock();
        st.runtime.session_mut().install_ensemble(e.clone())?;
        app.persist_events(&slot, &mut st);
        Ok(JobOutput {
            result_ref: Some(format!("/policies/{id}")),
            result: Some(json!({ "policy_id": id, "fingerprint": e.fingerprint() })),
        })
    }))
}

async fn retrain(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let st = slot.lock();
    let job = spawn_retrain(&app, &slot, &st)?;
    Ok(accepted(job))
}

fn records(set: &DemonstrationSet, ids: &[String]) -> Vec<Value> {
    ids.iter()
        .filter_map(|id| set.get(id))
        .map(|t| serde_json::from_str(&encode_trajectory(t)).expect("records are JSON"))
        .collect()
}

async fn prompts(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let st = slot.lock();
    let s = st.runtime.session();
    Ok(Json(
        json!({ "v": PROTOCOL_VERSION, "prompts": records(s.base(), s.prompts()) }),
    ))
}

async fn feedback(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = app.session(&id)?;
    let st = slot.lock();
    let s = st.runtime.session();
    let mut retrieved_ids: Vec<String> = Vec::new();
    for c in s.candidates() {
        if !retrieved_ids.contains(&c.retrieved_base_trajectory_id) {
            retrieved_ids.push(c.retrieved_base_trajectory_id.clone());
        }
    }
    let retrieved: BTreeMap<String, Value> = retrieved_ids
        .iter()
        .cloned()
        .zip(records(s.base(), &retrieved_ids))
        .collect();
    Ok(Json(json!({
        "v": PROTOCOL_VERSION,
        "phase": s.phase(),
        "candidates": s.candidates(),
        "retrieved": retrieved,
    })))
}

async fn events(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let st = slot.lock();
    let mut out = String::new();
    for e in st.runtime.session().events() {
        out.push_str(&e.to_json_line());
        out.push('\n');
    }
    Ok(ndjson(out))
}
