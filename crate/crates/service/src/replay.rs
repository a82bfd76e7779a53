//! Re-drives a recorded session through the HTTP API of a fresh server.
//!
//! The operator inputs are read back from the event log: every scored action,
//! begin, finalize and discard. Coalescing notes and retrain completions are
//! not inputs and are not reproduced. Requests go through the full router
//! in-process, so routing, parsing and serialisation are all exercised.

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde::Deserialize;
use serde_json::value::RawValue;
use serde_json::Value;
use tower::ServiceExt;

use elicit_core::elicitation::{EventKind, Phase, SessionEvent};

use crate::api::router;
use crate::state::AppState;

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayOp {
    Begin,
    Action(Vec<f64>),
    Finalize,
    Discard(String),
}

/// Operator inputs in the order they were applied.
pub fn ops_from_log(events: &[SessionEvent]) -> Vec<ReplayOp> {
    events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::PhaseChanged {
                to: Phase::Demonstrating,
                ..
            } => Some(ReplayOp::Begin),
            EventKind::StepScored { action, .. } => Some(ReplayOp::Action(action.clone())),
            EventKind::DemoFinalized { .. } => Some(ReplayOp::Finalize),
            EventKind::DemoDiscarded { reason, .. } => Some(ReplayOp::Discard(reason.clone())),
            _ => None,
        })
        .collect()
}

/// Parses an ndjson event log.
pub fn parse_log(text: &str) -> Result<Vec<SessionEvent>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format!("bad event line {l:?}: {e}")))
        .collect()
}

/// Keeps the stream messages that depend only on the inputs: scores and phase changes.
pub fn compat_and_phase(messages: &[String]) -> Vec<String> {
    messages
        .iter()
        .filter(|m| {
            let kind = serde_json::from_str::<Value>(m)
                .ok()
                .and_then(|v| v.get("type").and_then(Value::as_str).map(str::to_owned));
            matches!(kind.as_deref(), Some("compat" | "phase"))
        })
        .cloned()
        .collect()
}

/// Sends one request through `app` and returns status and body text.
pub async fn call(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .expect("valid request");
    let resp = app.clone().oneshot(req).await.expect("router is infallible");
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap_or_default();
    (status, String::from_utf8_lossy(&bytes).into_owned())
}

#[derive(Deserialize)]
struct Messages<'a> {
    #[serde(borrow)]
    messages: Vec<&'a RawValue>,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub session_id: String,
    /// Every message the replay produced, byte for byte as a stream would carry it.
    pub messages: Vec<String>,
    /// The replayed session's event log as ndjson.
    pub events: String,
}

/// Uploads the given datasets and policies into `state`, opens a session with
/// `session_request` and applies `ops` in order.
pub async fn replay(
    state: AppState,
    uploads: &Uploads,
    session_request: &Value,
    ops: &[ReplayOp],
) -> Result<Replay, String> {
    let app = router(state);
    for (name, jsonl) in &uploads.datasets {
        expect(
            &app,
            Method::POST,
            &format!("/datasets?name={name}"),
            Some(jsonl.clone()),
            StatusCode::CREATED,
        )
        .await?;
    }
    for checkpoint in &uploads.policies {
        expect(
            &app,
            Method::POST,
            "/policies",
            Some(checkpoint.clone()),
            StatusCode::CREATED,
        )
        .await?;
    }
    let created = expect(
        &app,
        Method::POST,
        "/sessions",
        Some(session_request.to_string()),
        StatusCode::CREATED,
    )
    .await?;
    let handle: Value = serde_json::from_str(&created).map_err(|e| e.to_string())?;
    let id = handle["session_id"]
        .as_str()
        .ok_or("session handle has no id")?
        .to_owned();
    let mut messages = Vec::new();
    for op in ops {
        let (path, body) = match op {
            ReplayOp::Begin => ("begin", None),
            ReplayOp::Action(a) => ("step", Some(serde_json::json!({ "action": a }).to_string())),
            ReplayOp::Finalize => ("finalize", None),
            ReplayOp::Discard(reason) => ("discard", Some(serde_json::json!({ "reason": reason }).to_string())),
        };
        let text = expect(
            &app,
            Method::POST,
            &format!("/sessions/{id}/{path}"),
            body,
            StatusCode::OK,
        )
        .await?;
        let parsed: Messages = serde_json::from_str(&text).map_err(|e| format!("{path}: {e}"))?;
        messages.extend(parsed.messages.iter().map(|m| m.get().to_owned()));
    }
    let events = expect(
        &app,
        Method::GET,
        &format!("/sessions/{id}/events"),
        None,
        StatusCode::OK,
    )
    .await?;
    Ok(Replay {
        session_id: id,
        messages,
        events,
    })
}

/// Artefacts a session depends on, in upload form.
#[derive(Debug, Clone, Default)]
pub struct Uploads {
    /// `(name, jsonl text)` pairs.
    pub datasets: Vec<(String, String)>,
    /// Policy checkpoints as JSON text.
    pub policies: Vec<String>,
}

async fn expect(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<String>,
    want: StatusCode,
) -> Result<String, String> {
    let (status, text) = call(app, method.clone(), uri, body).await;
    if status != want {
        return Err(format!("{method} {uri}: expected {want}, got {status}: {text}"));
    }
    Ok(text)
}
