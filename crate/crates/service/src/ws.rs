//! Live session stream: one writer drives the demonstration, observers only listen.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::response::{IntoResponse, Response};
use futures::{SinkExt, StreamExt};
use tokio::sync::broadcast::error::RecvError;
use tokio::time::MissedTickBehavior;

use crate::api::finalize_locked;
use crate::error::{ApiError, ApiResult};
use crate::protocol::{ClientMessage, ServerMessage};
use crate::state::{AppState, SessionSlot};

/// `?role=observer` joins read-only; the default role is writer and only one is allowed.
pub async fn stream(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let slot = app.session(&id)?;
    let writer = match q.get("role").map(String::as_str) {
        None | Some("writer") => true,
        Some("observer") => false,
        Some(other) => return Err(ApiError::field("role", format!("unknown role {other:?}"))),
    };
    if writer && !slot.claim_writer() {
        return Err(ApiError::conflict("session already has a writer"));
    }
    let release = slot.clone();
    Ok(ws
        .on_failed_upgrade(move |_| {
            if writer {
                release.release_writer();
            }
        })
        .on_upgrade(move |socket| run(app, slot, socket, writer))
        .into_response())
}

fn handle_client(app: &AppState, slot: &Arc<SessionSlot>, text: &str) -> Result<(), ServerMessage> {
    let msg = ClientMessage::parse(text).map_err(|e| ServerMessage::error("malformed", e))?;
    let mut st = slot.lock();
    let result = match msg {
        ClientMessage::Begin => st.runtime.begin().map(|m| slot.publish(&m)).map_err(ApiError::from),
        ClientMessage::Action { action } => st
            .runtime
            .submit(&action)
            .map(|m| slot.publish(&m))
            .map_err(ApiError::from),
        ClientMessage::Finalize => finalize_locked(app, slot, &mut st).map(|_| ()),
    };
    app.persist_events(slot, &mut st);
    result.map_err(|e| ServerMessage::error(e.code, e.message))
}

async fn run(app: AppState, slot: Arc<SessionSlot>, socket: WebSocket, writer: bool) {
    let (mut sink, mut incoming) = socket.split();
    let mut rx = slot.tx.subscribe();
    let hello = {
        let st = slot.lock();
        ServerMessage::Phase {
            phase: st.runtime.session().phase(),
            demo_index: st.runtime.session().demo_index(),
        }
    };
    let mut ok = sink.send(Message::Text(hello.to_text().into())).await.is_ok();
    let mut ticker = tokio::time::interval(Duration::from_millis(app.config().tick_ms()));
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    while ok {
        tokio::select! {
            msg = incoming.next() => match msg {
                Some(Ok(Message::Text(text))) => {
                    let reply = if writer {
                        handle_client(&app, &slot, text.as_str()).err()
                    } else {
                        Some(ServerMessage::error("read_only", "observers cannot send messages"))
                    };
                    if let Some(err) = reply {
                        ok = sink.send(Message::Text(err.to_text().into())).await.is_ok();
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    let err = ServerMessage::error("malformed", "messages must be text");
                    ok = sink.send(Message::Text(err.to_text().into())).await.is_ok();
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            out = rx.recv() => match out {
                Ok(text) => ok = sink.send(Message::Text(text.into())).await.is_ok(),
                Err(RecvError::Lagged(n)) => {
                    let err = ServerMessage::error("lagged", format!("{n} messages were dropped"));
                    ok = sink.send(Message::Text(err.to_text().into())).await.is_ok();
                }
                Err(RecvError::Closed) => break,
            },
            _ = ticker.tick(), if writer => {
                let mut st = slot.lock();
                match st.runtime.tick() {
                    Ok(msgs) => slot.publish(&msgs),
                    Err(e) => tracing::warn!(session = %slot.id, error = %e, "tick failed"),
                }
                app.persist_events(&slot, &mut st);
            }
        }
    }
    if writer {
        let mut st = slot.lock();
        match st.runtime.restart_demo("writer disconnected") {
            Ok(msgs) => slot.publish(&msgs),
            Err(e) => tracing::warn!(session = %slot.id, error = %e, "disconnect cleanup failed"),
        }
        app.persist_events(&slot, &mut st);
        drop(st);
        slot.release_writer();
    }
}
