//! Network boundary for the elicitation engine.
//!
//! HTTP endpoints manage datasets, policies, training jobs, compatibility maps
//! and sessions; `/sessions/{id}/stream` carries the live demonstration. The
//! toy world runs server-side, seeded per demonstration, so a session's action
//! stream determines every score it receives.

mod api;
mod error;
pub mod protocol;
pub mod replay;
pub mod runtime;
mod state;
mod ws;

use std::net::SocketAddr;

pub use api::{router, SessionHandle};
pub use error::{ApiError, FieldError};
pub use state::{AppState, JobKind, JobState, JobStatus, ServiceConfig};

/// Serves on an already bound listener until the task is dropped.
pub async fn serve(state: AppState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds `addr` and serves.
pub async fn bind_and_serve(config: ServiceConfig, addr: SocketAddr) -> Result<(), Box<dyn std::error::Error>> {
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve(state, listener).await?;
    Ok(())
}
