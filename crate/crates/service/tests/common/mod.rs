#![allow(dead_code)]

use std::net::SocketAddr;
use std::time::Duration;

use axum::http::{Method, StatusCode};
use axum::Router;
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use elicit_core::policy::{MlpConfig, MlpParameters, PolicyEnsemble};
use elicit_core::toyworld::{ACTION_DIM, STATE_DIM};
use elicit_service::replay::call;
use elicit_service::{router, AppState, ServiceConfig};

pub type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

/// Two members that always output zero: novelty 0, MSE = mean squared action.
pub fn zero_policy() -> PolicyEnsemble {
    let cfg = MlpConfig::new(STATE_DIM, ACTION_DIM)
        .with_hidden([2])
        .with_layer_norm(false)
        .with_dropout(0.0);
    let members = vec![MlpParameters::zeros(&cfg).unwrap(), MlpParameters::zeros(&cfg).unwrap()];
    PolicyEnsemble::from_members(cfg, members, vec![0, 1]).unwrap()
}

pub struct Api {
    pub app: Router,
    pub state: AppState,
}

impl Api {
    pub fn new(config: ServiceConfig) -> Self {
        let state = AppState::new(config).unwrap();
        Self {
            app: router(state.clone()),
            state,
        }
    }

    pub async fn send(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, String) {
        call(&self.app, method, uri, body.map(|b| b.to_string())).await
    }

    pub async fn json(&self, method: Method, uri: &str, body: Option<Value>, want: StatusCode) -> Value {
        let (status, text) = self.send(method.clone(), uri, body).await;
        assert_eq!(status, want, "{method} {uri}: {text}");
        serde_json::from_str(&text).unwrap_or_else(|e| panic!("{uri} returned non-JSON {text:?}: {e}"))
    }

    pub async fn get(&self, uri: &str) -> Value {
        self.json(Method::GET, uri, None, StatusCode::OK).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> Value {
        self.json(Method::POST, uri, Some(body), StatusCode::OK).await
    }

    /// A small scripted base corpus.
    pub async fn base_dataset(&self) -> String {
        let v = self
            .json(
                Method::POST,
                "/datasets/generate",
                Some(json!({ "style": "across-then-down", "count": 8, "seed": 1, "name": "base" })),
                StatusCode::CREATED,
            )
            .await;
        v["dataset_id"].as_str().unwrap().to_owned()
    }

    pub async fn zero_policy(&self) -> String {
        let (status, text) = call(
            &self.app,
            Method::POST,
            "/policies",
            Some(zero_policy().to_checkpoint_json()),
        )
        .await;
        assert_eq!(status, StatusCode::CREATED, "{text}");
        let v: Value = serde_json::from_str(&text).unwrap();
        v["policy_id"].as_str().unwrap().to_owned()
    }

    /// Opens a session on the zero policy and returns its id.
    pub async fn session(&self, extra: Value) -> String {
        let (dataset, policy) = (self.base_dataset().await, self.zero_policy().await);
        let mut body = json!({ "operator_id": "op-1", "policy_id": policy, "base_dataset_id": dataset, "seed": 7 });
        for (k, v) in extra.as_object().into_iter().flatten() {
            body[k] = v.clone();
        }
        let v = self
            .json(Method::POST, "/sessions", Some(body), StatusCode::CREATED)
            .await;
        v["session_id"].as_str().unwrap().to_owned()
    }

    pub async fn wait_job(&self, job_id: &str) -> Value {
        for _ in 0..1200 {
            let j = self.get(&format!("/jobs/{job_id}")).await;
            if matches!(j["state"].as_str(), Some("done" | "failed")) {
                return j;
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        panic!("job {job_id} did not finish");
    }

    pub async fn events(&self, session: &str) -> Vec<Value> {
        let (status, text) = self
            .send(Method::GET, &format!("/sessions/{session}/events"), None)
            .await;
        assert_eq!(status, StatusCode::OK);
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    /// Serves the same state on a loopback port.
    pub async fn listen(&self) -> SocketAddr {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(elicit_service::serve(self.state.clone(), listener));
        addr
    }
}

/// Actions for one 200-step demo with `bad` far-off steps spread out.
pub fn boundary_actions(bad: usize) -> Vec<Vec<f64>> {
    (0..200)
        .map(|i| {
            if i % 18 == 5 && i / 18 < bad {
                vec![1.0, 1.0, 1.0]
            } else {
                vec![0.05, 0.05, 0.05]
            }
        })
        .collect()
}

pub async fn connect(addr: SocketAddr, session: &str, role: &str) -> Result<Ws, tokio_tungstenite::tungstenite::Error> {
    let url = format!("ws://{addr}/sessions/{session}/stream?role={role}");
    tokio_tungstenite::connect_async(url).await.map(|(ws, _)| ws)
}

pub async fn send(ws: &mut Ws, msg: Value) {
    send_raw(ws, &msg.to_string()).await;
}

pub async fn send_raw(ws: &mut Ws, text: &str) {
    ws.send(Message::Text(text.to_owned().into())).await.unwrap();
}

/// Next text message, parsed, with its raw text.
pub async fn recv(ws: &mut Ws) -> (Value, String) {
    loop {
        let m = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("stream message within 10 s")
            .expect("stream open")
            .expect("stream ok");
        if let Message::Text(t) = m {
            let text = t.to_string();
            return (serde_json::from_str(&text).unwrap(), text);
        }
    }
}

/// Reads until a message of type `kind` arrives; returns it and everything before it.
pub async fn recv_until(ws: &mut Ws, kind: &str) -> (Value, Vec<String>) {
    let mut seen = Vec::new();
    loop {
        let (v, text) = recv(ws).await;
        seen.push(text);
        if v["type"] == kind {
            return (v, seen);
        }
    }
}
