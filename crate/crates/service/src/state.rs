//! In-memory stores mirrored to the data directory.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::broadcast;

use elicit_core::compat::CompatibilityMap;
use elicit_core::demo::{format_set, load_set, save_set, DemonstrationSet};
use elicit_core::policy::{PolicyEnsemble, TrainConfig};

use crate::error::{ApiError, ApiResult};
use crate::protocol::ServerMessage;
use crate::runtime::SessionRuntime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Where datasets, policies, maps and session logs are kept; memory only when unset.
    pub data_dir: Option<PathBuf>,
    pub tick_hz: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            tick_hz: 20,
        }
    }
}

impl ServiceConfig {
    pub fn tick_ms(&self) -> u64 {
        1000 / self.tick_hz.max(1) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    Retrain,
    Map,
    Filter,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    pub result_ref: Option<String>,
    pub result: Option<serde_json::Value>,
    pub error: Option<String>,
}

/// Output of a finished job: where its artefact lives plus an inline summary.
pub struct JobOutput {
    pub result_ref: Option<String>,
    pub result: Option<serde_json::Value>,
}

pub struct SessionSlot {
    pub id: String,
    pub created_at_ms: u64,
    pub state: Mutex<SlotState>,
    pub tx: broadcast::Sender<String>,
    writer: AtomicBool,
}

pub struct SlotState {
    pub runtime: SessionRuntime,
    pub train: TrainConfig,
    persisted_events: usize,
}

impl SessionSlot {
    pub fn lock(&self) -> MutexGuard<'_, SlotState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Claims the single writer seat.
    pub fn claim_writer(&self) -> bool {
        self.writer
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    pub fn release_writer(&self) {
        self.writer.store(false, Ordering::SeqCst);
    }

    pub fn has_writer(&self) -> bool {
        self.writer.load(Ordering::SeqCst)
    }

    /// Sends to every subscriber; call while holding the slot lock so that
    /// the per-session order is total.
    pub fn publish(&self, msgs: &[ServerMessage]) {
        for m in msgs {
            let _ = self.tx.send(m.to_text());
        }
    }
}

#[derive(Default)]
struct Stores {
    datasets: BTreeMap<String, Arc<DemonstrationSet>>,
    policies: BTreeMap<String, Arc<PolicyEnsemble>>,
    jobs: BTreeMap<String, JobStatus>,
    maps: BTreeMap<String, CompatibilityMap>,
    sessions: BTreeMap<String, Arc<SessionSlot>>,
    next_job: u64,
    next_map: u64,
    next_session: u64,
}

struct Inner {
    config: ServiceConfig,
    stores: Mutex<Stores>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..6])
}

impl AppState {
    /// Creates the stores and loads datasets and policies already in the data directory.
    pub fn new(config: ServiceConfig) -> elicit_core::Result<Self> {
        let mut stores = Stores::default();
        if let Some(dir) = &config.data_dir {
            for sub in ["datasets", "policies", "maps", "sessions"] {
                let p = dir.join(sub);
                fs::create_dir_all(&p).map_err(|e| elicit_core::Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
            }
            for (path, stem) in list(&dir.join("datasets"), "jsonl") {
                stores.datasets.insert(stem, Arc::new(load_set(&path)?));
            }
            for (path, stem) in list(&dir.join("policies"), "json") {
                stores.policies.insert(stem, Arc::new(PolicyEnsemble::load(&path)?));
            }
        }
        Ok(Self(Arc::new(Inner {
            config,
            stores: Mutex::new(stores),
        })))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    fn stores(&self) -> MutexGuard<'_, Stores> {
        self.0.stores.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn dir(&self, sub: &str) -> Option<PathBuf> {
        self.0.config.data_dir.as_ref().map(|d| d.join(sub))
    }

    pub fn datasets(&self) -> Vec<(String, Arc<DemonstrationSet>)> {
        self.stores()
            .datasets
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn dataset(&self, id: &str) -> ApiResult<Arc<DemonstrationSet>> {
        self.stores()
            .datasets
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("dataset", id))
    }

    /// Stores `set` under a content-derived id, so equal uploads share one id.
    pub fn insert_dataset(&self, set: DemonstrationSet) -> ApiResult<String> {
        let id = format!("ds-{}", short_hash(&format_set(&set)));
        if let Some(dir) = self.dir("datasets") {
            save_set(&set, dir.join(format!("{id}.jsonl")))?;
        }
        self.stores().datasets.insert(id.clone(), Arc::new(set));
        Ok(id)
    }

    pub fn policies(&self) -> Vec<(String, Arc<PolicyEnsemble>)> {
        self.stores()
            .policies
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn policy(&self, id: &str) -> ApiResult<Arc<PolicyEnsemble>> {
        self.stores()
            .policies
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("policy", id))
    }

    pub fn insert_policy(&self, e: Arc<PolicyEnsemble>) -> ApiResult<String> {
        let id = format!("pol-{}", e.fingerprint());
        if let Some(dir) = self.dir("policies") {
            e.save(dir.join(format!("{id}.json")))?;
        }
        self.stores().policies.insert(id.clone(), e);
        Ok(id)
    }

    pub fn insert_map(&self, map: CompatibilityMap) -> ApiResult<String> {
        let mut s = self.stores();
        s.next_map += 1;
        let id = format!("map-{:04}", s.next_map);
        if let Some(dir) = self.dir("maps") {
            let path = dir.join(format!("{id}.csv"));
            fs::write(&path, map.to_csv()?).map_err(|e| elicit_core::Error::Io { path, source: e })?;
        }
        s.maps.insert(id.clone(), map);
        Ok(id)
    }

    pub fn map_csv(&self, id: &str) -> ApiResult<String> {
        let s = self.stores();
        let map = s.maps.get(id).ok_or_else(|| ApiError::not_found("map", id))?;
        Ok(map.to_csv()?)
    }

    pub fn job(&self, id: &str) -> ApiResult<JobStatus> {
        self.stores()
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("job", id))
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = self.stores().jobs.get_mut(id) {
            if !j.state.is_terminal() {
                f(j);
            }
        }
    }

    /// Queues `work` on the blocking pool and returns its job id at once.
    pub fn spawn_job(
        &self,
        kind: JobKind,
        work: impl FnOnce(&AppState) -> ApiResult<JobOutput> + Send + 'static,
    ) -> JobStatus {
        let status = {
            let mut s = self.stores();
            s.next_job += 1;
            let status = JobStatus {
                job_id: format!("job-{:04}", s.next_job),
                kind,
                state: JobState::Queued,
                progress: 0.0,
                result_ref: None,
                result: None,
                error: None,
            };
            s.jobs.insert(status.job_id.clone(), status.clone());
            status
        };
        let app = self.clone();
        let id = status.job_id.clone();
        tokio::task::spawn_blocking(move || {
            app.update_job(&id, |j| j.state = JobState::Running);
            let outcome = work(&app);
            app.update_job(&id, |j| match outcome {
                Ok(out) => {
                    j.state = JobState::Done;
                    j.progress = 1.0;
                    j.result_ref = out.result_ref;
                    j.result = out.result;
                }
                Err(e) => {
                    j.state = JobState::Failed;
                    j.error = Some(e.message);
                }
            });
        });
        status
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        self.stores()
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    /// Registers a session; `make` receives the new id.
    pub fn insert_session(
        &self,
        make: impl FnOnce(&str) -> ApiResult<(SessionRuntime, TrainConfig)>,
    ) -> ApiResult<Arc<SessionSlot>> {
        let mut s = self.stores();
        let id = format!("s-{:04}", s.next_session + 1);
        let (runtime, train) = make(&id)?;
        s.next_session += 1;
        let (tx, _) = broadcast::channel(1024);
        let slot = Arc::new(SessionSlot {
            id: id.clone(),
            created_at_ms: now_ms(),
            state: Mutex::new(SlotState {
                runtime,
                train,
                persisted_events: 0,
            }),
            tx,
            writer: AtomicBool::new(false),
        });
        s.sessions.insert(id, slot.clone());
        drop(s);
        self.persist_events(&slot, &mut slot.lock());
        Ok(slot)
    }

    /// Appends events not yet written to the session's log file.
    pub fn persist_events(&self, slot: &SessionSlot, st: &mut SlotState) {
        let events = st.runtime.session().events();
        if st.persisted_events >= events.len() {
            return;
        }
        if let Some(dir) = self.dir("sessions") {
            let path = dir.join(format!("{}.events.jsonl", slot.id));
            let mut text = String::new();
            for e in &events[st.persisted_events..] {
                text.push_str(&e.to_json_line());
                text.push('\n');
            }
            let written = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .and_then(|mut f| f.write_all(text.as_bytes()));
            if let Err(e) = written {
                tracing::warn!(path = %path.display(), error = %e, "could not append session events");
                return;
            }
        }
        st.persisted_events = events.len();
    }
}

fn list(dir: &Path, ext: &str) -> Vec<(PathBuf, String)> {
    let mut out: Vec<(PathBuf, String)> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .filter_map(|p| {
            let stem = p.file_stem()?.to_string_lossy().into_owned();
            Some((p, stem))
        })
        .collect();
    out.sort();
    out
}
