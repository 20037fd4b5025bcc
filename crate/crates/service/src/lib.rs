//! HTTP bridge between a running trainer and an external labeler.
//!
//! The trainer hands queries to an [`HttpTeacher`], which renders them into
//! [`QueryEnvelope`]s on a shared [`QueryQueue`]. Labelers poll
//! `GET /queries`, answer with `POST /labels`, and watch `GET /status`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Query, State as AxumState};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pbmorl_core::domain::{discounted_sum, make_weight, Label, PreferenceRecord, Segment};
use pbmorl_core::eql::{MetricRecord, RunHooks, RunStatus};
use pbmorl_core::envs::{Environment, StateView};
use pbmorl_core::teacher::{GroundTruth, Teacher, TeacherError, TeacherQuery, TIE_TOLERANCE};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("query queue is full ({capacity} pending)")]
    QueueFull { capacity: usize },
    #[error("unknown query {0}")]
    UnknownQuery(u64),
    #[error("query {id} was already answered with {label}")]
    AlreadyAnswered { id: u64, label: f64 },
    #[error("query {0} expired before it was answered")]
    Expired(u64),
    #[error("label must be 0, 0.5 or 1, got {0}")]
    BadLabel(f64),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::QueueFull { .. } => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::UnknownQuery(_) => StatusCode::NOT_FOUND,
            ServiceError::AlreadyAnswered { .. } => StatusCode::CONFLICT,
            ServiceError::Expired(_) => StatusCode::GONE,
            ServiceError::BadLabel(_) => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ServiceError::QueueFull { .. } => "queue_full",
            ServiceError::UnknownQuery(_) => "unknown_query",
            ServiceError::AlreadyAnswered { .. } => "already_answered",
            ServiceError::Expired(_) => "expired",
            ServiceError::BadLabel(_) => "bad_label",
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Pending,
    Answered,
    Expired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRendering {
    pub state: StateView,
    pub action: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRendering {
    pub steps: Vec<StepRendering>,
    /// Post-termination steps that follow the listed ones.
    pub absorbing: usize,
}

/// One query as labelers see it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEnvelope {
    pub query_id: u64,
    pub env: String,
    pub weight: Vec<f64>,
    pub first: SegmentRendering,
    pub second: SegmentRendering,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub created_step: u64,
    pub status: QueryStatus,
    pub label: Option<f64>,
    /// Only present when the service was started with ground truth revealed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub query_id: u64,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub query_id: u64,
    pub label: f64,
    pub status: QueryStatus,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueCounts {
    pub pending: usize,
    pub answered: usize,
    pub expired: usize,
    pub capacity: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub run: RunStatus,
    pub queue: QueueCounts,
    pub finished: bool,
}

#[derive(Clone, Debug)]
pub struct QueueConfig {
    /// Most pending queries held at once.
    pub capacity: usize,
    /// Pending queries older than this expire.
    pub expiry: Option<Duration>,
    /// Include hidden true rewards in envelopes, for scripted labelers.
    pub reveal_ground_truth: bool,
}

impl Default for QueueConfig {
    fn default() -> Self {
        QueueConfig {
            capacity: 10_000,
            expiry: None,
            reveal_ground_truth: false,
        }
    }
}

struct Entry {
    envelope: QueryEnvelope,
    query: TeacherQuery,
    enqueued: Instant,
}

#[derive(Default)]
struct Inner {
    entries: BTreeMap<u64, Entry>,
    pending: VecDeque<u64>,
    // answered records not yet collected by the trainer
    answered: Vec<(u64, PreferenceRecord)>,
    counts: QueueCounts,
    status: RunStatus,
    finished: bool,
    interrupted: bool,
}

/// Shared state behind the HTTP endpoints. Every mutation holds one lock.
pub struct QueryQueue {
    cfg: QueueConfig,
    inner: Mutex<Inner>,
    changed: Condvar,
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn render(env: &dyn Environment, seg: &Segment) -> SegmentRendering {
    let names = &env.spec().action_names;
    SegmentRendering {
        steps: seg
            .steps()
            .iter()
            .map(|s| StepRendering {
                state: env.describe(&s.state),
                action: names.get(s.action).cloned().unwrap_or_else(|| s.action.to_string()),
            })
            .collect(),
        absorbing: seg.absorbing(),
    }
}

impl QueryQueue {
    pub fn new(cfg: QueueConfig) -> Self {
        let counts = QueueCounts {
            capacity: cfg.capacity,
            ..Default::default()
        };
        QueryQueue {
            cfg,
            inner: Mutex::new(Inner {
                counts,
                ..Default::default()
            }),
            changed: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn expire(&self, inner: &mut Inner) {
        let Some(window) = self.cfg.expiry else { return };
        let now = Instant::now();
        while let Some(&id) = inner.pending.front() {
            let entry = inner.entries.get_mut(&id).expect("pending ids have entries");
            if now.duration_since(entry.enqueued) <= window {
                break;
            }
            entry.envelope.status = QueryStatus::Expired;
            inner.pending.pop_front();
            inner.counts.pending -= 1;
            inner.counts.expired += 1;
        }
    }

    /// Adds a rendered query at the back of the pending list.
    pub fn enqueue(&self, env: &dyn Environment, q: TeacherQuery) -> Result<u64, ServiceError> {
        let mut inner = self.lock();
        self.expire(&mut inner);
        if inner.counts.pending >= self.cfg.capacity {
            return Err(ServiceError::QueueFull {
                capacity: self.cfg.capacity,
            });
        }
        let id = q.id;
        let envelope = QueryEnvelope {
            query_id: id,
            env: env.spec().kind.short_name().to_string(),
            weight: q.weight.values().to_vec(),
            first: render(env, &q.first),
            second: render(env, &q.second),
            created_at: now_millis(),
            created_step: q.created_step,
            status: QueryStatus::Pending,
            label: None,
            ground_truth: if self.cfg.reveal_ground_truth { q.ground_truth.clone() } else { None },
        };
        inner.entries.insert(
            id,
            Entry {
                envelope,
                query: q.without_ground_truth(),
                enqueued: Instant::now(),
            },
        );
        inner.pending.push_back(id);
        inner.counts.pending += 1;
        self.changed.notify_all();
        Ok(id)
    }

    /// Up to `limit` oldest pending queries.
    pub fn fetch_pending(&self, limit: usize) -> Vec<QueryEnvelope> {
        let mut inner = self.lock();
        self.expire(&mut inner);
        inner.pending.iter().take(limit).map(|id| inner.entries[id].envelope.clone()).collect()
    }

    pub fn submit_label(&self, id: u64, value: f64) -> Result<LabelAck, ServiceError> {
        let label = Label::from_value(value).map_err(|_| ServiceError::BadLabel(value))?;
        let mut inner = self.lock();
        self.expire(&mut inner);
        let entry = inner.entries.get_mut(&id).ok_or(ServiceError::UnknownQuery(id))?;
        match entry.envelope.status {
            QueryStatus::Expired => return Err(ServiceError::Expired(id)),
            QueryStatus::Answered => {
                let prior = entry.envelope.label.expect("answered queries carry a label");
                return if prior == value {
                    Ok(LabelAck {
                        query_id: id,
                        label: value,
                        status: QueryStatus::Answered,
                    })
                } else {
                    Err(ServiceError::AlreadyAnswered { id, label: prior })
                };
            }
            QueryStatus::Pending => {}
        }
        entry.envelope.status = QueryStatus::Answered;
        entry.envelope.label = Some(value);
        let record = entry.query.answer(label);
        inner.pending.retain(|p| *p != id);
        inner.counts.pending -= 1;
        inner.counts.answered += 1;
        inner.answered.push((id, record));
        self.changed.notify_all();
        Ok(LabelAck {
            query_id: id,
            label: value,
            status: QueryStatus::Answered,
        })
    }

    /// Answered records since the previous call, in query-id order.
    pub fn take_answered(&self) -> Vec<PreferenceRecord> {
        let mut out = std::mem::take(&mut self.lock().answered);
        out.sort_by_key(|(id, _)| *id);
        out.into_iter().map(|(_, r)| r).collect()
    }

    /// Blocks until none of `ids` is pending, or `timeout` passes.
    /// Returns whether everything resolved.
    pub fn wait_resolved(&self, ids: &[u64], timeout: Option<Duration>) -> bool {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut inner = self.lock();
        loop {
            self.expire(&mut inner);
            if inner.interrupted {
                return false;
            }
            let open = ids
                .iter()
                .any(|id| inner.entries.get(id).is_some_and(|e| e.envelope.status == QueryStatus::Pending));
            if !open {
                return true;
            }
            // wake periodically so expiry is noticed without new traffic
            let mut wait = Duration::from_millis(200);
            if let Some(d) = deadline {
                let now = Instant::now();
                if now >= d {
                    return false;
                }
                wait = wait.min(d - now);
            }
            inner = self.changed.wait_timeout(inner, wait).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    pub fn counts(&self) -> QueueCounts {
        let mut inner = self.lock();
        self.expire(&mut inner);
        inner.counts
    }

    pub fn set_status(&self, status: RunStatus) {
        self.lock().status = status;
    }

    /// Releases every blocked and future wait.
    pub fn interrupt(&self) {
        self.lock().interrupted = true;
        self.changed.notify_all();
    }

    pub fn set_finished(&self) {
        self.lock().finished = true;
        self.changed.notify_all();
    }

    pub fn status(&self) -> StatusReport {
        let mut inner = self.lock();
        self.expire(&mut inner);
        StatusReport {
            run: inner.status.clone(),
            queue: inner.counts,
            finished: inner.finished,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WaitMode {
    /// `collect` returns whatever has been answered so far.
    NonBlocking,
    /// `collect` blocks until every query of the round is answered or
    /// expired, or the timeout passes.
    Wait(Option<Duration>),
}

/// Teacher backed by the HTTP queue.
pub struct HttpTeacher {
    queue: Arc<QueryQueue>,
    env: Box<dyn Environment>,
    mode: WaitMode,
    outstanding: Vec<u64>,
    dropped: usize,
}

impl HttpTeacher {
    pub fn new(queue: Arc<QueryQueue>, env: Box<dyn Environment>, mode: WaitMode) -> Self {
        HttpTeacher {
            queue,
            env,
            mode,
            outstanding: Vec::new(),
            dropped: 0,
        }
    }

    /// Queries turned away because the queue was full.
    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

impl Teacher for HttpTeacher {
    fn submit(&mut self, queries: Vec<TeacherQuery>) -> Result<(), TeacherError> {
        for q in queries {
            match self.queue.enqueue(self.env.as_ref(), q) {
                Ok(id) => self.outstanding.push(id),
                Err(ServiceError::QueueFull { capacity }) => {
                    self.dropped += 1;
                    log::warn!("query queue full at {capacity}; dropping query");
                }
                Err(e) => return Err(TeacherError::Unavailable(e.to_string())),
            }
        }
        Ok(())
    }

    fn collect(&mut self) -> Result<Vec<PreferenceRecord>, TeacherError> {
        if let WaitMode::Wait(timeout) = self.mode {
            if !self.queue.wait_resolved(&self.outstanding, timeout) {
                log::warn!("timed out waiting for labels; continuing with what arrived");
            }
        }
        self.outstanding.clear();
        Ok(self.queue.take_answered())
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

/// Publishes run progress to the queue and ends the run when `stop` is set.
pub struct ServiceHooks {
    pub queue: Arc<QueryQueue>,
    pub stop: Arc<AtomicBool>,
    status: RunStatus,
}

impl ServiceHooks {
    pub fn new(queue: Arc<QueryQueue>, stop: Arc<AtomicBool>) -> Self {
        ServiceHooks {
            queue,
            stop,
            status: RunStatus::default(),
        }
    }
}

impl RunHooks for ServiceHooks {
    fn on_status(&mut self, status: &RunStatus) {
        self.status = status.clone();
        self.queue.set_status(status.clone());
    }

    fn on_metric(&mut self, record: &MetricRecord) {
        self.status.eu = Some(record.eu);
        self.status.hv = Some(record.hv);
        self.queue.set_status(self.status.clone());
    }

    fn should_stop(&mut self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }
}

#[derive(Deserialize)]
struct LimitParam {
    limit: Option<usize>,
}

const DEFAULT_LIMIT: usize = 20;

async fn get_queries(AxumState(q): AxumState<Arc<QueryQueue>>, Query(p): Query<LimitParam>) -> Json<Vec<QueryEnvelope>> {
    Json(q.fetch_pending(p.limit.unwrap_or(DEFAULT_LIMIT)))
}

async fn post_label(
    AxumState(q): AxumState<Arc<QueryQueue>>,
    Json(body): Json<LabelSubmission>,
) -> Result<Json<LabelAck>, ServiceError> {
    q.submit_label(body.query_id, body.label).map(Json)
}

async fn get_status(AxumState(q): AxumState<Arc<QueryQueue>>) -> Json<StatusReport> {
    Json(q.status())
}

pub fn router(queue: Arc<QueryQueue>) -> Router {
    Router::new()
        .route("/queries", get(get_queries))
        .route("/labels", post(post_label))
        .route("/status", get(get_status))
        .with_state(queue)
}

/// A server running on its own thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    /// Stops accepting connections and joins the server thread.
    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Binds `addr` on the calling thread (so a busy port fails here) and
/// serves the queue from a background thread.
pub fn spawn_server(addr: SocketAddr, queue: Arc<QueryQueue>) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let bound = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("pref-service".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(queue))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    })?;
    Ok(ServerHandle {
        addr: bound,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Per-id lookup used by tests and tools: the envelope in any status.
impl QueryQueue {
    pub fn envelope(&self, id: u64) -> Option<QueryEnvelope> {
        self.lock().entries.get(&id).map(|e| e.envelope.clone())
    }
}

/// Count of answered envelopes by id; each record traces to one envelope.
pub fn answered_ids(queue: &QueryQueue) -> HashMap<u64, f64> {
    queue
        .lock()
        .entries
        .iter()
        .filter_map(|(id, e)| e.envelope.label.map(|l| (*id, l)))
        .collect()
}

/// The label a scripted teacher would give, computed from revealed ground
/// truth. `None` when the envelope carries none.
pub fn scripted_answer(envelope: &QueryEnvelope, gamma: f64) -> Option<f64> {
    let gt = envelope.ground_truth.as_ref()?;
    let w = make_weight(&envelope.weight).ok()?;
    let r0 = w.dot(&discounted_sum(&gt.first, gamma));
    let r1 = w.dot(&discounted_sum(&gt.second, gamma));
    Some(if (r1 - r0).abs() <= TIE_TOLERANCE {
        0.5
    } else if r1 > r0 {
        Label::SecondPreferred.value()
    } else {
        Label::FirstPreferred.value()
    })
}
