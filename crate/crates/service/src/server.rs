//! HTTP front end for the filter.
//!
//! Every click handler takes the engine lock for the whole
//! evict/query/decide/record step and, still holding it, hands the decision
//! record to the single log writer. Queue order therefore equals decision
//! order, and the response is only sent once the writer has flushed the
//! record.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clickshield_core::{ClickEvent, Decision, EngineError, FilterEngine};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, oneshot};
use tracing::{error, info, warn};

use crate::config::ServiceConfig;
use crate::decision_log::{DecisionLogWriter, DecisionRecord};

struct LogJob {
    line: String,
    done: oneshot::Sender<std::io::Result<()>>,
}

struct EngineSlot {
    engine: FilterEngine,
    next_seq: u64,
}

pub struct AppState {
    slot: Mutex<EngineSlot>,
    log: Option<mpsc::Sender<LogJob>>,
    max_clock_skew: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct ClickRequest {
    source: String,
    dest: String,
    time: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ClickResponse {
    seq: u64,
    #[serde(flatten)]
    decision: Decision,
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn now_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl AppState {
    fn parse_click(&self, body: &[u8]) -> Result<ClickEvent, Response> {
        let bad = |msg: String| error_response(StatusCode::BAD_REQUEST, msg);
        let req: ClickRequest = serde_json::from_slice(body).map_err(|e| bad(format!("malformed body: {e}")))?;
        let source: Ipv4Addr = req
            .source
            .parse()
            .map_err(|_| bad(format!("invalid IPv4 source {:?}", req.source)))?;
        let now = now_seconds();
        let time = match req.time {
            Some(t) => {
                if let Some(skew) = self.max_clock_skew {
                    if (t - now).abs() > skew {
                        return Err(bad(format!("timestamp {t} is more than {skew}s from server time")));
                    }
                }
                t
            }
            None => now,
        };
        ClickEvent::new(source, req.dest, time).map_err(|e| bad(e.to_string()))
    }
}

async fn post_click(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let click = match state.parse_click(&body) {
        Ok(c) => c,
        Err(resp) => return resp,
    };

    // Claim queue space before deciding so a full queue leaves state untouched.
    let permit = match &state.log {
        Some(tx) => match tx.try_reserve() {
            Ok(p) => Some(p),
            Err(mpsc::error::TrySendError::Full(())) => {
                return error_response(StatusCode::SERVICE_UNAVAILABLE, "decision log queue is full")
            }
            Err(mpsc::error::TrySendError::Closed(())) => {
                return error_response(StatusCode::INTERNAL_SERVER_ERROR, "decision log is closed")
            }
        },
        None => None,
    };

    let (seq, decision, ack) = {
        let mut slot = state.slot.lock().expect("engine lock poisoned");
        let decision = match slot.engine.handle_click(&click) {
            Ok(d) => d,
            Err(e @ EngineError::Backpressure(_)) => {
                return error_response(StatusCode::SERVICE_UNAVAILABLE, e.to_string())
            }
            Err(e @ EngineError::InvalidClick(_)) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
        };
        let seq = slot.next_seq;
        slot.next_seq += 1;
        let ack = permit.map(|permit| {
            let record = DecisionRecord {
                seq,
                click,
                decision: decision.clone(),
            };
            let line = serde_json::to_string(&record).expect("records serialize");
            let (done, wait) = oneshot::channel();
            permit.send(LogJob { line, done });
            wait
        });
        (seq, decision, ack)
    };

    if let Some(wait) = ack {
        match wait.await {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                error!(seq, "decision log write failed: {e}");
                return error_response(StatusCode::INTERNAL_SERVER_ERROR, "decision log write failed");
            }
            Err(_) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, "decision log writer stopped"),
        }
    }
    Json(ClickResponse { seq, decision }).into_response()
}

async fn get_counters(State(state): State<Arc<AppState>>) -> Json<BTreeMap<String, u64>> {
    let slot = state.slot.lock().expect("engine lock poisoned");
    Json(
        slot.engine
            .counters()
            .iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect(),
    )
}

async fn reset_counters(State(state): State<Arc<AppState>>) -> StatusCode {
    state.slot.lock().expect("engine lock poisoned").engine.reset_counters();
    info!("billing counters reset");
    StatusCode::NO_CONTENT
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/clicks", post(post_click))
        .route("/counters", get(get_counters))
        .route("/counters/reset", post(reset_counters))
        .route("/healthz", get(healthz))
        .with_state(state)
}

// Drains the queue in batches: write everything available, flush once, then
// acknowledge the whole batch.
fn run_log_writer(mut writer: DecisionLogWriter, mut rx: mpsc::Receiver<LogJob>) {
    let mut batch: Vec<LogJob> = Vec::new();
    while let Some(job) = rx.blocking_recv() {
        batch.push(job);
        while let Ok(job) = rx.try_recv() {
            batch.push(job);
            if batch.len() >= 1024 {
                break;
            }
        }
        let result = batch
            .iter()
            .try_for_each(|job| writer.append_line(&job.line))
            .and_then(|()| writer.flush());
        for job in batch.drain(..) {
            let outcome = match &result {
                Ok(()) => Ok(()),
                Err(e) => Err(std::io::Error::new(e.kind(), e.to_string())),
            };
            let _ = job.done.send(outcome);
        }
    }
}

/// A bound, running service.
pub struct RunningServer {
    pub local_addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
    writer: Option<std::thread::JoinHandle<()>>,
}

impl RunningServer {
    /// Stops accepting requests, waits for in-flight ones, and closes the log.
    pub async fn shutdown(mut self) -> anyhow::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait().await
    }

    /// Runs until the server stops on its own (or ctrl-c via [`serve`]).
    pub async fn wait(&mut self) -> anyhow::Result<()> {
        (&mut self.server).await.context("server task panicked")??;
        if let Some(writer) = self.writer.take() {
            tokio::task::spawn_blocking(move || writer.join())
                .await?
                .map_err(|_| anyhow::anyhow!("log writer panicked"))?;
        }
        Ok(())
    }
}

/// Loads the registry, opens the log, binds, and starts serving in the
/// background. Any failure here aborts startup.
pub async fn start(config: &ServiceConfig) -> anyhow::Result<RunningServer> {
    let engine_config = config.engine_config()?;
    let registry = config.load_registry()?;
    info!(ranges = registry.len(), path = %config.registry_path.display(), "registry loaded");

    let (log_tx, writer) = match &config.decision_log_path {
        Some(path) => {
            let (tx, handle) = spawn_writer(path, config.log_queue_capacity)?;
            (Some(tx), Some(handle))
        }
        None => {
            warn!("decision log disabled");
            (None, None)
        }
    };

    let state = Arc::new(AppState {
        slot: Mutex::new(EngineSlot {
            engine: FilterEngine::new(engine_config, registry),
            next_seq: 0,
        }),
        log: log_tx,
        max_clock_skew: config.max_clock_skew_seconds,
    });

    let listener = tokio::net::TcpListener::bind(config.listen_address)
        .await
        .with_context(|| format!("binding {}", config.listen_address))?;
    let local_addr = listener.local_addr()?;
    info!(%local_addr, "listening");

    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
    let app = router(state);
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = shutdown_rx.await;
            })
            .await
    });

    Ok(RunningServer {
        local_addr,
        shutdown: Some(shutdown_tx),
        server,
        writer,
    })
}

fn spawn_writer(
    path: &Path,
    queue: usize,
) -> anyhow::Result<(mpsc::Sender<LogJob>, std::thread::JoinHandle<()>)> {
    let (writer, rotated) =
        DecisionLogWriter::create(path).with_context(|| format!("opening decision log {}", path.display()))?;
    if let Some(old) = rotated {
        info!(previous = %old.display(), "rotated existing decision log");
    }
    let (tx, rx) = mpsc::channel(queue);
    let handle = std::thread::Builder::new()
        .name("decision-log".into())
        .spawn(move || run_log_writer(writer, rx))?;
    Ok((tx, handle))
}

/// Runs the service until ctrl-c.
pub async fn serve(config: &ServiceConfig) -> anyhow::Result<()> {
    let mut running = start(config).await?;
    let shutdown = running.shutdown.take();
    tokio::select! {
        res = running.wait() => return res,
        _ = tokio::signal::ctrl_c() => {}
    }
    info!("shutting down");
    if let Some(tx) = shutdown {
        let _ = tx.send(());
    }
    running.wait().await
}
