//! The network coordinator: serves the volunteer WebSocket and a landing page,
//! and runs the job's event loop.
//!
//! Connection handlers only translate between sockets and the loop's event
//! queue. The loop owns the [`Scheduler`], the input reader's channel and the
//! output sink.

use std::collections::{HashMap, VecDeque};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::serve::ListenerExt;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use pvc_core::coordinator::{Action, ConnId, JobConfig, Outcome, Pull, Scheduler, ThroughputReport};
use pvc_core::protocol::VOLUNTEER_PATH;
use pvc_core::{decode_message, encode_message, Message};
use serde_json::{json, Value};
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};

/// How long the master waits for workers to hang up after the job is done.
const FAREWELL_GRACE: Duration = Duration::from_secs(2);

/// Input values staged ahead of the scheduler.
const INPUT_BUFFER: usize = 16;

#[derive(Debug, Clone, Default)]
pub struct MasterOptions {
    /// Directory holding the browser worker's `index.html` and its assets.
    pub assets: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct MasterSummary {
    pub report: ThroughputReport,
    pub items: u64,
    pub wall: Duration,
}

enum Outbound {
    Frame(String),
    Close,
}

enum Event {
    Connected(ConnId, mpsc::UnboundedSender<Outbound>),
    Frame(ConnId, String),
    Disconnected(ConnId),
}

#[derive(Clone)]
struct AppState {
    events: mpsc::UnboundedSender<Event>,
    next_conn: Arc<AtomicU64>,
    assets: Option<Arc<PathBuf>>,
}

const HINT: &str = "pvc coordinator\n\n\
    Native workers join with:  pvc work ws://HOST:PORT\n\
    Browser workers are served here when the coordinator is started with --assets DIR.\n";

fn router(state: AppState) -> Router {
    Router::new()
        .route(VOLUNTEER_PATH, get(volunteer))
        .route("/", get(index))
        .route("/{*path}", get(asset))
        .with_state(state)
}

async fn index(State(state): State<AppState>) -> Response {
    match &state.assets {
        Some(dir) => serve_file(dir, Path::new("index.html")).await,
        None => ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], HINT).into_response(),
    }
}

async fn asset(State(state): State<AppState>, UrlPath(path): UrlPath<String>) -> Response {
    let path = PathBuf::from(path);
    let safe = path.components().all(|c| matches!(c, Component::Normal(_)));
    match &state.assets {
        Some(dir) if safe => serve_file(dir, &path).await,
        _ => StatusCode::NOT_FOUND.into_response(),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("wasm") => "application/wasm",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn serve_file(dir: &Path, path: &Path) -> Response {
    match tokio::fs::read(dir.join(path)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn volunteer(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn connection(socket: WebSocket, state: AppState) {
    let conn = ConnId(state.next_conn.fetch_add(1, Ordering::Relaxed));
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel();
    if state.events.send(Event::Connected(conn, tx)).is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            match out {
                Outbound::Frame(text) => {
                    if sink.send(WsMessage::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Outbound::Close => {
                    let _ = sink.send(WsMessage::Close(None)).await;
                    break;
                }
            }
        }
    });
    while let Some(Ok(frame)) = stream.next().await {
        match frame {
            WsMessage::Text(text) => {
                if state.events.send(Event::Frame(conn, text.as_str().to_owned())).is_err() {
                    break;
                }
            }
            WsMessage::Close(_) => break,
            _ => {}
        }
    }
    let _ = state.events.send(Event::Disconnected(conn));
    let _ = writer.await;
}

type InputLine = Result<Value>;

/// Reads newline-delimited JSON values into a bounded channel, so reading
/// stops whenever the scheduler stops asking for input.
fn spawn_reader<R>(input: R) -> mpsc::Receiver<InputLine>
where
    R: AsyncBufRead + Unpin + Send + 'static,
{
    let (tx, rx) = mpsc::channel(INPUT_BUFFER);
    tokio::spawn(async move {
        let mut lines = input.lines();
        let mut number = 0u64;
        loop {
            let line = match lines.next_line().await {
                Ok(Some(line)) => line,
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Err(anyhow::Error::new(e).context("reading input"))).await;
                    break;
                }
            };
            number += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str(&line).with_context(|| format!("input line {number} is not JSON"));
            let failed = parsed.is_err();
            if tx.send(parsed).await.is_err() || failed {
                break;
            }
        }
    });
    rx
}

fn output_line(index: u64, outcome: &Outcome) -> String {
    let record = match outcome {
        Ok(value) => json!({"index": index, "value": value}),
        Err(message) => json!({"index": index, "error": message}),
    };
    let mut line = record.to_string();
    line.push('\n');
    line
}

struct Loop {
    scheduler: Scheduler,
    peers: HashMap<ConnId, mpsc::UnboundedSender<Outbound>>,
    input: mpsc::Receiver<InputLine>,
    staged: VecDeque<Value>,
    input_error: Option<anyhow::Error>,
    input_ended: bool,
    started: Instant,
}

impl Loop {
    fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send(conn, message) => {
                    if let Some(peer) = self.peers.get(&conn) {
                        let _ = peer.send(Outbound::Frame(encode_message(&message)));
                    }
                }
                Action::Close(conn) => {
                    if let Some(peer) = self.peers.remove(&conn) {
                        let _ = peer.send(Outbound::Close);
                    }
                }
            }
        }
    }

    fn pump(&mut self) {
        let staged = &mut self.staged;
        let input = &mut self.input;
        let error = &mut self.input_error;
        let ended = &mut self.input_ended;
        let actions = self.scheduler.pump(&mut || {
            if let Some(value) = staged.pop_front() {
                return Pull::Item(value);
            }
            if *ended {
                return Pull::End;
            }
            match input.try_recv() {
                Ok(Ok(value)) => Pull::Item(value),
                Ok(Err(e)) => {
                    *error = Some(e);
                    *ended = true;
                    Pull::End
                }
                Err(mpsc::error::TryRecvError::Empty) => Pull::Wait,
                Err(mpsc::error::TryRecvError::Disconnected) => {
                    *ended = true;
                    Pull::End
                }
            }
        });
        self.apply(actions);
    }

    fn on_event(&mut self, event: Event) {
        match event {
            Event::Connected(conn, tx) => {
                log::debug!("{conn}: connected");
                self.peers.insert(conn, tx);
            }
            Event::Frame(conn, text) => {
                let now = self.now_ms();
                match decode_message(&text) {
                    Ok(message) => {
                        let actions = self.scheduler.on_message(conn, message, now);
                        self.apply(actions);
                    }
                    Err(e) => {
                        log::warn!("{conn}: protocol error: {e}");
                        self.scheduler.on_disconnect(conn);
                        self.apply(vec![Action::Close(conn)]);
                    }
                }
            }
            Event::Disconnected(conn) => {
                log::debug!("{conn}: disconnected");
                self.peers.remove(&conn);
                self.scheduler.on_disconnect(conn);
            }
        }
    }
}

/// Runs one job to completion: reads `input`, lends it to the workers that
/// connect on `listener`, and writes ordered results to `output`.
pub async fn run_master<R, W>(
    config: JobConfig,
    listener: TcpListener,
    options: MasterOptions,
    input: R,
    mut output: W,
) -> Result<MasterSummary>
where
    R: AsyncBufRead + Unpin + Send + 'static,
    W: AsyncWrite + Unpin,
{
    let (events_tx, mut events) = mpsc::unbounded_channel();
    let state = AppState {
        events: events_tx,
        next_conn: Arc::new(AtomicU64::new(0)),
        assets: options.assets.map(Arc::new),
    };
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let listener = listener.tap_io(|tcp| {
            if let Err(e) = tcp.set_nodelay(true) {
                log::debug!("TCP_NODELAY: {e}");
            }
        });
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await
    });

    let period = config.heartbeat_period;
    let mut job = Loop {
        scheduler: Scheduler::new(config),
        peers: HashMap::new(),
        input: spawn_reader(input),
        staged: VecDeque::new(),
        input_error: None,
        input_ended: false,
        started: Instant::now(),
    };
    let mut tick = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    let mut items = 0u64;
    job.pump();
    loop {
        let ready = job.scheduler.take_ready();
        if !ready.is_empty() {
            let mut chunk = String::new();
            for (index, outcome) in &ready {
                chunk.push_str(&output_line(*index, outcome));
            }
            items += ready.len() as u64;
            output.write_all(chunk.as_bytes()).await.context("writing output")?;
            output.flush().await.context("writing output")?;
        }
        if let Some(e) = job.input_error.take() {
            stop(&mut job, stop_tx, server).await;
            return Err(e);
        }
        if job.scheduler.is_done() {
            break;
        }
        let wants_input = job.scheduler.needs_input() && !job.input_ended && job.staged.is_empty();
        tokio::select! {
            event = events.recv() => {
                let Some(event) = event else { bail!("connection handlers stopped") };
                job.on_event(event);
            }
            line = job.input.recv(), if wants_input => match line {
                Some(Ok(value)) => job.staged.push_back(value),
                Some(Err(e)) => {
                    job.input_error = Some(e);
                    job.input_ended = true;
                }
                None => job.input_ended = true,
            },
            _ = tick.tick() => {
                let now = job.now_ms();
                let actions = job.scheduler.on_tick(now);
                job.apply(actions);
            }
        }
        job.pump();
    }

    let now = job.now_ms();
    let wall = Duration::from_millis(now.saturating_sub(job.scheduler.started_at().unwrap_or(now)));
    let report = job.scheduler.report(wall);
    farewell(&mut job, &mut events).await;
    stop(&mut job, stop_tx, server).await;
    Ok(MasterSummary { report, items, wall })
}

/// Says goodbye to every worker and waits briefly for them to hang up.
async fn farewell(job: &mut Loop, events: &mut mpsc::UnboundedReceiver<Event>) {
    let bye = encode_message(&Message::Bye {});
    for peer in job.peers.values() {
        let _ = peer.send(Outbound::Frame(bye.clone()));
        let _ = peer.send(Outbound::Close);
    }
    let deadline = tokio::time::Instant::now() + FAREWELL_GRACE;
    while !job.peers.is_empty() {
        match tokio::time::timeout_at(deadline, events.recv()).await {
            Ok(Some(Event::Disconnected(conn))) => {
                job.peers.remove(&conn);
            }
            Ok(Some(Event::Connected(conn, tx))) => {
                let _ = tx.send(Outbound::Frame(bye.clone()));
                let _ = tx.send(Outbound::Close);
                job.peers.insert(conn, tx);
            }
            Ok(Some(Event::Frame(..))) => {}
            Ok(None) | Err(_) => break,
        }
    }
}

async fn stop(job: &mut Loop, stop_tx: oneshot::Sender<()>, server: tokio::task::JoinHandle<std::io::Result<()>>) {
    for peer in job.peers.values() {
        let _ = peer.send(Outbound::Close);
    }
    job.peers.clear();
    let _ = stop_tx.send(());
    if tokio::time::timeout(FAREWELL_GRACE, server).await.is_err() {
        log::warn!("server did not shut down in time");
    }
}
