//! The native worker: one or more independent protocol sessions ("lanes"),
//! each processing its leased items one at a time on a dedicated thread while
//! the session keeps answering pings.

use std::sync::mpsc as std_mpsc;
use std::thread;

use anyhow::{anyhow, bail, Context, Result};
use futures_util::{SinkExt, StreamExt};
use pvc_core::processors::{self, ItemError};
use pvc_core::protocol::VOLUNTEER_PATH;
use pvc_core::{decode_message, encode_message, Message, TaskSpec};
use serde_json::Value;
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message as WsMessage;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub master_url: String,
    pub lanes: u32,
    pub label: String,
}

impl WorkerConfig {
    pub fn new(master_url: impl Into<String>) -> Self {
        Self {
            master_url: master_url.into(),
            lanes: 1,
            label: "native".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SessionSummary {
    pub items: u64,
    pub busy_ms: f64,
}

impl SessionSummary {
    fn merge(&mut self, other: SessionSummary) {
        self.items += other.items;
        self.busy_ms += other.busy_ms;
    }
}

/// How a session ended.
#[derive(Debug)]
pub enum SessionEnd {
    /// The master said bye or closed the connection.
    Closed(SessionSummary),
    /// The connection was lost without a goodbye.
    Dropped(SessionSummary),
}

/// `ws://host:port` becomes `ws://host:port/volunteer`; explicit paths are kept.
pub fn volunteer_url(master_url: &str) -> Result<String> {
    let (scheme, rest) = master_url
        .split_once("://")
        .ok_or_else(|| anyhow!("{master_url:?} is not a ws:// or wss:// URL"))?;
    if scheme != "ws" && scheme != "wss" {
        bail!("{master_url:?} is not a ws:// or wss:// URL");
    }
    if rest.is_empty() {
        bail!("{master_url:?} has no host");
    }
    Ok(match rest.find('/') {
        None => format!("{master_url}{VOLUNTEER_PATH}"),
        Some(at) if rest[at..] == *"/" => format!("{scheme}://{}{VOLUNTEER_PATH}", &rest[..at]),
        Some(_) => master_url.to_owned(),
    })
}

struct Job {
    lease_id: String,
    index: u64,
    value: Value,
}

/// Runs every lane to completion and merges their summaries. Fails if any
/// lane failed; a lane that merely lost its connection counts as finished.
pub async fn run_worker(config: &WorkerConfig) -> Result<SessionSummary> {
    if config.lanes == 0 {
        bail!("lanes must be at least 1");
    }
    let url = volunteer_url(&config.master_url)?;
    let mut lanes = Vec::new();
    for lane in 0..config.lanes {
        let url = url.clone();
        let label = config.label.clone();
        lanes.push(tokio::spawn(async move { run_session(&url, &label, lane).await }));
    }
    let mut total = SessionSummary::default();
    let mut failure = None;
    for lane in lanes {
        match lane.await.context("worker lane panicked")? {
            Ok(SessionEnd::Closed(summary)) => total.merge(summary),
            Ok(SessionEnd::Dropped(summary)) => {
                log::warn!("connection to the master was lost");
                total.merge(summary);
            }
            Err(e) => failure = Some(e),
        }
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(total),
    }
}

/// One protocol session: hello, welcome, then leases until the master hangs up.
pub async fn run_session(url: &str, label: &str, lane: u32) -> Result<SessionEnd> {
    let (socket, _) = tokio_tungstenite::connect_async_with_config(url, None, true)
        .await
        .with_context(|| format!("connecting to {url}"))?;
    let (mut sink, mut stream) = socket.split();
    let hello = Message::Hello {
        agent: label.to_owned(),
        cores: 1,
        worker_id: None,
    };
    sink.send(WsMessage::text(encode_message(&hello))).await?;

    let task = loop {
        let Some(frame) = stream.next().await else {
            bail!("master closed the connection before welcoming us");
        };
        if let Some(message) = decode_frame(frame?)? {
            match message {
                Message::Welcome {
                    worker_id,
                    task,
                    window,
                } => {
                    log::info!(
                        "lane {lane}: joined as {worker_id}, {} with window {window}",
                        task.processor
                    );
                    break task;
                }
                Message::Ping { t } => sink.send(WsMessage::text(encode_message(&Message::Pong { t }))).await?,
                Message::Bye {} => return Ok(SessionEnd::Closed(SessionSummary::default())),
                other => bail!("expected welcome, got {}", other.kind()),
            }
        }
    };
    if processors::lookup(&task.processor).is_err() {
        let _ = sink.send(WsMessage::text(encode_message(&Message::Bye {}))).await;
        let _ = sink.close().await;
        bail!("master asked for unknown processor {:?}", task.processor);
    }

    let (jobs_tx, jobs_rx) = std_mpsc::channel::<Job>();
    let (done_tx, mut done_rx) = mpsc::unbounded_channel::<Message>();
    let processor = thread::Builder::new()
        .name(format!("pvc-lane-{lane}"))
        .spawn(move || process_loop(&task, &jobs_rx, &done_tx))
        .context("starting processing thread")?;

    let mut summary = SessionSummary::default();
    let end = loop {
        tokio::select! {
            frame = stream.next() => {
                let frame = match frame {
                    Some(Ok(frame)) => frame,
                    Some(Err(e)) => {
                        log::debug!("lane {lane}: {e}");
                        break SessionEnd::Dropped(summary);
                    }
                    None => break SessionEnd::Dropped(summary),
                };
                if matches!(frame, WsMessage::Close(_)) {
                    break SessionEnd::Closed(summary);
                }
                match decode_frame(frame)? {
                    Some(Message::Lease { lease_id, items }) => {
                        for item in items {
                            jobs_tx
                                .send(Job { lease_id: lease_id.clone(), index: item.index, value: item.value })
                                .map_err(|_| anyhow!("processing thread stopped"))?;
                        }
                    }
                    Some(Message::Ping { t }) => {
                        sink.send(WsMessage::text(encode_message(&Message::Pong { t }))).await?;
                    }
                    Some(Message::Bye {}) => break SessionEnd::Closed(summary),
                    Some(Message::Pong { .. }) | None => {}
                    Some(other) => bail!("unexpected {} message", other.kind()),
                }
            }
            Some(result) = done_rx.recv() => {
                if let Message::Result { elapsed_ms, .. } = &result {
                    summary.busy_ms += elapsed_ms;
                }
                summary.items += 1;
                if let Err(e) = sink.send(WsMessage::text(encode_message(&result))).await {
                    log::debug!("lane {lane}: {e}");
                    break SessionEnd::Dropped(summary);
                }
            }
        }
    };
    drop(jobs_tx);
    let _ = sink.close().await;
    // the thread finishes its current item, then sees the closed channel
    let _ = tokio::task::spawn_blocking(move || processor.join()).await;
    Ok(end)
}

fn decode_frame(frame: WsMessage) -> Result<Option<Message>> {
    match frame {
        WsMessage::Text(text) => Ok(Some(decode_message(text.as_str())?)),
        _ => Ok(None),
    }
}

fn process_loop(task: &TaskSpec, jobs: &std_mpsc::Receiver<Job>, done: &mpsc::UnboundedSender<Message>) {
    while let Ok(job) = jobs.recv() {
        let processed = processors::process_item(task, &job.value).expect("processor was checked at welcome");
        let message = match processed.outcome {
            Ok(value) => Message::Result {
                lease_id: job.lease_id,
                index: job.index,
                value,
                elapsed_ms: processed.elapsed_ms,
            },
            Err(ItemError { message }) => Message::ItemError {
                lease_id: job.lease_id,
                index: job.index,
                message,
            },
        };
        if done.send(message).is_err() {
            return;
        }
    }
}
