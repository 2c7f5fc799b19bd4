#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use pvc::master::{run_master, MasterOptions, MasterSummary};
use pvc_core::coordinator::JobConfig;
use pvc_core::splitmix::SplitMix64;
use pvc_core::{decode_message, encode_message, Message};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub const STEP: Duration = Duration::from_secs(10);

pub type MasterRun = JoinHandle<(anyhow::Result<MasterSummary>, String)>;

/// Starts a coordinator on a free local port with `input` as its NDJSON input.
pub async fn start_master(config: JobConfig, options: MasterOptions, input: String) -> (u16, MasterRun) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let port = listener.local_addr().unwrap().port();
    let run = tokio::spawn(async move {
        let reader = tokio::io::BufReader::new(std::io::Cursor::new(input.into_bytes()));
        let mut out = Vec::new();
        let summary = run_master(config, listener, options, reader, &mut out).await;
        (summary, String::from_utf8(out).unwrap())
    });
    (port, run)
}

pub async fn finish(run: MasterRun) -> (MasterSummary, String) {
    let (summary, out) = tokio::time::timeout(STEP, run).await.expect("master finishes").unwrap();
    (summary.unwrap(), out)
}

/// A hand-driven protocol client.
pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub async fn connect(port: u16) -> Client {
        let url = format!("ws://127.0.0.1:{port}/volunteer");
        let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        Client { ws }
    }

    pub async fn send(&mut self, message: &Message) {
        self.send_text(&encode_message(message)).await;
    }

    pub async fn send_text(&mut self, text: &str) {
        self.ws.send(WsMessage::text(text.to_owned())).await.unwrap();
    }

    /// Next protocol message; `None` when the master closed the connection.
    pub async fn recv(&mut self) -> Option<Message> {
        loop {
            let frame = tokio::time::timeout(STEP, self.ws.next())
                .await
                .expect("master answers");
            match frame {
                Some(Ok(WsMessage::Text(text))) => return Some(decode_message(text.as_str()).unwrap()),
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return None,
                Some(Ok(_)) => {}
            }
        }
    }

    pub async fn hello(&mut self, agent: &str) -> Message {
        self.send(&Message::Hello {
            agent: agent.into(),
            cores: 1,
            worker_id: None,
        })
        .await;
        self.recv().await.expect("welcome")
    }
}

pub fn lines(values: &[&str]) -> String {
    values.iter().map(|v| format!("{v}\n")).collect()
}

/// `n` random decimal naturals of `digits` digits each, as NDJSON strings.
pub fn big_decimals(n: usize, digits: usize, seed: u64) -> Vec<String> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let mut s = String::with_capacity(digits);
            s.push(char::from(b'1' + rng.below(9) as u8));
            for _ in 1..digits {
                s.push(char::from(b'0' + rng.below(10) as u8));
            }
            s
        })
        .collect()
}

pub fn pvc() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pvc"));
    cmd.env_remove("PVC_PORT").env_remove("RUST_LOG");
    cmd
}

/// A `pvc serve` child process with its standard error collected.
pub struct Serve {
    pub child: Child,
    pub port: u16,
    pub stderr: Arc<Mutex<String>>,
}

impl Serve {
    pub fn spawn(args: &[&str]) -> Serve {
        let mut child = pvc()
            .arg("serve")
            .args(["--port", "0", "--bind", "127.0.0.1"])
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut reader = BufReader::new(child.stderr.take().unwrap());
        let mut first = String::new();
        reader.read_line(&mut first).unwrap();
        let port = first
            .trim()
            .rsplit_once(':')
            .and_then(|(_, rest)| rest.strip_suffix("/volunteer"))
            .and_then(|p| p.parse().ok())
            .unwrap_or_else(|| panic!("unexpected first line {first:?}"));
        let stderr = Arc::new(Mutex::new(first));
        let sink = Arc::clone(&stderr);
        std::thread::spawn(move || {
            let mut rest = String::new();
            let _ = reader.read_to_string(&mut rest);
            sink.lock().unwrap().push_str(&rest);
        });
        Serve { child, port, stderr }
    }

    pub fn url(&self) -> String {
        format!("ws://127.0.0.1:{}", self.port)
    }

    /// Waits for exit, then returns the status and everything written to stderr.
    pub fn wait(mut self, limit: Duration) -> (std::process::ExitStatus, String) {
        let deadline = std::time::Instant::now() + limit;
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                // give the reader thread a moment to drain the pipe
                std::thread::sleep(Duration::from_millis(100));
                return (status, self.stderr.lock().unwrap().clone());
            }
            if std::time::Instant::now() > deadline {
                let _ = self.child.kill();
                panic!("pvc serve did not finish: {}", self.stderr.lock().unwrap());
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

/// Reads the `reprocessed:` and `duplicates:` counters from a printed report.
pub fn report_counter(report: &str, name: &str) -> Option<u64> {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name}: ")))
        .and_then(|v| v.trim().parse().ok())
}
