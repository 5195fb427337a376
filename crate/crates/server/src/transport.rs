//! WebSocket transport around [`Hub`].
//!
//! Each connection gets a writer task that owns the socket sink and stamps
//! outgoing envelopes with a per-connection sequence number starting at 0.
//! The reader loop decodes client envelopes, feeds them to the hub and
//! routes the resulting messages by connection id.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use parking_lot::Mutex;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use webrl_core::assistant::consult;
use webrl_core::hub::{ConnId, Effects, Hub, HubOptions, RecordQueue, RestoreReport};
use webrl_core::persistence::{LogFile, QueueStats, SaveQueue};
use webrl_core::protocol::{decode_client, encode_server, ErrorCode, ServerMessage};
use webrl_core::stage::{Experiment, ExperimentDefinition};

use crate::advisor::Advisors;
use crate::config::ServerConfig;

enum Outgoing {
    Message(Box<ServerMessage>, bool),
    Ping,
    Close,
}

struct Shared {
    hub: Arc<Hub>,
    conns: Mutex<HashMap<ConnId, mpsc::UnboundedSender<Outgoing>>>,
    advisors: Advisors,
    heartbeat: Duration,
    missed_heartbeats: u32,
    stop: watch::Receiver<bool>,
}

impl Shared {
    fn dispatch(self: &Arc<Self>, fx: Effects) {
        {
            let conns = self.conns.lock();
            for o in fx.out {
                if let Some(tx) = conns.get(&o.conn) {
                    let _ = tx.send(Outgoing::Message(Box::new(o.message), o.close));
                }
            }
        }
        if let Some(job) = fx.chat {
            let shared = self.clone();
            tokio::spawn(async move {
                let advisor = shared.advisors.get(&job.config);
                let deadline = Duration::from_millis(job.config.deadline_ms);
                let reply = consult(
                    advisor.as_ref(),
                    &job.description,
                    &job.transcript,
                    deadline,
                )
                .await;
                let fx = shared.hub.chat_reply(&job, reply);
                shared.dispatch(fx);
            });
        }
    }
}

/// Routes `/ws` and `/health`. Setting `stop` to true closes every open
/// connection.
pub fn router(
    hub: Arc<Hub>,
    heartbeat: Duration,
    missed_heartbeats: u32,
    stop: watch::Receiver<bool>,
) -> Router {
    let shared = Arc::new(Shared {
        hub,
        conns: Mutex::new(HashMap::new()),
        advisors: Advisors::default(),
        heartbeat,
        missed_heartbeats,
        stop,
    });
    Router::new()
        .route("/ws", get(upgrade))
        .route("/health", get(|| async { "ok" }))
        .with_state(shared)
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(shared, socket))
}

async fn connection(shared: Arc<Shared>, socket: WebSocket) {
    let conn = shared.hub.next_conn_id();
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Outgoing>();
    shared.conns.lock().insert(conn, tx.clone());

    let writer = tokio::spawn(async move {
        let mut seq = 0u64;
        while let Some(item) = rx.recv().await {
            match item {
                Outgoing::Close => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
                Outgoing::Ping => {
                    if sink.send(Message::Ping(Default::default())).await.is_err() {
                        break;
                    }
                }
                Outgoing::Message(msg, close) => {
                    let text = encode_server(seq, &msg);
                    seq += 1;
                    if sink.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                    if close {
                        let _ = sink.send(Message::Close(None)).await;
                        break;
                    }
                }
            }
        }
    });

    let fatal = |code: ErrorCode, text: String| {
        Outgoing::Message(Box::new(ServerMessage::error(code, text)), true)
    };
    let mut stop = shared.stop.clone();
    let mut session = None;
    let mut heard = false;
    let mut missed = 0u32;
    let mut tick = tokio::time::interval(shared.heartbeat);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    tick.tick().await;
    loop {
        tokio::select! {
            incoming = stream.next() => {
                let text = match incoming {
                    None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let _ = tx.send(fatal(ErrorCode::Malformed, "binary frames are not accepted".into()));
                        break;
                    }
                    Some(Ok(_)) => {
                        heard = true;
                        continue;
                    }
                };
                heard = true;
                let envelope = match decode_client(text.as_str()) {
                    Ok(e) => e,
                    Err(e) => {
                        let _ = tx.send(fatal(ErrorCode::Malformed, e.to_string()));
                        break;
                    }
                };
                let fx = match session {
                    None => {
                        let (bound, fx) = shared.hub.hello(conn, &envelope.body);
                        session = bound;
                        fx
                    }
                    Some(s) => shared.hub.handle(conn, s, &envelope.body),
                };
                let closing = fx.out.iter().any(|o| o.conn == conn && o.close);
                shared.dispatch(fx);
                if closing {
                    break;
                }
            }
            _ = tick.tick() => {
                if heard {
                    missed = 0;
                } else {
                    missed += 1;
                }
                heard = false;
                if missed >= shared.missed_heartbeats {
                    if let Some(s) = session.take() {
                        tracing::info!(session = %s, conn, "heartbeats missed; session idle");
                        shared.hub.mark_idle(s);
                    }
                    break;
                }
                let _ = tx.send(Outgoing::Ping);
            }
            _ = tx.closed() => break,
            _ = stop.wait_for(|s| *s) => {
                let _ = tx.send(Outgoing::Close);
                break;
            }
        }
    }

    shared.conns.lock().remove(&conn);
    if let Some(s) = session {
        shared.hub.disconnect(conn, s);
    }
    drop(tx);
    let _ = writer.await;
}

/// Loads and checks an experiment definition.
pub fn load_experiment(path: &std::path::Path) -> anyhow::Result<Experiment> {
    let def = ExperimentDefinition::load(path)?;
    Ok(Experiment::new(def)?)
}

/// A server bound to a socket.
pub struct Running {
    pub addr: SocketAddr,
    pub hub: Arc<Hub>,
    pub restore: RestoreReport,
    queue: Arc<SaveQueue>,
    stop: watch::Sender<bool>,
    task: JoinHandle<std::io::Result<()>>,
}

impl Running {
    pub fn queue(&self) -> &SaveQueue {
        &self.queue
    }

    /// Stops accepting, closes connections and drains the save queue.
    pub async fn shutdown(self) -> anyhow::Result<QueueStats> {
        let _ = self.stop.send(true);
        if tokio::time::timeout(Duration::from_secs(5), self.task)
            .await
            .is_err()
        {
            tracing::warn!("connections still open at shutdown");
        }
        drop(self.hub);
        let queue = self.queue;
        tokio::task::spawn_blocking(move || {
            let mut queue = queue;
            loop {
                match Arc::try_unwrap(queue) {
                    Ok(q) => return Ok(q.shutdown()),
                    Err(q) => {
                        if !q.flush(Duration::from_millis(100)) {
                            tracing::warn!(pending = q.pending(), "save queue still draining");
                        }
                        queue = q;
                        std::thread::sleep(Duration::from_millis(10));
                    }
                }
            }
        })
        .await
        .context("queue drain task")?
    }
}

/// Opens the data files, restores sessions from the log and starts serving.
pub async fn start(config: &ServerConfig, experiment: Experiment) -> anyhow::Result<Running> {
    config.validate()?;
    std::fs::create_dir_all(&config.data_dir)
        .with_context(|| format!("creating {}", config.data_dir.display()))?;
    let (log, scan) = LogFile::open(config.log_path(), config.fsync)
        .with_context(|| format!("opening {}", config.log_path().display()))?;
    if let Some(c) = &scan.corruption {
        tracing::warn!(offset = c.offset, reason = %c.reason, "record log had an unreadable tail");
    }
    let (dead, _) = LogFile::open(config.dead_letter_path(), config.fsync)
        .with_context(|| format!("opening {}", config.dead_letter_path().display()))?;
    let queue = Arc::new(
        SaveQueue::start(config.queue.clone(), Box::new(log), Box::new(dead))
            .map_err(anyhow::Error::msg)?,
    );
    let (hub, report) = Hub::restore(
        Arc::new(experiment),
        queue.clone() as Arc<dyn RecordQueue>,
        HubOptions::default(),
        &scan.records,
    );
    tracing::info!(
        restored = report.restored,
        failed = report.failed.len(),
        "sessions restored"
    );
    let hub = Arc::new(hub);
    let (stop, stopped) = watch::channel(false);
    let app = router(
        hub.clone(),
        config.heartbeat(),
        config.missed_heartbeats,
        stopped.clone(),
    );
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .with_context(|| format!("binding {}", config.listen))?;
    let addr = listener.local_addr()?;
    let task = tokio::spawn(async move {
        let mut stopped = stopped;
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = stopped.wait_for(|s| *s).await;
            })
            .await
    });
    tracing::info!(%addr, "listening");
    Ok(Running {
        addr,
        hub,
        restore: report,
        queue,
        stop,
        task,
    })
}
