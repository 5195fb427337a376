#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};
use webrl_core::hub::wall_ms;
use webrl_core::protocol::{ClientMessage, Envelope, ServerMessage};
use webrl_core::sim::SimClient;
use webrl_core::stage::Experiment;
use webrl_server::{start, Running, ServerConfig};

pub fn config(dir: &Path) -> ServerConfig {
    let mut c = ServerConfig {
        listen: "127.0.0.1:0".into(),
        data_dir: dir.to_path_buf(),
        fsync: false,
        ..ServerConfig::default()
    };
    c.queue.backoff.base_ms = 1.0;
    c
}

pub async fn serve(cfg: &ServerConfig, exp: Experiment) -> Running {
    start(cfg, exp).await.expect("server starts")
}

pub struct WsClient {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    seq: u64,
}

impl WsClient {
    pub async fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = connect_async(format!("ws://{addr}/ws"))
            .await
            .expect("connects");
        Self { ws, seq: 0 }
    }

    pub async fn send(&mut self, body: &ClientMessage) {
        let text = serde_json::to_string(&Envelope {
            seq: self.seq,
            body: body.clone(),
        })
        .unwrap();
        self.seq += 1;
        self.send_raw(&text).await;
    }

    pub async fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::text(text)).await.expect("send");
    }

    /// Next server envelope, or `None` on close or after `timeout`.
    pub async fn recv(&mut self, timeout: Duration) -> Option<(u64, ServerMessage)> {
        loop {
            let next = tokio::time::timeout(timeout, self.ws.next()).await.ok()??;
            match next.ok()? {
                Message::Text(t) => {
                    let env: Envelope<ServerMessage> =
                        serde_json::from_str(t.as_str()).expect("server envelope");
                    return Some((env.seq, env.body));
                }
                Message::Close(_) => return None,
                _ => continue,
            }
        }
    }

    /// True once the server has closed the socket.
    pub async fn closed(&mut self, timeout: Duration) -> bool {
        loop {
            match tokio::time::timeout(timeout, self.ws.next()).await {
                Err(_) => return false,
                Ok(None) | Ok(Some(Err(_))) | Ok(Some(Ok(Message::Close(_)))) => return true,
                Ok(Some(Ok(_))) => continue,
            }
        }
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

#[derive(Default)]
pub struct Drive {
    /// Real time between receiving a frame and sending the action.
    pub think: Option<Duration>,
    /// Stop after this many actions.
    pub stop_after: Option<usize>,
    /// Ask this question after the given number of actions.
    pub ask: Option<(usize, String)>,
}

#[derive(Debug, Default)]
pub struct Driven {
    pub seqs: Vec<u64>,
    pub actions: usize,
    /// `(t1, t2)` of each action as sent.
    pub stamps: Vec<(f64, f64)>,
}

/// Feeds server messages to `client` and sends its replies until the
/// experiment completes, the socket closes or `opts.stop_after` is reached.
pub async fn drive(ws: &mut WsClient, client: &mut SimClient, opts: &Drive) -> Driven {
    let mut out = Driven::default();
    let mut asked = false;
    while let Some((seq, msg)) = ws.recv(Duration::from_secs(10)).await {
        let received = wall_ms();
        out.seqs.push(seq);
        for mut reply in client.receive_with_seq(seq, &msg) {
            if let ClientMessage::Action { t1, t2, .. } = &mut reply {
                if let Some(d) = opts.think {
                    tokio::time::sleep(d).await;
                    *t1 = received;
                    *t2 = wall_ms();
                }
                out.stamps.push((*t1, *t2));
                out.actions += 1;
            }
            ws.send(&reply).await;
        }
        if let Some((after, q)) = &opts.ask {
            if !asked && out.actions >= *after {
                asked = true;
                ws.send(&client.ask(q)).await;
            }
        }
        if client.complete || client.closed || opts.stop_after.is_some_and(|n| out.actions >= n) {
            break;
        }
    }
    out
}

/// Reads until the assistant answers.
pub async fn await_reply(ws: &mut WsClient, client: &mut SimClient) -> (String, bool) {
    let before = client.assistant_replies.len();
    while client.assistant_replies.len() == before {
        let (seq, msg) = ws
            .recv(Duration::from_secs(10))
            .await
            .expect("assistant reply");
        let _ = client.receive_with_seq(seq, &msg);
    }
    client.assistant_replies.last().cloned().unwrap()
}
