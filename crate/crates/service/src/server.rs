//! Websocket transport around [`Session`]. One task per connection.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use copilot_core::envs::EnvKind;
use futures_util::{FutureExt, SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::{Error as WsError, Message};

use crate::protocol::{ErrorCode, Inbound, Outbound};
use crate::session::{Copilots, Session};

pub struct Server {
    listener: TcpListener,
    copilots: Arc<Copilots>,
    envs: Arc<[EnvKind]>,
    next_id: Arc<AtomicU64>,
}

impl Server {
    /// Binds `addr`; port 0 picks a free port.
    pub async fn bind(addr: SocketAddr, copilots: Copilots) -> std::io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr).await?,
            copilots: Arc::new(copilots),
            envs: Arc::from([]),
            next_id: Arc::new(AtomicU64::new(1)),
        })
    }

    /// Restrict sessions to these environments; empty serves all.
    pub fn with_envs(self, envs: &[EnvKind]) -> Self {
        Self { envs: Arc::from(envs), ..self }
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the task is dropped.
    pub async fn run(self) -> std::io::Result<()> {
        loop {
            let (stream, peer) = self.listener.accept().await?;
            let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
            let session = Session::new(id.clone(), self.copilots.clone()).with_envs(self.envs.clone());
            tokio::spawn(async move {
                if let Err(e) = serve_connection(stream, session).await {
                    log::warn!("{id} from {peer}: {e}");
                }
                log::debug!("{id} closed");
            });
        }
    }
}

async fn serve_connection(stream: TcpStream, mut session: Session) -> Result<(), WsError> {
    stream.set_nodelay(true).ok();
    let ws = tokio_tungstenite::accept_async(stream).await?;
    let (mut tx, mut rx) = ws.split();
    while let Some(first) = rx.next().await {
        // Take everything already buffered so a backlog of actions collapses to the newest one.
        let mut batch = vec![first?];
        while let Some(Some(more)) = rx.next().now_or_never() {
            batch.push(more?);
        }
        let mut closed = false;
        let mut inbound = Vec::with_capacity(batch.len());
        for msg in batch {
            match msg {
                Message::Text(text) => inbound.push(parse(text.as_str())),
                Message::Binary(_) => {
                    inbound.push(Err(Outbound::error(ErrorCode::BadMessage, "binary frames are not supported")))
                }
                Message::Close(_) => {
                    closed = true;
                    break;
                }
                _ => {}
            }
        }
        for item in coalesce(inbound) {
            let replies = match item {
                Ok(msg) => session.handle(msg),
                Err(e) => vec![e],
            };
            for r in replies {
                tx.feed(Message::text(r.to_frame())).await?;
            }
        }
        tx.flush().await?;
        if closed {
            break;
        }
    }
    Ok(())
}

fn parse(text: &str) -> Result<Inbound, Outbound> {
    serde_json::from_str(text).map_err(|e| Outbound::error(ErrorCode::BadMessage, e.to_string()))
}

/// Drops a pilot action when the next queued frame is also a pilot action.
/// The session then reports the skipped ticks with a `lag` message.
fn coalesce(items: Vec<Result<Inbound, Outbound>>) -> Vec<Result<Inbound, Outbound>> {
    let mut out: Vec<Result<Inbound, Outbound>> = Vec::with_capacity(items.len());
    for item in items {
        if matches!(item, Ok(Inbound::PilotAction { .. }))
            && matches!(out.last(), Some(Ok(Inbound::PilotAction { .. })))
        {
            out.pop();
        }
        out.push(item);
    }
    out
}
