#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use copilot_core::ddpm::{DdpmConfig, DdpmModel};
use copilot_core::envs::{collect_dataset, EnvKind};
use copilot_core::eval::{CsaCopilot, DdpmCopilot};
use copilot_core::forward::{forward_train, ForwardConfig};
use copilot_core::student::{StudentMode, StudentModel};
use copilot_core::teacher::{TeacherConfig, TeacherModel};
use copilot_service::protocol::{Inbound, Outbound};
use copilot_service::{Copilots, Server};
use futures_util::{SinkExt, StreamExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

/// Untrained but full-size copilots: enough for plumbing and timing.
pub fn copilots() -> Copilots {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let teacher = TeacherModel::new(&TeacherConfig::default(), 4, 2, &mut rng).unwrap();
    let (ds, _) = collect_dataset(EnvKind::Lander, 2000, 0).unwrap();
    let (phi, _) =
        forward_train(&ds, &ForwardConfig { steps: 20, eval_every: 10, ..ForwardConfig::default() }).unwrap();
    let ddpm = DdpmModel::new(&DdpmConfig::default(), 4, 2, &mut rng).unwrap();
    Copilots {
        csa: Some(Arc::new(CsaCopilot {
            student: StudentModel::from_teacher(&teacher, StudentMode::Csa).unwrap(),
            phi: None,
        })),
        csa_dagger: Some(Arc::new(CsaCopilot {
            student: StudentModel::from_teacher(&teacher, StudentMode::CsaDagger).unwrap(),
            phi: Some(phi),
        })),
        ddpm: Some(Arc::new(DdpmCopilot { model: ddpm })),
    }
}

pub async fn spawn(copilots: Copilots) -> SocketAddr {
    let server = Server::bind("127.0.0.1:0".parse().unwrap(), copilots).await.unwrap();
    let addr = server.local_addr().unwrap();
    tokio::spawn(server.run());
    addr
}

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub async fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap();
        Self { ws }
    }

    pub async fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::text(text)).await.unwrap();
    }

    pub async fn send(&mut self, msg: &Inbound) {
        self.send_raw(&serde_json::to_string(msg).unwrap()).await;
    }

    pub async fn recv_raw(&mut self) -> String {
        loop {
            match self.ws.next().await.expect("connection open").unwrap() {
                Message::Text(t) => return t.as_str().to_owned(),
                Message::Ping(_) | Message::Pong(_) => continue,
                other => panic!("unexpected frame {other:?}"),
            }
        }
    }

    pub async fn recv(&mut self) -> Outbound {
        serde_json::from_str(&self.recv_raw().await).unwrap()
    }

    pub async fn close(mut self) {
        self.ws.close(None).await.ok();
    }
}
