//! Real-time load: ticks are paced at 20 Hz by the client.

mod common;

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use copilot_core::envs::EnvKind;
use copilot_core::eval::percentile;
use copilot_service::protocol::{CopilotKind, Inbound, Outbound};
use tokio::time::{interval, MissedTickBehavior};

const PERIOD: Duration = Duration::from_millis(50);

#[derive(Default)]
struct Stats {
    ticks: u64,
    /// Ticks reported dropped by the server plus replies that missed the next tick.
    dropped: u64,
    latencies_us: Vec<f64>,
}

async fn drive(addr: SocketAddr, seed: u64, duration: Duration) -> Stats {
    let mut client = common::Client::connect(addr).await;
    client
        .send(&Inbound::Hello { env: EnvKind::Lander, copilot: CopilotKind::Csa, alpha: 0.4, seed, episode: 0 })
        .await;
    assert!(matches!(client.recv().await, Outbound::SessionReady { .. }));
    let mut stats = Stats::default();
    let mut clock = interval(PERIOD);
    clock.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let (mut tick, mut episode) = (0u64, 0u64);
    let end = Instant::now() + duration;
    while Instant::now() < end {
        clock.tick().await;
        tick += 1;
        let sent = Instant::now();
        client.send(&Inbound::PilotAction { tick, a: [0.1, 0.2] }).await;
        loop {
            match client.recv().await {
                Outbound::Lag { dropped } => stats.dropped += dropped,
                Outbound::StepResult { outcome, latency_us, .. } => {
                    stats.ticks += 1;
                    stats.latencies_us.push(latency_us);
                    if sent.elapsed() > PERIOD {
                        stats.dropped += 1;
                    }
                    if outcome.is_terminal() {
                        episode += 1;
                        client.send(&Inbound::Reset { seed, episode }).await;
                        assert!(matches!(client.recv().await, Outbound::SessionReady { .. }));
                        tick = 0;
                    }
                    break;
                }
                other => panic!("{other:?}"),
            }
        }
    }
    client.close().await;
    stats
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn one_session_at_20_hz_for_60_s_drops_nothing() {
    let addr = common::spawn(common::copilots()).await;
    let stats = drive(addr, 1, Duration::from_secs(60)).await;
    println!("ticks {} dropped {} p99 {:.0} us", stats.ticks, stats.dropped, percentile(&stats.latencies_us, 99.0));
    assert!(stats.ticks >= 1150, "only {} ticks", stats.ticks);
    assert_eq!(stats.dropped, 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn eight_sessions_keep_p99_assist_latency_under_10_ms() {
    let addr = common::spawn(common::copilots()).await;
    let runs: Vec<_> = (0..8).map(|s| tokio::spawn(drive(addr, 100 + s, Duration::from_secs(15)))).collect();
    let mut all = Vec::new();
    let mut dropped = 0;
    for r in runs {
        let s = r.await.unwrap();
        assert!(s.ticks >= 280, "only {} ticks", s.ticks);
        dropped += s.dropped;
        all.extend(s.latencies_us);
    }
    let p99 = percentile(&all, 99.0);
    println!("ticks {} dropped {dropped} p99 {p99:.0} us", all.len());
    assert!(p99 <= 10_000.0, "p99 {p99} us");
    assert_eq!(dropped, 0);
}
