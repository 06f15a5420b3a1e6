mod common;

use std::net::SocketAddr;

use copilot_core::envs::{
    episode_rng, Env, EnvKind, Outcome, Pilot, PilotSpec, SurrogateKind, ENV_STREAM, PILOT_STREAM,
};
use copilot_core::eval::{rollout, Copilot, EpisodeRecord};
use copilot_service::protocol::{CopilotKind, Inbound, Outbound, StateFrame};
use copilot_service::Copilots;

struct Played {
    outcome: Outcome,
    raw: Vec<[f32; 2]>,
    executed: Vec<[f32; 2]>,
    nfe: u64,
}

/// Plays one episode over the socket. The client keeps its own copy of the
/// environment only to produce pilot actions, and checks it against every frame.
async fn play(
    addr: SocketAddr,
    env: EnvKind,
    copilot: CopilotKind,
    pilot: PilotSpec,
    alpha: f64,
    seed: u64,
    episode: u64,
) -> Played {
    let mut client = common::Client::connect(addr).await;
    client.send(&Inbound::Hello { env, copilot, alpha, seed, episode }).await;
    let mut local = Env::reset(env, episode, &mut episode_rng(seed, episode, ENV_STREAM));
    let mut p = Pilot::new(pilot, episode_rng(seed, episode, PILOT_STREAM));
    match client.recv().await {
        Outbound::SessionReady { state, tick: 0, .. } => assert_eq!(state, StateFrame::of(&local)),
        other => panic!("{other:?}"),
    }
    let mut played = Played { outcome: Outcome::Running, raw: vec![], executed: vec![], nfe: 0 };
    let mut tick = 0;
    while played.outcome == Outcome::Running {
        tick += 1;
        let a = p.act(&local);
        client.send(&Inbound::PilotAction { tick, a: [a[0], a[1]] }).await;
        match client.recv().await {
            Outbound::StepResult { tick: t, state, raw, assisted, outcome, nfe, .. } => {
                assert_eq!(t, tick);
                local.step(&assisted).unwrap();
                assert_eq!(state, StateFrame::of(&local), "tick {tick}");
                played.outcome = outcome;
                played.raw.push(raw);
                played.executed.push(assisted);
                played.nfe += nfe as u64;
            }
            other => panic!("{other:?}"),
        }
    }
    client.close().await;
    played
}

fn bits(v: &[[f32; 2]]) -> Vec<[u32; 2]> {
    v.iter().map(|a| [a[0].to_bits(), a[1].to_bits()]).collect()
}

fn lookup(c: &Copilots, kind: CopilotKind) -> Option<&dyn Copilot> {
    match kind {
        CopilotKind::None => None,
        CopilotKind::Csa => c.csa.as_deref(),
        CopilotKind::CsaDagger => c.csa_dagger.as_deref(),
        CopilotKind::Ddpm => c.ddpm.as_deref(),
    }
}

fn assert_same(played: &Played, rec: &EpisodeRecord, label: &str) {
    assert_eq!(played.outcome, rec.outcome, "{label}");
    assert_eq!(played.executed.len(), rec.steps, "{label}");
    assert_eq!(bits(&played.raw), bits(&rec.raw_actions), "{label}");
    assert_eq!(bits(&played.executed), bits(&rec.executed_actions), "{label}");
    assert_eq!(played.nfe, rec.nfe, "{label}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_replay_matches_the_headless_harness() {
    let copilots = common::copilots();
    let addr = common::spawn(copilots.clone()).await;
    let pilot = PilotSpec::Surrogate { surrogate: SurrogateKind::Noised, epsilon: 0.5 };
    for env in [EnvKind::Lander, EnvKind::Slot] {
        for kind in [CopilotKind::None, CopilotKind::Csa, CopilotKind::CsaDagger, CopilotKind::Ddpm] {
            for episode in [0, 3] {
                let alpha = 0.3;
                let played = play(addr, env, kind, pilot, alpha, 11, episode).await;
                let rec = rollout(env, pilot, lookup(&copilots, kind), alpha, 11, episode).unwrap();
                assert_same(&played, &rec, &format!("{env:?} {kind:?} episode {episode}"));
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pass_through_and_zero_alpha_return_the_raw_action() {
    let addr = common::spawn(common::copilots()).await;
    let pilot = PilotSpec::Surrogate { surrogate: SurrogateKind::Noisy, epsilon: 0.7 };
    for (kind, alpha) in [(CopilotKind::None, 0.8), (CopilotKind::Csa, 0.0), (CopilotKind::CsaDagger, 0.0)] {
        let played = play(addr, EnvKind::Lander, kind, pilot, alpha, 4, 1).await;
        assert_eq!(bits(&played.raw), bits(&played.executed), "{kind:?}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn interleaved_sessions_do_not_interfere() {
    let copilots = common::copilots();
    let addr = common::spawn(copilots.clone()).await;
    let mut a = common::Client::connect(addr).await;
    let mut b = common::Client::connect(addr).await;
    a.send(&Inbound::Hello { env: EnvKind::Slot, copilot: CopilotKind::Ddpm, alpha: 0.6, seed: 1, episode: 0 }).await;
    b.send(&Inbound::Hello { env: EnvKind::Lander, copilot: CopilotKind::Ddpm, alpha: 0.4, seed: 2, episode: 5 }).await;
    let (ra, rb) = (a.recv().await, b.recv().await);
    assert!(matches!(ra, Outbound::SessionReady { .. }) && matches!(rb, Outbound::SessionReady { .. }));
    let mut b_frames = Vec::new();
    for tick in 1..=30u64 {
        // A hammers its own session, including a reset and α changes, between B's ticks.
        a.send(&Inbound::SetAlpha { alpha: (tick % 10) as f64 / 10.0 }).await;
        a.send(&Inbound::PilotAction { tick, a: [0.3, -0.2] }).await;
        if tick == 15 {
            a.send(&Inbound::Reset { seed: 9, episode: 0 }).await;
        }
        b.send(&Inbound::PilotAction { tick, a: [0.1, 0.4] }).await;
        b_frames.push(b.recv().await);
    }
    // Same inputs for B alone must reproduce its frames exactly, latency aside.
    let mut solo = common::Client::connect(addr).await;
    solo.send(&Inbound::Hello { env: EnvKind::Lander, copilot: CopilotKind::Ddpm, alpha: 0.4, seed: 2, episode: 5 })
        .await;
    solo.recv().await;
    for (tick, seen) in (1..=30u64).zip(&b_frames) {
        solo.send(&Inbound::PilotAction { tick, a: [0.1, 0.4] }).await;
        let got = solo.recv().await;
        assert_eq!(strip_latency(got), strip_latency(seen.clone()), "tick {tick}");
    }
}

fn strip_latency(o: Outbound) -> Outbound {
    match o {
        Outbound::StepResult { tick, state, raw, assisted, outcome, nfe, alpha, .. } => {
            Outbound::StepResult { tick, state, raw, assisted, outcome, nfe, latency_us: 0.0, alpha }
        }
        other => other,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bursts_are_either_answered_or_reported_as_lag() {
    let addr = common::spawn(common::copilots()).await;
    let mut c = common::Client::connect(addr).await;
    c.send(&Inbound::Hello { env: EnvKind::Slot, copilot: CopilotKind::Ddpm, alpha: 1.0, seed: 3, episode: 0 }).await;
    c.recv().await;
    for tick in 1..=40u64 {
        c.send(&Inbound::PilotAction { tick, a: [0.5, 0.0] }).await;
    }
    let (mut answered, mut dropped, mut last) = (0u64, 0u64, 0u64);
    while answered + dropped < 40 {
        match c.recv().await {
            Outbound::Lag { dropped: d } => dropped += d,
            Outbound::StepResult { tick, .. } => {
                assert!(tick > last, "tick {tick} after {last}");
                last = tick;
                answered += 1;
            }
            other => panic!("{other:?}"),
        }
    }
    assert_eq!((answered + dropped, last), (40, 40));
}
