//! Per-connection protocol state machine, independent of any transport.

use std::sync::Arc;

use copilot_core::envs::{episode_rng, Env, EnvKind, COPILOT_STREAM, ENV_STREAM};
use copilot_core::eval::Copilot;
use rand_chacha::ChaCha8Rng;

use crate::protocol::{CopilotKind, ErrorCode, Inbound, Outbound, StateFrame};

/// Copilots loaded at startup, shared read-only by every session.
#[derive(Clone, Default)]
pub struct Copilots {
    pub csa: Option<Arc<dyn Copilot>>,
    pub csa_dagger: Option<Arc<dyn Copilot>>,
    pub ddpm: Option<Arc<dyn Copilot>>,
}

impl Copilots {
    /// `Ok(None)` for pass-through, `Err` when the requested copilot is not loaded.
    fn resolve(&self, kind: CopilotKind) -> Result<Option<Arc<dyn Copilot>>, ()> {
        let slot = match kind {
            CopilotKind::None => return Ok(None),
            CopilotKind::Csa => &self.csa,
            CopilotKind::CsaDagger => &self.csa_dagger,
            CopilotKind::Ddpm => &self.ddpm,
        };
        slot.clone().map(Some).ok_or(())
    }

    pub fn available(&self) -> Vec<CopilotKind> {
        let mut v = vec![CopilotKind::None];
        for (k, c) in
            [(CopilotKind::Csa, &self.csa), (CopilotKind::CsaDagger, &self.csa_dagger), (CopilotKind::Ddpm, &self.ddpm)]
        {
            if c.is_some() {
                v.push(k);
            }
        }
        v
    }
}

struct Episode {
    env_kind: EnvKind,
    env: Env,
    copilot: Option<Arc<dyn Copilot>>,
    alpha: f64,
    tick: u64,
    rng: ChaCha8Rng,
}

impl Episode {
    /// Seeded exactly like an evaluation rollout of `(seed, episode)`.
    fn start(env_kind: EnvKind, copilot: Option<Arc<dyn Copilot>>, alpha: f64, seed: u64, episode: u64) -> Self {
        Self {
            env_kind,
            env: Env::reset(env_kind, episode, &mut episode_rng(seed, episode, ENV_STREAM)),
            copilot,
            alpha,
            tick: 0,
            rng: episode_rng(seed, episode, COPILOT_STREAM),
        }
    }
}

pub struct Session {
    id: String,
    copilots: Arc<Copilots>,
    /// Environments a client may request; empty means all.
    envs: Arc<[EnvKind]>,
    episode: Option<Episode>,
}

fn check_alpha(alpha: f64) -> Result<(), Outbound> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Outbound::error(ErrorCode::BadAlpha, format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

impl Session {
    pub fn new(id: impl Into<String>, copilots: Arc<Copilots>) -> Self {
        Self { id: id.into(), copilots, envs: Arc::from([]), episode: None }
    }

    pub fn with_envs(self, envs: Arc<[EnvKind]>) -> Self {
        Self { envs, ..self }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn is_active(&self) -> bool {
        self.episode.is_some()
    }

    /// Parse one text frame and handle it; malformed frames get an error reply.
    pub fn handle_text(&mut self, text: &str) -> Vec<Outbound> {
        match serde_json::from_str::<Inbound>(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => vec![Outbound::error(ErrorCode::BadMessage, e.to_string())],
        }
    }

    pub fn handle(&mut self, msg: Inbound) -> Vec<Outbound> {
        match self.dispatch(msg) {
            Ok(out) => out,
            Err(e) => vec![e],
        }
    }

    fn dispatch(&mut self, msg: Inbound) -> Result<Vec<Outbound>, Outbound> {
        match msg {
            Inbound::Hello { env, copilot, alpha, seed, episode } => {
                check_alpha(alpha)?;
                if !self.envs.is_empty() && !self.envs.contains(&env) {
                    return Err(Outbound::error(
                        ErrorCode::BadMessage,
                        format!("env {} is not served here", env.name()),
                    ));
                }
                let c = self.copilots.resolve(copilot).map_err(|_| {
                    Outbound::error(
                        ErrorCode::CopilotUnavailable,
                        format!(
                            "copilot {} is not loaded; available: {}",
                            copilot.name(),
                            self.copilots.available().iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
                        ),
                    )
                })?;
                let ep = Episode::start(env, c, alpha, seed, episode);
                let ready = self.ready(&ep);
                self.episode = Some(ep);
                Ok(vec![ready])
            }
            Inbound::Reset { seed, episode } => {
                let ep = self.active()?;
                let fresh = Episode::start(ep.env_kind, ep.copilot.clone(), ep.alpha, seed, episode);
                let ready = self.ready(&fresh);
                self.episode = Some(fresh);
                Ok(vec![ready])
            }
            Inbound::SetAlpha { alpha } => {
                check_alpha(alpha)?;
                self.active()?.alpha = alpha;
                Ok(Vec::new())
            }
            Inbound::PilotAction { tick, a } => self.step(tick, a),
        }
    }

    fn ready(&self, ep: &Episode) -> Outbound {
        Outbound::SessionReady { session: self.id.clone(), state: StateFrame::of(&ep.env), tick: ep.tick }
    }

    fn active(&mut self) -> Result<&mut Episode, Outbound> {
        self.episode.as_mut().ok_or_else(|| Outbound::error(ErrorCode::NoSession, "send hello first"))
    }

    fn step(&mut self, tick: u64, a: [f32; 2]) -> Result<Vec<Outbound>, Outbound> {
        let ep = self.active()?;
        if ep.env.outcome().is_terminal() {
            return Err(Outbound::error(
                ErrorCode::EpisodeOver,
                format!("episode ended with {}; send reset", ep.env.outcome().name()),
            ));
        }
        if tick <= ep.tick {
            return Err(Outbound::error(
                ErrorCode::StaleTick,
                format!("tick {tick} already processed; next is {}", ep.tick + 1),
            ));
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Outbound::error(ErrorCode::BadMessage, "action components must be finite"));
        }
        let mut out = Vec::new();
        if tick > ep.tick + 1 {
            out.push(Outbound::Lag { dropped: tick - ep.tick - 1 });
        }
        let (assisted, nfe, latency_us) = match &ep.copilot {
            None => (a, 0, 0.0),
            Some(c) => {
                let r = c
                    .assist(&ep.env.copilot_view(), &a, ep.alpha, &mut ep.rng)
                    .map_err(|e| Outbound::error(ErrorCode::AssistFailed, e.to_string()))?;
                ([r.action[0], r.action[1]], r.nfe, r.latency_us)
            }
        };
        let outcome = ep.env.step(&assisted).map_err(|e| Outbound::error(ErrorCode::EpisodeOver, e.to_string()))?;
        ep.tick = tick;
        out.push(Outbound::StepResult {
            tick,
            state: StateFrame::of(&ep.env),
            raw: a,
            assisted,
            outcome,
            nfe,
            latency_us,
            alpha: ep.alpha,
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use copilot_core::envs::Outcome;

    fn session() -> Session {
        Session::new("s1", Arc::new(Copilots::default()))
    }

    #[test]
    fn action_before_hello_is_refused() {
        let mut s = session();
        let out = s.handle_text(r#"{"type":"pilot_action","tick":1,"a":[0,0]}"#);
        assert!(matches!(out[0], Outbound::Error { code: ErrorCode::NoSession, .. }));
    }

    #[test]
    fn malformed_frame_keeps_the_session() {
        let mut s = session();
        s.handle_text(r#"{"type":"hello","env":"slot","copilot":"none","alpha":0.5,"seed":1}"#);
        let out = s.handle_text("{not json");
        assert!(matches!(out[0], Outbound::Error { code: ErrorCode::BadMessage, .. }));
        let out = s.handle_text(r#"{"type":"pilot_action","tick":1,"a":[0.5,0.5]}"#);
        assert!(matches!(out[0], Outbound::StepResult { tick: 1, .. }));
    }

    #[test]
    fn unloaded_copilot_is_refused() {
        let mut s = session();
        let out = s.handle_text(r#"{"type":"hello","env":"slot","copilot":"csa","alpha":0.5,"seed":1}"#);
        assert!(matches!(out[0], Outbound::Error { code: ErrorCode::CopilotUnavailable, .. }));
        assert!(!s.is_active());
    }

    #[test]
    fn unserved_env_is_refused() {
        let mut s = session().with_envs(Arc::from([EnvKind::Slot]));
        let out = s.handle_text(r#"{"type":"hello","env":"lander","copilot":"none","alpha":0.5,"seed":1}"#);
        assert!(matches!(out[0], Outbound::Error { code: ErrorCode::BadMessage, .. }));
        let out = s.handle_text(r#"{"type":"hello","env":"slot","copilot":"none","alpha":0.5,"seed":1}"#);
        assert!(matches!(out[0], Outbound::SessionReady { .. }));
    }

    #[test]
    fn skipped_ticks_are_reported_and_old_ticks_refused() {
        let mut s = session();
        s.handle_text(r#"{"type":"hello","env":"lander","copilot":"none","alpha":0.0,"seed":2}"#);
        let out = s.handle_text(r#"{"type":"pilot_action","tick":4,"a":[0,0.2]}"#);
        assert_eq!(out[0], Outbound::Lag { dropped: 3 });
        let out = s.handle_text(r#"{"type":"pilot_action","tick":4,"a":[0,0.2]}"#);
        assert!(matches!(out[0], Outbound::Error { code: ErrorCode::StaleTick, .. }));
    }

    #[test]
    fn finished_episode_needs_reset() {
        let mut s = session();
        s.handle_text(r#"{"type":"hello","env":"lander","copilot":"none","alpha":0.0,"seed":3}"#);
        let mut tick = 0;
        loop {
            tick += 1;
            let out = s.handle(Inbound::PilotAction { tick, a: [0.0, -1.0] });
            if let Outbound::StepResult { outcome, .. } = out[0] {
                if outcome != Outcome::Running {
                    break;
                }
            }
        }
        let out = s.handle(Inbound::PilotAction { tick: tick + 1, a: [0.0, 0.0] });
        assert!(matches!(out[0], Outbound::Error { code: ErrorCode::EpisodeOver, .. }));
        let out = s.handle(Inbound::Reset { seed: 3, episode: 0 });
        assert!(matches!(out[0], Outbound::SessionReady { tick: 0, .. }));
    }
}
