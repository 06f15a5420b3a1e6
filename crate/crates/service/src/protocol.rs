//! Wire messages. Every frame is one JSON object on a single line.

use copilot_core::envs::{Env, EnvKind, Outcome, Slot};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopilotKind {
    None,
    Csa,
    CsaDagger,
    Ddpm,
}

impl CopilotKind {
    pub fn name(self) -> &'static str {
        match self {
            CopilotKind::None => "none",
            CopilotKind::Csa => "csa",
            CopilotKind::CsaDagger => "csa_dagger",
            CopilotKind::Ddpm => "ddpm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Inbound {
    Hello {
        env: EnvKind,
        copilot: CopilotKind,
        alpha: f64,
        seed: u64,
        /// Episode index within the seed; lets a client reproduce a specific evaluation episode.
        #[serde(default)]
        episode: u64,
    },
    PilotAction {
        tick: u64,
        a: [f32; 2],
    },
    SetAlpha {
        alpha: f64,
    },
    Reset {
        seed: u64,
        #[serde(default)]
        episode: u64,
    },
}

/// Full state as shown to the pilot: the goal is included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pad_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub goal: Option<Slot>,
}

impl StateFrame {
    pub fn of(env: &Env) -> Self {
        match env {
            Env::Lander(e) => Self { x: e.x, y: e.y, vx: e.vx, vy: e.vy, pad_x: Some(e.pad_x), goal: None },
            Env::Slot(e) => Self { x: e.x, y: e.y, vx: e.vx, vy: e.vy, pad_x: None, goal: Some(e.goal) },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    BadMessage,
    NoSession,
    EpisodeOver,
    StaleTick,
    BadAlpha,
    CopilotUnavailable,
    AssistFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound {
    SessionReady {
        session: String,
        state: StateFrame,
        tick: u64,
    },
    StepResult {
        tick: u64,
        state: StateFrame,
        raw: [f32; 2],
        assisted: [f32; 2],
        outcome: Outcome,
        nfe: usize,
        latency_us: f64,
        /// The α used for this tick.
        alpha: f64,
    },
    Error {
        code: ErrorCode,
        msg: String,
    },
    Lag {
        dropped: u64,
    },
}

impl Outbound {
    pub fn error(code: ErrorCode, msg: impl Into<String>) -> Self {
        Outbound::Error { code, msg: msg.into() }
    }

    pub fn to_frame(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}
