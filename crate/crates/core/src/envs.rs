//! Two small point-mass control tasks, their scripted experts, flawed
//! surrogate pilots and expert data collection.
//!
//! The copilot sees only `(x, y, vx, vy)`; the goal (landing pad or slot)
//! is visible to the pilot alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TransitionDataset;
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Success,
    Crash,
    OutOfBounds,
    Timeout,
}

impl Outcome {
    pub fn is_terminal(self) -> bool {
        self != Outcome::Running
    }

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Running => "running",
            Outcome::Success => "success",
            Outcome::Crash => "crash",
            Outcome::OutOfBounds => "out_of_bounds",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Lander,
    Slot,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Lander => "lander",
            EnvKind::Slot => "slot",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lander" => Ok(EnvKind::Lander),
            "slot" => Ok(EnvKind::Slot),
            _ => Err(Error::config(format!("unknown environment {s:?} (expected lander or slot)"))),
        }
    }
}

fn clip_action(a: &[f32]) -> Result<[f64; 2]> {
    if a.len() != ACTION_DIM {
        return Err(Error::config(format!("actions have {ACTION_DIM} components, got {}", a.len())));
    }
    Ok([(a[0] as f64).clamp(-1.0, 1.0), (a[1] as f64).clamp(-1.0, 1.0)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanderConfig {
    pub dt: f64,
    pub gravity: f64,
    /// Acceleration per unit action.
    pub thrust: f64,
    pub pad_half_width: f64,
    pub v_safe: f64,
    pub max_steps: usize,
    /// Pad centers are drawn uniformly from `[-pad_range, pad_range]`.
    pub pad_range: f64,
    pub start_x_range: f64,
    pub start_y: f64,
}

impl Default for LanderConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            gravity: 0.5,
            thrust: 3.0,
            pad_half_width: 0.15,
            v_safe: 0.3,
            max_steps: 400,
            pad_range: 0.6,
            start_x_range: 0.5,
            start_y: 0.9,
        }
    }
}

/// Lander state; `pad_x` is pilot-only.
#[derive(Clone, Debug, PartialEq)]
pub struct Lander2D {
    pub cfg: LanderConfig,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub pad_x: f64,
    pub steps: usize,
    pub outcome: Outcome,
}

impl Lander2D {
    pub fn reset<R: Rng + ?Sized>(cfg: LanderConfig, rng: &mut R) -> Self {
        let x = rng.random_range(-cfg.start_x_range..=cfg.start_x_range);
        let pad_x = rng.random_range(-cfg.pad_range..=cfg.pad_range);
        let vx = rng.random_range(-0.1..=0.1);
        let vy = rng.random_range(-0.1..=0.0);
        let y = cfg.start_y;
        Self { cfg, x, y, vx, vy, pad_x, steps: 0, outcome: Outcome::Running }
    }

    pub fn step(&mut self, action: &[f32]) -> Result<Outcome> {
        if self.outcome.is_terminal() {
            return Err(Error::Usage("step on a finished lander episode".into()));
        }
        let a = clip_action(action)?;
        let c = &self.cfg;
        self.vx += c.thrust * a[0] * c.dt;
        self.vy += (c.thrust * a[1] - c.gravity) * c.dt;
        self.x += self.vx * c.dt;
        self.y += self.vy * c.dt;
        self.steps += 1;
        self.outcome = if self.y <= 0.0 {
            if (self.x - self.pad_x).abs() <= c.pad_half_width && self.vy.abs() <= c.v_safe {
                Outcome::Success
            } else {
                Outcome::Crash
            }
        } else if self.x.abs() > 1.0 || self.y > 1.0 {
            Outcome::OutOfBounds
        } else if self.steps >= c.max_steps {
            Outcome::Timeout
        } else {
            Outcome::Running
        };
        Ok(self.outcome)
    }

    /// PD descent toward the pad: close the horizontal gap, descend at a
    /// height-proportional rate, slowing the descent while far off the pad.
    pub fn expert_action(&self) -> [f32; 2] {
        let c = &self.cfg;
        let dx = self.pad_x - self.x;
        let vx_des = (1.5 * dx).clamp(-0.6, 0.6);
        let ax = 3.0 * (vx_des - self.vx);
        let slow = (1.0 - (dx.abs() - 0.05) / 0.3).clamp(0.15, 1.0);
        let vy_des = -(0.08 + 0.6 * self.y) * slow;
        let ay = c.gravity + 3.0 * (vy_des - self.vy);
        [(ax / c.thrust).clamp(-1.0, 1.0) as f32, (ay / c.thrust).clamp(-1.0, 1.0) as f32]
    }

    pub fn copilot_view(&self) -> [f32; 4] {
        [self.x as f32, self.y as f32, self.vx as f32, self.vy as f32]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Upper,
    Lower,
}

impl Slot {
    pub fn sign(self) -> f64 {
        match self {
            Slot::Upper => 1.0,
            Slot::Lower => -1.0,
        }
    }

    pub fn other(self) -> Slot {
        match self {
            Slot::Upper => Slot::Lower,
            Slot::Lower => Slot::Upper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub dt: f64,
    pub thrust: f64,
    pub wall_x: f64,
    /// Slots are centered at `±slot_y`.
    pub slot_y: f64,
    pub slot_half_width: f64,
    pub max_steps: usize,
    pub start_x: f64,
    pub start_y_range: f64,
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            thrust: 1.0,
            wall_x: 0.5,
            slot_y: 0.5,
            slot_half_width: 0.08,
            max_steps: 200,
            start_x: -0.8,
            start_y_range: 0.15,
        }
    }
}

/// Drag-free double integrator approaching a wall with two slots; `goal` is pilot-only.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot2D {
    pub cfg: SlotConfig,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub goal: Slot,
    pub steps: usize,
    pub outcome: Outcome,
}

impl Slot2D {
    pub fn reset<R: Rng + ?Sized>(cfg: SlotConfig, goal: Slot, rng: &mut R) -> Self {
        let y = rng.random_range(-cfg.start_y_range..=cfg.start_y_range);
        let x = cfg.start_x;
        Self { cfg, x, y, vx: 0.0, vy: 0.0, goal, steps: 0, outcome: Outcome::Running }
    }

    /// Passing through the wrong slot counts as a crash.
    pub fn step(&mut self, action: &[f32]) -> Result<Outcome> {
        if self.outcome.is_terminal() {
            return Err(Error::Usage("step on a finished slot episode".into()));
        }
        let a = clip_action(action)?;
        let c = &self.cfg;
        let (x0, y0) = (self.x, self.y);
        self.vx += c.thrust * a[0] * c.dt;
        self.vy += c.thrust * a[1] * c.dt;
        self.x += self.vx * c.dt;
        self.y += self.vy * c.dt;
        self.steps += 1;
        self.outcome = if x0 < c.wall_x && self.x >= c.wall_x {
            let f = (c.wall_x - x0) / (self.x - x0);
            let yc = y0 + f * (self.y - y0);
            if (yc - self.goal.sign() * c.slot_y).abs() <= c.slot_half_width {
                Outcome::Success
            } else {
                Outcome::Crash
            }
        } else if self.x < -1.0 || self.y.abs() > 1.0 {
            Outcome::OutOfBounds
        } else if self.steps >= c.max_steps {
            Outcome::Timeout
        } else {
            Outcome::Running
        };
        Ok(self.outcome)
    }

    /// Align with the goal slot, then advance toward the wall.
    pub fn expert_action(&self) -> [f32; 2] {
        let c = &self.cfg;
        let dy = self.goal.sign() * c.slot_y - self.y;
        let vy_des = (2.0 * dy).clamp(-0.6, 0.6);
        let ay = 4.0 * (vy_des - self.vy);
        let vx_des = if dy.abs() < 0.05 { 0.4 } else { 0.4 * (1.0 - dy.abs() / 0.6).clamp(0.1, 1.0) };
        let ax = 4.0 * (vx_des - self.vx);
        [(ax / c.thrust).clamp(-1.0, 1.0) as f32, (ay / c.thrust).clamp(-1.0, 1.0) as f32]
    }

    pub fn copilot_view(&self) -> [f32; 4] {
        [self.x as f32, self.y as f32, self.vx as f32, self.vy as f32]
    }
}

/// Either environment behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Lander(Lander2D),
    Slot(Slot2D),
}

impl Env {
    /// Fresh episode with default arena parameters. Slot goals alternate with `episode`.
    pub fn reset<R: Rng + ?Sized>(kind: EnvKind, episode: u64, rng: &mut R) -> Self {
        match kind {
            EnvKind::Lander => Env::Lander(Lander2D::reset(LanderConfig::default(), rng)),
            EnvKind::Slot => {
                let goal = if episode.is_multiple_of(2) { Slot::Upper } else { Slot::Lower };
                Env::Slot(Slot2D::reset(SlotConfig::default(), goal, rng))
            }
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            Env::Lander(_) => EnvKind::Lander,
            Env::Slot(_) => EnvKind::Slot,
        }
    }

    pub fn step(&mut self, action: &[f32]) -> Result<Outcome> {
        match self {
            Env::Lander(e) => e.step(action),
            Env::Slot(e) => e.step(action),
        }
    }

    pub fn expert_action(&self) -> [f32; 2] {
        match self {
            Env::Lander(e) => e.expert_action(),
            Env::Slot(e) => e.expert_action(),
        }
    }

    pub fn copilot_view(&self) -> [f32; 4] {
        match self {
            Env::Lander(e) => e.copilot_view(),
            Env::Slot(e) => e.copilot_view(),
        }
    }

    pub fn outcome(&self) -> Outcome {
        match self {
            Env::Lander(e) => e.outcome,
            Env::Slot(e) => e.outcome,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Env::Lander(e) => e.steps,
            Env::Slot(e) => e.steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Noisy,
    Laggy,
    Noised,
    Slow,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 4] =
        [SurrogateKind::Noisy, SurrogateKind::Laggy, SurrogateKind::Noised, SurrogateKind::Slow];

    pub fn name(self) -> &'static str {
        match self {
            SurrogateKind::Noisy => "noisy",
            SurrogateKind::Laggy => "laggy",
            SurrogateKind::Noised => "noised",
            SurrogateKind::Slow => "slow",
        }
    }
}

impl std::str::FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::config(format!("unknown surrogate {s:?}")))
    }
}

/// Corrupt the expert action `a_e`. `a_prev` is the surrogate's previous
/// action, absent on the first step. The result is clipped to `[-1, 1]`.
pub fn surrogate_action<R: Rng + ?Sized>(
    kind: SurrogateKind,
    epsilon: f64,
    a_e: &[f32],
    a_prev: Option<&[f32]>,
    rng: &mut R,
) -> Vec<f32> {
    let out: Vec<f32> = match kind {
        SurrogateKind::Noisy => {
            if rng.random_bool(epsilon.clamp(0.0, 1.0)) {
                a_e.iter().map(|_| rng.random_range(-1.0f32..=1.0)).collect()
            } else {
                a_e.to_vec()
            }
        }
        SurrogateKind::Laggy => match a_prev {
            Some(p) if rng.random_bool(epsilon.clamp(0.0, 1.0)) => p.to_vec(),
            _ => a_e.to_vec(),
        },
        SurrogateKind::Noised => {
            let n = Normal::new(0.0, epsilon.max(0.0)).expect("finite std");
            a_e.iter().map(|&v| (v as f64 + n.sample(rng)) as f32).collect()
        }
        SurrogateKind::Slow => a_e.iter().map(|&v| ((1.0 - epsilon) * v as f64) as f32).collect(),
    };
    out.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect()
}

/// Pilot that sees the full state (including the goal).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PilotSpec {
    Expert,
    Surrogate { surrogate: SurrogateKind, epsilon: f64 },
}

impl PilotSpec {
    pub fn name(&self) -> String {
        match self {
            PilotSpec::Expert => "expert".into(),
            PilotSpec::Surrogate { surrogate, .. } => surrogate.name().into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PilotSpec::Surrogate { epsilon, .. } if !(0.0..=1.0).contains(epsilon) => {
                Err(Error::config(format!("epsilon must lie in [0, 1], got {epsilon}")))
            }
            _ => Ok(()),
        }
    }
}

/// A pilot bound to one episode: its noise stream and previous action.
#[derive(Clone, Debug)]
pub struct Pilot {
    pub spec: PilotSpec,
    prev: Option<Vec<f32>>,
    rng: ChaCha8Rng,
}

impl Pilot {
    pub fn new(spec: PilotSpec, rng: ChaCha8Rng) -> Self {
        Self { spec, prev: None, rng }
    }

    pub fn act(&mut self, env: &Env) -> Vec<f32> {
        let a_e = env.expert_action();
        let a = match self.spec {
            PilotSpec::Expert => a_e.to_vec(),
            PilotSpec::Surrogate { surrogate, epsilon } => {
                surrogate_action(surrogate, epsilon, &a_e, self.prev.as_deref(), &mut self.rng)
            }
        };
        self.prev = Some(a.clone());
        a
    }
}

/// Independent generator for one `(seed, episode, purpose)` triple, so
/// runs with different flaw levels share environment draws.
pub fn episode_rng(seed: u64, episode: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode.wrapping_mul(4).wrapping_add(purpose));
    rng
}

pub const ENV_STREAM: u64 = 0;
pub const PILOT_STREAM: u64 = 1;
pub const COPILOT_STREAM: u64 = 2;

/// Run one unassisted episode and return its outcome.
pub fn run_unassisted(kind: EnvKind, pilot: PilotSpec, seed: u64, episode: u64) -> Result<Outcome> {
    let mut env = Env::reset(kind, episode, &mut episode_rng(seed, episode, ENV_STREAM));
    let mut p = Pilot::new(pilot, episode_rng(seed, episode, PILOT_STREAM));
    while !env.outcome().is_terminal() {
        let a = p.act(&env);
        env.step(&a)?;
    }
    Ok(env.outcome())
}

/// Fraction of `episodes` unassisted episodes that succeed.
pub fn success_rate(kind: EnvKind, pilot: PilotSpec, seed: u64, episodes: u64) -> Result<f64> {
    let mut ok = 0;
    for e in 0..episodes {
        if run_unassisted(kind, pilot, seed, e)? == Outcome::Success {
            ok += 1;
        }
    }
    Ok(ok as f64 / episodes.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub epsilon: f64,
    pub success: f64,
    pub within_band: bool,
    /// Every `(epsilon, success)` pair evaluated.
    pub probes: Vec<(f64, f64)>,
}

/// Bisection on ε until unassisted success lands in `[lo, hi]`; returns the
/// closest probe when the band is never hit.
pub fn calibrate_epsilon(
    kind: EnvKind,
    surrogate: SurrogateKind,
    band: (f64, f64),
    episodes: u64,
    seed: u64,
) -> Result<Calibration> {
    let target = 0.5 * (band.0 + band.1);
    let eval = |eps: f64| success_rate(kind, PilotSpec::Surrogate { surrogate, epsilon: eps }, seed, episodes);
    let mut probes = vec![(1.0, eval(1.0)?)];
    let (mut lo, mut hi) = (0.0, 1.0);
    if probes[0].1 <= band.1 {
        for _ in 0..12 {
            let last = probes[probes.len() - 1].1;
            if (band.0..=band.1).contains(&last) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let s = eval(mid)?;
            probes.push((mid, s));
            if s > band.1 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let (epsilon, success) = probes
        .iter()
        .copied()
        .filter(|p| p.0 > 0.0)
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()).then(a.0.total_cmp(&b.0)))
        .expect("at least one probe");
    Ok(Calibration { epsilon, success, within_band: (band.0..=band.1).contains(&success), probes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectReport {
    pub episodes: u64,
    pub discarded: u64,
    /// Kept transitions per Slot2D goal (upper, lower); zero for the lander.
    pub goal_transitions: [usize; 2],
}

/// Expert demonstrations from successful episodes only, truncated to exactly `n` transitions.
pub fn collect_dataset(kind: EnvKind, n: usize, seed: u64) -> Result<(TransitionDataset, CollectReport)> {
    if n == 0 {
        return Err(Error::config("need at least one transition"));
    }
    let mut ds = TransitionDataset::new(STATE_DIM, ACTION_DIM);
    let mut report = CollectReport { episodes: 0, discarded: 0, goal_transitions: [0, 0] };
    let mut episode = 0u64;
    let mut buf: Vec<([f32; 4], [f32; 2], [f32; 4])> = Vec::new();
    while ds.len() < n {
        let mut env = Env::reset(kind, episode, &mut episode_rng(seed, episode, ENV_STREAM));
        episode += 1;
        buf.clear();
        while !env.outcome().is_terminal() {
            let s = env.copilot_view();
            let a = env.expert_action();
            env.step(&a)?;
            buf.push((s, a, env.copilot_view()));
        }
        report.episodes += 1;
        if env.outcome() != Outcome::Success {
            report.discarded += 1;
            if report.episodes >= 50 && (report.episodes - report.discarded) * 10 < report.episodes {
                return Err(Error::Data(format!(
                    "expert succeeded in only {} of {} episodes",
                    report.episodes - report.discarded,
                    report.episodes
                )));
            }
            continue;
        }
        let take = buf.len().min(n - ds.len());
        if let Env::Slot(e) = &env {
            report.goal_transitions[if e.goal == Slot::Upper { 0 } else { 1 }] += take;
        }
        for (s, a, sn) in &buf[..take] {
            ds.push(s, a, sn)?;
        }
    }
    Ok((ds, report))
}
