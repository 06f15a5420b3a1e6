//! Rollout harness, seed-by-rollout evaluation grids and latency benchmarks.

use std::io::Write;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpm::{ddpm_assist, DdpmModel};
use crate::envs::{episode_rng, Env, EnvKind, Outcome, Pilot, PilotSpec, COPILOT_STREAM, ENV_STREAM, PILOT_STREAM};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::student::{csa_assist, AssistRequest, Assisted, StudentModel};

/// Maps `(copilot-view state, pilot action, α)` to an executed action.
pub trait Copilot: Send + Sync {
    fn name(&self) -> String;
    fn assist(&self, state: &[f32], action: &[f32], alpha: f64, rng: &mut ChaCha8Rng) -> Result<Assisted>;
}

/// One-step consistency copilot; `phi` is required in CSA† mode.
pub struct CsaCopilot {
    pub student: StudentModel,
    pub phi: Option<ForwardModel>,
}

impl Copilot for CsaCopilot {
    fn name(&self) -> String {
        self.student.mode().name().into()
    }

    fn assist(&self, state: &[f32], action: &[f32], alpha: f64, _rng: &mut ChaCha8Rng) -> Result<Assisted> {
        csa_assist(&self.student, self.phi.as_ref(), &AssistRequest { state, action, alpha })
    }
}

pub struct DdpmCopilot {
    pub model: DdpmModel,
}

impl Copilot for DdpmCopilot {
    fn name(&self) -> String {
        "ddpm".into()
    }

    fn assist(&self, state: &[f32], action: &[f32], alpha: f64, rng: &mut ChaCha8Rng) -> Result<Assisted> {
        ddpm_assist(&self.model, state, action, alpha, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub outcome: Outcome,
    pub steps: usize,
    pub raw_actions: Vec<[f32; 2]>,
    pub executed_actions: Vec<[f32; 2]>,
    pub nfe: u64,
    pub latencies_us: Vec<f64>,
}

/// Run one episode. The pilot sees the full state, the copilot only the copilot view.
pub fn rollout(
    kind: EnvKind,
    pilot: PilotSpec,
    copilot: Option<&dyn Copilot>,
    alpha: f64,
    seed: u64,
    episode: u64,
) -> Result<EpisodeRecord> {
    pilot.validate()?;
    let mut env = Env::reset(kind, episode, &mut episode_rng(seed, episode, ENV_STREAM));
    let mut p = Pilot::new(pilot, episode_rng(seed, episode, PILOT_STREAM));
    let mut crng = episode_rng(seed, episode, COPILOT_STREAM);
    let mut rec = EpisodeRecord {
        outcome: Outcome::Running,
        steps: 0,
        raw_actions: Vec::new(),
        executed_actions: Vec::new(),
        nfe: 0,
        latencies_us: Vec::new(),
    };
    while !env.outcome().is_terminal() {
        let a_u = p.act(&env);
        let a = match copilot {
            None => a_u.clone(),
            Some(c) => {
                let r = c.assist(&env.copilot_view(), &a_u, alpha, &mut crng)?;
                rec.nfe += r.nfe as u64;
                rec.latencies_us.push(r.latency_us);
                r.action
            }
        };
        env.step(&a)?;
        rec.raw_actions.push([a_u[0], a_u[1]]);
        rec.executed_actions.push([a[0], a[1]]);
    }
    rec.outcome = env.outcome();
    rec.steps = env.steps();
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub env: EnvKind,
    pub pilot: PilotSpec,
    pub seeds: u64,
    pub rollouts: u64,
    pub base_seed: u64,
}

impl EvalConfig {
    pub fn new(env: EnvKind, pilot: PilotSpec) -> Self {
        Self { env, pilot, seeds: 10, rollouts: 30, base_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.pilot.validate()?;
        if self.seeds < 2 || self.rollouts == 0 {
            return Err(Error::config("evaluation needs at least 2 seeds and 1 rollout"));
        }
        Ok(())
    }
}

/// Aggregate over seeds; rates are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub pilot: String,
    pub copilot: String,
    pub alpha: f64,
    pub success_mean: f64,
    pub success_std: f64,
    pub crash_mean: f64,
    pub crash_std: f64,
    /// Mean denoiser evaluations per assist call.
    pub nfe: f64,
    pub lat_p50_us: f64,
    pub lat_p99_us: f64,
}

pub const COLUMNS: [&str; 10] = [
    "pilot",
    "copilot",
    "alpha",
    "success_mean",
    "success_std",
    "crash_mean",
    "crash_std",
    "nfe",
    "lat_p50_us",
    "lat_p99_us",
];

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Nearest-rank percentile of an unsorted sample; 0 for an empty one.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Build a row from per-seed episode lists.
pub fn aggregate(pilot: &str, copilot: &str, alpha: f64, per_seed: &[Vec<EpisodeRecord>]) -> MetricsRow {
    let rate = |eps: &[EpisodeRecord], o: Outcome| {
        100.0 * eps.iter().filter(|e| e.outcome == o).count() as f64 / eps.len().max(1) as f64
    };
    let succ: Vec<f64> = per_seed.iter().map(|s| rate(s, Outcome::Success)).collect();
    let crash: Vec<f64> = per_seed.iter().map(|s| rate(s, Outcome::Crash)).collect();
    let (success_mean, success_std) = mean_std(&succ);
    let (crash_mean, crash_std) = mean_std(&crash);
    let all = per_seed.iter().flatten();
    let calls: usize = all.clone().map(|e| e.latencies_us.len()).sum();
    let nfe: u64 = all.clone().map(|e| e.nfe).sum();
    let lat: Vec<f64> = all.flat_map(|e| e.latencies_us.iter().copied()).collect();
    MetricsRow {
        pilot: pilot.into(),
        copilot: copilot.into(),
        alpha,
        success_mean,
        success_std,
        crash_mean,
        crash_std,
        nfe: if calls == 0 { 0.0 } else { nfe as f64 / calls as f64 },
        lat_p50_us: percentile(&lat, 50.0),
        lat_p99_us: percentile(&lat, 99.0),
    }
}

/// Every episode of the seed-by-rollout grid at one α.
pub fn run_grid(cfg: &EvalConfig, copilot: Option<&dyn Copilot>, alpha: f64) -> Result<Vec<Vec<EpisodeRecord>>> {
    cfg.validate()?;
    (0..cfg.seeds)
        .map(|i| (0..cfg.rollouts).map(|j| rollout(cfg.env, cfg.pilot, copilot, alpha, cfg.base_seed + i, j)).collect())
        .collect()
}

pub fn evaluate(cfg: &EvalConfig, copilot: Option<&dyn Copilot>, alpha: f64) -> Result<MetricsRow> {
    let grid = run_grid(cfg, copilot, alpha)?;
    Ok(aggregate(&cfg.pilot.name(), &copilot_name(copilot), alpha, &grid))
}

fn copilot_name(copilot: Option<&dyn Copilot>) -> String {
    copilot.map_or_else(|| "none".into(), |c| c.name())
}

/// One row per α. Without a copilot every row is the unassisted baseline.
pub fn alpha_sweep(cfg: &EvalConfig, copilot: Option<&dyn Copilot>, alphas: &[f64]) -> Result<MetricsTable> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::domain(format!("alpha must lie in [0, 1], got {a}")));
    }
    let rows = alphas.iter().map(|&a| evaluate(cfg, copilot, a)).collect::<Result<_>>()?;
    Ok(MetricsTable { rows })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    /// Copy with latency columns zeroed, for comparing runs.
    pub fn without_latency(&self) -> MetricsTable {
        let rows = self.rows.iter().map(|r| MetricsRow { lat_p50_us: 0.0, lat_p99_us: 0.0, ..r.clone() }).collect();
        MetricsTable { rows }
    }

    pub fn best_success(&self) -> Option<&MetricsRow> {
        self.rows.iter().max_by(|a, b| a.success_mean.total_cmp(&b.success_mean))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", COLUMNS.join(","))?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.2},{:.2}",
                r.pilot,
                r.copilot,
                r.alpha,
                r.success_mean,
                r.success_std,
                r.crash_mean,
                r.crash_std,
                r.nfe,
                r.lat_p50_us,
                r.lat_p99_us
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub copilot: String,
    pub alpha: f64,
    pub calls: usize,
    /// Evaluations per call; every call is checked to spend the same number.
    pub nfe: usize,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub mean_us: f64,
}

/// Wall-clock per-call latency after `calls / 10` warm-up calls.
pub fn latency_bench(
    copilot: &dyn Copilot,
    state: &[f32],
    action: &[f32],
    alpha: f64,
    calls: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if calls == 0 {
        return Err(Error::config("latency bench needs at least one call"));
    }
    let mut rng = episode_rng(seed, 0, COPILOT_STREAM);
    for _ in 0..calls / 10 {
        copilot.assist(state, action, alpha, &mut rng)?;
    }
    let mut lat = Vec::with_capacity(calls);
    let mut nfe = None;
    for _ in 0..calls {
        let t = Instant::now();
        let r = copilot.assist(state, action, alpha, &mut rng)?;
        lat.push(t.elapsed().as_secs_f64() * 1e6);
        match nfe {
            None => nfe = Some(r.nfe),
            Some(n) if n != r.nfe => {
                return Err(Error::Data(format!("evaluation count changed between calls: {n} then {}", r.nfe)))
            }
            _ => {}
        }
    }
    Ok(LatencyReport {
        copilot: copilot.name(),
        alpha,
        calls,
        nfe: nfe.unwrap_or(0),
        p50_us: percentile(&lat, 50.0),
        p90_us: percentile(&lat, 90.0),
        p99_us: percentile(&lat, 99.0),
        mean_us: lat.iter().sum::<f64>() / calls as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::SurrogateKind;

    fn noised(eps: f64) -> PilotSpec {
        PilotSpec::Surrogate { surrogate: SurrogateKind::Noised, epsilon: eps }
    }

    #[test]
    fn unassisted_rollout_executes_pilot_actions() {
        let r = rollout(EnvKind::Lander, noised(0.5), None, 0.5, 3, 0).unwrap();
        assert_eq!(r.raw_actions, r.executed_actions);
        assert_eq!(r.nfe, 0);
        assert_eq!(r.steps, r.raw_actions.len());
    }

    #[test]
    fn expert_grid_has_zero_spread_across_identical_seeds() {
        let cfg = EvalConfig { seeds: 3, rollouts: 5, ..EvalConfig::new(EnvKind::Slot, PilotSpec::Expert) };
        let grid = run_grid(&cfg, None, 0.0).unwrap();
        let same: Vec<Vec<EpisodeRecord>> = vec![grid[0].clone(); 3];
        let row = aggregate("expert", "none", 0.0, &same);
        assert_eq!(row.success_std, 0.0);
        assert_eq!(row.crash_std, 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = EvalConfig { seeds: 2, rollouts: 4, ..EvalConfig::new(EnvKind::Lander, noised(0.8)) };
        let a = alpha_sweep(&cfg, None, &[0.0, 0.5]).unwrap();
        let b = alpha_sweep(&cfg, None, &[0.0, 0.5]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows[0].success_mean, a.rows[1].success_mean);
    }

    #[test]
    fn csv_has_fixed_header() {
        let cfg = EvalConfig { seeds: 2, rollouts: 2, ..EvalConfig::new(EnvKind::Slot, PilotSpec::Expert) };
        let t = alpha_sweep(&cfg, None, &[0.0]).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
        assert!(lines.next().unwrap().starts_with("expert,none,0,100.0000,0.0000"));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 99.0), 5.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }
}
