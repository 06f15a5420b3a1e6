use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use copilot_core::envs::{EnvKind, PilotSpec, SurrogateKind};
use copilot_core::schedule::ScheduleParams;
use copilot_core::student::{StudentMode, TargetMode};
use copilot_core::teacher::LossNorm;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "csa", version, about = "Consistency shared-autonomy pipeline")]
#[command(after_help = "Every subcommand accepts --config <file> with `key = value` lines; explicit flags win.\n\
Exit status: 0 ok, 2 usage, 3 data or format, 4 runtime.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Roll out the expert and save successful transitions.
    Collect(CollectArgs),
    /// Train the diffusion teacher.
    TrainTeacher(TeacherArgs),
    /// Train the forward dynamics model used for direction conditioning.
    TrainForward(ForwardArgs),
    /// Distill a teacher into a one-step student.
    Distill(DistillArgs),
    /// Train the DDPM baseline.
    TrainDdpm(DdpmArgs),
    /// Evaluate copilots at one assistance level.
    Eval(EvalArgs),
    /// Evaluate copilots over a grid of assistance levels.
    Sweep(SweepArgs),
    /// Best assistance level per copilot, next to the unassisted pilot.
    Bench(SweepArgs),
    /// Per-call latency and evaluation count of one copilot.
    AssistBench(AssistBenchArgs),
    /// Serve interactive sessions over websocket.
    Serve(ServeArgs),
    /// Dump closed-form (and optionally trained) denoiser fields on a grid.
    OracleCheck(OracleArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Collect(_) => "collect",
            Command::TrainTeacher(_) => "train-teacher",
            Command::TrainForward(_) => "train-forward",
            Command::Distill(_) => "distill",
            Command::TrainDdpm(_) => "train-ddpm",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Bench(_) => "bench",
            Command::AssistBench(_) => "assist-bench",
            Command::Serve(_) => "serve",
            Command::OracleCheck(_) => "oracle-check",
        }
    }

    /// Resolved arguments, for the reproducibility header.
    pub fn resolved(&self) -> serde_json::Value {
        let v = match self {
            Command::Collect(a) => serde_json::to_value(a),
            Command::TrainTeacher(a) => serde_json::to_value(a),
            Command::TrainForward(a) => serde_json::to_value(a),
            Command::Distill(a) => serde_json::to_value(a),
            Command::TrainDdpm(a) => serde_json::to_value(a),
            Command::Eval(a) => serde_json::to_value(a),
            Command::Sweep(a) | Command::Bench(a) => serde_json::to_value(a),
            Command::AssistBench(a) => serde_json::to_value(a),
            Command::Serve(a) => serde_json::to_value(a),
            Command::OracleCheck(a) => serde_json::to_value(a),
        };
        v.expect("plain data")
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ConfigArg {
    /// `key = value` file merged under the explicit flags.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvArg {
    Lander,
    Slot,
}

impl From<EnvArg> for EnvKind {
    fn from(e: EnvArg) -> Self {
        match e {
            EnvArg::Lander => EnvKind::Lander,
            EnvArg::Slot => EnvKind::Slot,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct CollectArgs {
    #[arg(long, value_enum)]
    pub env: EnvArg,
    /// Number of transitions.
    #[arg(long, default_value_t = 200_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Args, Debug, Serialize)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 0.002)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 80.0)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sigma_data: f64,
    #[arg(long, default_value_t = 7.0)]
    pub rho: f64,
    /// Number of noise levels.
    #[arg(long = "T", alias = "noise-levels", default_value_t = 40)]
    #[serde(rename = "T")]
    pub noise_levels: usize,
}

impl ScheduleArgs {
    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            sigma_data: self.sigma_data,
            rho: self.rho,
            steps: self.noise_levels,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    L2,
    SquaredL2,
}

impl From<LossArg> for LossNorm {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::L2 => LossNorm::L2,
            LossArg::SquaredL2 => LossNorm::SquaredL2,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct TeacherArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Probability of dropping the direction condition during training.
    #[arg(long, default_value_t = 0.3)]
    pub gamma: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = LossArg::SquaredL2)]
    pub loss: LossArg,
    /// Weight averaging decay; 0 disables it.
    #[arg(long, default_value_t = 0.999)]
    pub ema_decay: f64,
    #[arg(long, default_value_t = 1000)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Args, Debug, Serialize)]
pub struct ForwardArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Csa,
    CsaDagger,
}

impl From<ModeArg> for StudentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Csa => StudentMode::Csa,
            ModeArg::CsaDagger => StudentMode::CsaDagger,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetArg {
    Ema,
    Live,
}

impl From<TargetArg> for TargetMode {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Ema => TargetMode::Ema,
            TargetArg::Live => TargetMode::Live,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Csa)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TargetArg::Ema)]
    pub target: TargetArg,
    #[arg(long, default_value_t = 0.99)]
    pub ema_decay: f64,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Args, Debug, Serialize)]
pub struct DdpmArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of diffusion steps.
    #[arg(long = "K", alias = "diffusion-steps", default_value_t = 50)]
    #[serde(rename = "K")]
    pub diffusion_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_min: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta_max: f64,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PilotArg {
    Expert,
    Noisy,
    Laggy,
    Noised,
    Slow,
}

impl PilotArg {
    pub fn surrogate(self) -> Option<SurrogateKind> {
        match self {
            PilotArg::Expert => None,
            PilotArg::Noisy => Some(SurrogateKind::Noisy),
            PilotArg::Laggy => Some(SurrogateKind::Laggy),
            PilotArg::Noised => Some(SurrogateKind::Noised),
            PilotArg::Slow => Some(SurrogateKind::Slow),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    Csv,
    Json,
}

/// Environment, pilot and the seed-by-rollout grid.
#[derive(Args, Debug, Serialize)]
pub struct PilotArgs {
    #[arg(long, value_enum)]
    pub env: EnvArg,
    #[arg(long, value_enum, default_value_t = PilotArg::Noised)]
    pub pilot: PilotArg,
    /// Flaw level; calibrated to the success band when omitted.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Target unassisted success band for calibration.
    #[arg(long, default_value_t = 0.15)]
    pub band_lo: f64,
    #[arg(long, default_value_t = 0.25)]
    pub band_hi: f64,
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 30)]
    pub rollouts: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PilotArgs {
    pub fn with_epsilon(&self, epsilon: f64) -> PilotSpec {
        match self.pilot.surrogate() {
            None => PilotSpec::Expert,
            Some(surrogate) => PilotSpec::Surrogate { surrogate, epsilon },
        }
    }
}

/// Copilot checkpoints; the kind is read from each file.
#[derive(Args, Debug, Serialize)]
pub struct ModelArgs {
    /// Student, DDPM or forward-model checkpoint; repeatable.
    #[arg(long = "ckpt")]
    pub ckpt: Vec<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pilot: PilotArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelArgs,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pilot: PilotArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub alphas: Vec<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Args, Debug, Serialize)]
pub struct AssistBenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelArgs,
    #[arg(long, value_enum, default_value_t = EnvArg::Lander)]
    pub env: EnvArg,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub alphas: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub calls: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Args, Debug, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub models: ModelArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    /// Environments offered to clients; repeatable. All when omitted.
    #[arg(long, value_enum)]
    pub env: Vec<EnvArg>,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureArg {
    TwoPoint,
    #[value(name = "two-mode-2d")]
    #[serde(rename = "two-mode-2d")]
    TwoMode2d,
}

#[derive(Args, Debug, Serialize)]
pub struct OracleArgs {
    #[arg(long, value_enum, default_value_t = FixtureArg::TwoPoint)]
    pub fixture: FixtureArg,
    /// Teacher checkpoint to compare against the closed form.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Grid points per dimension.
    #[arg(long, default_value_t = 21)]
    pub grid: usize,
    /// Grid covers [-range, range] in every dimension.
    #[arg(long, default_value_t = 3.0)]
    pub range: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub schedule: ScheduleArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_tree_is_consistent() {
        Cli::command().debug_assert();
    }
}
