use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use copilot_core::ddpm::{ddpm_train, DdpmConfig, DdpmModel};
use copilot_core::envs::{calibrate_epsilon, collect_dataset, episode_rng, Env, EnvKind, PilotSpec, ENV_STREAM};
use copilot_core::eval::{alpha_sweep, latency_bench, Copilot, CsaCopilot, DdpmCopilot, EvalConfig, MetricsTable};
use copilot_core::fixtures::two_mode_2d;
use copilot_core::forward::{forward_train, ForwardConfig, ForwardModel};
use copilot_core::oracle::{closed_form_denoiser, FiniteDataset};
use copilot_core::persistence::{read_checkpoint, read_dataset, write_checkpoint, write_dataset, ModelKind};
use copilot_core::schedule::NoiseSchedule;
use copilot_core::student::{distill_train_with, DistillConfig, StudentModel};
use copilot_core::teacher::{teacher_denoise, teacher_train_with, Conditions, Denoiser, TeacherConfig, TeacherModel};
use copilot_service::{Copilots, Server};
use ndarray::Array2;

use crate::args::*;
use crate::UsageError;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Collect(a) => collect(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::TrainForward(a) => train_forward(a),
        Command::Distill(a) => distill(a),
        Command::TrainDdpm(a) => train_ddpm(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a, false),
        Command::Bench(a) => sweep(a, true),
        Command::AssistBench(a) => assist_bench(a),
        Command::Serve(a) => serve(a),
        Command::OracleCheck(a) => oracle_check(a),
    }
}

fn input(path: &Path) -> Result<&Path> {
    if !path.is_file() {
        return Err(UsageError(format!("input file {} does not exist", path.display())).into());
    }
    Ok(path)
}

fn collect(a: CollectArgs) -> Result<()> {
    let (ds, rep) = collect_dataset(a.env.into(), a.n, a.seed)?;
    log::info!("{} transitions from {} episodes ({} discarded)", ds.len(), rep.episodes, rep.discarded);
    if a.env == EnvArg::Slot {
        log::info!("goal transitions upper {} lower {}", rep.goal_transitions[0], rep.goal_transitions[1]);
    }
    write_dataset(&a.out, &ds).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn train_teacher(a: TeacherArgs) -> Result<()> {
    let ds = read_dataset(input(&a.data)?)?;
    let cfg = TeacherConfig {
        schedule: a.schedule.params(),
        hidden: a.hidden,
        layers: a.layers,
        gamma: a.gamma,
        loss_norm: a.loss.into(),
        batch_size: a.batch_size,
        steps: a.steps,
        lr: a.lr,
        ema_decay: (a.ema_decay > 0.0).then_some(a.ema_decay),
        eval_every: a.eval_every,
        seed: a.seed,
        ..TeacherConfig::default()
    };
    let (model, report) = teacher_train_with(&ds, &cfg, |step, err| log::info!("step {step} validation {err:.5}"))?;
    log::info!("trained {} steps", report.steps_run);
    write_checkpoint(&a.out, &model.to_checkpoint())?;
    Ok(())
}

fn train_forward(a: ForwardArgs) -> Result<()> {
    let ds = read_dataset(input(&a.data)?)?;
    let cfg = ForwardConfig {
        hidden: a.hidden,
        layers: a.layers,
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        ..ForwardConfig::default()
    };
    let (model, report) = forward_train(&ds, &cfg)?;
    if let Some(v) = report.final_validation() {
        log::info!("validation mse {v:.3e}");
    }
    write_checkpoint(&a.out, &model.to_checkpoint())?;
    Ok(())
}

fn distill(a: DistillArgs) -> Result<()> {
    let teacher = TeacherModel::from_checkpoint(&read_checkpoint(input(&a.teacher)?)?)?;
    let ds = read_dataset(input(&a.data)?)?;
    let cfg = DistillConfig {
        mode: a.mode.into(),
        target: a.target.into(),
        ema_decay: a.ema_decay,
        batch_size: a.batch_size,
        steps: a.steps,
        lr: a.lr,
        eval_every: a.eval_every,
        seed: a.seed,
        ..DistillConfig::default()
    };
    let (student, _) =
        distill_train_with(&teacher, &ds, &cfg, |step, loss| log::info!("step {step} held-out loss {loss:.3e}"))?;
    write_checkpoint(&a.out, &student.to_checkpoint())?;
    Ok(())
}

fn train_ddpm(a: DdpmArgs) -> Result<()> {
    let ds = read_dataset(input(&a.data)?)?;
    let cfg = DdpmConfig {
        diffusion_steps: a.diffusion_steps,
        beta_min: a.beta_min,
        beta_max: a.beta_max,
        hidden: a.hidden,
        layers: a.layers,
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        ..DdpmConfig::default()
    };
    let (model, report) = ddpm_train(&ds, &cfg)?;
    if let Some(v) = report.final_validation() {
        log::info!("validation noise mse {v:.4}");
    }
    write_checkpoint(&a.out, &model.to_checkpoint())?;
    Ok(())
}

#[derive(Default)]
struct Models {
    csa: Option<StudentModel>,
    csa_dagger: Option<StudentModel>,
    ddpm: Option<DdpmModel>,
    phi: Option<ForwardModel>,
}

fn put<T>(slot: &mut Option<T>, value: T, path: &Path) -> Result<()> {
    if slot.replace(value).is_some() {
        return Err(UsageError(format!("{} repeats a checkpoint kind", path.display())).into());
    }
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> Result<Models> {
    let mut m = Models::default();
    for p in paths {
        let ck = read_checkpoint(input(p)?).with_context(|| format!("reading {}", p.display()))?;
        match ck.kind {
            ModelKind::StudentCsa => put(&mut m.csa, StudentModel::from_checkpoint(&ck)?, p)?,
            ModelKind::StudentCsaDagger => put(&mut m.csa_dagger, StudentModel::from_checkpoint(&ck)?, p)?,
            ModelKind::Ddpm => put(&mut m.ddpm, DdpmModel::from_checkpoint(&ck)?, p)?,
            ModelKind::Forward => put(&mut m.phi, ForwardModel::from_checkpoint(&ck)?, p)?,
            other => {
                return Err(UsageError(format!("{} holds a {other:?} checkpoint, not a copilot", p.display())).into())
            }
        }
    }
    if m.csa_dagger.is_some() && m.phi.is_none() {
        return Err(UsageError("a csa-dagger student needs a forward-model checkpoint as well".into()).into());
    }
    Ok(m)
}

fn copilots(m: Models) -> Vec<Box<dyn Copilot>> {
    let mut out: Vec<Box<dyn Copilot>> = Vec::new();
    if let Some(student) = m.csa {
        out.push(Box::new(CsaCopilot { student, phi: None }));
    }
    if let Some(student) = m.csa_dagger {
        out.push(Box::new(CsaCopilot { student, phi: m.phi }));
    }
    if let Some(model) = m.ddpm {
        out.push(Box::new(DdpmCopilot { model }));
    }
    out
}

fn eval_config(p: &PilotArgs) -> Result<EvalConfig> {
    let env: EnvKind = p.env.into();
    let spec = match (p.pilot.surrogate(), p.epsilon) {
        (None, _) => PilotSpec::Expert,
        (Some(_), Some(e)) => p.with_epsilon(e),
        (Some(surrogate), None) => {
            // Calibration episodes come from a seed the evaluation grid does not use.
            let cal = calibrate_epsilon(env, surrogate, (p.band_lo, p.band_hi), 300, p.seed.wrapping_add(1_000_003))?;
            if cal.within_band {
                log::info!("calibrated epsilon {:.4} (success {:.3})", cal.epsilon, cal.success);
            } else {
                log::warn!("epsilon {:.4} gives success {:.3}, outside the band", cal.epsilon, cal.success);
            }
            p.with_epsilon(cal.epsilon)
        }
    };
    let cfg = EvalConfig { env, pilot: spec, seeds: p.seeds, rollouts: p.rollouts, base_seed: p.seed };
    cfg.validate()?;
    Ok(cfg)
}

fn emit(table: &MetricsTable, out: &OutputArgs) -> Result<()> {
    let text = match out.format {
        FormatArg::Csv => table.to_csv(),
        FormatArg::Json => table.to_json() + "\n",
    };
    match &out.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(UsageError("alpha must lie in [0, 1]".into()).into());
    }
    let list = copilots(load_models(&a.models.ckpt)?);
    let cfg = eval_config(&a.pilot)?;
    let mut table = alpha_sweep(&cfg, None, &[0.0])?;
    for c in list {
        table.extend(alpha_sweep(&cfg, Some(c.as_ref()), &[a.alpha])?);
    }
    emit(&table, &a.output)
}

fn sweep(a: SweepArgs, best_only: bool) -> Result<()> {
    if a.alphas.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(UsageError("alphas must lie in [0, 1]".into()).into());
    }
    let list = copilots(load_models(&a.models.ckpt)?);
    let cfg = eval_config(&a.pilot)?;
    let mut table = alpha_sweep(&cfg, None, &[0.0])?;
    for c in list {
        let t = alpha_sweep(&cfg, Some(c.as_ref()), &a.alphas)?;
        log::info!("{} done", c.name());
        if best_only {
            table.rows.extend(t.best_success().cloned());
        } else {
            table.extend(t);
        }
    }
    emit(&table, &a.output)
}

fn assist_bench(a: AssistBenchArgs) -> Result<()> {
    let list = copilots(load_models(&a.models.ckpt)?);
    if list.is_empty() {
        return Err(UsageError("assist-bench needs at least one --ckpt".into()).into());
    }
    let env = Env::reset(a.env.into(), 0, &mut episode_rng(a.seed, 0, ENV_STREAM));
    let (state, action) = (env.copilot_view(), env.expert_action());
    println!("copilot,alpha,calls,nfe,p50_us,p90_us,p99_us,mean_us");
    for c in &list {
        for &alpha in &a.alphas {
            let r = latency_bench(c.as_ref(), &state, &action, alpha, a.calls, a.seed)?;
            println!(
                "{},{},{},{},{:.2},{:.2},{:.2},{:.2}",
                r.copilot, r.alpha, r.calls, r.nfe, r.p50_us, r.p90_us, r.p99_us, r.mean_us
            );
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let m = load_models(&a.models.ckpt)?;
    let phi = m.phi;
    let copilots = Copilots {
        csa: m.csa.map(|student| Arc::new(CsaCopilot { student, phi: None }) as Arc<dyn Copilot>),
        csa_dagger: m.csa_dagger.map(|student| Arc::new(CsaCopilot { student, phi: phi.clone() }) as Arc<dyn Copilot>),
        ddpm: m.ddpm.map(|model| Arc::new(DdpmCopilot { model }) as Arc<dyn Copilot>),
    };
    let addr = format!("{}:{}", a.host, a.port).parse().map_err(|e| UsageError(format!("bad listen address: {e}")))?;
    let envs: Vec<EnvKind> = a.env.iter().map(|&e| e.into()).collect();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let server = Server::bind(addr, copilots).await?.with_envs(&envs);
        log::info!("listening on ws://{}", server.local_addr()?);
        server.run().await
    })?;
    Ok(())
}

fn grid(dim: usize, n: usize, range: f64) -> Vec<Vec<f64>> {
    let axis: Vec<f64> =
        (0..n).map(|i| if n == 1 { 0.0 } else { -range + 2.0 * range * i as f64 / (n - 1) as f64 }).collect();
    let mut points = vec![Vec::new()];
    for _ in 0..dim {
        points = points.into_iter().flat_map(|p| axis.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
    }
    points
}

fn oracle_check(a: OracleArgs) -> Result<()> {
    let data = match a.fixture {
        FixtureArg::TwoPoint => FiniteDataset::two_point(),
        FixtureArg::TwoMode2d => two_mode_2d(),
    };
    let dim = data.dim();
    let teacher = match &a.teacher {
        Some(p) => {
            let t = TeacherModel::from_checkpoint(&read_checkpoint(input(p)?)?)?;
            if t.action_dim() != dim || t.state_dim() != 0 {
                return Err(UsageError(format!(
                    "teacher has action dim {} and state dim {}; the fixture needs {dim} and 0",
                    t.action_dim(),
                    t.state_dim()
                ))
                .into());
            }
            Some(t)
        }
        None => None,
    };
    let sched = match &teacher {
        Some(t) => Denoiser::<f32>::schedule(t).clone(),
        None => NoiseSchedule::new(a.schedule.params())?,
    };
    let points = grid(dim, a.grid, a.range);
    let mut cols: Vec<String> = vec!["rung".into(), "sigma".into()];
    cols.extend((0..dim).map(|d| format!("x{d}")));
    cols.extend((0..dim).map(|d| format!("oracle{d}")));
    if teacher.is_some() {
        cols.extend((0..dim).map(|d| format!("teacher{d}")));
    }
    let mut text = cols.join(",") + "\n";
    let (mut err_sum, mut count) = (0.0, 0usize);
    for (rung, &sigma) in sched.sigmas().iter().enumerate() {
        let learned = match &teacher {
            Some(t) => {
                let flat: Vec<f32> = points.iter().flatten().map(|&v| v as f32).collect();
                let x = Array2::from_shape_vec((points.len(), dim), flat).expect("grid shape");
                let state = Array2::<f32>::zeros((points.len(), 0));
                let rungs = vec![rung; points.len()];
                Some(teacher_denoise(t, x.view(), &rungs, &Conditions::state_only(state.view()))?)
            }
            None => None,
        };
        for (i, x) in points.iter().enumerate() {
            let d = closed_form_denoiser(x, sigma, &data)?;
            let mut row: Vec<String> = vec![rung.to_string(), sigma.to_string()];
            row.extend(x.iter().map(f64::to_string));
            row.extend(d.iter().map(f64::to_string));
            if let Some(l) = &learned {
                let lr = l.row(i);
                row.extend(lr.iter().map(|v| v.to_string()));
                err_sum += d.iter().zip(lr.iter()).map(|(o, &t)| (o - t as f64).powi(2)).sum::<f64>().sqrt();
                count += 1;
            }
            text += &(row.join(",") + "\n");
        }
    }
    if count > 0 {
        log::info!("mean L2 error against the closed form: {:.5}", err_sum / count as f64);
    }
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}
