//! One-step consistency student distilled from the teacher's Heun steps.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, TransitionDataset};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::nn::{AdamConfig, AdamState, CondInputs, CondMlp, Params};
use crate::persistence::{load_params, push_params, Checkpoint, ModelKind};
use crate::schedule::NoiseSchedule;
use crate::teacher::{
    check_dataset, combine, cond_config_from_meta, cosine_lr, heun_step, row_coeffs, scale_rows, train_val_split,
    Conditions, Denoiser, TeacherModel, TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StudentMode {
    /// State conditioning only.
    Csa,
    /// State plus the forward model's predicted direction of motion.
    CsaDagger,
}

impl StudentMode {
    pub fn kind(self) -> ModelKind {
        match self {
            StudentMode::Csa => ModelKind::StudentCsa,
            StudentMode::CsaDagger => ModelKind::StudentCsaDagger,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StudentMode::Csa => "csa",
            StudentMode::CsaDagger => "csa_dagger",
        }
    }
}

/// Consistency function `f(a, σ, cond) ↦ â⁰` with the boundary-enforcing
/// parameterization, so `f` is the identity at the schedule floor.
#[derive(Debug)]
pub struct StudentModel {
    pub net: CondMlp<f32>,
    schedule: NoiseSchedule,
    mode: StudentMode,
    evaluations: AtomicU64,
}

impl Clone for StudentModel {
    fn clone(&self) -> Self {
        Self {
            net: self.net.clone(),
            schedule: self.schedule.clone(),
            mode: self.mode,
            evaluations: AtomicU64::new(self.evaluations()),
        }
    }
}

impl StudentModel {
    /// Starts from the teacher's denoiser weights.
    pub fn from_teacher(teacher: &TeacherModel, mode: StudentMode) -> Result<Self> {
        if mode == StudentMode::CsaDagger && !teacher.has_direction() {
            return Err(Error::config("a direction-conditioned student needs a teacher with a direction input"));
        }
        Ok(Self::new(teacher.net.clone(), teacher.schedule().clone(), mode))
    }

    pub fn new(net: CondMlp<f32>, schedule: NoiseSchedule, mode: StudentMode) -> Self {
        Self { net, schedule, mode, evaluations: AtomicU64::new(0) }
    }

    pub fn mode(&self) -> StudentMode {
        self.mode
    }

    pub fn state_dim(&self) -> usize {
        self.net.config().cond_dim
    }

    pub fn action_dim(&self) -> usize {
        self.net.config().input_dim
    }

    /// Network evaluations performed so far, counted per sample.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.mode.kind(), Some(*self.schedule.params()));
        let c = self.net.config();
        for (k, v) in [
            ("state_dim", c.cond_dim),
            ("action_dim", c.input_dim),
            ("direction_dim", c.direction_dim),
            ("hidden", c.hidden),
            ("layers", c.layers),
            ("noise_freqs", c.noise_freqs),
        ] {
            ck.set_meta(k, v as f64);
        }
        push_params(&mut ck, "f.", self.net.params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mode = match ck.kind {
            ModelKind::StudentCsa => StudentMode::Csa,
            ModelKind::StudentCsaDagger => StudentMode::CsaDagger,
            other => return Err(Error::format(format!("expected a student checkpoint, got {}", other.name()))),
        };
        let cfg = cond_config_from_meta(ck)?;
        let params = load_params(ck, "f.", Arc::new(CondMlp::<f32>::layout_for(&cfg)))?;
        Ok(Self::new(CondMlp::from_params(cfg, params)?, NoiseSchedule::new(ck.require_schedule()?)?, mode))
    }

    fn direction_for<'a>(&self, cond: &Conditions<'a, f32>) -> Option<ArrayView2<'a, f32>> {
        match self.mode {
            StudentMode::Csa => None,
            StudentMode::CsaDagger => cond.direction,
        }
    }

    /// Evaluates `f` with explicit parameters (used for the EMA target).
    fn apply(
        &self,
        params: Option<&Params<f32>>,
        a: ArrayView2<f32>,
        rungs: &[usize],
        cond: &Conditions<f32>,
    ) -> Result<Array2<f32>> {
        if rungs.len() != a.nrows() {
            return Err(Error::config(format!("{} rungs for {} rows", rungs.len(), a.nrows())));
        }
        let rc = row_coeffs(rungs, |n| self.schedule.boundary(n))?;
        let x = scale_rows(a, &rc.c_in);
        let inputs = CondInputs { log_sigma: &rc.log_sigma, cond1: cond.state, cond2: self.direction_for(cond) };
        let o = match params {
            Some(p) => CondMlp::from_params(*self.net.config(), p.clone())?.forward(x.view(), &inputs)?,
            None => self.net.forward(x.view(), &inputs)?,
        };
        Ok(combine(&o, a, &rc))
    }
}

impl Denoiser<f32> for StudentModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn denoise(&self, a: ArrayView2<f32>, rungs: &[usize], cond: &Conditions<f32>) -> Result<Array2<f32>> {
        consistency_denoise(self, a, rungs, cond)
    }
}

/// One network evaluation per row: `c_skip · a + c_out · F(c_in · a, σ, cond)`.
pub fn consistency_denoise(
    model: &StudentModel,
    a: ArrayView2<f32>,
    rungs: &[usize],
    cond: &Conditions<f32>,
) -> Result<Array2<f32>> {
    let out = model.apply(None, a, rungs, cond)?;
    model.evaluations.fetch_add(a.nrows() as u64, Ordering::Relaxed);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMode {
    /// Stop-gradient target with exponentially averaged weights.
    Ema,
    /// The same live network on both branches, gradients through both.
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub mode: StudentMode,
    pub target: TargetMode,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub max_grad_norm: Option<f64>,
    pub eval_every: usize,
    pub held_out_frac: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: StudentMode::Csa,
            target: TargetMode::Ema,
            ema_decay: 0.99,
            batch_size: 256,
            steps: 10_000,
            lr: 1e-4,
            lr_floor: 0.05,
            max_grad_norm: Some(10.0),
            eval_every: 1000,
            held_out_frac: 0.1,
            seed: 0,
        }
    }
}

/// Random draws behind one distillation loss evaluation.
#[derive(Clone, Debug)]
pub struct DistillDraw {
    /// Online rungs in `0..T-1`; the target sits one rung lower in σ.
    pub rungs: Vec<usize>,
    pub noise: Array2<f32>,
}

impl DistillDraw {
    pub fn sample<R: Rng + ?Sized>(schedule: &NoiseSchedule, batch: usize, action_dim: usize, rng: &mut R) -> Self {
        let rungs = (0..batch).map(|_| rng.random_range(0..schedule.steps() - 1)).collect();
        let noise = Array2::from_shape_fn((batch, action_dim), |_| rng.sample(StandardNormal));
        Self { rungs, noise }
    }
}

#[derive(Clone, Debug)]
pub struct DistillLoss {
    pub loss: f64,
    pub grads: Params<f32>,
}

fn batch_conditions<'a>(batch: &'a Batch, mode: StudentMode) -> Conditions<'a, f32> {
    Conditions {
        state: batch.states.view(),
        direction: (mode == StudentMode::CsaDagger).then(|| batch.directions.view()),
    }
}

/// `MSE(f(aₙ, n), f_target(heun(aₙ, n), n + 1))`, with the teacher and both
/// branches sharing the student's conditioning. `target = None` uses the
/// live student weights on the target branch.
pub fn distill_loss_with(
    student: &StudentModel,
    target: Option<&Params<f32>>,
    teacher: &TeacherModel,
    batch: &Batch,
    draw: &DistillDraw,
) -> Result<DistillLoss> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::config("empty batch"));
    }
    let sigmas = student.schedule.sigmas();
    let mut a_t = batch.actions.clone();
    for (i, &n) in draw.rungs.iter().enumerate() {
        for j in 0..a_t.ncols() {
            a_t[[i, j]] += sigmas[n] as f32 * draw.noise[[i, j]];
        }
    }
    let cond = batch_conditions(batch, student.mode);
    let stepped = heun_step(teacher, a_t.view(), &draw.rungs, &cond)?;
    let next: Vec<usize> = draw.rungs.iter().map(|n| n + 1).collect();

    let (online, cache_on, rc_on) = forward_branch(student, a_t.view(), &draw.rungs, &cond)?;
    let live = target.is_none();
    let (tgt, cache_tg, rc_tg) = match target {
        Some(p) => {
            let t = student.apply(Some(p), stepped.view(), &next, &cond)?;
            (t, None, None)
        }
        None => {
            let (t, c, rc) = forward_branch(student, stepped.view(), &next, &cond)?;
            (t, Some(c), Some(rc))
        }
    };
    let diff = &online - &tgt;
    let count = diff.len() as f64;
    let loss = diff.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / count;
    let g = diff.mapv(|v| (2.0 * v as f64 / count) as f32);
    let upstream = |rc: &crate::teacher::RowCoeffs, sign: f32| {
        let mut u = g.clone();
        for (mut row, &co) in u.rows_mut().into_iter().zip(&rc.c_out) {
            row.mapv_inplace(|v| sign * v * co as f32);
        }
        u
    };
    let mut grads = student.net.backward(&cache_on, upstream(&rc_on, 1.0).view()).params;
    if live {
        let (c, rc) = (cache_tg.expect("live cache"), rc_tg.expect("live coeffs"));
        let back = student.net.backward(&c, upstream(&rc, -1.0).view()).params;
        grads.add_scaled(&back, 1.0);
    }
    Ok(DistillLoss { loss, grads })
}

fn forward_branch(
    student: &StudentModel,
    a: ArrayView2<f32>,
    rungs: &[usize],
    cond: &Conditions<f32>,
) -> Result<(Array2<f32>, crate::nn::CondCache<f32>, crate::teacher::RowCoeffs)> {
    let rc = row_coeffs(rungs, |n| student.schedule.boundary(n))?;
    let x = scale_rows(a, &rc.c_in);
    let (o, cache) = student.net.forward_cached(
        x.view(),
        &CondInputs { log_sigma: &rc.log_sigma, cond1: cond.state, cond2: student.direction_for(cond) },
    )?;
    let out = combine(&o, a, &rc);
    Ok((out, cache, rc))
}

pub fn distill_loss<R: Rng + ?Sized>(
    student: &StudentModel,
    target: Option<&Params<f32>>,
    teacher: &TeacherModel,
    batch: &Batch,
    rng: &mut R,
) -> Result<DistillLoss> {
    let draw = DistillDraw::sample(&student.schedule, batch.len(), student.action_dim(), rng);
    distill_loss_with(student, target, teacher, batch, &draw)
}

pub fn distill_train(
    teacher: &TeacherModel,
    ds: &TransitionDataset,
    cfg: &DistillConfig,
) -> Result<(StudentModel, TrainReport)> {
    distill_train_with(teacher, ds, cfg, |_, _| {})
}

/// Distills `teacher` on `ds`; `progress(step, held_out_loss)` follows each evaluation.
pub fn distill_train_with(
    teacher: &TeacherModel,
    ds: &TransitionDataset,
    cfg: &DistillConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(StudentModel, TrainReport)> {
    check_dataset(ds)?;
    if ds.state_dim() != teacher.state_dim() || ds.action_dim() != teacher.action_dim() {
        return Err(Error::config(format!(
            "dataset dims ({}, {}) do not match teacher ({}, {})",
            ds.state_dim(),
            ds.action_dim(),
            teacher.state_dim(),
            teacher.action_dim()
        )));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 || !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::config("batch_size and eval_every must be positive, ema_decay in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val) = train_val_split(ds, cfg.held_out_frac, &mut rng);
    let mut student = StudentModel::from_teacher(teacher, cfg.mode)?;
    let mut ema = student.net.params().clone();
    let probe_rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51ed_270b);
    let probe_batch = val.gather(&val.sample_indices(val.len().min(1024), probe_rng));
    let probe_draw = DistillDraw::sample(&student.schedule, probe_batch.len(), student.action_dim(), probe_rng);
    let adam = AdamConfig { lr: cfg.lr, max_grad_norm: cfg.max_grad_norm, ..AdamConfig::default() };
    let mut opt = AdamState::new(adam, student.net.params());
    let mut report = TrainReport::default();
    let mut window = (0.0, 0usize);
    for step in 0..cfg.steps {
        let batch = train.gather(&train.sample_indices(cfg.batch_size, &mut rng));
        let target = match cfg.target {
            TargetMode::Ema => Some(&ema),
            TargetMode::Live => None,
        };
        let out = distill_loss(&student, target, teacher, &batch, &mut rng)?;
        if !out.loss.is_finite() {
            return Err(Error::Data(format!("distillation loss diverged at step {step}")));
        }
        opt.update_with_lr(student.net.params_mut(), &out.grads, cosine_lr(cfg.lr, cfg.lr_floor, step, cfg.steps))?;
        ema.ema_toward(student.net.params(), cfg.ema_decay as f32);
        window.0 += out.loss;
        window.1 += 1;
        report.steps_run = step + 1;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let held = distill_loss_with(&student, None, teacher, &probe_batch, &probe_draw)?.loss;
            report.train_loss.push((step + 1, window.0 / window.1 as f64));
            report.validation.push((step + 1, held));
            window = (0.0, 0);
            progress(step + 1, held);
        }
    }
    student.evaluations.store(0, Ordering::Relaxed);
    Ok((student, report))
}

/// A pilot action to be corrected at assistance level `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssistRequest<'a> {
    pub state: &'a [f32],
    pub action: &'a [f32],
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assisted {
    pub action: Vec<f32>,
    /// Denoiser evaluations spent on this call.
    pub nfe: usize,
    pub latency_us: f64,
    pub rung: usize,
}

/// Treats the pilot action as a noisy expert action at the rung matching
/// `alpha` and maps it to the trajectory endpoint in one evaluation.
pub fn csa_assist(student: &StudentModel, phi: Option<&ForwardModel>, req: &AssistRequest) -> Result<Assisted> {
    let start = Instant::now();
    let rung = student.schedule.rung_for_alpha(req.alpha)?;
    if req.state.len() != student.state_dim() || req.action.len() != student.action_dim() {
        return Err(Error::config(format!(
            "assist request dims ({}, {}) do not match student ({}, {})",
            req.state.len(),
            req.action.len(),
            student.state_dim(),
            student.action_dim()
        )));
    }
    let direction = match student.mode {
        StudentMode::Csa => None,
        StudentMode::CsaDagger => {
            let phi = phi.ok_or_else(|| Error::config("a direction-conditioned student needs a forward model"))?;
            Some(phi.direction(req.state, req.action)?)
        }
    };
    let s = ArrayView2::from_shape((1, req.state.len()), req.state).expect("one row");
    let a = ArrayView2::from_shape((1, req.action.len()), req.action).expect("one row");
    let dir = direction.as_ref().map(|d| ArrayView2::from_shape((1, d.len()), d.as_slice()).expect("one row"));
    let out = consistency_denoise(student, a, &[rung], &Conditions { state: s, direction: dir })?;
    // One evaluation per row; the model-wide counter is shared with concurrent callers.
    let nfe = a.nrows();
    Ok(Assisted { action: out.row(0).to_vec(), nfe, latency_us: start.elapsed().as_secs_f64() * 1e6, rung })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::two_point_dataset;
    use crate::teacher::TeacherConfig;
    use ndarray::array;

    fn tiny_teacher(state_dim: usize) -> TeacherModel {
        let cfg = TeacherConfig { hidden: 8, layers: 1, ..TeacherConfig::default() };
        TeacherModel::new(&cfg, state_dim, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn floor_rung_is_exact_identity() {
        let s = StudentModel::from_teacher(&tiny_teacher(0), StudentMode::Csa).unwrap();
        let st = Array2::<f32>::zeros((3, 0));
        let a = array![[0.123f32], [-7.5], [1e-3]];
        let out = consistency_denoise(&s, a.view(), &[39, 39, 39], &Conditions::state_only(st.view())).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn every_assist_costs_one_evaluation() {
        let s = StudentModel::from_teacher(&tiny_teacher(2), StudentMode::Csa).unwrap();
        for alpha in [0.0, 0.3, 1.0] {
            let r = csa_assist(&s, None, &AssistRequest { state: &[0.1, 0.2], action: &[0.5], alpha }).unwrap();
            assert_eq!(r.nfe, 1);
        }
        assert_eq!(s.evaluations(), 3);
        let r = csa_assist(&s, None, &AssistRequest { state: &[0.1, 0.2], action: &[0.5], alpha: 0.0 }).unwrap();
        assert_eq!(r.action, vec![0.5]);
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let s = StudentModel::from_teacher(&tiny_teacher(2), StudentMode::CsaDagger).unwrap();
        let req = AssistRequest { state: &[0.0, 0.0], action: &[0.1], alpha: 0.5 };
        assert!(matches!(csa_assist(&s, None, &req), Err(Error::Config(_))));
        let bad = AssistRequest { alpha: 1.5, ..req };
        assert!(matches!(csa_assist(&s, None, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn origin_is_a_fixed_point_of_zero_networks() {
        let mut teacher = tiny_teacher(0);
        let z = Params::zeros(teacher.net.params().layout().clone());
        *teacher.net.params_mut() = z;
        let s = StudentModel::from_teacher(&teacher, StudentMode::Csa).unwrap();
        let ds = two_point_dataset(4);
        let mut batch = crate::data::TrainingSet::new(&ds).all();
        batch.actions.fill(0.0);
        let draw = DistillDraw { rungs: vec![0, 5, 20, 38], noise: Array2::zeros((4, 1)) };
        let out = distill_loss_with(&s, None, &teacher, &batch, &draw).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn last_rung_target_is_teacher_step() {
        let teacher = tiny_teacher(0);
        let s = StudentModel::from_teacher(&teacher, StudentMode::Csa).unwrap();
        let ds = two_point_dataset(2);
        let batch = crate::data::TrainingSet::new(&ds).all();
        let draw = DistillDraw { rungs: vec![38, 38], noise: array![[0.3f32], [-0.2]] };
        let out = distill_loss_with(&s, None, &teacher, &batch, &draw).unwrap();
        let sig = s.schedule.sigmas()[38] as f32;
        let a_t = array![[-1.0 + sig * 0.3], [1.0 - sig * 0.2]];
        let st = Array2::<f32>::zeros((2, 0));
        let cond = Conditions::state_only(st.view());
        let stepped = heun_step(&teacher, a_t.view(), &[38, 38], &cond).unwrap();
        let online = consistency_denoise(&s, a_t.view(), &[38, 38], &cond).unwrap();
        let want = (&online - &stepped).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 2.0;
        assert!((out.loss - want).abs() <= 1e-9 + 1e-6 * want, "{} vs {want}", out.loss);
    }

    #[test]
    fn checkpoint_round_trip_keeps_mode() {
        let s = StudentModel::from_teacher(&tiny_teacher(3), StudentMode::CsaDagger).unwrap();
        let back = StudentModel::from_checkpoint(&s.to_checkpoint()).unwrap();
        assert_eq!(back.mode(), StudentMode::CsaDagger);
        assert_eq!(back.net, s.net);
    }
}
