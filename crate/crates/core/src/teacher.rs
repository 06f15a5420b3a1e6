//! EDM teacher: preconditioned denoiser, adaptively weighted loss and Heun sampling.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, TrainingSet, TransitionDataset};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, CondInputs, CondMlp, CondMlpConfig, Mlp, MlpConfig, Params, Scalar};
use crate::oracle::{closed_form_denoiser, FiniteDataset};
use crate::persistence::{load_params, push_params, Checkpoint, ModelKind};
use crate::schedule::{sample_step_index, NoiseSchedule, PrecondCoeffs, ScheduleParams};

/// Adaptive weights are squashed into `[-LAMBDA_BOUND, LAMBDA_BOUND]`.
pub const LAMBDA_BOUND: f64 = 10.0;

/// State plus optional direction-of-motion conditioning for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Conditions<'a, F> {
    pub state: ArrayView2<'a, F>,
    pub direction: Option<ArrayView2<'a, F>>,
}

impl<'a, F> Conditions<'a, F> {
    pub fn state_only(state: ArrayView2<'a, F>) -> Self {
        Self { state, direction: None }
    }

    pub fn batch_len(&self) -> usize {
        self.state.nrows()
    }
}

/// Anything that maps noisy actions at schedule rungs to clean estimates.
pub trait Denoiser<F: Scalar> {
    fn schedule(&self) -> &NoiseSchedule;

    /// Denoises row `i` of `a` at rung `rungs[i]`.
    fn denoise(&self, a: ArrayView2<F>, rungs: &[usize], cond: &Conditions<F>) -> Result<Array2<F>>;
}

/// One Heun step of the probability-flow ODE from rung `n` to `n + 1`
/// (one rung lower in σ) for every row.
pub fn heun_step<F: Scalar, D: Denoiser<F> + ?Sized>(
    den: &D,
    a: ArrayView2<F>,
    rungs: &[usize],
    cond: &Conditions<F>,
) -> Result<Array2<F>> {
    let sigmas = den.schedule().sigmas();
    let floor = sigmas.len() - 1;
    if rungs.len() != a.nrows() {
        return Err(Error::config(format!("{} rungs for {} rows", rungs.len(), a.nrows())));
    }
    if let Some(&n) = rungs.iter().find(|&&n| n >= floor) {
        return Err(Error::domain(format!("no Heun step below rung {n} (floor is {floor})")));
    }
    let next: Vec<usize> = rungs.iter().map(|n| n + 1).collect();
    let d0 = den.denoise(a, rungs, cond)?;
    let mut slope0 = Array2::zeros(a.dim());
    let mut euler = Array2::zeros(a.dim());
    for (i, &n) in rungs.iter().enumerate() {
        let (s, sn) = (F::of(sigmas[n]), F::of(sigmas[n + 1]));
        let h = sn - s;
        for j in 0..a.ncols() {
            let x = a[[i, j]];
            let sl = (x - d0[[i, j]]) / s;
            slope0[[i, j]] = sl;
            euler[[i, j]] = x + h * sl;
        }
    }
    let d1 = den.denoise(euler.view(), &next, cond)?;
    let mut out = Array2::zeros(a.dim());
    let half = F::of(0.5);
    for (i, &n) in rungs.iter().enumerate() {
        let (s, sn) = (F::of(sigmas[n]), F::of(sigmas[n + 1]));
        let h = sn - s;
        for j in 0..a.ncols() {
            let s1 = (euler[[i, j]] - d1[[i, j]]) / sn;
            out[[i, j]] = a[[i, j]] + half * h * (slope0[[i, j]] + s1);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<F> {
    pub actions: Array2<F>,
    /// Denoiser evaluations per row.
    pub nfe: usize,
}

/// Runs Heun steps from `rung_init` down to the floor. Without `a_init`
/// the chain starts from `σ(rung_init) · z`.
pub fn teacher_sample<F, D, R>(
    den: &D,
    cond: &Conditions<F>,
    a_init: Option<ArrayView2<F>>,
    rung_init: usize,
    action_dim: usize,
    rng: &mut R,
) -> Result<Sample<F>>
where
    F: Scalar,
    D: Denoiser<F> + ?Sized,
    R: Rng + ?Sized,
{
    let sched = den.schedule();
    let sigma0 = sched.sigma(rung_init)?;
    let mut a = match a_init {
        Some(a) => a.to_owned(),
        None => Array2::from_shape_fn((cond.batch_len(), action_dim), |_| {
            F::of(sigma0 * rng.sample::<f64, _>(StandardNormal))
        }),
    };
    let floor = sched.steps() - 1;
    let mut nfe = 0;
    for n in rung_init..floor {
        let rungs = vec![n; a.nrows()];
        a = heun_step(den, a.view(), &rungs, cond)?;
        nfe += 2;
    }
    Ok(Sample { actions: a, nfe })
}

/// Per-row preconditioning coefficients and `ln σ`.
pub(crate) struct RowCoeffs {
    pub c_in: Vec<f64>,
    pub c_skip: Vec<f64>,
    pub c_out: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

pub(crate) fn row_coeffs(rungs: &[usize], coeff: impl Fn(usize) -> Result<PrecondCoeffs>) -> Result<RowCoeffs> {
    let mut out = RowCoeffs {
        c_in: Vec::with_capacity(rungs.len()),
        c_skip: Vec::with_capacity(rungs.len()),
        c_out: Vec::with_capacity(rungs.len()),
        log_sigma: Vec::with_capacity(rungs.len()),
    };
    for &n in rungs {
        let c = coeff(n)?;
        out.c_in.push(c.c_in);
        out.c_skip.push(c.c_skip);
        out.c_out.push(c.c_out);
        out.log_sigma.push(c.sigma.ln());
    }
    Ok(out)
}

pub(crate) fn scale_rows(a: ArrayView2<f32>, s: &[f64]) -> Array2<f32> {
    let mut out = a.to_owned();
    for (mut row, &v) in out.rows_mut().into_iter().zip(s) {
        row.mapv_inplace(|x| x * v as f32);
    }
    out
}

/// `c_out · o + c_skip · a`, row-wise.
pub(crate) fn combine(o: &Array2<f32>, a: ArrayView2<f32>, rc: &RowCoeffs) -> Array2<f32> {
    let mut d = Array2::zeros(a.dim());
    for i in 0..a.nrows() {
        let (co, cs) = (rc.c_out[i] as f32, rc.c_skip[i] as f32);
        for j in 0..a.ncols() {
            d[[i, j]] = co * o[[i, j]] + cs * a[[i, j]];
        }
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossNorm {
    /// `‖a − D‖₂`
    L2,
    /// `‖a − D‖₂²`
    SquaredL2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub schedule: ScheduleParams,
    pub hidden: usize,
    pub layers: usize,
    pub noise_freqs: usize,
    pub lambda_hidden: usize,
    pub gamma: f64,
    pub loss_norm: LossNorm,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Final learning rate of the cosine decay as a fraction of `lr`.
    pub lr_floor: f64,
    pub max_grad_norm: Option<f64>,
    /// Exponential moving average of the denoiser weights; the average is
    /// what gets validated and returned.
    pub ema_decay: Option<f64>,
    pub eval_every: usize,
    pub held_out_frac: f64,
    /// Stop after this many evaluations without a new best validation error.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleParams::default(),
            hidden: 128,
            layers: 3,
            noise_freqs: 8,
            lambda_hidden: 32,
            gamma: 0.3,
            loss_norm: LossNorm::SquaredL2,
            batch_size: 256,
            steps: 20_000,
            lr: 3e-4,
            lr_floor: 0.05,
            max_grad_norm: Some(10.0),
            ema_decay: Some(0.999),
            eval_every: 1000,
            held_out_frac: 0.1,
            patience: None,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.eval_every == 0 {
            return Err(Error::config("batch_size, hidden and eval_every must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::config("lr must be positive and lr_floor in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.held_out_frac) {
            return Err(Error::config("held_out_frac must lie in [0, 1)"));
        }
        if self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return Err(Error::config("ema_decay must lie in [0, 1)"));
        }
        Ok(())
    }

    pub(crate) fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(self.lr, self.lr_floor, step, self.steps)
    }
}

pub(crate) fn cosine_lr(lr: f64, floor: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    let lo = lr * floor;
    lo + (lr - lo) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub net: CondMlp<f32>,
    pub lambda: Mlp<f32>,
    schedule: NoiseSchedule,
    pub gamma: f64,
    pub loss_norm: LossNorm,
}

fn lambda_config(hidden: usize) -> MlpConfig {
    MlpConfig { input_dim: 1, hidden, layers: 1, output_dim: 1, layer_norm: false, linear_skip: false }
}

impl TeacherModel {
    pub fn new<R: Rng + ?Sized>(cfg: &TeacherConfig, state_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let net_cfg = CondMlpConfig {
            noise_freqs: cfg.noise_freqs,
            ..CondMlpConfig::denoiser(action_dim, state_dim).with_hidden(cfg.hidden, cfg.layers)
        };
        let net = CondMlp::new(net_cfg, rng);
        let lambda = Mlp::new(lambda_config(cfg.lambda_hidden), rng);
        Ok(Self {
            net,
            lambda,
            schedule: NoiseSchedule::new(cfg.schedule)?,
            gamma: cfg.gamma,
            loss_norm: cfg.loss_norm,
        })
    }

    pub fn from_parts(
        net: CondMlp<f32>,
        lambda: Mlp<f32>,
        schedule: NoiseSchedule,
        gamma: f64,
        loss_norm: LossNorm,
    ) -> Self {
        Self { net, lambda, schedule, gamma, loss_norm }
    }

    pub fn state_dim(&self) -> usize {
        self.net.config().cond_dim
    }

    pub fn action_dim(&self) -> usize {
        self.net.config().input_dim
    }

    pub fn has_direction(&self) -> bool {
        self.net.config().direction_dim > 0
    }

    /// Clamped adaptive weight `λ(σ)` for each `ln σ`.
    pub fn lambda_values(&self, log_sigma: &[f64]) -> Result<Array1<f64>> {
        let raw = self.lambda.forward(lambda_input(log_sigma).view())?;
        Ok(raw.column(0).mapv(|r| soft_clamp(r as f64)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ModelKind::Teacher, Some(*self.schedule.params()));
        let c = self.net.config();
        for (k, v) in [
            ("state_dim", c.cond_dim),
            ("action_dim", c.input_dim),
            ("direction_dim", c.direction_dim),
            ("hidden", c.hidden),
            ("layers", c.layers),
            ("noise_freqs", c.noise_freqs),
            ("lambda_hidden", self.lambda.config().hidden),
        ] {
            ck.set_meta(k, v as f64);
        }
        ck.set_meta("gamma", self.gamma);
        ck.set_meta("squared_loss", (self.loss_norm == LossNorm::SquaredL2) as u8 as f64);
        push_params(&mut ck, "f.", self.net.params());
        push_params(&mut ck, "lambda.", self.lambda.params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Teacher {
            return Err(Error::format(format!("expected a teacher checkpoint, got {}", ck.kind.name())));
        }
        let net_cfg = cond_config_from_meta(ck)?;
        let net_params = load_params(ck, "f.", Arc::new(CondMlp::<f32>::layout_for(&net_cfg)))?;
        let lcfg = lambda_config(ck.meta_usize("lambda_hidden")?);
        let lparams = load_params(ck, "lambda.", Arc::new(Mlp::<f32>::layout_for(&lcfg)))?;
        Ok(Self {
            net: CondMlp::from_params(net_cfg, net_params)?,
            lambda: Mlp::from_params(lcfg, lparams)?,
            schedule: NoiseSchedule::new(ck.require_schedule()?)?,
            gamma: ck.meta("gamma")?,
            loss_norm: if ck.meta("squared_loss")? != 0.0 { LossNorm::SquaredL2 } else { LossNorm::L2 },
        })
    }
}

pub(crate) fn cond_config_from_meta(ck: &Checkpoint) -> Result<CondMlpConfig> {
    let state_dim = ck.meta_usize("state_dim")?;
    let action_dim = ck.meta_usize("action_dim")?;
    Ok(CondMlpConfig {
        input_dim: action_dim,
        cond_dim: state_dim,
        direction_dim: ck.meta_usize("direction_dim")?,
        hidden: ck.meta_usize("hidden")?,
        layers: ck.meta_usize("layers")?,
        output_dim: action_dim,
        noise_freqs: ck.meta_usize("noise_freqs")?,
    })
}

fn lambda_input(log_sigma: &[f64]) -> Array2<f32> {
    Array2::from_shape_fn((log_sigma.len(), 1), |(i, _)| (log_sigma[i] / 4.0) as f32)
}

fn soft_clamp(raw: f64) -> f64 {
    LAMBDA_BOUND * (raw / LAMBDA_BOUND).tanh()
}

impl Denoiser<f32> for TeacherModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn denoise(&self, a: ArrayView2<f32>, rungs: &[usize], cond: &Conditions<f32>) -> Result<Array2<f32>> {
        teacher_denoise(self, a, rungs, cond)
    }
}

/// `D = c_out · F(c_in · a, σ, s, dir) + c_skip · a` with EDM coefficients.
pub fn teacher_denoise(
    model: &TeacherModel,
    a: ArrayView2<f32>,
    rungs: &[usize],
    cond: &Conditions<f32>,
) -> Result<Array2<f32>> {
    if rungs.len() != a.nrows() {
        return Err(Error::config(format!("{} rungs for {} rows", rungs.len(), a.nrows())));
    }
    let rc = row_coeffs(rungs, |n| model.schedule.edm(n))?;
    let x = scale_rows(a, &rc.c_in);
    let direction = if model.has_direction() { cond.direction } else { None };
    let o =
        model.net.forward(x.view(), &CondInputs { log_sigma: &rc.log_sigma, cond1: cond.state, cond2: direction })?;
    Ok(combine(&o, a, &rc))
}

/// The random draws behind one evaluation of the teacher loss.
#[derive(Clone, Debug)]
pub struct LossDraw {
    pub rungs: Vec<usize>,
    pub noise: Array2<f32>,
    /// `false` drops the direction condition for that row.
    pub keep_direction: Vec<bool>,
}

impl LossDraw {
    pub fn sample<R: Rng + ?Sized>(
        schedule: &NoiseSchedule,
        batch: usize,
        action_dim: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Self {
        let rungs = (0..batch).map(|_| sample_step_index(rng, schedule.steps())).collect();
        let noise = Array2::from_shape_fn((batch, action_dim), |_| rng.sample(StandardNormal));
        let keep_direction = (0..batch).map(|_| !rng.random_bool(gamma)).collect();
        Self { rungs, noise, keep_direction }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherLoss {
    pub loss: f64,
    /// Mean of the unweighted per-sample residual term.
    pub residual: f64,
    pub net_grads: Params<f32>,
    pub lambda_grads: Params<f32>,
}

pub fn teacher_loss<R: Rng + ?Sized>(model: &TeacherModel, batch: &Batch, rng: &mut R) -> Result<TeacherLoss> {
    let draw = LossDraw::sample(&model.schedule, batch.len(), model.action_dim(), model.gamma, rng);
    teacher_loss_with(model, batch, &draw)
}

/// Mean of `e^λ · ℓ − λ` over the batch, where `ℓ` is the residual norm (or
/// its square), with gradients for the denoiser and the weight network.
pub fn teacher_loss_with(model: &TeacherModel, batch: &Batch, draw: &LossDraw) -> Result<TeacherLoss> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::config("empty batch"));
    }
    if draw.rungs.len() != b || draw.noise.nrows() != b || draw.keep_direction.len() != b {
        return Err(Error::config("loss draw does not match batch size"));
    }
    let rc = row_coeffs(&draw.rungs, |n| model.schedule.edm(n))?;
    let sigmas: Vec<f64> = draw.rungs.iter().map(|&n| model.schedule.sigmas()[n]).collect();
    let mut a_t = batch.actions.clone();
    for i in 0..b {
        let s = sigmas[i] as f32;
        for j in 0..a_t.ncols() {
            a_t[[i, j]] += s * draw.noise[[i, j]];
        }
    }
    let x = scale_rows(a_t.view(), &rc.c_in);
    let direction = model.has_direction().then(|| {
        let mut d = batch.directions.clone();
        for (mut row, &keep) in d.rows_mut().into_iter().zip(&draw.keep_direction) {
            if !keep {
                row.fill(0.0);
            }
        }
        d
    });
    let (o, cache) = model.net.forward_cached(
        x.view(),
        &CondInputs {
            log_sigma: &rc.log_sigma,
            cond1: batch.states.view(),
            cond2: direction.as_ref().map(|d| d.view()),
        },
    )?;
    let d = combine(&o, a_t.view(), &rc);
    let r = &batch.actions - &d;

    let (raw, lcache) = model.lambda.forward_cached(lambda_input(&rc.log_sigma).view())?;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut residual = 0.0;
    let mut d_o = Array2::<f32>::zeros(r.dim());
    let mut d_raw = Array2::<f32>::zeros((b, 1));
    for i in 0..b {
        let row = r.row(i);
        let sq: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let t = (raw[[i, 0]] as f64 / LAMBDA_BOUND).tanh();
        let lam = LAMBDA_BOUND * t;
        let w = lam.exp();
        let (ell, dscale) = match model.loss_norm {
            LossNorm::SquaredL2 => (sq, 2.0),
            LossNorm::L2 => {
                let n = sq.sqrt();
                (n, if n > 0.0 { 1.0 / n } else { 0.0 })
            }
        };
        loss += (w * ell - lam) * inv_b;
        residual += ell * inv_b;
        // dL/dD = -w · dscale · r / B, then through D = c_out·O + ...
        let g = -(w * dscale * inv_b * rc.c_out[i]) as f32;
        for j in 0..r.ncols() {
            d_o[[i, j]] = g * row[j];
        }
        d_raw[[i, 0]] = ((w * ell - 1.0) * inv_b * (1.0 - t * t)) as f32;
    }
    let net_grads = model.net.backward(&cache, d_o.view()).params;
    let (lambda_grads, _) = model.lambda.backward(&lcache, d_raw.view());
    Ok(TeacherLoss { loss, residual, net_grads, lambda_grads })
}

/// Validation probe: fixed noise draws with the direction always kept.
#[derive(Clone, Debug)]
pub(crate) struct ValidationProbe {
    batch: Batch,
    draw: LossDraw,
}

impl ValidationProbe {
    pub(crate) fn new(set: &TrainingSet, schedule: &NoiseSchedule, max: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = set.len().min(max);
        let idx: Vec<usize> = if set.len() <= max { (0..n).collect() } else { set.sample_indices(n, &mut rng) };
        let batch = set.gather(&idx);
        let mut draw = LossDraw::sample(schedule, n, batch.actions.ncols(), 0.0, &mut rng);
        draw.keep_direction.fill(true);
        Self { batch, draw }
    }

    /// Mean squared denoising error.
    pub(crate) fn error<D: Denoiser<f32>>(&self, den: &D) -> Result<f64> {
        let sigmas = den.schedule().sigmas();
        let mut a_t = self.batch.actions.clone();
        for (i, &n) in self.draw.rungs.iter().enumerate() {
            for j in 0..a_t.ncols() {
                a_t[[i, j]] += sigmas[n] as f32 * self.draw.noise[[i, j]];
            }
        }
        let cond = Conditions { state: self.batch.states.view(), direction: Some(self.batch.directions.view()) };
        let d = den.denoise(a_t.view(), &self.draw.rungs, &cond)?;
        let r = &self.batch.actions - &d;
        Ok(r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / self.batch.len() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    /// `(step, mean training loss since the previous entry)`.
    pub train_loss: Vec<(usize, f64)>,
    /// `(step, validation error)`.
    pub validation: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn final_validation(&self) -> Option<f64> {
        self.validation.last().map(|v| v.1)
    }
}

pub(crate) fn check_dataset(ds: &TransitionDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if ds.action_dim() == 0 {
        return Err(Error::config("dataset has no action dimensions"));
    }
    Ok(())
}

/// Split into `(train, validation)`; tiny datasets validate on themselves.
pub(crate) fn train_val_split(ds: &TransitionDataset, frac: f64, rng: &mut ChaCha8Rng) -> (TrainingSet, TrainingSet) {
    if frac > 0.0 && ds.len() >= 20 {
        let (train, held) = ds.split(frac, rng);
        (TrainingSet::new(&train), TrainingSet::new(&held))
    } else {
        let all = TrainingSet::new(ds);
        (all.clone(), all)
    }
}

pub fn teacher_train(ds: &TransitionDataset, cfg: &TeacherConfig) -> Result<(TeacherModel, TrainReport)> {
    teacher_train_with(ds, cfg, |_, _| {})
}

/// Like [`teacher_train`], calling `progress(step, validation_error)` after each evaluation.
pub fn teacher_train_with(
    ds: &TransitionDataset,
    cfg: &TeacherConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(TeacherModel, TrainReport)> {
    cfg.validate()?;
    check_dataset(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val) = train_val_split(ds, cfg.held_out_frac, &mut rng);
    let mut model = TeacherModel::new(cfg, ds.state_dim(), ds.action_dim(), &mut rng)?;
    let probe = ValidationProbe::new(&val, &model.schedule, 2048, cfg.seed ^ 0x9e37_79b9);
    let adam = AdamConfig { lr: cfg.lr, max_grad_norm: cfg.max_grad_norm, ..AdamConfig::default() };
    let mut opt_net = AdamState::new(adam, model.net.params());
    let mut opt_lambda = AdamState::new(adam, model.lambda.params());
    let mut ema = cfg.ema_decay.map(|d| (d as f32, model.net.params().clone()));
    let mut report = TrainReport::default();
    let mut window = (0.0, 0usize);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for step in 0..cfg.steps {
        let batch = train.gather(&train.sample_indices(cfg.batch_size, &mut rng));
        let out = teacher_loss(&model, &batch, &mut rng)?;
        if !out.loss.is_finite() {
            return Err(Error::Data(format!("teacher loss diverged at step {step}")));
        }
        let lr = cfg.lr_at(step);
        opt_net.update_with_lr(model.net.params_mut(), &out.net_grads, lr)?;
        opt_lambda.update_with_lr(model.lambda.params_mut(), &out.lambda_grads, lr)?;
        if let Some((decay, avg)) = ema.as_mut() {
            avg.ema_toward(model.net.params(), *decay);
        }
        window.0 += out.loss;
        window.1 += 1;
        report.steps_run = step + 1;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let err = match &ema {
                Some((_, avg)) => probe.error(&with_net_params(&model, avg))?,
                None => probe.error(&model)?,
            };
            report.train_loss.push((step + 1, window.0 / window.1 as f64));
            report.validation.push((step + 1, err));
            window = (0.0, 0);
            progress(step + 1, err);
            if err < best {
                best = err;
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
    }
    if let Some((_, avg)) = ema {
        *model.net.params_mut() = avg;
    }
    Ok((model, report))
}

fn with_net_params(model: &TeacherModel, params: &Params<f32>) -> TeacherModel {
    let mut m = model.clone();
    *m.net.params_mut() = params.clone();
    m
}

/// Closed-form denoiser exposed through the [`Denoiser`] interface; conditions are ignored.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub data: FiniteDataset,
    pub schedule: NoiseSchedule,
}

impl Denoiser<f64> for OracleDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn denoise(&self, a: ArrayView2<f64>, rungs: &[usize], _cond: &Conditions<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(a.dim());
        for (i, (row, &n)) in a.axis_iter(Axis(0)).zip(rungs).enumerate() {
            let x = row.to_vec();
            let d = closed_form_denoiser(&x, self.schedule.sigma(n)?, &self.data)?;
            out.row_mut(i).assign(&Array1::from(d));
        }
        Ok(out)
    }
}
