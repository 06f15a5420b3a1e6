//! DDPM partial-diffusion baseline copilot.
//!
//! The pilot action is diffused forward `k = round(α·K)` steps in closed
//! form and then denoised with `k` ancestral reverse steps.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, CondInputs, CondMlp, CondMlpConfig};
use crate::persistence::{load_params, push_params, Checkpoint, ModelKind};
use crate::student::Assisted;
use crate::teacher::{check_dataset, cosine_lr, train_val_split, TrainReport};

/// Linear β schedule over `steps` diffusion steps, indexed `1..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl BetaSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::config(format!(
                "invalid beta schedule: {steps} steps, beta in [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_min + f * (beta_max - beta_min)
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(Self { beta_min, beta_max, betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_k for `k` in `1..=steps`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// ᾱ_k for `k` in `1..=steps`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    /// Noise-to-signal ratio at step `k`, fed to the network as its noise level.
    pub fn equivalent_sigma(&self, k: usize) -> f64 {
        let ab = self.alpha_bar(k);
        ((1.0 - ab) / ab).sqrt()
    }

    pub fn steps_for_alpha(&self, alpha: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::domain(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok((alpha * self.steps() as f64).round() as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdpmConfig {
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub hidden: usize,
    pub layers: usize,
    pub noise_freqs: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub eval_every: usize,
    pub held_out_frac: f64,
    pub seed: u64,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.1,
            hidden: 128,
            layers: 3,
            noise_freqs: 8,
            batch_size: 256,
            steps: 10_000,
            lr: 1e-3,
            lr_floor: 0.05,
            eval_every: 1000,
            held_out_frac: 0.1,
            seed: 0,
        }
    }
}

/// Noise-prediction network `ε(x_k, k, s)` plus its β schedule.
#[derive(Debug)]
pub struct DdpmModel {
    pub net: CondMlp<f32>,
    schedule: BetaSchedule,
    evaluations: AtomicU64,
}

impl Clone for DdpmModel {
    fn clone(&self) -> Self {
        Self { net: self.net.clone(), schedule: self.schedule.clone(), evaluations: AtomicU64::new(self.evaluations()) }
    }
}

impl DdpmModel {
    pub fn new<R: Rng + ?Sized>(cfg: &DdpmConfig, state_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        let schedule = BetaSchedule::linear(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)?;
        let net_cfg = CondMlpConfig {
            direction_dim: 0,
            noise_freqs: cfg.noise_freqs,
            ..CondMlpConfig::denoiser(action_dim, state_dim).with_hidden(cfg.hidden, cfg.layers)
        };
        Ok(Self { net: CondMlp::new(net_cfg, rng), schedule, evaluations: AtomicU64::new(0) })
    }

    pub fn schedule(&self) -> &BetaSchedule {
        &self.schedule
    }

    pub fn state_dim(&self) -> usize {
        self.net.config().cond_dim
    }

    pub fn action_dim(&self) -> usize {
        self.net.config().input_dim
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Predicted noise for each row at diffusion step `steps[i]`.
    pub fn predict_noise(&self, x: ArrayView2<f32>, steps: &[usize], state: ArrayView2<f32>) -> Result<Array2<f32>> {
        let log_sigma: Vec<f64> = steps.iter().map(|&k| self.schedule.equivalent_sigma(k).ln()).collect();
        let out = self.net.forward(x, &CondInputs { log_sigma: &log_sigma, cond1: state, cond2: None })?;
        self.evaluations.fetch_add(x.nrows() as u64, Ordering::Relaxed);
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ModelKind::Ddpm, None);
        let c = self.net.config();
        for (k, v) in [
            ("state_dim", c.cond_dim),
            ("action_dim", c.input_dim),
            ("hidden", c.hidden),
            ("layers", c.layers),
            ("noise_freqs", c.noise_freqs),
            ("diffusion_steps", self.schedule.steps()),
        ] {
            ck.set_meta(k, v as f64);
        }
        ck.set_meta("beta_min", self.schedule.beta_min);
        ck.set_meta("beta_max", self.schedule.beta_max);
        push_params(&mut ck, "eps.", self.net.params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Ddpm {
            return Err(Error::format(format!("expected a ddpm checkpoint, got {}", ck.kind.name())));
        }
        let action_dim = ck.meta_usize("action_dim")?;
        let cfg = CondMlpConfig {
            input_dim: action_dim,
            cond_dim: ck.meta_usize("state_dim")?,
            direction_dim: 0,
            hidden: ck.meta_usize("hidden")?,
            layers: ck.meta_usize("layers")?,
            output_dim: action_dim,
            noise_freqs: ck.meta_usize("noise_freqs")?,
        };
        let params = load_params(ck, "eps.", Arc::new(CondMlp::<f32>::layout_for(&cfg)))?;
        let schedule =
            BetaSchedule::linear(ck.meta_usize("diffusion_steps")?, ck.meta("beta_min")?, ck.meta("beta_max")?)?;
        Ok(Self { net: CondMlp::from_params(cfg, params)?, schedule, evaluations: AtomicU64::new(0) })
    }
}

/// Standard noise-prediction training with uniformly drawn diffusion steps.
pub fn ddpm_train(ds: &TransitionDataset, cfg: &DdpmConfig) -> Result<(DdpmModel, TrainReport)> {
    check_dataset(ds)?;
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::config("batch_size and eval_every must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val) = train_val_split(ds, cfg.held_out_frac, &mut rng);
    let mut model = DdpmModel::new(cfg, ds.state_dim(), ds.action_dim(), &mut rng)?;
    let k_max = model.schedule.steps();
    let mut probe_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdd9a);
    let probe = val.gather(&val.sample_indices(val.len().min(1024), &mut probe_rng));
    let probe_draw = draw(probe.len(), probe.actions.ncols(), k_max, &mut probe_rng);
    let mut opt = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, model.net.params());
    let mut report = TrainReport::default();
    let mut window = (0.0, 0usize);
    for step in 0..cfg.steps {
        let batch = train.gather(&train.sample_indices(cfg.batch_size, &mut rng));
        let (ks, eps) = draw(batch.len(), batch.actions.ncols(), k_max, &mut rng);
        let x = noised(&model.schedule, batch.actions.view(), &ks, &eps);
        let log_sigma: Vec<f64> = ks.iter().map(|&k| model.schedule.equivalent_sigma(k).ln()).collect();
        let (pred, cache) = model
            .net
            .forward_cached(x.view(), &CondInputs { log_sigma: &log_sigma, cond1: batch.states.view(), cond2: None })?;
        let r = &pred - &eps;
        let count = r.len() as f64;
        let loss = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / count;
        let up = r.mapv(|v| (2.0 * v as f64 / count) as f32);
        let grads = model.net.backward(&cache, up.view()).params;
        opt.update_with_lr(model.net.params_mut(), &grads, cosine_lr(cfg.lr, cfg.lr_floor, step, cfg.steps))?;
        window.0 += loss;
        window.1 += 1;
        report.steps_run = step + 1;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let x = noised(&model.schedule, probe.actions.view(), &probe_draw.0, &probe_draw.1);
            let pred = model.predict_noise(x.view(), &probe_draw.0, probe.states.view())?;
            let r = &pred - &probe_draw.1;
            let val_loss = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / r.len() as f64;
            report.train_loss.push((step + 1, window.0 / window.1 as f64));
            report.validation.push((step + 1, val_loss));
            window = (0.0, 0);
        }
    }
    model.evaluations.store(0, Ordering::Relaxed);
    Ok((model, report))
}

fn draw<R: Rng + ?Sized>(n: usize, dim: usize, k_max: usize, rng: &mut R) -> (Vec<usize>, Array2<f32>) {
    let ks = (0..n).map(|_| rng.random_range(1..=k_max)).collect();
    let eps = Array2::from_shape_fn((n, dim), |_| rng.sample(StandardNormal));
    (ks, eps)
}

/// `√ᾱ_k · a + √(1 − ᾱ_k) · ε`, row-wise.
fn noised(sched: &BetaSchedule, a: ArrayView2<f32>, ks: &[usize], eps: &Array2<f32>) -> Array2<f32> {
    let mut x = a.to_owned();
    for (i, &k) in ks.iter().enumerate() {
        let ab = sched.alpha_bar(k);
        let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        for j in 0..x.ncols() {
            x[[i, j]] = sa * a[[i, j]] + sn * eps[[i, j]];
        }
    }
    x
}

/// Partial forward diffusion of the pilot action followed by `k` ancestral
/// reverse steps, one network evaluation each.
pub fn ddpm_assist<R: Rng + ?Sized>(
    model: &DdpmModel,
    state: &[f32],
    action: &[f32],
    alpha: f64,
    rng: &mut R,
) -> Result<Assisted> {
    let start = Instant::now();
    let k = model.schedule.steps_for_alpha(alpha)?;
    if state.len() != model.state_dim() || action.len() != model.action_dim() {
        return Err(Error::config("assist request dims do not match the ddpm model"));
    }
    if k == 0 {
        return Ok(Assisted {
            action: action.to_vec(),
            nfe: 0,
            latency_us: start.elapsed().as_secs_f64() * 1e6,
            rung: 0,
        });
    }
    let s = ArrayView2::from_shape((1, state.len()), state).expect("one row");
    let ab = model.schedule.alpha_bar(k);
    let mut x: Vec<f32> = action
        .iter()
        .map(|&a| (ab.sqrt() * a as f64 + (1.0 - ab).sqrt() * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    // Counted locally: the model-wide counter is shared with concurrent callers.
    let mut nfe = 0;
    for j in (1..=k).rev() {
        let xv = ArrayView2::from_shape((1, x.len()), &x).expect("one row");
        let eps = model.predict_noise(xv, &[j], s)?;
        nfe += xv.nrows();
        let (beta, ab) = (model.schedule.beta(j), model.schedule.alpha_bar(j));
        let coef = beta / (1.0 - ab).sqrt();
        let scale = 1.0 / (1.0 - beta).sqrt();
        for (i, v) in x.iter_mut().enumerate() {
            let mean = scale * (*v as f64 - coef * eps[[0, i]] as f64);
            let noise = if j > 1 { beta.sqrt() * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            *v = (mean + noise) as f32;
        }
    }
    Ok(Assisted { action: x, nfe, latency_us: start.elapsed().as_secs_f64() * 1e6, rung: k })
}
