//! Forward dynamics model `Φ(s, a) ↦ ŝ_n`.

use std::sync::Arc;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{unit_direction, TrainingSet, TransitionDataset};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Mlp, MlpConfig};
use crate::persistence::{load_params, push_params, Checkpoint, ModelKind, NamedArray};
use crate::teacher::{cosine_lr, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    pub hidden: usize,
    pub layers: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub eval_every: usize,
    pub held_out_frac: f64,
    pub seed: u64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 3,
            batch_size: 256,
            steps: 5000,
            lr: 1e-3,
            lr_floor: 0.01,
            eval_every: 500,
            held_out_frac: 0.1,
            seed: 0,
        }
    }
}

/// Layer-normalized MLP with a linear skip, predicting the standardized
/// state change from standardized `(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardModel {
    pub net: Mlp<f32>,
    state_dim: usize,
    action_dim: usize,
    in_mean: Array1<f32>,
    in_std: Array1<f32>,
    out_mean: Array1<f32>,
    out_std: Array1<f32>,
}

fn net_config(state_dim: usize, action_dim: usize, hidden: usize, layers: usize) -> MlpConfig {
    MlpConfig {
        input_dim: state_dim + action_dim,
        hidden,
        layers,
        output_dim: state_dim,
        layer_norm: true,
        linear_skip: true,
    }
}

fn column_stats(x: ArrayView2<f32>) -> (Array1<f32>, Array1<f32>) {
    let n = x.nrows().max(1) as f64;
    let mut mean = Array1::zeros(x.ncols());
    let mut std = Array1::zeros(x.ncols());
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        let m = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = col.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        mean[j] = m as f32;
        std[j] = var.sqrt().max(1e-6) as f32;
    }
    (mean, std)
}

impl ForwardModel {
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn inputs(&self, s: ArrayView2<f32>, a: ArrayView2<f32>) -> Result<Array2<f32>> {
        if s.ncols() != self.state_dim || a.ncols() != self.action_dim || s.nrows() != a.nrows() {
            return Err(Error::config(format!(
                "forward model expects ({}, {}) columns, got ({}, {})",
                self.state_dim,
                self.action_dim,
                s.ncols(),
                a.ncols()
            )));
        }
        let x = concatenate(Axis(1), &[s, a]).expect("row counts checked");
        Ok((x - &self.in_mean) / &self.in_std)
    }

    /// Predicted next states.
    pub fn predict(&self, s: ArrayView2<f32>, a: ArrayView2<f32>) -> Result<Array2<f32>> {
        let out = self.net.forward(self.inputs(s, a)?.view())?;
        Ok(&s + &(out * &self.out_std + &self.out_mean))
    }

    /// Unit direction from `s` toward the predicted next state, zero when degenerate.
    pub fn direction(&self, s: &[f32], a: &[f32]) -> Result<Vec<f32>> {
        let sv = ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::config(e.to_string()))?;
        let av = ArrayView2::from_shape((1, a.len()), a).map_err(|e| Error::config(e.to_string()))?;
        let next = self.predict(sv, av)?;
        Ok(unit_direction(s, next.row(0).as_slice().expect("contiguous row")))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ModelKind::Forward, None);
        let c = self.net.config();
        ck.set_meta("state_dim", self.state_dim as f64);
        ck.set_meta("action_dim", self.action_dim as f64);
        ck.set_meta("hidden", c.hidden as f64);
        ck.set_meta("layers", c.layers as f64);
        for (name, v) in [
            ("norm.in_mean", &self.in_mean),
            ("norm.in_std", &self.in_std),
            ("norm.out_mean", &self.out_mean),
            ("norm.out_std", &self.out_std),
        ] {
            ck.arrays.push(NamedArray { name: name.into(), shape: vec![v.len()], data: v.to_vec() });
        }
        push_params(&mut ck, "phi.", self.net.params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Forward {
            return Err(Error::format(format!("expected a forward checkpoint, got {}", ck.kind.name())));
        }
        let state_dim = ck.meta_usize("state_dim")?;
        let action_dim = ck.meta_usize("action_dim")?;
        let cfg = net_config(state_dim, action_dim, ck.meta_usize("hidden")?, ck.meta_usize("layers")?);
        let params = load_params(ck, "phi.", Arc::new(Mlp::<f32>::layout_for(&cfg)))?;
        let vec = |name: &str, len: usize| -> Result<Array1<f32>> {
            let a = ck.array(name)?;
            if a.data.len() != len {
                return Err(Error::format(format!("{name} has {} values, expected {len}", a.data.len())));
            }
            Ok(Array1::from(a.data.clone()))
        };
        Ok(Self {
            net: Mlp::from_params(cfg, params)?,
            state_dim,
            action_dim,
            in_mean: vec("norm.in_mean", state_dim + action_dim)?,
            in_std: vec("norm.in_std", state_dim + action_dim)?,
            out_mean: vec("norm.out_mean", state_dim)?,
            out_std: vec("norm.out_std", state_dim)?,
        })
    }
}

/// Supervised `(s, a) → s_n` regression on the standardized state change.
pub fn forward_train(ds: &TransitionDataset, cfg: &ForwardConfig) -> Result<(ForwardModel, TrainReport)> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if ds.state_dim() == 0 {
        return Err(Error::config("forward model needs a state"));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::config("batch_size and eval_every must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val) = if cfg.held_out_frac > 0.0 && ds.len() >= 20 {
        ds.split(cfg.held_out_frac, &mut rng)
    } else {
        (ds.clone(), ds.clone())
    };
    let (sd, ad) = (ds.state_dim(), ds.action_dim());
    let x = concatenate(Axis(1), &[train.states(), train.actions()]).expect("same rows");
    let delta = &train.next_states() - &train.states();
    let (in_mean, in_std) = column_stats(x.view());
    let (out_mean, out_std) = column_stats(delta.view());
    let mut model = ForwardModel {
        net: Mlp::new(net_config(sd, ad, cfg.hidden, cfg.layers), &mut rng),
        state_dim: sd,
        action_dim: ad,
        in_mean,
        in_std,
        out_mean,
        out_std,
    };
    let xn = (&x - &model.in_mean) / &model.in_std;
    let yn = (&delta - &model.out_mean) / &model.out_std;
    let set = TrainingSet::new(&train);
    let mut opt = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, model.net.params());
    let mut report = TrainReport::default();
    let mut window = (0.0, 0usize);
    for step in 0..cfg.steps {
        let idx = set.sample_indices(cfg.batch_size, &mut rng);
        let xb = xn.select(Axis(0), &idx);
        let yb = yn.select(Axis(0), &idx);
        let (pred, cache) = model.net.forward_cached(xb.view())?;
        let r = &pred - &yb;
        let scale = 2.0 / r.len() as f32;
        let loss = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / r.len() as f64;
        let (grads, _) = model.net.backward(&cache, (&r * scale).view());
        opt.update_with_lr(model.net.params_mut(), &grads, cosine_lr(cfg.lr, cfg.lr_floor, step, cfg.steps))?;
        window.0 += loss;
        window.1 += 1;
        report.steps_run = step + 1;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            report.train_loss.push((step + 1, window.0 / window.1 as f64));
            report.validation.push((step + 1, forward_mse(&model, &val)?));
            window = (0.0, 0);
        }
    }
    Ok((model, report))
}

/// Mean squared next-state error per state dimension.
pub fn forward_mse(model: &ForwardModel, ds: &TransitionDataset) -> Result<f64> {
    let pred = model.predict(ds.states(), ds.actions())?;
    let r = &pred - &ds.next_states();
    Ok(r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / r.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_next_state_is_learned() {
        let mut ds = TransitionDataset::new(2, 1);
        for i in 0..64 {
            let s = [i as f32 / 32.0 - 1.0, 0.5];
            ds.push(&s, &[(i % 7) as f32 / 7.0], &[0.25, -0.75]).unwrap();
        }
        let cfg = ForwardConfig {
            hidden: 16,
            layers: 1,
            steps: 5000,
            batch_size: 64,
            held_out_frac: 0.0,
            ..Default::default()
        };
        let (m, _) = forward_train(&ds, &cfg).unwrap();
        let p = m.predict(ds.states(), ds.actions()).unwrap();
        for row in p.rows() {
            assert!((row[0] - 0.25).abs() < 2e-2 && (row[1] + 0.75).abs() < 2e-2, "{row}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut ds = TransitionDataset::new(2, 2);
        ds.push(&[0.0, 1.0], &[0.5, 0.5], &[0.1, 1.1]).unwrap();
        ds.push(&[1.0, 0.0], &[-0.5, 0.5], &[0.9, 0.2]).unwrap();
        let cfg = ForwardConfig { hidden: 8, layers: 2, steps: 3, ..Default::default() };
        let (m, _) = forward_train(&ds, &cfg).unwrap();
        assert_eq!(ForwardModel::from_checkpoint(&m.to_checkpoint()).unwrap(), m);
    }
}
