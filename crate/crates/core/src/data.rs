//! Expert transition storage.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// One `(s, a, s_n)` sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: Vec<f32>,
    pub next_state: Vec<f32>,
}

/// Row-packed transitions in 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f32>,
    actions: Vec<f32>,
    next_states: Vec<f32>,
}

impl TransitionDataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self { state_dim, action_dim, states: vec![], actions: vec![], next_states: vec![] }
    }

    pub fn from_parts(
        state_dim: usize,
        action_dim: usize,
        states: Vec<f32>,
        actions: Vec<f32>,
        next_states: Vec<f32>,
    ) -> Result<Self> {
        let n = if state_dim > 0 { states.len() / state_dim } else { actions.len() / action_dim.max(1) };
        if states.len() != n * state_dim || next_states.len() != n * state_dim || actions.len() != n * action_dim {
            return Err(Error::config("transition arrays disagree on record count"));
        }
        Ok(Self { state_dim, action_dim, states, actions, next_states })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.actions.len() / self.action_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, state: &[f32], action: &[f32], next_state: &[f32]) -> Result<()> {
        if state.len() != self.state_dim || next_state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::config(format!(
                "transition dims ({}, {}, {}) do not match dataset ({}, {})",
                state.len(),
                action.len(),
                next_state.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(action);
        self.next_states.extend_from_slice(next_state);
        Ok(())
    }

    pub fn extend(&mut self, other: &TransitionDataset) -> Result<()> {
        if other.state_dim != self.state_dim || other.action_dim != self.action_dim {
            return Err(Error::config("cannot merge datasets of different dims"));
        }
        self.states.extend_from_slice(&other.states);
        self.actions.extend_from_slice(&other.actions);
        self.next_states.extend_from_slice(&other.next_states);
        Ok(())
    }

    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f32] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f32] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn get(&self, i: usize) -> Transition {
        Transition {
            state: self.state(i).to_vec(),
            action: self.action(i).to_vec(),
            next_state: self.next_state(i).to_vec(),
        }
    }

    pub fn states(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.state_dim), &self.states).expect("packed rows")
    }

    pub fn actions(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.action_dim), &self.actions).expect("packed rows")
    }

    pub fn next_states(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.len(), self.state_dim), &self.next_states).expect("packed rows")
    }

    pub fn select(&self, idx: &[usize]) -> TransitionDataset {
        let mut out = TransitionDataset::new(self.state_dim, self.action_dim);
        for &i in idx {
            out.states.extend_from_slice(self.state(i));
            out.actions.extend_from_slice(self.action(i));
            out.next_states.extend_from_slice(self.next_state(i));
        }
        out
    }

    /// Shuffled `(train, held_out)` split with `held_out_frac` of the records held out.
    pub fn split<R: Rng + ?Sized>(&self, held_out_frac: f64, rng: &mut R) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let k = ((self.len() as f64) * held_out_frac).round() as usize;
        let (held, train) = idx.split_at(k.min(self.len()));
        (self.select(train), self.select(held))
    }

    /// Unit direction of state change for record `i`, or zeros when the state did not move.
    pub fn direction(&self, i: usize) -> Vec<f32> {
        unit_direction(self.state(i), self.next_state(i))
    }

    pub fn directions(&self) -> Array2<f32> {
        let mut out = Array2::zeros((self.len(), self.state_dim));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            for (o, v) in row.iter_mut().zip(self.direction(i)) {
                *o = v;
            }
        }
        out
    }
}

/// Dense training arrays with precomputed directions.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub states: Array2<f32>,
    pub actions: Array2<f32>,
    pub directions: Array2<f32>,
}

/// A gathered minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Array2<f32>,
    pub actions: Array2<f32>,
    pub directions: Array2<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingSet {
    pub fn new(ds: &TransitionDataset) -> Self {
        Self { states: ds.states().to_owned(), actions: ds.actions().to_owned(), directions: ds.directions() }
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        Batch {
            states: self.states.select(ndarray::Axis(0), idx),
            actions: self.actions.select(ndarray::Axis(0), idx),
            directions: self.directions.select(ndarray::Axis(0), idx),
        }
    }

    pub fn all(&self) -> Batch {
        Batch { states: self.states.clone(), actions: self.actions.clone(), directions: self.directions.clone() }
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len())).collect()
    }
}

/// `(to - from) / |to - from|`, zero when the two coincide.
pub fn unit_direction(from: &[f32], to: &[f32]) -> Vec<f32> {
    let diff: Vec<f64> = from.iter().zip(to).map(|(a, b)| (*b as f64) - (*a as f64)).collect();
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm <= f64::EPSILON {
        return vec![0.0; diff.len()];
    }
    diff.iter().map(|d| (d / norm) as f32).collect()
}
