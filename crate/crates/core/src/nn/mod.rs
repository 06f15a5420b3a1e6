//! Small dense networks with hand-written backpropagation.
//!
//! Parameters live in one flat buffer described by a [`Layout`], which keeps
//! the optimizer, EMA averaging, finite-difference checks and serialization
//! oblivious to the architecture.

mod adam;
mod cond_mlp;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use cond_mlp::{CondCache, CondEmbedding, CondGrads, CondInputs, CondMlp, CondMlpConfig};
pub use mlp::{Mlp, MlpCache, MlpConfig};

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Floating point type a network can be evaluated in.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered manifest of named tensors inside a flat parameter buffer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    len: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let spec = TensorSpec { name: name.into(), shape: shape.to_vec(), offset: self.len };
        self.len += spec.len();
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    layout: Arc<Layout>,
    data: Vec<F>,
}

impl<F: Scalar> Params<F> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![F::zero(); layout.len()];
        Self { layout, data }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<F>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::config(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn range(&self, idx: usize) -> (std::ops::Range<usize>, &[usize]) {
        let spec = &self.layout.specs[idx];
        (spec.offset..spec.offset + spec.len(), &spec.shape)
    }

    pub fn mat(&self, idx: usize) -> ArrayView2<'_, F> {
        let (r, shape) = self.range(idx);
        ArrayView2::from_shape((shape[0], shape[1]), &self.data[r]).expect("2-d tensor")
    }

    pub fn mat_mut(&mut self, idx: usize) -> ArrayViewMut2<'_, F> {
        let spec = &self.layout.specs[idx];
        let (r, shape) = (spec.offset..spec.offset + spec.len(), (spec.shape[0], spec.shape[1]));
        ArrayViewMut2::from_shape(shape, &mut self.data[r]).expect("2-d tensor")
    }

    pub fn vec(&self, idx: usize) -> ArrayView1<'_, F> {
        let (r, _) = self.range(idx);
        ArrayView1::from(&self.data[r])
    }

    pub fn vec_mut(&mut self, idx: usize) -> ArrayViewMut1<'_, F> {
        let spec = &self.layout.specs[idx];
        let r = spec.offset..spec.offset + spec.len();
        ArrayViewMut1::from(&mut self.data[r])
    }

    /// `self += other * scale`
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b * scale;
        }
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Exponential moving average: `self = decay * self + (1 - decay) * other`.
    pub fn ema_toward(&mut self, other: &Self, decay: F) {
        let keep = F::one() - decay;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = decay * *a + keep * *b;
        }
    }

    pub fn norm(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, v| acc + *v * *v).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| G::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    /// Uniform fan-in initialization for matrices; vectors are zeroed.
    pub(crate) fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let specs = self.layout.specs.clone();
        for spec in specs.iter().filter(|s| s.shape.len() == 2) {
            let fan_in = spec.shape[1].max(1) as f64;
            let bound = 1.0 / fan_in.sqrt();
            for v in &mut self.data[spec.offset..spec.offset + spec.len()] {
                *v = F::of(rng.random_range(-bound..bound));
            }
        }
    }
}

pub(crate) fn silu<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

pub(crate) fn silu_grad<F: Scalar>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s + x * s * (F::one() - s)
}

/// Per-sample log-σ features: `[sin(w_k c), cos(w_k c)]` with `c = ln(σ) / 4`.
pub fn noise_features<F: Scalar>(log_sigma: &[f64], freqs: usize) -> ndarray::Array2<F> {
    let mut out = ndarray::Array2::zeros((log_sigma.len(), 2 * freqs));
    for (row, &ls) in out.rows_mut().into_iter().zip(log_sigma) {
        let c = ls / 4.0;
        let mut row = row;
        for k in 0..freqs {
            let w = (k as f64 * 0.5).exp2();
            row[2 * k] = F::of((w * c).sin());
            row[2 * k + 1] = F::of((w * c).cos());
        }
    }
    out
}
