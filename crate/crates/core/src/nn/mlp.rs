use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{silu, silu_grad, Layout, Params, Scalar};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Plain feed-forward network, optionally with layer normalization before
/// each activation and a linear input-to-output skip path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub output_dim: usize,
    pub layer_norm: bool,
    pub linear_skip: bool,
}

#[derive(Clone, Debug)]
pub struct MlpCache<F> {
    inputs: Vec<Array2<F>>,
    xhat: Vec<Array2<F>>,
    inv_std: Vec<Array1<F>>,
    pre: Vec<Array2<F>>,
    last: Array2<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    cfg: MlpConfig,
    params: Params<F>,
    hidden: Vec<Layer>,
    out_w: usize,
    out_b: usize,
    skip_w: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    w: usize,
    b: usize,
    norm: Option<(usize, usize)>,
}

impl<F: Scalar> Mlp<F> {
    pub fn layout_for(cfg: &MlpConfig) -> Layout {
        let mut l = Layout::default();
        let mut width = cfg.input_dim;
        for i in 0..cfg.layers {
            l.push(format!("l{i}.w"), &[cfg.hidden, width]);
            l.push(format!("l{i}.b"), &[cfg.hidden]);
            if cfg.layer_norm {
                l.push(format!("ln{i}.g"), &[cfg.hidden]);
                l.push(format!("ln{i}.b"), &[cfg.hidden]);
            }
            width = cfg.hidden;
        }
        l.push("out.w", &[cfg.output_dim, width]);
        l.push("out.b", &[cfg.output_dim]);
        if cfg.linear_skip {
            l.push("skip.w", &[cfg.output_dim, cfg.input_dim]);
        }
        l
    }

    pub fn from_params(cfg: MlpConfig, params: Params<F>) -> Result<Self> {
        if **params.layout() != Self::layout_for(&cfg) {
            return Err(Error::config("parameter layout does not match network config"));
        }
        let l = params.layout().clone();
        let idx = |name: &str| l.find(name).expect("layout entry");
        let hidden = (0..cfg.layers)
            .map(|i| Layer {
                w: idx(&format!("l{i}.w")),
                b: idx(&format!("l{i}.b")),
                norm: cfg.layer_norm.then(|| (idx(&format!("ln{i}.g")), idx(&format!("ln{i}.b")))),
            })
            .collect();
        Ok(Self { cfg, hidden, out_w: idx("out.w"), out_b: idx("out.b"), skip_w: l.find("skip.w"), params })
    }

    pub fn new<R: Rng + ?Sized>(cfg: MlpConfig, rng: &mut R) -> Self {
        let mut params = Params::zeros(Arc::new(Self::layout_for(&cfg)));
        params.init_uniform(rng);
        let mut net = Self::from_params(cfg, params).expect("layout built from config");
        let gains: Vec<usize> = net.hidden.iter().filter_map(|l| l.norm.map(|n| n.0)).collect();
        for g in gains {
            net.params.vec_mut(g).fill(F::one());
        }
        net
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        Mlp::from_params(self.cfg, self.params.cast()).expect("same layout")
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        self.forward_cached(x).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, x: ArrayView2<F>) -> Result<(Array2<F>, MlpCache<F>)> {
        if x.ncols() != self.cfg.input_dim {
            return Err(Error::config(format!("input has {} columns, expected {}", x.ncols(), self.cfg.input_dim)));
        }
        let p = &self.params;
        let mut cache =
            MlpCache { inputs: vec![], xhat: vec![], inv_std: vec![], pre: vec![], last: Array2::zeros((0, 0)) };
        let mut h = x.to_owned();
        for layer in &self.hidden {
            let mut z = h.dot(&p.mat(layer.w).t());
            z += &p.vec(layer.b);
            if let Some((g, b)) = layer.norm {
                let (xhat, inv) = normalize_rows(&z);
                z = &xhat * &p.vec(g) + p.vec(b);
                cache.xhat.push(xhat);
                cache.inv_std.push(inv);
            }
            let next = z.mapv(silu);
            cache.pre.push(z);
            cache.inputs.push(std::mem::replace(&mut h, next));
        }
        let mut out = h.dot(&p.mat(self.out_w).t());
        out += &p.vec(self.out_b);
        if let Some(s) = self.skip_w {
            out += &x.dot(&p.mat(s).t());
        }
        cache.last = h;
        cache.inputs.push(x.to_owned());
        Ok((out, cache))
    }

    /// Gradients of `sum(upstream * output)`: (parameters, input).
    pub fn backward(&self, cache: &MlpCache<F>, upstream: ArrayView2<F>) -> (Params<F>, Array2<F>) {
        let p = &self.params;
        let mut g = p.zeros_like();
        let x = cache.inputs.last().expect("input stored");
        g.mat_mut(self.out_w).assign(&upstream.t().dot(&cache.last));
        g.vec_mut(self.out_b).assign(&upstream.sum_axis(Axis(0)));
        let mut dx = Array2::zeros(x.dim());
        if let Some(s) = self.skip_w {
            g.mat_mut(s).assign(&upstream.t().dot(x));
            dx += &upstream.dot(&p.mat(s));
        }
        let mut dh = upstream.dot(&p.mat(self.out_w));
        for (i, layer) in self.hidden.iter().enumerate().rev() {
            let mut dz = dh;
            Zip::from(&mut dz).and(&cache.pre[i]).for_each(|d, &z| *d *= silu_grad(z));
            if let Some((gi, bi)) = layer.norm {
                let xhat = &cache.xhat[i];
                g.vec_mut(gi).assign(&(&dz * xhat).sum_axis(Axis(0)));
                g.vec_mut(bi).assign(&dz.sum_axis(Axis(0)));
                let dxhat = &dz * &p.vec(gi);
                dz = normalize_backward(&dxhat, xhat, &cache.inv_std[i]);
            }
            g.mat_mut(layer.w).assign(&dz.t().dot(&cache.inputs[i]));
            g.vec_mut(layer.b).assign(&dz.sum_axis(Axis(0)));
            dh = dz.dot(&p.mat(layer.w));
        }
        dx += &dh;
        (g, dx)
    }
}

fn normalize_rows<F: Scalar>(z: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let n = F::of(z.ncols() as f64);
    let mut xhat = z.clone();
    let mut inv = Array1::zeros(z.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / n;
        *s = F::one() / (var + F::of(LN_EPS)).sqrt();
        row.mapv_inplace(|v| v * *s);
    }
    (xhat, inv)
}

fn normalize_backward<F: Scalar>(dxhat: &Array2<F>, xhat: &Array2<F>, inv: &Array1<F>) -> Array2<F> {
    let n = F::of(dxhat.ncols() as f64);
    let mut out = dxhat.clone();
    for ((mut row, xr), &s) in out.rows_mut().into_iter().zip(xhat.rows()).zip(inv) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xr).fold(F::zero(), |a, (&d, &x)| a + d * x) / n;
        Zip::from(&mut row).and(&xr).for_each(|d, &x| *d = s * (*d - mean_d - x * mean_dx));
    }
    out
}
