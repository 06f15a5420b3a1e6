use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{noise_features, silu, silu_grad, Layout, Params, Scalar};
use crate::error::{Error, Result};

/// Shape of a conditional denoiser network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondMlpConfig {
    /// Width of the noisy input (the action).
    pub input_dim: usize,
    /// Width of the first condition (the state).
    pub cond_dim: usize,
    /// Width of the optional direction condition; 0 disables it.
    pub direction_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub output_dim: usize,
    pub noise_freqs: usize,
}

impl CondMlpConfig {
    pub fn denoiser(action_dim: usize, state_dim: usize) -> Self {
        Self {
            input_dim: action_dim,
            cond_dim: state_dim,
            direction_dim: state_dim,
            hidden: 128,
            layers: 3,
            output_dim: action_dim,
            noise_freqs: 8,
        }
    }

    pub fn with_hidden(self, hidden: usize, layers: usize) -> Self {
        Self { hidden, layers, ..self }
    }
}

/// Per-batch conditioning: noise level plus state and optional direction.
///
/// A zero row in `cond2` is the same as omitting the direction for that
/// sample, since its projection carries no bias.
#[derive(Clone, Debug)]
pub struct CondInputs<'a, F> {
    pub log_sigma: &'a [f64],
    pub cond1: ArrayView2<'a, F>,
    pub cond2: Option<ArrayView2<'a, F>>,
}

/// Summed conditioning embedding, one hidden-width row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CondEmbedding<F> {
    pub values: Array2<F>,
    pub has_cond2: bool,
}

#[derive(Clone, Debug)]
pub struct CondCache<F> {
    x: Array2<F>,
    feats: Array2<F>,
    cond1: Array2<F>,
    cond2: Option<Array2<F>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<F>>,
    /// h_0 .. h_L; h_0 is the summed input embedding.
    post: Vec<Array2<F>>,
}

#[derive(Clone, Debug)]
pub struct CondGrads<F> {
    pub params: Params<F>,
    pub input: Array2<F>,
    pub cond1: Array2<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondMlp<F> {
    cfg: CondMlpConfig,
    params: Params<F>,
    in_w: usize,
    in_b: usize,
    t_w: usize,
    t_b: usize,
    c1_w: usize,
    c1_b: usize,
    c2_w: Option<usize>,
    hidden: Vec<(usize, usize)>,
    out_w: usize,
    out_b: usize,
}

impl<F: Scalar> CondMlp<F> {
    pub fn layout_for(cfg: &CondMlpConfig) -> Layout {
        let h = cfg.hidden;
        let mut l = Layout::default();
        l.push("in.w", &[h, cfg.input_dim]);
        l.push("in.b", &[h]);
        l.push("t.w", &[h, 2 * cfg.noise_freqs]);
        l.push("t.b", &[h]);
        l.push("c1.w", &[h, cfg.cond_dim]);
        l.push("c1.b", &[h]);
        if cfg.direction_dim > 0 {
            l.push("c2.w", &[h, cfg.direction_dim]);
        }
        for i in 0..cfg.layers {
            l.push(format!("h{i}.w"), &[h, h]);
            l.push(format!("h{i}.b"), &[h]);
        }
        l.push("out.w", &[cfg.output_dim, h]);
        l.push("out.b", &[cfg.output_dim]);
        l
    }

    pub fn from_params(cfg: CondMlpConfig, params: Params<F>) -> Result<Self> {
        if **params.layout() != Self::layout_for(&cfg) {
            return Err(Error::config("parameter layout does not match network config"));
        }
        let l = params.layout().clone();
        let idx = |name: &str| l.find(name).expect("layout entry");
        Ok(Self {
            cfg,
            in_w: idx("in.w"),
            in_b: idx("in.b"),
            t_w: idx("t.w"),
            t_b: idx("t.b"),
            c1_w: idx("c1.w"),
            c1_b: idx("c1.b"),
            c2_w: l.find("c2.w"),
            hidden: (0..cfg.layers).map(|i| (idx(&format!("h{i}.w")), idx(&format!("h{i}.b")))).collect(),
            out_w: idx("out.w"),
            out_b: idx("out.b"),
            params,
        })
    }

    pub fn zeros(cfg: CondMlpConfig) -> Self {
        let params = Params::zeros(Arc::new(Self::layout_for(&cfg)));
        Self::from_params(cfg, params).expect("layout built from config")
    }

    pub fn new<R: Rng + ?Sized>(cfg: CondMlpConfig, rng: &mut R) -> Self {
        let mut net = Self::zeros(cfg);
        net.params.init_uniform(rng);
        net
    }

    pub fn config(&self) -> &CondMlpConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> CondMlp<G> {
        CondMlp::from_params(self.cfg, self.params.cast()).expect("same layout")
    }

    fn check(&self, x: &ArrayView2<F>, cond: &CondInputs<F>) -> Result<()> {
        let b = x.nrows();
        let bad = |what: &str, got: (usize, usize), want: (usize, usize)| {
            Err(Error::config(format!("{what} has shape {got:?}, expected {want:?}")))
        };
        if x.ncols() != self.cfg.input_dim {
            return bad("input", x.dim(), (b, self.cfg.input_dim));
        }
        if cond.cond1.dim() != (b, self.cfg.cond_dim) {
            return bad("cond1", cond.cond1.dim(), (b, self.cfg.cond_dim));
        }
        if cond.log_sigma.len() != b {
            return Err(Error::config(format!("{} noise levels for a batch of {b}", cond.log_sigma.len())));
        }
        if let Some(c2) = &cond.cond2 {
            if self.cfg.direction_dim == 0 {
                return Err(Error::config("network has no direction input"));
            }
            if c2.dim() != (b, self.cfg.direction_dim) {
                return bad("cond2", c2.dim(), (b, self.cfg.direction_dim));
            }
        }
        Ok(())
    }

    pub fn time_embedding(&self, log_sigma: &[f64]) -> Array2<F> {
        let feats = noise_features::<F>(log_sigma, self.cfg.noise_freqs);
        feats.dot(&self.params.mat(self.t_w).t()) + self.params.vec(self.t_b)
    }

    pub fn cond1_embedding(&self, cond1: ArrayView2<F>) -> Array2<F> {
        cond1.dot(&self.params.mat(self.c1_w).t()) + self.params.vec(self.c1_b)
    }

    pub fn cond2_embedding(&self, cond2: ArrayView2<F>) -> Result<Array2<F>> {
        let w = self.c2_w.ok_or_else(|| Error::config("network has no direction input"))?;
        Ok(cond2.dot(&self.params.mat(w).t()))
    }

    fn embed_with_features(&self, feats: &Array2<F>, cond: &CondInputs<F>) -> Array2<F> {
        let mut e = feats.dot(&self.params.mat(self.t_w).t());
        e += &self.params.vec(self.t_b);
        e += &cond.cond1.dot(&self.params.mat(self.c1_w).t());
        e += &self.params.vec(self.c1_b);
        if let (Some(c2), Some(w)) = (&cond.cond2, self.c2_w) {
            e += &c2.dot(&self.params.mat(w).t());
        }
        e
    }

    /// Sum of the noise-level, state and (if given) direction embeddings.
    pub fn embed_conditions(&self, cond: &CondInputs<F>) -> Result<CondEmbedding<F>> {
        let b = cond.log_sigma.len();
        if cond.cond1.dim() != (b, self.cfg.cond_dim) {
            return Err(Error::config(format!(
                "cond1 has shape {:?}, expected {:?}",
                cond.cond1.dim(),
                (b, self.cfg.cond_dim)
            )));
        }
        if let Some(c2) = &cond.cond2 {
            if self.c2_w.is_none() || c2.dim() != (b, self.cfg.direction_dim) {
                return Err(Error::config("cond2 does not match the network's direction input"));
            }
        }
        let feats = noise_features::<F>(cond.log_sigma, self.cfg.noise_freqs);
        Ok(CondEmbedding { values: self.embed_with_features(&feats, cond), has_cond2: cond.cond2.is_some() })
    }

    pub fn forward(&self, x: ArrayView2<F>, cond: &CondInputs<F>) -> Result<Array2<F>> {
        self.check(&x, cond)?;
        let feats = noise_features::<F>(cond.log_sigma, self.cfg.noise_freqs);
        let e = self.embed_with_features(&feats, cond);
        let mut h = x.dot(&self.params.mat(self.in_w).t());
        h += &self.params.vec(self.in_b);
        h += &e;
        for &(w, b) in &self.hidden {
            let mut z = h.dot(&self.params.mat(w).t());
            z += &self.params.vec(b);
            z += &e;
            z.mapv_inplace(silu);
            h = z;
        }
        let mut out = h.dot(&self.params.mat(self.out_w).t());
        out += &self.params.vec(self.out_b);
        Ok(out)
    }

    pub fn forward_cached(&self, x: ArrayView2<F>, cond: &CondInputs<F>) -> Result<(Array2<F>, CondCache<F>)> {
        self.check(&x, cond)?;
        let feats = noise_features::<F>(cond.log_sigma, self.cfg.noise_freqs);
        let e = self.embed_with_features(&feats, cond);
        let mut h = x.dot(&self.params.mat(self.in_w).t());
        h += &self.params.vec(self.in_b);
        h += &e;
        let mut pre = Vec::with_capacity(self.cfg.layers);
        let mut post = Vec::with_capacity(self.cfg.layers + 1);
        for &(w, b) in &self.hidden {
            let mut z = h.dot(&self.params.mat(w).t());
            z += &self.params.vec(b);
            z += &e;
            let next = z.mapv(silu);
            pre.push(z);
            post.push(std::mem::replace(&mut h, next));
        }
        let mut out = h.dot(&self.params.mat(self.out_w).t());
        out += &self.params.vec(self.out_b);
        post.push(h);
        let cache = CondCache {
            x: x.to_owned(),
            feats,
            cond1: cond.cond1.to_owned(),
            cond2: cond.cond2.map(|c| c.to_owned()),
            pre,
            post,
        };
        Ok((out, cache))
    }

    /// Gradients of `sum(upstream * output)` with respect to parameters and inputs.
    pub fn backward(&self, cache: &CondCache<F>, upstream: ArrayView2<F>) -> CondGrads<F> {
        let mut g = self.params.zeros_like();
        let p = &self.params;
        let h_last = cache.post.last().expect("at least h_0");
        g.mat_mut(self.out_w).assign(&upstream.t().dot(h_last));
        g.vec_mut(self.out_b).assign(&upstream.sum_axis(Axis(0)));
        let mut dh = upstream.dot(&p.mat(self.out_w));
        let mut de = Array2::<F>::zeros(dh.dim());
        for (l, &(w, b)) in self.hidden.iter().enumerate().rev() {
            let mut dz = dh;
            ndarray::Zip::from(&mut dz).and(&cache.pre[l]).for_each(|d, &z| *d *= silu_grad(z));
            g.mat_mut(w).assign(&dz.t().dot(&cache.post[l]));
            g.vec_mut(b).assign(&dz.sum_axis(Axis(0)));
            de += &dz;
            dh = dz.dot(&p.mat(w));
        }
        // h_0 = in(x) + e
        g.mat_mut(self.in_w).assign(&dh.t().dot(&cache.x));
        g.vec_mut(self.in_b).assign(&dh.sum_axis(Axis(0)));
        let input = dh.dot(&p.mat(self.in_w));
        de += &dh;
        g.mat_mut(self.t_w).assign(&de.t().dot(&cache.feats));
        g.vec_mut(self.t_b).assign(&de.sum_axis(Axis(0)));
        g.mat_mut(self.c1_w).assign(&de.t().dot(&cache.cond1));
        g.vec_mut(self.c1_b).assign(&de.sum_axis(Axis(0)));
        let cond1 = de.dot(&p.mat(self.c1_w));
        if let (Some(c2), Some(w)) = (&cache.cond2, self.c2_w) {
            g.mat_mut(w).assign(&de.t().dot(c2));
        }
        CondGrads { params: g, input, cond1 }
    }
}
