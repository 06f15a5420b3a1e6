//! Exact denoiser, score and probability-flow ODE for a finite point set.
//!
//! When the data distribution is a uniform mixture of Diracs the optimal
//! denoiser has a closed form: a softmax-weighted mean of the points. Every
//! learned model in the crate is checked against these functions.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDataset {
    dim: usize,
    points: Vec<f64>,
}

impl FiniteDataset {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if points.is_empty() {
            return Err(Error::domain("dataset must contain at least one point"));
        }
        if dim == 0 {
            return Err(Error::domain("points must have at least one dimension"));
        }
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::domain("all points must share one dimension"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("points must be finite"));
        }
        Ok(Self { dim, points: points.into_iter().flatten().collect() })
    }

    /// The 1-D fixture `{-1, +1}`.
    pub fn two_point() -> Self {
        Self::new(vec![vec![-1.0], vec![1.0]]).expect("valid fixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn nearest(&self, x: &[f64]) -> &[f64] {
        self.points().min_by(|a, b| sq_dist(x, a).total_cmp(&sq_dist(x, b))).expect("non-empty")
    }

    fn check(&self, x: &[f64], sigma: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::domain(format!("query has dimension {}, dataset has {}", x.len(), self.dim)));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
        }
        Ok(())
    }

    /// Log-weights `-|x - y_i|^2 / 2σ²` and their log-sum-exp.
    fn log_weights(&self, x: &[f64], sigma: f64) -> (Vec<f64>, f64) {
        let inv = 1.0 / (2.0 * sigma * sigma);
        let logits: Vec<f64> = self.points().map(|y| -sq_dist(x, y) * inv).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        (logits, lse)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Posterior mean of the clean point given `x` at noise level `sigma`.
pub fn closed_form_denoiser(x: &[f64], sigma: f64, ds: &FiniteDataset) -> Result<Vec<f64>> {
    ds.check(x, sigma)?;
    let (logits, lse) = ds.log_weights(x, sigma);
    let mut out = vec![0.0; ds.dim];
    for (l, y) in logits.iter().zip(ds.points()) {
        let w = (l - lse).exp();
        for (o, v) in out.iter_mut().zip(y) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// ∇ log p(x; σ) via the denoiser relation `(D - x) / σ²`.
pub fn oracle_score(x: &[f64], sigma: f64, ds: &FiniteDataset) -> Result<Vec<f64>> {
    let d = closed_form_denoiser(x, sigma, ds)?;
    let s2 = sigma * sigma;
    Ok(d.iter().zip(x).map(|(d, x)| (d - x) / s2).collect())
}

/// log p(x; σ) of the Gaussian-smoothed mixture.
pub fn log_density(x: &[f64], sigma: f64, ds: &FiniteDataset) -> Result<f64> {
    ds.check(x, sigma)?;
    let (_, lse) = ds.log_weights(x, sigma);
    let d = ds.dim as f64;
    Ok(lse - (ds.len() as f64).ln() - 0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln())
}

/// Integrates the probability-flow ODE from rung `t_start` down to the floor
/// with Heun's method on the schedule's own rungs.
pub fn oracle_pf_ode_solve(
    x_start: &[f64],
    t_start: usize,
    schedule: &NoiseSchedule,
    ds: &FiniteDataset,
) -> Result<Vec<f64>> {
    let sigmas = schedule.sigmas();
    if t_start >= sigmas.len() {
        return Err(Error::Index { index: t_start, len: sigmas.len() });
    }
    let mut x = x_start.to_vec();
    for w in sigmas[t_start..].windows(2) {
        x = oracle_heun(&x, w[0], w[1], ds)?;
    }
    Ok(x)
}

/// One Heun step of the oracle flow from `sigma` to `sigma_next`.
pub fn oracle_heun(x: &[f64], sigma: f64, sigma_next: f64, ds: &FiniteDataset) -> Result<Vec<f64>> {
    let h = sigma_next - sigma;
    let d0 = closed_form_denoiser(x, sigma, ds)?;
    let slope0: Vec<f64> = x.iter().zip(&d0).map(|(x, d)| (x - d) / sigma).collect();
    let euler: Vec<f64> = x.iter().zip(&slope0).map(|(x, s)| x + h * s).collect();
    let d1 = closed_form_denoiser(&euler, sigma_next, ds)?;
    Ok(x.iter()
        .zip(&slope0)
        .zip(euler.iter().zip(&d1))
        .map(|((x, s0), (e, d))| {
            let s1 = (e - d) / sigma_next;
            x + 0.5 * h * (s0 + s1)
        })
        .collect())
}

/// Denoiser field sampled on a grid: rows of `(sigma, x..., D(x; sigma)...)`.
pub fn denoiser_field(grid: &[Vec<f64>], sigmas: &[f64], ds: &FiniteDataset) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(grid.len() * sigmas.len());
    for &s in sigmas {
        for x in grid {
            let d = closed_form_denoiser(x, s, ds)?;
            let mut row = vec![s];
            row.extend_from_slice(x);
            row.extend(d);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleParams;

    #[test]
    fn symmetric_point_denoises_to_zero() {
        let ds = FiniteDataset::two_point();
        for s in [0.002, 0.1, 1.0, 80.0] {
            assert_eq!(closed_form_denoiser(&[0.0], s, &ds).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn two_point_value_at_half() {
        // (e^-0.5 - e^-4.5) / (e^-0.5 + e^-4.5) = tanh(2), 50-digit mpmath: 0.96402758007581688395
        let ds = FiniteDataset::two_point();
        let d = closed_form_denoiser(&[0.5], 0.5, &ds).unwrap()[0];
        assert!((d - 0.964_027_580_075_816_9).abs() < 1e-15, "{d}");
    }

    #[test]
    fn small_sigma_selects_nearest_point() {
        let ds = FiniteDataset::new(vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![-3.0, 0.5]]).unwrap();
        for x in [[0.4, 0.2], [1.9, -0.3], [-2.0, 2.0]] {
            let d = closed_form_denoiser(&x, 0.002, &ds).unwrap();
            assert_eq!(d.as_slice(), ds.nearest(&x));
        }
    }

    #[test]
    fn stays_finite_at_extreme_noise_levels() {
        let ds = FiniteDataset::new(vec![vec![50.0], vec![-50.0], vec![0.3]]).unwrap();
        for s in [0.002, 80.0] {
            let d = closed_form_denoiser(&[17.0], s, &ds).unwrap();
            assert!(d[0].is_finite());
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(FiniteDataset::new(vec![]), Err(Error::Domain(_))));
    }

    #[test]
    fn score_vanishes_at_single_mode() {
        let ds = FiniteDataset::new(vec![vec![0.7, -0.2]]).unwrap();
        let s = oracle_score(&[0.7, -0.2], 0.3, &ds).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15));
        let two = FiniteDataset::two_point();
        assert_eq!(oracle_score(&[0.0], 0.7, &two).unwrap(), vec![0.0]);
    }

    #[test]
    fn flow_from_floor_is_identity() {
        let sched = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let ds = FiniteDataset::two_point();
        assert_eq!(oracle_pf_ode_solve(&[0.3], 39, &sched, &ds).unwrap(), vec![0.3]);
    }

    #[test]
    fn single_point_attracts_every_start() {
        let sched = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let ds = FiniteDataset::new(vec![vec![0.4, -0.9]]).unwrap();
        for start in [[20.0, -30.0], [0.0, 0.0], [-25.0, 3.0]] {
            let end = oracle_pf_ode_solve(&start, 0, &sched, &ds).unwrap();
            assert!((end[0] - 0.4).abs() < 1e-3 && (end[1] + 0.9).abs() < 1e-3, "{end:?}");
        }
    }
}
