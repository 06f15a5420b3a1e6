//! Small synthetic datasets with known optimal denoisers.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::TransitionDataset;
use crate::oracle::FiniteDataset;

/// Mode locations of the 2-D two-mode fixture.
pub const TWO_MODE_2D: [[f64; 2]; 2] = [[-1.0, 0.5], [1.0, -0.5]];

/// State-free dataset alternating between the given action modes.
pub fn modes_dataset(modes: &[Vec<f64>], n: usize) -> TransitionDataset {
    let dim = modes[0].len();
    let mut ds = TransitionDataset::new(0, dim);
    for i in 0..n {
        let a: Vec<f32> = modes[i % modes.len()].iter().map(|&v| v as f32).collect();
        ds.push(&[], &a, &[]).expect("consistent dims");
    }
    ds
}

/// `{-1, +1}` in one dimension with no state.
pub fn two_point_dataset(n: usize) -> TransitionDataset {
    modes_dataset(&[vec![-1.0], vec![1.0]], n)
}

pub fn two_mode_2d_dataset(n: usize) -> TransitionDataset {
    modes_dataset(&TWO_MODE_2D.map(|m| m.to_vec()), n)
}

pub fn two_mode_2d() -> FiniteDataset {
    FiniteDataset::new(TWO_MODE_2D.iter().map(|m| m.to_vec()).collect()).expect("valid fixture")
}

/// `k`-th of `n` equal-probability standard normal quantiles.
pub fn normal_quantile(k: usize, n: usize) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    std.inverse_cdf((k as f64 + 0.5) / n as f64)
}

/// `n` probe inputs distributed like noisy data at level `sigma`: point
/// `k` sits at mode `k mod Y` offset by normal quantiles. Extra dimensions
/// use the quantiles in a stride-permuted order so the probes are not
/// confined to a diagonal.
pub fn probe_grid(ds: &FiniteDataset, sigma: f64, n: usize) -> Vec<Vec<f64>> {
    let modes: Vec<&[f64]> = ds.points().collect();
    let stride = (1..n).rev().find(|s| gcd(*s, n) == 1 && *s <= n / 2 + 1).unwrap_or(1);
    (0..n)
        .map(|k| {
            let y = modes[k % modes.len()];
            y.iter().enumerate().map(|(d, &v)| v + sigma * normal_quantile((k + d * stride * k) % n, n)).collect()
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_are_symmetric() {
        for k in 0..21 {
            assert!((normal_quantile(k, 21) + normal_quantile(20 - k, 21)).abs() < 1e-12);
        }
        assert_eq!(normal_quantile(10, 21), 0.0);
    }

    #[test]
    fn two_point_dataset_is_balanced() {
        let ds = two_point_dataset(10);
        let pos = ds.actions().iter().filter(|&&a| a > 0.0).count();
        assert_eq!(pos, 5);
        assert_eq!(ds.state_dim(), 0);
    }

    #[test]
    fn grid_uses_every_mode_and_quantile() {
        let g = probe_grid(&FiniteDataset::two_point(), 0.1, 21);
        assert_eq!(g.len(), 21);
        let near_pos = g.iter().filter(|x| x[0] > 0.0).count();
        assert_eq!(near_pos, 10);
        let g2 = probe_grid(&two_mode_2d(), 1.0, 21);
        assert!(g2.iter().all(|x| x.len() == 2));
    }
}
