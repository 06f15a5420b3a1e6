use copilot_core::fixtures::two_mode_2d;
use copilot_core::oracle::{closed_form_denoiser, log_density, oracle_pf_ode_solve, oracle_score, FiniteDataset};
use copilot_core::schedule::{NoiseSchedule, ScheduleParams};
use proptest::prelude::*;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn fd_gradient(x: &[f64], sigma: f64, ds: &FiniteDataset) -> Vec<f64> {
    let h = 1e-5 * sigma.max(1e-3);
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            (log_density(&p, sigma, ds).unwrap() - log_density(&m, sigma, ds).unwrap()) / (2.0 * h)
        })
        .collect()
}

/// Explicit Euler on the same ρ-warped grid, used as an independent reference.
fn euler_endpoint(x: &[f64], sigma_start: f64, steps: usize, ds: &FiniteDataset) -> Vec<f64> {
    let p = ScheduleParams { sigma_max: sigma_start, ..ScheduleParams::default() }.with_steps(steps);
    let sched = NoiseSchedule::new(p).unwrap();
    let mut x = x.to_vec();
    for w in sched.sigmas().windows(2) {
        let d = closed_form_denoiser(&x, w[0], ds).unwrap();
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += (w[1] - w[0]) * (*xi - di) / w[0];
        }
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn score_matches_finite_difference_log_density(
        x0 in -3.0f64..3.0,
        x1 in -3.0f64..3.0,
        log_sigma in (0.05f64).ln()..(80.0f64).ln(),
    ) {
        let sigma = log_sigma.exp();
        let ds = two_mode_2d();
        let x = [x0, x1];
        let s = oracle_score(&x, sigma, &ds).unwrap();
        let fd = fd_gradient(&x, sigma, &ds);
        let err = dist(&s, &fd) / s.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        prop_assert!(err <= 1e-5, "rel error {err} at sigma {sigma}");
    }

    #[test]
    fn two_point_flow_keeps_the_starting_sign(
        mag in 1.001e-3f64..3.0,
        positive in any::<bool>(),
        t_start in 0usize..39,
    ) {
        let x = if positive { mag } else { -mag };
        let sched = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let end = oracle_pf_ode_solve(&[x], t_start, &sched, &FiniteDataset::two_point()).unwrap();
        prop_assert_eq!(end[0].signum(), x.signum(), "start {} at rung {}", x, t_start);
    }

    #[test]
    fn denoiser_stays_on_the_segment_between_modes(
        x0 in -50.0f64..50.0,
        x1 in -50.0f64..50.0,
        log_sigma in (0.002f64).ln()..(80.0f64).ln(),
    ) {
        let ds = two_mode_2d();
        let d = closed_form_denoiser(&[x0, x1], log_sigma.exp(), &ds).unwrap();
        let (a, b) = ([-1.0, 0.5], [1.0, -0.5]);
        let t = (d[0] - a[0]) / (b[0] - a[0]);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&t));
        prop_assert!((a[1] + t * (b[1] - a[1]) - d[1]).abs() < 1e-12);
    }
}

#[test]
fn heun_integration_is_second_order() {
    let ds = two_mode_2d();
    let x0 = [3.0, -20.0];
    let solve = |t: usize| {
        let sched = NoiseSchedule::new(ScheduleParams::default().with_steps(t)).unwrap();
        oracle_pf_ode_solve(&x0, 0, &sched, &ds).unwrap()
    };
    let reference = solve(5120);
    let errs: Vec<f64> = [80, 160, 320].iter().map(|&t| dist(&solve(t), &reference)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.5..=4.5).contains(&ratio), "halving ratio {ratio}, errors {errs:?}");
    }
}

#[test]
fn endpoint_agrees_with_fine_euler_reference() {
    let ds = FiniteDataset::two_point();
    let p = ScheduleParams { sigma_max: 1.0, ..ScheduleParams::default() };
    let sched = NoiseSchedule::new(p).unwrap();
    for x in [0.3, -0.3] {
        let heun = oracle_pf_ode_solve(&[x], 0, &sched, &ds).unwrap()[0];
        let euler = euler_endpoint(&[x], 1.0, 400, &ds)[0];
        assert!((heun - x.signum()).abs() < 1e-2, "heun endpoint {heun}");
        assert!((heun - euler).abs() < 1e-2, "heun {heun} vs euler {euler}");
    }
}
