use copilot_core::envs::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noised(epsilon: f64) -> PilotSpec {
    PilotSpec::Surrogate { surrogate: SurrogateKind::Noised, epsilon }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identical_seed_and_actions_give_identical_trajectories(
        seed in any::<u64>(),
        slot in any::<bool>(),
        actions in prop::collection::vec((-1.5f32..1.5, -1.5f32..1.5), 1..120),
    ) {
        let kind = if slot { EnvKind::Slot } else { EnvKind::Lander };
        let run = || {
            let mut env = Env::reset(kind, seed, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut trace = vec![env.copilot_view()];
            for &(ax, ay) in &actions {
                if env.outcome().is_terminal() {
                    break;
                }
                env.step(&[ax, ay]).unwrap();
                trace.push(env.copilot_view());
            }
            (trace, env.outcome())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.1, b.1);
        prop_assert_eq!(
            a.0.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.0.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn ballistic_vertical_velocity_matches_closed_form() {
    let mut e = Lander2D::reset(LanderConfig::default(), &mut ChaCha8Rng::seed_from_u64(3));
    let (vy0, g, dt) = (e.vy, e.cfg.gravity, e.cfg.dt);
    let mut t = 0;
    while e.step(&[0.0, 0.0]).unwrap() == Outcome::Running {
        t += 1;
        assert!((e.vy - (vy0 - g * t as f64 * dt)).abs() < 1e-10);
    }
}

#[test]
fn experts_succeed_in_at_least_95_percent_of_300_episodes() {
    for kind in [EnvKind::Lander, EnvKind::Slot] {
        let rate = success_rate(kind, PilotSpec::Expert, 7, 300).unwrap();
        assert!(rate >= 0.95, "{kind:?} expert success {rate}");
    }
}

#[test]
fn noisy_at_full_flaw_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut xs: Vec<f64> = (0..10_000)
        .map(|_| surrogate_action(SurrogateKind::Noisy, 1.0, &[0.4, -0.9], None, &mut rng)[0] as f64)
        .collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean.abs() < 0.03, "mean {mean}");
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = (x + 1.0) / 2.0;
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    // Asymptotic Kolmogorov-Smirnov critical value at the 1% level.
    assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
}

#[test]
fn noised_calibration_hits_the_band_on_fresh_episodes() {
    let cal = calibrate_epsilon(EnvKind::Lander, SurrogateKind::Noised, (0.15, 0.25), 300, 0).unwrap();
    assert!(cal.within_band, "{cal:?}");
    assert!(cal.epsilon > 0.0);
    let fresh = success_rate(EnvKind::Lander, noised(cal.epsilon), 12_345, 300).unwrap();
    assert!((0.15..=0.25).contains(&fresh), "fresh success {fresh} at epsilon {}", cal.epsilon);
}

#[test]
fn success_does_not_increase_with_flaw() {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    for kind in [EnvKind::Lander, EnvKind::Slot] {
        for surrogate in SurrogateKind::ALL {
            let median: Vec<f64> = grid
                .iter()
                .map(|&epsilon| {
                    let mut v: Vec<f64> = (0..5)
                        .map(|seed| success_rate(kind, PilotSpec::Surrogate { surrogate, epsilon }, seed, 60).unwrap())
                        .collect();
                    v.sort_by(f64::total_cmp);
                    v[2]
                })
                .collect();
            for w in median.windows(2) {
                assert!(w[1] <= w[0], "{kind:?} {surrogate:?}: {median:?}");
            }
        }
    }
}

#[test]
fn collection_keeps_only_successful_episodes() {
    for kind in [EnvKind::Lander, EnvKind::Slot] {
        let (ds, rep) = collect_dataset(kind, 3000, 5).unwrap();
        assert_eq!((ds.len(), ds.state_dim(), ds.action_dim()), (3000, 4, 2));
        assert_eq!(rep.discarded, 0, "{kind:?}");
        // Replaying the successful episodes regenerates the rows in order.
        let mut row = 0;
        for e in 0..rep.episodes {
            let mut env = Env::reset(kind, e, &mut episode_rng(5, e, 0));
            let mut rows = Vec::new();
            while !env.outcome().is_terminal() {
                let s = env.copilot_view();
                let a = env.expert_action();
                env.step(&a).unwrap();
                rows.push((s, a));
            }
            if env.outcome() != Outcome::Success {
                continue;
            }
            for (s, a) in rows {
                if row == ds.len() {
                    break;
                }
                assert_eq!(ds.state(row), s);
                assert_eq!(ds.action(row), a);
                row += 1;
            }
        }
        assert_eq!(row, ds.len());
    }
}

#[test]
fn slot_collection_balances_goals() {
    let (_, rep) = collect_dataset(EnvKind::Slot, 20_000, 0).unwrap();
    let [up, down] = rep.goal_transitions;
    let gap = (up as f64 - down as f64).abs() / up.max(down) as f64;
    assert!(gap <= 0.1, "upper {up} lower {down}");
}
