use emi_core::agent::discounted_returns;
use emi_core::emi::{augment_rewards, diversity_reward};
use emi_core::envs::{Action, ActionSpace, EnvKind, Observation};
use emi_core::numcore::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn diversity_rewards_telescope_along_a_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference = Matrix::from_fn(50, 2, |_, _| rng.random_range(-2.0..2.0));
    let path: Vec<Vec<f64>> = (0..30)
        .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
        .collect();
    let total: f64 = path
        .windows(2)
        .map(|w| diversity_reward(&w[0], &w[1], &reference, 0.7).unwrap())
        .sum();
    let end = diversity_reward(&path[0], &path[29], &reference, 0.7).unwrap();
    assert!((total - end).abs() < 1e-12, "{total} vs {end}");
}

#[test]
fn discounted_returns_match_direct_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 40;
    let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ends: Vec<bool> = (0..n).map(|t| t % 13 == 12).collect();
    let tail = vec![0.0; n];
    let got = discounted_returns(&rewards, &ends, &tail, 0.9);
    for t in 0..n {
        let mut want = 0.0;
        let mut k = 1.0;
        for u in t..n {
            want += k * rewards[u];
            k *= 0.9;
            if ends[u] {
                break;
            }
        }
        assert!((got[t] - want).abs() < 1e-12, "t={t}");
    }
}

#[test]
fn zero_eta_leaves_env_rewards_alone() {
    let env = [0.0, 1.0, 0.5];
    assert_eq!(augment_rewards(&env, &[3.0, -2.0, 7.0], 0.0).unwrap(), env);
}

fn rollout(kind: EnvKind, seed: u64) -> Vec<(Observation, f64)> {
    let mut env = kind.build();
    let spec = env.spec().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut out = vec![(env.reset(&mut rng), 0.0)];
    for _ in 0..60 {
        let a = match spec.action {
            ActionSpace::Continuous { dim, low, high } => {
                Action::Continuous((0..dim).map(|_| actions.random_range(low..high)).collect())
            }
            ActionSpace::Discrete { n } => Action::Discrete(actions.random_range(0..n)),
        };
        let step = env.step(&a, &mut rng).unwrap();
        out.push((step.observation, step.reward));
        if step.terminal || step.truncated {
            out.push((env.reset(&mut rng), 0.0));
        }
    }
    out
}

#[test]
fn environments_replay_exactly() {
    for kind in [EnvKind::BoxImage, EnvKind::SparsePoint, EnvKind::FourRooms] {
        for seed in 0..3 {
            let (a, b) = (rollout(kind, seed), rollout(kind, seed));
            assert_eq!(a, b, "{}", kind.name());
            for (obs, r) in &a {
                assert!(r.is_finite());
                if let Observation::Image(_) = obs {
                    assert!(obs.to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}
