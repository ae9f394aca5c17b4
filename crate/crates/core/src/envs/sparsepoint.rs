use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::{Action, ActionSpace, EnvSpec, Environment, Observation, ObservationKind, Step};
use crate::error::{invalid, Result};

/// Displacement per unit action.
pub const STEP_SCALE: f64 = 0.1;
/// Reward is paid once `|x| ≥ GOAL_DISTANCE`.
pub const GOAL_DISTANCE: f64 = 5.0;
const NOISE_STD: f64 = 0.01;
const EPISODE_LEN: usize = 500;

/// A noisy 1-D point that is rewarded only after travelling five units.
#[derive(Clone, Debug)]
pub struct SparsePoint {
    spec: EnvSpec,
    x: f64,
    t: usize,
}

impl Default for SparsePoint {
    fn default() -> Self {
        Self::new()
    }
}

/// Deterministic part of the transition: `(x', reward, reached)`.
pub fn point_step(x: f64, a: f64, noise: f64) -> (f64, f64, bool) {
    let next = x + STEP_SCALE * a.clamp(-1.0, 1.0) + noise;
    let reached = next.abs() >= GOAL_DISTANCE;
    (next, if reached { 1.0 } else { 0.0 }, reached)
}

impl SparsePoint {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                observation: ObservationKind::Vector { dim: 1 },
                action: ActionSpace::Continuous {
                    dim: 1,
                    low: -1.0,
                    high: 1.0,
                },
                max_episode_len: EPISODE_LEN,
                discount_hint: 0.995,
            },
            x: 0.0,
            t: 0,
        }
    }

    pub fn position(&self) -> f64 {
        self.x
    }

    pub fn set_position(&mut self, x: f64) {
        self.x = x;
    }
}

impl Environment for SparsePoint {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Observation {
        self.x = 0.0;
        self.t = 0;
        Observation::Vector(vec![self.x])
    }

    fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<Step> {
        let a = match action {
            Action::Continuous(v) if v.len() == 1 => v[0],
            other => return Err(invalid(format!("SparsePoint needs a 1-D action, got {other:?}"))),
        };
        let noise = Normal::new(0.0, NOISE_STD).expect("valid std").sample(rng);
        let (next, reward, reached) = point_step(self.x, a, noise);
        self.x = next;
        self.t += 1;
        Ok(Step {
            observation: Observation::Vector(vec![next]),
            reward,
            terminal: reached,
            truncated: !reached && self.t >= EPISODE_LEN,
            clipped: false,
        })
    }
}
