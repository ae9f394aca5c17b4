use rand::{Rng, RngCore};

use super::{
    Action, ActionSpace, EnvSpec, Environment, Observation, ObservationKind, Step, IMAGE_SIDE,
};
use crate::error::{invalid, Result};

/// Positions live in `[0, BOX_EXTENT]²`.
pub const BOX_EXTENT: f64 = 100.0;
pub const DISK_RADIUS_PX: i64 = 2;
const MIN_START_NORM: f64 = 75.0;
const EPISODE_LEN: usize = 100;

/// A white disk on a black square whose position follows clipped additive
/// dynamics. The reward is always zero.
#[derive(Clone, Debug)]
pub struct BoxImage {
    spec: EnvSpec,
    position: [f64; 2],
    t: usize,
}

impl Default for BoxImage {
    fn default() -> Self {
        Self::new()
    }
}

/// Pixel `(column, row)` of the disk center.
pub fn disk_center(x: [f64; 2]) -> (i64, i64) {
    let scale = (IMAGE_SIDE - 1) as f64 / BOX_EXTENT;
    ((x[0] * scale).round() as i64, (x[1] * scale).round() as i64)
}

/// Renders position `x` as a 52x52 byte image (0 = black, 255 = white).
pub fn render_boximage(x: [f64; 2]) -> Vec<u8> {
    let (cx, cy) = disk_center(x);
    let side = IMAGE_SIDE as i64;
    let mut pixels = vec![0u8; IMAGE_SIDE * IMAGE_SIDE];
    for r in (cy - DISK_RADIUS_PX).max(0)..=(cy + DISK_RADIUS_PX).min(side - 1) {
        for c in (cx - DISK_RADIUS_PX).max(0)..=(cx + DISK_RADIUS_PX).min(side - 1) {
            let (dc, dr) = (c - cx, r - cy);
            if dc * dc + dr * dr <= DISK_RADIUS_PX * DISK_RADIUS_PX {
                pixels[(r * side + c) as usize] = 255;
            }
        }
    }
    pixels
}

/// `min(max(x + a, 0), 100)` with `a` first clipped to `[-1, 1]²`. The flag
/// reports whether the box boundary changed the result.
pub fn step_position(x: [f64; 2], a: [f64; 2]) -> ([f64; 2], bool) {
    let mut next = [0.0; 2];
    let mut clipped = false;
    for i in 0..2 {
        let free = x[i] + a[i].clamp(-1.0, 1.0);
        next[i] = free.clamp(0.0, BOX_EXTENT);
        clipped |= next[i] != free;
    }
    (next, clipped)
}

/// Uniform rejection sample with `‖x‖ ≥ 75`; also returns the number of draws.
pub fn sample_start<R: Rng + ?Sized>(rng: &mut R) -> ([f64; 2], usize) {
    let mut draws = 0;
    loop {
        draws += 1;
        let x = [
            rng.random_range(0.0..=BOX_EXTENT),
            rng.random_range(0.0..=BOX_EXTENT),
        ];
        if x[0].hypot(x[1]) >= MIN_START_NORM {
            return (x, draws);
        }
    }
}

impl BoxImage {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                observation: ObservationKind::Image {
                    height: IMAGE_SIDE,
                    width: IMAGE_SIDE,
                },
                action: ActionSpace::Continuous {
                    dim: 2,
                    low: -1.0,
                    high: 1.0,
                },
                max_episode_len: EPISODE_LEN,
                discount_hint: 0.995,
            },
            position: [BOX_EXTENT; 2],
            t: 0,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    pub fn set_position(&mut self, x: [f64; 2]) {
        self.position = x;
    }

    pub fn observe(&self) -> Observation {
        Observation::Image(render_boximage(self.position))
    }
}

impl Environment for BoxImage {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation {
        self.position = sample_start(rng).0;
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &Action, _rng: &mut dyn RngCore) -> Result<Step> {
        let a = match action {
            Action::Continuous(v) if v.len() == 2 => [v[0], v[1]],
            other => return Err(invalid(format!("BoxImage needs a 2-D action, got {other:?}"))),
        };
        let (next, clipped) = step_position(self.position, a);
        self.position = next;
        self.t += 1;
        Ok(Step {
            observation: self.observe(),
            reward: 0.0,
            terminal: false,
            truncated: self.t >= EPISODE_LEN,
            clipped,
        })
    }
}
