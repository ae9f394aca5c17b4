//! Desk-scale environments: BoxImage, SparsePoint and FourRoomsImage.
//!
//! Every environment draws its noise from the RNG passed to `reset`/`step`,
//! so an episode is reproducible from `(seed, action sequence)`.

mod boximage;
mod fourrooms;
mod sparsepoint;

use std::sync::Arc;

use rand::RngCore;

use crate::error::{invalid, Result};

pub use boximage::{render_boximage, BoxImage, BOX_EXTENT, DISK_RADIUS_PX};
pub use fourrooms::{Cell, FourRooms, FourRoomsMove, GRID};
pub use sparsepoint::{SparsePoint, GOAL_DISTANCE, STEP_SCALE};

/// Side length of every image observation.
pub const IMAGE_SIDE: usize = 52;

#[derive(Clone, Debug, PartialEq)]
pub enum ObservationKind {
    Vector { dim: usize },
    /// Single-channel image stored as bytes; pixel value is `byte / 255`.
    Image { height: usize, width: usize },
}

impl ObservationKind {
    pub fn flat_len(&self) -> usize {
        match *self {
            Self::Vector { dim } => dim,
            Self::Image { height, width } => height * width,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionSpace {
    Continuous { dim: usize, low: f64, high: f64 },
    Discrete { n: usize },
}

impl ActionSpace {
    /// Width of the action encoding fed to networks (raw or one-hot).
    pub fn encoded_len(&self) -> usize {
        match *self {
            Self::Continuous { dim, .. } => dim,
            Self::Discrete { n } => n,
        }
    }

    pub fn encode_into(&self, action: &Action, out: &mut [f64]) -> Result<()> {
        match (self, action) {
            (Self::Continuous { dim, .. }, Action::Continuous(v)) if v.len() == *dim => {
                out.copy_from_slice(v);
                Ok(())
            }
            (Self::Discrete { n }, Action::Discrete(i)) => {
                if i >= n {
                    return Err(invalid(format!("discrete action {i} out of range 0..{n}")));
                }
                out.fill(0.0);
                out[*i] = 1.0;
                Ok(())
            }
            _ => Err(invalid(format!("action {action:?} does not fit {self:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub observation: ObservationKind,
    pub action: ActionSpace,
    pub max_episode_len: usize,
    pub discount_hint: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Vector(Vec<f64>),
    Image(Vec<u8>),
}

impl Observation {
    pub fn len(&self) -> usize {
        match self {
            Self::Vector(v) => v.len(),
            Self::Image(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the network input form (images scaled to [0, 1]).
    pub fn write_into(&self, out: &mut [f64]) {
        match self {
            Self::Vector(v) => out.copy_from_slice(v),
            Self::Image(p) => {
                for (o, &b) in out.iter_mut().zip(p) {
                    *o = f64::from(b) / 255.0;
                }
            }
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.write_into(&mut out);
        out
    }
}

/// Outcome of one environment step.
#[derive(Clone, Debug)]
pub struct Step {
    pub observation: Observation,
    pub reward: f64,
    /// The episode ended in a terminal state (no bootstrapping past it).
    pub terminal: bool,
    /// The episode hit its length cap.
    pub truncated: bool,
    /// A boundary or wall altered the free motion.
    pub clipped: bool,
}

/// One `(s, a, s')` experience tuple.
#[derive(Clone, Debug)]
pub struct Transition {
    pub s: Arc<Observation>,
    pub a: Action,
    pub s_next: Arc<Observation>,
    pub r_env: f64,
    pub done: bool,
    pub terminal: bool,
    pub clipped: bool,
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation;
    fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<Step>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    BoxImage,
    SparsePoint,
    FourRooms,
}

impl EnvKind {
    pub fn build(self) -> Box<dyn Environment> {
        match self {
            Self::BoxImage => Box::new(BoxImage::new()),
            Self::SparsePoint => Box::new(SparsePoint::new()),
            Self::FourRooms => Box::new(FourRooms::new()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BoxImage => "box_image",
            Self::SparsePoint => "sparse_point",
            Self::FourRooms => "four_rooms",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::BoxImage, Self::SparsePoint, Self::FourRooms]
            .into_iter()
            .find(|k| k.name() == name)
    }
}
