use rand::RngCore;

use super::{
    Action, ActionSpace, EnvSpec, Environment, Observation, ObservationKind, Step, IMAGE_SIDE,
};
use crate::error::{invalid, Result};

/// Cells per side, border walls included.
pub const GRID: usize = 21;
const CELL_PX: usize = 2;
const OFFSET_PX: usize = (IMAGE_SIDE - GRID * CELL_PX) / 2;
const WALL_SHADE: u8 = 128;
const AGENT_SHADE: u8 = 255;
const EPISODE_LEN: usize = 400;
const MID: usize = GRID / 2;
const DOOR_NEAR: usize = 5;
const DOOR_FAR: usize = 15;

/// `(row, column)` grid coordinates.
pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FourRoomsMove {
    Up,
    Down,
    Left,
    Right,
}

impl FourRoomsMove {
    pub const ALL: [Self; 4] = [Self::Up, Self::Down, Self::Left, Self::Right];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Four rooms separated by single-cell doors. The agent starts in the
/// top-left room and is rewarded in the bottom-right room.
#[derive(Clone, Debug)]
pub struct FourRooms {
    spec: EnvSpec,
    walls: Vec<bool>,
    background: Vec<u8>,
    agent: Cell,
    t: usize,
}

impl Default for FourRooms {
    fn default() -> Self {
        Self::new()
    }
}

impl FourRooms {
    pub const START: Cell = (2, 2);
    pub const GOAL: Cell = (GRID - 3, GRID - 3);

    pub fn new() -> Self {
        let mut walls = vec![false; GRID * GRID];
        for i in 0..GRID {
            for j in 0..GRID {
                let border = i == 0 || j == 0 || i == GRID - 1 || j == GRID - 1;
                let inner = i == MID || j == MID;
                walls[i * GRID + j] = border || inner;
            }
        }
        for door in [(DOOR_NEAR, MID), (DOOR_FAR, MID), (MID, DOOR_NEAR), (MID, DOOR_FAR)] {
            walls[door.0 * GRID + door.1] = false;
        }
        let mut background = vec![0u8; IMAGE_SIDE * IMAGE_SIDE];
        for i in 0..GRID {
            for j in 0..GRID {
                if walls[i * GRID + j] {
                    paint(&mut background, (i, j), WALL_SHADE);
                }
            }
        }
        Self {
            spec: EnvSpec {
                observation: ObservationKind::Image {
                    height: IMAGE_SIDE,
                    width: IMAGE_SIDE,
                },
                action: ActionSpace::Discrete { n: 4 },
                max_episode_len: EPISODE_LEN,
                discount_hint: 0.995,
            },
            walls,
            background,
            agent: Self::START,
            t: 0,
        }
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls[cell.0 * GRID + cell.1]
    }

    pub fn agent(&self) -> Cell {
        self.agent
    }

    pub fn set_agent(&mut self, cell: Cell) -> Result<()> {
        if cell.0 >= GRID || cell.1 >= GRID || self.is_wall(cell) {
            return Err(invalid(format!("cell {cell:?} is not free")));
        }
        self.agent = cell;
        Ok(())
    }

    /// Target cell of a move, or the current cell when a wall blocks it.
    pub fn next_cell(&self, from: Cell, mv: FourRoomsMove) -> Cell {
        let (r, c) = from;
        let to = match mv {
            FourRoomsMove::Up => (r.saturating_sub(1), c),
            FourRoomsMove::Down => ((r + 1).min(GRID - 1), c),
            FourRoomsMove::Left => (r, c.saturating_sub(1)),
            FourRoomsMove::Right => (r, (c + 1).min(GRID - 1)),
        };
        if self.is_wall(to) {
            from
        } else {
            to
        }
    }

    pub fn render(&self, cell: Cell) -> Vec<u8> {
        let mut img = self.background.clone();
        paint(&mut img, cell, AGENT_SHADE);
        img
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..GRID)
            .flat_map(|i| (0..GRID).map(move |j| (i, j)))
            .filter(|&c| !self.is_wall(c))
            .collect()
    }
}

fn paint(img: &mut [u8], (r, c): Cell, shade: u8) {
    for dr in 0..CELL_PX {
        for dc in 0..CELL_PX {
            let y = OFFSET_PX + r * CELL_PX + dr;
            let x = OFFSET_PX + c * CELL_PX + dc;
            img[y * IMAGE_SIDE + x] = shade;
        }
    }
}

impl Environment for FourRooms {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Observation {
        self.agent = Self::START;
        self.t = 0;
        Observation::Image(self.render(self.agent))
    }

    fn step(&mut self, action: &Action, _rng: &mut dyn RngCore) -> Result<Step> {
        let mv = match action {
            Action::Discrete(i) => FourRoomsMove::from_index(*i)
                .ok_or_else(|| invalid(format!("FourRooms action {i} out of range 0..4")))?,
            other => return Err(invalid(format!("FourRooms needs a discrete action, got {other:?}"))),
        };
        let next = self.next_cell(self.agent, mv);
        let clipped = next == self.agent;
        self.agent = next;
        self.t += 1;
        let reached = next == Self::GOAL;
        Ok(Step {
            observation: Observation::Image(self.render(next)),
            reward: if reached { 1.0 } else { 0.0 },
            terminal: reached,
            truncated: !reached && self.t >= EPISODE_LEN,
            clipped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn bfs(env: &FourRooms, from: Cell, to: Cell) -> Option<usize> {
        let mut dist = vec![usize::MAX; GRID * GRID];
        let mut queue = VecDeque::from([from]);
        dist[from.0 * GRID + from.1] = 0;
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r * GRID + c];
            if (r, c) == to {
                return Some(d);
            }
            let around = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)];
            for n in around {
                if !env.is_wall(n) && dist[n.0 * GRID + n.1] == usize::MAX {
                    dist[n.0 * GRID + n.1] = d + 1;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    #[test]
    fn walls_block_moves() {
        let env = FourRooms::new();
        assert_eq!(env.next_cell((1, 1), FourRoomsMove::Up), (1, 1));
        assert_eq!(env.next_cell((1, 1), FourRoomsMove::Left), (1, 1));
        assert_eq!(env.next_cell((4, 9), FourRoomsMove::Right), (4, 9));
        assert_eq!(env.next_cell((5, 9), FourRoomsMove::Right), (5, 10));
        assert_eq!(env.next_cell((1, 1), FourRoomsMove::Down), (2, 1));
    }

    #[test]
    fn shortest_path_to_goal() {
        let env = FourRooms::new();
        // Through either pair of doors the path is Manhattan-optimal: 16 + 16.
        assert_eq!(bfs(&env, FourRooms::START, FourRooms::GOAL), Some(32));
    }

    #[test]
    fn every_cell_renders_uniquely() {
        let env = FourRooms::new();
        let cells = env.free_cells();
        assert_eq!(cells.len(), 19 * 19 - 19 - 19 + 1 + 4);
        let images: Vec<Vec<u8>> = cells.iter().map(|&c| env.render(c)).collect();
        for i in 0..images.len() {
            for j in i + 1..images.len() {
                assert_ne!(images[i], images[j]);
            }
        }
    }

    #[test]
    fn goal_terminates_with_reward() {
        let mut env = FourRooms::new();
        env.set_agent((GRID - 3, GRID - 4)).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let s = env.step(&Action::Discrete(3), &mut rng).unwrap();
        assert_eq!((s.reward, s.terminal), (1.0, true));
        assert!(env.step(&Action::Discrete(4), &mut rng).is_err());
    }
}
