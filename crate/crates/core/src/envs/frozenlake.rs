//! 4x4 frozen lake: sparse-reward grid navigation with slippery transitions.
//!
//! Actions 0..4 are left, down, right, up. When slippery, the executed move
//! is the intended direction or either perpendicular, each with probability
//! 1/3. Observations are one-hot cell encodings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_discrete, finished_guard, Action, Env, EnvActionKind, EnvSpec, StepResult};
use crate::error::Result;

const SIZE: usize = 4;
const N_CELLS: usize = SIZE * SIZE;
const MAX_STEPS: usize = 100;
const MAP: [&str; 4] = ["SFFF", "FHFH", "FFFH", "HFFG"];

pub struct FrozenLake {
    spec: EnvSpec,
    slippery: bool,
    cell: usize,
    rng: ChaCha8Rng,
    steps: usize,
    done: bool,
}

impl FrozenLake {
    pub fn new(slippery: bool) -> Self {
        FrozenLake {
            spec: EnvSpec {
                obs_dim: N_CELLS,
                action_kind: EnvActionKind::Discrete { n: 4 },
                max_episode_steps: MAX_STEPS,
                reward_range: (0.0, 1.0),
            },
            slippery,
            cell: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
            done: true,
        }
    }

    fn one_hot(cell: usize) -> Vec<f64> {
        let mut obs = vec![0.0; N_CELLS];
        obs[cell] = 1.0;
        obs
    }

    fn tile(cell: usize) -> u8 {
        MAP[cell / SIZE].as_bytes()[cell % SIZE]
    }

    fn next_cell(cell: usize, direction: usize) -> usize {
        let (row, col) = (cell / SIZE, cell % SIZE);
        let (row, col) = match direction {
            0 => (row, col.saturating_sub(1)),            // left
            1 => ((row + 1).min(SIZE - 1), col),          // down
            2 => (row, (col + 1).min(SIZE - 1)),          // right
            3 => (row.saturating_sub(1), col),            // up
            _ => unreachable!(),
        };
        row * SIZE + col
    }
}

impl Env for FrozenLake {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.cell = 0;
        self.steps = 0;
        self.done = false;
        Self::one_hot(0)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        finished_guard(self.done)?;
        let intended = check_discrete(action, 4)?;
        let executed = if self.slippery {
            // Intended or either perpendicular, 1/3 each.
            let options = [(intended + 3) % 4, intended, (intended + 1) % 4];
            options[self.rng.random_range(0..3)]
        } else {
            intended
        };
        self.cell = Self::next_cell(self.cell, executed);
        self.steps += 1;

        let tile = Self::tile(self.cell);
        let terminated = tile == b'H' || tile == b'G';
        let reward = if tile == b'G' { 1.0 } else { 0.0 };
        let truncated = !terminated && self.steps >= MAX_STEPS;
        self.done = terminated || truncated;
        Ok(StepResult {
            obs: Self::one_hot(self.cell),
            reward,
            terminated,
            truncated,
        })
    }
}
