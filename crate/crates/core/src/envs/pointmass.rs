//! Continuous-control target-reaching: accelerate a 2-D point mass to the
//! origin. Dense negative-distance reward with a terminal bonus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_continuous, finished_guard, Action, Env, EnvActionKind, EnvSpec, StepResult};
use crate::error::Result;

const DT: f64 = 0.1;
const GOAL_RADIUS: f64 = 0.05;
const GOAL_BONUS: f64 = 10.0;
const MAX_STEPS: usize = 200;

pub struct PointMass {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    rng: ChaCha8Rng,
    steps: usize,
    done: bool,
}

impl PointMass {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        PointMass {
            spec: EnvSpec {
                obs_dim: 4,
                action_kind: EnvActionKind::Continuous {
                    dim: 2,
                    low: vec![-1.0, -1.0],
                    high: vec![1.0, 1.0],
                },
                max_episode_steps: MAX_STEPS,
                reward_range: (f64::NEG_INFINITY, GOAL_BONUS),
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            rng: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
            done: true,
        }
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    #[cfg(test)]
    pub(crate) fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.done = false;
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = [
            self.rng.random_range(-1.0..1.0),
            self.rng.random_range(-1.0..1.0),
        ];
        self.vel = [0.0; 2];
        self.steps = 0;
        self.done = false;
        self.obs()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        finished_guard(self.done)?;
        let a = check_continuous(action, 2)?;
        for i in 0..2 {
            let acc = a[i].clamp(-1.0, 1.0);
            self.vel[i] += DT * acc;
            self.pos[i] += DT * self.vel[i];
        }
        self.steps += 1;

        let dist = (self.pos[0] * self.pos[0] + self.pos[1] * self.pos[1]).sqrt();
        let terminated = dist < GOAL_RADIUS;
        let reward = if terminated {
            -dist + GOAL_BONUS
        } else {
            -dist
        };
        let truncated = !terminated && self.steps >= MAX_STEPS;
        self.done = terminated || truncated;
        Ok(StepResult {
            obs: self.obs(),
            reward,
            terminated,
            truncated,
        })
    }
}
