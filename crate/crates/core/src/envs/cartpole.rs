//! Cart-pole balancing with the canonical physics constants, Euler-integrated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_discrete, finished_guard, Action, Env, EnvActionKind, EnvSpec, StepResult};
use crate::error::Result;

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
const X_THRESHOLD: f64 = 2.4;
const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
const MAX_STEPS: usize = 500;

pub struct CartPole {
    spec: EnvSpec,
    state: [f64; 4], // x, x_dot, theta, theta_dot
    rng: ChaCha8Rng,
    steps: usize,
    done: bool,
}

impl CartPole {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        CartPole {
            spec: EnvSpec {
                obs_dim: 4,
                action_kind: EnvActionKind::Discrete { n: 2 },
                max_episode_steps: MAX_STEPS,
                reward_range: (0.0, 1.0),
            },
            state: [0.0; 4],
            rng: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
            done: true,
        }
    }
}

impl Env for CartPole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut self.state {
            *s = self.rng.random_range(-0.05..0.05);
        }
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        finished_guard(self.done)?;
        let a = check_discrete(action, 2)?;
        let force = if a == 1 { FORCE_MAG } else { -FORCE_MAG };
        let [x, x_dot, theta, theta_dot] = self.state;

        let cos_t = theta.cos();
        let sin_t = theta.sin();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin_t) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin_t - cos_t * temp)
            / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos_t * cos_t / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_t / TOTAL_MASS;

        self.state = [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ];
        self.steps += 1;

        let terminated =
            self.state[0].abs() > X_THRESHOLD || self.state[2].abs() > THETA_THRESHOLD;
        let truncated = !terminated && self.steps >= MAX_STEPS;
        self.done = terminated || truncated;
        Ok(StepResult {
            obs: self.state.to_vec(),
            reward: 1.0,
            terminated,
            truncated,
        })
    }
}
