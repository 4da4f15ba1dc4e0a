//! Desk-scale benchmark environments with a uniform step/reset interface.
//!
//! All three are deterministic given the reset seed: the environment draws
//! every bit of randomness (initial state, transition slips) from its own
//! seeded generator. Stepping a finished episode is an error; callers reset
//! explicitly.

mod cartpole;
mod frozenlake;
mod pointmass;

pub use cartpole::CartPole;
pub use frozenlake::FrozenLake;
pub use pointmass::PointMass;

use crate::error::{Error, Result};

/// Action-space description including continuous bounds.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvActionKind {
    Discrete { n: usize },
    Continuous { dim: usize, low: Vec<f64>, high: Vec<f64> },
}

impl EnvActionKind {
    pub fn to_net_kind(&self) -> crate::networks::ActionKind {
        match self {
            EnvActionKind::Discrete { n } => crate::networks::ActionKind::Discrete { n: *n },
            EnvActionKind::Continuous { dim, .. } => {
                crate::networks::ActionKind::Continuous { dim: *dim }
            }
        }
    }
}

/// Static environment description.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_kind: EnvActionKind,
    pub max_episode_steps: usize,
    pub reward_range: (f64, f64),
}

/// A single action, matching the environment's action kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Outcome of one step. Truncated episodes bootstrap with V(s'); terminated
/// ones do not.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    /// Starts a new episode; all episode randomness derives from `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<StepResult>;
}

/// Instantiates an environment by its config name.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "cartpole" => Ok(Box::new(CartPole::new())),
        "frozenlake" => Ok(Box::new(FrozenLake::new(true))),
        "frozenlake_noslip" => Ok(Box::new(FrozenLake::new(false))),
        "pointmass" => Ok(Box::new(PointMass::new())),
        other => Err(Error::Config(format!(
            "unknown environment '{other}' (expected cartpole | frozenlake | pointmass)"
        ))),
    }
}

pub(crate) fn check_discrete(action: &Action, n: usize) -> Result<usize> {
    match action {
        Action::Discrete(a) if *a < n => Ok(*a),
        Action::Discrete(a) => Err(Error::Env(format!(
            "action index {a} out of range for {n} actions"
        ))),
        Action::Continuous(_) => Err(Error::Env(
            "continuous action passed to a discrete environment".into(),
        )),
    }
}

pub(crate) fn check_continuous<'a>(action: &'a Action, dim: usize) -> Result<&'a [f64]> {
    match action {
        Action::Continuous(a) if a.len() == dim => Ok(a),
        Action::Continuous(a) => Err(Error::Env(format!(
            "action dimension {} does not match environment dimension {dim}",
            a.len()
        ))),
        Action::Discrete(_) => Err(Error::Env(
            "discrete action passed to a continuous environment".into(),
        )),
    }
}

pub(crate) fn finished_guard(done: bool) -> Result<()> {
    if done {
        Err(Error::Env(
            "step called on a finished episode; call reset first".into(),
        ))
    } else {
        Ok(())
    }
}
