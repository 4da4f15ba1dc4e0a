//! The training loop: rollout collection with the PoE-fused policy, GAE,
//! epoch/minibatch updates of the total loss, metric logging, checkpointing,
//! and deterministic evaluation.
//!
//! Determinism contract: a (config, seed) pair fixes every random draw. The
//! seed fans out into independent ChaCha streams (net init, action sampling,
//! minibatch shuffling, per-env episode seeds), and vectorized rollouts merge
//! env results in fixed index order, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage;
use crate::autograd::Graph;
use crate::distributions::{
    categorical_linear_fuse, categorical_poe_fuse, gaussian_linear_fuse, gaussian_poe_fuse,
    tensor_categorical_linear_fuse, tensor_categorical_poe_fuse, tensor_gaussian_linear_fuse,
    tensor_gaussian_poe_fuse, Categorical, DiagGaussian, TensorDist,
};
use crate::envs::{make_env, Action, Env};
use crate::error::{Error, Result};
use crate::losses::{self, LossParts, LossWeights};
use crate::networks::{ActionKind, AgentNet, NetSpec};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which algorithm variant a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Prefpoe,
    PpoBaseline,
    LinearFusionAblation,
}

/// Which distribution the PPO importance ratio is taken under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioDist {
    Fused,
    Main,
}

/// Where advantages are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvNorm {
    Batch,
    Minibatch,
}

/// Which distribution the PPO entropy bonus rewards. Identical in
/// ppo_baseline mode, where the fused policy is the main policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyBonus {
    Main,
    Fused,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub env: String,
    pub total_steps: u64,
    pub rollout_horizon: usize,
    pub num_envs: usize,
    pub update_epochs: usize,
    pub minibatch_count: usize,
    pub learning_rate: f64,
    pub anneal_lr: bool,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub max_grad_norm: f64,
    pub weights: LossWeights,
    pub lambda_pref: f64,
    pub seed: u64,
    pub mode: Mode,
    pub ratio_dist: RatioDist,
    pub adv_norm: AdvNorm,
    pub entropy_bonus: EntropyBonus,
    pub value_clip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: "cartpole".into(),
            total_steps: 150_000,
            rollout_horizon: 2048,
            num_envs: 1,
            update_epochs: 10,
            minibatch_count: 32,
            learning_rate: 3e-4,
            anneal_lr: true,
            gamma: 0.99,
            gae_lambda: 0.95,
            max_grad_norm: 0.5,
            weights: LossWeights::default(),
            lambda_pref: 0.5,
            seed: 0,
            mode: Mode::Prefpoe,
            ratio_dist: RatioDist::Fused,
            adv_norm: AdvNorm::Minibatch,
            entropy_bonus: EntropyBonus::Main,
            value_clip: true,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.rollout_horizon * self.num_envs
    }

    pub fn num_updates(&self) -> u64 {
        self.total_steps / self.batch_size() as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        make_env(&self.env)?;
        if self.rollout_horizon == 0 || self.num_envs == 0 {
            return Err(Error::Config("rollout_horizon and num_envs must be >= 1".into()));
        }
        if self.batch_size() % self.minibatch_count != 0 {
            return Err(Error::Config(format!(
                "rollout_horizon * num_envs ({}) must be divisible by minibatch_count ({})",
                self.batch_size(),
                self.minibatch_count
            )));
        }
        if self.total_steps < self.batch_size() as u64 {
            return Err(Error::Config(format!(
                "total_steps ({}) below one batch ({})",
                self.total_steps,
                self.batch_size()
            )));
        }
        if self.update_epochs == 0 {
            return Err(Error::Config("update_epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must lie in [0, 1]".into()));
        }
        if self.mode != Mode::PpoBaseline && !(self.lambda_pref > 0.0) {
            return Err(Error::Config(
                "lambda_pref must be positive outside ppo_baseline mode".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeStats {
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossRecord {
    pub clip: f64,
    pub value: f64,
    pub pref: f64,
    pub cons: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EntropyRecord {
    pub pref: f64,
    pub main: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeanNormRecord {
    pub main: f64,
    pub fused: f64,
    pub rel_diff: f64,
}

/// One record per update, written as a JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub global_step: u64,
    pub episodic_return: EpisodeStats,
    pub losses: LossRecord,
    pub entropies: EntropyRecord,
    pub mean_norms: MeanNormRecord,
    pub learning_rate: f64,
}

// ---------------------------------------------------------------------------
// Rollout storage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ActionStore {
    Discrete(Vec<usize>),
    Continuous { data: Vec<f64>, dim: usize },
}

/// Fixed-horizon trajectory storage, step-major (`index = t * num_envs + n`).
/// Rewards already include truncation bootstraps (γ·V(s') folded in), so
/// `dones` marks every episode boundary uniformly.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub num_envs: usize,
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: ActionStore,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub fused_log_prob: Vec<f64>,
    pub main_log_prob: Vec<f64>,
    pub bootstrap_values: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.horizon * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Episode returns completed during one rollout.
#[derive(Debug, Clone, Default)]
pub struct RolloutStats {
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
}

impl RolloutStats {
    fn episode_stats(&self) -> EpisodeStats {
        if self.episode_returns.is_empty() {
            return EpisodeStats {
                mean: None,
                min: None,
                max: None,
                count: 0,
            };
        }
        let n = self.episode_returns.len() as f64;
        let mean = self.episode_returns.iter().sum::<f64>() / n;
        let min = self.episode_returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self
            .episode_returns
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        EpisodeStats {
            mean: Some(mean),
            min: Some(min),
            max: Some(max),
            count: self.episode_returns.len(),
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Gradient descent with adaptive moments (β₁ 0.9, β₂ 0.999, ε 1e-5).
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(param_sizes: &[usize]) -> Self {
        Adam {
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }

    pub fn step(&mut self, params: &mut [crate::networks::Param], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, g) in grads[i].iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = max_norm / (total + 1e-6);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Vectorized environments
// ---------------------------------------------------------------------------

struct VecEnv {
    envs: Vec<Box<dyn Env>>,
    seed_rngs: Vec<ChaCha8Rng>,
    current_obs: Vec<Vec<f64>>,
    running_return: Vec<f64>,
    running_len: Vec<usize>,
}

struct VecStepOut {
    reward: f64,
    terminated: bool,
    truncated: bool,
    /// True next-state observation at truncation, before the auto-reset.
    final_obs: Option<Vec<f64>>,
    finished_episode: Option<(f64, usize)>,
}

impl VecEnv {
    fn new(mut envs: Vec<Box<dyn Env>>, base_seed: u64) -> Self {
        let mut seed_rngs = Vec::with_capacity(envs.len());
        let mut current_obs = Vec::with_capacity(envs.len());
        for (i, env) in envs.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
            rng.set_stream(100 + i as u64);
            let first_seed = rng.random::<u64>();
            current_obs.push(env.reset(first_seed));
            seed_rngs.push(rng);
        }
        let n = envs.len();
        VecEnv {
            envs,
            seed_rngs,
            current_obs,
            running_return: vec![0.0; n],
            running_len: vec![0; n],
        }
    }

    fn len(&self) -> usize {
        self.envs.len()
    }

    fn step(&mut self, actions: &[Action]) -> Result<Vec<VecStepOut>> {
        let mut outs = Vec::with_capacity(self.envs.len());
        for (i, action) in actions.iter().enumerate() {
            let result = self.envs[i].step(action)?;
            self.running_return[i] += result.reward;
            self.running_len[i] += 1;
            let done = result.terminated || result.truncated;
            let mut out = VecStepOut {
                reward: result.reward,
                terminated: result.terminated,
                truncated: result.truncated,
                final_obs: None,
                finished_episode: None,
            };
            if done {
                if result.truncated {
                    out.final_obs = Some(result.obs.clone());
                }
                out.finished_episode = Some((self.running_return[i], self.running_len[i]));
                self.running_return[i] = 0.0;
                self.running_len[i] = 0;
                let next_seed = self.seed_rngs[i].random::<u64>();
                self.current_obs[i] = self.envs[i].reset(next_seed);
            } else {
                self.current_obs[i] = result.obs;
            }
            outs.push(out);
        }
        Ok(outs)
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

pub struct Trainer {
    pub config: TrainConfig,
    pub net: AgentNet,
    adam: Adam,
    envs: VecEnv,
    policy_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    pub global_step: u64,
    update_idx: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let envs = (0..config.num_envs)
            .map(|_| make_env(&config.env))
            .collect::<Result<Vec<_>>>()?;
        Self::with_envs(config, envs)
    }

    /// Injection point for synthetic environments in tests.
    pub fn with_envs(config: TrainConfig, envs: Vec<Box<dyn Env>>) -> Result<Self> {
        config.validate_with_envs(&envs)?;
        let spec = envs[0].spec().clone();
        let net = AgentNet::init(config.seed, spec.obs_dim, spec.action_kind.to_net_kind())?;
        let adam = Adam::new(
            &net.params.iter().map(|p| p.data.len()).collect::<Vec<_>>(),
        );
        let mut policy_rng = ChaCha8Rng::seed_from_u64(config.seed);
        policy_rng.set_stream(1);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(2);
        let vec_env = VecEnv::new(envs, config.seed);
        Ok(Trainer {
            config,
            net,
            adam,
            envs: vec_env,
            policy_rng,
            shuffle_rng,
            global_step: 0,
            update_idx: 0,
        })
    }

    fn fuse_value(
        &self,
        main: &DiagGaussian,
        pref: &DiagGaussian,
    ) -> Result<DiagGaussian> {
        match self.config.mode {
            Mode::Prefpoe => gaussian_poe_fuse(main, pref, self.config.lambda_pref),
            Mode::PpoBaseline => Ok(main.clone()),
            Mode::LinearFusionAblation => {
                gaussian_linear_fuse(main, pref, self.config.lambda_pref)
            }
        }
    }

    fn fuse_value_cat(&self, main: &Categorical, pref: &Categorical) -> Result<Categorical> {
        match self.config.mode {
            Mode::Prefpoe => categorical_poe_fuse(main, pref, self.config.lambda_pref),
            Mode::PpoBaseline => Ok(main.clone()),
            Mode::LinearFusionAblation => {
                categorical_linear_fuse(main, pref, self.config.lambda_pref)
            }
        }
    }

    fn fuse_graph(&self, main: &TensorDist, pref: &TensorDist) -> Result<TensorDist> {
        let lam = self.config.lambda_pref;
        Ok(match (self.config.mode, main, pref) {
            (Mode::PpoBaseline, m, _) => m.clone(),
            (Mode::Prefpoe, TensorDist::Gaussian(m), TensorDist::Gaussian(p)) => {
                TensorDist::Gaussian(tensor_gaussian_poe_fuse(m, p, lam)?)
            }
            (Mode::Prefpoe, TensorDist::Categorical(m), TensorDist::Categorical(p)) => {
                TensorDist::Categorical(tensor_categorical_poe_fuse(m, p, lam)?)
            }
            (Mode::LinearFusionAblation, TensorDist::Gaussian(m), TensorDist::Gaussian(p)) => {
                TensorDist::Gaussian(tensor_gaussian_linear_fuse(m, p, lam)?)
            }
            (
                Mode::LinearFusionAblation,
                TensorDist::Categorical(m),
                TensorDist::Categorical(p),
            ) => TensorDist::Categorical(tensor_categorical_linear_fuse(m, p, lam)?),
            _ => {
                return Err(Error::FamilyMismatch(
                    "main and preference heads disagree on family".into(),
                ))
            }
        })
    }

    /// Value estimates for a batch of observations (no gradient use).
    fn values_of(&self, obs_rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound = self.net.bind(&g)?;
        let flat: Vec<f64> = obs_rows.iter().flatten().cloned().collect();
        let obs_t = g.constant(flat, vec![obs_rows.len(), self.net.spec.obs_dim])?;
        let (_, _, value) = bound.forward(&obs_t)?;
        Ok(value.data())
    }

    /// Collects one fixed-horizon rollout with the fused behavior policy.
    pub fn collect_rollout(&mut self) -> Result<(RolloutBuffer, RolloutStats)> {
        let horizon = self.config.rollout_horizon;
        let n = self.envs.len();
        let obs_dim = self.net.spec.obs_dim;
        let total = horizon * n;

        let mut obs_store = Vec::with_capacity(total * obs_dim);
        let mut rewards = vec![0.0; total];
        let mut dones = vec![false; total];
        let mut values = vec![0.0; total];
        let mut fused_lp = vec![0.0; total];
        let mut main_lp = vec![0.0; total];
        let mut actions_store = match self.net.spec.action_kind {
            ActionKind::Discrete { .. } => ActionStore::Discrete(vec![0; total]),
            ActionKind::Continuous { dim } => ActionStore::Continuous {
                data: vec![0.0; total * dim],
                dim,
            },
        };
        let mut stats = RolloutStats::default();

        for t in 0..horizon {
            let obs_rows: Vec<Vec<f64>> = self.envs.current_obs.clone();
            for row in &obs_rows {
                obs_store.extend_from_slice(row);
            }

            let g = Graph::new();
            let bound = self.net.bind(&g)?;
            let flat: Vec<f64> = obs_rows.iter().flatten().cloned().collect();
            let obs_t = g.constant(flat, vec![n, obs_dim])?;
            let (main, pref, value) = bound.forward(&obs_t)?;
            let value_row = value.data();

            let mut actions = Vec::with_capacity(n);
            match (&main, &pref) {
                (TensorDist::Gaussian(m), TensorDist::Gaussian(p)) => {
                    let m_rows = m.rows()?;
                    let p_rows = p.rows()?;
                    for i in 0..n {
                        let fused = self.fuse_value(&m_rows[i], &p_rows[i])?;
                        let (action, lp) = fused.sample(&mut self.policy_rng);
                        fused_lp[t * n + i] = lp;
                        main_lp[t * n + i] = m_rows[i].log_prob(&action)?;
                        if let ActionStore::Continuous { data, dim } = &mut actions_store {
                            data[(t * n + i) * *dim..(t * n + i + 1) * *dim]
                                .copy_from_slice(&action);
                        }
                        actions.push(Action::Continuous(action));
                    }
                }
                (TensorDist::Categorical(m), TensorDist::Categorical(p)) => {
                    let m_rows = m.rows()?;
                    let p_rows = p.rows()?;
                    for i in 0..n {
                        let fused = self.fuse_value_cat(&m_rows[i], &p_rows[i])?;
                        let (action, lp) = fused.sample(&mut self.policy_rng);
                        fused_lp[t * n + i] = lp;
                        main_lp[t * n + i] = m_rows[i].log_prob(action)?;
                        if let ActionStore::Discrete(data) = &mut actions_store {
                            data[t * n + i] = action;
                        }
                        actions.push(Action::Discrete(action));
                    }
                }
                _ => unreachable!("heads share one action kind"),
            }

            let outs = self.envs.step(&actions)?;
            // Truncation bootstraps: fold γ·V(s') into the reward so GAE can
            // treat every boundary as terminal.
            let trunc_obs: Vec<Vec<f64>> = outs
                .iter()
                .filter_map(|o| o.final_obs.clone())
                .collect();
            let trunc_values = if trunc_obs.is_empty() {
                Vec::new()
            } else {
                self.values_of(&trunc_obs)?
            };
            let mut trunc_iter = trunc_values.into_iter();
            for (i, out) in outs.iter().enumerate() {
                let idx = t * n + i;
                values[idx] = value_row[i];
                rewards[idx] = out.reward;
                dones[idx] = out.terminated || out.truncated;
                if out.final_obs.is_some() {
                    let v_final = trunc_iter.next().expect("one value per truncation");
                    rewards[idx] += self.config.gamma * v_final;
                }
                if let Some((ret, len)) = out.finished_episode {
                    stats.episode_returns.push(ret);
                    stats.episode_lengths.push(len);
                }
            }
        }

        let bootstrap_values = self.values_of(&self.envs.current_obs)?;
        Ok((
            RolloutBuffer {
                horizon,
                num_envs: n,
                obs_dim,
                obs: obs_store,
                actions: actions_store,
                rewards,
                dones,
                values,
                fused_log_prob: fused_lp,
                main_log_prob: main_lp,
                bootstrap_values,
            },
            stats,
        ))
    }

    /// Advantages and returns for a full buffer, flattened step-major.
    pub fn compute_advantages(&self, buffer: &RolloutBuffer) -> Result<(Vec<f64>, Vec<f64>)> {
        let (horizon, n) = (buffer.horizon, buffer.num_envs);
        let mut advantages = vec![0.0; horizon * n];
        let mut returns = vec![0.0; horizon * n];
        for env_idx in 0..n {
            let rewards: Vec<f64> = (0..horizon)
                .map(|t| buffer.rewards[t * n + env_idx])
                .collect();
            let dones: Vec<bool> = (0..horizon)
                .map(|t| buffer.dones[t * n + env_idx])
                .collect();
            let mut vals: Vec<f64> = (0..horizon)
                .map(|t| buffer.values[t * n + env_idx])
                .collect();
            vals.push(buffer.bootstrap_values[env_idx]);
            let batch = advantage::compute_gae(
                &rewards,
                &vals,
                &dones,
                self.config.gamma,
                self.config.gae_lambda,
            )?;
            for t in 0..horizon {
                advantages[t * n + env_idx] = batch.advantages[t];
                returns[t * n + env_idx] = batch.returns[t];
            }
        }
        Ok((advantages, returns))
    }

    fn current_lr(&self) -> f64 {
        if self.config.anneal_lr {
            let frac = 1.0 - self.update_idx as f64 / self.config.num_updates() as f64;
            self.config.learning_rate * frac
        } else {
            self.config.learning_rate
        }
    }

    /// One optimization pass over a collected rollout.
    pub fn update(&mut self, buffer: &RolloutBuffer, stats: &RolloutStats) -> Result<MetricsRecord> {
        let batch = buffer.len();
        let (advantages, returns) = self.compute_advantages(buffer)?;
        let batch_norm = match self.config.adv_norm {
            AdvNorm::Batch => Some(advantage::normalize(&advantages)?),
            AdvNorm::Minibatch => None,
        };
        let lr = self.current_lr();
        let mb_size = batch / self.config.minibatch_count;
        let mut indices: Vec<usize> = (0..batch).collect();

        let mut acc = MetricAccumulator::default();
        for epoch in 0..self.config.update_epochs {
            fisher_yates(&mut indices, &mut self.shuffle_rng);
            for mb in 0..self.config.minibatch_count {
                let mb_idx = &indices[mb * mb_size..(mb + 1) * mb_size];
                let first_minibatch = epoch == 0 && mb == 0;
                self.update_minibatch(
                    buffer,
                    mb_idx,
                    &advantages,
                    &returns,
                    batch_norm.as_deref(),
                    lr,
                    first_minibatch,
                    &mut acc,
                )?;
            }
        }

        self.update_idx += 1;
        self.global_step += batch as u64;
        let record = MetricsRecord {
            global_step: self.global_step,
            episodic_return: stats.episode_stats(),
            losses: acc.losses(),
            entropies: acc.entropies(),
            mean_norms: acc.mean_norms(),
            learning_rate: lr,
        };
        if !record.losses.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                update: self.update_idx as usize,
                value: record.losses.total,
            });
        }
        Ok(record)
    }

    #[allow(clippy::too_many_arguments)]
    fn update_minibatch(
        &mut self,
        buffer: &RolloutBuffer,
        mb_idx: &[usize],
        advantages: &[f64],
        returns: &[f64],
        batch_norm: Option<&[f64]>,
        lr: f64,
        first_minibatch: bool,
        acc: &mut MetricAccumulator,
    ) -> Result<()> {
        let mb = mb_idx.len();
        let obs_dim = buffer.obs_dim;
        let g = Graph::new();
        let bound = self.net.bind(&g)?;

        let mut obs = Vec::with_capacity(mb * obs_dim);
        for &i in mb_idx {
            obs.extend_from_slice(&buffer.obs[i * obs_dim..(i + 1) * obs_dim]);
        }
        let obs_t = g.constant(obs, vec![mb, obs_dim])?;
        let (main, pref, value) = bound.forward(&obs_t)?;
        let fused = self.fuse_graph(&main, &pref)?;

        let (logp_new, logp_pref) = match (&fused, &pref, &buffer.actions) {
            (TensorDist::Gaussian(f), TensorDist::Gaussian(p), ActionStore::Continuous { data, dim }) => {
                let mut act = Vec::with_capacity(mb * dim);
                for &i in mb_idx {
                    act.extend_from_slice(&data[i * dim..(i + 1) * dim]);
                }
                let act_t = g.constant(act, vec![mb, *dim])?;
                let ratio_dist = match self.config.ratio_dist {
                    RatioDist::Fused => f,
                    RatioDist::Main => match &main {
                        TensorDist::Gaussian(m) => m,
                        _ => unreachable!(),
                    },
                };
                (ratio_dist.log_prob(&act_t)?, p.log_prob(&act_t)?)
            }
            (TensorDist::Categorical(f), TensorDist::Categorical(p), ActionStore::Discrete(data)) => {
                let act: Vec<usize> = mb_idx.iter().map(|&i| data[i]).collect();
                let ratio_dist = match self.config.ratio_dist {
                    RatioDist::Fused => f,
                    RatioDist::Main => match &main {
                        TensorDist::Categorical(m) => m,
                        _ => unreachable!(),
                    },
                };
                (ratio_dist.log_prob(&act)?, p.log_prob(&act)?)
            }
            _ => unreachable!("action store family matches the heads"),
        };

        let logp_old_vals: Vec<f64> = match self.config.ratio_dist {
            RatioDist::Fused => mb_idx.iter().map(|&i| buffer.fused_log_prob[i]).collect(),
            RatioDist::Main => mb_idx.iter().map(|&i| buffer.main_log_prob[i]).collect(),
        };
        if first_minibatch {
            // Parameters have not moved since collection, so the stored
            // behavior log-probs must reproduce exactly.
            let fresh = logp_new.data();
            for (a, b) in fresh.iter().zip(&logp_old_vals) {
                if (a - b).abs() > 1e-10 {
                    return Err(Error::invalid(format!(
                        "stored rollout log-prob {b} does not match recomputation {a}"
                    )));
                }
            }
        }

        let adv_mb: Vec<f64> = match batch_norm {
            Some(normed) => mb_idx.iter().map(|&i| normed[i]).collect(),
            None => {
                let raw: Vec<f64> = mb_idx.iter().map(|&i| advantages[i]).collect();
                advantage::normalize(&raw)?
            }
        };
        let ret_mb: Vec<f64> = mb_idx.iter().map(|&i| returns[i]).collect();
        let v_old_mb: Vec<f64> = mb_idx.iter().map(|&i| buffer.values[i]).collect();

        let logp_old = g.vector(logp_old_vals);
        let a_norm = g.vector(adv_mb);
        let rets = g.vector(ret_mb);
        let v_old = g.vector(v_old_mb);

        let weights = &self.config.weights;
        let main_entropy = match self.config.entropy_bonus {
            EntropyBonus::Main => main.entropy()?.mean(),
            EntropyBonus::Fused => fused.entropy()?.mean(),
        };
        let value_clip = self.config.value_clip.then_some(weights.clip_coef);
        let (pref_loss, cons_loss) = if self.config.mode == Mode::PpoBaseline {
            (None, None)
        } else {
            let pref_entropy = pref.entropy()?.mean();
            let pref_loss = losses::preference_loss(
                &a_norm,
                &logp_pref,
                &pref_entropy,
                weights.beta1,
                weights.alpha,
            )?;
            let cons_loss = losses::consistency_loss(&fused, &pref)?;
            (Some(pref_loss), Some(cons_loss))
        };
        let parts = LossParts {
            clip: losses::ppo_clip_loss(&logp_new, &logp_old, &a_norm, weights.clip_coef)?,
            value: losses::value_loss(&value, &rets, &v_old, value_clip)?,
            main_entropy,
            pref: pref_loss,
            cons: cons_loss,
        };
        let total = losses::total_loss(&parts, weights)?;
        if !total.value().is_finite() {
            return Err(Error::NonFiniteLoss {
                update: self.update_idx as usize,
                value: total.value(),
            });
        }
        total.backward()?;
        let mut grads = bound.grads();
        clip_grad_norm(&mut grads, self.config.max_grad_norm);
        self.adam.step(&mut self.net.params, &grads, lr);

        acc.push(&parts, total.value(), &main, &pref, &fused)?;
        Ok(())
    }

    /// Runs collect → GAE → update until the step budget, invoking `sink`
    /// after every update.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let num_updates = self.config.num_updates();
        let mut records = Vec::with_capacity(num_updates as usize);
        for _ in 0..num_updates {
            let (buffer, stats) = self.collect_rollout()?;
            let record = self.update(&buffer, &stats)?;
            sink(&record)?;
            records.push(record);
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: CheckpointConfig {
                env: self.config.env.clone(),
                net: self.net.spec.clone(),
                lambda_pref: self.config.lambda_pref,
                mode: self.config.mode,
                ratio_dist: self.config.ratio_dist,
                suite_version: env!("CARGO_PKG_VERSION").to_string(),
            },
            params: self.net.param_map(),
            shapes: self.net.shape_map(),
        }
    }
}

impl TrainConfig {
    fn validate_with_envs(&self, envs: &[Box<dyn Env>]) -> Result<()> {
        // Same as validate(), minus the name lookup (envs may be injected).
        let mut probe = self.clone();
        probe.env = "cartpole".into();
        probe.validate()?;
        if envs.is_empty() || envs.len() != self.num_envs {
            return Err(Error::Config(format!(
                "expected {} environments, got {}",
                self.num_envs,
                envs.len()
            )));
        }
        Ok(())
    }
}

fn fisher_yates(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Metric accumulation
// ---------------------------------------------------------------------------

#[derive(Default)]
struct MetricAccumulator {
    count: usize,
    clip: f64,
    value: f64,
    pref: f64,
    cons: f64,
    total: f64,
    h_pref: f64,
    h_main: f64,
    h_fused: f64,
    norm_main: f64,
    norm_fused: f64,
    rel_diff: f64,
}

impl MetricAccumulator {
    fn push(
        &mut self,
        parts: &LossParts,
        total: f64,
        main: &TensorDist,
        pref: &TensorDist,
        fused: &TensorDist,
    ) -> Result<()> {
        self.count += 1;
        self.clip += parts.clip.value();
        self.value += parts.value.value();
        self.pref += parts.pref.as_ref().map(|t| t.value()).unwrap_or(0.0);
        self.cons += parts.cons.as_ref().map(|t| t.value()).unwrap_or(0.0);
        self.total += total;
        self.h_main += parts.main_entropy.value();
        self.h_pref += pref.entropy()?.mean().value();
        self.h_fused += fused.entropy()?.mean().value();

        let (m_vec, f_vec, rows, dim) = match (main, fused) {
            (TensorDist::Gaussian(m), TensorDist::Gaussian(f)) => {
                let shape = m.mean.shape();
                (m.mean.data(), f.mean.data(), shape[0], shape[1])
            }
            (TensorDist::Categorical(m), TensorDist::Categorical(f)) => {
                // Probability vectors stand in for the mean in discrete spaces.
                let probs = |t: &crate::distributions::TensorCategorical| -> Result<Vec<f64>> {
                    Ok(t.rows()?.iter().flat_map(|c| c.probs()).collect())
                };
                let shape = m.logits.shape();
                (probs(m)?, probs(f)?, shape[0], shape[1])
            }
            _ => unreachable!(),
        };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut nm = 0.0;
        let mut nf = 0.0;
        let mut rd = 0.0;
        for r in 0..rows {
            let m_row = &m_vec[r * dim..(r + 1) * dim];
            let f_row = &f_vec[r * dim..(r + 1) * dim];
            let diff: Vec<f64> = m_row.iter().zip(f_row).map(|(a, b)| b - a).collect();
            let m_norm = norm(m_row);
            nm += m_norm;
            nf += norm(f_row);
            rd += norm(&diff) / (m_norm + 1e-8);
        }
        self.norm_main += nm / rows as f64;
        self.norm_fused += nf / rows as f64;
        self.rel_diff += rd / rows as f64;
        Ok(())
    }

    fn losses(&self) -> LossRecord {
        let n = self.count.max(1) as f64;
        LossRecord {
            clip: self.clip / n,
            value: self.value / n,
            pref: self.pref / n,
            cons: self.cons / n,
            total: self.total / n,
        }
    }

    fn entropies(&self) -> EntropyRecord {
        let n = self.count.max(1) as f64;
        EntropyRecord {
            pref: self.h_pref / n,
            main: self.h_main / n,
            fused: self.h_fused / n,
        }
    }

    fn mean_norms(&self) -> MeanNormRecord {
        let n = self.count.max(1) as f64;
        MeanNormRecord {
            main: self.norm_main / n,
            fused: self.norm_fused / n,
            rel_diff: self.rel_diff / n,
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointConfig {
    pub env: String,
    pub net: NetSpec,
    pub lambda_pref: f64,
    pub mode: Mode,
    pub ratio_dist: RatioDist,
    pub suite_version: String,
}

/// Portable agent snapshot: config plus name → flat array / shape maps.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: BTreeMap<String, Vec<f64>>,
    pub shapes: BTreeMap<String, Vec<usize>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        let json = serde_json::to_string(self)?;
        file.write_all(json.as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let contents = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&contents)
            .map_err(|e| Error::Checkpoint(format!("cannot parse {}: {e}", path.display())))?;
        Ok(ckpt)
    }

    pub fn to_net(&self) -> Result<AgentNet> {
        AgentNet::from_maps(self.config.net.clone(), &self.params, &self.shapes)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalStats {
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Coefficient of variation, σ/|μ|·100; absent when the mean is ~0.
    pub cv: Option<f64>,
    pub returns: Vec<f64>,
}

impl EvalStats {
    pub fn from_returns(returns: Vec<f64>) -> Result<EvalStats> {
        if returns.is_empty() {
            return Err(Error::invalid("no evaluation episodes"));
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let min = returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let cv = if std == 0.0 {
            Some(0.0)
        } else if mean.abs() < 1e-12 {
            None
        } else {
            Some(100.0 * std / mean.abs())
        };
        Ok(EvalStats {
            episodes: returns.len(),
            mean,
            std,
            min,
            max,
            cv,
            returns,
        })
    }
}

/// Which distribution deterministic evaluation takes the mode of.
///
/// The fused distribution is the policy the method actually deploys, and is
/// the default. Evaluating the main head alone is available for ablation; at
/// desk scale the main head drifts toward its entropy bonus once the
/// preference head carries the decisiveness, so its standalone mode is not
/// representative of the trained agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    Fused,
    Main,
}

pub struct EvalOptions {
    pub episodes: usize,
    pub deterministic: bool,
    pub seed: u64,
    pub policy: EvalPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            episodes: 100,
            deterministic: true,
            seed: 0,
            policy: EvalPolicy::Fused,
        }
    }
}

pub fn evaluate(
    net: &AgentNet,
    env_name: &str,
    mode: Mode,
    lambda_pref: f64,
    opts: &EvalOptions,
) -> Result<EvalStats> {
    let mut env = make_env(env_name)?;
    let env_spec = env.spec().clone();
    if env_spec.obs_dim != net.spec.obs_dim
        || env_spec.action_kind.to_net_kind() != net.spec.action_kind
    {
        return Err(Error::Checkpoint(format!(
            "checkpoint ({:?}, obs {}) does not match environment '{env_name}'",
            net.spec.action_kind, net.spec.obs_dim
        )));
    }
    let mut seed_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    sample_rng.set_stream(1);

    let mut returns = Vec::with_capacity(opts.episodes);
    for _ in 0..opts.episodes {
        let mut obs = env.reset(seed_rng.random::<u64>());
        let mut total = 0.0;
        loop {
            let action = act_one(
                net,
                &obs,
                mode,
                lambda_pref,
                opts.deterministic,
                opts.policy,
                &mut sample_rng,
            )?;
            let result = env.step(&action)?;
            total += result.reward;
            obs = result.obs;
            if result.terminated || result.truncated {
                break;
            }
        }
        returns.push(total);
    }
    EvalStats::from_returns(returns)
}

/// Chooses one action for a single observation. Stochastic rollouts always
/// sample the behavior (fused) distribution; deterministic ones take the
/// mode of `policy`.
pub fn act_one(
    net: &AgentNet,
    obs: &[f64],
    mode: Mode,
    lambda_pref: f64,
    deterministic: bool,
    policy: EvalPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Action> {
    let g = Graph::new();
    let bound = net.bind(&g)?;
    let obs_t = g.constant(obs.to_vec(), vec![1, net.spec.obs_dim])?;
    let (main, pref, _) = bound.forward(&obs_t)?;
    Ok(match (&main, &pref) {
        (TensorDist::Gaussian(m), TensorDist::Gaussian(p)) => {
            let m_row = &m.rows()?[0];
            let p_row = &p.rows()?[0];
            let chosen = if policy == EvalPolicy::Fused || !deterministic {
                fuse_for_eval(m_row, p_row, mode, lambda_pref)?
            } else {
                m_row.clone()
            };
            let a = if deterministic {
                chosen.mode()
            } else {
                chosen.sample(rng).0
            };
            Action::Continuous(a)
        }
        (TensorDist::Categorical(m), TensorDist::Categorical(p)) => {
            let m_row = &m.rows()?[0];
            let p_row = &p.rows()?[0];
            let chosen = if policy == EvalPolicy::Fused || !deterministic {
                fuse_for_eval_cat(m_row, p_row, mode, lambda_pref)?
            } else {
                m_row.clone()
            };
            let a = if deterministic {
                chosen.mode()
            } else {
                chosen.sample(rng).0
            };
            Action::Discrete(a)
        }
        _ => unreachable!("heads share one action kind"),
    })
}

fn fuse_for_eval(
    main: &DiagGaussian,
    pref: &DiagGaussian,
    mode: Mode,
    lambda_pref: f64,
) -> Result<DiagGaussian> {
    match mode {
        Mode::Prefpoe => gaussian_poe_fuse(main, pref, lambda_pref),
        Mode::PpoBaseline => Ok(main.clone()),
        Mode::LinearFusionAblation => gaussian_linear_fuse(main, pref, lambda_pref),
    }
}

fn fuse_for_eval_cat(
    main: &Categorical,
    pref: &Categorical,
    mode: Mode,
    lambda_pref: f64,
) -> Result<Categorical> {
    match mode {
        Mode::Prefpoe => categorical_poe_fuse(main, pref, lambda_pref),
        Mode::PpoBaseline => Ok(main.clone()),
        Mode::LinearFusionAblation => categorical_linear_fuse(main, pref, lambda_pref),
    }
}

/// Convenience wrapper: train to completion and return metrics + final net.
pub struct TrainOutput {
    pub metrics: Vec<MetricsRecord>,
    pub net: AgentNet,
    pub checkpoint: Checkpoint,
}

pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(config.clone())?;
    let metrics = trainer.run(|_| Ok(()))?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutput {
        metrics,
        net: trainer.net,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::StepResult;

    fn quick_config(env: &str) -> TrainConfig {
        TrainConfig {
            env: env.into(),
            total_steps: 256,
            rollout_horizon: 64,
            num_envs: 2,
            update_epochs: 2,
            minibatch_count: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn baseline_mode_stores_main_log_probs() {
        let mut cfg = quick_config("pointmass");
        cfg.mode = Mode::PpoBaseline;
        let mut trainer = Trainer::new(cfg).unwrap();
        let (buffer, _) = trainer.collect_rollout().unwrap();
        for (f, m) in buffer.fused_log_prob.iter().zip(&buffer.main_log_prob) {
            assert!((f - m).abs() < 1e-12, "baseline fusion must be the identity");
        }
    }

    #[test]
    fn fixed_seed_reproduces_buffer_exactly() {
        let collect = || {
            let mut trainer = Trainer::new(quick_config("cartpole")).unwrap();
            trainer.collect_rollout().unwrap().0
        };
        let a = collect();
        let b = collect();
        assert_eq!(a.obs, b.obs);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.fused_log_prob, b.fused_log_prob);
        match (&a.actions, &b.actions) {
            (ActionStore::Discrete(x), ActionStore::Discrete(y)) => assert_eq!(x, y),
            _ => panic!("cartpole actions are discrete"),
        }
    }

    #[test]
    fn stored_log_probs_survive_full_recomputation() {
        let mut trainer = Trainer::new(quick_config("pointmass")).unwrap();
        let (buffer, _) = trainer.collect_rollout().unwrap();
        // Recompute fused log-probs for the whole batch under the unchanged
        // parameters.
        let g = Graph::new();
        let bound = trainer.net.bind(&g).unwrap();
        let obs_t = g
            .constant(buffer.obs.clone(), vec![buffer.len(), buffer.obs_dim])
            .unwrap();
        let (main, pref, _) = bound.forward(&obs_t).unwrap();
        let fused = trainer.fuse_graph(&main, &pref).unwrap();
        let logp = match (&fused, &buffer.actions) {
            (TensorDist::Gaussian(f), ActionStore::Continuous { data, dim }) => {
                let act_t = g.constant(data.clone(), vec![buffer.len(), *dim]).unwrap();
                f.log_prob(&act_t).unwrap()
            }
            _ => panic!("pointmass is continuous"),
        };
        for (fresh, stored) in logp.data().iter().zip(&buffer.fused_log_prob) {
            assert!((fresh - stored).abs() < 1e-10);
        }
    }

    #[test]
    fn update_moves_pref_head_only_when_active() {
        let mut cfg = quick_config("pointmass");
        cfg.mode = Mode::Prefpoe;
        let mut trainer = Trainer::new(cfg).unwrap();
        let before = trainer.net.clone();
        let (buffer, stats) = trainer.collect_rollout().unwrap();
        trainer.update(&buffer, &stats).unwrap();
        let idx = trainer.net.param_index("pref.mean_w").unwrap();
        assert_ne!(
            trainer.net.params[idx].data, before.params[idx].data,
            "preference head must train when w_pref > 0"
        );

        let mut cfg = quick_config("pointmass");
        cfg.mode = Mode::PpoBaseline;
        let mut trainer = Trainer::new(cfg).unwrap();
        let before = trainer.net.clone();
        let (buffer, stats) = trainer.collect_rollout().unwrap();
        trainer.update(&buffer, &stats).unwrap();
        for name in ["pref.mean_w", "pref.mean_b", "pref.log_std_w", "pref.log_std_b"] {
            let idx = trainer.net.param_index(name).unwrap();
            assert_eq!(
                trainer.net.params[idx].data, before.params[idx].data,
                "{name} must stay frozen in baseline mode"
            );
        }
        let enc = trainer.net.param_index("enc.w1").unwrap();
        assert_ne!(trainer.net.params[enc].data, before.params[enc].data);
    }

    #[test]
    fn learning_rate_anneals_linearly() {
        let mut cfg = quick_config("pointmass");
        cfg.total_steps = 128 * 8;
        cfg.rollout_horizon = 64;
        cfg.num_envs = 2;
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let records = trainer.run(|_| Ok(())).unwrap();
        assert_eq!(records.len(), 8);
        let lrs: Vec<f64> = records.iter().map(|r| r.learning_rate).collect();
        assert!(lrs.last().unwrap() < lrs.first().unwrap());
        for w in lrs.windows(3) {
            let second_diff = (w[2] - w[1]) - (w[1] - w[0]);
            assert!(second_diff.abs() < 1e-12, "anneal must be linear");
        }
        assert!((lrs[0] - cfg.learning_rate).abs() < 1e-15);
    }

    #[test]
    fn one_batch_budget_runs_exactly_one_update() {
        let mut cfg = quick_config("pointmass");
        cfg.total_steps = (cfg.rollout_horizon * cfg.num_envs) as u64;
        let mut trainer = Trainer::new(cfg).unwrap();
        let records = trainer.run(|_| Ok(())).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].global_step, 128);
    }

    #[test]
    fn same_seed_same_final_checkpoint() {
        let run = || {
            let mut trainer = Trainer::new(quick_config("cartpole")).unwrap();
            trainer.run(|_| Ok(())).unwrap();
            serde_json::to_string(&trainer.checkpoint()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn metrics_are_deterministic_and_fused_entropy_bounded() {
        let run = || {
            let mut trainer = Trainer::new(quick_config("pointmass")).unwrap();
            trainer.run(|_| Ok(())).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        for record in &a {
            assert!(
                record.entropies.fused <= record.entropies.main + 1e-12,
                "PoE fusion must not raise entropy over the main policy"
            );
            assert!(record.mean_norms.rel_diff.is_finite());
        }
    }

    struct ZeroReward(Box<dyn Env>);

    impl Env for ZeroReward {
        fn spec(&self) -> &crate::envs::EnvSpec {
            self.0.spec()
        }
        fn reset(&mut self, seed: u64) -> Vec<f64> {
            self.0.reset(seed)
        }
        fn step(&mut self, action: &Action) -> Result<StepResult> {
            let mut r = self.0.step(action)?;
            r.reward = 0.0;
            Ok(r)
        }
    }

    #[test]
    fn reward_free_gradients_flow_only_through_entropy_terms() {
        // With rewards forced to zero AND a zeroed value head, every TD
        // residual vanishes, so the normalized advantages are exactly zero
        // and the only gradient paths left into the policy heads are the
        // entropy terms (the consistency weight is off so KL cannot couple
        // the heads).
        let make = |cfg: &TrainConfig| {
            let envs: Vec<Box<dyn Env>> = (0..cfg.num_envs)
                .map(|_| {
                    Box::new(ZeroReward(make_env("pointmass").unwrap())) as Box<dyn Env>
                })
                .collect();
            let mut trainer = Trainer::with_envs(cfg.clone(), envs).unwrap();
            for name in ["value.w", "value.b"] {
                let idx = trainer.net.param_index(name).unwrap();
                trainer.net.params[idx].data.iter_mut().for_each(|v| *v = 0.0);
            }
            trainer
        };

        let mut cfg = quick_config("pointmass");
        cfg.total_steps = 128;
        cfg.weights.w_cons = 0.0;
        let mut trainer = make(&cfg);
        let before = trainer.net.clone();
        let (buffer, stats) = trainer.collect_rollout().unwrap();
        assert!(buffer.rewards.iter().all(|&r| r == 0.0));
        let (advantages, _) = trainer.compute_advantages(&buffer).unwrap();
        assert!(
            advantages.iter().all(|&a| a == 0.0),
            "zero rewards with a zero value function mean zero advantages"
        );
        trainer.update(&buffer, &stats).unwrap();

        // Frozen: main mean (no loss path), value head (loss identically 0).
        for name in ["main.mean_w", "main.mean_b", "value.w", "value.b"] {
            let idx = trainer.net.param_index(name).unwrap();
            assert_eq!(
                trainer.net.params[idx].data, before.params[idx].data,
                "{name} must not move without an advantage signal"
            );
        }
        // Moving: exactly the entropy-bearing parameters.
        for name in ["main.log_std", "pref.log_std_w"] {
            let idx = trainer.net.param_index(name).unwrap();
            assert_ne!(
                trainer.net.params[idx].data, before.params[idx].data,
                "{name} should follow its entropy bonus"
            );
        }

        // With every entropy knob off as well, nothing moves at all.
        let mut cfg = quick_config("pointmass");
        cfg.total_steps = 128;
        cfg.weights.w_cons = 0.0;
        cfg.weights.w_pref = 0.0;
        cfg.weights.ent_coef = 0.0;
        let mut trainer = make(&cfg);
        let before = trainer.net.clone();
        let (buffer, stats) = trainer.collect_rollout().unwrap();
        trainer.update(&buffer, &stats).unwrap();
        assert_eq!(trainer.net, before, "no signal, no parameter motion");
    }

    #[test]
    fn evaluate_stats_recompute_and_bound() {
        let net = AgentNet::init(5, 16, ActionKind::Discrete { n: 4 }).unwrap();
        let opts = EvalOptions {
            episodes: 20,
            deterministic: true,
            seed: 11,
            policy: EvalPolicy::Main,
        };
        let stats = evaluate(&net, "frozenlake", Mode::Prefpoe, 0.5, &opts).unwrap();
        assert!(stats.mean >= 0.0 && stats.mean <= 1.0);
        // Stats match recomputation from the per-episode log.
        let n = stats.returns.len() as f64;
        let mean = stats.returns.iter().sum::<f64>() / n;
        assert!((stats.mean - mean).abs() < 1e-9);
        let var = stats.returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        assert!((stats.std - var.sqrt()).abs() < 1e-9);

        // Repeated deterministic evaluation is identical.
        let again = evaluate(&net, "frozenlake", Mode::Prefpoe, 0.5, &opts).unwrap();
        assert_eq!(stats, again);

        // A single episode has zero spread.
        let one = EvalStats::from_returns(vec![7.25]).unwrap();
        assert_eq!(one.std, 0.0);
        assert_eq!(one.cv, Some(0.0));

        // Constant returns give CV = 0.
        let constant = EvalStats::from_returns(vec![3.0, 3.0, 3.0]).unwrap();
        assert_eq!(constant.cv, Some(0.0));
    }

    #[test]
    fn checkpoint_roundtrips_through_disk() {
        let dir = std::env::temp_dir().join(format!("prefpoe_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut trainer = Trainer::new(quick_config("pointmass")).unwrap();
        trainer.run(|_| Ok(())).unwrap();
        let ckpt = trainer.checkpoint();
        let path = dir.join("final.ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
        let net = loaded.to_net().unwrap();
        assert_eq!(net, trainer.net);

        let opts = EvalOptions {
            episodes: 5,
            deterministic: true,
            seed: 2,
            policy: EvalPolicy::Fused,
        };
        let a = evaluate(&trainer.net, "pointmass", Mode::Prefpoe, 0.5, &opts).unwrap();
        let b = evaluate(&net, "pointmass", Mode::Prefpoe, 0.5, &opts).unwrap();
        assert_eq!(a, b);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = TrainConfig::default();
        cfg.minibatch_count = 7; // 2048 % 7 != 0
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.total_steps = 10;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.env = "atari".into();
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.lambda_pref = 0.0;
        assert!(cfg.validate().is_err());
        cfg.mode = Mode::PpoBaseline;
        assert!(cfg.validate().is_ok(), "baseline ignores lambda");
    }

    #[test]
    fn eval_dim_mismatch_is_an_error() {
        let net = AgentNet::init(0, 4, ActionKind::Discrete { n: 2 }).unwrap();
        let opts = EvalOptions {
            episodes: 1,
            deterministic: true,
            seed: 0,
            policy: EvalPolicy::Fused,
        };
        assert!(evaluate(&net, "frozenlake", Mode::Prefpoe, 0.5, &opts).is_err());
    }
}
