//! Shared-backbone agent: one encoder feeding a main policy head, a
//! preference head, and a value head.
//!
//! Parameters live outside any graph as flat f64 buffers. Each forward pass
//! binds them onto a fresh tape ([`AgentNet::bind`]); after backward the
//! gradients are read back off the bound tensors in parameter order.
//!
//! Conventions follow the usual on-policy setup: 2-layer tanh encoder,
//! orthogonal init (gain √2 hidden, 0.01 policy heads, 1.0 value head),
//! zero biases. The main policy's log-std is a state-independent learned
//! vector; the preference head's log-std is state-dependent.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::distributions::{TensorCategorical, TensorDist, TensorGaussian};
use crate::error::{Error, Result};

/// Action-space family and size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Discrete { n: usize },
    Continuous { dim: usize },
}

impl ActionKind {
    pub fn size(&self) -> usize {
        match self {
            ActionKind::Discrete { n } => *n,
            ActionKind::Continuous { dim } => *dim,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, ActionKind::Continuous { .. })
    }
}

/// Architecture description, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub obs_dim: usize,
    pub hidden: usize,
    pub action_kind: ActionKind,
}

impl NetSpec {
    pub fn new(obs_dim: usize, action_kind: ActionKind) -> Self {
        NetSpec {
            obs_dim,
            hidden: 64,
            action_kind,
        }
    }
}

/// One named parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    fn new(name: &str, data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Param {
            name: name.to_string(),
            data,
            shape,
        }
    }
}

/// The trainable agent. See module docs for the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNet {
    pub spec: NetSpec,
    pub params: Vec<Param>,
}

impl AgentNet {
    /// Seeded initialization. Two calls with the same arguments produce
    /// identical parameters.
    pub fn init(seed: u64, obs_dim: usize, action_kind: ActionKind) -> Result<AgentNet> {
        Self::init_spec(seed, NetSpec::new(obs_dim, action_kind))
    }

    pub fn init_spec(seed: u64, spec: NetSpec) -> Result<AgentNet> {
        if spec.obs_dim == 0 || spec.hidden == 0 || spec.action_kind.size() == 0 {
            return Err(Error::invalid("network dimensions must be >= 1"));
        }
        if let ActionKind::Discrete { n } = spec.action_kind {
            if n < 2 {
                return Err(Error::invalid("discrete action space needs >= 2 actions"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (obs, h) = (spec.obs_dim, spec.hidden);
        let out = spec.action_kind.size();
        let root2 = std::f64::consts::SQRT_2;

        let mut params = vec![
            Param::new("enc.w1", orthogonal(&mut rng, obs, h, root2), vec![obs, h]),
            Param::new("enc.b1", vec![0.0; h], vec![h]),
            Param::new("enc.w2", orthogonal(&mut rng, h, h, root2), vec![h, h]),
            Param::new("enc.b2", vec![0.0; h], vec![h]),
        ];
        match spec.action_kind {
            ActionKind::Continuous { dim } => {
                params.push(Param::new(
                    "main.mean_w",
                    orthogonal(&mut rng, h, dim, 0.01),
                    vec![h, dim],
                ));
                params.push(Param::new("main.mean_b", vec![0.0; dim], vec![dim]));
                params.push(Param::new("main.log_std", vec![0.0; dim], vec![dim]));
                params.push(Param::new(
                    "pref.mean_w",
                    orthogonal(&mut rng, h, dim, 0.01),
                    vec![h, dim],
                ));
                params.push(Param::new("pref.mean_b", vec![0.0; dim], vec![dim]));
                params.push(Param::new(
                    "pref.log_std_w",
                    orthogonal(&mut rng, h, dim, 0.01),
                    vec![h, dim],
                ));
                params.push(Param::new("pref.log_std_b", vec![0.0; dim], vec![dim]));
            }
            ActionKind::Discrete { n } => {
                params.push(Param::new(
                    "main.logits_w",
                    orthogonal(&mut rng, h, n, 0.01),
                    vec![h, n],
                ));
                params.push(Param::new("main.logits_b", vec![0.0; n], vec![n]));
                params.push(Param::new(
                    "pref.logits_w",
                    orthogonal(&mut rng, h, n, 0.01),
                    vec![h, n],
                ));
                params.push(Param::new("pref.logits_b", vec![0.0; n], vec![n]));
            }
        }
        params.push(Param::new(
            "value.w",
            orthogonal(&mut rng, h, 1, 1.0),
            vec![h, 1],
        ));
        params.push(Param::new("value.b", vec![0.0], vec![1]));
        let _ = out;
        Ok(AgentNet { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Fraction of parameters added by the preference head, relative to the
    /// same agent without it.
    pub fn pref_head_overhead(&self) -> f64 {
        let pref: usize = self
            .params
            .iter()
            .filter(|p| p.name.starts_with("pref."))
            .map(|p| p.data.len())
            .sum();
        let base = self.param_count() - pref;
        pref as f64 / base as f64
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Binds every parameter onto `graph` as a requires-grad leaf.
    pub fn bind(&self, graph: &Rc<Graph>) -> Result<BoundNet> {
        let tensors = self
            .params
            .iter()
            .map(|p| graph.tensor(p.data.clone(), p.shape.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundNet {
            spec: self.spec.clone(),
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            tensors,
        })
    }

    /// Parameter name → flat array, for checkpoints.
    pub fn param_map(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.data.clone()))
            .collect()
    }

    /// Parameter name → shape, for checkpoints.
    pub fn shape_map(&self) -> BTreeMap<String, Vec<usize>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect()
    }

    /// Rebuilds a net from checkpoint maps, validating the layout.
    pub fn from_maps(
        spec: NetSpec,
        params: &BTreeMap<String, Vec<f64>>,
        shapes: &BTreeMap<String, Vec<usize>>,
    ) -> Result<AgentNet> {
        let skeleton = AgentNet::init_spec(0, spec.clone())?;
        let mut out = Vec::with_capacity(skeleton.params.len());
        for p in &skeleton.params {
            let data = params.get(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {}", p.name))
            })?;
            let shape = shapes.get(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing shape for {}", p.name))
            })?;
            if *shape != p.shape || data.len() != p.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} ({} values), expected {:?}",
                    p.name,
                    shape,
                    data.len(),
                    p.shape
                )));
            }
            out.push(Param::new(&p.name, data.clone(), shape.clone()));
        }
        Ok(AgentNet {
            spec,
            params: out,
        })
    }
}

/// An agent's parameters bound to one graph for a forward/backward pass.
pub struct BoundNet {
    spec: NetSpec,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl BoundNet {
    fn get(&self, name: &str) -> &Tensor {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[idx]
    }

    /// Runs the shared encoder and all three heads on a `[B, obs_dim]` batch.
    /// Returns (main distribution, preference distribution, value `[B]`).
    pub fn forward(&self, obs: &Tensor) -> Result<(TensorDist, TensorDist, Tensor)> {
        let shape = obs.shape();
        if shape.len() != 2 || shape[1] != self.spec.obs_dim {
            return Err(Error::BadShape {
                op: "agent_forward",
                expected: format!("[B, {}]", self.spec.obs_dim),
                got: shape,
            });
        }
        let batch = shape[0];
        let h1 = obs
            .matmul(self.get("enc.w1"))?
            .add_row(self.get("enc.b1"))?
            .tanh();
        let h2 = h1
            .matmul(self.get("enc.w2"))?
            .add_row(self.get("enc.b2"))?
            .tanh();

        let (main, pref) = match self.spec.action_kind {
            ActionKind::Continuous { .. } => {
                let mean = h2
                    .matmul(self.get("main.mean_w"))?
                    .add_row(self.get("main.mean_b"))?;
                let log_std = self.get("main.log_std").repeat_rows(batch)?;
                let main = TensorGaussian::clamped(mean, log_std)?;

                let pref_mean = h2
                    .matmul(self.get("pref.mean_w"))?
                    .add_row(self.get("pref.mean_b"))?;
                let pref_log_std = h2
                    .matmul(self.get("pref.log_std_w"))?
                    .add_row(self.get("pref.log_std_b"))?;
                let pref = TensorGaussian::clamped(pref_mean, pref_log_std)?;
                (TensorDist::Gaussian(main), TensorDist::Gaussian(pref))
            }
            ActionKind::Discrete { .. } => {
                let logits = h2
                    .matmul(self.get("main.logits_w"))?
                    .add_row(self.get("main.logits_b"))?;
                let pref_logits = h2
                    .matmul(self.get("pref.logits_w"))?
                    .add_row(self.get("pref.logits_b"))?;
                (
                    TensorDist::Categorical(TensorCategorical::new(logits)?),
                    TensorDist::Categorical(TensorCategorical::new(pref_logits)?),
                )
            }
        };

        let value = h2
            .matmul(self.get("value.w"))?
            .add_row(self.get("value.b"))?
            .sum_last()?;
        Ok((main, pref, value))
    }

    /// Gradients in parameter order (zeros where backward did not reach).
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

/// Orthogonal `[rows, cols]` matrix scaled by `gain`: the smaller dimension's
/// Gram matrix equals gain²·I.
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let k = rows.min(cols);
    let l = rows.max(cols);
    let basis = orthonormal_vectors(rng, k, l);
    let mut out = vec![0.0; rows * cols];
    if rows >= cols {
        // basis vectors become columns
        for (j, v) in basis.iter().enumerate() {
            for i in 0..rows {
                out[i * cols + j] = gain * v[i];
            }
        }
    } else {
        // basis vectors become rows
        for (i, v) in basis.iter().enumerate() {
            for j in 0..cols {
                out[i * cols + j] = gain * v[j];
            }
        }
    }
    out
}

/// `k` orthonormal vectors of length `l` via modified Gram-Schmidt with one
/// re-orthogonalization pass.
fn orthonormal_vectors(rng: &mut ChaCha8Rng, k: usize, l: usize) -> Vec<Vec<f64>> {
    assert!(k <= l);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // vanishingly unlikely; redraw
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    basis
}
