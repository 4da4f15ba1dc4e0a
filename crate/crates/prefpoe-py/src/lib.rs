//! Python bindings: distribution algebra, advantage estimation, environment
//! simulation, training, evaluation, and the verification suite, exposed as
//! the `prefpoe_py` extension module.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::IntoPyObjectExt;

use prefpoe::distributions::{self, Categorical, DiagGaussian};
use prefpoe::envs::{self, Action, Env};
use prefpoe::trainer::{
    self, act_one, Checkpoint, EvalOptions, EvalPolicy, EvalStats, Trainer,
};
use prefpoe::{advantage, losses, verify};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: prefpoe::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

// ---------------------------------------------------------------------------
// Distribution algebra
// ---------------------------------------------------------------------------

/// Log-density of a diagonal Gaussian at `action`.
#[pyfunction]
fn gaussian_log_prob(mean: Vec<f64>, log_std: Vec<f64>, action: Vec<f64>) -> PyResult<f64> {
    let d = DiagGaussian::new(mean, log_std).map_err(err)?;
    d.log_prob(&action).map_err(err)
}

/// Closed-form differential entropy of a diagonal Gaussian.
#[pyfunction]
fn gaussian_entropy(log_std: Vec<f64>) -> PyResult<f64> {
    let mean = vec![0.0; log_std.len()];
    Ok(DiagGaussian::new(mean, log_std).map_err(err)?.entropy())
}

/// KL(p ‖ q) for diagonal Gaussians.
#[pyfunction]
fn gaussian_kl(
    mean_p: Vec<f64>,
    log_std_p: Vec<f64>,
    mean_q: Vec<f64>,
    log_std_q: Vec<f64>,
) -> PyResult<f64> {
    let p = DiagGaussian::new(mean_p, log_std_p).map_err(err)?;
    let q = DiagGaussian::new(mean_q, log_std_q).map_err(err)?;
    p.kl(&q).map_err(err)
}

/// Product-of-experts fusion in precision form. Returns (mean, log_std).
#[pyfunction]
fn gaussian_poe_fuse(
    mean_main: Vec<f64>,
    log_std_main: Vec<f64>,
    mean_pref: Vec<f64>,
    log_std_pref: Vec<f64>,
    lambda_pref: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let main = DiagGaussian::new(mean_main, log_std_main).map_err(err)?;
    let pref = DiagGaussian::new(mean_pref, log_std_pref).map_err(err)?;
    let fused = distributions::gaussian_poe_fuse(&main, &pref, lambda_pref).map_err(err)?;
    Ok((fused.mean, fused.log_std))
}

/// Log-probability of one action index under softmax(logits).
#[pyfunction]
fn categorical_log_prob(logits: Vec<f64>, action: usize) -> PyResult<f64> {
    Categorical::new(logits).map_err(err)?.log_prob(action).map_err(err)
}

#[pyfunction]
fn categorical_entropy(logits: Vec<f64>) -> PyResult<f64> {
    Ok(Categorical::new(logits).map_err(err)?.entropy())
}

#[pyfunction]
fn categorical_kl(logits_p: Vec<f64>, logits_q: Vec<f64>) -> PyResult<f64> {
    let p = Categorical::new(logits_p).map_err(err)?;
    let q = Categorical::new(logits_q).map_err(err)?;
    p.kl(&q).map_err(err)
}

/// Logit-space product-of-experts fusion. Returns fused probabilities.
#[pyfunction]
fn categorical_poe_fuse(
    logits_main: Vec<f64>,
    logits_pref: Vec<f64>,
    lambda_pref: f64,
) -> PyResult<Vec<f64>> {
    let main = Categorical::new(logits_main).map_err(err)?;
    let pref = Categorical::new(logits_pref).map_err(err)?;
    Ok(distributions::categorical_poe_fuse(&main, &pref, lambda_pref)
        .map_err(err)?
        .probs())
}

/// softmax(β₁·A/α), the analytic optimum of the preference loss.
#[pyfunction]
fn boltzmann_target(advantages: Vec<f64>, beta1: f64, alpha: f64) -> PyResult<Vec<f64>> {
    losses::boltzmann_target(&advantages, beta1, alpha).map_err(err)
}

// ---------------------------------------------------------------------------
// Advantage estimation
// ---------------------------------------------------------------------------

/// GAE over one trajectory; `values` holds the bootstrap value at index T.
/// Returns (advantages, returns).
#[pyfunction]
fn compute_gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    gamma: f64,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let batch = advantage::compute_gae(&rewards, &values, &dones, gamma, lam).map_err(err)?;
    Ok((batch.advantages, batch.returns))
}

/// Batch normalization to zero mean, unit variance.
#[pyfunction]
fn normalize_advantages(advantages: Vec<f64>) -> PyResult<Vec<f64>> {
    advantage::normalize(&advantages).map_err(err)
}

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

/// A desk-scale benchmark environment ("cartpole" | "frozenlake" | "pointmass").
#[pyclass(name = "Env", unsendable)]
struct PyEnv {
    inner: Box<dyn Env>,
}

#[pymethods]
impl PyEnv {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        Ok(PyEnv {
            inner: envs::make_env(name).map_err(err)?,
        })
    }

    fn obs_dim(&self) -> usize {
        self.inner.spec().obs_dim
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed)
    }

    /// Steps with an int (discrete) or sequence of floats (continuous).
    /// Returns (obs, reward, terminated, truncated).
    fn step(&mut self, action: &Bound<'_, PyAny>) -> PyResult<(Vec<f64>, f64, bool, bool)> {
        let act = if let Ok(idx) = action.extract::<usize>() {
            Action::Discrete(idx)
        } else if let Ok(vec) = action.extract::<Vec<f64>>() {
            Action::Continuous(vec)
        } else {
            return Err(PyValueError::new_err(
                "action must be an int or a sequence of floats",
            ));
        };
        let r = self.inner.step(&act).map_err(err)?;
        Ok((r.obs, r.reward, r.terminated, r.truncated))
    }
}

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

/// A trained (or freshly trained) agent with its fused behavior policy.
#[pyclass(name = "Agent", unsendable)]
struct PyAgent {
    checkpoint: Checkpoint,
    net: prefpoe::networks::AgentNet,
    rng: ChaCha8Rng,
}

impl PyAgent {
    fn from_checkpoint(checkpoint: Checkpoint) -> PyResult<Self> {
        let net = checkpoint.to_net().map_err(err)?;
        Ok(PyAgent {
            checkpoint,
            net,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }
}

#[pymethods]
impl PyAgent {
    /// Trains from a JSON config string; returns (agent, metrics), where
    /// metrics is a list of per-update dicts.
    #[staticmethod]
    fn train<'py>(py: Python<'py>, config_json: &str) -> PyResult<(PyAgent, Vec<Py<PyDict>>)> {
        let config = prefpoe::cli::load_config(config_json, &[]).map_err(err)?;
        let mut trainer = Trainer::new(config).map_err(err)?;
        let records = trainer.run(|_| Ok(())).map_err(err)?;
        let agent = PyAgent::from_checkpoint(trainer.checkpoint())?;
        let metrics = records
            .iter()
            .map(|r| json_to_dict(py, &serde_json::to_value(r).expect("serializable")))
            .collect::<PyResult<Vec<_>>>()?;
        Ok((agent, metrics))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Self::from_checkpoint(Checkpoint::load(std::path::Path::new(path)).map_err(err)?)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.checkpoint
            .save(std::path::Path::new(path))
            .map_err(err)
    }

    fn env_name(&self) -> String {
        self.checkpoint.config.env.clone()
    }

    /// Reseeds the sampling stream used by stochastic `act`.
    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Chooses an action for one observation. Deterministic mode takes the
    /// fused distribution's mode ("fused") or the main policy's ("main").
    #[pyo3(signature = (obs, deterministic = true, policy = "fused"))]
    fn act(
        &mut self,
        py: Python<'_>,
        obs: Vec<f64>,
        deterministic: bool,
        policy: &str,
    ) -> PyResult<Py<PyAny>> {
        let policy = match policy {
            "fused" => EvalPolicy::Fused,
            "main" => EvalPolicy::Main,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown policy '{other}' (expected 'fused' or 'main')"
                )))
            }
        };
        let action = act_one(
            &self.net,
            &obs,
            self.checkpoint.config.mode,
            self.checkpoint.config.lambda_pref,
            deterministic,
            policy,
            &mut self.rng,
        )
        .map_err(err)?;
        match action {
            Action::Discrete(a) => a.into_py_any(py),
            Action::Continuous(a) => a.into_py_any(py),
        }
    }

    /// Deterministic or stochastic evaluation over fresh episodes.
    #[pyo3(signature = (episodes = 100, deterministic = true, seed = 0, policy = "fused"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        episodes: usize,
        deterministic: bool,
        seed: u64,
        policy: &str,
    ) -> PyResult<Py<PyDict>> {
        let policy = match policy {
            "fused" => EvalPolicy::Fused,
            "main" => EvalPolicy::Main,
            _ => return Err(PyValueError::new_err("policy must be 'fused' or 'main'")),
        };
        let stats: EvalStats = trainer::evaluate(
            &self.net,
            &self.checkpoint.config.env,
            self.checkpoint.config.mode,
            self.checkpoint.config.lambda_pref,
            &EvalOptions {
                episodes,
                deterministic,
                seed,
                policy,
            },
        )
        .map_err(err)?;
        json_to_dict(py, &serde_json::to_value(&stats).expect("serializable"))
    }
}

// ---------------------------------------------------------------------------
// Verification suite
// ---------------------------------------------------------------------------

/// Runs every numerical oracle; returns a list of report dicts.
#[pyfunction]
fn verify_suite(py: Python<'_>) -> PyResult<Vec<Py<PyDict>>> {
    let reports = verify::run_suite(None).map_err(err)?;
    reports
        .iter()
        .map(|r| json_to_dict(py, &serde_json::to_value(r).expect("serializable")))
        .collect()
}

fn json_to_dict<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Py<PyDict>> {
    fn convert<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
        Ok(match v {
            serde_json::Value::Null => py.None(),
            serde_json::Value::Bool(b) => b.into_py_any(py)?,
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    i.into_py_any(py)?
                } else {
                    n.as_f64().unwrap_or(f64::NAN).into_py_any(py)?
                }
            }
            serde_json::Value::String(s) => s.into_py_any(py)?,
            serde_json::Value::Array(items) => {
                let converted: Vec<Py<PyAny>> = items
                    .iter()
                    .map(|item| convert(py, item))
                    .collect::<PyResult<_>>()?;
                converted.into_py_any(py)?
            }
            serde_json::Value::Object(_) => json_to_dict(py, v)?.into_py_any(py)?,
        })
    }
    let dict = PyDict::new(py);
    let serde_json::Value::Object(map) = value else {
        return Err(PyValueError::new_err("expected a JSON object"));
    };
    for (k, v) in map {
        dict.set_item(k, convert(py, v)?)?;
    }
    Ok(dict.into())
}

#[pymodule]
fn prefpoe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gaussian_log_prob, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_poe_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(categorical_log_prob, m)?)?;
    m.add_function(wrap_pyfunction!(categorical_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(categorical_kl, m)?)?;
    m.add_function(wrap_pyfunction!(categorical_poe_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(boltzmann_target, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gae, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(verify_suite, m)?)?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyAgent>()?;
    Ok(())
}
