//! Distribution algebra for diagonal Gaussians and categoricals.
//!
//! Two parallel representations:
//!
//! * [`DiagGaussian`] / [`Categorical`] hold plain `f64` parameters and
//!   provide sampling plus closed-form log-prob / entropy / KL / fusion.
//!   These back rollout collection and evaluation, where no gradients are
//!   needed.
//! * [`TensorGaussian`] / [`TensorCategorical`] hold graph tensors with the
//!   same formulas expressed as differentiable ops, shaped `[d]`/`[A]` for a
//!   single state or `[B, d]`/`[B, A]` for a batch. These back the losses.
//!
//! Product-of-experts fusion adds precisions for Gaussians and adds
//! λ-weighted logits for categoricals; both routes are cross-checked against
//! a grid-integration oracle in the verify module.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tensor, LN_2PI};
use crate::error::{Error, Result};

/// Lower clamp for log standard deviations produced by network heads.
pub const LOG_STD_MIN: f64 = -5.0;
/// Upper clamp for log standard deviations produced by network heads.
pub const LOG_STD_MAX: f64 = 2.0;

fn check_dims(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: vec![a],
            rhs: vec![b],
        })
    }
}

// ---------------------------------------------------------------------------
// Value-level records
// ---------------------------------------------------------------------------

/// Diagonal Gaussian action distribution: per-dimension mean and log-std.
///
/// Head outputs are clamped into `[LOG_STD_MIN, LOG_STD_MAX]`; fusion results
/// stay strictly positive by construction and may land slightly below the
/// lower clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        check_dims("diag_gaussian", mean.len(), log_std.len())?;
        if mean.is_empty() {
            return Err(Error::invalid("gaussian dimension must be >= 1"));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite gaussian parameters"));
        }
        Ok(DiagGaussian { mean, log_std })
    }

    /// Constructor for raw head outputs: clamps the log-std into range.
    pub fn clamped(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Self::new(mean, log_std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| (2.0 * v).exp()).collect()
    }

    /// Σᵢ −½·ln(2π) − log σᵢ − (aᵢ−μᵢ)²/(2σᵢ²)
    pub fn log_prob(&self, action: &[f64]) -> Result<f64> {
        check_dims("gaussian_log_prob", self.dim(), action.len())?;
        let mut total = 0.0;
        for i in 0..self.dim() {
            let ls = self.log_std[i];
            let diff = action[i] - self.mean[i];
            let sq = diff * diff;
            let var = (2.0 * ls).exp();
            let quad = sq / (2.0 * var);
            total += (-ls - quad) + (-0.5 * LN_2PI);
        }
        Ok(total)
    }

    /// ½ Σᵢ log(2π e σᵢ²)
    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|ls| ls + 0.5 * (LN_2PI + 1.0))
            .sum()
    }

    /// Σᵢ log(σ_qᵢ/σ_pᵢ) + (σ_pᵢ² + (μ_pᵢ−μ_qᵢ)²)/(2σ_qᵢ²) − ½
    pub fn kl(&self, q: &DiagGaussian) -> Result<f64> {
        check_dims("gaussian_kl", self.dim(), q.dim())?;
        let mut total = 0.0;
        for i in 0..self.dim() {
            let (lsp, lsq) = (self.log_std[i], q.log_std[i]);
            let var_p = (2.0 * lsp).exp();
            let var_q = (2.0 * lsq).exp();
            let dm = self.mean[i] - q.mean[i];
            total += (lsq - lsp) + (var_p + dm * dm) / (2.0 * var_q) - 0.5;
        }
        Ok(total)
    }

    /// `a = μ + σ ⊙ z` with `z ~ N(0, I)` from the supplied generator.
    /// Returns the action together with its log-probability.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let action: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| {
                let z: f64 = rng.sample(StandardNormal);
                m + ls.exp() * z
            })
            .collect();
        let lp = self.log_prob(&action).expect("dims match by construction");
        (action, lp)
    }

    /// The distribution mode (deterministic action).
    pub fn mode(&self) -> Vec<f64> {
        self.mean.clone()
    }
}

/// Per-dimension precision form of the product-of-experts fusion:
/// 1/σ²_f = 1/σ²_main + λ/σ²_pref, μ_f = σ²_f (μ_m/σ²_m + λ μ_p/σ²_p).
pub fn gaussian_poe_fuse(
    main: &DiagGaussian,
    pref: &DiagGaussian,
    lambda_pref: f64,
) -> Result<DiagGaussian> {
    check_dims("gaussian_poe_fuse", main.dim(), pref.dim())?;
    if lambda_pref <= 0.0 {
        return Err(Error::invalid(format!(
            "lambda_pref must be positive for gaussian fusion, got {lambda_pref}"
        )));
    }
    let d = main.dim();
    let mut mean = vec![0.0; d];
    let mut log_std = vec![0.0; d];
    for i in 0..d {
        let prec_m = (-2.0 * main.log_std[i]).exp();
        let prec_p = (-2.0 * pref.log_std[i]).exp();
        let prec_f = prec_m + lambda_pref * prec_p;
        let var_f = 1.0 / prec_f;
        mean[i] = var_f * (main.mean[i] * prec_m + pref.mean[i] * prec_p * lambda_pref);
        log_std[i] = var_f.ln() * 0.5;
    }
    DiagGaussian::new(mean, log_std)
}

/// Parameter-wise average of mean and σ; the ablation baseline, not PoE.
pub fn gaussian_linear_fuse(
    main: &DiagGaussian,
    pref: &DiagGaussian,
    lambda_pref: f64,
) -> Result<DiagGaussian> {
    check_dims("gaussian_linear_fuse", main.dim(), pref.dim())?;
    let d = main.dim();
    let mut mean = vec![0.0; d];
    let mut log_std = vec![0.0; d];
    for i in 0..d {
        mean[i] = (1.0 - lambda_pref) * main.mean[i] + lambda_pref * pref.mean[i];
        let sigma =
            (1.0 - lambda_pref) * main.log_std[i].exp() + lambda_pref * pref.log_std[i].exp();
        log_std[i] = sigma.ln();
    }
    DiagGaussian::new(mean, log_std)
}

/// Categorical action distribution over unnormalized logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    pub logits: Vec<f64>,
}

impl Categorical {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::invalid("categorical needs >= 2 actions"));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logits"));
        }
        Ok(Categorical { logits })
    }

    pub fn n_actions(&self) -> usize {
        self.logits.len()
    }

    fn log_sum_exp(&self) -> f64 {
        let m = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = self.logits.iter().map(|&x| (x - m).exp()).sum();
        m + s.ln()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let lse = self.log_sum_exp();
        self.logits.iter().map(|&x| x - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().iter().map(|&lp| lp.exp()).collect()
    }

    pub fn log_prob(&self, action: usize) -> Result<f64> {
        if action >= self.n_actions() {
            return Err(Error::IndexOutOfRange {
                index: action,
                size: self.n_actions(),
            });
        }
        Ok(self.logits[action] - self.log_sum_exp())
    }

    /// −Σ πₐ log πₐ
    pub fn entropy(&self) -> f64 {
        let lps = self.log_probs();
        -lps.iter().map(|&lp| lp.exp() * lp).sum::<f64>()
    }

    /// Σ pₐ (log pₐ − log qₐ)
    pub fn kl(&self, q: &Categorical) -> Result<f64> {
        check_dims("categorical_kl", self.n_actions(), q.n_actions())?;
        let lp = self.log_probs();
        let lq = q.log_probs();
        Ok(lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum())
    }

    /// Inverse-CDF draw over the softmax probabilities.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, f64) {
        let probs = self.probs();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = probs.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                idx = i;
                break;
            }
        }
        let lp = self.log_prob(idx).expect("index in range");
        (idx, lp)
    }

    /// Argmax action (deterministic).
    pub fn mode(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty")
    }
}

/// Logit-space product-of-experts: fused logits = logits_main + λ·logits_pref,
/// identical to multiplying probabilities `π_main · π_pref^λ` and renormalizing.
pub fn categorical_poe_fuse(
    main: &Categorical,
    pref: &Categorical,
    lambda_pref: f64,
) -> Result<Categorical> {
    check_dims("categorical_poe_fuse", main.n_actions(), pref.n_actions())?;
    if lambda_pref < 0.0 {
        return Err(Error::invalid(format!(
            "lambda_pref must be non-negative, got {lambda_pref}"
        )));
    }
    let logits = main
        .logits
        .iter()
        .zip(&pref.logits)
        .map(|(&m, &p)| m + lambda_pref * p)
        .collect();
    Categorical::new(logits)
}

/// Logit-space linear fusion baseline.
pub fn categorical_linear_fuse(
    main: &Categorical,
    pref: &Categorical,
    lambda_pref: f64,
) -> Result<Categorical> {
    check_dims("categorical_linear_fuse", main.n_actions(), pref.n_actions())?;
    let logits = main
        .logits
        .iter()
        .zip(&pref.logits)
        .map(|(&m, &p)| (1.0 - lambda_pref) * m + lambda_pref * p)
        .collect();
    Categorical::new(logits)
}

// ---------------------------------------------------------------------------
// Graph-level distributions
// ---------------------------------------------------------------------------

/// Differentiable diagonal Gaussian; `mean`/`log_std` are `[d]` or `[B, d]`.
#[derive(Clone, Debug)]
pub struct TensorGaussian {
    pub mean: Tensor,
    pub log_std: Tensor,
}

impl TensorGaussian {
    pub fn new(mean: Tensor, log_std: Tensor) -> Result<Self> {
        if mean.shape() != log_std.shape() {
            return Err(Error::ShapeMismatch {
                op: "tensor_gaussian",
                lhs: mean.shape(),
                rhs: log_std.shape(),
            });
        }
        Ok(TensorGaussian { mean, log_std })
    }

    /// Clamps raw head output into the legal log-std range.
    pub fn clamped(mean: Tensor, log_std: Tensor) -> Result<Self> {
        let log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)?;
        Self::new(mean, log_std)
    }

    /// Log-probabilities of `actions` (same shape as mean), per state.
    pub fn log_prob(&self, actions: &Tensor) -> Result<Tensor> {
        let diff = actions.sub(&self.mean)?;
        let sq = diff.square();
        let var = self.log_std.scale(2.0).exp();
        let quad = sq.div(&var.scale(2.0))?;
        let terms = self
            .log_std
            .neg()
            .sub(&quad)?
            .add_const(-0.5 * LN_2PI);
        terms.sum_last()
    }

    /// Per-state entropy: Σᵢ ½·ln(2πe) + log σᵢ.
    pub fn entropy(&self) -> Result<Tensor> {
        self.log_std.add_const(0.5 * (LN_2PI + 1.0)).sum_last()
    }

    /// Per-state KL(self ‖ q), closed form.
    pub fn kl(&self, q: &TensorGaussian) -> Result<Tensor> {
        let var_p = self.log_std.scale(2.0).exp();
        let var_q = q.log_std.scale(2.0).exp();
        let dm = self.mean.sub(&q.mean)?;
        let num = var_p.add(&dm.square())?;
        let frac = num.div(&var_q.scale(2.0))?;
        let terms = q
            .log_std
            .sub(&self.log_std)?
            .add(&frac)?
            .add_const(-0.5);
        terms.sum_last()
    }

    /// Detached value-level rows (one record per batch row).
    pub fn rows(&self) -> Result<Vec<DiagGaussian>> {
        rows_of(&self.mean, &self.log_std, DiagGaussian::new)
    }
}

/// Differentiable product-of-experts fusion (precision form of the Gaussian
/// product), gradient flows through both experts.
pub fn tensor_gaussian_poe_fuse(
    main: &TensorGaussian,
    pref: &TensorGaussian,
    lambda_pref: f64,
) -> Result<TensorGaussian> {
    if lambda_pref <= 0.0 {
        return Err(Error::invalid(format!(
            "lambda_pref must be positive for gaussian fusion, got {lambda_pref}"
        )));
    }
    let prec_m = main.log_std.scale(-2.0).exp();
    let prec_p = pref.log_std.scale(-2.0).exp();
    let prec_f = prec_m.add(&prec_p.scale(lambda_pref))?;
    let one = main.mean.graph().scalar(1.0);
    let var_f = one.div(&prec_f)?;
    let weighted = main
        .mean
        .mul(&prec_m)?
        .add(&pref.mean.mul(&prec_p)?.scale(lambda_pref))?;
    let mean_f = var_f.mul(&weighted)?;
    let log_std_f = var_f.log()?.scale(0.5);
    TensorGaussian::new(mean_f, log_std_f)
}

/// Differentiable parameter-wise linear fusion (ablation baseline).
pub fn tensor_gaussian_linear_fuse(
    main: &TensorGaussian,
    pref: &TensorGaussian,
    lambda_pref: f64,
) -> Result<TensorGaussian> {
    let mean = main
        .mean
        .scale(1.0 - lambda_pref)
        .add(&pref.mean.scale(lambda_pref))?;
    let sigma = main
        .log_std
        .exp()
        .scale(1.0 - lambda_pref)
        .add(&pref.log_std.exp().scale(lambda_pref))?;
    let log_std = sigma.log()?;
    TensorGaussian::new(mean, log_std)
}

/// Differentiable categorical; `logits` are `[A]` or `[B, A]`.
#[derive(Clone, Debug)]
pub struct TensorCategorical {
    pub logits: Tensor,
}

impl TensorCategorical {
    pub fn new(logits: Tensor) -> Result<Self> {
        let shape = logits.shape();
        let last = *shape.last().ok_or_else(|| Error::BadShape {
            op: "tensor_categorical",
            expected: "rank >= 1".into(),
            got: shape.clone(),
        })?;
        if last < 2 {
            return Err(Error::invalid("categorical needs >= 2 actions"));
        }
        Ok(TensorCategorical { logits })
    }

    /// Log-softmax of the logits, same shape.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let lse = self.logits.log_sum_exp()?;
        if self.logits.shape().len() == 2 {
            self.logits.sub_col(&lse)
        } else {
            self.logits.sub(&lse)
        }
    }

    pub fn log_prob(&self, actions: &[usize]) -> Result<Tensor> {
        self.log_softmax()?.gather(actions)
    }

    pub fn entropy(&self) -> Result<Tensor> {
        let lp = self.log_softmax()?;
        let probs = lp.exp();
        Ok(probs.mul(&lp)?.sum_last()?.neg())
    }

    pub fn kl(&self, q: &TensorCategorical) -> Result<Tensor> {
        if self.logits.shape() != q.logits.shape() {
            return Err(Error::ShapeMismatch {
                op: "tensor_categorical_kl",
                lhs: self.logits.shape(),
                rhs: q.logits.shape(),
            });
        }
        let lp = self.log_softmax()?;
        let lq = q.log_softmax()?;
        lp.exp().mul(&lp.sub(&lq)?)?.sum_last()
    }

    pub fn rows(&self) -> Result<Vec<Categorical>> {
        let shape = self.logits.shape();
        let data = self.logits.data();
        let last = *shape.last().unwrap();
        data.chunks(last).map(|c| Categorical::new(c.to_vec())).collect()
    }
}

pub fn tensor_categorical_poe_fuse(
    main: &TensorCategorical,
    pref: &TensorCategorical,
    lambda_pref: f64,
) -> Result<TensorCategorical> {
    if lambda_pref < 0.0 {
        return Err(Error::invalid(format!(
            "lambda_pref must be non-negative, got {lambda_pref}"
        )));
    }
    let logits = main.logits.add(&pref.logits.scale(lambda_pref))?;
    TensorCategorical::new(logits)
}

pub fn tensor_categorical_linear_fuse(
    main: &TensorCategorical,
    pref: &TensorCategorical,
    lambda_pref: f64,
) -> Result<TensorCategorical> {
    let logits = main
        .logits
        .scale(1.0 - lambda_pref)
        .add(&pref.logits.scale(lambda_pref))?;
    TensorCategorical::new(logits)
}

/// Either distribution family, as produced by a network forward pass.
#[derive(Clone, Debug)]
pub enum TensorDist {
    Gaussian(TensorGaussian),
    Categorical(TensorCategorical),
}

impl TensorDist {
    pub fn entropy(&self) -> Result<Tensor> {
        match self {
            TensorDist::Gaussian(d) => d.entropy(),
            TensorDist::Categorical(d) => d.entropy(),
        }
    }

    pub fn kl(&self, q: &TensorDist) -> Result<Tensor> {
        match (self, q) {
            (TensorDist::Gaussian(p), TensorDist::Gaussian(q)) => p.kl(q),
            (TensorDist::Categorical(p), TensorDist::Categorical(q)) => p.kl(q),
            _ => Err(Error::FamilyMismatch(
                "kl between gaussian and categorical".into(),
            )),
        }
    }
}

fn rows_of<T>(
    mean: &Tensor,
    log_std: &Tensor,
    make: fn(Vec<f64>, Vec<f64>) -> Result<T>,
) -> Result<Vec<T>> {
    let shape = mean.shape();
    let last = *shape.last().expect("validated rank >= 1");
    let m = mean.data();
    let s = log_std.data();
    m.chunks(last)
        .zip(s.chunks(last))
        .map(|(mc, sc)| make(mc.to_vec(), sc.to_vec()))
        .collect()
}
