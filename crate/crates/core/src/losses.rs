//! Objective terms: PPO clipped surrogate, clipped value regression,
//! advantage-guided preference loss, consistency KL, and their weighted total.
//!
//! Batch inputs are rank-1 tensors (one entry per transition). Targets such
//! as old log-probs, normalized advantages, and value snapshots must already
//! be detached; the constructors reject differentiable targets to keep the
//! gradient paths honest.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::distributions::TensorDist;
use crate::error::{Error, Result};

/// Coefficients of the total objective.
///
/// `beta1` scales advantage guidance and `alpha` entropy regularization in
/// the preference loss; their ratio sets the Boltzmann temperature. `w_pref`
/// and `w_cons` weight the auxiliary terms against the PPO loss.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta1: f64,
    pub alpha: f64,
    pub w_pref: f64,
    pub w_cons: f64,
    pub clip_coef: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 0.2,
            alpha: 0.2,
            w_pref: 0.05,
            w_cons: 0.1,
            clip_coef: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("beta1", self.beta1),
            ("alpha", self.alpha),
            ("w_pref", self.w_pref),
            ("w_cons", self.w_cons),
            ("clip_coef", self.clip_coef),
            ("vf_coef", self.vf_coef),
            ("ent_coef", self.ent_coef),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.beta1 <= 0.0 || self.alpha <= 0.0 {
            return Err(Error::Config(
                "beta1 and alpha must be positive (temperature ratio alpha/beta1)".into(),
            ));
        }
        Ok(())
    }
}

fn check_lengths(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn require_detached(op: &'static str, name: &str, t: &Tensor) -> Result<()> {
    if t.requires_grad() {
        Err(Error::invalid(format!("{op}: {name} must be detached")))
    } else {
        Ok(())
    }
}

/// mean over the batch of −min(ρ·A, clip(ρ, 1−ε, 1+ε)·A), ρ = exp(logp_new − logp_old).
pub fn ppo_clip_loss(
    logp_new: &Tensor,
    logp_old: &Tensor,
    a_norm: &Tensor,
    clip: f64,
) -> Result<Tensor> {
    check_lengths("ppo_clip_loss", logp_new, logp_old)?;
    check_lengths("ppo_clip_loss", logp_new, a_norm)?;
    require_detached("ppo_clip_loss", "logp_old", logp_old)?;
    require_detached("ppo_clip_loss", "a_norm", a_norm)?;
    let ratio = logp_new.sub(logp_old)?.exp();
    let unclipped = ratio.mul(a_norm)?;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip)?.mul(a_norm)?;
    Ok(unclipped.min_elem(&clipped)?.neg().mean())
}

/// 0.5 · mean(max((v−R)², (v_old + clip(v−v_old, −ε, ε) − R)²)); with
/// `clip = None` the unclipped 0.5 · mean((v−R)²).
pub fn value_loss(
    v_pred: &Tensor,
    returns: &Tensor,
    v_old: &Tensor,
    clip: Option<f64>,
) -> Result<Tensor> {
    check_lengths("value_loss", v_pred, returns)?;
    check_lengths("value_loss", v_pred, v_old)?;
    require_detached("value_loss", "returns", returns)?;
    require_detached("value_loss", "v_old", v_old)?;
    let err_sq = v_pred.sub(returns)?.square();
    let loss = match clip {
        Some(eps) => {
            let v_clipped = v_old.add(&v_pred.sub(v_old)?.clamp(-eps, eps)?)?;
            let clipped_sq = v_clipped.sub(returns)?.square();
            err_sq.max_elem(&clipped_sq)?
        }
        None => err_sq,
    };
    Ok(loss.mean().scale(0.5))
}

/// −β₁ · mean(a_norm ⊙ logp_pref) − α · pref_entropy.
pub fn preference_loss(
    a_norm: &Tensor,
    logp_pref: &Tensor,
    pref_entropy: &Tensor,
    beta1: f64,
    alpha: f64,
) -> Result<Tensor> {
    check_lengths("preference_loss", a_norm, logp_pref)?;
    require_detached("preference_loss", "a_norm", a_norm)?;
    let guided = a_norm.mul(logp_pref)?.mean().scale(-beta1);
    guided.add(&pref_entropy.scale(-alpha))
}

/// Batch mean of KL(fused ‖ pref), the consistency anchor.
pub fn consistency_loss(fused: &TensorDist, pref: &TensorDist) -> Result<Tensor> {
    Ok(fused.kl(pref)?.mean())
}

/// Everything [`total_loss`] combines. `pref`/`cons` are absent in plain-PPO mode.
pub struct LossParts {
    pub clip: Tensor,
    pub value: Tensor,
    pub main_entropy: Tensor,
    pub pref: Option<Tensor>,
    pub cons: Option<Tensor>,
}

/// clip + vf·value − ent·H_main + w_pref·L_pref + w_cons·L_cons.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<Tensor> {
    let mut total = parts
        .clip
        .add(&parts.value.scale(weights.vf_coef))?
        .sub(&parts.main_entropy.scale(weights.ent_coef))?;
    if let Some(pref) = &parts.pref {
        total = total.add(&pref.scale(weights.w_pref))?;
    }
    if let Some(cons) = &parts.cons {
        total = total.add(&cons.scale(weights.w_cons))?;
    }
    Ok(total)
}

/// softmax(β₁·A/α): the analytic optimum of the preference loss over a free
/// categorical (the partition function is the softmax denominator).
pub fn boltzmann_target(advantages: &[f64], beta1: f64, alpha: f64) -> Result<Vec<f64>> {
    if alpha <= 0.0 {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    let scaled: Vec<f64> = advantages.iter().map(|a| beta1 * a / alpha).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::distributions::{
        tensor_gaussian_poe_fuse, TensorCategorical, TensorGaussian,
    };

    #[test]
    fn clip_loss_identity_ratio() {
        let g = Graph::new();
        let lp = g.tensor(vec![-0.5], vec![1], true).unwrap();
        let lp_old = g.vector(vec![-0.5]);
        let adv = g.vector(vec![1.0]);
        let loss = ppo_clip_loss(&lp, &lp_old, &adv, 0.2).unwrap();
        assert!((loss.value() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_loss_clipped_positive_advantage() {
        let g = Graph::new();
        // ratio = 2 via logp difference ln 2
        let lp = g.tensor(vec![2.0_f64.ln()], vec![1], true).unwrap();
        let lp_old = g.vector(vec![0.0]);
        let adv = g.vector(vec![1.0]);
        let loss = ppo_clip_loss(&lp, &lp_old, &adv, 0.2).unwrap();
        assert!((loss.value() + 1.2).abs() < 1e-12);
    }

    #[test]
    fn clip_loss_pessimistic_branch() {
        let g = Graph::new();
        let lp = g.tensor(vec![0.5_f64.ln()], vec![1], true).unwrap();
        let lp_old = g.vector(vec![0.0]);
        let adv = g.vector(vec![-1.0]);
        let loss = ppo_clip_loss(&lp, &lp_old, &adv, 0.2).unwrap();
        assert!((loss.value() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_loss_zero_gradient_on_clipped_flat_region() {
        let g = Graph::new();
        // ratio = 2 > 1 + ε with A > 0: the clipped branch wins and is flat.
        let lp = g.tensor(vec![2.0_f64.ln()], vec![1], true).unwrap();
        let lp_old = g.vector(vec![0.0]);
        let adv = g.vector(vec![1.0]);
        ppo_clip_loss(&lp, &lp_old, &adv, 0.2)
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(lp.grad().unwrap(), vec![0.0]);

        // ratio = 0.5 < 1 − ε with A < 0: same flat region on the other side.
        let g = Graph::new();
        let lp = g.tensor(vec![0.5_f64.ln()], vec![1], true).unwrap();
        let lp_old = g.vector(vec![0.0]);
        let adv = g.vector(vec![-1.0]);
        ppo_clip_loss(&lp, &lp_old, &adv, 0.2)
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(lp.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn clip_loss_rejects_differentiable_targets() {
        let g = Graph::new();
        let lp = g.tensor(vec![0.0], vec![1], true).unwrap();
        let bad_old = g.tensor(vec![0.0], vec![1], true).unwrap();
        let adv = g.vector(vec![1.0]);
        assert!(ppo_clip_loss(&lp, &bad_old, &adv, 0.2).is_err());
    }

    #[test]
    fn value_loss_zero_at_targets_and_hand_case() {
        let g = Graph::new();
        let v = g.tensor(vec![0.3, -0.7], vec![2], true).unwrap();
        let r = g.vector(vec![0.3, -0.7]);
        let v_old = g.vector(vec![0.3, -0.7]);
        assert_eq!(value_loss(&v, &r, &v_old, Some(0.2)).unwrap().value(), 0.0);

        let g = Graph::new();
        let v = g.tensor(vec![1.0], vec![1], true).unwrap();
        let r = g.vector(vec![0.0]);
        let v_old = g.vector(vec![1.0]);
        let loss = value_loss(&v, &r, &v_old, Some(0.2)).unwrap();
        assert!((loss.value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn value_loss_translation_invariant() {
        let g = Graph::new();
        let shift = 5.5;
        let v = g.tensor(vec![1.0, 2.0], vec![2], true).unwrap();
        let r = g.vector(vec![0.5, 2.5]);
        let v_old = g.vector(vec![0.9, 2.2]);
        let base = value_loss(&v, &r, &v_old, Some(0.2)).unwrap().value();

        let v2 = g.tensor(vec![1.0 + shift, 2.0 + shift], vec![2], true).unwrap();
        let r2 = g.vector(vec![0.5 + shift, 2.5 + shift]);
        let v_old2 = g.vector(vec![0.9 + shift, 2.2 + shift]);
        let shifted = value_loss(&v2, &r2, &v_old2, Some(0.2)).unwrap().value();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn preference_loss_zero_advantages_is_pure_entropy() {
        let g = Graph::new();
        let logits = g.tensor(vec![0.4, -0.2, 0.1], vec![3], true).unwrap();
        let cat = TensorCategorical::new(logits).unwrap();
        let a = g.vector(vec![0.0; 3]);
        let lp = cat.log_softmax().unwrap();
        let h = cat.entropy().unwrap();
        let (beta1, alpha) = (0.2, 0.3);
        let loss = preference_loss(&a, &lp, &h, beta1, alpha).unwrap();
        assert!((loss.value() + alpha * h.value()).abs() < 1e-14);
    }

    #[test]
    fn consistency_loss_zero_for_identical_and_nonnegative() {
        let g = Graph::new();
        let mk = |m: Vec<f64>, l: Vec<f64>| {
            TensorGaussian::new(g.vector(m), g.vector(l)).unwrap()
        };
        let p = TensorDist::Gaussian(mk(vec![0.1, 0.4], vec![-0.3, 0.2]));
        assert!(consistency_loss(&p, &p).unwrap().value().abs() < 1e-14);

        let q = TensorDist::Gaussian(mk(vec![0.5, -0.4], vec![0.1, -0.2]));
        assert!(consistency_loss(&p, &q).unwrap().value() >= 0.0);
    }

    #[test]
    fn consistency_decreases_as_lambda_grows() {
        // Over the configured λ range (0, 1], a sharper preference expert
        // pulls the fused distribution toward itself, so the consistency KL
        // shrinks as λ grows. (Past λ = 1 the fused variance drops below the
        // preference variance and the KL turns back up; that regime is
        // outside the fusion-weight range.)
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let g = Graph::new();
            let d = rng.random_range(1..=3);
            let mm: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ml: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
            let pm: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pl: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..-1.0)).collect();
            let main = TensorGaussian::new(g.vector(mm), g.vector(ml)).unwrap();
            let pref = TensorGaussian::new(g.vector(pm), g.vector(pl)).unwrap();
            let mut last = f64::INFINITY;
            for lam in [0.1, 0.2, 0.4, 0.7, 1.0] {
                let fused = tensor_gaussian_poe_fuse(&main, &pref, lam).unwrap();
                let kl = consistency_loss(
                    &TensorDist::Gaussian(fused),
                    &TensorDist::Gaussian(pref.clone()),
                )
                .unwrap()
                .value();
                assert!(kl < last, "KL should shrink as fused approaches pref");
                last = kl;
            }
        }
    }

    #[test]
    fn total_loss_degenerates_to_vanilla_ppo() {
        let g = Graph::new();
        let clip = g.scalar(0.37);
        let value = g.scalar(0.81);
        let h = g.scalar(0.55);
        let w = LossWeights {
            w_pref: 0.0,
            w_cons: 0.0,
            ..LossWeights::default()
        };
        let parts = LossParts {
            clip: clip.clone(),
            value: value.clone(),
            main_entropy: h.clone(),
            pref: None,
            cons: None,
        };
        let total = total_loss(&parts, &w).unwrap().value();
        let vanilla = 0.37 + w.vf_coef * 0.81 - w.ent_coef * 0.55;
        assert!((total - vanilla).abs() < 1e-15);

        // Including the aux terms with zero weights gives the same value.
        let parts2 = LossParts {
            clip,
            value,
            main_entropy: h,
            pref: Some(g.scalar(123.0)),
            cons: Some(g.scalar(-7.0)),
        };
        let total2 = total_loss(&parts2, &w).unwrap().value();
        assert!((total2 - vanilla).abs() < 1e-15);
    }

    #[test]
    fn total_loss_linear_in_w_pref() {
        let g = Graph::new();
        let parts = LossParts {
            clip: g.scalar(0.2),
            value: g.scalar(0.4),
            main_entropy: g.scalar(0.9),
            pref: Some(g.scalar(1.7)),
            cons: Some(g.scalar(0.3)),
        };
        let at = |w_pref: f64| {
            let w = LossWeights {
                w_pref,
                ..LossWeights::default()
            };
            total_loss(&parts, &w).unwrap().value()
        };
        let h = 1e-3;
        let slope = (at(0.05 + h) - at(0.05 - h)) / (2.0 * h);
        assert!((slope - 1.7).abs() < 1e-9);
    }

    #[test]
    fn boltzmann_target_uniform_and_hand_case() {
        let t = boltzmann_target(&[0.7; 5], 0.2, 0.2).unwrap();
        for p in &t {
            assert!((p - 0.2).abs() < 1e-12);
        }

        let t = boltzmann_target(&[1.0, 0.0, -1.0], 0.2, 0.2).unwrap();
        let e = std::f64::consts::E;
        let z = e + 1.0 + 1.0 / e;
        assert!((t[0] - e / z).abs() < 1e-12);
        assert!((t[0] - 0.665).abs() < 1e-3);
        assert!((t[1] - 0.245).abs() < 1e-3);
        assert!((t[2] - 0.090).abs() < 1e-3);
    }

    #[test]
    fn boltzmann_target_argmax_invariant_and_flattens() {
        let adv = [0.3, -1.2, 2.0, 0.9];
        let sharp = boltzmann_target(&adv, 1.0, 0.1).unwrap();
        let flat = boltzmann_target(&adv, 1.0, 100.0).unwrap();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&sharp), 2);
        assert_eq!(argmax(&flat), 2);
        for p in &flat {
            assert!((p - 0.25).abs() < 0.01, "high temperature approaches uniform");
        }
    }

    #[test]
    fn doubling_beta_and_alpha_leaves_target_unchanged() {
        let adv = [0.5, -0.3, 1.1];
        let a = boltzmann_target(&adv, 0.2, 0.3).unwrap();
        let b = boltzmann_target(&adv, 0.4, 0.6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn default_weights_sit_in_documented_ranges() {
        let w = LossWeights::default();
        w.validate().unwrap();
        assert!((0.1..=0.4).contains(&w.beta1));
        assert!((0.1..=0.4).contains(&w.alpha));
        assert!((0.005..=0.2).contains(&w.w_pref));
        assert!((0.02..=0.2).contains(&w.w_cons));
        assert_eq!(w.clip_coef, 0.2);
        assert_eq!(w.vf_coef, 0.5);
        assert_eq!(w.ent_coef, 0.05);
    }
}
