//! Generalized advantage estimation and batch normalization.
//!
//! The trainer folds truncation bootstraps into the reward stream before
//! calling [`compute_gae`], so `dones` here marks every episode boundary and
//! `values[T]` is the bootstrap value of the state after the last step.

use crate::error::{Error, Result};

/// Advantages and value-regression targets for one rollout stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Backward GAE recursion:
/// δ_t = r_t + γ·(1−done_t)·V_{t+1} − V_t,
/// A_t = δ_t + γλ·(1−done_t)·A_{t+1}, returns_t = A_t + V_t.
///
/// `values` must hold T+1 entries; index T is the bootstrap value.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lam: f64,
) -> Result<AdvantageBatch> {
    let t_len = rewards.len();
    if dones.len() != t_len {
        return Err(Error::ShapeMismatch {
            op: "compute_gae",
            lhs: vec![t_len],
            rhs: vec![dones.len()],
        });
    }
    if values.len() != t_len + 1 {
        return Err(Error::ShapeMismatch {
            op: "compute_gae",
            lhs: vec![t_len + 1],
            rhs: vec![values.len()],
        });
    }
    let mut advantages = vec![0.0; t_len];
    let mut returns = vec![0.0; t_len];
    let mut next_adv = 0.0;
    for t in (0..t_len).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * not_done * values[t + 1] - values[t];
        next_adv = delta + gamma * lam * not_done * next_adv;
        advantages[t] = next_adv;
        returns[t] = next_adv + values[t];
    }
    Ok(AdvantageBatch {
        advantages,
        returns,
    })
}

/// `(a − mean) / (std + 1e-8)` with population std. A single-element batch
/// normalizes to zeros.
pub fn normalize(adv: &[f64]) -> Result<Vec<f64>> {
    if adv.is_empty() {
        return Err(Error::invalid("cannot normalize an empty batch"));
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_terminal_step() {
        let batch = compute_gae(&[1.0], &[0.0, 0.0], &[true], 0.99, 0.95).unwrap();
        assert_eq!(batch.advantages, vec![1.0]);
        assert_eq!(batch.returns, vec![1.0]);
    }

    #[test]
    fn two_step_hand_recursion() {
        let batch = compute_gae(
            &[1.0, 1.0],
            &[0.5, 0.25, 123.0], // bootstrap masked by the terminal flag
            &[false, true],
            0.99,
            0.95,
        )
        .unwrap();
        let a1 = 1.0 - 0.25;
        let a0 = (1.0 + 0.99 * 0.25 - 0.5) + 0.99 * 0.95 * a1;
        assert!((batch.advantages[1] - a1).abs() < 1e-12);
        assert!((batch.advantages[0] - a0).abs() < 1e-12);
        assert!((batch.advantages[0] - 1.4529).abs() < 1e-4);
    }

    #[test]
    fn lambda_zero_reduces_to_td_residuals() {
        let rewards = [0.3, -0.1, 0.7, 0.2];
        let values = [0.5, 0.1, -0.2, 0.4, 0.9];
        let dones = [false, false, true, false];
        let batch = compute_gae(&rewards, &values, &dones, 0.98, 0.0).unwrap();
        for t in 0..rewards.len() {
            let not_done = if dones[t] { 0.0 } else { 1.0 };
            let delta = rewards[t] + 0.98 * not_done * values[t + 1] - values[t];
            assert!((batch.advantages[t] - delta).abs() < 1e-15);
        }
    }

    #[test]
    fn done_blocks_credit_flow() {
        // High reward at t=1 must not leak into t=0 across the boundary.
        let with_boundary =
            compute_gae(&[0.0, 100.0], &[0.0, 0.0, 0.0], &[true, true], 0.99, 0.95).unwrap();
        assert_eq!(with_boundary.advantages[0], 0.0);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(compute_gae(&[1.0], &[0.0, 0.0], &[true, false], 0.99, 0.95).is_err());
        assert!(compute_gae(&[1.0, 1.0], &[0.0, 0.0], &[true, true], 0.99, 0.95).is_err());
    }

    #[test]
    fn normalize_constant_array_is_zeros() {
        let out = normalize(&[3.3; 7]).unwrap();
        // Up to float residue of the mean: (a - mean) ~ 1e-16, / 1e-8.
        assert!(out.iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn normalize_near_fixed_point() {
        let out = normalize(&[1.0, -1.0]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-7);
        assert!((out[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn normalize_single_element_is_zero() {
        assert_eq!(normalize(&[42.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn normalized_moments_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.random_range(8..200);
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let out = normalize(&data).unwrap();
            let mean = out.iter().sum::<f64>() / n as f64;
            let std = (out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
            assert!(mean.abs() < 1e-6);
            assert!((std - 1.0).abs() < 1e-4);
        }
    }
}
