//! Least-squares adversarial objectives and the combined generator loss.
//!
//! Patch scores are averaged over the score map (and the batch), so loss
//! magnitudes do not depend on resolution.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::ggd::GgdPrediction;
use crate::{Error, Result};

/// `(λ₁, λ₂)` weighting of the fidelity and adversarial generator terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.lambda1) || !ok(self.lambda2) || (self.lambda1 == 0.0 && self.lambda2 == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative and not both zero, got ({}, {})",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

fn check_scores(scores: &[f32], what: &'static str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Domain(format!("empty {what} score map")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Mean of `(s − target)²` and its gradient with respect to each score.
pub fn l2_to_target(scores: &[f32], target: f64) -> (f64, Vec<f32>) {
    let n = scores.len() as f64;
    let loss = scores
        .iter()
        .map(|&s| (s as f64 - target).powi(2))
        .sum::<f64>()
        / n;
    let grad = scores
        .iter()
        .map(|&s| (2.0 * (s as f64 - target) / n) as f32)
        .collect();
    (loss, grad)
}

/// Generator adversarial loss: mean squared deviation of fake scores from 1.
pub fn gen_adv_loss(fake_scores: &[f32]) -> Result<f64> {
    check_scores(fake_scores, "fake")?;
    Ok(l2_to_target(fake_scores, 1.0).0)
}

pub fn gen_adv_loss_with_grad(fake_scores: &[f32]) -> Result<(f64, Vec<f32>)> {
    check_scores(fake_scores, "fake")?;
    Ok(l2_to_target(fake_scores, 1.0))
}

/// Discriminator loss: `mean((real − 1)²) + mean(fake²)`.
pub fn disc_loss(real_scores: &[f32], fake_scores: &[f32]) -> Result<f64> {
    Ok(disc_loss_with_grad(real_scores, fake_scores)?.0)
}

/// Discriminator loss with gradients with respect to real and fake scores.
pub fn disc_loss_with_grad(
    real_scores: &[f32],
    fake_scores: &[f32],
) -> Result<(f64, Vec<f32>, Vec<f32>)> {
    check_scores(real_scores, "real")?;
    check_scores(fake_scores, "fake")?;
    let (lr, gr) = l2_to_target(real_scores, 1.0);
    let (lf, gf) = l2_to_target(fake_scores, 0.0);
    Ok((lr + lf, gr, gf))
}

/// Components of the generator objective for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenLossBreakdown {
    pub total: f64,
    pub fidelity: f64,
    pub adversarial: f64,
}

/// `λ₁·fidelity + λ₂·adversarial`.
pub fn gen_total_loss(
    pred: &GgdPrediction,
    target: &Array2<f64>,
    fake_scores: &[f32],
    weights: LossWeights,
) -> Result<GenLossBreakdown> {
    let fidelity = crate::ggd::ggd_nll(pred, target)?;
    let adversarial = gen_adv_loss(fake_scores)?;
    Ok(combine(fidelity, adversarial, weights))
}

pub fn combine(fidelity: f64, adversarial: f64, w: LossWeights) -> GenLossBreakdown {
    GenLossBreakdown {
        total: w.lambda1 * fidelity + w.lambda2 * adversarial,
        fidelity,
        adversarial,
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::ggd::BetaClamp;

    #[test]
    fn adversarial_constants() {
        assert_eq!(gen_adv_loss(&[1.0; 4]).unwrap(), 0.0);
        assert_eq!(gen_adv_loss(&[0.0; 4]).unwrap(), 1.0);
        assert_eq!(gen_adv_loss(&[0.5; 4]).unwrap(), 0.25);
        assert!(gen_adv_loss(&[]).is_err());
        assert!(gen_adv_loss(&[f32::NAN]).is_err());
    }

    #[test]
    fn discriminator_constants() {
        assert_eq!(disc_loss(&[1.0; 3], &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(disc_loss(&[0.5; 3], &[0.5; 3]).unwrap(), 0.5);
        assert_eq!(disc_loss(&[0.0; 3], &[1.0; 3]).unwrap(), 2.0);
        assert!(disc_loss(&[], &[0.0]).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = combine(2.0, 1.0, LossWeights::default());
        assert!((b.total - 2.001).abs() < 1e-12);
        let pred = GgdPrediction::new(
            array![[0.2, -0.1]],
            array![[0.5, 0.8]],
            array![[1.5, 2.5]],
            BetaClamp::default(),
        )
        .unwrap();
        let t = array![[0.0, 0.3]];
        let s = [0.3f32, 0.9, -0.2];
        let nll = crate::ggd::ggd_nll(&pred, &t).unwrap();
        let adv = gen_adv_loss(&s).unwrap();
        let w10 = LossWeights { lambda1: 1.0, lambda2: 0.0 };
        let w01 = LossWeights { lambda1: 0.0, lambda2: 1.0 };
        assert_eq!(gen_total_loss(&pred, &t, &s, w10).unwrap().total, nll);
        assert_eq!(gen_total_loss(&pred, &t, &s, w01).unwrap().total, adv);
        // Linearity under scaling of each weight.
        let w = LossWeights { lambda1: 3.0, lambda2: 0.5 };
        let got = gen_total_loss(&pred, &t, &s, w).unwrap().total;
        assert!((got - (3.0 * nll + 0.5 * adv)).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights { lambda1: 0.0, lambda2: 0.0 }.validate().is_err());
        assert!(LossWeights { lambda1: -1.0, lambda2: 0.0 }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
