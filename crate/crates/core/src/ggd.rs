//! Zero-mean generalized Gaussian residual model.
//!
//! A residual `ε = mean − target` at pixel `j` is modelled as
//! `GGD(ε; 0, α_j, β_j)` with density
//! `β / (2αΓ(1/β)) · exp(−(|ε|/α)^β)`. The per-pixel fidelity loss is
//! `(|ε|/α)^β − ln(β/α) + ln Γ(1/β)`, which is the negative log-density
//! minus `ln 2`.

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::special::{digamma_unchecked, ln_gamma_unchecked};
use crate::{Error, Result};

/// Lower bound applied to α inside the loss.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// Admissible range for the shape parameter β.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaClamp {
    pub min: f64,
    pub max: f64,
}

impl Default for BetaClamp {
    fn default() -> Self {
        Self { min: 0.2, max: 5.0 }
    }
}

impl BetaClamp {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "beta clamp must satisfy 0 < min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, beta: f64) -> bool {
        beta >= self.min && beta <= self.max
    }
}

/// Per-pixel (mean, α, β) maps produced by a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GgdPrediction {
    pub mean: Array2<f64>,
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
}

impl GgdPrediction {
    /// Builds a prediction after checking shapes, finiteness, `α > 0` and the β clamp.
    pub fn new(
        mean: Array2<f64>,
        alpha: Array2<f64>,
        beta: Array2<f64>,
        clamp: BetaClamp,
    ) -> Result<Self> {
        let pred = Self { mean, alpha, beta };
        pred.validate(clamp)?;
        Ok(pred)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mean.dim()
    }

    pub fn validate(&self, clamp: BetaClamp) -> Result<()> {
        let (h, w) = self.mean.dim();
        for m in [&self.alpha, &self.beta] {
            if m.dim() != (h, w) {
                let (mh, mw) = m.dim();
                return Err(Error::shape(&[h, w], &[mh, mw]));
            }
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean"));
        }
        if self.alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("alpha"));
        }
        if self.beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("beta"));
        }
        if let Some(a) = self.alpha.iter().find(|&&a| a <= 0.0) {
            return Err(Error::Domain(format!("alpha must be positive, found {a}")));
        }
        if let Some(b) = self.beta.iter().find(|&&b| !clamp.contains(b)) {
            return Err(Error::Domain(format!(
                "beta {b} outside clamp [{}, {}]",
                clamp.min, clamp.max
            )));
        }
        Ok(())
    }

    /// Standard deviation map of the residual model.
    pub fn sigma(&self) -> Array2<f64> {
        Zip::from(&self.alpha)
            .and(&self.beta)
            .map_collect(|&a, &b| sigma_unchecked(a, b))
    }
}

/// Gradients of the mean fidelity loss with respect to each prediction map.
#[derive(Debug, Clone, PartialEq)]
pub struct GgdGrad {
    pub mean: Array2<f64>,
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
}

/// Single-pixel fidelity loss for residual `eps`.
pub fn pixel_nll(eps: f64, alpha: f64, beta: f64) -> f64 {
    let a = alpha.max(ALPHA_FLOOR);
    (eps.abs() / a).powf(beta) - (beta / a).ln() + ln_gamma_unchecked(1.0 / beta)
}

/// Single-pixel loss and its partial derivatives `(dε, dα, dβ)`.
///
/// At `ε = 0` the derivative in ε is taken as zero (the subgradient), and
/// α below the floor receives no gradient.
pub fn pixel_nll_grad(eps: f64, alpha: f64, beta: f64) -> (f64, [f64; 3]) {
    let floored = alpha < ALPHA_FLOOR;
    let a = alpha.max(ALPHA_FLOOR);
    let r = eps.abs() / a;
    let inv_b = 1.0 / beta;
    let loss = r.powf(beta) - (beta / a).ln() + ln_gamma_unchecked(inv_b);
    let d_eps = if r > 0.0 {
        beta * r.powf(beta - 1.0) * eps.signum() / a
    } else {
        0.0
    };
    let d_alpha = if floored {
        0.0
    } else {
        (1.0 - beta * r.powf(beta)) / a
    };
    let r_log = if r > 0.0 { r.powf(beta) * r.ln() } else { 0.0 };
    let d_beta = r_log - inv_b - digamma_unchecked(inv_b) * inv_b * inv_b;
    (loss, [d_eps, d_alpha, d_beta])
}

fn check_target(pred: &GgdPrediction, target: &Array2<f64>) -> Result<()> {
    let (h, w) = pred.dim();
    if target.dim() != (h, w) {
        let (th, tw) = target.dim();
        return Err(Error::shape(&[h, w], &[th, tw]));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("target"));
    }
    Ok(())
}

fn check_pred_finite(pred: &GgdPrediction) -> Result<()> {
    if pred.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mean"));
    }
    if pred.alpha.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Domain("alpha must be positive and finite".into()));
    }
    if pred.beta.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Domain("beta must be positive and finite".into()));
    }
    Ok(())
}

/// Mean per-pixel fidelity loss of `pred` against `target`.
pub fn ggd_nll(pred: &GgdPrediction, target: &Array2<f64>) -> Result<f64> {
    check_target(pred, target)?;
    check_pred_finite(pred)?;
    let k = target.len() as f64;
    let mut total = 0.0;
    Zip::from(&pred.mean)
        .and(&pred.alpha)
        .and(&pred.beta)
        .and(target)
        .for_each(|&m, &a, &b, &t| total += pixel_nll(m - t, a, b));
    Ok(total / k)
}

/// Mean loss plus its gradient with respect to mean, α and β.
pub fn ggd_nll_with_grad(pred: &GgdPrediction, target: &Array2<f64>) -> Result<(f64, GgdGrad)> {
    check_target(pred, target)?;
    check_pred_finite(pred)?;
    let dim = target.dim();
    let k = target.len() as f64;
    let mut grad = GgdGrad {
        mean: Array2::zeros(dim),
        alpha: Array2::zeros(dim),
        beta: Array2::zeros(dim),
    };
    let mut total = 0.0;
    let pixels = pred
        .mean
        .iter()
        .zip(&pred.alpha)
        .zip(&pred.beta)
        .zip(target)
        .zip(grad.mean.iter_mut().zip(grad.alpha.iter_mut()).zip(grad.beta.iter_mut()));
    for ((((&m, &a), &b), &t), ((gm, ga), gb)) in pixels {
        let (l, [dm, da, db]) = pixel_nll_grad(m - t, a, b);
        total += l;
        *gm = dm / k;
        *ga = da / k;
        *gb = db / k;
    }
    Ok((total / k, grad))
}

pub(crate) fn sigma_unchecked(alpha: f64, beta: f64) -> f64 {
    alpha * gamma_ratio(beta).sqrt()
}

/// `Γ(3/β)/Γ(1/β)`, exact for the Laplace and Gaussian cases.
fn gamma_ratio(beta: f64) -> f64 {
    if beta == 1.0 {
        2.0
    } else if beta == 2.0 {
        0.5
    } else {
        (ln_gamma_unchecked(3.0 / beta) - ln_gamma_unchecked(1.0 / beta)).exp()
    }
}

/// `(σ, dσ/dα, dσ/dβ)` for one pixel.
pub(crate) fn sigma_with_grad(alpha: f64, beta: f64) -> (f64, f64, f64) {
    let s = sigma_unchecked(alpha, beta);
    let inv_b2 = 1.0 / (beta * beta);
    let dlog_db =
        0.5 * inv_b2 * (digamma_unchecked(1.0 / beta) - 3.0 * digamma_unchecked(3.0 / beta));
    (s, s / alpha, s * dlog_db)
}

/// Standard deviation of `GGD(0, α, β)`: `α·sqrt(Γ(3/β)/Γ(1/β))`.
pub fn sigma(alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::Domain(format!(
            "sigma requires alpha > 0 and beta > 0, got ({alpha}, {beta})"
        )));
    }
    Ok(sigma_unchecked(alpha, beta))
}

/// Elementwise [`sigma`] over α and β maps.
pub fn ggd_sigma(alpha: &Array2<f64>, beta: &Array2<f64>) -> Result<Array2<f64>> {
    if alpha.dim() != beta.dim() {
        let (ah, aw) = alpha.dim();
        let (bh, bw) = beta.dim();
        return Err(Error::shape(&[ah, aw], &[bh, bw]));
    }
    let mut out = Array2::zeros(alpha.dim());
    for ((o, &a), &b) in out.iter_mut().zip(alpha).zip(beta) {
        *o = sigma(a, b)?;
    }
    Ok(out)
}

/// Log-density of `GGD(eps; 0, α, β)`.
pub fn log_density(eps: f64, alpha: f64, beta: f64) -> f64 {
    (beta / (2.0 * alpha)).ln() - ln_gamma_unchecked(1.0 / beta) - (eps.abs() / alpha).powf(beta)
}

/// Draws one residual per pixel: `|ε| = α·G^{1/β}` with `G ~ Gamma(1/β, 1)` and a fair sign.
pub fn ggd_sample(alpha: &Array2<f64>, beta: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    if alpha.dim() != beta.dim() {
        let (ah, aw) = alpha.dim();
        let (bh, bw) = beta.dim();
        return Err(Error::shape(&[ah, aw], &[bh, bw]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros(alpha.dim());
    for ((o, &a), &b) in out.iter_mut().zip(alpha).zip(beta) {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Domain(format!(
                "sampling requires alpha > 0 and beta > 0, got ({a}, {b})"
            )));
        }
        let gamma = Gamma::new(1.0 / b, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
        let g: f64 = gamma.sample(&mut rng);
        let sign = if rand::Rng::random::<bool>(&mut rng) { 1.0 } else { -1.0 };
        *o = sign * a * g.powf(1.0 / b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn single(m: f64, a: f64, b: f64) -> GgdPrediction {
        GgdPrediction::new(array![[m]], array![[a]], array![[b]], BetaClamp::default()).unwrap()
    }

    #[test]
    fn zero_residual_laplace_unit_scale_is_zero() {
        let l = ggd_nll(&single(0.3, 1.0, 1.0), &array![[0.3]]).unwrap();
        assert!(l.abs() < 1e-14);
    }

    #[test]
    fn unit_residual_gaussian_shape() {
        // 1 − ln 2 + ln Γ(½), evaluated with mpmath.
        let l = ggd_nll(&single(1.0, 1.0, 2.0), &array![[0.0]]).unwrap();
        assert!((l - 0.879_217_762_364_754_8).abs() < 1e-12, "{l}");
    }

    #[test]
    fn two_pixel_mean_aggregation() {
        let l1 = ggd_nll(&single(0.5, 0.7, 1.3), &array![[0.1]]).unwrap();
        let l2 = ggd_nll(&single(-0.2, 0.2, 3.1), &array![[0.4]]).unwrap();
        let both = GgdPrediction::new(
            array![[0.5, -0.2]],
            array![[0.7, 0.2]],
            array![[1.3, 3.1]],
            BetaClamp::default(),
        )
        .unwrap();
        let l = ggd_nll(&both, &array![[0.1, 0.4]]).unwrap();
        assert!((l - (l1 + l2) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_and_nonfinite_are_rejected() {
        let p = single(0.0, 1.0, 2.0);
        assert!(matches!(ggd_nll(&p, &array![[0.0, 1.0]]), Err(Error::Shape { .. })));
        assert!(matches!(ggd_nll(&p, &array![[f64::NAN]]), Err(Error::NonFinite(_))));
        let bad = GgdPrediction {
            mean: array![[f64::INFINITY]],
            alpha: array![[1.0]],
            beta: array![[2.0]],
        };
        assert!(ggd_nll(&bad, &array![[0.0]]).is_err());
    }

    #[test]
    fn prediction_invariants_enforced() {
        let c = BetaClamp::default();
        assert!(GgdPrediction::new(array![[0.0]], array![[0.0]], array![[2.0]], c).is_err());
        assert!(GgdPrediction::new(array![[0.0]], array![[1.0]], array![[0.1]], c).is_err());
        assert!(GgdPrediction::new(array![[0.0]], array![[1.0]], array![[5.5]], c).is_err());
        assert!(GgdPrediction::new(array![[0.0, 0.0]], array![[1.0]], array![[2.0]], c).is_err());
    }

    #[test]
    fn sigma_closed_forms() {
        assert!((sigma(1.0, 2.0).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-14);
        assert!((sigma(1.0, 1.0).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-14);
        assert!((sigma(2.0, 2.0).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-14);
        assert!(sigma(0.0, 2.0).is_err());
        assert!(sigma(1.0, -1.0).is_err());
    }

    #[test]
    fn sigma_map_matches_scalar() {
        let a = array![[0.5, 1.0], [2.0, 3.0]];
        let b = array![[0.7, 1.0], [2.0, 4.0]];
        let s = ggd_sigma(&a, &b).unwrap();
        for ((&s, &a), &b) in s.iter().zip(&a).zip(&b) {
            assert_eq!(s, sigma(a, b).unwrap());
        }
        assert!(ggd_sigma(&a, &array![[1.0]]).is_err());
    }

    #[test]
    fn sigma_gradient_matches_finite_differences() {
        for (a, b) in [(0.3, 0.6), (1.0, 2.0), (2.5, 4.2)] {
            let (_, da, db) = sigma_with_grad(a, b);
            let h = 1e-6;
            let fa = (sigma_unchecked(a + h, b) - sigma_unchecked(a - h, b)) / (2.0 * h);
            let fb = (sigma_unchecked(a, b + h) - sigma_unchecked(a, b - h)) / (2.0 * h);
            assert!((da - fa).abs() < 1e-6 * fa.abs().max(1.0));
            assert!((db - fb).abs() < 1e-6 * fb.abs().max(1.0));
        }
    }

    #[test]
    fn nll_minimized_near_ml_scale_for_gaussian_shape() {
        // For β = 2 the maximizer of the likelihood in α is |r|·sqrt(2).
        let r: f64 = 0.37;
        let scan = (1..=4000).map(|i| i as f64 * 1e-3);
        let best = scan
            .min_by(|&x, &y| pixel_nll(r, x, 2.0).total_cmp(&pixel_nll(r, y, 2.0)))
            .unwrap();
        assert!((best - r * 2f64.sqrt()).abs() < 2e-3, "{best}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = Array2::from_elem((8, 8), 0.5);
        let b = Array2::from_elem((8, 8), 1.5);
        assert_eq!(ggd_sample(&a, &b, 7).unwrap(), ggd_sample(&a, &b, 7).unwrap());
        assert_ne!(ggd_sample(&a, &b, 7).unwrap(), ggd_sample(&a, &b, 8).unwrap());
    }

    #[test]
    fn sampling_rejects_invalid_parameters() {
        let a = Array2::from_elem((2, 2), 0.5);
        let b = Array2::from_elem((2, 2), 0.0);
        assert!(ggd_sample(&a, &b, 1).is_err());
    }
}
