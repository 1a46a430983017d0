//! Browser bindings over the core crate. Images cross the boundary as
//! row-major RGBA bytes ready for `ImageData`.

use ndarray::Array2;
use upgan::cascade::attention_map;
use upgan::degrade::{phantom_slice, simulate_motion, undersample_kspace, MaskShape, MotionParams, PhantomParams};
use upgan::ggd::{ggd_sigma, log_density, pixel_nll};
use wasm_bindgen::prelude::*;

/// Density of `GGD(0, α, β)` at `n` points evenly spaced over `[-span, span]`.
#[wasm_bindgen]
pub fn ggd_density_curve(alpha: f64, beta: f64, span: f64, n: usize) -> Result<Vec<f64>, JsError> {
    check_ggd(alpha, beta)?;
    if n < 2 || !(span > 0.0) {
        return Err(JsError::new("need n >= 2 and span > 0"));
    }
    Ok((0..n)
        .map(|i| {
            let eps = -span + 2.0 * span * i as f64 / (n - 1) as f64;
            log_density(eps, alpha, beta).exp()
        })
        .collect())
}

/// Standard deviation of the residual model.
#[wasm_bindgen]
pub fn ggd_std(alpha: f64, beta: f64) -> Result<f64, JsError> {
    check_ggd(alpha, beta)?;
    Ok(upgan::ggd::sigma(alpha, beta)?)
}

/// Per-pixel fidelity loss of residual `eps`.
#[wasm_bindgen]
pub fn fidelity_loss(eps: f64, alpha: f64, beta: f64) -> Result<f64, JsError> {
    check_ggd(alpha, beta)?;
    Ok(pixel_nll(eps, alpha, beta))
}

fn check_ggd(alpha: f64, beta: f64) -> Result<(), JsError> {
    if alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite() {
        Ok(())
    } else {
        Err(JsError::new("alpha and beta must be positive"))
    }
}

/// Degradation applied by [`Phantom::degrade`].
#[wasm_bindgen]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degradation {
    Undersample,
    UndersampleLines,
    Motion,
}

/// A synthetic slice plus the last degraded version of it.
#[wasm_bindgen]
pub struct Phantom {
    clean: Array2<f64>,
    degraded: Array2<f64>,
}

#[wasm_bindgen]
impl Phantom {
    /// Renders slice `slice` of subject `seed` at `size × size` (even `size`).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, slice: usize, size: usize) -> Result<Phantom, JsError> {
        if size < 8 || size % 2 != 0 {
            return Err(JsError::new("size must be even and at least 8"));
        }
        let params = PhantomParams {
            noise_std: 0.0,
            ..PhantomParams::default()
        };
        let (_, clean) = phantom_slice(seed, slice, (size, size), &params);
        Ok(Phantom {
            degraded: clean.clone(),
            clean,
        })
    }

    pub fn size(&self) -> usize {
        self.clean.nrows()
    }

    /// Applies a degradation. `amount` is the kept k-space fraction for
    /// undersampling and the severity in `[0, 1]` for motion.
    pub fn degrade(&mut self, kind: Degradation, amount: f64, seed: u64) -> Result<(), JsError> {
        self.degraded = match kind {
            Degradation::Undersample => undersample_kspace(&self.clean, amount, MaskShape::CenteredSquare)?,
            Degradation::UndersampleLines => undersample_kspace(&self.clean, amount, MaskShape::CenteredLines)?,
            Degradation::Motion => {
                if !(0.0..=1.0).contains(&amount) {
                    return Err(JsError::new("motion severity must lie in [0, 1]"));
                }
                let full = MotionParams::default();
                let params = MotionParams {
                    max_rotation_deg: full.max_rotation_deg * amount,
                    max_translation_px: full.max_translation_px * amount,
                    ..full
                };
                simulate_motion(&self.clean, params, seed)?
            }
        };
        Ok(())
    }

    pub fn clean_rgba(&self) -> Vec<u8> {
        gray_rgba(&self.clean)
    }

    pub fn degraded_rgba(&self) -> Vec<u8> {
        gray_rgba(&self.degraded)
    }

    /// Mean absolute error between the degraded and clean slices.
    pub fn degraded_mae(&self) -> f64 {
        upgan::metrics::mae(&self.degraded, &self.clean).unwrap_or(f64::NAN)
    }

    /// Uncertainty attention for an illustrative residual model whose scale
    /// grows with the local degradation error: `α = α₀ + gain·|degraded − clean|`.
    /// Returns the attention map `σ/Σσ` as a heat-map image.
    pub fn attention_rgba(&self, alpha0: f64, gain: f64, beta: f64) -> Result<Vec<u8>, JsError> {
        Ok(heat_rgba(&self.attention(alpha0, gain, beta)?))
    }

    /// Fraction of total attention falling on the 10% of pixels with the largest error.
    pub fn attention_on_worst_decile(&self, alpha0: f64, gain: f64, beta: f64) -> Result<f64, JsError> {
        let att = self.attention(alpha0, gain, beta)?;
        let err: Vec<f64> = (&self.degraded - &self.clean).iter().map(|v| v.abs()).collect();
        let mut order: Vec<usize> = (0..err.len()).collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]));
        let flat: Vec<f64> = att.iter().copied().collect();
        Ok(order[..err.len().div_ceil(10)].iter().map(|&i| flat[i]).sum())
    }
}

impl Phantom {
    pub fn clean(&self) -> &Array2<f64> {
        &self.clean
    }

    pub fn degraded(&self) -> &Array2<f64> {
        &self.degraded
    }

    pub fn attention(&self, alpha0: f64, gain: f64, beta: f64) -> Result<Array2<f64>, JsError> {
        if !(alpha0 > 0.0 && gain >= 0.0) {
            return Err(JsError::new("need alpha0 > 0 and gain >= 0"));
        }
        check_ggd(alpha0, beta)?;
        let alpha = (&self.degraded - &self.clean).mapv(|e| alpha0 + gain * e.abs());
        let sigma = ggd_sigma(&alpha, &Array2::from_elem(alpha.dim(), beta))?;
        Ok(attention_map(&sigma)?)
    }
}

fn gray_rgba(img: &Array2<f64>) -> Vec<u8> {
    img.iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Black-red-yellow-white ramp, scaled to the map's own maximum.
fn heat_rgba(img: &Array2<f64>) -> Vec<u8> {
    let max = img.iter().copied().fold(0.0f64, f64::max);
    img.iter()
        .flat_map(|&v| {
            let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
            let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            [c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0), 255]
        })
        .collect()
}
