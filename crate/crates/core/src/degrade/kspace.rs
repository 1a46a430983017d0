use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Unnormalized forward 2-D DFT (rows then columns).
pub fn fft2(image: &Array2<f64>) -> Array2<Complex64> {
    let mut data = image.mapv(|v| Complex64::new(v, 0.0));
    transform(&mut data, false);
    data
}

/// Inverse 2-D DFT with `1/(HW)` scaling, keeping the real part.
pub fn ifft2_real(spectrum: &Array2<Complex64>) -> Array2<f64> {
    let mut data = spectrum.clone();
    transform(&mut data, true);
    let scale = 1.0 / data.len() as f64;
    data.mapv(|c| c.re * scale)
}

fn transform(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for mut row in data.rows_mut() {
        let mut buf: Vec<Complex64> = row.to_vec();
        row_fft.process(&mut buf);
        row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    for mut col in data.columns_mut() {
        let mut buf: Vec<Complex64> = col.to_vec();
        col_fft.process(&mut buf);
        col.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
}

/// Signed frequency index of DFT bin `i` out of `n`.
fn signed_freq(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskShape {
    /// Coefficients ordered by Chebyshev distance from DC (then Euclidean
    /// distance, then index); the first `⌈f·H·W⌉` are kept.
    #[default]
    CenteredSquare,
    /// The `⌈f·H⌉` phase-encode rows nearest DC, every column kept.
    CenteredLines,
}

/// Boolean mask over unshifted DFT coordinates.
pub fn kspace_mask(h: usize, w: usize, keep_fraction: f64, shape: MaskShape) -> Result<Array2<bool>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let mut mask = Array2::from_elem((h, w), false);
    match shape {
        MaskShape::CenteredSquare => {
            let keep = (keep_fraction * (h * w) as f64).ceil() as usize;
            let mut coords: Vec<(i64, i64, usize, usize)> = Vec::with_capacity(h * w);
            for i in 0..h {
                for j in 0..w {
                    let (fy, fx) = (signed_freq(i, h), signed_freq(j, w));
                    coords.push((fy.abs().max(fx.abs()), fy * fy + fx * fx, i, j));
                }
            }
            coords.sort_unstable();
            for &(_, _, i, j) in coords.iter().take(keep.min(h * w)) {
                mask[[i, j]] = true;
            }
        }
        MaskShape::CenteredLines => {
            let keep = (keep_fraction * h as f64).ceil() as usize;
            let mut rows: Vec<(i64, usize)> = (0..h).map(|i| (signed_freq(i, h).abs(), i)).collect();
            rows.sort_unstable();
            for &(_, i) in rows.iter().take(keep.min(h)) {
                mask.row_mut(i).fill(true);
            }
        }
    }
    Ok(mask)
}

/// Keeps only the central low-frequency region of the spectrum and returns
/// the real part of the inverse transform.
pub fn undersample_kspace(image: &Array2<f64>, keep_fraction: f64, shape: MaskShape) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if h % 2 != 0 || w % 2 != 0 || h == 0 {
        return Err(Error::Domain(format!("undersampling needs even dimensions, got {h}x{w}")));
    }
    let mask = kspace_mask(h, w, keep_fraction, shape)?;
    let mut k = fft2(image);
    k.iter_mut()
        .zip(&mask)
        .filter(|(_, &m)| !m)
        .for_each(|(c, _)| *c = Complex64::new(0.0, 0.0));
    Ok(ifft2_real(&k))
}

/// Segmented rigid-motion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionParams {
    /// Number of contiguous phase-encode segments, each with its own pose.
    pub segments: usize,
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            segments: 4,
            max_rotation_deg: 5.0,
            max_translation_px: 3.0,
        }
    }
}

/// Rotation about the image centre with bilinear interpolation, zero outside.
pub fn rotate_bilinear(image: &Array2<f64>, angle_rad: f64) -> Array2<f64> {
    if angle_rad == 0.0 {
        return image.clone();
    }
    let (h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = angle_rad.sin_cos();
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            image[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (dy, dx) = (i as f64 - cy, j as f64 - cx);
        // Inverse map: rotate output coordinates by −θ.
        let sy = c * dy - s * dx + cy;
        let sx = s * dy + c * dx + cx;
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as i64, x0 as i64);
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    })
}

/// Assembles k-space from rigidly transformed copies of `image`, one pose
/// per contiguous block of phase-encode rows (ordered from the most negative
/// frequency upward). The block containing DC keeps the reference pose.
pub fn simulate_motion(image: &Array2<f64>, params: MotionParams, seed: u64) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::Domain("empty image".into()));
    }
    if params.segments == 0 || params.segments > h {
        return Err(Error::Domain(format!(
            "segments must lie in 1..={h}, got {}",
            params.segments
        )));
    }
    if !(params.max_rotation_deg >= 0.0 && params.max_translation_px >= 0.0) {
        return Err(Error::Domain("motion bounds must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Acquisition order: rows sorted by signed frequency.
    let mut order: Vec<usize> = (0..h).collect();
    order.sort_by_key(|&i| signed_freq(i, h));
    let per = h.div_ceil(params.segments);
    let mut out = Array2::from_elem((h, w), Complex64::new(0.0, 0.0));
    for (s, rows) in order.chunks(per).enumerate() {
        let reference = rows.iter().any(|&i| i == 0);
        let draw = |rng: &mut ChaCha8Rng, bound: f64| -> f64 {
            if bound == 0.0 {
                0.0
            } else {
                rng.random_range(-bound..=bound)
            }
        };
        let theta = draw(&mut rng, params.max_rotation_deg).to_radians();
        let ty = draw(&mut rng, params.max_translation_px);
        let tx = draw(&mut rng, params.max_translation_px);
        let (theta, ty, tx) = if reference { (0.0, 0.0, 0.0) } else { (theta, ty, tx) };
        log::trace!("motion segment {s}: θ={theta:.4} t=({ty:.3},{tx:.3})");
        let k = fft2(&rotate_bilinear(image, theta));
        for &i in rows {
            let fy = signed_freq(i, h) as f64 / h as f64;
            for j in 0..w {
                let fx = signed_freq(j, w) as f64 / w as f64;
                let phase = -2.0 * std::f64::consts::PI * (fy * ty + fx * tx);
                out[[i, j]] = k[[i, j]] * Complex64::from_polar(1.0, phase);
            }
        }
    }
    Ok(ifft2_real(&out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(i, j)| {
            ((i as f64) * 0.3).sin() + ((j as f64) * 0.17).cos() * 0.5 + if (i / 5 + j / 7) % 2 == 0 { 0.4 } else { 0.0 }
        })
    }

    #[test]
    fn fft_round_trip() {
        let x = smooth(12, 16);
        let back = ifft2_real(&fft2(&x));
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn full_fraction_is_identity() {
        let x = smooth(32, 32);
        let y = undersample_kspace(&x, 1.0, MaskShape::CenteredSquare).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn constant_image_survives_any_fraction() {
        let x = Array2::from_elem((16, 16), 0.7);
        for f in [0.01, 0.08, 0.5] {
            for shape in [MaskShape::CenteredSquare, MaskShape::CenteredLines] {
                let y = undersample_kspace(&x, f, shape).unwrap();
                assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn mask_counts() {
        let m = kspace_mask(256, 256, 0.08, MaskShape::CenteredSquare).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 5243);
        assert!(m[[0, 0]]);
        let l = kspace_mask(64, 64, 0.08, MaskShape::CenteredLines).unwrap();
        assert_eq!(l.iter().filter(|&&b| b).count(), 6 * 64);
        assert!(kspace_mask(8, 8, 0.0, MaskShape::CenteredSquare).is_err());
        assert!(kspace_mask(8, 8, 1.5, MaskShape::CenteredSquare).is_err());
    }

    #[test]
    fn undersampling_loses_detail() {
        let x = smooth(64, 64);
        let y = undersample_kspace(&x, 0.08, MaskShape::CenteredSquare).unwrap();
        let mse: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4096.0;
        assert!(mse > 0.0);
        assert!(undersample_kspace(&smooth(7, 8), 0.5, MaskShape::CenteredSquare).is_err());
    }

    #[test]
    fn zero_severity_motion_is_identity() {
        let x = smooth(32, 32);
        let p = MotionParams {
            segments: 4,
            max_rotation_deg: 0.0,
            max_translation_px: 0.0,
        };
        let y = simulate_motion(&x, p, 9).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn motion_is_reproducible_and_nontrivial() {
        let x = smooth(32, 32);
        let p = MotionParams::default();
        let a = simulate_motion(&x, p, 1).unwrap();
        assert_eq!(a, simulate_motion(&x, p, 1).unwrap());
        assert_ne!(a, simulate_motion(&x, p, 2).unwrap());
        assert!(x.iter().zip(&a).any(|(u, v)| (u - v).abs() > 1e-3));
    }

    #[test]
    fn rotation_by_zero_and_quarter_turn() {
        let x = smooth(9, 9);
        assert_eq!(rotate_bilinear(&x, 0.0), x);
        let r = rotate_bilinear(&x, std::f64::consts::FRAC_PI_2);
        // Centre pixel is a fixed point.
        assert!((r[[4, 4]] - x[[4, 4]]).abs() < 1e-12);
    }
}
