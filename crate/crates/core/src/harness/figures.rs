//! Raster figures: per-image phase panels and metric-versus-supervision curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::cascade::CascadeState;
use crate::degrade::PairedSample;
use crate::{Error, Result};

const GAP: u32 = 2;
const BACKGROUND: Rgb<u8> = Rgb([32, 32, 32]);

fn gray(t: f64) -> Rgb<u8> {
    let v = (t.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([v, v, v])
}

/// Black → red → yellow → white ramp for nonnegative error-like maps.
fn heat(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(t), c(t - 1.0), c(t - 2.0)])
}

fn range_of(map: &Array2<f64>) -> (f64, f64) {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn blit(canvas: &mut RgbImage, map: &Array2<f64>, x0: u32, y0: u32, lo: f64, hi: f64, color: fn(f64) -> Rgb<u8>) {
    let span = if hi > lo { hi - lo } else { 1.0 };
    for ((i, j), &v) in map.indexed_iter() {
        canvas.put_pixel(x0 + j as u32, y0 + i as u32, color((v - lo) / span));
    }
}

/// Panel with the source and target in the first row, then one row per
/// phase: prediction, |residual|, α, β, σ. Intensity maps share the `[−1, 1]`
/// scale; the others are min-max scaled per tile.
pub fn phase_panel(sample: &PairedSample, state: &CascadeState) -> RgbImage {
    let (h, w) = sample.dim();
    let (h32, w32) = (h as u32, w as u32);
    let cols = 5u32;
    let rows = 1 + state.phases.len() as u32;
    let mut canvas = RgbImage::from_pixel(cols * (w32 + GAP) + GAP, rows * (h32 + GAP) + GAP, BACKGROUND);
    let at = |r: u32, c: u32| (GAP + c * (w32 + GAP), GAP + r * (h32 + GAP));
    let (x, y) = at(0, 0);
    blit(&mut canvas, &sample.input_a, x, y, -1.0, 1.0, gray);
    let (x, y) = at(0, 1);
    blit(&mut canvas, &sample.target_b, x, y, -1.0, 1.0, gray);
    for (m, p) in state.phases.iter().enumerate() {
        let r = 1 + m as u32;
        let residual = (&p.prediction.mean - &sample.target_b).mapv(f64::abs);
        // Heat-mapped tiles start their scale at zero.
        let tiles: [(&Array2<f64>, Option<(f64, f64)>, fn(f64) -> Rgb<u8>, bool); 5] = [
            (&p.prediction.mean, Some((-1.0, 1.0)), gray, false),
            (&residual, None, heat, true),
            (&p.prediction.alpha, None, heat, true),
            (&p.prediction.beta, None, gray, false),
            (&p.sigma, None, heat, true),
        ];
        for (c, (map, fixed, color, from_zero)) in tiles.into_iter().enumerate() {
            let (lo, hi) = fixed.unwrap_or_else(|| {
                let (lo, hi) = range_of(map);
                (if from_zero { 0.0 } else { lo }, hi)
            });
            let (x, y) = at(r, c as u32);
            blit(&mut canvas, map, x, y, lo, hi, color);
        }
    }
    canvas
}

fn line(canvas: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < canvas.width() && (y as u32) < canvas.height() {
            canvas.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Line plot of `ys` against `xs` on fixed axes. The curve is drawn green when
/// `trend_ok` holds and red otherwise; `NaN` points are skipped.
pub fn curve(xs: &[f64], ys: &[f64], trend_ok: bool) -> RgbImage {
    let (width, height, margin) = (480u32, 320u32, 40i64);
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (w, h) = (width as i64, height as i64);
    line(&mut canvas, (margin, h - margin), (w - margin, h - margin), axis);
    line(&mut canvas, (margin, margin), (margin, h - margin), axis);
    let pts: Vec<(f64, f64)> = xs.iter().cloned().zip(ys.iter().cloned()).filter(|(_, y)| y.is_finite()).collect();
    if pts.is_empty() {
        return canvas;
    }
    let bounds = |v: Vec<f64>| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (xl, xh) = bounds(pts.iter().map(|p| p.0).collect());
    let (yl, yh) = bounds(pts.iter().map(|p| p.1).collect());
    let span = (w - 2 * margin - 20) as f64;
    let vspan = (h - 2 * margin - 20) as f64;
    let to_px = |(x, y): (f64, f64)| {
        (
            margin + 10 + ((x - xl) / (xh - xl) * span).round() as i64,
            h - margin - 10 - ((y - yl) / (yh - yl) * vspan).round() as i64,
        )
    };
    let color = if trend_ok { Rgb([0, 150, 0]) } else { Rgb([200, 0, 0]) };
    for pair in pts.windows(2) {
        line(&mut canvas, to_px(pair[0]), to_px(pair[1]), color);
    }
    for &p in &pts {
        let (cx, cy) = to_px(p);
        for dy in -3..=3 {
            line(&mut canvas, (cx - 3, cy + dy), (cx + 3, cy + dy), color);
        }
        line(&mut canvas, (cx, h - margin), (cx, h - margin + 5), axis);
    }
    canvas
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
