use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{split_subjects, DatasetManifest, NormConstants, PairedSample};
use crate::{Error, Result};

/// Knobs of the synthetic paired task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    pub slices_per_subject: usize,
    /// Gaussian blur applied to the phantom to form the source domain.
    pub blur_sigma: f64,
    /// Additive Gaussian noise on the source domain, in raw [0, 1] units.
    pub noise_std: f64,
    /// Exponent of the monotone intensity remap forming the target domain.
    pub gamma: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            slices_per_subject: 20,
            blur_sigma: 1.2,
            noise_std: 0.03,
            gamma: 0.6,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.slices_per_subject == 0
            || !(self.blur_sigma >= 0.0)
            || !(self.noise_std >= 0.0)
            || !(self.gamma > 0.0)
        {
            return Err(Error::Config(format!("invalid phantom parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    value: f64,
    /// Slice position (in [0, 1]) where the structure is largest.
    peak: f64,
}

struct Subject {
    shell: Ellipse,
    inner: Vec<Ellipse>,
    texture: [(f64, f64, f64); 2],
}

fn draw_subject(rng: &mut ChaCha8Rng) -> Subject {
    let shell = Ellipse {
        cy: rng.random_range(-0.05..0.05),
        cx: rng.random_range(-0.05..0.05),
        ry: rng.random_range(0.70..0.88),
        rx: rng.random_range(0.55..0.80),
        angle: rng.random_range(-0.3..0.3),
        value: rng.random_range(0.30..0.45),
        peak: 0.5,
    };
    let count = rng.random_range(3..=6);
    let inner = (0..count)
        .map(|k| Ellipse {
            cy: rng.random_range(-0.45..0.45),
            cx: rng.random_range(-0.40..0.40),
            ry: rng.random_range(0.08..0.28),
            rx: rng.random_range(0.08..0.28),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            // One structure is always at full intensity.
            value: if k == 0 { 1.0 } else { rng.random_range(0.0..0.9) },
            peak: rng.random_range(0.2..0.8),
        })
        .collect();
    let mut tex = || {
        (
            rng.random_range(4.0..10.0),
            rng.random_range(0.0..std::f64::consts::PI),
            rng.random_range(0.03..0.08),
        )
    };
    let texture = [tex(), tex()];
    Subject { shell, inner, texture }
}

fn inside(e: &Ellipse, y: f64, x: f64, scale: f64, drift: f64) -> bool {
    if scale <= 0.0 {
        return false;
    }
    let (s, c) = e.angle.sin_cos();
    let (dy, dx) = (y - e.cy - drift, x - e.cx);
    let u = (c * dx + s * dy) / (e.rx * scale);
    let v = (-s * dx + c * dy) / (e.ry * scale);
    u * u + v * v <= 1.0
}

/// Raw phantom in `[0, 1]` for slice position `t ∈ [0, 1]`; zero background.
fn render(subject: &Subject, h: usize, w: usize, t: f64) -> Array2<f64> {
    let shell_scale = 0.75 + 0.25 * (std::f64::consts::PI * t).sin();
    let mut img = Array2::from_shape_fn((h, w), |(i, j)| {
        let y = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
        let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
        if !inside(&subject.shell, y, x, shell_scale, 0.0) {
            return 0.0;
        }
        let mut v = subject.shell.value;
        for (k, e) in subject.inner.iter().enumerate() {
            let scale = shell_scale * (1.0 - 1.6 * (t - e.peak).powi(2)).max(0.0);
            let scale = if k == 0 { scale.max(0.5) } else { scale };
            if inside(e, y, x, scale, 0.1 * (t - 0.5)) {
                v = e.value;
            }
        }
        for &(freq, dir, amp) in &subject.texture {
            let (s, c) = dir.sin_cos();
            v += amp * (freq * (c * x + s * y) + 3.0 * t).sin();
        }
        v.clamp(0.0, 1.0)
    });
    let max = img.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        img.mapv_inplace(|v| v / max);
    }
    img
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let (h, w) = image.dim();
    let pass = |src: &Array2<f64>, vertical: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            taps.iter()
                .enumerate()
                .map(|(t, &k)| {
                    let off = t as i64 - radius;
                    let v = if vertical {
                        src[[(i as i64 + off).clamp(0, h as i64 - 1) as usize, j]]
                    } else {
                        src[[i, (j as i64 + off).clamp(0, w as i64 - 1) as usize]]
                    };
                    k * v
                })
                .sum::<f64>()
                / norm
        })
    };
    pass(&pass(image, false), true)
}

/// One raw `(a, b)` pair of the synthetic task, both in raw `[0, 1]` units.
pub fn phantom_slice(
    subject_seed: u64,
    slice: usize,
    size: (usize, usize),
    params: &PhantomParams,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let subject = draw_subject(&mut rng);
    let t = (slice as f64 + 0.5) / params.slices_per_subject as f64;
    let p = render(&subject, size.0, size.1, t);
    let b = p.mapv(|v| v.powf(params.gamma));
    let mut a = gaussian_blur(&p, params.blur_sigma);
    if params.noise_std > 0.0 {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(subject_seed ^ (slice as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, params.noise_std).expect("validated noise level");
        a.mapv_inplace(|v| v + normal.sample(&mut noise_rng));
    }
    (a, b)
}

/// Synthetic paired dataset of `n` subjects with subject-level splits.
pub fn procedural_pairs(
    n: usize,
    size: (usize, usize),
    params: &PhantomParams,
    seed: u64,
) -> Result<DatasetManifest> {
    params.validate()?;
    if size.0 < 8 || size.1 < 8 {
        return Err(Error::Data(format!("phantom size {size:?} is too small")));
    }
    let ids: Vec<String> = (0..n).map(|s| format!("subject{s:03}")).collect();
    let splits = split_subjects(&ids, seed)?;
    let mut root = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n * params.slices_per_subject);
    for id in &ids {
        let subject_seed: u64 = root.random();
        for slice in 0..params.slices_per_subject {
            let (a, b) = phantom_slice(subject_seed, slice, size, params);
            samples.push(PairedSample::from_raw(&a, &b, id.clone(), slice)?);
        }
    }
    DatasetManifest::new(
        "procedural".into(),
        samples,
        splits,
        NormConstants { min: 0.0, max: 1.0 },
    )
}
