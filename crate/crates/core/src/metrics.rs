//! Image quality metrics, uncertainty diagnostics and paired significance testing.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if x.dim() != y.dim() {
        let (xh, xw) = x.dim();
        let (yh, yw) = y.dim();
        return Err(Error::shape(&[xh, xw], &[yh, yw]));
    }
    if x.is_empty() {
        return Err(Error::Domain("empty image".into()));
    }
    Ok(())
}

pub fn mse(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    same_shape(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `20·log10(max_i / √MSE)`; `+∞` for identical images.
pub fn psnr(x: &Array2<f64>, y: &Array2<f64>, max_i: f64) -> Result<f64> {
    if !(max_i > 0.0) {
        return Err(Error::Domain(format!("max_i must be positive, got {max_i}")));
    }
    let e = mse(x, y)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_i / e.sqrt()).log10())
}

pub fn mae(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    same_shape(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// "Valid" separable filtering: output has side `n − size + 1`.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((h, wo));
    for i in 0..h {
        for j in 0..wo {
            rows[[i, j]] = (0..k).map(|t| taps[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for i in 0..ho {
        for j in 0..wo {
            out[[i, j]] = (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5),
/// with `C1 = (0.01·L)²` and `C2 = (0.03·L)²` for dynamic range `L`.
pub fn ssim(x: &Array2<f64>, y: &Array2<f64>, data_range: f64) -> Result<f64> {
    same_shape(x, y)?;
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range must be positive, got {data_range}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mx = filter_valid(x, &taps);
    let my = filter_valid(y, &taps);
    let xx = filter_valid(&(x * x), &taps);
    let yy = filter_valid(&(y * y), &taps);
    let xy = filter_valid(&(x * y), &taps);
    let mut total = 0.0;
    for ((((&mx, &my), &xx), &yy), &xy) in mx.iter().zip(&my).zip(&xx).zip(&yy).zip(&xy) {
        let vx = xx - mx * mx;
        let vy = yy - my * my;
        let cxy = xy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation across pixels; `None` when either map is constant.
pub fn uncertainty_error_correlation(
    sigma: &Array2<f64>,
    residual: &Array2<f64>,
) -> Result<Option<f64>> {
    same_shape(sigma, residual)?;
    let s: Vec<f64> = sigma.iter().copied().collect();
    let r: Vec<f64> = residual.iter().copied().collect();
    Ok(pearson(&average_ranks(&s), &average_ranks(&r)))
}

/// Largest sample size for which the exact null distribution is enumerated.
const EXACT_MAX_N: usize = 50;

/// Two-sided Wilcoxon signed-rank p-value for paired scores.
///
/// Zero differences are discarded. Without ties the exact null distribution
/// of the positive-rank sum is used (n ≤ 50); otherwise the normal
/// approximation with tie-corrected variance.
pub fn paired_significance(scores_a: &[f64], scores_b: &[f64]) -> Result<f64> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::shape(&[scores_a.len()], &[scores_b.len()]));
    }
    if scores_a.len() < 5 {
        return Err(Error::InsufficientSamples {
            need: 5,
            got: scores_a.len(),
        });
    }
    if scores_a.iter().chain(scores_b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let diffs: Vec<f64> = scores_a
        .iter()
        .zip(scores_b)
        .map(|(a, b)| b - a)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(1.0);
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let r_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let has_ties = ranks.iter().any(|r| r.fract() != 0.0) || {
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.windows(2).any(|w| w[0] == w[1])
    };
    if !has_ties && n <= EXACT_MAX_N {
        return Ok(exact_signed_rank_p(n, r_plus.round() as usize));
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (r_plus - mean) / var.sqrt();
    Ok(libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0))
}

/// `2·min(P(T ≤ t), P(T ≥ t))` under the exact null of the rank sum `T`.
fn exact_signed_rank_p(n: usize, t: usize) -> f64 {
    let max = n * (n + 1) / 2;
    // counts[s] = number of subsets of {1..n} summing to s.
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    for k in 1..=n {
        for s in (k..=max).rev() {
            counts[s] += counts[s - k];
        }
    }
    let total = 2f64.powi(n as i32);
    let lower: f64 = counts[..=t].iter().sum::<f64>() / total;
    let upper: f64 = counts[t..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation over the finite entries.
    pub fn of(values: &[f64]) -> Self {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Metrics of one phase's prediction for one test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    /// Mean absolute residual on the normalized scale.
    pub mean_residual: f64,
    pub mean_sigma: f64,
    /// Spearman correlation between σ and |residual|; `None` if undefined.
    pub sigma_residual_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub index: usize,
    pub subject_id: String,
    pub slice_index: usize,
    /// One entry per phase; the last phase is the cascade output.
    pub phases: Vec<PhaseMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub mae: MeanStd,
    pub mean_residual: f64,
    pub mean_uncertainty: f64,
    pub sigma_residual_spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub metric: String,
    pub p_value: f64,
    pub mean_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub phases: usize,
    pub rows: Vec<ImageRow>,
    pub per_phase: Vec<PhaseSummary>,
    /// Final-phase aggregates (same as the last `per_phase` entry's metrics).
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub mae: MeanStd,
    pub comparisons: Vec<Comparison>,
    /// True when the stored aggregates equal a recomputation from `rows`.
    pub self_consistent: bool,
}

impl EvalReport {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn from_rows(rows: Vec<ImageRow>, config_hash: String, seed: u64) -> Result<Self> {
        let phases = rows.first().map(|r| r.phases.len()).unwrap_or(0);
        if phases == 0 || rows.iter().any(|r| r.phases.len() != phases) {
            return Err(Error::Data("report rows must share a nonzero phase count".into()));
        }
        let per_phase = summarize(&rows, phases);
        let last = per_phase.last().expect("phases > 0").clone();
        let mut report = Self {
            schema_version: Self::SCHEMA_VERSION,
            config_hash,
            seed,
            phases,
            rows,
            per_phase,
            psnr: last.psnr,
            ssim: last.ssim,
            mae: last.mae,
            comparisons: Vec::new(),
            self_consistent: false,
        };
        report.self_consistent = report.check_consistency();
        Ok(report)
    }

    /// Recomputes the aggregates from the rows and compares.
    pub fn check_consistency(&self) -> bool {
        let fresh = summarize(&self.rows, self.phases);
        let same = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        let ms = |a: &MeanStd, b: &MeanStd| same(a.mean, b.mean) && same(a.std, b.std);
        fresh.len() == self.per_phase.len()
            && fresh.iter().zip(&self.per_phase).all(|(a, b)| {
                ms(&a.psnr, &b.psnr)
                    && ms(&a.ssim, &b.ssim)
                    && ms(&a.mae, &b.mae)
                    && same(a.mean_residual, b.mean_residual)
                    && same(a.mean_uncertainty, b.mean_uncertainty)
                    && same(a.sigma_residual_spearman, b.sigma_residual_spearman)
            })
            && fresh.last().is_some_and(|l| ms(&l.mae, &self.mae) && ms(&l.psnr, &self.psnr) && ms(&l.ssim, &self.ssim))
    }

    /// Final-phase metric column by name (`psnr`, `ssim` or `mae`).
    pub fn final_metric(&self, metric: &str) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let p = r.phases.last().expect("nonempty");
                match metric {
                    "psnr" => Ok(p.psnr),
                    "ssim" => Ok(p.ssim),
                    "mae" => Ok(p.mae),
                    other => Err(Error::Config(format!("unknown metric {other}"))),
                }
            })
            .collect()
    }

    /// Per-image CSV with one line per (image, phase).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "index,subject_id,slice_index,phase,psnr,ssim,mae,mean_residual,mean_sigma,sigma_residual_spearman\n",
        );
        for r in &self.rows {
            for (m, p) in r.phases.iter().enumerate() {
                let rho = p
                    .sigma_residual_spearman
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.index,
                    r.subject_id,
                    r.slice_index,
                    m,
                    p.psnr,
                    p.ssim,
                    p.mae,
                    p.mean_residual,
                    p.mean_sigma,
                    rho
                ));
            }
        }
        out
    }
}

fn summarize(rows: &[ImageRow], phases: usize) -> Vec<PhaseSummary> {
    (0..phases)
        .map(|m| {
            let col = |f: &dyn Fn(&PhaseMetrics) -> f64| -> Vec<f64> {
                rows.iter().map(|r| f(&r.phases[m])).collect()
            };
            let rho: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.phases[m].sigma_residual_spearman)
                .collect();
            PhaseSummary {
                psnr: MeanStd::of(&col(&|p| p.psnr)),
                ssim: MeanStd::of(&col(&|p| p.ssim)),
                mae: MeanStd::of(&col(&|p| p.mae)),
                mean_residual: MeanStd::of(&col(&|p| p.mean_residual)).mean,
                mean_uncertainty: MeanStd::of(&col(&|p| p.mean_sigma)).mean,
                sigma_residual_spearman: MeanStd::of(&rho).mean,
            }
        })
        .collect()
}
