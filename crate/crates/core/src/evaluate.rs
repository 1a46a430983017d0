//! Per-image, per-phase evaluation of a trained cascade.

use crate::cascade::{upgan_forward, Cascade, CascadeState};
use crate::degrade::{DatasetManifest, PairedSample, Split};
use crate::metrics::{mae, psnr, ssim, uncertainty_error_correlation, EvalReport, ImageRow, PhaseMetrics};
use crate::{Error, Result};

/// Metrics of every phase for one sample. PSNR, SSIM and MAE are computed on
/// the raw intensity scale recovered from the sample's normalization
/// constants, with the dataset's declared domain-B range as dynamic range.
pub fn phase_metrics(state: &CascadeState, sample: &PairedSample, data_range: f64) -> Result<Vec<PhaseMetrics>> {
    let target_raw = sample.norm_b.to_raw(&sample.target_b);
    state
        .phases
        .iter()
        .map(|p| {
            let pred = &p.prediction.mean;
            let pred_raw = sample.norm_b.to_raw(pred);
            let residual = (pred - &sample.target_b).mapv(f64::abs);
            Ok(PhaseMetrics {
                psnr: psnr(&pred_raw, &target_raw, data_range)?,
                ssim: ssim(&pred_raw, &target_raw, data_range)?,
                mae: mae(&pred_raw, &target_raw)?,
                mean_residual: residual.mean().unwrap_or(0.0),
                mean_sigma: p.sigma.mean().unwrap_or(0.0),
                sigma_residual_spearman: uncertainty_error_correlation(&p.sigma, &residual)?,
            })
        })
        .collect()
}

/// Evaluates every sample of `split`, calling `visit` with each cascade state.
pub fn evaluate_with(
    cascade: &Cascade,
    data: &DatasetManifest,
    split: Split,
    config_hash: String,
    seed: u64,
    visit: &mut dyn FnMut(usize, &PairedSample, &CascadeState) -> Result<()>,
) -> Result<EvalReport> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let range = data.b_range.span();
    let mut rows = Vec::with_capacity(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let sample = &data.samples[i];
        let state = upgan_forward(&sample.input_a, cascade)?;
        rows.push(ImageRow {
            index: i,
            subject_id: sample.subject_id.clone(),
            slice_index: sample.slice_index,
            phases: phase_metrics(&state, sample, range)?,
        });
        visit(k, sample, &state)?;
    }
    EvalReport::from_rows(rows, config_hash, seed)
}

pub fn evaluate(cascade: &Cascade, data: &DatasetManifest, split: Split, config_hash: String, seed: u64) -> Result<EvalReport> {
    evaluate_with(cascade, data, split, config_hash, seed, &mut |_, _, _| Ok(()))
}
