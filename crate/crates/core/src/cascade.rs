//! Uncertainty-guided composition of generators.
//!
//! Phase 0 sees the source image alone. Phase `m > 0` sees the stack
//! `(f, a)` where `f = mean ⊙ σ / Σσ` is built from phase `m − 1`'s
//! prediction and `a` is the source image.

use std::ops::Range;

use ndarray::{Array2, Array3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ggd::{sigma_with_grad, GgdGrad, GgdPrediction};
use crate::networks::{Generator, GeneratorConfig};
use crate::nn::{Conv2d, Module, Param, Tensor};
use crate::{Error, Result};

/// Guard on the normalization denominator `Σσ`.
pub const SIGMA_SUM_GUARD: f64 = 1e-12;

/// How a phase turns its predecessor's output into its feature channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guidance {
    /// `f = mean ⊙ σ / Σσ`.
    #[default]
    Uncertainty,
    /// Ablation: `f = mean`, no uncertainty weighting.
    NoGuidance,
    /// Learned 1×1 fusion of `(mean, K·attention, mean ⊙ K·attention)`,
    /// initialized to the closed form scaled by the pixel count `K`.
    LearnedFusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutput {
    pub prediction: GgdPrediction,
    pub sigma: Array2<f64>,
    /// `σ / Σσ`; sums to one over the image.
    pub attention: Array2<f64>,
    /// Feature handed to the next phase; `None` for the last phase.
    pub feature: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeState {
    pub phases: Vec<PhaseOutput>,
    pub source: Array2<f64>,
}

/// Normalized uncertainty `σ / Σσ` over all pixels of one image.
pub fn attention_map(sigma: &Array2<f64>) -> Result<Array2<f64>> {
    let total: f64 = sigma.sum();
    if !(total >= SIGMA_SUM_GUARD) {
        return Err(Error::DegenerateUncertainty(total));
    }
    Ok(sigma / total.max(SIGMA_SUM_GUARD))
}

/// Attention feature `f = mean ⊙ σ / Σ_j σ_j` from a phase's prediction.
pub fn attention_feature(prev: &GgdPrediction) -> Result<Array2<f64>> {
    Ok(&prev.mean * &attention_map(&prev.sigma())?)
}

/// Gradient of a scalar loss through `attention = σ / Σσ` back to α and β,
/// given the gradient with respect to the attention map.
fn attention_backward(
    pred: &GgdPrediction,
    d_attention: &Array2<f64>,
    out_alpha: &mut Array2<f64>,
    out_beta: &mut Array2<f64>,
) {
    let parts: Vec<(f64, f64, f64)> = pred
        .alpha
        .iter()
        .zip(&pred.beta)
        .map(|(&a, &b)| sigma_with_grad(a, b))
        .collect();
    let total: f64 = parts.iter().map(|p| p.0).sum::<f64>().max(SIGMA_SUM_GUARD);
    let weighted: f64 = parts
        .iter()
        .zip(d_attention)
        .map(|(p, &g)| g * p.0)
        .sum::<f64>();
    for (((p, &g), da), db) in parts
        .iter()
        .zip(d_attention)
        .zip(out_alpha.iter_mut())
        .zip(out_beta.iter_mut())
    {
        let d_sigma = g / total - weighted / (total * total);
        *da += d_sigma * p.1;
        *db += d_sigma * p.2;
    }
}

/// Stacks `(f, a)` along a leading channel axis.
pub fn cascade_input(feature: &Array2<f64>, source: &Array2<f64>) -> Result<Array3<f64>> {
    if feature.dim() != source.dim() {
        let (fh, fw) = feature.dim();
        let (sh, sw) = source.dim();
        return Err(Error::shape(&[fh, fw], &[sh, sw]));
    }
    Ok(ndarray::stack(Axis(0), &[feature.view(), source.view()]).expect("equal shapes"))
}

/// Inverse of [`cascade_input`].
pub fn split_cascade_input(stack: &Array3<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    if stack.len_of(Axis(0)) != 2 {
        let (c, h, w) = stack.dim();
        return Err(Error::shape(&[2, h, w], &[c, h, w]));
    }
    Ok((
        stack.index_axis(Axis(0), 0).to_owned(),
        stack.index_axis(Axis(0), 1).to_owned(),
    ))
}

/// Builds the generator configuration for phase `m` of a cascade.
pub fn phase_config(
    base: &GeneratorConfig,
    phase: usize,
    guidance: Guidance,
    pixels: usize,
) -> GeneratorConfig {
    let mut cfg = base.clone();
    if phase == 0 {
        cfg.in_channels = 1;
        cfg.input_gains = Vec::new();
    } else {
        cfg.in_channels = 2;
        // σ/Σσ averages 1/K per pixel; rescale so the feature channel is O(1).
        cfg.input_gains = match guidance {
            Guidance::Uncertainty => vec![pixels as f32, 1.0],
            Guidance::NoGuidance | Guidance::LearnedFusion => Vec::new(),
        };
    }
    cfg
}

/// Per-sample cache needed to back-propagate through a feature.
#[derive(Debug, Clone)]
struct FeatureCache {
    prev: GgdPrediction,
    attention: Array2<f64>,
}

/// A cascade of generators plus optional learned fusion layers.
#[derive(Debug, Clone)]
pub struct Cascade {
    guidance: Guidance,
    generators: Vec<Generator>,
    /// One per phase `m > 0` when `guidance` is `LearnedFusion`.
    fusions: Vec<Conv2d>,
    cache: Vec<Option<Vec<FeatureCache>>>,
}

impl Cascade {
    pub fn new<R: Rng + ?Sized>(
        base: &GeneratorConfig,
        phases: usize,
        guidance: Guidance,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if phases < 1 {
            return Err(Error::Config("cascade needs at least one phase".into()));
        }
        phase_config(base, 0, guidance, height * width).check_input(1, height, width)?;
        let mut generators = Vec::with_capacity(phases);
        for m in 0..phases {
            generators.push(Generator::new(phase_config(base, m, guidance, height * width), rng)?);
        }
        let fusions = if guidance == Guidance::LearnedFusion {
            (1..phases)
                .map(|_| {
                    let mut c = Conv2d::new(3, 1, 1, 1, 0, 1.0, rng);
                    c.weight.value = vec![0.0, 0.0, 1.0];
                    c
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            guidance,
            generators,
            fusions,
            cache: vec![None; phases],
        })
    }

    /// Wraps existing generators; every phase after the first must take two channels.
    pub fn from_generators(generators: Vec<Generator>, guidance: Guidance) -> Result<Self> {
        if generators.is_empty() {
            return Err(Error::Config("cascade needs at least one phase".into()));
        }
        for (m, g) in generators.iter().enumerate() {
            let want = if m == 0 { 1 } else { 2 };
            if g.config().in_channels != want {
                return Err(Error::Config(format!(
                    "phase {m} generator takes {} channels, expected {want}",
                    g.config().in_channels
                )));
            }
        }
        if guidance == Guidance::LearnedFusion {
            return Err(Error::Config(
                "learned fusion cascades must be built with Cascade::new".into(),
            ));
        }
        let phases = generators.len();
        Ok(Self {
            guidance,
            generators,
            fusions: Vec::new(),
            cache: vec![None; phases],
        })
    }

    pub fn guidance(&self) -> Guidance {
        self.guidance
    }

    pub fn phases(&self) -> usize {
        self.generators.len()
    }

    pub fn generator(&self, m: usize) -> &Generator {
        &self.generators[m]
    }

    pub fn generator_mut(&mut self, m: usize) -> &mut Generator {
        &mut self.generators[m]
    }

    /// Parameters owned by phase `m`: its generator and, if any, its fusion layer.
    pub fn phase_module(&mut self, m: usize) -> PhaseParams<'_> {
        let fusion = if m > 0 { self.fusions.get_mut(m - 1) } else { None };
        PhaseParams {
            generator: &mut self.generators[m],
            fusion,
        }
    }

    /// Flattened parameters of phase `m` in [`Cascade::phase_module`] order.
    pub fn phase_values(&self, m: usize) -> Vec<f32> {
        let mut v = self.generators[m].flat_values();
        if let Some(f) = m.checked_sub(1).and_then(|k| self.fusions.get(k)) {
            v.extend(f.flat_values());
        }
        v
    }

    pub fn phase_checksum(&self, m: usize) -> String {
        let fusion = if m > 0 { self.fusions.get(m - 1) } else { None };
        match fusion {
            None => self.generators[m].checksum(),
            Some(f) => format!("{}:{}", self.generators[m].checksum(), f.checksum()),
        }
    }

    /// Feature maps for phase `m` computed from phase `m − 1` predictions,
    /// plus the per-sample backward caches and, for learned fusion, the
    /// fusion layer's input stack.
    fn features(
        &self,
        m: usize,
        prev: &[GgdPrediction],
    ) -> Result<(Tensor, Vec<FeatureCache>, Option<Tensor>)> {
        let (h, w) = prev[0].dim();
        let k = (h * w) as f64;
        let mut caches = Vec::with_capacity(prev.len());
        for p in prev {
            caches.push(FeatureCache {
                prev: p.clone(),
                attention: attention_map(&p.sigma())?,
            });
        }
        if self.guidance != Guidance::LearnedFusion {
            let maps: Vec<Array2<f64>> = caches
                .iter()
                .map(|c| match self.guidance {
                    Guidance::NoGuidance => c.prev.mean.clone(),
                    _ => &c.prev.mean * &c.attention,
                })
                .collect();
            let refs: Vec<&Array2<f64>> = maps.iter().collect();
            return Ok((crate::networks::maps_to_tensor(&refs), caches, None));
        }
        let mut stack = Tensor::zeros([prev.len(), 3, h, w]);
        for (i, c) in caches.iter().enumerate() {
            let scaled = c.attention.mapv(|v| v * k);
            let prod = &c.prev.mean * &scaled;
            for (ch, map) in [&c.prev.mean, &scaled, &prod].into_iter().enumerate() {
                stack
                    .plane_mut(i, ch)
                    .iter_mut()
                    .zip(map.iter())
                    .for_each(|(d, &v)| *d = v as f32);
            }
        }
        let f = self.fusions[m - 1].infer(&stack);
        Ok((f, caches, Some(stack)))
    }

    /// Feature maps phase `m` would receive from the given predecessor outputs.
    pub fn feature_maps(&self, m: usize, prev: &[GgdPrediction]) -> Result<Vec<Array2<f64>>> {
        if m == 0 || m >= self.phases() {
            return Err(Error::Domain(format!("phase {m} has no input feature")));
        }
        let (f, _, _) = self.features(m, prev)?;
        Ok((0..f.n()).map(|i| crate::networks::tensor_plane(&f, i, 0)).collect())
    }

    /// Inference over a batch `[n, 1, h, w]`, returning predictions of phases `0..=upto`.
    pub fn infer_batch(&self, source: &Tensor, upto: usize) -> Result<Vec<Vec<GgdPrediction>>> {
        let mut out: Vec<Vec<GgdPrediction>> = Vec::with_capacity(upto + 1);
        for m in 0..=upto.min(self.phases() - 1) {
            let preds = if m == 0 {
                self.generators[0].infer(source)?
            } else {
                let (f, _, _) = self.features(m, &out[m - 1])?;
                self.generators[m].infer(&Tensor::concat_channels(&[&f, source]))?
            };
            out.push(preds);
        }
        Ok(out)
    }

    /// Forward pass over a batch where phases in `trainable` cache activations
    /// and earlier phases run in inference mode. Returns predictions for
    /// phases `0..trainable.end`.
    pub fn forward_batch(
        &mut self,
        source: &Tensor,
        trainable: Range<usize>,
    ) -> Result<Vec<Vec<GgdPrediction>>> {
        if trainable.end > self.phases() || trainable.start >= trainable.end {
            return Err(Error::Training(format!(
                "invalid trainable phase range {trainable:?} for {} phases",
                self.phases()
            )));
        }
        let mut out: Vec<Vec<GgdPrediction>> = Vec::with_capacity(trainable.end);
        for m in 0..trainable.end {
            let train = trainable.contains(&m);
            let preds = if m == 0 {
                if train {
                    self.generators[0].forward(source)?
                } else {
                    self.generators[0].infer(source)?
                }
            } else {
                let (mut f, caches, stack) = self.features(m, &out[m - 1])?;
                if train {
                    if let Some(stack) = stack {
                        f = self.fusions[m - 1].forward(&stack);
                    }
                    self.cache[m] = Some(caches);
                }
                let x = Tensor::concat_channels(&[&f, source]);
                if train {
                    self.generators[m].forward(&x)?
                } else {
                    self.generators[m].infer(&x)?
                }
            };
            out.push(preds);
        }
        Ok(out)
    }

    /// Back-propagates per-phase output gradients (`grads[j]` belongs to phase
    /// `trainable.start + j`) through the trainable phases, including the
    /// path from each phase's input feature into its predecessor.
    pub fn backward_batch(&mut self, trainable: Range<usize>, mut grads: Vec<Vec<GgdGrad>>) {
        assert_eq!(grads.len(), trainable.len(), "one gradient set per trainable phase");
        for m in trainable.clone().rev() {
            let j = m - trainable.start;
            let phase_grads = std::mem::take(&mut grads[j]);
            let dx = self.generators[m].backward(&phase_grads);
            if m == 0 {
                continue;
            }
            let d_feature = dx.split_channels(&[1, 1]).swap_remove(0);
            let d_feature = if self.guidance == Guidance::LearnedFusion {
                Some(self.fusions[m - 1].backward(&d_feature))
            } else {
                None
            };
            let caches = self.cache[m].take();
            if m == trainable.start {
                continue;
            }
            let caches = caches.expect("feature cache for trainable predecessor");
            let (h, w) = caches[0].prev.dim();
            let k = (h * w) as f64;
            for (i, c) in caches.iter().enumerate() {
                let target = &mut grads[j - 1][i];
                let mut d_att = Array2::<f64>::zeros((h, w));
                match (self.guidance, &d_feature) {
                    (Guidance::LearnedFusion, Some(gs)) => {
                        let g_mean = gs.plane(i, 0);
                        let g_scaled = gs.plane(i, 1);
                        let g_prod = gs.plane(i, 2);
                        let pixels = target
                            .mean
                            .iter_mut()
                            .zip(d_att.iter_mut())
                            .zip(c.prev.mean.iter().zip(&c.attention))
                            .zip(g_mean.iter().zip(g_scaled).zip(g_prod));
                        for (((dm, da), (&mean, &att)), ((&gm, &gs), &gp)) in pixels {
                            *dm += gm as f64 + gp as f64 * k * att;
                            *da += k * (gs as f64 + gp as f64 * mean);
                        }
                    }
                    _ => {
                        let plane = dx.plane(i, 0);
                        let g = ndarray::ArrayView2::from_shape((h, w), plane).expect("plane");
                        match self.guidance {
                            Guidance::NoGuidance => {
                                Zip::from(&mut target.mean).and(&g).for_each(|dm, &gf| *dm += gf as f64);
                            }
                            _ => {
                                Zip::from(&mut target.mean)
                                    .and(&mut d_att)
                                    .and(&c.prev.mean)
                                    .and(&c.attention)
                                    .and(&g)
                                    .for_each(|dm, da, &mean, &att, &gf| {
                                        *dm += gf as f64 * att;
                                        *da += gf as f64 * mean;
                                    });
                            }
                        }
                    }
                }
                if self.guidance != Guidance::NoGuidance {
                    attention_backward(&c.prev, &d_att, &mut target.alpha, &mut target.beta);
                }
            }
        }
    }
}

/// Mutable view over the parameters one phase owns.
pub struct PhaseParams<'a> {
    pub generator: &'a mut Generator,
    pub fusion: Option<&'a mut Conv2d>,
}

impl Module for PhaseParams<'_> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.generator.visit_params(f);
        if let Some(c) = &self.fusion {
            c.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.generator.visit_params_mut(f);
        if let Some(c) = &mut self.fusion {
            c.visit_params_mut(f);
        }
    }
}

/// Runs the full cascade on one source image and collects every phase.
pub fn upgan_forward(source: &Array2<f64>, cascade: &Cascade) -> Result<CascadeState> {
    let x = crate::networks::maps_to_tensor(&[source]);
    let preds = cascade.infer_batch(&x, cascade.phases() - 1)?;
    let last = preds.len() - 1;
    let mut phases = Vec::with_capacity(preds.len());
    for (m, mut p) in preds.into_iter().enumerate() {
        let prediction = p.swap_remove(0);
        let sigma = prediction.sigma();
        let attention = attention_map(&sigma)?;
        let feature = if m < last {
            Some(cascade.feature_maps(m + 1, std::slice::from_ref(&prediction))?.swap_remove(0))
        } else {
            None
        };
        phases.push(PhaseOutput {
            prediction,
            sigma,
            attention,
            feature,
        });
    }
    Ok(CascadeState {
        phases,
        source: source.clone(),
    })
}
