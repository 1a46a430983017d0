//! Generator (encoder–decoder with skip connections and a three-way GGD head)
//! and patch discriminator.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ggd::{BetaClamp, GgdGrad, GgdPrediction};
use crate::nn::{
    avg_pool2, avg_pool2_backward, upsample2, upsample2_backward, Conv2d, LeakyRelu, Module, Param,
    Tensor,
};
use crate::{Error, Result};

const SLOPE: f32 = 0.2;

fn default_alpha_floor() -> f64 {
    crate::ggd::ALPHA_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// 1 for the primary phase, 2 for later phases (feature, source).
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of 2× down/up levels.
    pub depth: usize,
    #[serde(default)]
    pub beta_clamp: BetaClamp,
    #[serde(default = "default_alpha_floor")]
    pub alpha_floor: f64,
    /// Fixed per-channel multipliers applied to the input; empty means all ones.
    #[serde(default)]
    pub input_gains: Vec<f32>,
}

impl GeneratorConfig {
    pub fn new(in_channels: usize, base_width: usize, depth: usize) -> Self {
        Self {
            in_channels,
            base_width,
            depth,
            beta_clamp: BetaClamp::default(),
            alpha_floor: crate::ggd::ALPHA_FLOOR,
            input_gains: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("generator depth must be at least 1".into()));
        }
        if self.in_channels < 1 || self.base_width < 1 {
            return Err(Error::Config("generator channels must be positive".into()));
        }
        if !(self.alpha_floor > 0.0) {
            return Err(Error::Config("alpha_floor must be positive".into()));
        }
        if !self.input_gains.is_empty() && self.input_gains.len() != self.in_channels {
            return Err(Error::Config(format!(
                "input_gains has {} entries for {} channels",
                self.input_gains.len(),
                self.in_channels
            )));
        }
        self.beta_clamp.validate()
    }

    pub fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.in_channels {
            return Err(Error::shape(&[self.in_channels, h, w], &[c, h, w]));
        }
        let div = 1usize << self.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Domain(format!(
                "input {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Two 3×3 convolutions, each followed by a leaky ReLU.
#[derive(Debug, Clone)]
struct ConvBlock {
    c1: Conv2d,
    a1: LeakyRelu,
    c2: Conv2d,
    a2: LeakyRelu,
}

impl ConvBlock {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            c1: Conv2d::new(cin, cout, 3, 1, 1, 1.0, rng),
            a1: LeakyRelu::new(SLOPE),
            c2: Conv2d::new(cout, cout, 3, 1, 1, 1.0, rng),
            a2: LeakyRelu::new(SLOPE),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.a1.forward(&self.c1.forward(x));
        self.a2.forward(&self.c2.forward(&y))
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let y = self.a1.infer(&self.c1.infer(x));
        self.a2.infer(&self.c2.infer(&y))
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let g = self.a2.backward(dy);
        let g = self.c2.backward(&g);
        let g = self.a1.backward(&g);
        self.c1.backward(&g)
    }
}

impl Module for ConvBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.c1.visit_params(f);
        self.c2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.c1.visit_params_mut(f);
        self.c2.visit_params_mut(f);
    }
}

/// One output head: 3×3 conv, leaky ReLU, 1×1 projection to a single map.
#[derive(Debug, Clone)]
struct Head {
    conv: Conv2d,
    act: LeakyRelu,
    proj: Conv2d,
}

impl Head {
    fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(width, width, 3, 1, 1, 1.0, rng),
            act: LeakyRelu::new(SLOPE),
            proj: Conv2d::new(width, 1, 1, 1, 0, 0.5, rng),
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.act.forward(&self.conv.forward(x));
        self.proj.forward(&y)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.proj.infer(&self.act.infer(&self.conv.infer(x)))
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let g = self.proj.backward(dy);
        let g = self.act.backward(&g);
        self.conv.backward(&g)
    }
}

impl Module for Head {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_params(f);
        self.proj.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        self.proj.visit_params_mut(f);
    }
}

fn softplus(z: f64) -> f64 {
    if z > 20.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// U-Net style generator whose head is split into mean, scale and shape branches.
///
/// Head activations guarantee the output invariants by construction:
/// `mean = tanh(z₀)`, `α = floor + softplus(z₁)`,
/// `β = β_min + (β_max − β_min)·sigmoid(z₂)`.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    encoder: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    up: Vec<(Conv2d, LeakyRelu)>,
    decoder: Vec<ConvBlock>,
    heads: [Head; 3],
    /// Head pre-activations from the last cached forward, `[n, 3, h, w]`.
    pre: Option<Tensor>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.depth;
        let mut encoder = Vec::with_capacity(d);
        let mut cin = config.in_channels;
        for level in 0..d {
            encoder.push(ConvBlock::new(cin, config.width(level), rng));
            cin = config.width(level);
        }
        let bottleneck = ConvBlock::new(cin, config.width(d), rng);
        let mut up = Vec::with_capacity(d);
        let mut decoder = Vec::with_capacity(d);
        // Stored deepest level first, in execution order.
        for level in (0..d).rev() {
            up.push((
                Conv2d::new(config.width(level + 1), config.width(level), 3, 1, 1, 1.0, rng),
                LeakyRelu::new(SLOPE),
            ));
            decoder.push(ConvBlock::new(2 * config.width(level), config.width(level), rng));
        }
        let w0 = config.width(0);
        let heads = [Head::new(w0, rng), Head::new(w0, rng), Head::new(w0, rng)];
        Ok(Self {
            config,
            encoder,
            bottleneck,
            up,
            decoder,
            heads,
            pre: None,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Copies every weight of `src`, which must share width and depth. When
    /// `src` takes fewer input channels, its first-layer filters map onto
    /// this generator's trailing input channels and the leading ones get
    /// zero weights, so both produce identical outputs on the shared channels.
    pub fn warm_start_from(&mut self, src: &Generator) -> Result<()> {
        let (a, b) = (&self.config, &src.config);
        if a.base_width != b.base_width || a.depth != b.depth || b.in_channels > a.in_channels {
            return Err(Error::Config("warm start needs matching width and depth".into()));
        }
        let mut values: Vec<(Vec<usize>, Vec<f32>)> = Vec::new();
        src.visit_params(&mut |p| values.push((p.shape.clone(), p.value.clone())));
        let mut k = 0;
        self.visit_params_mut(&mut |p| {
            let (shape, v) = &values[k];
            if *shape == p.shape {
                p.value.copy_from_slice(v);
            } else {
                // First convolution: [out, in, kh, kw] with fewer source inputs.
                let (cin_src, cin_dst) = (shape[1], p.shape[1]);
                let per = shape[2] * shape[3];
                p.value.iter_mut().for_each(|w| *w = 0.0);
                for o in 0..shape[0] {
                    for c in 0..cin_src {
                        let from = (o * cin_src + c) * per;
                        let to = (o * cin_dst + cin_dst - cin_src + c) * per;
                        p.value[to..to + per].copy_from_slice(&v[from..from + per]);
                    }
                }
            }
            k += 1;
        });
        Ok(())
    }

    fn gained(&self, x: &Tensor) -> Tensor {
        if self.config.input_gains.iter().all(|&g| g == 1.0) {
            return x.clone();
        }
        let mut y = x.clone();
        for i in 0..x.n() {
            for (c, &g) in self.config.input_gains.iter().enumerate() {
                y.plane_mut(i, c).iter_mut().for_each(|v| *v *= g);
            }
        }
        y
    }

    fn forward_trunk(&mut self, x: &Tensor) -> Tensor {
        let mut h = self.gained(x);
        let mut skips = Vec::with_capacity(self.config.depth);
        for block in &mut self.encoder {
            let y = block.forward(&h);
            h = avg_pool2(&y);
            skips.push(y);
        }
        h = self.bottleneck.forward(&h);
        for ((conv_up, a), block) in self.up.iter_mut().zip(self.decoder.iter_mut()) {
            let u = a.forward(&conv_up.forward(&upsample2(&h)));
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::concat_channels(&[&u, &skip]));
        }
        let z: Vec<Tensor> = self.heads.iter_mut().map(|hd| hd.forward(&h)).collect();
        Tensor::concat_channels(&[&z[0], &z[1], &z[2]])
    }

    fn infer_trunk(&self, x: &Tensor) -> Tensor {
        let mut h = self.gained(x);
        let mut skips = Vec::with_capacity(self.config.depth);
        for block in &self.encoder {
            let y = block.infer(&h);
            h = avg_pool2(&y);
            skips.push(y);
        }
        h = self.bottleneck.infer(&h);
        for ((conv_up, a), block) in self.up.iter().zip(self.decoder.iter()) {
            let u = a.infer(&conv_up.infer(&upsample2(&h)));
            let skip = skips.pop().expect("one skip per level");
            h = block.infer(&Tensor::concat_channels(&[&u, &skip]));
        }
        let z: Vec<Tensor> = self.heads.iter().map(|hd| hd.infer(&h)).collect();
        Tensor::concat_channels(&[&z[0], &z[1], &z[2]])
    }

    fn activate(&self, pre: &Tensor) -> Result<Vec<GgdPrediction>> {
        let (h, w) = (pre.h(), pre.w());
        let clamp = self.config.beta_clamp;
        let floor = self.config.alpha_floor;
        let range = clamp.max - clamp.min;
        (0..pre.n())
            .map(|i| {
                let map = |c: usize, f: &dyn Fn(f64) -> f64| {
                    Array2::from_shape_vec(
                        (h, w),
                        pre.plane(i, c).iter().map(|&z| f(z as f64)).collect(),
                    )
                    .expect("plane size")
                };
                let mean = map(0, &|z| z.tanh());
                let alpha = map(1, &|z| floor + softplus(z));
                let beta = map(2, &|z| (clamp.min + range * sigmoid(z)).clamp(clamp.min, clamp.max));
                if mean.iter().chain(alpha.iter()).chain(beta.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("generator output"));
                }
                Ok(GgdPrediction { mean, alpha, beta })
            })
            .collect()
    }

    /// Forward pass that caches activations for [`Generator::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Vec<GgdPrediction>> {
        self.config.check_input(x.c(), x.h(), x.w())?;
        let pre = self.forward_trunk(x);
        let preds = self.activate(&pre)?;
        self.pre = Some(pre);
        Ok(preds)
    }

    /// Forward pass without caching; does not disturb a pending backward.
    pub fn infer(&self, x: &Tensor) -> Result<Vec<GgdPrediction>> {
        self.config.check_input(x.c(), x.h(), x.w())?;
        self.activate(&self.infer_trunk(x))
    }

    /// Back-propagates per-sample gradients of the three output maps,
    /// accumulating parameter gradients and returning the input gradient.
    pub fn backward(&mut self, grads: &[GgdGrad]) -> Tensor {
        let pre = self.pre.take().expect("Generator::backward without forward");
        let [n, _, h, w] = pre.shape();
        assert_eq!(grads.len(), n, "one gradient per sample");
        let clamp = self.config.beta_clamp;
        let range = clamp.max - clamp.min;
        let mut dz = [
            Tensor::zeros([n, 1, h, w]),
            Tensor::zeros([n, 1, h, w]),
            Tensor::zeros([n, 1, h, w]),
        ];
        for (i, g) in grads.iter().enumerate() {
            let zs = [pre.plane(i, 0), pre.plane(i, 1), pre.plane(i, 2)];
            let [d0, d1, d2] = &mut dz;
            for (o, (&z, &gm)) in d0.plane_mut(i, 0).iter_mut().zip(zs[0].iter().zip(&g.mean)) {
                let t = (z as f64).tanh();
                *o = (gm * (1.0 - t * t)) as f32;
            }
            for (o, (&z, &ga)) in d1.plane_mut(i, 0).iter_mut().zip(zs[1].iter().zip(&g.alpha)) {
                *o = (ga * sigmoid(z as f64)) as f32;
            }
            for (o, (&z, &gb)) in d2.plane_mut(i, 0).iter_mut().zip(zs[2].iter().zip(&g.beta)) {
                let s = sigmoid(z as f64);
                *o = (gb * range * s * (1.0 - s)) as f32;
            }
        }
        let mut dh = self.heads[0].backward(&dz[0]);
        for (head, d) in self.heads.iter_mut().zip(&dz).skip(1) {
            let g = head.backward(d);
            dh.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        let mut skip_grads = Vec::with_capacity(self.config.depth);
        for ((conv_up, a), block) in self.up.iter_mut().zip(self.decoder.iter_mut()).rev() {
            let g = block.backward(&dh);
            let width = g.c() / 2;
            let mut parts = g.split_channels(&[width, width]);
            skip_grads.push(parts.pop().expect("skip half"));
            let gu = a.backward(&parts[0]);
            let gu = conv_up.backward(&gu);
            dh = upsample2_backward(&gu);
        }
        // skip_grads is shallowest level first.
        dh = self.bottleneck.backward(&dh);
        for (block, skip) in self.encoder.iter_mut().zip(skip_grads.iter()).rev() {
            let mut g = avg_pool2_backward(&dh);
            g.data_mut().iter_mut().zip(skip.data()).for_each(|(a, b)| *a += b);
            dh = block.backward(&g);
        }
        if !self.config.input_gains.is_empty() {
            for i in 0..n {
                for (c, &gain) in self.config.input_gains.iter().enumerate() {
                    dh.plane_mut(i, c).iter_mut().for_each(|v| *v *= gain);
                }
            }
        }
        dh
    }
}

impl Module for Generator {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.encoder {
            b.visit_params(f);
        }
        self.bottleneck.visit_params(f);
        for ((c, _), b) in self.up.iter().zip(&self.decoder) {
            c.visit_params(f);
            b.visit_params(f);
        }
        for h in &self.heads {
            h.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.encoder {
            b.visit_params_mut(f);
        }
        self.bottleneck.visit_params_mut(f);
        for ((c, _), b) in self.up.iter_mut().zip(&mut self.decoder) {
            c.visit_params_mut(f);
            b.visit_params_mut(f);
        }
        for h in &mut self.heads {
            h.visit_params_mut(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Number of stride-2 4×4 convolutions before the 3×3 scoring layer.
    pub layers: usize,
    pub base_width: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.in_channels < 1 || self.base_width < 1 {
            return Err(Error::Config(
                "discriminator layers and channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Total input stride between adjacent score-map cells.
    pub fn stride(&self) -> usize {
        1 << self.layers
    }

    /// Side of the input patch seen by one score-map cell.
    pub fn receptive_field(&self) -> usize {
        // Scoring layer: 3×3 at the output resolution; walk back through the
        // stride-2 4×4 layers: rf_in = (rf_out − 1)·2 + 4.
        (0..self.layers).fold(3, |rf, _| (rf - 1) * 2 + 4)
    }
}

/// Patch discriminator producing an unsquashed score per cell.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    convs: Vec<(Conv2d, LeakyRelu)>,
    score: Conv2d,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.layers);
        let mut cin = config.in_channels;
        for i in 0..config.layers {
            let cout = config.base_width << i.min(3);
            convs.push((Conv2d::new(cin, cout, 4, 2, 1, 1.0, rng), LeakyRelu::new(SLOPE)));
            cin = cout;
        }
        let score = Conv2d::new(cin, 1, 3, 1, 1, 1.0, rng);
        Ok(Self { config, convs, score })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let s = self.config.stride();
        if x.c() != self.config.in_channels || x.h() % s != 0 || x.w() % s != 0 || x.h() == 0 {
            return Err(Error::Domain(format!(
                "discriminator expects {} channels with sides divisible by {s}, got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = x.clone();
        for (c, a) in &mut self.convs {
            h = a.forward(&c.forward(&h));
        }
        Ok(self.score.forward(&h))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut h = x.clone();
        for (c, a) in &self.convs {
            h = a.infer(&c.infer(&h));
        }
        Ok(self.score.infer(&h))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = self.score.backward(dy);
        for (c, a) in self.convs.iter_mut().rev() {
            g = c.backward(&a.backward(&g));
        }
        g
    }
}

impl Module for Discriminator {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for (c, _) in &self.convs {
            c.visit_params(f);
        }
        self.score.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (c, _) in &mut self.convs {
            c.visit_params_mut(f);
        }
        self.score.visit_params_mut(f);
    }
}

/// Packs single-channel maps into an `[n, 1, h, w]` tensor.
pub fn maps_to_tensor(maps: &[&Array2<f64>]) -> Tensor {
    let (h, w) = maps[0].dim();
    let data = maps
        .iter()
        .flat_map(|m| m.iter().map(|&v| v as f32))
        .collect();
    Tensor::from_vec([maps.len(), 1, h, w], data).expect("uniform map shapes")
}

/// Unpacks channel `c` of sample `i` into an `f64` map.
pub fn tensor_plane(t: &Tensor, i: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((t.h(), t.w()), t.plane(i, c).iter().map(|&v| v as f64).collect())
        .expect("plane size")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn random_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([1, c, h, w], (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn generator_output_satisfies_invariants() {
        let cfg = GeneratorConfig::new(1, 8, 3);
        let g = Generator::new(cfg.clone(), &mut rng()).unwrap();
        let out = g.infer(&random_input(1, 64, 64, 1)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].dim(), (64, 64));
        out[0].validate(cfg.beta_clamp).unwrap();
        assert!(out[0].mean.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn generator_is_deterministic() {
        let g = Generator::new(GeneratorConfig::new(1, 4, 2), &mut rng()).unwrap();
        let x = random_input(1, 16, 16, 2);
        assert_eq!(g.infer(&x).unwrap(), g.infer(&x).unwrap());
        let mut g2 = g.clone();
        assert_eq!(g2.forward(&x).unwrap(), g.infer(&x).unwrap());
    }

    #[test]
    fn two_channel_phase_input() {
        let g = Generator::new(GeneratorConfig::new(2, 4, 3), &mut rng()).unwrap();
        let out = g.infer(&random_input(2, 64, 64, 3)).unwrap();
        out[0].validate(BetaClamp::default()).unwrap();
        assert!(g.infer(&random_input(1, 64, 64, 3)).is_err());
    }

    #[test]
    fn generator_rejects_indivisible_input() {
        let g = Generator::new(GeneratorConfig::new(1, 4, 3), &mut rng()).unwrap();
        assert!(g.infer(&random_input(1, 20, 20, 3)).is_err());
        assert!(GeneratorConfig::new(1, 4, 0).validate().is_err());
    }

    #[test]
    fn parameter_count_is_stable() {
        let a = Generator::new(GeneratorConfig::new(1, 8, 3), &mut rng()).unwrap();
        let b = Generator::new(GeneratorConfig::new(1, 8, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn generator_input_gradient_matches_finite_differences() {
        let mut cfg = GeneratorConfig::new(2, 3, 2);
        cfg.input_gains = vec![3.0, 1.0];
        let mut g = Generator::new(cfg, &mut rng()).unwrap();
        let x = random_input(2, 8, 8, 4);
        let mut wr = ChaCha8Rng::seed_from_u64(8);
        let weights: Vec<[f64; 3]> = (0..64)
            .map(|_| [wr.random_range(-1.0..1.0), wr.random_range(-1.0..1.0), wr.random_range(-1.0..1.0)])
            .collect();
        let loss = |p: &GgdPrediction| -> f64 {
            p.mean
                .iter()
                .zip(&p.alpha)
                .zip(&p.beta)
                .zip(&weights)
                .map(|(((m, a), b), w)| w[0] * m + w[1] * a + w[2] * b)
                .sum()
        };
        g.forward(&x).unwrap();
        let grad = GgdGrad {
            mean: Array2::from_shape_fn((8, 8), |(i, j)| weights[i * 8 + j][0]),
            alpha: Array2::from_shape_fn((8, 8), |(i, j)| weights[i * 8 + j][1]),
            beta: Array2::from_shape_fn((8, 8), |(i, j)| weights[i * 8 + j][2]),
        };
        let dx = g.backward(&[grad]);
        let h = 5e-4f32;
        for idx in [0usize, 9, 40, 64, 100, 127] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&g.infer(&xp).unwrap()[0]) - loss(&g.infer(&xm).unwrap()[0])) / (2.0 * h as f64);
            let an = dx.data()[idx] as f64;
            assert!((fd - an).abs() < 0.05 * fd.abs() + 1e-3, "idx {idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn warm_start_reproduces_the_source_on_shared_channels() {
        let src = Generator::new(GeneratorConfig::new(1, 4, 2), &mut rng()).unwrap();
        let mut cfg = GeneratorConfig::new(2, 4, 2);
        cfg.input_gains = vec![50.0, 1.0];
        let mut dst = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        dst.warm_start_from(&src).unwrap();
        let a = random_input(1, 16, 16, 9);
        let f = random_input(1, 16, 16, 10);
        let both = Tensor::concat_channels(&[&f, &a]);
        assert_eq!(dst.infer(&both).unwrap(), src.infer(&a).unwrap());
        let wide = Generator::new(GeneratorConfig::new(1, 8, 2), &mut rng()).unwrap();
        assert!(dst.warm_start_from(&wide).is_err());
    }

    #[test]
    fn discriminator_score_map_geometry() {
        let cfg = DiscriminatorConfig {
            in_channels: 1,
            layers: 3,
            base_width: 8,
        };
        assert_eq!(cfg.receptive_field(), 38);
        let d = Discriminator::new(cfg, &mut rng()).unwrap();
        let s = d.infer(&random_input(1, 64, 64, 5)).unwrap();
        assert_eq!(s.shape(), [1, 1, 8, 8]);
    }

    #[test]
    fn discriminator_batch_items_are_independent() {
        let d = Discriminator::new(
            DiscriminatorConfig {
                in_channels: 1,
                layers: 2,
                base_width: 4,
            },
            &mut rng(),
        )
        .unwrap();
        let x = random_input(1, 16, 16, 6);
        let s = d.infer(&Tensor::concat_batch(&[&x, &x])).unwrap();
        assert_eq!(s.sample(0), s.sample(1));
    }
}
