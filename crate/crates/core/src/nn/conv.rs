use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Module, Param, Tensor};

/// 2-D convolution with square kernel, symmetric zero padding and a bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    /// He-normal initialization scaled by `gain`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = gain * (2.0 / fan_in as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(weight, vec![out_channels, in_channels, kernel, kernel]),
            bias: Param::new(vec![0.0; out_channels], vec![out_channels]),
            input: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let p = ho * wo;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let p = ho * wo;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.in_channels, "conv input channels");
        let (n, h, w) = (x.n(), x.h(), x.w());
        let (ho, wo) = self.output_hw(h, w);
        let p = ho * wo;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.out_channels, ho, wo]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
        for i in 0..n {
            let b: &[f32] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), h, w, &mut cols);
                &cols
            };
            let dst = out.sample_mut(i);
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            unsafe {
                matrixmultiply::sgemm(
                    self.out_channels,
                    kk,
                    p,
                    1.0,
                    self.weight.value.as_ptr(),
                    kk as isize,
                    1,
                    b.as_ptr(),
                    p as isize,
                    1,
                    1.0,
                    dst.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("Conv2d::backward without forward");
        let (n, h, w) = (x.n(), x.h(), x.w());
        let (ho, wo) = self.output_hw(h, w);
        let p = ho * wo;
        let kk = self.in_channels * self.kernel * self.kernel;
        assert_eq!(dy.shape(), [n, self.out_channels, ho, wo], "conv grad shape");
        let mut dx = Tensor::zeros(x.shape());
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
        let mut dcols = vec![0.0; kk * p];
        for i in 0..n {
            let g = dy.sample(i);
            for (o, row) in g.chunks(p).enumerate() {
                self.bias.grad[o] += row.iter().sum::<f32>();
            }
            let b: &[f32] = if pointwise {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), h, w, &mut cols);
                &cols
            };
            unsafe {
                // dW += dY · colsᵀ
                matrixmultiply::sgemm(
                    self.out_channels,
                    p,
                    kk,
                    1.0,
                    g.as_ptr(),
                    p as isize,
                    1,
                    b.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    self.weight.grad.as_mut_ptr(),
                    kk as isize,
                    1,
                );
                // dcols = Wᵀ · dY
                matrixmultiply::sgemm(
                    kk,
                    self.out_channels,
                    p,
                    1.0,
                    self.weight.value.as_ptr(),
                    1,
                    kk as isize,
                    g.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            if pointwise {
                dx.sample_mut(i).copy_from_slice(&dcols);
            } else {
                self.col2im(&dcols, h, w, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f32,
    input: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        Self { slope, input: None }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v > 0.0 { *v } else { *v * self.slope });
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("LeakyRelu::backward without forward");
        let mut dx = dy.clone();
        dx.data_mut()
            .iter_mut()
            .zip(x.data())
            .for_each(|(g, &v)| {
                if v <= 0.0 {
                    *g *= self.slope
                }
            });
        dx
    }
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..ho {
                for xx in 0..wo {
                    let a = src[2 * y * w + 2 * xx];
                    let b = src[2 * y * w + 2 * xx + 1];
                    let c2 = src[(2 * y + 1) * w + 2 * xx];
                    let d = src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * wo + xx] = 0.25 * (a + b + c2 + d);
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Tensor) -> Tensor {
    let [n, c, ho, wo] = dy.shape();
    let (h, w) = (ho * 2, wo * 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let src = dy.plane(i, ch);
            let dst = dx.plane_mut(i, ch);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = 0.25 * src[(y / 2) * wo + xx / 2];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * 2, w * 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let [n, c, ho, wo] = dy.shape();
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let src = dy.plane(i, ch);
            let dst = dx.plane_mut(i, ch);
            for y in 0..ho {
                for xx in 0..wo {
                    dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (ho, wo) = conv.output_hw(x.h(), x.w());
        let mut out = Tensor::zeros([x.n(), conv.out_channels, ho, wo]);
        let k = conv.kernel;
        for i in 0..x.n() {
            for o in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.value[o] as f64;
                        for c in 0..conv.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * conv.in_channels + c) * k + ky) * k + kx];
                                    acc += wv as f64
                                        * x.plane(i, c)[iy as usize * x.w() + ix as usize] as f64;
                                }
                            }
                        }
                        out.plane_mut(i, o)[oy * wo + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 5, k, s, p, 1.0, &mut rng);
            conv.bias.value.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            let x = random_tensor([2, 3, 8, 8], &mut rng);
            let fast = conv.infer(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, s, p) in [(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(2, 3, k, s, p, 1.0, &mut rng);
            let x = random_tensor([1, 2, 6, 6], &mut rng);
            let y = conv.forward(&x);
            // Loss = Σ y ⊙ r for a fixed random r.
            let r = random_tensor(y.shape(), &mut rng);
            let dx = conv.backward(&r);
            let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
                conv.infer(x)
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum()
            };
            let h = 1e-2f32;
            for idx in [0usize, 7, 30, 71] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= h;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h as f64);
                assert!((fd - dx.data()[idx] as f64).abs() < 1e-3, "dx[{idx}]");
            }
            for idx in [0usize, 5, conv.weight.len() - 1] {
                let mut cp = conv.clone();
                cp.weight.value[idx] += h;
                let mut cm = conv.clone();
                cm.weight.value[idx] -= h;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h as f64);
                assert!((fd - conv.weight.grad[idx] as f64).abs() < 1e-3, "dw[{idx}]");
            }
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor([1, 2, 4, 4], &mut rng);
        let y = random_tensor([1, 2, 2, 2], &mut rng);
        // <pool(x), y> = <x, pool_backward(y)>
        let lhs: f32 = avg_pool2(&x).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data().iter().zip(avg_pool2_backward(&y).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);
        let lhs: f32 = upsample2(&y).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs: f32 = y.data().iter().zip(upsample2_backward(&x).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }
}
