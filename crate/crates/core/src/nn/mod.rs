//! Minimal CPU layers with hand-written backward passes.
//!
//! Layers cache what they need during `forward` and consume it in
//! `backward`, accumulating parameter gradients into [`Param::grad`].
//! Tensors are dense `f32` in NCHW order.

mod adam;
mod conv;

pub use adam::{Adam, AdamState};
pub use conv::{avg_pool2, avg_pool2_backward, upsample2, upsample2_backward, Conv2d, LeakyRelu};

use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(&shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn plane(&self, i: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (i * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, i: usize, c: usize) -> &mut [f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (i * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let [n, _, h, w] = parts[0].shape;
        let c: usize = parts.iter().map(|t| t.c()).sum();
        let mut out = Tensor::zeros([n, c, h, w]);
        let hw = h * w;
        for i in 0..n {
            let mut offset = 0;
            let dst = out.sample_mut(i);
            for p in parts {
                debug_assert_eq!((p.n(), p.h(), p.w()), (n, h, w));
                let src = p.sample(i);
                dst[offset..offset + src.len()].copy_from_slice(src);
                offset += p.c() * hw;
            }
        }
        out
    }

    /// Splits along the channel axis into pieces of the given channel counts.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Tensor> {
        let [n, _, h, w] = self.shape;
        let hw = h * w;
        let mut out: Vec<Tensor> = sizes.iter().map(|&c| Tensor::zeros([n, c, h, w])).collect();
        for i in 0..n {
            let src = self.sample(i);
            let mut offset = 0;
            for (t, &c) in out.iter_mut().zip(sizes) {
                t.sample_mut(i).copy_from_slice(&src[offset..offset + c * hw]);
                offset += c * hw;
            }
        }
        out
    }

    /// Stacks along the batch axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Tensor {
        let [_, c, h, w] = parts[0].shape;
        let n = parts.iter().map(|t| t.n()).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor {
            shape: [n, c, h, w],
            data,
        }
    }

    /// Rows `start..end` of the batch axis.
    pub fn batch_range(&self, start: usize, end: usize) -> Tensor {
        let len = self.sample_len();
        Tensor {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * len..end * len].to_vec(),
        }
    }
}

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn new(value: Vec<f32>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = vec![0.0; value.len()];
        Self { value, grad, shape }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    fn grad_norm(&self) -> f64 {
        let mut s = 0.0f64;
        self.visit_params(&mut |p| s += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>());
        s.sqrt()
    }

    fn scale_grad(&mut self, factor: f32) {
        self.visit_params_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g *= factor));
    }

    fn flat_values(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn load_flat_values(&mut self, flat: &[f32]) -> Result<()> {
        let want = self.param_count();
        if flat.len() != want {
            return Err(Error::shape(&[want], &[flat.len()]));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_params(&mut |p| {
            for v in &p.value {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
