use super::Module;

/// First and second moment estimates, flattened in parameter visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(param_count: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                m: vec![0.0; param_count],
                v: vec![0.0; param_count],
            },
        }
    }

    /// Applies one update to every parameter of `module` using its accumulated gradients.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let state = &mut self.state;
        let mut offset = 0;
        module.visit_params_mut(&mut |p| {
            let m = &mut state.m[offset..offset + p.len()];
            let v = &mut state.v[offset..offset + p.len()];
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m).zip(v) {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
            offset += p.len();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Scalar(Param);

    impl Module for Scalar {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_two_steps_on_quadratic_match_hand_computation() {
        // f(w) = (w − 3)², w0 = 1, lr = 0.1.
        let mut w = Scalar(Param::new(vec![1.0], vec![1]));
        let mut opt = Adam::new(1, 0.9, 0.999);

        w.0.grad[0] = 2.0 * (1.0 - 3.0); // −4
        opt.step(&mut w, 0.1);
        // m̂ = −4, v̂ = 16 ⇒ Δ = −0.1·(−4)/(4 + 1e−8)
        let w1 = 1.0 + 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((w.0.value[0] as f64 - w1).abs() < 1e-6);

        let g2 = 2.0 * (w1 - 3.0);
        w.0.grad[0] = g2 as f32;
        opt.step(&mut w, 0.1);
        let m2 = 0.9 * (0.1 * -4.0) + 0.1 * g2;
        let v2 = 0.999 * (0.001 * 16.0) + 0.001 * g2 * g2;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.998_001);
        let w2 = w1 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((w.0.value[0] as f64 - w2).abs() < 1e-6);
        assert_eq!(opt.state.step, 2);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut w = Scalar(Param::new(vec![-2.0], vec![1]));
        let mut opt = Adam::new(1, 0.9, 0.999);
        for _ in 0..2000 {
            w.0.grad[0] = 2.0 * (w.0.value[0] - 3.0);
            opt.step(&mut w, 0.05);
        }
        assert!((w.0.value[0] - 3.0).abs() < 1e-2);
    }
}
