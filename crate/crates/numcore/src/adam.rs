use crate::error::{shape_err, NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor<f32>]) -> Self {
        Self {
            config,
            step_count: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(shape_err("adam_step", &[params.len()], &[grads.len(), self.m.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("adam_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(NumError::NonFinite { op: "adam_step" });
            }
        }
        for (i, m) in self.m.iter().enumerate() {
            if m.len() != params[i].len() {
                return Err(shape_err("adam_step", params[i].shape(), &[m.len()]));
            }
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new([2], vec![0.5, -1.0]).unwrap()];
        let g = vec![Tensor::zeros([2])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[0.5, -1.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: mhat = g, vhat = g^2, update = lr * g / (|g| + eps)
        let mut p = vec![Tensor::new([1], vec![0.0]).unwrap()];
        let g = vec![Tensor::new([1], vec![1.0]).unwrap()];
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &p);
        st.step(&mut p, &g).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = vec![Tensor::new([2], vec![0.3, 0.3]).unwrap()];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        for k in 0..10 {
            let g = vec![Tensor::full([2], (k as f32 * 0.7).sin())];
            st.step(&mut p, &g).unwrap();
        }
        assert_eq!(p[0].data()[0], p[0].data()[1]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros([2])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let g = vec![Tensor::zeros([3])];
        assert!(matches!(st.step(&mut p, &g), Err(NumError::ShapeMismatch { .. })));
    }
}
