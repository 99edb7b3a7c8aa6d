use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the store's registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: Vec<Array4<F>>,
    pub second: Vec<Array4<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Self {
        let zeros: Vec<Array4<F>> = params
            .iter()
            .map(|(_, v)| Array4::zeros(v.raw_dim()))
            .collect();
        Self {
            config,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Array4<F>]) {
        assert_eq!(grads.len(), self.first.len(), "gradient count");
        self.steps += 1;
        let c = &self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let correction1 = 1.0 - c.beta1.powi(self.steps as i32);
        let correction2 = 1.0 - c.beta2.powi(self.steps as i32);
        let step_size = F::lit(c.lr / correction1);
        let correction2 = F::lit(correction2);
        let eps = F::lit(c.eps);
        let one = F::one();
        for (((param, grad), m), v) in params
            .values_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= step_size * *m / ((*v / correction2).sqrt() + eps);
                });
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Array4<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Array4::from_elem((1, 2, 1, 1), 1.0));
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &store,
        );
        let grad = Array4::from_shape_vec((1, 2, 1, 1), vec![3.0, -0.5]).unwrap();
        adam.step(&mut store, &[grad]);
        let w = store.by_name("w").unwrap();
        assert!((w[[0, 0, 0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1, 0, 0]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut grads = vec![
            Array4::from_elem((1, 1, 1, 1), 3.0f32),
            Array4::from_elem((1, 1, 1, 1), 4.0f32),
        ];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-9);
        assert!((grads[0][[0, 0, 0, 0]] - 0.6).abs() < 1e-6);
        assert!((grads[1][[0, 0, 0, 0]] - 0.8).abs() < 1e-6);
        let mut small = vec![Array4::from_elem((1, 1, 1, 1), 0.5f32)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0, 0, 0]], 0.5);
    }
}
