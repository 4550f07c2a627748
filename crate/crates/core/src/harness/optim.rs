//! Adam with decoupled weight decay, and global-norm gradient clipping.

use crate::autodiff::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, weight_decay: f64) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, decay) = (self.beta1, self.beta2, self.eps, lr * self.weight_decay);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= decay * *p;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the norm before.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = vec![array![[1.0, -2.0], [0.5, 0.0]]];
        let g = vec![Tensor::zeros((2, 2))];
        let mut opt = AdamW::new([(2, 2)], 1e-4);
        opt.step(&mut p, &g, 1e-2);
        let k = 1.0 - 1e-2 * 1e-4;
        assert_eq!(p[0], array![[1.0 * k, -2.0 * k], [0.5 * k, 0.0]]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g) up to eps
        let mut p = vec![array![[0.0, 0.0]]];
        let g = vec![array![[3.0, -0.2]]];
        let mut opt = AdamW::new([(1, 2)], 0.0);
        opt.step(&mut p, &g, 0.1);
        assert!((p[0][[0, 0]] + 0.1).abs() < 1e-8);
        assert!((p[0][[0, 1]] - 0.1).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![array![[5.0, -3.0]]];
        let mut opt = AdamW::new([(1, 2)], 0.0);
        for _ in 0..2000 {
            let g = vec![p[0].mapv(|x| 2.0 * x)];
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p[0].iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping() {
        let mut g = vec![array![[3.0]], array![[4.0]]];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0][[0, 0]], 3.0);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-15);
        let mut h = vec![array![[30.0]]];
        clip_global_norm(&mut h, 0.0);
        assert_eq!(h[0][[0, 0]], 30.0);
    }
}
