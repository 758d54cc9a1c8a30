//! Adam with global-norm gradient clipping.

use crate::tensor::Params;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable array in `params` from the matching
    /// array in `grad` (same `visit` order).
    pub fn step<P: Params>(&mut self, params: &mut P, grad: &P) {
        let mut grads = Vec::new();
        grad.visit("", &mut |_, a, trainable| {
            if trainable {
                grads.push(a.data.clone());
            }
        });
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, a, trainable| {
            if !trainable {
                return;
            }
            let (g, m, v) = (&grads[i], &mut ms[i], &mut vs[i]);
            for j in 0..a.data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                a.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// L2 norm over all trainable gradient entries.
pub fn grad_norm<P: Params>(grad: &P) -> f64 {
    let mut s = 0.0;
    grad.visit("", &mut |_, a, trainable| {
        if trainable {
            s += a.data.iter().map(|x| x * x).sum::<f64>();
        }
    });
    s.sqrt()
}

/// Rescales `grad` so its norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<P: Params>(grad: &mut P, max_norm: f64) -> f64 {
    let norm = grad_norm(grad);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grad.visit_mut("", &mut |_, a, _| {
            for x in a.data.iter_mut() {
                *x *= k;
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut rng = crate::rng::seeded(0);
        let mut p = Linear::new(2, 2, &mut rng);
        let before = p.clone();
        let mut g = p.clone();
        g.w.data = vec![0.5, -2.0, 0.0, 3.0];
        g.b.data = vec![1e-3, -1e-3];
        let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-12);
        opt.step(&mut p, &g);
        let moved: Vec<f64> = p.w.data.iter().zip(&before.w.data).map(|(a, b)| a - b).collect();
        for (d, want) in moved.iter().zip([-0.01, 0.01, 0.0, -0.01]) {
            assert!((d - want).abs() < 1e-9);
        }
    }

    #[test]
    fn clipping() {
        let mut rng = crate::rng::seeded(0);
        let mut g = Linear::new(3, 1, &mut rng);
        g.w.data = vec![3.0, 0.0, 0.0];
        g.b.data = vec![4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut g, 10.0), grad_norm(&g));
    }
}
