use super::{Param, Parameterized};

/// Stochastic gradient descent with optional Nesterov momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub nesterov: bool,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn step<P: Parameterized + ?Sized>(&self, model: &mut P) {
        model.for_each_param_mut(&mut |_, p| self.update(p));
    }

    fn update(&self, p: &mut Param) {
        for i in 0..p.value.len() {
            let g = p.grad[i] + self.weight_decay * p.value[i];
            let d = if self.momentum != 0.0 {
                p.velocity[i] = self.momentum * p.velocity[i] + g;
                if self.nesterov {
                    g + self.momentum * p.velocity[i]
                } else {
                    p.velocity[i]
                }
            } else {
                g
            };
            p.value[i] -= self.lr * d;
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameterized + ?Sized>(model: &mut P, max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    model.for_each_param(&mut |_, p| {
        sq += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
    });
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        model.for_each_param_mut(&mut |_, p| p.grad.iter_mut().for_each(|g| *g *= scale));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::super::{Layer, Tensor};
    use super::*;

    struct Single(Param);

    impl Layer for Single {
        fn forward(&self, x: &Tensor) -> Tensor {
            x.clone()
        }
        fn forward_train(&mut self, x: &Tensor) -> Tensor {
            x.clone()
        }
        fn backward(&mut self, g: &Tensor) -> Tensor {
            g.clone()
        }
        fn visit_params(&self, _: &str, f: &mut dyn FnMut(&str, &Param)) {
            f("p", &self.0)
        }
        fn visit_params_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f("p", &mut self.0)
        }
    }

    #[test]
    fn nesterov_step_matches_hand_computation() {
        let mut l = Single(Param::new(vec![1], vec![1.0]));
        let opt = Sgd { lr: 0.1, momentum: 0.9, nesterov: true, weight_decay: 0.5 };
        l.0.grad = vec![2.0];
        opt.step(&mut l);
        // g = 2 + 0.5 = 2.5, v = 2.5, d = 2.5 + 0.9 * 2.5 = 4.75
        assert!((l.0.value[0] - (1.0 - 0.475)).abs() < 1e-6);
        assert!((l.0.velocity[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut l = Single(Param::new(vec![2], vec![0.0, 0.0]));
        l.0.grad = vec![30.0, 40.0];
        assert_eq!(clip_grad_norm(&mut l, 12.0), 50.0);
        let n = (l.0.grad[0].powi(2) + l.0.grad[1].powi(2)).sqrt();
        assert!((n - 12.0).abs() < 1e-3);
        l.0.grad = vec![3.0, 4.0];
        clip_grad_norm(&mut l, 12.0);
        assert_eq!(l.0.grad, vec![3.0, 4.0]);
    }
}
