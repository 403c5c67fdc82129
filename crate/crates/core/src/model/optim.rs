use super::Hyperparams;

/// Adam with bias correction. Moment buffers start at zero.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, hyper: &Hyperparams) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: hyper.learning_rate,
            beta1: hyper.adam_beta1,
            beta2: hyper.adam_beta2,
            eps: hyper.adam_epsilon,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = self.lr / c1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / ((*v / c2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_identity() {
        let hyper = Hyperparams {
            learning_rate: 0.0,
            ..Hyperparams::bfc_default()
        };
        let mut p = vec![0.5, -1.0, 3.0];
        let before = p.clone();
        let mut adam = Adam::new(3, &hyper);
        adam.step(&mut p, &[1.0, -2.0, 0.3]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let hyper = Hyperparams::bfc_default();
        let mut p = vec![0.0, 0.0];
        Adam::new(2, &hyper).step(&mut p, &[3.0, -0.5]);
        assert!((p[0] + 0.001).abs() < 1e-9);
        assert!((p[1] - 0.001).abs() < 1e-9);
    }
}
