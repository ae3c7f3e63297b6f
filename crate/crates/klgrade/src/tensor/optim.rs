//! Stochastic gradient descent with classical momentum.

use super::net::Network;
use super::TensorError;

/// Per-parameter velocity: `v <- mu * v + grad`, `w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, TensorError> {
        if !(lr > 0.0) {
            return Err(TensorError::BadLearningRate(lr));
        }
        Ok(Self { lr, momentum, velocity: Vec::new() })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<(), TensorError> {
        if !(lr > 0.0) {
            return Err(TensorError::BadLearningRate(lr));
        }
        self.lr = lr;
        Ok(())
    }

    /// Apply one update from the accumulated gradients. Parameters without a
    /// populated gradient are left untouched.
    pub fn step(&mut self, net: &mut Network) {
        if self.velocity.is_empty() {
            self.velocity = net.params().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (param, vel) in net.params_mut().zip(self.velocity.iter_mut()) {
            let Some(grad) = param.grad.clone() else { continue };
            let data = param.data_mut();
            for ((w, v), g) in data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::net::LayerSpec;
    use crate::rng::rng_from_seed;
    use crate::tensor::Tensor;

    fn one_param_net(w: f64) -> Network {
        let mut rng = rng_from_seed(0);
        let mut net =
            Network::init(vec![LayerSpec::Dense { in_features: 1, out_features: 1 }], &mut rng)
                .unwrap();
        net.params_mut().next().unwrap().data_mut()[0] = w;
        net
    }

    fn set_grad(net: &mut Network, g: f64) {
        let p = net.params_mut().next().unwrap();
        p.grad = Some(vec![g]);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(Sgd::new(0.0, 0.9).is_err());
        assert!(Sgd::new(-0.1, 0.9).is_err());
        assert!(Sgd::new(f64::NAN, 0.9).is_err());
    }

    #[test]
    fn plain_step_matches_hand_value() {
        // w=1, grad=0.5, lr=0.1, mu=0 -> w=0.95
        let mut net = one_param_net(1.0);
        set_grad(&mut net, 0.5);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.step(&mut net);
        assert_eq!(net.params().next().unwrap().data()[0], 0.95);
    }

    #[test]
    fn zero_grad_leaves_weights_unchanged() {
        let mut net = one_param_net(1.25);
        set_grad(&mut net, 0.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut net);
        opt.step(&mut net);
        assert_eq!(net.params().next().unwrap().data()[0], 1.25);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        // Two steps with mu = 0.9, lr = 0.1, grads 0.5 then 0.25:
        //   v1 = 0.5          w1 = 1 - 0.1*0.5  = 0.95
        //   v2 = 0.9*0.5+0.25 w2 = 0.95 - 0.1*0.7 = 0.88
        let mut net = one_param_net(1.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        set_grad(&mut net, 0.5);
        opt.step(&mut net);
        assert!((net.params().next().unwrap().data()[0] - 0.95).abs() < 1e-15);
        set_grad(&mut net, 0.25);
        opt.step(&mut net);
        assert!((net.params().next().unwrap().data()[0] - 0.88).abs() < 1e-15);
    }
}
