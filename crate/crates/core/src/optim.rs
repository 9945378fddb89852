//! Adam over the parameters of one network.

use crate::error::{Error, Result};
use crate::nets::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(net: &Network, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            net.params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. `grads[i]` is the gradient of parameter
    /// `i`; `None` means no gradient reached it.
    pub fn step(&mut self, net: &mut Network, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || net.params().len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer for {} holds {} slots, got {} gradients",
                net.kind(),
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::nets::{build_network, NetKind};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = RunConfig::default();
        let mut net = build_network(NetKind::Predictor, &cfg, 0);
        let before = net.clone();
        let mut opt = Adam::new(&net, 0.5, 0.999, 1e-8);
        let grads: Vec<Option<Tensor>> = net
            .params()
            .iter()
            .map(|p| Some(p.value.map(|_| -3.0)))
            .collect();
        opt.step(&mut net, &grads, 1e-3).unwrap();
        for (a, b) in net.params().iter().zip(before.params()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y - 1e-3).abs() < 1e-9);
            }
        }
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let cfg = RunConfig::default();
        let mut net = build_network(NetKind::Predictor, &cfg, 0);
        let before = net.clone();
        let mut opt = Adam::new(&net, 0.5, 0.999, 1e-8);
        let grads = vec![None; net.params().len()];
        opt.step(&mut net, &grads, 1e-3).unwrap();
        assert_eq!(net, before);
        assert!(opt.step(&mut net, &[], 1e-3).is_err());
    }
}
