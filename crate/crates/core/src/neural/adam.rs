//! ADAM with bias-corrected moment estimates.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    params: AdamParams,
    first: Mlp,
    second: Mlp,
    steps: u64,
}

impl AdamState {
    /// Zero moments shaped like `net`.
    pub fn new(net: &Mlp, params: AdamParams) -> Self {
        let zeros = Mlp::zeros(&net.dims()).expect("dims of an existing network");
        AdamState {
            params,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One descent step on `net` with gradient `grad` and learning rate `lr`.
    pub fn step(&mut self, net: &mut Mlp, grad: &Mlp, lr: f64) {
        self.steps += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        let layers = net
            .layers_mut()
            .iter_mut()
            .zip(grad.layers())
            .zip(self.first.layers_mut().iter_mut().zip(self.second.layers_mut()));
        for ((p, g), (m, v)) in layers {
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(update);
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(dims: &[usize], value: f64) -> Mlp {
        let mut net = Mlp::zeros(dims).unwrap();
        for i in 0..net.n_params() {
            *net.param_mut(i) = value;
        }
        net
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = Mlp::lecun_normal(&[3, 4, 1], 1).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, AdamParams::default());
        adam.step(&mut net, &Mlp::zeros(&[3, 4, 1]).unwrap(), 1e-3);
        assert_eq!(net, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1 g, v = 0.001 g²; bias-corrected m̂ = g, v̂ = g²,
        // so the step is lr · g / (|g| + eps)
        let g = 0.25;
        let lr = 0.01;
        let mut net = filled(&[1, 1], 1.0);
        let mut adam = AdamState::new(&net, AdamParams::default());
        adam.step(&mut net, &filled(&[1, 1], g), lr);
        let expect = 1.0 - lr * g / (g + 1e-8);
        assert!((net.param(0) - expect).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let lr = 1e-3;
        let mut net = filled(&[2, 1], 0.0);
        let grad = filled(&[2, 1], -3.7);
        let mut adam = AdamState::new(&net, AdamParams::default());
        let mut prev = net.param(0);
        for _ in 0..2000 {
            adam.step(&mut net, &grad, lr);
            let step = net.param(0) - prev;
            prev = net.param(0);
            assert!((step - lr).abs() < 1e-9);
        }
    }
}
