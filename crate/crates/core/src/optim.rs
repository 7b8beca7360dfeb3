//! SGD with momentum and decoupled-from-bias weight decay.

use crate::detector::{DetectorState, GroupMask, Tensor};

/// One heavy-ball step on a slice:
/// `v <- momentum * v + (g + wd * x)`, `x <- x - lr * v`.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((x, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let d = g + weight_decay * *x;
        *v = momentum * *v + d;
        *x -= lr * *v;
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: DetectorState,
}

impl Sgd {
    pub fn new(state: &DetectorState, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: state.zeros_like(),
        }
    }

    /// Updates every tensor whose group is in `mask`. Biases are not
    /// decayed. Tensors outside the mask are left bit-for-bit unchanged.
    pub fn step(&mut self, state: &mut DetectorState, grads: &DetectorState, mask: GroupMask, lr: f64) {
        for t in Tensor::ALL {
            if !mask.allows(t.group()) {
                continue;
            }
            let g = grads.tensor(t);
            let v = self.velocity.tensor_mut(t);
            let p = state.tensor_mut(t);
            sgd_update(&mut p.weight, &g.weight, &mut v.weight, lr, self.momentum, self.weight_decay);
            sgd_update(&mut p.bias, &g.bias, &mut v.bias, lr, self.momentum, 0.0);
        }
    }
}
