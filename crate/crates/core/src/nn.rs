//! Dense layer with hand-written forward and backward passes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// `y = W x + b` with `W` stored row-major as `out x inp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            inp,
            out,
            weight: vec![0.0; inp * out],
            bias: vec![0.0; out],
        }
    }

    /// Gaussian weights with the given standard deviation and zero bias.
    pub fn gaussian<R: Rng>(inp: usize, out: usize, std: f64, rng: &mut R) -> Self {
        let weight = (0..inp * out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Linear {
            inp,
            out,
            weight,
            bias: vec![0.0; out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.inp, self.out)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weight[r * self.inp..(r + 1) * self.inp]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        let mut y = self.bias.clone();
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += dot(self.row(r), x);
        }
        y
    }

    /// Accumulates `dy x^T` and `dy` into `grad`.
    pub fn accumulate_grad(&self, grad: &mut Linear, x: &[f64], dy: &[f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[r] += g;
            let row = &mut grad.weight[r * self.inp..(r + 1) * self.inp];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }

    /// Returns `W^T dy`, accumulated into `dx`.
    pub fn backprop_input(&self, dy: &[f64], dx: &mut [f64]) {
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, &w) in dx.iter_mut().zip(self.row(r)) {
                *d += g * w;
            }
        }
    }

    /// Appends rows drawn from `N(0, std^2)` with zero bias.
    pub fn append_rows<R: Rng>(&mut self, rows: usize, std: f64, rng: &mut R) {
        for _ in 0..rows * self.inp {
            self.weight.push(std * rng.sample::<f64, _>(StandardNormal));
        }
        self.bias.extend(std::iter::repeat_n(0.0, rows));
        self.out += rows;
    }

    pub fn add_scaled(&mut self, other: &Linear, scale: f64) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn tanh_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}
