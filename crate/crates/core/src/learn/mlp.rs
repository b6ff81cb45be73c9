//! Dense layers with `tanh` between them and an affine output layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// One affine layer `y = W x + b`; `weights` is row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            rows,
            cols,
            weights: (0..rows * cols)
                .map(|_| rng.random_range(-limit..limit))
                .collect(),
            bias: vec![0.0; rows],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.weights[r * self.cols..(r + 1) * self.cols];
                self.bias[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Inputs of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// `sizes = [in, hidden…, out]`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Dense::glorot(w[1], w[0], rng))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    /// Checks that consecutive layers chain.
    pub fn is_consistent(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.len() == l.rows * l.cols
                && l.bias.len() == l.rows
                && l.weights.iter().chain(&l.bias).all(|v| v.is_finite())
        }) && self.layers.windows(2).all(|w| w[0].rows == w[1].cols)
    }

    pub fn forward(&self, x: &[f64]) -> MlpTape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&a);
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        MlpTape { inputs, output: a }
    }

    /// Reverse pass: parameter gradients (same shapes as the layers) and `∂L/∂x`.
    pub fn backward(&self, tape: &MlpTape, d_out: &[f64]) -> (Vec<Dense>, Vec<f64>) {
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.rows, l.cols))
            .collect();
        let mut g = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a = &tape.inputs[l];
            let gl = &mut grads[l];
            for r in 0..layer.rows {
                gl.bias[r] = g[r];
                for c in 0..layer.cols {
                    gl.weights[r * layer.cols + c] = g[r] * a[c];
                }
            }
            let mut gin = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                for c in 0..layer.cols {
                    gin[c] += layer.weights[r * layer.cols + c] * g[r];
                }
            }
            if l > 0 {
                // `a` is the tanh output of the previous layer
                for (gi, ai) in gin.iter_mut().zip(a) {
                    *gi *= 1.0 - ai * ai;
                }
            }
            g = gin;
        }
        (grads, g)
    }
}

/// Fixed affine maps around a network: inputs are standardised before the first layer
/// and outputs are de-standardised after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub in_mean: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_scale: Vec<f64>,
}

/// Per-feature mean and standard deviation.
fn mean_and_sd(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect();
    let sd = (0..dim)
        .map(|k| (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, sd)
}

impl Normalizer {
    /// Constant inputs are centred but not scaled; constant targets (the slack angle,
    /// regulated magnitudes) get a zero output scale and so stay pinned at their mean.
    pub fn fit(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Self {
        let (in_mean, in_sd) = mean_and_sd(inputs);
        let in_scale = in_sd
            .into_iter()
            .map(|sd| if sd > 1e-9 { sd } else { 1.0 })
            .collect();
        let (out_mean, out_sd) = mean_and_sd(targets);
        let out_scale = out_sd
            .into_iter()
            .map(|sd| if sd > 1e-9 { sd } else { 0.0 })
            .collect();
        Self {
            in_mean,
            in_scale,
            out_mean,
            out_scale,
        }
    }

    pub fn input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.in_mean)
            .zip(&self.in_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn output(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.out_mean)
            .zip(&self.out_scale)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}
