use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

use crate::numerics::Matrix;

use super::{InputShape, Layer, NetworkSpec, NnError};

/// Parameters for one weight-bearing layer.
///
/// Dense and random-feature layers store `weights` as input x output so a
/// batch applies as `X W`. Convolutions store flattened kernels:
/// row `(ky * kw + kx) * in_channels + ci`, column = output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Frozen layers keep true gradients but are never updated.
    pub frozen: bool,
}

/// All trainable state of a network: one entry per weight-bearing layer,
/// in spec order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
}

impl NetworkParams {
    pub fn zeros_like(&self) -> NetworkParams {
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                    frozen: l.frozen,
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for l in &self.layers {
            m = m.max(l.weights.max_abs());
            for &b in &l.bias {
                m = m.max(b.abs());
            }
        }
        m
    }
}

fn fan_in_out(layer: &Layer, shape_before: InputShape) -> (usize, usize, usize) {
    // (weight rows, weight cols, bias len)
    match layer {
        Layer::Dense { input, output } => (*input, *output, *output),
        Layer::Conv2d { kernel, in_channels, out_channels } => {
            (kernel.0 * kernel.1 * in_channels, *out_channels, *out_channels)
        }
        Layer::RandomFeatures { count, .. } => (shape_before.len(), *count, 0),
        _ => unreachable!("only weight-bearing layers have fans"),
    }
}

/// Draws initial parameters for `spec` from `seed`.
///
/// Dense and conv layers use uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
/// weights and biases, drawn row-major then bias, layer by layer, from one
/// Xoshiro256** stream. Random-feature layers draw a Gaussian projection
/// scaled by 1/sqrt(fan_in) from their own layer seed, so any two networks
/// that name the same seed share the same frozen features.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams, NnError> {
    let shapes = spec.shape_chain()?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (idx, layer) in spec.layers.iter().enumerate() {
        if !layer.has_params() {
            continue;
        }
        let (rows, cols, bias_len) = fan_in_out(layer, shapes[idx]);
        let bound = 1.0 / (rows as f64).sqrt();
        let lp = match layer {
            Layer::RandomFeatures { seed: layer_seed, .. } => {
                let mut frng = Xoshiro256StarStar::seed_from_u64(*layer_seed);
                let mut w = Matrix::zeros(rows, cols);
                for v in w.data_mut() {
                    let g: f64 = frng.sample(StandardNormal);
                    *v = g * bound;
                }
                LayerParams { weights: w, bias: vec![], frozen: true }
            }
            _ => {
                let mut w = Matrix::zeros(rows, cols);
                for v in w.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
                let bias = (0..bias_len).map(|_| rng.random_range(-bound..bound)).collect();
                LayerParams { weights: w, bias, frozen: false }
            }
        };
        layers.push(lp);
    }
    Ok(NetworkParams { layers })
}

/// Checks that `params` structurally fits `spec`.
pub(super) fn check_params(spec: &NetworkSpec, params: &NetworkParams) -> Result<(), NnError> {
    let shapes = spec.shape_chain()?;
    let idxs = spec.param_layer_indices();
    if idxs.len() != params.layers.len() {
        return Err(NnError::ShapeMismatch(format!(
            "spec has {} weight-bearing layers, params have {}",
            idxs.len(),
            params.layers.len()
        )));
    }
    for (pi, &si) in idxs.iter().enumerate() {
        let (rows, cols, bias_len) = fan_in_out(&spec.layers[si], shapes[si]);
        let lp = &params.layers[pi];
        if lp.weights.rows() != rows || lp.weights.cols() != cols || lp.bias.len() != bias_len {
            return Err(NnError::ShapeMismatch(format!(
                "layer {si}: expected {rows}x{cols} weights and {bias_len} biases, \
                 found {}x{} and {}",
                lp.weights.rows(),
                lp.weights.cols(),
                lp.bias.len()
            )));
        }
    }
    Ok(())
}
