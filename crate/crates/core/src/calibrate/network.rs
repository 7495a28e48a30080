//! Full-batch forward and backward passes of the calibrator MLP.
//!
//! Hidden layer: `X' = ReLU(BatchNorm(X W + b))`, with batch statistics over
//! every row of the current input. Output layer: `U = X W + b`. The network
//! output is `U + Z` when the identity connection is on; `Z` is a constant and
//! receives no gradient.

use super::params::{CalibratorParams, Linear};
use crate::error::{Error, Result};
use crate::matrix::ScoreMatrix;

#[derive(Debug, Clone)]
struct HiddenCache {
    /// Batch-normalized pre-activations before the affine gain and shift.
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    /// Post-affine values; their sign drives the ReLU mask.
    affine: Vec<f64>,
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    /// Input to each layer, `inputs[0]` being `Z` itself.
    inputs: Vec<Vec<f64>>,
    hidden: Vec<HiddenCache>,
}

impl ForwardCache {
    /// Normalized (pre-affine) activations of hidden layer `layer`.
    pub fn normalized_activations(&self, layer: usize) -> &[f64] {
        &self.hidden[layer].normalized
    }
}

fn affine(input: &[f64], rows: usize, linear: &Linear) -> Vec<f64> {
    let (in_dim, out_dim) = (linear.in_dim, linear.out_dim);
    let mut out = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        out.extend_from_slice(&linear.bias);
        let out_row = &mut out[r * out_dim..];
        for (k, &x) in input[r * in_dim..(r + 1) * in_dim].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in out_row
                .iter_mut()
                .zip(&linear.weight[k * out_dim..(k + 1) * out_dim])
            {
                *o += x * w;
            }
        }
    }
    out
}

pub fn forward(
    params: &CalibratorParams,
    z: &ScoreMatrix,
    bn_eps: f64,
    identity: bool,
) -> Result<(ScoreMatrix, ForwardCache)> {
    let rows = z.rows();
    let classes = params.num_classes();
    if z.cols() != classes {
        return Err(Error::Dimension(format!(
            "calibrator expects {classes} columns, score matrix has {}",
            z.cols()
        )));
    }
    let mut cache = ForwardCache {
        rows,
        inputs: vec![z.as_slice().to_vec()],
        hidden: Vec::new(),
    };
    let mut output = Vec::new();
    for (q, layer) in params.layers.iter().enumerate() {
        let input = cache.inputs.last().expect("input of current layer");
        let pre = affine(input, rows, &layer.linear);
        let Some(norm) = &layer.norm else {
            output = pre;
            if output.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: q + 1 });
            }
            break;
        };
        let dim = layer.linear.out_dim;
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for row in pre.chunks(dim) {
            for (m, &u) in mean.iter_mut().zip(row) {
                *m += u;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for row in pre.chunks(dim) {
            for ((v, &u), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (u - m) * (u - m);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / rows as f64 + bn_eps).sqrt())
            .collect();
        let mut normalized = pre;
        for row in normalized.chunks_mut(dim) {
            for j in 0..dim {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let mut affine_out = normalized.clone();
        for row in affine_out.chunks_mut(dim) {
            for j in 0..dim {
                row[j] = norm.gamma[j] * row[j] + norm.beta[j];
            }
        }
        let activated: Vec<f64> = affine_out
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        if activated.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: q + 1 });
        }
        cache.hidden.push(HiddenCache {
            normalized,
            inv_std,
            affine: affine_out,
        });
        cache.inputs.push(activated);
    }
    if identity {
        for (o, &zv) in output.iter_mut().zip(z.as_slice()) {
            *o += zv;
        }
    }
    Ok((ScoreMatrix::from_vec(rows, classes, output)?, cache))
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// gradient with respect to the network output.
pub fn backward(
    params: &CalibratorParams,
    cache: &ForwardCache,
    d_output: &ScoreMatrix,
) -> CalibratorParams {
    let rows = cache.rows;
    let n = rows as f64;
    let mut grads = params.zeros_like();
    // Upstream gradient w.r.t. the output of the current layer.
    let mut upstream = d_output.as_slice().to_vec();
    for q in (0..params.layers.len()).rev() {
        let layer = &params.layers[q];
        let (in_dim, out_dim) = (layer.linear.in_dim, layer.linear.out_dim);
        let d_pre = match (&layer.norm, cache.hidden.get(q)) {
            (Some(norm), Some(hc)) => {
                let grad_norm = grads.layers[q]
                    .norm
                    .as_mut()
                    .expect("gradient mirrors params");
                let mut d_normalized = vec![0.0; rows * out_dim];
                for r in 0..rows {
                    for j in 0..out_dim {
                        let idx = r * out_dim + j;
                        let d_affine = if hc.affine[idx] > 0.0 {
                            upstream[idx]
                        } else {
                            0.0
                        };
                        grad_norm.gamma[j] += d_affine * hc.normalized[idx];
                        grad_norm.beta[j] += d_affine;
                        d_normalized[idx] = d_affine * norm.gamma[j];
                    }
                }
                let mut sum_d = vec![0.0; out_dim];
                let mut sum_d_xhat = vec![0.0; out_dim];
                for r in 0..rows {
                    for j in 0..out_dim {
                        let idx = r * out_dim + j;
                        sum_d[j] += d_normalized[idx];
                        sum_d_xhat[j] += d_normalized[idx] * hc.normalized[idx];
                    }
                }
                let mut d_pre = d_normalized;
                for r in 0..rows {
                    for j in 0..out_dim {
                        let idx = r * out_dim + j;
                        d_pre[idx] = hc.inv_std[j] / n
                            * (n * d_pre[idx] - sum_d[j] - hc.normalized[idx] * sum_d_xhat[j]);
                    }
                }
                d_pre
            }
            _ => upstream,
        };
        let input = &cache.inputs[q];
        let grad_linear = &mut grads.layers[q].linear;
        for r in 0..rows {
            let d_row = &d_pre[r * out_dim..(r + 1) * out_dim];
            for (b, &d) in grad_linear.bias.iter_mut().zip(d_row) {
                *b += d;
            }
            for k in 0..in_dim {
                let x = input[r * in_dim + k];
                if x == 0.0 {
                    continue;
                }
                for (g, &d) in grad_linear.weight[k * out_dim..(k + 1) * out_dim]
                    .iter_mut()
                    .zip(d_row)
                {
                    *g += x * d;
                }
            }
        }
        if q == 0 {
            break;
        }
        let mut d_input = vec![0.0; rows * in_dim];
        for r in 0..rows {
            let d_row = &d_pre[r * out_dim..(r + 1) * out_dim];
            for k in 0..in_dim {
                let w_row = &layer.linear.weight[k * out_dim..(k + 1) * out_dim];
                d_input[r * in_dim + k] = w_row.iter().zip(d_row).map(|(w, d)| w * d).sum();
            }
        }
        upstream = d_input;
    }
    grads
}
