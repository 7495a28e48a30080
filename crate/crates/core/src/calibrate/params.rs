use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Affine linear map stored row-major as `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }
}

/// Batch-norm gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

/// One calibrator layer. Hidden layers carry batch norm (followed by ReLU);
/// the output layer does not.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
}

/// Shape of the calibrator network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibratorDims {
    pub num_classes: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl CalibratorDims {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.layers == 0 || (self.layers > 1 && self.hidden == 0) {
            return Err(Error::Config(format!(
                "invalid calibrator dimensions {self:?}"
            )));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|q| {
                let input = if q == 0 {
                    self.num_classes
                } else {
                    self.hidden
                };
                let output = if q + 1 == self.layers {
                    self.num_classes
                } else {
                    self.hidden
                };
                (input, output)
            })
            .collect()
    }
}

/// All trainable parameters of the calibrator MLP. The same shape doubles as
/// the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorParams {
    pub layers: Vec<Layer>,
}

impl CalibratorParams {
    /// Every entry zero, including batch-norm gains.
    pub fn zeros(dims: CalibratorDims) -> Self {
        let shapes = dims.layer_shapes();
        let last = shapes.len() - 1;
        Self {
            layers: shapes
                .into_iter()
                .enumerate()
                .map(|(q, (i, o))| Layer {
                    linear: Linear::zeros(i, o),
                    norm: (q < last).then(|| BatchNorm::zeros(o)),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.layers[0].linear.in_dim
    }

    /// Parameter tensors in a fixed order: per layer weight, bias, then gamma
    /// and beta when the layer has batch norm.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.linear.weight);
            out.push(&layer.linear.bias);
            if let Some(norm) = &layer.norm {
                out.push(&norm.gamma);
                out.push(&norm.beta);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.linear.weight);
            out.push(&mut layer.linear.bias);
            if let Some(norm) = &mut layer.norm {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Hidden layers get uniform weights in `±sqrt(6 / in_dim)`, zero bias and
/// identity batch norm. The output layer starts at zero, so the untrained
/// calibrator with its identity connection reproduces its input.
pub fn init_params(dims: CalibratorDims, seed: u64) -> Result<CalibratorParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = CalibratorParams::zeros(dims);
    let last = params.layers.len() - 1;
    for layer in &mut params.layers[..last] {
        let bound = (6.0 / layer.linear.in_dim as f64).sqrt();
        for w in &mut layer.linear.weight {
            *w = rng.random_range(-bound..=bound);
        }
        layer.norm = Some(BatchNorm::identity(layer.linear.out_dim));
    }
    Ok(params)
}

/// Multiplies every parameter (weights, biases, gains, shifts) by `alpha`.
pub fn shrink(params: &CalibratorParams, alpha: f64) -> CalibratorParams {
    let mut out = params.clone();
    for t in out.tensors_mut() {
        for v in t.iter_mut() {
            *v *= alpha;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: CalibratorDims = CalibratorDims {
        num_classes: 3,
        hidden: 4,
        layers: 3,
    };

    #[test]
    fn shapes_follow_dims() {
        let p = init_params(DIMS, 0).unwrap();
        let shapes: Vec<_> = p
            .layers
            .iter()
            .map(|l| (l.linear.in_dim, l.linear.out_dim, l.norm.is_some()))
            .collect();
        assert_eq!(shapes, vec![(3, 4, true), (4, 4, true), (4, 3, false)]);
        assert_eq!(p.num_params(), 3 * 4 + 4 + 8 + 16 + 4 + 8 + 12 + 3);
        let single = init_params(CalibratorDims { layers: 1, ..DIMS }, 0).unwrap();
        assert_eq!(single.layers.len(), 1);
        assert!(single.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(DIMS, 7).unwrap();
        assert_eq!(a, init_params(DIMS, 7).unwrap());
        let b = init_params(DIMS, 8).unwrap();
        assert_ne!(a.layers[0].linear.weight, b.layers[0].linear.weight);
        let bound = (6.0f64 / 3.0).sqrt();
        assert!(a.layers[0].linear.weight.iter().all(|w| w.abs() <= bound));
        assert!(a.layers[2].linear.weight.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn shrink_scales_everything() {
        let mut p = init_params(DIMS, 1).unwrap();
        p.layers[2].linear.weight[0] = 2.0;
        assert_eq!(shrink(&p, 1.0), p);
        let half = shrink(&p, 0.5);
        assert_eq!(half.layers[2].linear.weight[0], 1.0);
        assert_eq!(half.layers[0].norm.as_ref().unwrap().gamma, vec![0.5; 4]);
        assert!(shrink(&p, 0.0).flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(init_params(
            CalibratorDims {
                num_classes: 0,
                ..DIMS
            },
            0
        )
        .is_err());
        assert!(init_params(CalibratorDims { hidden: 0, ..DIMS }, 0).is_err());
        assert!(init_params(CalibratorDims { layers: 0, ..DIMS }, 0).is_err());
    }
}
