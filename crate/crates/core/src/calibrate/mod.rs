//! Few-shot calibration of prior logits.
//!
//! A small batch-normalized MLP with an identity connection is trained on the
//! prior logits, its parameters are shrunk toward zero (and hence the output
//! toward the prior), the shrunk outputs are rescaled per column and several
//! independently seeded copies are averaged.

mod loss;
mod network;
mod params;

use rayon::prelude::*;

pub use loss::{loss, softmax_row, EntropySign, LossValue, PROB_FLOOR};
pub use network::{backward, forward, ForwardCache};
pub use params::{init_params, shrink, BatchNorm, CalibratorDims, CalibratorParams, Layer, Linear};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::matrix::{mean_std, ScoreMatrix};

/// Added to the column standard deviation by [`scale_columns`].
pub const SCALE_EPS: f64 = 1e-8;

/// Labeled nodes per class plus the remaining test nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSplit {
    /// `train[c]` holds the labeled node ids of class `c`.
    pub train: Vec<Vec<usize>>,
    pub test: Vec<usize>,
}

impl FewShotSplit {
    pub fn num_classes(&self) -> usize {
        self.train.len()
    }

    pub fn shots(&self) -> usize {
        self.train.first().map_or(0, Vec::len)
    }

    /// `(node, class)` pairs of every labeled node.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(class, ids)| ids.iter().map(move |&id| (id, class)))
            .collect()
    }

    pub fn train_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.train.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Checks the partition and bucket invariants against ground truth `y`.
    pub fn validate(&self, y: &[usize]) -> Result<()> {
        let mut seen = vec![false; y.len()];
        let k = self.shots();
        for (class, ids) in self.train.iter().enumerate() {
            if ids.len() != k {
                return Err(Error::Invalid(format!(
                    "class {class} has {} labeled nodes, expected {k}",
                    ids.len()
                )));
            }
            for &id in ids {
                if id >= y.len() || y[id] != class {
                    return Err(Error::Invalid(format!("node {id} is not of class {class}")));
                }
            }
        }
        for &id in self.train.iter().flatten().chain(&self.test) {
            if id >= y.len() {
                return Err(Error::NodeOutOfRange {
                    id,
                    num_nodes: y.len(),
                });
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::Invalid(format!(
                    "node {id} appears twice in the split"
                )));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Invalid(format!(
                "node {missing} is in neither train nor test"
            )));
        }
        Ok(())
    }
}

/// Trained parameters together with the loss before each update and after
/// the last one (`epochs + 1` values).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CalibratorParams,
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &CalibratorParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut CalibratorParams,
        grads: &CalibratorParams,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let bias1 = 1.0 - cfg.adam_beta1.powi(self.step);
        let bias2 = 1.0 - cfg.adam_beta2.powi(self.step);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        for ((p, g), (m, v)) in tensors.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
                v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn objective(
    params: &CalibratorParams,
    z: &ScoreMatrix,
    train: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<(LossValue, ForwardCache)> {
    let (logits, cache) = forward(params, z, cfg.bn_eps, cfg.identity)?;
    Ok((loss(&logits, train, cfg.lambda, cfg.entropy_sign), cache))
}

/// Full-batch Adam training for a fixed number of epochs, starting from
/// [`init_params`] with `cfg.seed`.
pub fn train_calibrator(
    z: &ScoreMatrix,
    split: &FewShotSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = CalibratorDims {
        num_classes: z.cols(),
        hidden: cfg.hidden,
        layers: cfg.layers,
    };
    if split.num_classes() != z.cols() {
        return Err(Error::Dimension(format!(
            "split has {} classes, score matrix has {} columns",
            split.num_classes(),
            z.cols()
        )));
    }
    let train = split.train_pairs();
    if let Some(&(id, _)) = train.iter().find(|(id, _)| *id >= z.rows()) {
        return Err(Error::NodeOutOfRange {
            id,
            num_nodes: z.rows(),
        });
    }
    let mut params = init_params(dims, cfg.seed)?;
    let mut adam = Adam::new(&params);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (value, cache) = objective(&params, z, &train, cfg)?;
        if !value.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: value.total,
            });
        }
        losses.push(value.total);
        if epoch == cfg.epochs {
            break;
        }
        let grads = backward(&params, &cache, &value.grad);
        adam.update(&mut params, &grads, cfg);
    }
    Ok(TrainOutcome { params, losses })
}

/// Divides every column by `SCALE_EPS + σ` (population σ). Columns are not
/// centered.
pub fn scale_columns(s: &ScoreMatrix) -> ScoreMatrix {
    let mut out = s.clone();
    for col in 0..s.cols() {
        let values = s.column(col);
        let (_, std) = mean_std(&values);
        let denom = SCALE_EPS + std;
        for (row, v) in values.iter().enumerate() {
            out.set(row, col, v / denom);
        }
    }
    out
}

/// One ensemble member: train, shrink, run forward, rescale.
pub fn calibrated_member(
    z: &ScoreMatrix,
    split: &FewShotSplit,
    cfg: &TrainConfig,
) -> Result<ScoreMatrix> {
    let trained = train_calibrator(z, split, cfg)?;
    let shrunk = shrink(&trained.params, cfg.alpha);
    let (s, _) = forward(&shrunk, z, cfg.bn_eps, cfg.identity)?;
    Ok(scale_columns(&s))
}

#[derive(Debug, Clone)]
pub struct Calibration {
    /// Mean of the members' rescaled outputs.
    pub logits: ScoreMatrix,
    /// Row argmax of `logits` for every node.
    pub predictions: Vec<usize>,
}

/// Averages members trained with the given seeds. Seeds are processed in
/// sorted order, so the result does not depend on how they are listed.
pub fn ensemble_with_seeds(
    z: &ScoreMatrix,
    split: &FewShotSplit,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Calibration> {
    if seeds.is_empty() {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    let members: Vec<ScoreMatrix> = seeds
        .par_iter()
        .map(|&seed| {
            calibrated_member(
                z,
                split,
                &TrainConfig {
                    seed,
                    ..cfg.clone()
                },
            )
        })
        .collect::<Result<_>>()?;
    // Running mean: equal members average to themselves exactly.
    let mut mean = members[0].clone();
    for (k, member) in members.iter().enumerate().skip(1) {
        let count = (k + 1) as f64;
        for (m, &s) in mean.as_mut_slice().iter_mut().zip(member.as_slice()) {
            *m += (s - *m) / count;
        }
    }
    let predictions = mean.row_argmax();
    Ok(Calibration {
        logits: mean,
        predictions,
    })
}

/// Shrinkage ensemble with member `i` (1-based) seeded by `cfg.seed + i`.
pub fn ensemble_calibrate(
    z: &ScoreMatrix,
    split: &FewShotSplit,
    cfg: &TrainConfig,
) -> Result<Calibration> {
    cfg.validate()?;
    let seeds: Vec<u64> = (1..=cfg.n_e as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    ensemble_with_seeds(z, split, cfg, &seeds)
}
