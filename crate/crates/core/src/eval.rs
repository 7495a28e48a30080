//! Few-shot split sampling, classification metrics, repeated experiments and
//! the one-sided Mann-Whitney U test.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibrate::{ensemble_calibrate, FewShotSplit};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::matrix::{mean_std, ScoreMatrix};
use crate::prompt::{prior_logits, zero_shot_predict, PlgOptions};

/// Draws `shots` labeled nodes per class uniformly without replacement.
/// Every class needs at least `shots + 1` members so that it keeps a test
/// node.
pub fn sample_few_shot_split(
    y: &[usize],
    num_classes: usize,
    shots: usize,
    seed: u64,
) -> Result<FewShotSplit> {
    let mut members = vec![Vec::new(); num_classes];
    for (node, &class) in y.iter().enumerate() {
        if class >= num_classes {
            return Err(Error::Invalid(format!(
                "node {node} has class {class} but only {num_classes} classes exist"
            )));
        }
        members[class].push(node);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(num_classes);
    let mut is_train = vec![false; y.len()];
    for (class, ids) in members.iter().enumerate() {
        if ids.len() < shots + 1 {
            return Err(Error::Invalid(format!(
                "class {class} has {} nodes; {shots}-shot sampling needs at least {}",
                ids.len(),
                shots + 1
            )));
        }
        let mut chosen: Vec<usize> = index::sample(&mut rng, ids.len(), shots)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        chosen.sort_unstable();
        for &id in &chosen {
            is_train[id] = true;
        }
        train.push(chosen);
    }
    let test = (0..y.len()).filter(|&v| !is_train[v]).collect();
    Ok(FewShotSplit { train, test })
}

fn check_ids(pred: &[usize], gt: &[usize], ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Invalid("metric needs at least one node id".into()));
    }
    let n = pred.len().min(gt.len());
    if let Some(&id) = ids.iter().find(|&&id| id >= n) {
        return Err(Error::NodeOutOfRange { id, num_nodes: n });
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gt: &[usize], ids: &[usize]) -> Result<f64> {
    check_ids(pred, gt, ids)?;
    let correct = ids.iter().filter(|&&i| pred[i] == gt[i]).count();
    Ok(correct as f64 / ids.len() as f64)
}

/// Per-class F1 over `ids`; a class with zero precision plus recall scores 0.
pub fn per_class_f1(
    pred: &[usize],
    gt: &[usize],
    ids: &[usize],
    num_classes: usize,
) -> Result<Vec<f64>> {
    check_ids(pred, gt, ids)?;
    let mut tp = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut actual = vec![0usize; num_classes];
    for &i in ids {
        let (p, g) = (pred[i], gt[i]);
        if p >= num_classes || g >= num_classes {
            return Err(Error::Invalid(format!(
                "class index out of range at node {i}"
            )));
        }
        predicted[p] += 1;
        actual[g] += 1;
        if p == g {
            tp[p] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|c| {
            let precision = if predicted[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / predicted[c] as f64
            };
            let recall = if actual[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / actual[c] as f64
            };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect())
}

/// Per-class F1 averaged with weights proportional to true-class support.
pub fn weighted_f1(pred: &[usize], gt: &[usize], ids: &[usize], num_classes: usize) -> Result<f64> {
    let f1 = per_class_f1(pred, gt, ids, num_classes)?;
    let mut support = vec![0usize; num_classes];
    for &i in ids {
        support[gt[i]] += 1;
    }
    Ok(f1
        .iter()
        .zip(&support)
        .map(|(f, &s)| f * s as f64)
        .sum::<f64>()
        / ids.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub acc: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub n_test: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn compute(
        pred: &[usize],
        gt: &[usize],
        ids: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let per_class_f1 = per_class_f1(pred, gt, ids, num_classes)?;
        Ok(Self {
            acc: accuracy(pred, gt, ids)?,
            weighted_f1: weighted_f1(pred, gt, ids, num_classes)?,
            per_class_f1,
            n_test: ids.len(),
            seed,
        })
    }
}

/// Mean and (population) standard deviation over repeats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub per_repeat: Vec<MetricReport>,
}

impl AggregateReport {
    pub fn from_repeats(per_repeat: Vec<MetricReport>) -> Result<Self> {
        if per_repeat.is_empty() {
            return Err(Error::Invalid("no repeats to aggregate".into()));
        }
        let accs: Vec<f64> = per_repeat.iter().map(|r| r.acc).collect();
        let f1s: Vec<f64> = per_repeat.iter().map(|r| r.weighted_f1).collect();
        let (acc_mean, acc_std) = mean_std(&accs);
        let (f1_mean, f1_std) = mean_std(&f1s);
        Ok(Self {
            acc_mean,
            acc_std,
            f1_mean,
            f1_std,
            per_repeat,
        })
    }
}

/// Everything a run of the pipeline needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub plg: PlgOptions,
    pub train: TrainConfig,
    /// When off, a single unshrunk model is used (`-Ens`).
    pub ensemble: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            plg: PlgOptions::default(),
            train: TrainConfig::default(),
            ensemble: true,
        }
    }
}

impl PipelineConfig {
    /// Training config after applying the ensemble switch.
    pub fn effective_train(&self) -> TrainConfig {
        if self.ensemble {
            self.train.clone()
        } else {
            TrainConfig {
                n_e: 1,
                alpha: 1.0,
                ..self.train.clone()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: AggregateReport,
    /// Predictions for every node, one vector per repeat.
    pub predictions: Vec<Vec<usize>>,
}

/// Inputs shared by every repeat of an experiment.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    /// Raw label scores before propagation and normalization.
    pub raw_scores: &'a ScoreMatrix,
    pub adjacency: Option<&'a NormalizedAdjacency>,
    pub ground_truth: &'a [usize],
}

/// Repeats the pipeline `repeats` times; repeat `r` seeds split sampling and
/// training with `base_seed + r`. `shots == 0` runs zero-shot prediction and
/// evaluates on every node.
pub fn run_experiment(
    data: ExperimentData<'_>,
    cfg: &PipelineConfig,
    shots: usize,
    repeats: usize,
    base_seed: u64,
) -> Result<ExperimentRun> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let num_classes = data.raw_scores.cols();
    if data.ground_truth.len() != data.raw_scores.rows() {
        return Err(Error::Dimension(format!(
            "ground truth has {} entries, score matrix has {} rows",
            data.ground_truth.len(),
            data.raw_scores.rows()
        )));
    }
    let prior = prior_logits(data.raw_scores, data.adjacency, cfg.plg)?;
    let mut reports = Vec::with_capacity(repeats);
    let mut predictions = Vec::with_capacity(repeats);
    for r in 0..repeats as u64 {
        let seed = base_seed.wrapping_add(r);
        let (pred, ids) = if shots == 0 {
            (
                zero_shot_predict(&prior),
                (0..prior.rows()).collect::<Vec<_>>(),
            )
        } else {
            let split = sample_few_shot_split(data.ground_truth, num_classes, shots, seed)?;
            let train = TrainConfig {
                seed,
                ..cfg.effective_train()
            };
            let calibration = ensemble_calibrate(&prior, &split, &train)?;
            (calibration.predictions, split.test)
        };
        reports.push(MetricReport::compute(
            &pred,
            data.ground_truth,
            &ids,
            num_classes,
            seed,
        )?);
        predictions.push(pred);
    }
    Ok(ExperimentRun {
        report: AggregateReport::from_repeats(reports)?,
        predictions,
    })
}

/// Largest pooled sample for which the automatic method enumerates exactly.
pub const EXACT_MAX_POOLED: usize = 12;
/// Hard cap for a forced exact computation.
const EXACT_HARD_LIMIT: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MannWhitneyMethod {
    /// Exact when the pooled sample has at most [`EXACT_MAX_POOLED`] values.
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MannWhitney {
    pub u_a: f64,
    pub u_b: f64,
    /// One-sided p-value for "a tends to be greater than b".
    pub p_value: f64,
    pub method: MannWhitneyMethod,
}

/// `U` for `a` counting pairs with `a > b` as 1 and ties as 1/2.
pub fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    mann_whitney_u_with(a, b, MannWhitneyMethod::Auto)
}

pub fn mann_whitney_u_with(a: &[f64], b: &[f64], method: MannWhitneyMethod) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid(
            "Mann-Whitney U needs two nonempty samples".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Mann-Whitney U sample".into()));
    }
    let pooled = a.len() + b.len();
    let method = match method {
        MannWhitneyMethod::Auto if pooled <= EXACT_MAX_POOLED => MannWhitneyMethod::Exact,
        MannWhitneyMethod::Auto => MannWhitneyMethod::Normal,
        m => m,
    };
    let u_a = u_statistic(a, b);
    let u_b = (a.len() * b.len()) as f64 - u_a;
    let p_value = match method {
        MannWhitneyMethod::Exact => exact_upper_tail(a, b, u_a)?,
        _ => normal_upper_tail(a, b, u_a)?,
    };
    Ok(MannWhitney {
        u_a,
        u_b,
        p_value,
        method,
    })
}

/// Fraction of all ways to pick `|a|` of the pooled values whose U is at
/// least the observed one.
fn exact_upper_tail(a: &[f64], b: &[f64], observed: f64) -> Result<f64> {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    if n > EXACT_HARD_LIMIT {
        return Err(Error::Invalid(format!(
            "exact Mann-Whitney enumeration limited to {EXACT_HARD_LIMIT} pooled values, got {n}"
        )));
    }
    // Pairwise contributions of pooled[i] beating pooled[j].
    let wins: Vec<Vec<f64>> = pooled
        .iter()
        .map(|&x| {
            pooled
                .iter()
                .map(|&y| {
                    if x > y {
                        1.0
                    } else if x == y {
                        0.5
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        total += 1;
        let mut u = 0.0;
        for i in (0..n).filter(|i| mask & (1 << i) != 0) {
            for j in (0..n).filter(|j| mask & (1 << j) == 0) {
                u += wins[i][j];
            }
        }
        // U is a multiple of 1/2, so this comparison is exact.
        if u >= observed {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
fn normal_upper_tail(a: &[f64], b: &[f64], u_a: f64) -> Result<f64> {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j] == pooled[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let variance = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if variance.is_nan() || variance <= 0.0 {
        return Err(Error::Invalid(
            "pooled sample has zero variance; use the exact method".into(),
        ));
    }
    let z = (u_a - na * nb / 2.0 - 0.5) / variance.sqrt();
    let normal = Normal::standard();
    Ok(normal.sf(z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_small_case() {
        let y = [0, 0, 1, 1];
        let s = sample_few_shot_split(&y, 2, 1, 3).unwrap();
        assert_eq!(s.train.len(), 2);
        assert!([0, 1].contains(&s.train[0][0]));
        assert!([2, 3].contains(&s.train[1][0]));
        assert_eq!(s.test.len(), 2);
        s.validate(&y).unwrap();
        assert_eq!(s, sample_few_shot_split(&y, 2, 1, 3).unwrap());
        assert!(sample_few_shot_split(&y, 2, 2, 3).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let gt = [0, 1, 2, 1];
        let ids = [0, 1, 2, 3];
        assert_eq!(accuracy(&gt, &gt, &ids).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 0, 0], &gt, &ids).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 0], &gt, &ids).unwrap(), 0.75);
        assert!(accuracy(&gt, &gt, &[]).is_err());
    }

    #[test]
    fn weighted_f1_examples() {
        let f = weighted_f1(&[0, 1, 1], &[0, 0, 1], &[0, 1, 2], 2).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(weighted_f1(&[1, 1], &[1, 1], &[0, 1], 3).unwrap(), 1.0);
        assert_eq!(
            weighted_f1(&[0, 1, 2], &[0, 1, 2], &[0, 1, 2], 3).unwrap(),
            1.0
        );
        assert!(weighted_f1(&[0], &[0], &[], 1).is_err());
    }

    #[test]
    fn mann_whitney_separated_samples() {
        let r = mann_whitney_u(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.u_a, 9.0);
        assert_eq!(r.p_value, 0.05);
        assert_eq!(r.method, MannWhitneyMethod::Exact);
    }

    #[test]
    fn mann_whitney_ties() {
        let r = mann_whitney_u(&[1.0], &[1.0]).unwrap();
        assert_eq!(r.u_a, 0.5);
        assert_eq!(r.p_value, 1.0);
        assert!(mann_whitney_u_with(&[1.0, 1.0], &[1.0], MannWhitneyMethod::Normal).is_err());
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn large_samples_use_normal_path() {
        let a: Vec<f64> = (0..10).map(|v| v as f64 + 0.5).collect();
        let b: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.method, MannWhitneyMethod::Normal);
        assert!(r.p_value > 0.0 && r.p_value < 0.5);
    }
}
