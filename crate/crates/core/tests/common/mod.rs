//! Reference implementations shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tag_core::calibrate::{
    backward, forward, init_params, loss, BatchNorm, CalibratorDims, CalibratorParams, EntropySign,
};
use tag_core::graph::Graph;
use tag_core::ScoreMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> Graph {
    let n = rng.random_range(1..=max_nodes);
    let density = rng.random_range(0.0..0.5);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            // Directed draws, self-loops and duplicates all allowed on purpose.
            if rng.random_bool(density) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> ScoreMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    ScoreMatrix::from_vec(rows, cols, data).unwrap()
}

/// Dense `(D^-1 (A + I))` built straight from the definition: symmetrize,
/// binarize, set the diagonal to one, divide rows by their sums.
pub fn dense_normalized_adjacency(graph: &Graph) -> Vec<Vec<f64>> {
    let n = graph.num_nodes();
    let mut a = vec![vec![0.0; n]; n];
    for (u, v) in graph.edges() {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
        let deg: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= deg;
        }
    }
    a
}

/// `Ã^P Z` through an explicit dense matrix power.
pub fn dense_propagate(graph: &Graph, z: &ScoreMatrix, steps: usize) -> ScoreMatrix {
    dense_propagate_many(graph, z, &[steps]).pop().unwrap()
}

/// `Ã^P Z` for every `P` in `steps`, sharing one sequence of dense powers.
pub fn dense_propagate_many(graph: &Graph, z: &ScoreMatrix, steps: &[usize]) -> Vec<ScoreMatrix> {
    let a = dense_normalized_adjacency(graph);
    let n = a.len();
    let mut power: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let max = steps.iter().copied().max().unwrap_or(0);
    let mut by_power = Vec::with_capacity(max + 1);
    for p in 0..=max {
        if p > 0 {
            let mut next = vec![vec![0.0; n]; n];
            for i in 0..n {
                for k in 0..n {
                    let pik = power[i][k];
                    if pik != 0.0 {
                        for j in 0..n {
                            next[i][j] += pik * a[k][j];
                        }
                    }
                }
            }
            power = next;
        }
        if steps.contains(&p) {
            let mut out = ScoreMatrix::zeros(n, z.cols());
            for i in 0..n {
                for c in 0..z.cols() {
                    out.set(i, c, (0..n).map(|k| power[i][k] * z.get(k, c)).sum());
                }
            }
            by_power.push((p, out));
        }
    }
    steps
        .iter()
        .map(|s| by_power.iter().find(|(p, _)| p == s).unwrap().1.clone())
        .collect()
}

/// A calibrator with every tensor randomized, including the output layer
/// and the batch-norm affine parameters, so every gradient path is live.
pub fn random_params(rng: &mut ChaCha8Rng, dims: CalibratorDims) -> CalibratorParams {
    let mut params = init_params(dims, rng.random()).unwrap();
    for layer in &mut params.layers {
        for w in layer
            .linear
            .weight
            .iter_mut()
            .chain(layer.linear.bias.iter_mut())
        {
            *w = rng.random_range(-1.0..1.0);
        }
        if let Some(BatchNorm { gamma, beta }) = layer.norm.as_mut() {
            for g in gamma.iter_mut() {
                *g = rng.random_range(0.5..1.5);
            }
            for b in beta.iter_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
    }
    params
}

pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    pub failures: usize,
    pub checked: usize,
}

/// Compares the analytic parameter gradient of the calibrator objective with
/// central differences. An entry passes when its absolute error is below
/// `abs_floor` or its relative error is below `rel_tol`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    params: &CalibratorParams,
    z: &ScoreMatrix,
    train: &[(usize, usize)],
    lambda: f64,
    sign: EntropySign,
    identity: bool,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> GradCheck {
    let bn_eps = 1e-5;
    let objective = |p: &CalibratorParams| {
        let (logits, _) = forward(p, z, bn_eps, identity).unwrap();
        loss(&logits, train, lambda, sign).total
    };
    let (logits, cache) = forward(params, z, bn_eps, identity).unwrap();
    let value = loss(&logits, train, lambda, sign);
    let analytic = backward(params, &cache, &value.grad).flatten();

    let mut probe = params.clone();
    let mut offset = 0;
    let mut out = GradCheck {
        max_rel: 0.0,
        max_abs: 0.0,
        failures: 0,
        checked: 0,
    };
    let tensor_lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (t, len) in tensor_lens.into_iter().enumerate() {
        for i in 0..len {
            let original = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = original + h;
            let plus = objective(&probe);
            probe.tensors_mut()[t][i] = original - h;
            let minus = objective(&probe);
            probe.tensors_mut()[t][i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[offset + i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            out.checked += 1;
            out.max_abs = out.max_abs.max(abs);
            if a.abs().max(numeric.abs()) > abs_floor {
                out.max_rel = out.max_rel.max(rel);
            }
            if abs > abs_floor && rel > rel_tol {
                out.failures += 1;
            }
        }
        offset += len;
    }
    out
}

/// Random instance for the gradient check: classes, hidden width, depth.
pub fn random_calibrator_instance(
    seed: u64,
) -> (CalibratorParams, ScoreMatrix, Vec<(usize, usize)>) {
    let mut rng = rng(seed);
    let dims = CalibratorDims {
        num_classes: rng.random_range(2..=4),
        hidden: rng.random_range(2..=5),
        layers: rng.random_range(1..=3),
    };
    let rows = rng.random_range(6..=10);
    let z = random_matrix(&mut rng, rows, dims.num_classes, 2.0);
    let train: Vec<(usize, usize)> = (0..rows / 2)
        .map(|i| (i, rng.random_range(0..dims.num_classes)))
        .collect();
    (random_params(&mut rng, dims), z, train)
}
