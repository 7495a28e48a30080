use crate::matrix::ScoreMatrix;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Orientation of the entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropySign {
    /// `J_H = mean_i Σ_j P log P`, the negative entropy. Minimizing it
    /// pushes predictions toward uniform.
    Verbatim,
    /// `J_H = -mean_i Σ_j P log P`, the entropy itself. Minimizing it
    /// sharpens predictions on unlabeled nodes.
    #[default]
    Minimize,
}

impl std::str::FromStr for EntropySign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "verbatim" => Ok(Self::Verbatim),
            "minimize" => Ok(Self::Minimize),
            other => Err(format!(
                "unknown entropy sign {other:?}; expected verbatim or minimize"
            )),
        }
    }
}

impl std::fmt::Display for EntropySign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Verbatim => "verbatim",
            Self::Minimize => "minimize",
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub cross_entropy: f64,
    /// The entropy term with `sign` applied, before multiplying by lambda.
    pub entropy: f64,
    /// Gradient of `total` with respect to the logits.
    pub grad: ScoreMatrix,
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// `J = CE(train rows) + lambda * J_H(all rows)` and its gradient.
///
/// `train` holds `(node, class)` pairs.
pub fn loss(
    logits: &ScoreMatrix,
    train: &[(usize, usize)],
    lambda: f64,
    sign: EntropySign,
) -> LossValue {
    let rows = logits.rows();
    let cols = logits.cols();
    let probs: Vec<Vec<f64>> = logits.row_iter().map(softmax_row).collect();
    let mut grad = ScoreMatrix::zeros(rows, cols);

    let mut cross_entropy = 0.0;
    if !train.is_empty() {
        let scale = 1.0 / train.len() as f64;
        for &(node, class) in train {
            let p = &probs[node];
            cross_entropy -= p[class].max(PROB_FLOOR).ln() * scale;
            if p[class] >= PROB_FLOOR {
                let g = grad.row_mut(node);
                for (j, (gj, pj)) in g.iter_mut().zip(p).enumerate() {
                    *gj += scale * (pj - if j == class { 1.0 } else { 0.0 });
                }
            }
        }
    }

    let signed = match sign {
        EntropySign::Verbatim => 1.0,
        EntropySign::Minimize => -1.0,
    };
    let mut neg_entropy = 0.0;
    let coef = signed * lambda / rows as f64;
    for (node, p) in probs.iter().enumerate() {
        // d/dp [p ln max(p, floor)] is ln p + 1 above the floor, ln floor below.
        let dh: Vec<f64> = p
            .iter()
            .map(|&pj| {
                if pj >= PROB_FLOOR {
                    pj.ln() + 1.0
                } else {
                    PROB_FLOOR.ln()
                }
            })
            .collect();
        neg_entropy += p
            .iter()
            .map(|&pj| pj * pj.max(PROB_FLOOR).ln())
            .sum::<f64>();
        let weighted: f64 = p.iter().zip(&dh).map(|(pj, d)| pj * d).sum();
        if lambda != 0.0 {
            let g = grad.row_mut(node);
            for ((gk, &pk), &dk) in g.iter_mut().zip(p).zip(&dh) {
                *gk += coef * pk * (dk - weighted);
            }
        }
    }
    let entropy = signed * neg_entropy / rows as f64;
    LossValue {
        total: cross_entropy + lambda * entropy,
        cross_entropy,
        entropy,
        grad,
    }
}
