//! Attention-matrix analysis: rank via singular values, head redundancy,
//! and CSV export of score matrices.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{linearized_scores, AttentionOutput, Variant};
use crate::error::{MgkError, Result};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{Example, Model};

pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-6;
pub const DEFAULT_SAMPLE_COUNT: usize = 100;

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Singular values of a square matrix, in descending order, by one-sided
/// Jacobi rotations on the columns.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(MgkError::Dimension {
            op: "singular_values",
            left: a.shape().to_vec(),
            right: a.shape().to_vec(),
        });
    }
    let n = a.rows();
    // column-major copy so each column is contiguous
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a.at(i, j)).collect()).collect();
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = (0..n).fold((0.0, 0.0, 0.0), |(a, b, g), i| {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    (a + x * x, b + y * y, g + x * y)
                });
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let c = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(c);
                if c <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = cs * xp - sn * yq;
                    *y = sn * xp + cs * yq;
                }
            }
        }
        if off <= JACOBI_TOL {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values strictly above `threshold`.
pub fn matrix_rank(a: &Tensor, threshold: f64) -> Result<usize> {
    Ok(singular_values(a)?.into_iter().filter(|&s| s > threshold).count())
}

/// Pairwise mean absolute difference between head score matrices.
pub fn head_similarity(scores: &[Tensor]) -> Result<Tensor> {
    if scores.len() < 2 {
        return Err(MgkError::Contract(format!(
            "head similarity needs at least 2 heads, got {}",
            scores.len()
        )));
    }
    let h = scores.len();
    if let Some(s) = scores.iter().find(|s| s.shape() != scores[0].shape()) {
        return Err(MgkError::Dimension {
            op: "head_similarity",
            left: scores[0].shape().to_vec(),
            right: s.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[h, h]);
    for a in 0..h {
        for b in a + 1..h {
            let d = scores[a].data().iter().zip(scores[b].data()).map(|(x, y)| (x - y).abs()).sum::<f64>()
                / scores[a].len().max(1) as f64;
            out.data_mut()[a * h + b] = d;
            out.data_mut()[b * h + a] = d;
        }
    }
    Ok(out)
}

/// Rows of comma-separated shortest round-trip decimals, no trailing newline.
pub fn scores_csv(scores: &Tensor) -> String {
    scores
        .to_rows()
        .iter()
        .map(|row| row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn parse_scores_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| MgkError::Contract(format!("bad value {v:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Writes `head_{h}.csv` into `dir` for every head and returns the paths.
pub fn dump_attention(heads: &[AttentionOutput], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    heads
        .iter()
        .enumerate()
        .map(|(h, out)| {
            let scores = out
                .scores
                .as_ref()
                .ok_or_else(|| MgkError::Contract(format!("head {h} has no materialized scores")))?;
            let path = dir.join(format!("head_{h}.csv"));
            fs::write(&path, scores_csv(scores))?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub layer: usize,
    pub head: usize,
    pub ranks: Vec<usize>,
    pub threshold: f64,
    pub seed: u64,
}

impl RankHistogram {
    pub fn mean_rank(&self) -> f64 {
        self.ranks.iter().sum::<usize>() as f64 / self.ranks.len().max(1) as f64
    }
}

/// Score matrices of every (layer, head) for one sequence. Linearized heads
/// have their implied scores built explicitly.
pub fn attention_matrices(model: &Model, tokens: &[usize]) -> Result<Vec<Vec<Tensor>>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = model.forward_on(&mut tape, &bound, tokens)?;
    let attn = &model.spec.attention;
    fwd.layers
        .iter()
        .zip(&model.blocks)
        .map(|(layer, block)| {
            layer
                .heads
                .iter()
                .enumerate()
                .map(|(h, head)| match head.scores {
                    Some(s) => Ok(tape.value(s).clone()),
                    None => {
                        debug_assert!(!attn.variant.materializes_scores());
                        let q = tape.value(layer.queries[h]);
                        let keys: Vec<Tensor> = layer.keys[h].iter().map(|&k| tape.value(k).clone()).collect();
                        let pi = match attn.variant {
                            Variant::Mlk => block.attention.heads[h].keys.normalized_pi(),
                            _ => vec![1.0],
                        };
                        linearized_scores(q, &keys, &pi, attn.causal)
                    }
                })
                .collect()
        })
        .collect()
}

/// Ranks of `count` attention matrices per (layer, head). Sequences are drawn
/// from `sample` with replacement by a splitmix64 stream seeded with `seed`.
pub fn rank_distribution(
    model: &Model,
    sample: &[Example],
    count: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<RankHistogram>> {
    if sample.is_empty() {
        return Err(MgkError::EmptyInput("rank distribution needs at least one sequence".into()));
    }
    if count == 0 {
        return Err(MgkError::Contract("rank distribution needs count >= 1".into()));
    }
    let heads = model.spec.attention.heads;
    let mut hists: Vec<RankHistogram> = (0..model.spec.layers)
        .flat_map(|layer| {
            (0..heads).map(move |head| RankHistogram {
                layer,
                head,
                ranks: Vec::with_capacity(count),
                threshold,
                seed,
            })
        })
        .collect();
    let mut rng = SplitMix64::new(seed);
    for _ in 0..count {
        let e = &sample[rng.below(sample.len() as u64) as usize];
        for (l, layer) in attention_matrices(model, &e.tokens)?.iter().enumerate() {
            for (h, a) in layer.iter().enumerate() {
                hists[l * heads + h].ranks.push(matrix_rank(a, threshold)?);
            }
        }
    }
    Ok(hists)
}
