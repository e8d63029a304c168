//! Pointwise cross-entropy, the pairwise reward contrast with direction
//! alignment, and their weighted fusion.
//!
//! Two denominators are in play: cross-entropy averages over every sample in
//! the batch, the pairwise term only over the samples that found a diff.

use serde::{Deserialize, Serialize};

use crate::tensor::{log_sigmoid, Result, Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub ce: f64,
    pub bpr: f64,
    pub total: f64,
    pub matched_count: usize,
}

pub fn cross_entropy(y_hat: f64, y: u8) -> f64 {
    let p = y_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = f64::from(y);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// +1 when the diff item was clicked, -1 otherwise.
pub fn direction_alignment(y_diff: u8) -> f64 {
    if y_diff == 1 {
        1.0
    } else {
        -1.0
    }
}

/// `-(1/M) Σ log σ(I(y′)(r′ − r))` over `(r, r′, y′)`, zero when `M = 0`.
pub fn bpr_loss(pairs: &[(f64, f64, u8)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(r, r_diff, y_diff)| log_sigmoid(direction_alignment(y_diff) * (r_diff - r)))
        .sum();
    -sum / pairs.len() as f64
}

pub fn total_loss(ce: f64, bpr: f64, w1: f64, w2: f64) -> f64 {
    w1 * ce + w2 * bpr
}

/// Mean cross-entropy of a `[B, 1]` probability node against `labels`.
pub fn cross_entropy_node(tape: &mut Tape<'_>, y_hat: Var, labels: &[u8]) -> Result<Var> {
    let p = tape.clamp(y_hat, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0);
    let log_q = tape.log(q)?;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let pos = tape.mul_const(log_p, y)?;
    let neg = tape.mul_const(log_q, not_y)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll);
    Ok(tape.scale(mean, -1.0))
}

/// Pairwise term on graph nodes. `reward` is `[B, 1]`; `diff_reward[i]`
/// belongs to target row `target_rows[i]` and its diff label `diff_labels[i]`.
/// Returns `None` when nothing matched.
pub fn bpr_node(
    tape: &mut Tape<'_>,
    reward: Var,
    target_rows: &[usize],
    diff_reward: Var,
    diff_labels: &[u8],
) -> Result<Option<Var>> {
    if target_rows.is_empty() {
        return Ok(None);
    }
    let r = tape.select_rows(reward, target_rows)?;
    let gap = tape.sub(diff_reward, r)?;
    let signs = diff_labels.iter().map(|&y| direction_alignment(y)).collect();
    let aligned = tape.mul_const(gap, signs)?;
    let ls = tape.log_sigmoid(aligned);
    let mean = tape.mean(ls);
    Ok(Some(tape.scale(mean, -1.0)))
}

/// `w1·ce + w2·bpr` as a node, plus the scalar summary.
pub fn fuse(
    tape: &mut Tape<'_>,
    ce: Var,
    bpr: Option<Var>,
    matched_count: usize,
    weights: LossWeights,
) -> Result<(Var, BatchLoss)> {
    let ce_val = tape.scalar(ce);
    let weighted_ce = tape.scale(ce, weights.w1);
    let (total, bpr_val) = match bpr {
        Some(b) => {
            let bpr_val = tape.scalar(b);
            let weighted = tape.scale(b, weights.w2);
            (tape.add(weighted_ce, weighted)?, bpr_val)
        }
        None => (weighted_ce, 0.0),
    };
    let summary = BatchLoss {
        ce: ce_val,
        bpr: bpr_val,
        total: tape.scalar(total),
        matched_count,
    };
    Ok((total, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(1.0 - 1e-12, 1) < 1e-11);
        assert!(cross_entropy(0.0, 1).is_finite());
        assert!(cross_entropy(1.0, 0).is_finite());
    }

    #[test]
    fn batch_mean_matches_per_sample_average() {
        let ys = [0.1, 0.8, 0.55, 0.999, 0.3];
        let ls = [0u8, 1, 0, 1, 1];
        let oracle: f64 = ys.iter().zip(&ls).map(|(&p, &y)| cross_entropy(p, y)).sum::<f64>() / 5.0;
        let mut tape = Tape::new();
        let y = tape.input(&Tensor::new(vec![5, 1], ys.to_vec()).unwrap());
        let ce = cross_entropy_node(&mut tape, y, &ls).unwrap();
        assert!((tape.scalar(ce) - oracle).abs() < 1e-14);
    }

    #[test]
    fn alignment_signs() {
        assert_eq!(direction_alignment(1), 1.0);
        assert_eq!(direction_alignment(0), -1.0);
        for y in [0u8, 1] {
            assert_eq!(direction_alignment(1 - y), -direction_alignment(y));
        }
    }

    #[test]
    fn bpr_cases() {
        assert!((bpr_loss(&[(0.3, 0.3, 0), (1.0, 1.0, 1)]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bpr_loss(&[(1e3, -1e3, 0)]) < 1e-12);
        assert_eq!(bpr_loss(&[]), 0.0);
    }

    #[test]
    fn bpr_averages_over_matched_only() {
        // 8 samples, 3 of which have a diff.
        let rewards = [0.2, -0.4, 1.0, 0.0, 0.7, -1.2, 0.3, 0.9];
        let rows = [1usize, 4, 6];
        let diff_r = [0.5, -0.3, 2.0];
        let diff_y = [1u8, 0, 0];
        let mut tape = Tape::new();
        let r = tape.input(&Tensor::new(vec![8, 1], rewards.to_vec()).unwrap());
        let dr = tape.input(&Tensor::new(vec![3, 1], diff_r.to_vec()).unwrap());
        let b = bpr_node(&mut tape, r, &rows, dr, &diff_y).unwrap().unwrap();
        let pairs: Vec<_> = (0..3).map(|i| (rewards[rows[i]], diff_r[i], diff_y[i])).collect();
        let sum: f64 = pairs.iter().map(|p| bpr_loss(&[*p])).sum();
        assert!((tape.scalar(b) - sum / 3.0).abs() < 1e-14);
        assert!((tape.scalar(b) - sum / 8.0).abs() > 1e-3);
    }

    #[test]
    fn fusion_arithmetic() {
        assert!((total_loss(0.7, 0.6, 1.0, 0.1) - 0.76).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.6, 1.0, 0.0), 0.7);
        let mut tape = Tape::new();
        let ce = tape.input(&Tensor::scalar(0.7));
        let (_, s) = fuse(&mut tape, ce, None, 0, LossWeights::default()).unwrap();
        assert_eq!(s.bpr, 0.0);
        assert_eq!(s.total, 0.7);
        let bpr = tape.input(&Tensor::scalar(0.6));
        let (_, s) = fuse(&mut tape, ce, Some(bpr), 3, LossWeights::default()).unwrap();
        assert_eq!(s.total, total_loss(s.ce, s.bpr, 1.0, 0.1));
        assert_eq!(s.matched_count, 3);
    }
}
