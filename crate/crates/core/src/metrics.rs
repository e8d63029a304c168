//! AUC, user-grouped AUC and the bucketed reward-density analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const REWARD_BUCKETS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user_id: u32,
    pub y_hat: f64,
    pub reward: f64,
    pub label: u8,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

/// Average 1-based ranks of `scores`, tied values sharing their mean rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-sum AUC of `scores` against binary `labels`; ties get half credit.
pub fn auc_scores(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined("auc needs both classes"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn auc(records: &[EvalRecord]) -> Result<f64, MetricError> {
    let scores: Vec<f64> = records.iter().map(|r| r.y_hat).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    auc_scores(&scores, &labels)
}

/// Impression-weighted mean of per-user AUC over users with both labels.
pub fn gauc(records: &[EvalRecord]) -> Result<f64, MetricError> {
    let mut by_user: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for r in records {
        let e = by_user.entry(r.user_id).or_default();
        e.0.push(r.y_hat);
        e.1.push(r.label);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (scores, labels) in by_user.values() {
        if let Ok(a) = auc_scores(scores, labels) {
            let w = scores.len() as f64;
            num += w * a;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(MetricError::Undefined("gauc needs a user with both classes"));
    }
    Ok(num / den)
}

/// Share of one label's rewards per normalized bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardCurve {
    pub proportions: Vec<f64>,
    pub count: usize,
    /// Mean normalized reward in `[0, 1]`.
    pub mean: f64,
    /// Number of buckets holding at least one record.
    pub occupied: usize,
}

impl RewardCurve {
    fn from_values(normalized: &[f64]) -> Self {
        let mut counts = vec![0usize; REWARD_BUCKETS];
        for &v in normalized {
            counts[bucket_of(v)] += 1;
        }
        let n = normalized.len();
        let proportions = counts
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect();
        Self {
            proportions,
            count: n,
            mean: if n == 0 { 0.0 } else { normalized.iter().sum::<f64>() / n as f64 },
            occupied: counts.iter().filter(|&&c| c > 0).count(),
        }
    }
}

fn bucket_of(normalized: f64) -> usize {
    ((normalized * REWARD_BUCKETS as f64) as usize).min(REWARD_BUCKETS - 1)
}

/// Click and non-click reward curves of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRewardCurves {
    pub click: RewardCurve,
    pub unclick: RewardCurve,
    /// Rewards had zero spread; everything sits in bucket 0.
    pub degenerate: bool,
    pub min: f64,
    pub max: f64,
}

impl ModelRewardCurves {
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let min = records.iter().map(|r| r.reward).fold(f64::INFINITY, f64::min);
        let max = records.iter().map(|r| r.reward).fold(f64::NEG_INFINITY, f64::max);
        // Also true when the rewards contain NaN.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let degenerate = !(max - min > 0.0);
        let norm = |r: &EvalRecord| if degenerate { 0.0 } else { (r.reward - min) / (max - min) };
        let split = |label: u8| -> Vec<f64> { records.iter().filter(|r| r.label == label).map(norm).collect() };
        Self {
            click: RewardCurve::from_values(&split(1)),
            unclick: RewardCurve::from_values(&split(0)),
            degenerate,
            min,
            max,
        }
    }

    /// Total occupied buckets across both labels.
    pub fn support(&self) -> usize {
        self.click
            .proportions
            .iter()
            .zip(&self.unclick.proportions)
            .filter(|(a, b)| **a > 0.0 || **b > 0.0)
            .count()
    }
}

/// Four curves: `{tsp, non_tsp} × {click, unclick}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardDistribution {
    pub tsp: ModelRewardCurves,
    pub non_tsp: ModelRewardCurves,
}

pub fn reward_distribution(tsp: &[EvalRecord], non_tsp: &[EvalRecord]) -> Result<RewardDistribution, MetricError> {
    if tsp.is_empty() || non_tsp.is_empty() {
        return Err(MetricError::Undefined("reward distribution needs records for both models"));
    }
    Ok(RewardDistribution {
        tsp: ModelRewardCurves::from_records(tsp),
        non_tsp: ModelRewardCurves::from_records(non_tsp),
    })
}

impl RewardDistribution {
    /// Tab-separated table: bucket index then the four proportions.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bucket\ttsp_click\ttsp_unclick\tnon_tsp_click\tnon_tsp_unclick\n");
        for b in 0..REWARD_BUCKETS {
            out.push_str(&format!(
                "{b}\t{}\t{}\t{}\t{}\n",
                self.tsp.click.proportions[b],
                self.tsp.unclick.proportions[b],
                self.non_tsp.click.proportions[b],
                self.non_tsp.unclick.proportions[b]
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: u32, y: f64, label: u8) -> EvalRecord {
        EvalRecord {
            user_id: user,
            y_hat: y,
            reward: y,
            label,
        }
    }

    #[test]
    fn auc_trivial_cases() {
        let perfect: Vec<_> = [0u8, 1, 0, 1, 1].iter().map(|&l| rec(0, l as f64, l)).collect();
        assert_eq!(auc(&perfect).unwrap(), 1.0);
        let ties: Vec<_> = [0u8, 1, 0, 1].iter().map(|&l| rec(0, 0.3, l)).collect();
        assert_eq!(auc(&ties).unwrap(), 0.5);
        assert!(auc(&[rec(0, 0.2, 1), rec(0, 0.4, 1)]).is_err());
    }

    #[test]
    fn gauc_hand_weighted() {
        let recs = vec![
            rec(0, 0.1, 0),
            rec(0, 0.2, 0),
            rec(0, 0.8, 1),
            rec(0, 0.9, 1),
            rec(1, 0.5, 0),
            rec(1, 0.5, 1),
            rec(2, 0.7, 1),
        ];
        assert!((gauc(&recs).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(gauc(&[rec(2, 0.7, 1)]).is_err());
    }

    #[test]
    fn constant_rewards_are_degenerate() {
        let recs: Vec<_> = (0..10).map(|i| EvalRecord { reward: 2.5, ..rec(0, 0.5, (i % 2) as u8) }).collect();
        let c = ModelRewardCurves::from_records(&recs);
        assert!(c.degenerate);
        assert_eq!(c.click.proportions[0], 1.0);
        assert_eq!(c.support(), 1);
    }

    #[test]
    fn separated_rewards_fill_end_buckets() {
        let recs: Vec<_> = (0..10).map(|i| rec(0, (i % 2) as f64, (i % 2) as u8)).collect();
        let d = reward_distribution(&recs, &recs).unwrap();
        assert_eq!(d.tsp.click.proportions[REWARD_BUCKETS - 1], 1.0);
        assert_eq!(d.tsp.unclick.proportions[0], 1.0);
        assert!(!d.tsp.degenerate);
        assert_eq!(d.to_tsv().lines().count(), REWARD_BUCKETS + 1);
    }
}
