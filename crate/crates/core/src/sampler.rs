//! Time-span-based pair mining: for a target impression, find another
//! impression of the same user with the opposite label whose timestamp lies
//! between `min_gap` and `max_gap` seconds away, optionally restricted to the
//! same scenario.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Impression, PairingInfo};
use crate::simulator::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainConstraint {
    SameScenario,
    Global,
}

impl DomainConstraint {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainConstraint::SameScenario => "same_scenario",
            DomainConstraint::Global => "global",
        }
    }
}

impl std::str::FromStr for DomainConstraint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same_scenario" => Ok(DomainConstraint::SameScenario),
            "global" => Ok(DomainConstraint::Global),
            other => Err(format!("unknown domain constraint {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub min_gap: i64,
    pub max_gap: i64,
    pub domain: DomainConstraint,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            min_gap: 60,
            max_gap: 604_800,
            domain: DomainConstraint::SameScenario,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid sampling config: {0}")]
pub struct SamplingError(pub String);

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.min_gap <= 0 || self.min_gap >= self.max_gap {
            return Err(SamplingError(format!(
                "need 0 < min_gap < max_gap, got {} and {}",
                self.min_gap, self.max_gap
            )));
        }
        Ok(())
    }

    /// Whether `diff` may be paired with `target` under this config.
    pub fn admits(&self, target: &Impression, diff: &Impression) -> bool {
        let gap = (diff.timestamp - target.timestamp).abs();
        diff.user_id == target.user_id
            && diff.label != target.label
            && (self.min_gap..=self.max_gap).contains(&gap)
            && (self.domain == DomainConstraint::Global || diff.scenario_id == target.scenario_id)
    }

    pub fn info(&self) -> PairingInfo {
        PairingInfo {
            min_gap: self.min_gap,
            max_gap: self.max_gap,
            domain: self.domain.as_str().into(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub target: usize,
    pub diff: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub matched: usize,
    pub total: usize,
    pub coverage: f64,
}

impl CoverageReport {
    pub fn new(matched: usize, total: usize) -> Self {
        let coverage = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
        Self {
            matched,
            total,
            coverage,
        }
    }
}

/// Impressions grouped by user (and scenario under the same-scenario
/// constraint), each group sorted by timestamp.
pub struct PairIndex<'a> {
    impressions: &'a [Impression],
    config: SamplingConfig,
    groups: HashMap<(u32, u32), Vec<(i64, usize)>>,
}

impl<'a> PairIndex<'a> {
    pub fn build(impressions: &'a [Impression], config: SamplingConfig) -> Result<Self, SamplingError> {
        config.validate()?;
        let mut groups: HashMap<(u32, u32), Vec<(i64, usize)>> = HashMap::new();
        for (i, imp) in impressions.iter().enumerate() {
            groups.entry(Self::key(&config, imp)).or_default().push((imp.timestamp, i));
        }
        for g in groups.values_mut() {
            g.sort_unstable();
        }
        Ok(Self {
            impressions,
            config,
            groups,
        })
    }

    fn key(config: &SamplingConfig, imp: &Impression) -> (u32, u32) {
        match config.domain {
            DomainConstraint::SameScenario => (imp.user_id, imp.scenario_id),
            DomainConstraint::Global => (imp.user_id, u32::MAX),
        }
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.config
    }

    /// Every admissible diff for `target`, in index order.
    pub fn candidates(&self, target: usize) -> Vec<usize> {
        let t = &self.impressions[target];
        let Some(group) = self.groups.get(&Self::key(&self.config, t)) else {
            return Vec::new();
        };
        let window = |lo: i64, hi: i64| {
            let a = group.partition_point(|&(ts, _)| ts < lo);
            let b = group.partition_point(|&(ts, _)| ts <= hi);
            &group[a..b]
        };
        let ts = t.timestamp;
        let before = window(ts - self.config.max_gap, ts - self.config.min_gap);
        let after = window(ts + self.config.min_gap, ts + self.config.max_gap);
        let mut out: Vec<usize> = before
            .iter()
            .chain(after)
            .map(|&(_, i)| i)
            .filter(|&i| self.impressions[i].label != t.label)
            .collect();
        out.sort_unstable();
        out
    }

    /// A uniformly chosen admissible diff, deterministic per `(target, seed)`.
    pub fn sample_diff(&self, target: usize) -> Option<usize> {
        let c = self.candidates(target);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, target as u64));
        c.choose(&mut rng).copied()
    }

    pub fn match_rows(&self, rows: &[usize]) -> (Vec<ContrastivePair>, CoverageReport) {
        let pairs: Vec<_> = rows
            .iter()
            .filter_map(|&target| self.sample_diff(target).map(|diff| ContrastivePair { target, diff }))
            .collect();
        let report = CoverageReport::new(pairs.len(), rows.len());
        (pairs, report)
    }
}

/// Pairs every impression of `dataset` against the rest of it.
pub fn pair_dataset(dataset: &Dataset, config: SamplingConfig) -> Result<(Dataset, CoverageReport), SamplingError> {
    let index = PairIndex::build(&dataset.impressions, config)?;
    let diffs: Vec<Option<usize>> = (0..dataset.len()).map(|i| index.sample_diff(i)).collect();
    let matched = diffs.iter().filter(|d| d.is_some()).count();
    let mut out = dataset.clone();
    out.diffs = diffs;
    out.header.pairing = Some(config.info());
    Ok((out, CoverageReport::new(matched, dataset.len())))
}

/// Coverage of an already paired dataset.
pub fn coverage(dataset: &Dataset) -> CoverageReport {
    CoverageReport::new(dataset.diffs.iter().filter(|d| d.is_some()).count(), dataset.len())
}
