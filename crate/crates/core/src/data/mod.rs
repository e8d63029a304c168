//! Items, scenes, movelines and impressions, plus the line-delimited
//! dataset format shared by every pipeline stage.

mod io;

pub use io::{read_dataset, write_dataset, Dataset, DatasetReader, Header, PairingInfo, Record};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {field} = {value} is outside vocabulary of size {size}")]
    OutOfVocabulary {
        line: usize,
        field: &'static str,
        value: u64,
        size: u64,
    },
    #[error("line {line}: {message}")]
    Invariant { line: usize, message: String },
    #[error("invalid dataset metadata: {0}")]
    Meta(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct ItemFeatures {
    pub item_id: u32,
    pub category_id: u32,
    pub shop_id: u32,
    pub price_bucket: u32,
}

impl From<[u32; 4]> for ItemFeatures {
    fn from([item_id, category_id, shop_id, price_bucket]: [u32; 4]) -> Self {
        Self {
            item_id,
            category_id,
            shop_id,
            price_bucket,
        }
    }
}

impl From<ItemFeatures> for [u32; 4] {
    fn from(f: ItemFeatures) -> Self {
        [f.item_id, f.category_id, f.shop_id, f.price_bucket]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SceneKind {
    SearchResult = 0,
    ShopVisit = 1,
    CouponCollect = 2,
    ChannelVisit = 3,
    HomepageFeed = 4,
    TopicSearch = 5,
}

impl SceneKind {
    pub const COUNT: usize = 6;
    pub const ALL: [SceneKind; 6] = [
        SceneKind::SearchResult,
        SceneKind::ShopVisit,
        SceneKind::CouponCollect,
        SceneKind::ChannelVisit,
        SceneKind::HomepageFeed,
        SceneKind::TopicSearch,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Scenes whose exposed items feed the active intention sequence.
    pub fn exposes_items(self) -> bool {
        matches!(self, SceneKind::SearchResult | SceneKind::ShopVisit)
    }
}

impl TryFrom<u8> for SceneKind {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Self::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| format!("unknown scene kind {v}"))
    }
}

impl From<SceneKind> for u8 {
    fn from(k: SceneKind) -> u8 {
        k as u8
    }
}

/// One scene-level event. `category_id` and `entity_id` use 0 for "none".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "NodeRepr", into = "NodeRepr")]
pub struct MovelineNode {
    pub kind: SceneKind,
    pub timestamp: i64,
    pub category_id: u32,
    pub entity_id: u32,
    pub recency_bucket: u32,
}

#[derive(Serialize, Deserialize)]
struct NodeRepr(SceneKind, i64, u32, u32, u32);

impl From<NodeRepr> for MovelineNode {
    fn from(NodeRepr(kind, timestamp, category_id, entity_id, recency_bucket): NodeRepr) -> Self {
        Self {
            kind,
            timestamp,
            category_id,
            entity_id,
            recency_bucket,
        }
    }
}

impl From<MovelineNode> for NodeRepr {
    fn from(n: MovelineNode) -> Self {
        NodeRepr(n.kind, n.timestamp, n.category_id, n.entity_id, n.recency_bucket)
    }
}

/// Preceding scene-level events, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Moveline {
    pub nodes: Vec<MovelineNode>,
}

impl Moveline {
    /// Snapshot of `history` as seen at `at`: events strictly before `at`,
    /// the most recent `cap` of them, with recency buckets filled in.
    /// `history` must be sorted by timestamp.
    pub fn snapshot(history: &[MovelineNode], at: i64, cap: usize, boundaries: &[i64]) -> Self {
        let end = history.partition_point(|n| n.timestamp < at);
        let start = end.saturating_sub(cap);
        let nodes = history[start..end]
            .iter()
            .map(|n| MovelineNode {
                recency_bucket: recency_bucket(at - n.timestamp, boundaries),
                ..*n
            })
            .collect();
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Index of the first upper bound exceeding `gap`; gaps beyond the last bound
/// fall into the final open bucket.
pub fn recency_bucket(gap: i64, boundaries: &[i64]) -> u32 {
    boundaries.partition_point(|&b| b <= gap) as u32
}

pub const DEFAULT_RECENCY_BOUNDARIES: [i64; 6] = [60, 600, 3_600, 21_600, 86_400, 604_800];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserProfile {
    pub age_bucket: u32,
    pub activity_bucket: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Impression {
    pub user_id: u32,
    pub profile: UserProfile,
    pub scenario_id: u32,
    pub timestamp: i64,
    pub target: ItemFeatures,
    pub label: u8,
    pub moveline: Moveline,
    pub aiseq: Vec<ItemFeatures>,
    pub short_seq: Vec<ItemFeatures>,
    pub long_seq: Vec<ItemFeatures>,
}

impl Impression {
    pub fn clicked(&self) -> bool {
        self.label == 1
    }

    pub fn hour_bucket(&self) -> u32 {
        hour_bucket(self.timestamp)
    }
}

pub fn hour_bucket(timestamp: i64) -> u32 {
    (timestamp.rem_euclid(86_400) / 3_600) as u32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub users: u32,
    pub items: u32,
    pub categories: u32,
    pub shops: u32,
    pub price_buckets: u32,
    pub entities: u32,
    pub scenarios: u32,
    pub age_buckets: u32,
    pub activity_buckets: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqCaps {
    pub moveline: usize,
    pub aiseq: usize,
    pub short_seq: usize,
    pub long_seq: usize,
}

impl Default for SeqCaps {
    fn default() -> Self {
        Self {
            moveline: 30,
            aiseq: 20,
            short_seq: 10,
            long_seq: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub vocab: Vocab,
    pub caps: SeqCaps,
    pub recency_boundaries: Vec<i64>,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn recency_buckets(&self) -> usize {
        self.recency_boundaries.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vocab;
        let counts = [
            ("users", v.users),
            ("items", v.items),
            ("categories", v.categories),
            ("shops", v.shops),
            ("price_buckets", v.price_buckets),
            ("entities", v.entities),
            ("scenarios", v.scenarios),
            ("age_buckets", v.age_buckets),
            ("activity_buckets", v.activity_buckets),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, n)| *n == 0) {
            return Err(DataError::Meta(format!("vocabulary {name} is empty")));
        }
        if self.recency_boundaries.windows(2).any(|w| w[0] >= w[1])
            || self.recency_boundaries.first().is_some_and(|&b| b <= 0)
        {
            return Err(DataError::Meta("recency boundaries must be positive and increasing".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding; checkpoints carry it.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("meta serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks one impression against the vocabulary, caps and ordering rules.
    pub fn check(&self, imp: &Impression, line: usize) -> Result<()> {
        let v = &self.vocab;
        let oov = |field: &'static str, value: u32, size: u32| -> Result<()> {
            if value >= size {
                Err(DataError::OutOfVocabulary {
                    line,
                    field,
                    value: value as u64,
                    size: size as u64,
                })
            } else {
                Ok(())
            }
        };
        let item = |f: &ItemFeatures, names: [&'static str; 4]| -> Result<()> {
            oov(names[0], f.item_id, v.items)?;
            oov(names[1], f.category_id, v.categories)?;
            oov(names[2], f.shop_id, v.shops)?;
            oov(names[3], f.price_bucket, v.price_buckets)
        };
        oov("user_id", imp.user_id, v.users)?;
        oov("age_bucket", imp.profile.age_bucket, v.age_buckets)?;
        oov("activity_bucket", imp.profile.activity_bucket, v.activity_buckets)?;
        oov("scenario_id", imp.scenario_id, v.scenarios)?;
        item(&imp.target, ["item_id", "category_id", "shop_id", "price_bucket"])?;
        for f in &imp.aiseq {
            item(f, ["aiseq.item_id", "aiseq.category_id", "aiseq.shop_id", "aiseq.price_bucket"])?;
        }
        for f in &imp.short_seq {
            item(
                f,
                ["short_seq.item_id", "short_seq.category_id", "short_seq.shop_id", "short_seq.price_bucket"],
            )?;
        }
        for f in &imp.long_seq {
            item(
                f,
                ["long_seq.item_id", "long_seq.category_id", "long_seq.shop_id", "long_seq.price_bucket"],
            )?;
        }
        if imp.label > 1 {
            return Err(DataError::Invariant {
                line,
                message: format!("label {} is not binary", imp.label),
            });
        }
        let caps = [
            ("moveline", imp.moveline.len(), self.caps.moveline),
            ("aiseq", imp.aiseq.len(), self.caps.aiseq),
            ("short_seq", imp.short_seq.len(), self.caps.short_seq),
            ("long_seq", imp.long_seq.len(), self.caps.long_seq),
        ];
        for (name, len, cap) in caps {
            if len > cap {
                return Err(DataError::Invariant {
                    line,
                    message: format!("{name} length {len} exceeds cap {cap}"),
                });
            }
        }
        let mut prev = i64::MIN;
        for n in &imp.moveline.nodes {
            oov("moveline.category_id", n.category_id, v.categories)?;
            oov("moveline.entity_id", n.entity_id, v.entities)?;
            if n.timestamp < prev {
                return Err(DataError::Invariant {
                    line,
                    message: "moveline timestamps decrease".into(),
                });
            }
            if n.timestamp >= imp.timestamp {
                return Err(DataError::Invariant {
                    line,
                    message: format!("moveline node at {} does not precede impression at {}", n.timestamp, imp.timestamp),
                });
            }
            let expected = recency_bucket(imp.timestamp - n.timestamp, &self.recency_boundaries);
            if n.recency_bucket != expected {
                return Err(DataError::Invariant {
                    line,
                    message: format!("recency bucket {} should be {expected}", n.recency_bucket),
                });
            }
            prev = n.timestamp;
        }
        Ok(())
    }
}
