//! The CTR model: field embeddings, item-level and scene-level multi-head
//! target attention, the target prompt, Main Net, Reward Net and the fused
//! prediction `sigmoid(y_main + r)`.

mod attention;
mod checkpoint;
mod forward;

pub use attention::{mhta, AttentionProjections};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use forward::{
    build_prompt, embed_items, embed_moveline_nodes, forward, forward_batch, predict, reward_branch, BatchGraph,
    ForwardOutput, Mode, SceneContext,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetMeta, SceneKind};
use crate::tensor::{ParamGrads, ParamId, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub main_hidden: Vec<usize>,
    pub reward_hidden: Vec<usize>,
    /// Attend over the active intention sequence; otherwise its slot in the
    /// Main Net input is zero.
    pub use_aiseq: bool,
    /// Build the prompt / scene attention / Reward Net branch; otherwise r = 0.
    pub use_moveline_reward: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            main_hidden: vec![64, 32],
            reward_hidden: vec![32],
            use_aiseq: true,
            use_moveline_reward: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::Contract(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Embedding,
    ItemAttention,
    MainNet,
    SceneAttention,
    Prompt,
    RewardNet,
}

impl ParamGroup {
    /// Groups that exist only to compute the moveline reward.
    pub fn is_reward(self) -> bool {
        matches!(self, ParamGroup::SceneAttention | ParamGroup::Prompt | ParamGroup::RewardNet)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub item: ParamId,
    pub category: ParamId,
    pub shop: ParamId,
    pub price: ParamId,
    pub scene_kind: ParamId,
    pub entity: ParamId,
    pub recency: ParamId,
    pub scenario: ParamId,
    pub hour: ParamId,
    pub age: ParamId,
    pub activity: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub embeddings: EmbeddingTables,
    pub item_attention: AttentionProjections,
    pub scene_attention: AttentionProjections,
    pub prompt: ParamId,
    pub main_net: Vec<Dense>,
    pub reward_net: Vec<Dense>,
    groups: Vec<ParamGroup>,
}

impl Layout {
    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.index()]
    }
}

/// All learnable state plus the layout that names each tensor's role.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

/// Half-width of the uniform embedding init. Small values leave AdaGrad
/// stuck on long plateaus for some seeds.
pub const EMBEDDING_INIT: f64 = 0.5;

struct Builder<'a> {
    store: ParamStore,
    groups: Vec<ParamGroup>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64, group: ParamGroup) -> ParamId {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.push(name, Tensor::new(shape.to_vec(), values).expect("positive shape"), group)
    }

    fn push(&mut self, name: String, t: Tensor, group: ParamGroup) -> ParamId {
        self.groups.push(group);
        self.store.add(name, t)
    }

    fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> ParamId {
        self.uniform(format!("emb.{name}"), &[rows, dim], EMBEDDING_INIT, ParamGroup::Embedding)
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup) -> Dense {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(format!("{name}.w"), &[fan_in, fan_out], bound, group);
        let bias = self.push(format!("{name}.b"), Tensor::zeros(&[fan_out]), group);
        Dense { weight, bias }
    }

    fn attention(&mut self, name: &str, dim: usize, heads: usize, group: ParamGroup) -> AttentionProjections {
        let dh = dim / heads;
        let bound = 1.0 / (dim as f64).sqrt();
        let proj = |kind: &str, b: &mut Self| -> Vec<ParamId> {
            (0..heads)
                .map(|i| b.uniform(format!("{name}.{kind}{i}"), &[dim, dh], bound, group))
                .collect()
        };
        let query = proj("q", self);
        let key = proj("k", self);
        let value = proj("v", self);
        AttentionProjections { query, key, value }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: &[usize], group: ParamGroup) -> Vec<Dense> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| self.dense(&format!("{name}.{i}"), w[0], w[1], group))
            .collect()
    }
}

impl ModelParams {
    /// Fresh parameters: embeddings uniform in ±[`EMBEDDING_INIT`], dense weights uniform in
    /// ±1/sqrt(fan_in), biases zero.
    pub fn init(config: ModelConfig, meta: &DatasetMeta, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            groups: Vec::new(),
            rng: &mut rng,
        };
        let d = config.dim;
        let v = &meta.vocab;
        let embeddings = EmbeddingTables {
            item: b.embedding("item", v.items as usize, d),
            category: b.embedding("category", v.categories as usize, d),
            shop: b.embedding("shop", v.shops as usize, d),
            price: b.embedding("price", v.price_buckets as usize, d),
            scene_kind: b.embedding("scene_kind", SceneKind::COUNT, d),
            entity: b.embedding("entity", v.entities as usize, d),
            recency: b.embedding("recency", meta.recency_buckets(), d),
            scenario: b.embedding("scenario", v.scenarios as usize, d),
            hour: b.embedding("hour", 24, d),
            age: b.embedding("age", v.age_buckets as usize, d),
            activity: b.embedding("activity", v.activity_buckets as usize, d),
        };
        let item_attention = b.attention("item_attn", d, config.heads, ParamGroup::ItemAttention);
        let main_net = b.mlp("main", 5 * d, &config.main_hidden, ParamGroup::MainNet);
        let scene_attention = b.attention("scene_attn", d, config.heads, ParamGroup::SceneAttention);
        let prompt = b.uniform(
            "prompt.w".into(),
            &[3 * d, d],
            1.0 / ((3 * d) as f64).sqrt(),
            ParamGroup::Prompt,
        );
        let reward_net = b.mlp("reward", d, &config.reward_hidden, ParamGroup::RewardNet);
        let Builder { store, groups, .. } = b;
        Ok(Self {
            config,
            store,
            layout: Layout {
                embeddings,
                item_attention,
                scene_attention,
                prompt,
                main_net,
                reward_net,
                groups,
            },
        })
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.layout.group(id)
    }

    /// The parameters that exist only to compute the moveline reward.
    pub fn reward_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.group(id).is_reward()).collect()
    }

    pub fn params_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.group(id) == group).collect()
    }

    /// Zeroes the gradient of every reward-partition parameter.
    pub fn mask_reward_grads(&self, grads: &mut ParamGrads) {
        for id in self.reward_params() {
            grads.zero(id);
        }
    }
}
