use super::{mhta, Dense, ModelError, ModelParams, Result};
use crate::data::{hour_bucket, Impression, ItemFeatures, MovelineNode, SceneKind};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Online graph: the diff branch does not exist.
    Inference,
}

/// Side information of the surface where the target is shown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneContext {
    pub scenario_id: u32,
    pub hour_bucket: u32,
}

impl SceneContext {
    pub fn of(imp: &Impression) -> Self {
        Self {
            scenario_id: imp.scenario_id,
            hour_bucket: hour_bucket(imp.timestamp),
        }
    }
}

/// Graph handles for one batch; every tensor is `[rows, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct BatchGraph {
    pub y_main: Var,
    pub reward: Option<Var>,
    pub logit: Var,
    pub y_hat: Var,
    /// Reward of each diff impression, row-aligned with the `diffs` argument.
    pub diff_reward: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOutput {
    pub y_main: f64,
    pub reward: f64,
    pub y_hat: f64,
    pub diff_reward: Option<f64>,
}

fn ids(v: impl Iterator<Item = u32>) -> Vec<usize> {
    v.map(|x| x as usize).collect()
}

fn sum_fields(tape: &mut Tape<'_>, fields: &[(crate::tensor::ParamId, Vec<usize>)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (table, rows) in fields {
        let t = tape.param(*table);
        let e = tape.gather(t, rows)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, e)?,
            None => e,
        });
    }
    Ok(acc.expect("at least one field"))
}

/// Sum of item, category, shop and price embeddings: `[items.len(), d]`.
pub fn embed_items<'p>(tape: &mut Tape<'p>, params: &'p ModelParams, items: &[ItemFeatures]) -> Result<Var> {
    let e = &params.layout.embeddings;
    sum_fields(
        tape,
        &[
            (e.item, ids(items.iter().map(|i| i.item_id))),
            (e.category, ids(items.iter().map(|i| i.category_id))),
            (e.shop, ids(items.iter().map(|i| i.shop_id))),
            (e.price, ids(items.iter().map(|i| i.price_bucket))),
        ],
    )
}

/// Sum of kind, category, entity and recency embeddings: `[nodes.len(), d]`.
pub fn embed_moveline_nodes<'p>(
    tape: &mut Tape<'p>,
    params: &'p ModelParams,
    nodes: &[MovelineNode],
) -> Result<Var> {
    let e = &params.layout.embeddings;
    sum_fields(
        tape,
        &[
            (e.scene_kind, nodes.iter().map(|n| n.kind.index()).collect()),
            (e.category, ids(nodes.iter().map(|n| n.category_id))),
            (e.entity, ids(nodes.iter().map(|n| n.entity_id))),
            (e.recency, ids(nodes.iter().map(|n| n.recency_bucket))),
        ],
    )
}

/// Virtual scene-level node for each target:
/// `concat(e_t, scenario, hour) · W_prompt`, giving `[B, d]`.
pub fn build_prompt<'p>(
    tape: &mut Tape<'p>,
    params: &'p ModelParams,
    target_emb: Var,
    contexts: &[SceneContext],
) -> Result<Var> {
    let e = &params.layout.embeddings;
    let scenario = tape.param(e.scenario);
    let scenario = tape.gather(scenario, &ids(contexts.iter().map(|c| c.scenario_id)))?;
    let hour = tape.param(e.hour);
    let hour = tape.gather(hour, &ids(contexts.iter().map(|c| c.hour_bucket)))?;
    let joined = tape.concat(&[target_emb, scenario, hour], 1)?;
    let w = tape.param(params.layout.prompt);
    Ok(tape.matmul(joined, w)?)
}

fn mlp<'p>(tape: &mut Tape<'p>, layers: &[Dense], mut x: Var) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        let w = tape.param(layer.weight);
        let b = tape.param(layer.bias);
        let h = tape.matmul(x, w)?;
        x = tape.add_bias(h, b)?;
        if i + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Pads variable-length sequences to a common length (at least 1).
fn pad<T: Copy>(seqs: &[&[T]], filler: T) -> (Vec<T>, Vec<bool>, usize) {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    let mut out = Vec::with_capacity(seqs.len() * len);
    let mut valid = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        out.extend_from_slice(s);
        valid.extend(std::iter::repeat_n(true, s.len()));
        out.extend(std::iter::repeat_n(filler, len - s.len()));
        valid.extend(std::iter::repeat_n(false, len - s.len()));
    }
    (out, valid, len)
}

const PAD_ITEM: ItemFeatures = ItemFeatures {
    item_id: 0,
    category_id: 0,
    shop_id: 0,
    price_bucket: 0,
};

const PAD_NODE: MovelineNode = MovelineNode {
    kind: SceneKind::SearchResult,
    timestamp: 0,
    category_id: 0,
    entity_id: 0,
    recency_bucket: 0,
};

fn item_attention<'p>(
    tape: &mut Tape<'p>,
    params: &'p ModelParams,
    target_emb: Var,
    seqs: &[&[ItemFeatures]],
) -> Result<Var> {
    let (flat, valid, len) = pad(seqs, PAD_ITEM);
    let seq = embed_items(tape, params, &flat)?;
    Ok(mhta(tape, &params.layout.item_attention, target_emb, seq, len, &valid)?)
}

/// Moveline reward `r = Rwd(MHTA(prompt, moveline))` for each impression,
/// `[n, 1]`. `target_emb` may be passed in when already computed.
pub fn reward_branch<'p>(
    tape: &mut Tape<'p>,
    params: &'p ModelParams,
    imps: &[&Impression],
    target_emb: Option<Var>,
) -> Result<Var> {
    let target_emb = match target_emb {
        Some(v) => v,
        None => {
            let targets: Vec<_> = imps.iter().map(|i| i.target).collect();
            embed_items(tape, params, &targets)?
        }
    };
    let contexts: Vec<_> = imps.iter().map(|i| SceneContext::of(i)).collect();
    let prompt = build_prompt(tape, params, target_emb, &contexts)?;
    let movelines: Vec<&[MovelineNode]> = imps.iter().map(|i| i.moveline.nodes.as_slice()).collect();
    let (flat, valid, len) = pad(&movelines, PAD_NODE);
    let nodes = embed_moveline_nodes(tape, params, &flat)?;
    let g = mhta(tape, &params.layout.scene_attention, prompt, nodes, len, &valid)?;
    mlp(tape, &params.layout.reward_net, g)
}

/// Records the forward graph for a batch.
///
/// `diffs` pairs are only accepted in [`Mode::Train`]; their rewards reuse the
/// reward-branch parameters on each diff impression's own prompt and
/// moveline.
pub fn forward_batch<'p>(
    tape: &mut Tape<'p>,
    params: &'p ModelParams,
    batch: &[&Impression],
    mode: Mode,
    diffs: &[&Impression],
) -> Result<BatchGraph> {
    if batch.is_empty() {
        return Err(ModelError::Contract("empty batch".into()));
    }
    if mode == Mode::Inference && !diffs.is_empty() {
        return Err(ModelError::Contract("diff impressions are not part of the inference graph".into()));
    }
    let cfg = &params.config;
    let b = batch.len();
    let targets: Vec<_> = batch.iter().map(|i| i.target).collect();
    let target_emb = embed_items(tape, params, &targets)?;

    let h_ais = if cfg.use_aiseq {
        let seqs: Vec<&[ItemFeatures]> = batch.iter().map(|i| i.aiseq.as_slice()).collect();
        item_attention(tape, params, target_emb, &seqs)?
    } else {
        tape.constant(&[b, cfg.dim], vec![0.0; b * cfg.dim])?
    };
    let seqs: Vec<&[ItemFeatures]> = batch.iter().map(|i| i.short_seq.as_slice()).collect();
    let h_short = item_attention(tape, params, target_emb, &seqs)?;
    let seqs: Vec<&[ItemFeatures]> = batch.iter().map(|i| i.long_seq.as_slice()).collect();
    let h_long = item_attention(tape, params, target_emb, &seqs)?;

    let e = &params.layout.embeddings;
    let user = sum_fields(
        tape,
        &[
            (e.age, ids(batch.iter().map(|i| i.profile.age_bucket))),
            (e.activity, ids(batch.iter().map(|i| i.profile.activity_bucket))),
        ],
    )?;
    let main_in = tape.concat(&[h_ais, h_short, h_long, user, target_emb], 1)?;
    let y_main = mlp(tape, &params.layout.main_net, main_in)?;

    let (reward, logit, diff_reward) = if cfg.use_moveline_reward {
        let r = reward_branch(tape, params, batch, Some(target_emb))?;
        let logit = tape.add(y_main, r)?;
        let diff_reward = if diffs.is_empty() {
            None
        } else {
            Some(reward_branch(tape, params, diffs, None)?)
        };
        (Some(r), logit, diff_reward)
    } else {
        if !diffs.is_empty() {
            return Err(ModelError::Contract("diff impressions need the moveline reward branch".into()));
        }
        (None, y_main, None)
    };
    let y_hat = tape.sigmoid(logit);
    Ok(BatchGraph {
        y_main,
        reward,
        logit,
        y_hat,
        diff_reward,
    })
}

/// Scores one impression, optionally with its diff impression in train mode.
pub fn forward(
    impression: &Impression,
    params: &ModelParams,
    mode: Mode,
    diff: Option<&Impression>,
) -> Result<ForwardOutput> {
    let mut tape = Tape::with_params(&params.store);
    let diffs: Vec<&Impression> = diff.into_iter().collect();
    let g = forward_batch(&mut tape, params, &[impression], mode, &diffs)?;
    Ok(ForwardOutput {
        y_main: tape.scalar(g.y_main),
        reward: g.reward.map_or(0.0, |r| tape.scalar(r)),
        y_hat: tape.scalar(g.y_hat),
        diff_reward: g.diff_reward.map(|r| tape.scalar(r)),
    })
}

/// Predictions for many impressions without recording gradients beyond one
/// batch at a time: `(y_hat, r)` per impression.
pub fn predict(params: &ModelParams, imps: &[&Impression], batch_size: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(imps.len());
    for chunk in imps.chunks(batch_size.max(1)) {
        let mut tape = Tape::with_params(&params.store);
        let g = forward_batch(&mut tape, params, chunk, Mode::Inference, &[])?;
        let y = tape.value(g.y_hat).to_vec();
        let r = g.reward.map_or_else(|| vec![0.0; chunk.len()], |r| tape.value(r).to_vec());
        out.extend(y.into_iter().zip(r));
    }
    Ok(out)
}
