#![allow(dead_code)]

use amen::data::{
    recency_bucket, DatasetMeta, Impression, ItemFeatures, Moveline, MovelineNode, SceneKind, SeqCaps, UserProfile,
    Vocab, DEFAULT_RECENCY_BOUNDARIES,
};
use amen::losses::{bpr_node, cross_entropy_node, fuse, LossWeights};
use amen::model::{forward_batch, AttentionProjections, Dense, ModelConfig, ModelParams, Mode};
use amen::tensor::{sigmoid, ParamId, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_meta() -> DatasetMeta {
    DatasetMeta {
        vocab: Vocab {
            users: 5,
            items: 9,
            categories: 4,
            shops: 3,
            price_buckets: 3,
            entities: 5,
            scenarios: 2,
            age_buckets: 3,
            activity_buckets: 2,
        },
        caps: SeqCaps {
            moveline: 3,
            aiseq: 3,
            short_seq: 3,
            long_seq: 3,
        },
        recency_boundaries: DEFAULT_RECENCY_BOUNDARIES.to_vec(),
        seed: 0,
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 4,
        heads: 2,
        ..ModelConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_item(meta: &DatasetMeta, rng: &mut ChaCha8Rng) -> ItemFeatures {
    let v = &meta.vocab;
    ItemFeatures {
        item_id: rng.gen_range(0..v.items),
        category_id: rng.gen_range(0..v.categories),
        shop_id: rng.gen_range(0..v.shops),
        price_bucket: rng.gen_range(0..v.price_buckets),
    }
}

/// A valid impression with every sequence length drawn from `0..=max_len`
/// (capped by the meta).
pub fn random_impression(meta: &DatasetMeta, rng: &mut ChaCha8Rng, max_len: usize) -> Impression {
    let v = &meta.vocab;
    let ts: i64 = rng.gen_range(1_000_000..2_000_000);
    let mut len = |cap: usize| rng.gen_range(0..=max_len.min(cap));
    let (nm, na, ns, nl) = (
        len(meta.caps.moveline),
        len(meta.caps.aiseq),
        len(meta.caps.short_seq),
        len(meta.caps.long_seq),
    );
    let mut stamps: Vec<i64> = (0..nm).map(|_| ts - rng.gen_range(1..900_000)).collect();
    stamps.sort_unstable();
    let nodes = stamps
        .into_iter()
        .map(|t| MovelineNode {
            kind: SceneKind::ALL[rng.gen_range(0..SceneKind::COUNT)],
            timestamp: t,
            category_id: rng.gen_range(0..v.categories),
            entity_id: rng.gen_range(0..v.entities),
            recency_bucket: recency_bucket(ts - t, &meta.recency_boundaries),
        })
        .collect();
    let mut items = |n: usize| (0..n).map(|_| random_item(meta, rng)).collect::<Vec<_>>();
    let aiseq = items(na);
    let short_seq = items(ns);
    let long_seq = items(nl);
    Impression {
        user_id: rng.gen_range(0..v.users),
        profile: UserProfile {
            age_bucket: rng.gen_range(0..v.age_buckets),
            activity_bucket: rng.gen_range(0..v.activity_buckets),
        },
        scenario_id: rng.gen_range(0..v.scenarios),
        timestamp: ts,
        target: random_item(meta, rng),
        label: rng.gen_range(0..=1),
        moveline: Moveline { nodes },
        aiseq,
        short_seq,
        long_seq,
    }
}

/// Overwrites every parameter with uniform noise in `±scale` so biases and
/// embeddings are all non-trivial.
pub fn randomize(params: &mut ModelParams, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = params.store.ids().collect();
    for id in ids {
        let n = params.store.get(id).len();
        let vals: Vec<f64> = (0..n).map(|_| r.gen_range(-scale..scale)).collect();
        params.store.set(id, &vals).unwrap();
    }
}

// ---- straight-line oracle -------------------------------------------------

fn row(store: &ParamStore, table: ParamId, i: u32) -> Vec<f64> {
    let t = store.get(table);
    let d = t.shape()[1];
    t.values()[i as usize * d..(i as usize + 1) * d].to_vec()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub fn oracle_item(p: &ModelParams, it: &ItemFeatures) -> Vec<f64> {
    let e = &p.layout.embeddings;
    let mut v = row(&p.store, e.item, it.item_id);
    add_into(&mut v, &row(&p.store, e.category, it.category_id));
    add_into(&mut v, &row(&p.store, e.shop, it.shop_id));
    add_into(&mut v, &row(&p.store, e.price, it.price_bucket));
    v
}

pub fn oracle_node(p: &ModelParams, n: &MovelineNode) -> Vec<f64> {
    let e = &p.layout.embeddings;
    let mut v = row(&p.store, e.scene_kind, n.kind.index() as u32);
    add_into(&mut v, &row(&p.store, e.category, n.category_id));
    add_into(&mut v, &row(&p.store, e.entity, n.entity_id));
    add_into(&mut v, &row(&p.store, e.recency, n.recency_bucket));
    v
}

/// `x · W` for a row vector and a row-major `[in, out]` matrix.
fn vec_mat(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    (0..out).map(|j| (0..x.len()).map(|i| x[i] * w[i * out + j]).sum()).collect()
}

/// Loops over heads and positions with explicit sums.
pub fn oracle_mhta(store: &ParamStore, proj: &AttentionProjections, q: &[f64], seq: &[Vec<f64>]) -> Vec<f64> {
    let d = q.len();
    let heads = proj.query.len();
    let dh = d / heads;
    let mut out = Vec::with_capacity(d);
    for h in 0..heads {
        if seq.is_empty() {
            out.extend(std::iter::repeat_n(0.0, dh));
            continue;
        }
        let wq = store.get(proj.query[h]).values();
        let wk = store.get(proj.key[h]).values();
        let wv = store.get(proj.value[h]).values();
        let qh = vec_mat(q, wq, dh);
        let logits: Vec<f64> = seq
            .iter()
            .map(|s| {
                let k = vec_mat(s, wk, dh);
                (0..dh).map(|j| qh[j] * k[j]).sum::<f64>() / (dh as f64).sqrt()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        let mut head = vec![0.0; dh];
        for (s, e) in seq.iter().zip(&ex) {
            let v = vec_mat(s, wv, dh);
            for j in 0..dh {
                head[j] += e / z * v[j];
            }
        }
        out.extend(head);
    }
    out
}

fn oracle_mlp(store: &ParamStore, layers: &[Dense], mut x: Vec<f64>) -> Vec<f64> {
    for (i, l) in layers.iter().enumerate() {
        let w = store.get(l.weight);
        let b = store.get(l.bias).values();
        let mut y = vec_mat(&x, w.values(), w.shape()[1]);
        add_into(&mut y, b);
        if i + 1 < layers.len() {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        x = y;
    }
    x
}

pub struct OracleOut {
    pub y_main: f64,
    pub reward: f64,
    pub y_hat: f64,
}

pub fn oracle_reward(p: &ModelParams, imp: &Impression) -> f64 {
    let e = &p.layout.embeddings;
    let et = oracle_item(p, &imp.target);
    let mut joined = et;
    joined.extend(row(&p.store, e.scenario, imp.scenario_id));
    joined.extend(row(&p.store, e.hour, imp.hour_bucket()));
    let prompt = vec_mat(&joined, p.store.get(p.layout.prompt).values(), p.config.dim);
    let nodes: Vec<Vec<f64>> = imp.moveline.nodes.iter().map(|n| oracle_node(p, n)).collect();
    let g = oracle_mhta(&p.store, &p.layout.scene_attention, &prompt, &nodes);
    oracle_mlp(&p.store, &p.layout.reward_net, g)[0]
}

pub fn oracle_forward(p: &ModelParams, imp: &Impression) -> OracleOut {
    let e = &p.layout.embeddings;
    let et = oracle_item(p, &imp.target);
    let seq = |s: &[ItemFeatures]| s.iter().map(|i| oracle_item(p, i)).collect::<Vec<_>>();
    let att = &p.layout.item_attention;
    let h_ais = if p.config.use_aiseq {
        oracle_mhta(&p.store, att, &et, &seq(&imp.aiseq))
    } else {
        vec![0.0; p.config.dim]
    };
    let h_short = oracle_mhta(&p.store, att, &et, &seq(&imp.short_seq));
    let h_long = oracle_mhta(&p.store, att, &et, &seq(&imp.long_seq));
    let mut user = row(&p.store, e.age, imp.profile.age_bucket);
    add_into(&mut user, &row(&p.store, e.activity, imp.profile.activity_bucket));
    let mut x = h_ais;
    x.extend(h_short);
    x.extend(h_long);
    x.extend(user);
    x.extend(et);
    let y_main = oracle_mlp(&p.store, &p.layout.main_net, x)[0];
    let reward = if p.config.use_moveline_reward {
        oracle_reward(p, imp)
    } else {
        0.0
    };
    OracleOut {
        y_main,
        reward,
        y_hat: sigmoid(y_main + reward),
    }
}

// ---- finite differences -----------------------------------------------------

/// Total training loss of a batch with optional diffs.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[&Impression],
    diffs: &[(usize, &Impression)],
    weights: LossWeights,
) -> (f64, amen::tensor::ParamGrads) {
    let mut tape = Tape::with_params(&params.store);
    let diff_imps: Vec<&Impression> = diffs.iter().map(|(_, d)| *d).collect();
    let g = forward_batch(&mut tape, params, batch, Mode::Train, &diff_imps).unwrap();
    let labels: Vec<u8> = batch.iter().map(|i| i.label).collect();
    let ce = cross_entropy_node(&mut tape, g.y_hat, &labels).unwrap();
    let bpr = match (g.reward, g.diff_reward) {
        (Some(r), Some(dr)) => {
            let rows: Vec<usize> = diffs.iter().map(|(i, _)| *i).collect();
            let dl: Vec<u8> = diffs.iter().map(|(_, d)| d.label).collect();
            bpr_node(&mut tape, r, &rows, dr, &dl).unwrap()
        }
        _ => None,
    };
    let (total, _) = fuse(&mut tape, ce, bpr, diffs.len(), weights).unwrap();
    let grads = tape.backward(total);
    (tape.scalar(total), tape.param_grads(&grads))
}

/// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the
/// analytic gradient and central differences of `f`, with the tensor name.
pub fn max_param_grad_error(
    params: &ModelParams,
    analytic: &amen::tensor::ParamGrads,
    f: impl Fn(&ModelParams) -> f64,
    h: f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    for id in params.store.ids() {
        let base = params.store.get(id).values().to_vec();
        let a = analytic.get(id);
        let mut num = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + h;
            p.store.set(id, &v).unwrap();
            let up = f(&p);
            v[i] = base[i] - h;
            p.store.set(id, &v).unwrap();
            let down = f(&p);
            num[i] = (up - down) / (2.0 * h);
        }
        p.store.set(id, &base).unwrap();
        let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let err = if scale < 1e-10 { diff } else { diff / scale };
        if err > worst.0 {
            worst = (err, params.store.name(id).to_string());
        }
    }
    worst
}

/// Brute-force AUC by counting all positive/negative pairs.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}
