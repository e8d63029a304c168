use crate::tensor::{ParamId, Tape, TensorError, Var};

/// Per-head query/key/value projections, each `d × d/h`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjections {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
}

impl AttentionProjections {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn all(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.query.iter().chain(&self.key).chain(&self.value).copied()
    }
}

/// Multi-head target attention of one query per row over a padded sequence.
///
/// `query` is `[B, d]`, `seq` is `[B·L, d]` (row-major by batch then
/// position) and `valid` flags the `B·L` real positions. Per head:
/// `softmax((q Wq)(S Wk)ᵀ / sqrt(d/h)) · (S Wv)`, heads concatenated to
/// `[B, d]`. A row with no valid position yields zeros.
pub fn mhta(
    tape: &mut Tape<'_>,
    proj: &AttentionProjections,
    query: Var,
    seq: Var,
    len: usize,
    valid: &[bool],
) -> Result<Var, TensorError> {
    let batch = tape.shape(query)[0];
    let d = tape.shape(query)[1];
    if tape.shape(seq) != [batch * len, d] || valid.len() != batch * len {
        return Err(TensorError::Shape {
            op: "mhta",
            lhs: tape.shape(query).to_vec(),
            rhs: tape.shape(seq).to_vec(),
        });
    }
    let heads = proj.heads();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = tape.param(proj.query[h]);
        let wk = tape.param(proj.key[h]);
        let wv = tape.param(proj.value[h]);
        let dh = tape.shape(wq)[1];
        let q = tape.matmul(query, wq)?;
        let q = tape.reshape(q, &[batch, 1, dh])?;
        let k = tape.matmul(seq, wk)?;
        let k = tape.reshape(k, &[batch, len, dh])?;
        let v = tape.matmul(seq, wv)?;
        let v = tape.reshape(v, &[batch, len, dh])?;
        let logits = tape.bmm(q, k, true)?;
        let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
        let weights = tape.masked_softmax(logits, 2, Some(valid))?;
        let head = tape.bmm(weights, v, false)?;
        outs.push(tape.reshape(head, &[batch, dh])?);
    }
    tape.concat(&outs, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(d: usize, heads: usize, seed: u64) -> (ParamStore, AttentionProjections) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut mk = |kind: &str, store: &mut ParamStore| -> Vec<ParamId> {
            (0..heads)
                .map(|i| store.add(format!("{kind}{i}"), random(&mut rng, &[d, d / heads])))
                .collect()
        };
        let query = mk("q", &mut store);
        let key = mk("k", &mut store);
        let value = mk("v", &mut store);
        (store, AttentionProjections { query, key, value })
    }

    #[test]
    fn single_position_returns_value_projection() {
        let (store, proj) = setup(4, 2, 3);
        let mut tape = Tape::with_params(&store);
        let q = tape.input(&Tensor::new(vec![1, 4], vec![9.0, -3.0, 0.5, 2.0]).unwrap());
        let s_vals = vec![0.3, -0.2, 0.7, 1.1];
        let s = tape.input(&Tensor::new(vec![1, 4], s_vals.clone()).unwrap());
        let out = mhta(&mut tape, &proj, q, s, 1, &[true]).unwrap();
        let mut expect = Vec::new();
        for &wv in &proj.value {
            let w = store.get(wv);
            for c in 0..2 {
                expect.push((0..4).map(|r| s_vals[r] * w.values()[r * 2 + c]).sum::<f64>());
            }
        }
        for (a, b) in tape.value(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let (store, proj) = setup(4, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::with_params(&store);
        let q = tape.input(&random(&mut rng, &[2, 4]));
        let s = tape.input(&random(&mut rng, &[6, 4]));
        let out = mhta(&mut tape, &proj, q, s, 3, &[false, false, false, true, true, false]).unwrap();
        assert!(tape.value(out)[..4].iter().all(|&v| v == 0.0));
        assert!(tape.value(out)[4..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn padding_does_not_leak() {
        let (store, proj) = setup(8, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let qt = random(&mut rng, &[1, 8]);
        let st = random(&mut rng, &[2, 8]);
        let mut tape = Tape::with_params(&store);
        let q = tape.input(&qt);
        let s = tape.input(&st);
        let short = mhta(&mut tape, &proj, q, s, 2, &[true, true]).unwrap();
        let mut padded = st.values().to_vec();
        padded.extend((0..8).map(|i| 100.0 + i as f64));
        let sp = tape.input(&Tensor::new(vec![3, 8], padded).unwrap());
        let long = mhta(&mut tape, &proj, q, sp, 3, &[true, true, false]).unwrap();
        for (a, b) in tape.value(short).iter().zip(tape.value(long)) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
