use super::{ParamGrads, ParamStore, Result, TensorError};

/// AdaGrad with per-coordinate squared-gradient accumulators.
///
/// `acc += g²; p -= lr_t · g / (sqrt(acc) + eps)` where
/// `lr_t = lr · decay^step`. With `decay = 1` the only decay is the one the
/// growing accumulator provides.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaGrad {
    pub lr: f64,
    pub eps: f64,
    pub decay: f64,
    accum: Vec<Vec<f64>>,
    steps: u64,
}

impl AdaGrad {
    pub fn new(store: &ParamStore, lr: f64, eps: f64) -> Self {
        Self {
            lr,
            eps,
            decay: 1.0,
            accum: store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
            steps: 0,
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn accumulator(&self, index: usize) -> &[f64] {
        &self.accum[index]
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.accum.len() {
            return Err(TensorError::Shape {
                op: "adagrad_step",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        let lr = self.lr * self.decay.powf(self.steps as f64);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let acc = &mut self.accum[id.index()];
            let p = store.get_mut(id);
            if g.len() != p.len() {
                return Err(TensorError::Shape {
                    op: "adagrad_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            for ((p, a), &g) in p.values_mut().iter_mut().zip(acc.iter_mut()).zip(g) {
                if g == 0.0 {
                    continue;
                }
                *a += g * g;
                *p -= lr * g / (a.sqrt() + self.eps);
            }
        }
        self.steps += 1;
        Ok(())
    }
}
