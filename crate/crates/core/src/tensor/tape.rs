use super::{log_sigmoid, numel, sigmoid, ParamGrads, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulConst(Var, Vec<f64>),
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Abs(Var),
    LogSigmoid(Var),
    Clamp(Var, f64, f64),
    Concat { inputs: Vec<Var>, outer: usize, widths: Vec<usize> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    // `None` for parameters, which are read from the borrowed store.
    value: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward computation.
///
/// Nodes only reference earlier nodes, so reverse recording order is a valid
/// reverse topological order for the backward pass.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(values), _) => values,
            (None, Op::Param(id)) => self.params.expect("param tape").get(*id).values(),
            (None, _) => unreachable!("only parameter nodes borrow their values"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor; it receives a gradient iff `requires_grad` is set on it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Input, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), values)?;
        Ok(self.input(&t))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.expect("tape built without params").get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched product of `a[B,m,k]` with `b[B,k,n]`, or with `b[B,n,k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::Shape {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        let bstride = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bv[i * k * n..(i + 1) * k * n],
                bstride,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![batch, m, n], out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), values, Op::Reshape(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let values = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), values, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().expect("rank >= 1");
        if numel(sb) != n {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let b = self.value(bias);
        let values = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx.to_vec(), values, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != numel(self.shape(x)) {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let values = self.value(x).iter().zip(&c).map(|(x, c)| x * c).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), values, Op::MulConst(x, c), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let values = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), values, op, rg)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.map(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        Ok(self.map(x, f64::ln, Op::Log(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Axis {
                axis,
                rank: first.len(),
            });
        }
        let outer = numel(&first[..axis]);
        let inner: usize = numel(&first[axis + 1..]);
        let mut widths = Vec::with_capacity(inputs.len());
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis] * inner);
            axis_total += s[axis];
        }
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                values.extend_from_slice(&self.value(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = axis_total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            values,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis` with max-subtraction. Positions where `valid` is
    /// false get zero weight; a lane with no valid position is all zeros.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, valid: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if let Some(m) = valid {
            if m.len() != numel(&shape) {
                return Err(TensorError::Shape {
                    op: "masked_softmax",
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let ok = |j: usize| valid.is_none_or(|m| m[at(j)]);
                let max = (0..len)
                    .filter(|&j| ok(j))
                    .map(|j| xv[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for j in (0..len).filter(|&j| ok(j)) {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Rows of a 2-D `table` selected by `ids`, giving `[ids.len(), cols]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "gather",
                lhs: s.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Lookup { index: bad, rows });
        }
        let tv = self.value(table);
        let mut values = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            values.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), cols],
            values,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Leading-axis selection: `x[rows[i], ...]` for each i.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = numel(&s[1..]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(TensorError::Lookup { index: bad, rows: s[0] });
        }
        let xv = self.value(x);
        let mut values = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            values.extend_from_slice(&xv[r * width..(r + 1) * width]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            values,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![m], Op::Mean(x), rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = numel(&self.nodes[v.0].shape);
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.as_deref().unwrap_or(&[]);
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, (n, 1), bv, (1, n), ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, av, (1, k), g, (n, 1), gb, 1.0);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (self.value(*a), self.value(*b));
                let (amk, bkn, cmn) = (m * k, k * n, m * n);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..batch {
                        let bs = if *trans_b { (k, 1) } else { (1, n) };
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * cmn..(i + 1) * cmn],
                            (n, 1),
                            &bv[i * bkn..(i + 1) * bkn],
                            bs,
                            &mut ga[i * amk..(i + 1) * amk],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * cmn..(i + 1) * cmn];
                        let ai = &av[i * amk..(i + 1) * amk];
                        let out = &mut gb[i * bkn..(i + 1) * bkn];
                        if *trans_b {
                            // b is [n,k]: dB = dCᵀ · A
                            gemm(n, m, k, gi, (1, n), ai, (k, 1), out, 1.0);
                        } else {
                            gemm(k, m, n, ai, (1, k), gi, (n, 1), out, 1.0);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, g), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, g), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::MulConst(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), c) in gx.iter_mut().zip(g).zip(c) {
                        *d += g * c;
                    }
                }
            }
            Op::Affine(x, scale) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, g)| *d += g * scale);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += g / v;
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v != 0.0 {
                            *d += g * v.signum();
                        }
                    }
                }
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += g * sigmoid(-v);
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, g), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v >= *lo && v <= *hi {
                            *d += g;
                        }
                    }
                }
            }
            Op::Concat { inputs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            add_into(&mut gv[o * w..(o + 1) * w], src);
                        }
                    }
                    offset += w;
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..*len).map(|j| out[at(j)] * g[at(j)]).sum();
                            for j in 0..*len {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = self.shape(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let width = numel(&self.shape(*x)[1..]);
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &i) in rows.iter().enumerate() {
                        add_into(&mut gx[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
        }
    }

    /// Gradients of every parameter leaf, dense and zero-filled for
    /// parameters the tape never reached.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let store = self.params.expect("tape built without params");
        let mut out = ParamGrads::zeros_like(store);
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(g) = var.and_then(|v| grads.wrt(v)) {
                out.get_mut(ParamId(pid)).copy_from_slice(g);
            }
        }
        out
    }
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when no path from the loss reaches `v`.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c = a·b + beta·c` with explicit (row, col) strides for `a` and `b`;
/// `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let id = tape.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.input(&t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let p = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(p), &[3.0, -1.0, 2.5, 7.0]);

        let a = tape.input(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.input(&t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::zeros(&[2, 3]));
        let b = tape.input(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.input(&t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.input(&t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert!((tape.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(s)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.input(&t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s) {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_masked_lane_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let s = tape.masked_softmax(x, 1, Some(&[false, false, true, false])).unwrap();
        assert_eq!(tape.value(s), &[0.0, 0.0, 1.0, 0.0]);
        let l = tape.sum(s);
        let g = tape.backward(l);
        assert!(g.wrt(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let z = tape.input(&t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s), &[0.5]);

        let a = tape.input(&Tensor::zeros(&[2, 3]));
        let b = tape.input(&Tensor::zeros(&[2, 5]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);

        let neg = tape.input(&t(&[2], &[1.0, -0.5]));
        assert!(matches!(tape.log(neg), Err(TensorError::Domain { op: "log", .. })));
        let zero = tape.input(&t(&[1], &[0.0]));
        assert!(tape.log(zero).is_err());
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.input(&Tensor::zeros(&[3, 2]));
        assert_eq!(
            tape.gather(table, &[0, 3]).unwrap_err(),
            TensorError::Lookup { index: 3, rows: 3 }
        );
    }

    #[test]
    fn untouched_param_has_zero_grad_and_reuse_accumulates() {
        let mut store = ParamStore::new();
        let used = store.add("used", t(&[2], &[1.0, 2.0]));
        let unused = store.add("unused", t(&[2], &[5.0, 6.0]));
        let mut tape = Tape::with_params(&store);
        let p = tape.param(used);
        assert_eq!(tape.param(used), p);
        let q = tape.mul(p, p).unwrap();
        let l = tape.sum(q);
        let g = tape.backward(l);
        let pg = tape.param_grads(&g);
        assert_eq!(pg.get(used), &[2.0, 4.0]);
        assert!(pg.is_zero(unused));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.input(&t(&[2], &[1.0, 2.0]));
        let x = tape.input(&t(&[2], &[3.0, 4.0]).with_grad());
        let y = tape.mul(c, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 2.0]);
    }
}
