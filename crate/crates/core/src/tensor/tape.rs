use super::kernels::{self, matmul_dims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `x[i] + p[i % len(p)]`: row biases and positional tables.
    AddPeriodic(Var, Var),
    MulConst(Var, Vec<f64>),
    Affine(Var, f64),
    Relu(Var),
    Sum(Var),
    SumSquares(Var),
    /// `sqrt(sum of squares)` jointly over several tensors.
    GroupNorm(Vec<Var>),
    MeanPool {
        x: Var,
        seq: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        per_sample: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them backward.
///
/// Nodes are stored in creation order, so every op's inputs precede it and a
/// reverse scan is a reverse topological order. `backward` may be called more
/// than once: each call recomputes gradients from the stored forward values,
/// so repeated calls yield identical results.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Copies a tensor onto the tape; tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Moves an untracked tensor onto the tape without copying.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well formed")
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.tracked(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Sub(a, b), rg))
    }

    /// Adds `p` tiled over `x`; `p`'s element count must divide `x`'s.
    /// With `p` of length `cols` this is a row bias.
    pub fn add_periodic(&mut self, x: Var, p: Var) -> Result<Var> {
        let (nx, np) = (self.value(x).len(), self.value(p).len());
        if nx % np != 0 {
            return Err(Error::Dimension {
                op: "add_periodic",
                left: self.shape(x).to_vec(),
                right: self.shape(p).to_vec(),
            });
        }
        let pv = self.value(p);
        let out = self
            .value(x)
            .chunks(np)
            .flat_map(|chunk| chunk.iter().zip(pv).map(|(a, b)| a + b))
            .collect();
        let rg = self.tracked(&[x, p]);
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddPeriodic(x, p), rg))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "mul_const",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let out = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let rg = self.tracked(&[x]);
        Ok(self.push(out, self.shape(x).to_vec(), Op::MulConst(x, mask), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.tracked(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let rg = self.tracked(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.tracked(&[x]);
        self.push(vec![s], vec![1], Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = kernels::sum_squares(self.value(x));
        let rg = self.tracked(&[x]);
        self.push(vec![s], vec![1], Op::SumSquares(x), rg)
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        self.group_norm(&[x])
    }

    /// Frobenius norm of the concatenation of several tensors.
    /// The gradient at the origin is defined as zero.
    pub fn group_norm(&mut self, xs: &[Var]) -> Var {
        let s: f64 = xs.iter().map(|&x| kernels::sum_squares(self.value(x))).sum();
        let rg = self.tracked(xs);
        self.push(vec![s.sqrt()], vec![1], Op::GroupNorm(xs.to_vec()), rg)
    }

    /// Mean over consecutive runs of `seq` rows: `[b*seq, d] -> [b, d]`.
    pub fn mean_pool(&mut self, x: Var, seq: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || seq == 0 || shape[0] % seq != 0 {
            return Err(Error::Dimension {
                op: "mean_pool",
                left: shape.to_vec(),
                right: vec![seq],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let b = rows / seq;
        let xv = self.value(x);
        let mut out = vec![0.0; b * d];
        for (r, row) in xv.chunks(d).enumerate() {
            let o = &mut out[(r / seq) * d..(r / seq + 1) * d];
            for (acc, v) in o.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = 1.0 / seq as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.tracked(&[x]);
        Ok(self.push(out, vec![b, d], Op::MeanPool { x, seq }, rg))
    }

    /// Normalizes each row of a 2-D `x` to zero mean and unit variance, then
    /// applies `gain` and `bias` (both of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits: [batch, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, false)
    }

    /// Per-row softmax cross-entropy, shape `[batch]`.
    pub fn cross_entropy_per_sample(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, true)
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize], per_sample: bool) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: shape.to_vec(),
                right: vec![labels.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut losses = Vec::with_capacity(labels.len());
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[label]);
            kernels::softmax_in_place(row);
        }
        let (value, shape) = if per_sample {
            let n = losses.len();
            (losses, vec![n])
        } else {
            (vec![losses.iter().sum::<f64>() / labels.len() as f64], vec![1])
        };
        let rg = self.tracked(&[logits]);
        Ok(self.push(
            value,
            shape,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                per_sample,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch*seq, d]` with `d` divisible by `heads`;
    /// attention mixes rows only within the same sequence.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || seq == 0 || heads == 0 || shape[0] % seq != 0 || shape[1] % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                left: shape,
                right: vec![seq, heads],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let batch = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for (j, s) in prow.iter_mut().enumerate() {
                        let kj = &kv[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                        *s = kernels::dot(qi, kj) * scale;
                    }
                    kernels::softmax_in_place(prow);
                    let oi = &mut out[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for (j, &pij) in prow.iter().enumerate() {
                        let vj = &vv[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
        }
        let rg = self.tracked(&[q, k, v]);
        Ok(self.push(
            out,
            vec![rows, d],
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Afterwards [`Tape::grad`] returns
    /// the gradient of every tracked node; tracked nodes the loss does not
    /// depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar root, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Writes the gradient for `v` into `t`'s grad buffer.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.set_grad(g.to_vec()),
            None => Err(Error::validation("no gradient recorded for tensor")),
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let da = acc(grads, *a, m * k);
                    kernels::matmul_grad_lhs(g, self.value(*b), da, m, k, n);
                }
                if self.requires_grad(*b) {
                    let db = acc(grads, *b, k * n);
                    kernels::matmul_grad_rhs(self.value(*a), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for (x, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.requires_grad(x) {
                        add_scaled(acc(grads, x, g.len()), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (x, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.requires_grad(x) {
                        add_scaled(acc(grads, x, g.len()), g, sign);
                    }
                }
            }
            Op::AddPeriodic(x, p) => {
                if self.requires_grad(*x) {
                    add_scaled(acc(grads, *x, g.len()), g, 1.0);
                }
                if self.requires_grad(*p) {
                    let np = self.value(*p).len();
                    let dp = acc(grads, *p, np);
                    for chunk in g.chunks(np) {
                        add_scaled(dp, chunk, 1.0);
                    }
                }
            }
            Op::MulConst(x, mask) => {
                if self.requires_grad(*x) {
                    let dx = acc(grads, *x, g.len());
                    for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Affine(x, s) => {
                if self.requires_grad(*x) {
                    add_scaled(acc(grads, *x, g.len()), g, *s);
                }
            }
            Op::Relu(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    let dx = acc(grads, *x, g.len());
                    for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).len();
                    acc(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumSquares(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    let dx = acc(grads, *x, xv.len());
                    for (d, v) in dx.iter_mut().zip(xv) {
                        *d += 2.0 * v * g[0];
                    }
                }
            }
            Op::GroupNorm(xs) => {
                let norm = node.value[0];
                if norm > 0.0 {
                    for &x in xs {
                        if self.requires_grad(x) {
                            let xv = self.value(x);
                            let dx = acc(grads, x, xv.len());
                            for (d, v) in dx.iter_mut().zip(xv) {
                                *d += g[0] * v / norm;
                            }
                        }
                    }
                } else {
                    for &x in xs {
                        if self.requires_grad(x) {
                            acc(grads, x, self.value(x).len());
                        }
                    }
                }
            }
            Op::MeanPool { x, seq } => {
                if self.requires_grad(*x) {
                    let d = node.shape[1];
                    let inv = 1.0 / *seq as f64;
                    let dx = acc(grads, *x, self.value(*x).len());
                    for (r, row) in dx.chunks_mut(d).enumerate() {
                        let gb = &g[(r / seq) * d..(r / seq + 1) * d];
                        for (o, gi) in row.iter_mut().zip(gb) {
                            *o += gi * inv;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain);
                if self.requires_grad(*gain) {
                    let dg = acc(grads, *gain, d);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let db = acc(grads, *bias, d);
                    for grow in g.chunks(d) {
                        add_scaled(db, grow, 1.0);
                    }
                }
                if self.requires_grad(*x) {
                    let dx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, ((grow, hrow), dxrow)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
                    {
                        for c in 0..d {
                            dxhat[c] = grow[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = kernels::dot(&dxhat, hrow) / d as f64;
                        for c in 0..d {
                            dxrow[c] += rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                per_sample,
            } => {
                if self.requires_grad(*logits) {
                    let c = self.shape(*logits)[1];
                    let n = labels.len() as f64;
                    let dl = acc(grads, *logits, probs.len());
                    for (r, (drow, prow)) in dl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        let scale = if *per_sample { g[r] } else { g[0] / n };
                        for j in 0..c {
                            let y = if j == labels[r] { 1.0 } else { 0.0 };
                            drow[j] += scale * (prow[j] - y);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *seq, *heads, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = (self.shape(q)[0], self.shape(q)[1]);
        let batch = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq];
        let span = |b: usize, t: usize, h: usize| (b * seq + t) * d + h * dh..(b * seq + t) * d + (h + 1) * dh;
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let prow = &p[i * seq..(i + 1) * seq];
                    let gi = &g[span(b, i, h)];
                    for j in 0..seq {
                        dp[j] = kernels::dot(gi, &vv[span(b, j, h)]);
                        add_scaled(&mut dv[span(b, j, h)], gi, prow[j]);
                    }
                    let weighted = kernels::dot(prow, &dp);
                    for j in 0..seq {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        add_scaled(&mut dq[span(b, i, h)], &kv[span(b, j, h)], ds);
                        add_scaled(&mut dk[span(b, j, h)], &qv[span(b, i, h)], ds);
                    }
                }
            }
        }
        for (x, dx) in [(q, dq), (k, dk), (v, dv)] {
            if self.requires_grad(x) {
                add_scaled(acc(grads, x, dx.len()), &dx, 1.0);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}
