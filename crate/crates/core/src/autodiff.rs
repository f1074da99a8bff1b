//! Reverse-mode automatic differentiation over a define-by-run graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it once in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One sequence's span of query rows and key rows inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    Relu,
    Softmax,
    LayerNorm,
    CrossEntropy,
    Gather,
    SliceCols,
    ConcatCols,
    SliceRows,
    ConcatRows,
    Sum,
    Dropout,
    Attention,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Tensor,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Gather { .. } => OpKind::Gather,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Attention { .. } => OpKind::Attention,
        }
    }

    fn name(&self) -> &'static str {
        match self.kind() {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Gather => "gather",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Sum => "sum",
            OpKind::Dropout => "dropout",
            OpKind::Attention => "attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Attention probabilities of one (segment, head): `q_len × k_len`, row-major.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock<'a> {
    pub segment: usize,
    pub head: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub probs: &'a [f64],
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Op kinds of every node, in creation order.
    pub fn kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_t(self.value(a), self.value(b), false, false)?;
        self.push(Op::MatMul { a, b, trans_b: false }, value, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_t(self.value(a), self.value(b), false, true)?;
        self.push(Op::MatMul { a, b, trans_b: true }, value, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |p, q| p + q);
        self.push(Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |p, q| p - q);
        self.push(Op::Sub(a, b), value, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |p, q| p * q);
        self.push(Op::Mul(a, b), value, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), value, &[a])
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(Error::shape("add_row", "bias length must equal row width"));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push(Op::AddRow { x, bias }, value, &[x, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let value = tensor::softmax_rows_masked(self.value(x), causal)?;
        self.push(Op::Softmax(x), value, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (_, n) = self.value(x).dims2()?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", "gain/bias length must equal row width"));
        }
        let (xhat, inv_std) = tensor::layer_norm_stats(self.value(x), eps)?;
        let mut value = xhat.clone();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        for row in value.data_mut().chunks_mut(n) {
            for j in 0..n {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            value,
            &[x, gain, bias],
        )
    }

    /// Mean cross-entropy over rows whose target differs from `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (loss, probs, count) =
            tensor::cross_entropy_with_probs(self.value(logits), targets, ignore)?;
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            Tensor::scalar(loss),
            &[logits],
        )
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = self.value(table).select_rows(ids)?;
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{}+{} > {}", start, len, n)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        self.push(Op::SliceCols { x, start }, value, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of nothing"));
        }
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push(Op::ConcatCols(parts.to_vec()), value, parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        self.push(Op::SliceRows { x, start }, value, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of nothing"));
        }
        let n = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push(Op::ConcatRows(parts.to_vec()), value, parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, &[x])
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::invalid("dropout rate must be < 1"));
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut value = self.value(x).clone();
        for (v, s) in value.data_mut().iter_mut().zip(&scale) {
            *v *= s;
        }
        self.push(Op::Dropout { x, scale }, value, &[x])
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `Nq × d`, `k` and `v` are `Nk × d`; each segment attends only
    /// within its own query/key spans. Head `h` uses columns
    /// `h·d/H .. (h+1)·d/H`. With `causal`, query `i` of a segment sees keys
    /// `0..=i` of that segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let (nq, d) = self.value(q).dims2()?;
        let (nk, dk) = self.value(k).dims2()?;
        let (nv, dv) = self.value(v).dims2()?;
        if dk != d || dv != d || nv != nk {
            return Err(Error::shape("attention", "q/k/v widths or k/v rows differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{} heads do not divide {}", heads, d)));
        }
        for s in segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk || s.k_len == 0 {
                return Err(Error::shape("attention", format!("segment {:?} out of range", s)));
            }
            if causal && s.q_len > s.k_len {
                return Err(Error::shape("attention", "causal segment with more queries than keys"));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; nq * d];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut offset = 0;
        for s in segments {
            for h in 0..heads {
                let block = &mut probs[offset..offset + s.q_len * s.k_len];
                let col = h * dh;
                // scores = Q_h K_hᵀ
                gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    &qd[s.q_start * d + col..],
                    d,
                    1,
                    &kd[s.k_start * d + col..],
                    1,
                    d,
                    0.0,
                    block,
                    s.k_len,
                    1,
                );
                for i in 0..s.q_len {
                    let row = &mut block[i * s.k_len..(i + 1) * s.k_len];
                    let width = if causal { i + 1 } else { s.k_len };
                    for x in row[..width].iter_mut() {
                        *x *= scale;
                    }
                    let scores = row[..width].to_vec();
                    tensor::softmax_into(&scores, &mut row[..width]);
                    for x in row[width..].iter_mut() {
                        *x = 0.0;
                    }
                }
                gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    block,
                    s.k_len,
                    1,
                    &vd[s.k_start * d + col..],
                    d,
                    1,
                    0.0,
                    &mut out[s.q_start * d + col..],
                    d,
                    1,
                );
                offset += s.q_len * s.k_len;
            }
        }
        let value = Tensor::matrix(nq, d, out)?;
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            value,
            &[q, k, v],
        )
    }

    /// Probability blocks recorded by an attention node, in segment-major,
    /// head-minor order.
    pub fn attention_blocks(&self, v: Var) -> Option<Vec<AttentionBlock<'_>>> {
        match &self.nodes[v.0].op {
            Op::Attention {
                heads,
                segments,
                probs,
                ..
            } => {
                let mut blocks = Vec::with_capacity(segments.len() * heads);
                let mut offset = 0;
                for (si, s) in segments.iter().enumerate() {
                    for h in 0..*heads {
                        let n = s.q_len * s.k_len;
                        blocks.push(AttentionBlock {
                            segment: si,
                            head: h,
                            q_len: s.q_len,
                            k_len: s.k_len,
                            probs: &probs[offset..offset + n],
                        });
                        offset += n;
                    }
                }
                Some(blocks)
            }
            _ => None,
        }
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // C = A·B → dA = G·Bᵀ ; C = A·Bᵀ → dA = G·B
                    let da = tensor::matmul_t(g, bv, false, !trans_b)?;
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = if *trans_b {
                        tensor::matmul_t(g, av, true, false)?
                    } else {
                        tensor::matmul_t(av, g, true, false)?
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.map(|v| v * f));
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let p = &node.value;
                    let n = p.cols();
                    let mut dx = vec![0.0; p.len()];
                    for ((drow, prow), grow) in dx
                        .chunks_mut(n)
                        .zip(p.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(p.shape().to_vec(), dx)?);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = xhat.cols();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; n];
                    for (grow, hrow) in g.data().chunks(n).zip(xhat.data().chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    accumulate(grads, *gain, Tensor::new(shape, dg)?);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; n];
                    for grow in g.data().chunks(n) {
                        for j in 0..n {
                            db[j] += grow[j];
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, db)?);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    let nf = n as f64;
                    for (r, ((drow, grow), hrow)) in dx
                        .chunks_mut(n)
                        .zip(g.data().chunks(n))
                        .zip(xhat.data().chunks(n))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            drow[j] = inv_std[r] * (dh - sum_dh / nf - hrow[j] * sum_dh_h / nf);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(xhat.shape().to_vec(), dx)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let upstream = g.item() / *count as f64;
                    let v = probs.cols();
                    let mut dl = vec![0.0; probs.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let prow = probs.row(r);
                        for j in 0..v {
                            dl[r * v + j] = upstream * prow[j];
                        }
                        dl[r * v + t] -= upstream;
                    }
                    accumulate(grads, *logits, Tensor::new(probs.shape().to_vec(), dl)?);
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let n = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            dt[id * n + j] += g.data()[r * n + j];
                        }
                    }
                    accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let (m, n) = self.value(*x).dims2()?;
                    let w = g.cols();
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + w]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(grads, *x, Tensor::matrix(m, n, dx)?);
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.cols();
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g.data()[r * n + offset..r * n + offset + w]);
                        }
                        accumulate(grads, p, Tensor::matrix(m, w, dp)?);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let (m, n) = self.value(*x).dims2()?;
                    let mut dx = vec![0.0; m * n];
                    dx[start * n..start * n + g.len()].copy_from_slice(g.data());
                    accumulate(grads, *x, Tensor::matrix(m, n, dx)?);
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut row = 0;
                for &p in parts {
                    let pm = self.value(p).rows();
                    if self.wants(p) {
                        let dp = g.data()[row * n..(row + pm) * n].to_vec();
                        accumulate(grads, p, Tensor::matrix(pm, n, dp)?);
                    }
                    row += pm;
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, Tensor::filled(&shape, g.item()));
                }
            }
            Op::Dropout { x, scale } => {
                if self.wants(*x) {
                    let data = g.data().iter().zip(scale).map(|(a, b)| a * b).collect();
                    accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, *heads, segments, probs, grads)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (nq, d) = self.value(q).dims2()?;
        let nk = self.value(k).rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let gd = g.data();
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut offset = 0;
        for s in segments {
            let n = s.q_len * s.k_len;
            for h in 0..heads {
                let p = &probs[offset..offset + n];
                let col = h * dh;
                // dP = dO · Vᵀ
                let mut dp = vec![0.0; n];
                gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    &gd[s.q_start * d + col..],
                    d,
                    1,
                    &vd[s.k_start * d + col..],
                    1,
                    d,
                    0.0,
                    &mut dp,
                    s.k_len,
                    1,
                );
                // dV += Pᵀ · dO
                gemm(
                    s.k_len,
                    s.q_len,
                    dh,
                    p,
                    1,
                    s.k_len,
                    &gd[s.q_start * d + col..],
                    d,
                    1,
                    1.0,
                    &mut dv[s.k_start * d + col..],
                    d,
                    1,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), pre-scaled
                for i in 0..s.q_len {
                    let prow = &p[i * s.k_len..(i + 1) * s.k_len];
                    let drow = &mut dp[i * s.k_len..(i + 1) * s.k_len];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..s.k_len {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                }
                // dQ += dS · K
                gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    &dp,
                    s.k_len,
                    1,
                    &kd[s.k_start * d + col..],
                    d,
                    1,
                    1.0,
                    &mut dq[s.q_start * d + col..],
                    d,
                    1,
                );
                // dK += dSᵀ · Q
                gemm(
                    s.k_len,
                    s.q_len,
                    dh,
                    &dp,
                    1,
                    s.k_len,
                    &qd[s.q_start * d + col..],
                    d,
                    1,
                    1.0,
                    &mut dk[s.k_start * d + col..],
                    d,
                    1,
                );
                offset += n;
            }
        }
        if self.wants(q) {
            accumulate(grads, q, Tensor::matrix(nq, d, dq)?);
        }
        if self.wants(k) {
            accumulate(grads, k, Tensor::matrix(nk, d, dk)?);
        }
        if self.wants(v) {
            accumulate(grads, v, Tensor::matrix(nk, d, dv)?);
        }
        Ok(())
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
