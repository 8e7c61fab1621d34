use super::tensor::gemm;
use super::{flops, gelu_grad_scalar, gelu_scalar, masked_softmax_row, sigmoid, KernelError, Tensor};

type Result<T> = std::result::Result<T, KernelError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias {
        x: usize,
        bias: usize,
    },
    MatMul {
        x: usize,
        w: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    MaskedSoftmax(usize),
    SplitHeads {
        x: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        heads: usize,
    },
    PrependToken {
        token: usize,
        x: usize,
    },
    SelectToken {
        x: usize,
        index: usize,
    },
    ScatterRows {
        x: usize,
        offset: usize,
        positions: Vec<Vec<usize>>,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    UpsampleNearest {
        x: usize,
        factor: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// [`Tape::backward`] visits nodes in exact reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, present once backward reached the node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Indices of the inputs of the operation that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<usize> {
        op_inputs(&self.nodes[v.0].op)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(KernelError::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Add(a.0, b.0)))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(KernelError::shape(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x);
        let out = Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] * c);
        self.push_op(out, Op::Scale(x.0, c))
    }

    /// Adds a vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(bias));
        let d = tx.last_dim();
        if tb.numel() != d || tx.shape().is_empty() {
            return Err(KernelError::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", tb.shape(), tx.shape()),
            ));
        }
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    /// `x[..., k] · w[k, n]` with all leading axes of `x` flattened.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        if tw.shape().len() != 2 || tx.shape().is_empty() || tx.last_dim() != tw.shape()[0] {
            return Err(KernelError::shape(
                "matmul",
                format!("{:?} · {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (m, k, n) = (tx.rows(), tw.shape()[0], tw.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, tx.data(), false, tw.data(), false, 0.0, &mut out);
        flops::record(m, k, n);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, out)?;
        Ok(self.push_op(out, Op::MatMul { x: x.0, w: w.0 }))
    }

    /// Batched product `a[g] · b[g]` (or `a[g] · b[g]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let bad = || {
            KernelError::shape(
                "bmm",
                format!("{:?} · {:?} (trans_b={trans_b})", ta.shape(), tb.shape()),
            )
        };
        if ta.shape().len() != 3 || tb.shape().len() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            gemm(
                m,
                k,
                n,
                &ta.data()[gi * m * k..(gi + 1) * m * k],
                false,
                &tb.data()[gi * k * n..(gi + 1) * k * n],
                trans_b,
                0.0,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        flops::record(g * m, k, n);
        let out = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push_op(
            out,
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
        ))
    }

    /// Layer normalization over the trailing axis.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d || tx.shape().is_empty() {
            return Err(KernelError::shape(
                "layernorm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    tx.shape(),
                    tg.shape(),
                    tb.shape()
                ),
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + super::LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let out = Tensor::from_fn(t.shape().to_vec(), |i| gelu_scalar(t.data()[i]));
        self.push_op(out, Op::Gelu(x.0))
    }

    /// Softmax over the trailing axis with masked positions excluded.
    ///
    /// `live` holds `groups × n` flags; consecutive blocks of
    /// `rows / groups` rows share one mask row. Masked outputs are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, live: &[bool]) -> Result<Var> {
        let t = self.val(x);
        let n = t.last_dim();
        let rows = t.rows();
        if t.shape().is_empty() || n == 0 || live.len() % n != 0 || live.is_empty() {
            return Err(KernelError::shape(
                "masked_softmax",
                format!("mask of length {} for input {:?}", live.len(), t.shape()),
            ));
        }
        let groups = live.len() / n;
        if rows % groups != 0 {
            return Err(KernelError::shape(
                "masked_softmax",
                format!("{rows} rows cannot be split into {groups} mask groups"),
            ));
        }
        let per_group = rows / groups;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let g = r / per_group;
            let ok = masked_softmax_row(
                t.row(r),
                &live[g * n..(g + 1) * n],
                &mut out[r * n..(r + 1) * n],
            );
            if !ok {
                return Err(KernelError::FullyMasked { row: r });
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push_op(out, Op::MaskedSoftmax(x.0)))
    }

    /// `[B, T, H·e] → [B·H, T, e]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let t = self.val(x);
        let s = t.shape();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(KernelError::shape(
                "split_heads",
                format!("{s:?} into {heads} heads"),
            ));
        }
        let (b, tl, d) = (s[0], s[1], s[2]);
        let e = d / heads;
        let mut out = vec![0.0; b * tl * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..tl {
                    let src = (bi * tl + ti) * d + h * e;
                    let dst = ((bi * heads + h) * tl + ti) * e;
                    out[dst..dst + e].copy_from_slice(&t.data()[src..src + e]);
                }
            }
        }
        let out = Tensor::new(vec![b * heads, tl, e], out)?;
        Ok(self.push_op(out, Op::SplitHeads { x: x.0, heads }))
    }

    /// `[B·H, T, e] → [B, T, H·e]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let t = self.val(x);
        let s = t.shape();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(KernelError::shape(
                "merge_heads",
                format!("{s:?} from {heads} heads"),
            ));
        }
        let (bh, tl, e) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = heads * e;
        let mut out = vec![0.0; b * tl * d];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..tl {
                    let src = ((bi * heads + h) * tl + ti) * e;
                    let dst = (bi * tl + ti) * d + h * e;
                    out[dst..dst + e].copy_from_slice(&t.data()[src..src + e]);
                }
            }
        }
        let out = Tensor::new(vec![b, tl, d], out)?;
        Ok(self.push_op(out, Op::MergeHeads { x: x.0, heads }))
    }

    /// Puts `token` (shape `[D]`) in front of every sequence of `x` (`[B, T, D]`).
    pub fn prepend_token(&mut self, token: Var, x: Var) -> Result<Var> {
        let (tt, tx) = (self.val(token), self.val(x));
        let s = tx.shape();
        if s.len() != 3 || tt.numel() != s[2] {
            return Err(KernelError::shape(
                "prepend_token",
                format!("token {:?} before {s:?}", tt.shape()),
            ));
        }
        let (b, tl, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * (tl + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(tt.data());
            out.extend_from_slice(&tx.data()[bi * tl * d..(bi + 1) * tl * d]);
        }
        let out = Tensor::new(vec![b, tl + 1, d], out)?;
        Ok(self.push_op(out, Op::PrependToken { token: token.0, x: x.0 }))
    }

    /// Row `index` of every sequence: `[B, T, D] → [B, D]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.val(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(KernelError::shape("select_token", format!("{s:?}")));
        }
        if index >= s[1] {
            return Err(KernelError::Index {
                op: "select_token",
                index,
                extent: s[1],
            });
        }
        let (b, tl, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let src = (bi * tl + index) * d;
            out.extend_from_slice(&t.data()[src..src + d]);
        }
        let out = Tensor::new(vec![b, d], out)?;
        Ok(self.push_op(out, Op::SelectToken { x: x.0, index }))
    }

    /// Places row `offset + j` of sequence `b` at position `positions[b][j]`
    /// of an `n`-row output; every other output row is zero.
    pub fn scatter_rows(
        &mut self,
        x: Var,
        offset: usize,
        positions: &[Vec<usize>],
        n: usize,
    ) -> Result<Var> {
        let t = self.val(x);
        let s = t.shape();
        if s.len() != 3 || positions.len() != s[0] {
            return Err(KernelError::shape(
                "scatter_rows",
                format!("{s:?} with {} position lists", positions.len()),
            ));
        }
        let (b, tl, d) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; b * n * d];
        for (bi, pos) in positions.iter().enumerate() {
            if offset + pos.len() > tl {
                return Err(KernelError::shape(
                    "scatter_rows",
                    format!("{} rows after offset {offset} exceed length {tl}", pos.len()),
                ));
            }
            for (j, &p) in pos.iter().enumerate() {
                if p >= n {
                    return Err(KernelError::Index {
                        op: "scatter_rows",
                        index: p,
                        extent: n,
                    });
                }
                let src = (bi * tl + offset + j) * d;
                let dst = (bi * n + p) * d;
                out[dst..dst + d].copy_from_slice(&t.data()[src..src + d]);
            }
        }
        let out = Tensor::new(vec![b, n, d], out)?;
        Ok(self.push_op(
            out,
            Op::ScatterRows {
                x: x.0,
                offset,
                positions: positions.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.val(x).clone().reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(x.0)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).sum());
        self.push_op(out, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let out = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        self.push_op(out, Op::Mean(x.0))
    }

    /// Nearest-neighbour upsampling of a channel-last map `[B, h, w, C]`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.val(x);
        let s = t.shape();
        if s.len() != 4 || factor == 0 {
            return Err(KernelError::shape(
                "upsample_nearest",
                format!("{s:?} by factor {factor}"),
            ));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let src = ((bi * h + y / factor) * w + xx / factor) * c;
                    let dst = ((bi * oh + y) * ow + xx) * c;
                    out[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
                }
            }
        }
        let out = Tensor::new(vec![b, oh, ow, c], out)?;
        Ok(self.push_op(out, Op::UpsampleNearest { x: x.0, factor }))
    }

    pub fn upsample2x_nearest(&mut self, x: Var) -> Result<Var> {
        self.upsample_nearest(x, 2)
    }

    /// Mean sigmoid binary cross-entropy over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.val(logits);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(KernelError::shape(
                "bce_with_logits",
                format!("{} targets for logits {:?}", targets.len(), t.shape()),
            ));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push_op(
            out,
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy over trailing-axis rows against class indices.
    pub fn ce_pixelwise(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.val(logits);
        let k = t.last_dim();
        if t.shape().is_empty() || t.rows() != labels.len() || labels.is_empty() {
            return Err(KernelError::shape(
                "ce_pixelwise",
                format!("{} labels for logits {:?}", labels.len(), t.shape()),
            ));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(KernelError::Index {
                    op: "ce_pixelwise",
                    index: y,
                    extent: k,
                });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push_op(
            out,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(KernelError::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let Some(g) = node.grad.take() else { continue };
            if matches!(node.op, Op::Leaf) {
                node.grad = Some(g);
                continue;
            }
            backprop(head, &node.op, &node.value, &g);
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::Scale(x, _)
        | Op::Gelu(x)
        | Op::MaskedSoftmax(x)
        | Op::Reshape(x)
        | Op::Sum(x)
        | Op::Mean(x) => vec![x],
        Op::AddBias { x, bias } => vec![x, bias],
        Op::MatMul { x, w } => vec![x, w],
        Op::Bmm { a, b, .. } => vec![a, b],
        Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
        Op::SplitHeads { x, .. }
        | Op::MergeHeads { x, .. }
        | Op::SelectToken { x, .. }
        | Op::ScatterRows { x, .. }
        | Op::UpsampleNearest { x, .. } => vec![x],
        Op::PrependToken { token, x } => vec![token, x],
        Op::BceWithLogits { logits, .. } | Op::CrossEntropy { logits, .. } => vec![logits],
    }
}

fn accumulate(nodes: &mut [Node], idx: usize, contribution: Vec<f64>) {
    let node = &mut nodes[idx];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        None => node.grad = Some(contribution),
    }
}

fn wants(nodes: &[Node], idx: usize) -> bool {
    nodes[idx].requires_grad
}

fn backprop(nodes: &mut [Node], op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, *a, g.to_vec());
            accumulate(nodes, *b, g.to_vec());
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let c: Vec<f64> = g.iter().zip(nodes[*b].value.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, *a, c);
            }
            if wants(nodes, *b) {
                let c: Vec<f64> = g.iter().zip(nodes[*a].value.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, *b, c);
            }
        }
        Op::Scale(x, c) => accumulate(nodes, *x, g.iter().map(|v| v * c).collect()),
        Op::AddBias { x, bias } => {
            if wants(nodes, *bias) {
                let d = nodes[*bias].value.numel();
                let mut gb = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    gb[i % d] += v;
                }
                accumulate(nodes, *bias, gb);
            }
            accumulate(nodes, *x, g.to_vec());
        }
        Op::MatMul { x, w } => {
            let (tx, tw) = (&nodes[*x].value, &nodes[*w].value);
            let (m, k, n) = (tx.rows(), tw.shape()[0], tw.shape()[1]);
            let gx = wants(nodes, *x).then(|| {
                let mut gx = vec![0.0; m * k];
                gemm(m, n, k, g, false, tw.data(), true, 0.0, &mut gx);
                gx
            });
            let gw = wants(nodes, *w).then(|| {
                let mut gw = vec![0.0; k * n];
                gemm(k, m, n, tx.data(), true, g, false, 0.0, &mut gw);
                gw
            });
            if let Some(gx) = gx {
                accumulate(nodes, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(nodes, *w, gw);
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
            let n = out.shape()[2];
            let ga = wants(nodes, *a).then(|| {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                ga
            });
            let gb = wants(nodes, *b).then(|| {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(n, m, k, gi, true, ai, false, 0.0, dst);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, 0.0, dst);
                    }
                }
                gb
            });
            if let Some(ga) = ga {
                accumulate(nodes, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(nodes, *b, gb);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[*gain].value.numel();
            let rows = rstd.len();
            let gv = nodes[*gain].value.data().to_vec();
            if wants(nodes, *x) {
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let dy = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = dy[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = dy[j] * gv[j];
                        gx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                accumulate(nodes, *x, gx);
            }
            if wants(nodes, *gain) {
                let mut gg = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    gg[i % d] += v * xhat[i];
                }
                accumulate(nodes, *gain, gg);
            }
            if wants(nodes, *bias) {
                let mut gb = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    gb[i % d] += v;
                }
                accumulate(nodes, *bias, gb);
            }
        }
        Op::Gelu(x) => {
            let c = g
                .iter()
                .zip(nodes[*x].value.data())
                .map(|(gv, xv)| gv * gelu_grad_scalar(*xv))
                .collect();
            accumulate(nodes, *x, c);
        }
        Op::MaskedSoftmax(x) => {
            let n = out.last_dim();
            let mut gx = vec![0.0; out.numel()];
            for r in 0..out.rows() {
                let y = out.row(r);
                let dy = &g[r * n..(r + 1) * n];
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    gx[r * n + j] = y[j] * (dy[j] - dot);
                }
            }
            accumulate(nodes, *x, gx);
        }
        Op::SplitHeads { x, heads } => {
            let s = nodes[*x].value.shape().to_vec();
            let (b, tl, d) = (s[0], s[1], s[2]);
            let e = d / heads;
            let mut gx = vec![0.0; b * tl * d];
            for bi in 0..b {
                for h in 0..*heads {
                    for ti in 0..tl {
                        let dst = (bi * tl + ti) * d + h * e;
                        let src = ((bi * heads + h) * tl + ti) * e;
                        gx[dst..dst + e].copy_from_slice(&g[src..src + e]);
                    }
                }
            }
            accumulate(nodes, *x, gx);
        }
        Op::MergeHeads { x, heads } => {
            let s = out.shape();
            let (b, tl, d) = (s[0], s[1], s[2]);
            let e = d / heads;
            let mut gx = vec![0.0; b * tl * d];
            for bi in 0..b {
                for h in 0..*heads {
                    for ti in 0..tl {
                        let src = (bi * tl + ti) * d + h * e;
                        let dst = ((bi * heads + h) * tl + ti) * e;
                        gx[dst..dst + e].copy_from_slice(&g[src..src + e]);
                    }
                }
            }
            accumulate(nodes, *x, gx);
        }
        Op::PrependToken { token, x } => {
            let s = out.shape();
            let (b, tl1, d) = (s[0], s[1], s[2]);
            let tl = tl1 - 1;
            if wants(nodes, *token) {
                let mut gt = vec![0.0; d];
                for bi in 0..b {
                    let src = bi * tl1 * d;
                    gt.iter_mut().zip(&g[src..src + d]).for_each(|(a, v)| *a += v);
                }
                accumulate(nodes, *token, gt);
            }
            if wants(nodes, *x) {
                let mut gx = Vec::with_capacity(b * tl * d);
                for bi in 0..b {
                    let src = (bi * tl1 + 1) * d;
                    gx.extend_from_slice(&g[src..src + tl * d]);
                }
                accumulate(nodes, *x, gx);
            }
        }
        Op::SelectToken { x, index } => {
            let s = nodes[*x].value.shape().to_vec();
            let (b, tl, d) = (s[0], s[1], s[2]);
            let mut gx = vec![0.0; b * tl * d];
            for bi in 0..b {
                let dst = (bi * tl + index) * d;
                gx[dst..dst + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
            }
            accumulate(nodes, *x, gx);
        }
        Op::ScatterRows { x, offset, positions } => {
            let s = nodes[*x].value.shape().to_vec();
            let (tl, d) = (s[1], s[2]);
            let n = out.shape()[1];
            let mut gx = vec![0.0; nodes[*x].value.numel()];
            for (bi, pos) in positions.iter().enumerate() {
                for (j, &p) in pos.iter().enumerate() {
                    let dst = (bi * tl + offset + j) * d;
                    let src = (bi * n + p) * d;
                    gx[dst..dst + d].copy_from_slice(&g[src..src + d]);
                }
            }
            accumulate(nodes, *x, gx);
        }
        Op::Reshape(x) => accumulate(nodes, *x, g.to_vec()),
        Op::Sum(x) => {
            let n = nodes[*x].value.numel();
            accumulate(nodes, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.numel();
            accumulate(nodes, *x, vec![g[0] / n.max(1) as f64; n]);
        }
        Op::UpsampleNearest { x, factor } => {
            let s = nodes[*x].value.shape().to_vec();
            let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (h * factor, w * factor);
            let mut gx = vec![0.0; b * h * w * c];
            for bi in 0..b {
                for y in 0..oh {
                    for xx in 0..ow {
                        let dst = ((bi * h + y / factor) * w + xx / factor) * c;
                        let src = ((bi * oh + y) * ow + xx) * c;
                        for ch in 0..c {
                            gx[dst + ch] += g[src + ch];
                        }
                    }
                }
            }
            accumulate(nodes, *x, gx);
        }
        Op::BceWithLogits { logits, targets } => {
            let scale = g[0] / targets.len() as f64;
            let c = nodes[*logits]
                .value
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                .collect();
            accumulate(nodes, *logits, c);
        }
        Op::CrossEntropy { logits, labels } => {
            let t = &nodes[*logits].value;
            let k = t.last_dim();
            let scale = g[0] / labels.len() as f64;
            let mut gx = vec![0.0; t.numel()];
            for (r, &y) in labels.iter().enumerate() {
                let row = t.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
                for j in 0..k {
                    let p = (row[j] - max).exp() / total;
                    gx[r * k + j] = (p - if j == y { 1.0 } else { 0.0 }) * scale;
                }
            }
            accumulate(nodes, *logits, gx);
        }
    }
}
