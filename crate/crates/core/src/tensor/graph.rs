use rand::Rng;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{Tensor, TensorError};

/// Additive pre-softmax bias for masked attention scores.
pub const MASK_NEG: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention mask over `[b, h, t, t]` scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttnMask {
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// Per `[b, t]` key position: false masks the key out.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    fn allows(&self, b: usize, t: usize, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return false;
        }
        match &self.key_valid {
            Some(valid) => valid[b * t + j],
            None => true,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        scale: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A differentiation tape. Nodes are appended in evaluation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(TensorError::Invalid(format!("{op} expects a 2-d tensor, got shape {other:?}"))),
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4], TensorError> {
    match t.shape() {
        [b, h, s, d] => Ok([*b, *h, *s, *d]),
        other => Err(TensorError::Invalid(format!("{op} expects [b, h, t, dh], got shape {other:?}"))),
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient when `trainable`.
    pub fn param(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.param(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.param(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root w.r.t. `v`; `None` when no
    /// gradient reached it (frozen or unused).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, zeros when none reached `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", av)?;
        let (k2, n) = dims2("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(av.values(), bv.values(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m,k] * b[n,k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul_nt", av)?;
        let (n, k2) = dims2("matmul_nt", bv)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(av.values(), bv.values(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av.shape(), bv.shape()));
        }
        let out: Vec<f64> = av.values().iter().zip(bv.values()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), rg))
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.last_dim();
        if bv.shape() != [n] {
            return Err(mismatch("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.values().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.values().iter().map(|v| v * factor).collect()).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv
            .values()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(xv.shape(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Normalizes each row of `x[.., n]`, then applies `gain[n]`, `bias[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.last_dim();
        if n == 0 || gv.shape() != [n] || bv.shape() != [n] {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / n;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.values()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.values()[j] + bv.values()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
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

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if n == 0 {
            return Err(TensorError::Invalid("softmax over an empty axis".into()));
        }
        let mut out = xv.values().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_row(row);
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(x), rg))
    }

    /// Rows `ids` of `table[V, d]`, as `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (vocab, d) = dims2("embedding", tv)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv.values()[id * d..(id + 1) * d]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of `x[m, n]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (m, n) = dims2("gather_rows", xv)?;
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    bound: m,
                });
            }
            out.extend_from_slice(&xv.values()[r * n..(r + 1) * n]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[rows.len(), n], out)?,
            Op::GatherRows { x, rows: rows.to_vec() },
            rg,
        ))
    }

    /// `[b*t, h*dh]` to `[b, h, t, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (rows, d) = dims2("split_heads", xv)?;
        if batch == 0 || heads == 0 || rows % batch != 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "split_heads: cannot split {:?} into batch {batch}, heads {heads}",
                xv.shape()
            )));
        }
        let (t, dh) = (rows / batch, d / heads);
        let src = xv.values();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..t {
                    let dst = ((b * heads + h) * t + s) * dh;
                    let from = (b * t + s) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[batch, heads, t, dh], out)?, Op::SplitHeads { x, heads }, rg))
    }

    /// `[b, h, t, dh]` to `[b*t, h*dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let [batch, heads, t, dh] = dims4("merge_heads", xv)?;
        let d = heads * dh;
        let src = xv.values();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..t {
                    let from = ((b * heads + h) * t + s) * dh;
                    let dst = (b * t + s) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[batch * t, d], out)?, Op::MergeHeads(x), rg))
    }

    /// Scaled dot-product attention on `[b, h, t, dh]` inputs:
    /// `softmax(q k^T / sqrt(dh) + mask) v`, masked scores receive [`MASK_NEG`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttnMask) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dims = dims4("attention", qv)?;
        if kv.shape() != qv.shape() {
            return Err(mismatch("attention", qv.shape(), kv.shape()));
        }
        if vv.shape() != qv.shape() {
            return Err(mismatch("attention", qv.shape(), vv.shape()));
        }
        let [batch, heads, t, dh] = dims;
        if let Some(valid) = &mask.key_valid {
            if valid.len() != batch * t {
                return Err(mismatch("attention mask", &[batch, t], &[valid.len()]));
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; qv.numel()];
        for b in 0..batch {
            for h in 0..heads {
                let o = (b * heads + h) * t * dh;
                let po = (b * heads + h) * t * t;
                let p = &mut probs[po..po + t * t];
                mm_nt(&qv.values()[o..o + t * dh], &kv.values()[o..o + t * dh], p, t, dh, t);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s *= scale;
                        if !mask.allows(b, t, i, j) {
                            *s += MASK_NEG;
                        }
                    }
                    softmax_row(row);
                }
                mm_nn(p, &vv.values()[o..o + t * dh], &mut out[o..o + t * dh], t, t, dh);
            }
        }
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(&dims, out)?,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Mean of `-log softmax(logits)[gold]` over rows whose target is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (rows, classes) = dims2("cross_entropy", lv)?;
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.values().to_vec();
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let row = &lv.values()[r * classes..(r + 1) * classes];
            softmax_row(&mut probs[r * classes..(r + 1) * classes]);
            if let Some(gold) = *target {
                if gold >= classes {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: gold,
                        bound: classes,
                    });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[gold];
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::Invalid("cross_entropy with no targets".into()));
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// `sum(x * weights)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(mismatch("weighted_sum", xv.shape(), &[weights.len()]));
        }
        let s = xv.values().iter().zip(weights).map(|(a, w)| a * w).sum();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout with keep probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = xv.values().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape(), out).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    fn accumulate(&mut self, target: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        let slot = self.grads[target.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot, &self.nodes);
    }

    /// Reverse pass from a scalar root. Leaf gradients stay readable via
    /// [`Graph::grad`]; interior gradients are released as they are consumed.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::NotScalar(self.nodes[root.0].value.shape().to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            // Temporarily move the op out so inputs can be updated.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &g);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn backprop(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", self.value(*a)).expect("checked");
                let n = self.value(*b).last_dim();
                let (a, b) = (*a, *b);
                self.accumulate(a, |ga, nodes| mm_nt(g, nodes[b.0].value.values(), ga, m, n, k));
                self.accumulate(b, |gb, nodes| mm_tn(nodes[a.0].value.values(), g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2("matmul_nt", self.value(*a)).expect("checked");
                let n = self.value(*b).shape()[0];
                let (a, b) = (*a, *b);
                self.accumulate(a, |ga, nodes| mm_nn(g, nodes[b.0].value.values(), ga, m, n, k));
                self.accumulate(b, |gb, nodes| mm_tn(g, nodes[a.0].value.values(), gb, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |gv, _| gv.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(*x, |gx, _| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                self.accumulate(*bias, |gb, _| {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                self.accumulate(*x, |gx, _| gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b));
            }
            Op::Gelu(x) => {
                let x = *x;
                self.accumulate(x, |gx, nodes| {
                    for ((ga, &v), &gy) in gx.iter_mut().zip(nodes[x.0].value.values()).zip(g) {
                        let u = GELU_C * (v + GELU_K * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *ga += gy * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = xhat.len() / rstd.len();
                let gain_v = *gain;
                self.accumulate(*x, |gx, nodes| {
                    let gamma = nodes[gain_v.0].value.values();
                    let mut dxhat = vec![0.0; n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            dxhat[j] = gy[j] * gamma[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                self.accumulate(*gain, |gg, _| {
                    for (row_g, row_h) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                });
                self.accumulate(*bias, |gb, _| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = self.nodes[idx].value.last_dim();
                self.accumulate(*x, |gx, nodes| {
                    let y = nodes[idx].value.values();
                    for ((gxr, yr), gr) in gx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                self.accumulate(*table, |gt, _| {
                    let d = g.len() / ids.len().max(1);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                self.accumulate(*x, |gx, _| {
                    let n = g.len() / rows.len().max(1);
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let [batch, h, t, dh] = dims4("split_heads", &self.nodes[idx].value).expect("checked");
                debug_assert_eq!(h, *heads);
                let d = h * dh;
                self.accumulate(*x, |gx, _| {
                    for b in 0..batch {
                        for hh in 0..h {
                            for s in 0..t {
                                let from = ((b * h + hh) * t + s) * dh;
                                let dst = (b * t + s) * d + hh * dh;
                                for e in 0..dh {
                                    gx[dst + e] += g[from + e];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads(x) => {
                let [batch, h, t, dh] = dims4("merge_heads", self.value(*x)).expect("checked");
                let d = h * dh;
                self.accumulate(*x, |gx, _| {
                    for b in 0..batch {
                        for hh in 0..h {
                            for s in 0..t {
                                let dst = ((b * h + hh) * t + s) * dh;
                                let from = (b * t + s) * d + hh * dh;
                                for e in 0..dh {
                                    gx[dst + e] += g[from + e];
                                }
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => self.attention_backward(*q, *k, *v, probs, *scale, g),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = g[0] / *count as f64;
                self.accumulate(*logits, |gl, _| {
                    let c = probs.len() / targets.len();
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(gold) = *target {
                            for j in 0..c {
                                let onehot = if j == gold { 1.0 } else { 0.0 };
                                gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                            }
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                let s = g[0];
                self.accumulate(*x, |gx, _| gx.iter_mut().zip(weights).for_each(|(a, w)| *a += s * w));
            }
            Op::Dropout { x, mask } => {
                self.accumulate(*x, |gx, _| {
                    for ((a, m), b) in gx.iter_mut().zip(mask).zip(g) {
                        *a += m * b;
                    }
                });
            }
        }
    }

    fn attention_backward(&mut self, q: Var, k: Var, v: Var, probs: &[f64], scale: f64, g: &[f64]) {
        let [batch, heads, t, dh] = dims4("attention", self.value(q)).expect("checked");
        let want_q = self.nodes[q.0].requires_grad;
        let want_k = self.nodes[k.0].requires_grad;
        let want_v = self.nodes[v.0].requires_grad;
        let size = batch * heads * t * dh;
        let mut dq = vec![0.0; if want_q { size } else { 0 }];
        let mut dk = vec![0.0; if want_k { size } else { 0 }];
        let mut dv = vec![0.0; if want_v { size } else { 0 }];
        let mut dp = vec![0.0; t * t];
        {
            let (qv, kv, vv) = (
                self.nodes[q.0].value.values(),
                self.nodes[k.0].value.values(),
                self.nodes[v.0].value.values(),
            );
            for bh in 0..batch * heads {
                let o = bh * t * dh;
                let p = &probs[bh * t * t..(bh + 1) * t * t];
                let go = &g[o..o + t * dh];
                if want_v {
                    mm_tn(p, go, &mut dv[o..o + t * dh], t, t, dh);
                }
                if !(want_q || want_k) {
                    continue;
                }
                dp.iter_mut().for_each(|x| *x = 0.0);
                mm_nt(go, &vv[o..o + t * dh], &mut dp, t, dh, t);
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if want_q {
                    mm_nn(&dp, &kv[o..o + t * dh], &mut dq[o..o + t * dh], t, t, dh);
                }
                if want_k {
                    mm_tn(&dp, &qv[o..o + t * dh], &mut dk[o..o + t * dh], t, t, dh);
                }
            }
        }
        for (var, grad, want) in [(q, dq, want_q), (k, dk, want_k), (v, dv, want_v)] {
            if want {
                self.accumulate(var, |acc, _| acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b));
            }
        }
    }
}
