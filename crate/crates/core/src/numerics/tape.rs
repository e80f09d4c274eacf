use rand::{Rng, RngCore};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct AttentionShape {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Number of valid keys per batch item; keys at or beyond it are masked.
    pub kv_valid: Vec<usize>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    Gelu { a: Var },
    Softmax { a: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Embed { table: Var, ids: Vec<Option<usize>> },
    Dropout { a: Var, mask: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<S>, count: usize },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, probs: Vec<S> },
    Sum { a: Var },
    SelectRows { a: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records operations in evaluation order so that `backward` can replay them
/// in reverse. Nodes are stored in an arena; a node only refers to earlier
/// nodes, so reverse index order is a valid reverse topological order.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients indexed by [`Var`]; leaves that did not take part are zero.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape recorded with value"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<S> {
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g).expect("shape recorded with value"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn check_finite<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
    slot.get_or_insert_with(|| vec![S::zero(); len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![S::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        S::gemm(m, k, n, S::one(), ta.data(), k as isize, 1, tb.data(), rsb, csb, S::zero(), &mut out, n as isize, 1);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, needs)
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

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", t, Op::Add { a, b }, needs)
    }

    /// Adds `bias` to every row of `a` (last axis).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(a).as_matrix();
        if self.value(bias).len() != cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(bias).shape()),
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(cols) {
            for (x, &b) in row.iter_mut().zip(&bv) {
                *x = *x + b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push("add_row", t, Op::AddRow { a, bias }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", t, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = *x * factor);
        let needs = self.needs(a);
        self.push("scale", t, Op::Scale { a, factor }, needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = S::from_f64(GELU_C);
        let k = S::from_f64(GELU_A);
        let half = S::from_f64(0.5);
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| {
            let v = *x;
            *x = half * v * (S::one() + (c * (v + k * v * v * v)).tanh());
        });
        let needs = self.needs(a);
        self.push("gelu", t, Op::Gelu { a }, needs)
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let (outer, n, inner) = if shape.is_empty() {
            if axis != 0 {
                return Err(Error::shape("softmax", format!("axis {axis} of a scalar")));
            }
            (1, 1, 1)
        } else {
            if axis >= shape.len() {
                return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
            }
            (
                shape[..axis].iter().product(),
                shape[axis],
                shape[axis + 1..].iter().product(),
            )
        };
        let mut t = self.value(a).clone();
        let d = t.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut max = S::neg_infinity();
                for j in 0..n {
                    max = max.max(d[at(j)]);
                }
                let mut sum = S::zero();
                for j in 0..n {
                    let e = (d[at(j)] - max).exp();
                    d[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    d[at(j)] = d[at(j)] / sum;
                }
            }
        }
        let needs = self.needs(a);
        self.push("softmax", t, Op::Softmax { a, outer, n, inner }, needs)
    }

    /// Normalizes each row over the last axis, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let (rows, cols) = self.value(x).as_matrix();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape("layer_norm", format!("{:?}", self.value(x).shape())));
        }
        let eps = S::from_f64(eps);
        let n = S::from_f64(cols as f64);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![S::zero(); rows * cols];
        let mut xhat = vec![S::zero(); rows * cols];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, xhat, rstd }, needs)
    }

    /// Gathers rows of a `[rows, d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ids: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.embed_sparse(table, &ids)
    }

    /// Like [`Tape::embed`], with `None` producing a zero row.
    pub fn embed_sparse(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::shape("embed", format!("table {:?}", tt.shape())));
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = vec![S::zero(); ids.len() * d];
        for (i, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= rows {
                    return Err(Error::IdOutOfRange { op: "embed", id, rows });
                }
                out[i * d..(i + 1) * d].copy_from_slice(&tt.data()[id * d..(id + 1) * d]);
            }
        }
        let needs = self.needs(table);
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push("embed", t, Op::Embed { table, ids: ids.to_vec() }, needs)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::Config("dropout probability must be below 1".into()));
        }
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().zip(&mask).for_each(|(x, &m)| *x = *x * m);
        let needs = self.needs(a);
        self.push("dropout", t, Op::Dropout { a, mask }, needs)
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let (rows, v) = self.value(logits).as_matrix();
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{rows} rows vs {} targets", targets.len())));
        }
        let targets: Vec<Option<usize>> = targets.iter().map(|&t| (Some(t) != ignore).then_some(t)).collect();
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::EmptyMean);
        }
        let lg = self.value(logits).data();
        let mut probs = vec![S::zero(); rows * v];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::IdOutOfRange { op: "cross_entropy", id: t, rows: v });
            }
            let row = &lg[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let sum: S = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for (c, &x) in row.iter().enumerate() {
                probs[r * v + c] = (x - lse).exp();
            }
            total += (lse - row[t]).as_f64();
        }
        let value = Tensor::scalar(S::from_f64(total / count as f64));
        let needs = self.needs(logits);
        self.push("cross_entropy", value, Op::CrossEntropy { logits, targets, probs, count }, needs)
    }

    /// Scaled dot-product attention over `heads` column groups.
    ///
    /// `q` is `[batch·q_len, d]`, `k` and `v` are `[batch·kv_len, d]`. With
    /// `causal`, query `i` only sees keys `j ≤ i`; keys past the item's valid
    /// length are never seen. Masked keys are skipped rather than added as
    /// `-inf`, so the result for a query never reads a masked key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let AttentionShape { batch, q_len, kv_len, heads, causal, .. } = shape;
        let d = tq.as_matrix().1;
        let ok = tq.as_matrix() == (batch * q_len, d)
            && tk.as_matrix() == (batch * kv_len, d)
            && tv.as_matrix() == (batch * kv_len, d)
            && heads > 0
            && d % heads == 0
            && shape.kv_valid.len() == batch
            && shape.kv_valid.iter().all(|&n| n >= 1 && n <= kv_len)
            && (!causal || q_len <= kv_len);
        if !ok {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?} {shape:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![S::zero(); batch * q_len * d];
        let mut probs = vec![S::zero(); batch * heads * q_len * kv_len];
        let mut scores = vec![S::zero(); kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let limit = if causal { (i + 1).min(shape.kv_valid[b]) } else { shape.kv_valid[b] };
                    let qi = &qd[(b * q_len + i) * d + off..][..dh];
                    let mut max = S::neg_infinity();
                    for (j, s) in scores[..limit].iter_mut().enumerate() {
                        let kj = &kd[(b * kv_len + j) * d + off..][..dh];
                        *s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<S>() * scale;
                        max = max.max(*s);
                    }
                    let mut sum = S::zero();
                    for s in scores[..limit].iter_mut() {
                        *s = (*s - max).exp();
                        sum = sum + *s;
                    }
                    let prow = &mut probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                    let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                    for j in 0..limit {
                        let p = scores[j] / sum;
                        prow[j] = p;
                        let vj = &vd[(b * kv_len + j) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch * q_len, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push("attention", t, Op::Attention { q, k, v, shape, probs }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<S>();
        let needs = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, needs)
    }

    /// Selects rows of a matrix view.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.value(a).as_matrix();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::IdOutOfRange { op: "select_rows", id: r, rows: n });
            }
            out.extend_from_slice(self.value(a).row(r));
        }
        let needs = self.needs(a);
        let t = Tensor::new(vec![rows.len(), cols], out)?;
        self.push("select_rows", t, Op::SelectRows { a, rows: rows.to_vec() }, needs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = node.value.shape()[1];
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    // dA = dC · B  (trans_b)  or  dC · Bᵀ
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    S::gemm(m, n, k, S::one(), g, n as isize, 1, val(*b).data(), rsb, csb, S::one(), ga, k as isize, 1);
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    if *trans_b {
                        // dB = dCᵀ · A, shape [n, k]
                        S::gemm(n, m, k, S::one(), g, 1, n as isize, val(*a).data(), k as isize, 1, S::one(), gb, k as isize, 1);
                    } else {
                        // dB = Aᵀ · dC, shape [k, n]
                        S::gemm(k, m, n, S::one(), val(*a).data(), 1, k as isize, g, n as isize, 1, S::one(), gb, n as isize, 1);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if self.needs(*bias) {
                    let cols = len(*bias);
                    let gb = accumulate(&mut grads[bias.0], cols);
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.needs(*v) {
                        let o = val(*other).data();
                        let gv = accumulate(&mut grads[v.0], g.len());
                        for i in 0..g.len() {
                            gv[i] = gv[i] + g[i] * o[i];
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *factor);
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let c = S::from_f64(GELU_C);
                    let k = S::from_f64(GELU_A);
                    let half = S::from_f64(0.5);
                    let three = S::from_f64(3.0);
                    let xs = val(*a).data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        let x = xs[i];
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x);
                        ga[i] = ga[i] + g[i] * d;
                    }
                }
            }
            Op::Softmax { a, outer, n, inner } => {
                if self.needs(*a) {
                    let y = node.value.data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: S = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*n {
                                ga[at(j)] = ga[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = len(*gain);
                let rows = rstd.len();
                let gamma = val(*gain).data();
                if self.needs(*gain) {
                    let gg = accumulate(&mut grads[gain.0], cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] = gg[c] + g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = accumulate(&mut grads[bias.0], cols);
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
                if self.needs(*x) {
                    let n = S::from_f64(cols as f64);
                    let gx = accumulate(&mut grads[x.0], rows * cols);
                    let mut dxhat = vec![S::zero(); cols];
                    for r in 0..rows {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = g[r * cols + c] * gamma[c];
                        }
                        let mean_d = dxhat.iter().copied().sum::<S>() / n;
                        let mean_dh = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum::<S>() / n;
                        for c in 0..cols {
                            gx[r * cols + c] = gx[r * cols + c] + rstd[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let d = val(*table).shape()[1];
                    let gt = accumulate(&mut grads[table.0], len(*table));
                    for (i, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            for c in 0..d {
                                gt[id * d + c] = gt[id * d + c] + g[i * d + c];
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * mask[i];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if self.needs(*logits) {
                    let v = probs.len() / targets.len();
                    let scale = g[0] / S::from_f64(*count as f64);
                    let gl = accumulate(&mut grads[logits.0], probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..v {
                            let onehot = if c == t { S::one() } else { S::zero() };
                            gl[r * v + c] = gl[r * v + c] + scale * (probs[r * v + c] - onehot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                self.attention_backward(*q, *k, *v, shape, probs, g, grads);
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    ga.iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            Op::SelectRows { a, rows } => {
                if self.needs(*a) {
                    let cols = node.value.shape()[1];
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            ga[r * cols + c] = ga[r * cols + c] + g[i * cols + c];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: &AttentionShape,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let AttentionShape { batch, q_len, kv_len, heads, causal, .. } = *shape;
        let d = self.value(q).as_matrix().1;
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![S::zero(); qd.len()];
        let mut gk = vec![S::zero(); kd.len()];
        let mut gv = vec![S::zero(); vd.len()];
        let mut dp = vec![S::zero(); kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let limit = if causal { (i + 1).min(shape.kv_valid[b]) } else { shape.kv_valid[b] };
                    let prow = &probs[((b * heads + h) * q_len + i) * kv_len..][..kv_len];
                    let go = &g[(b * q_len + i) * d + off..][..dh];
                    let mut dot = S::zero();
                    for j in 0..limit {
                        let vj = &vd[(b * kv_len + j) * d + off..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        dot = dot + dp[j] * prow[j];
                        let gvj = &mut gv[(b * kv_len + j) * d + off..][..dh];
                        for (x, &y) in gvj.iter_mut().zip(go) {
                            *x = *x + prow[j] * y;
                        }
                    }
                    let qi_at = (b * q_len + i) * d + off;
                    for j in 0..limit {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let kj_at = (b * kv_len + j) * d + off;
                        for c in 0..dh {
                            gq[qi_at + c] = gq[qi_at + c] + ds * kd[kj_at + c];
                            gk[kj_at + c] = gk[kj_at + c] + ds * qd[qi_at + c];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(var) {
                let acc = accumulate(&mut grads[var.0], local.len());
                acc.iter_mut().zip(&local).for_each(|(x, &y)| *x = *x + y);
            }
        }
    }
}
