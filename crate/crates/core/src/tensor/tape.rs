use super::kernels::{gelu, gelu_grad, gemm, sigmoid, softplus_scalar};
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows belonging to one sequence of a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    MulConst { x: Var, c: Vec<f64> },
    Scale { x: Var, s: f64 },
    Sum { x: Var },
    WeightedSum { x: Var, w: Vec<f64> },
    Softplus { x: Var },
    Gelu { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, gold: Vec<usize>, probs: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatCols { a: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, probs: Vec<Vec<f64>> },
    Blend { x: Var, z: Var, mask: Vec<bool>, beta: f64 },
    Kl { mu: Var, sigma: Var },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Define-by-run computation record. One tape per forward pass; not shared
/// across threads while in flight.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poisoned: Option<&'static str>,
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

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, name: &'static str) -> Var {
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(name);
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present once a backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Fails if any recorded op produced NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.poisoned {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Attention weights of one (segment, head) block, row-major `len×len`.
    pub fn attention_probs(&self, v: Var, segment: usize, head: usize) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => {
                probs.get(segment * heads + head).map(|p| p.as_slice())
            }
            _ => None,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, op, name)
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul { a, b, m, k, n }, "matmul"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }, "add"))
    }

    /// Adds a length-`n` vector to every row of `x[..×n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        if vb.len() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let b = vb.data();
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, rg, Op::AddRow { x, bias }, "add_row"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }, "mul"))
    }

    /// Elementwise product with a constant of the same shape; no gradient
    /// flows into the constant.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != c.shape() {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: vx.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = vx.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        let c = c.data().to_vec();
        Ok(self.push(value, rg, Op::MulConst { x, c }, "mul_const"))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |v| v * s, Op::Scale { x, s }, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum { x }, "sum")
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != w.len() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: vx.shape().to_vec(),
                rhs: vec![w.len()],
            });
        }
        let total = vx.data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), rg, Op::WeightedSum { x, w }, "weighted_sum"))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map_unary(x, softplus_scalar, Op::Softplus { x }, "softplus")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, gelu, Op::Gelu { x }, "gelu")
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::SoftmaxRows { x }, "softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: vx.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        ))
    }

    /// Mean negative log-likelihood of `gold` under a row-wise softmax of
    /// `logits[batch×C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, gold: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("softmax_cross_entropy", logits)?;
        if gold.len() != b {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: vec![b, c],
                rhs: vec![gold.len()],
            });
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= c) {
            return Err(Error::Label(format!("gold index {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &g) in probs.chunks_mut(c).zip(gold) {
            let top = argmax_index(row);
            let max = row[top];
            // ln Σ exp(v − max) = ln_1p(sum over the non-max terms): exact
            // for confident rows where the loss is tiny.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != top)
                .map(|(_, v)| (v - max).exp())
                .sum();
            let lse = max + rest.ln_1p();
            total += (max - row[g]) + rest.ln_1p();
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            rg,
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                probs,
            },
            "cross_entropy",
        ))
    }

    /// Row lookup `table[ids[t], :]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let rows = self.gather(table, ids, "embedding")?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            rows,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = self.gather(x, rows, "gather_rows")?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            rg,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            "gather_rows",
        ))
    }

    fn gather(&self, src: Var, rows: &[usize], op: &'static str) -> Result<Tensor> {
        let (r, c) = self.dims2(op, src)?;
        if rows.is_empty() {
            return Err(Error::Contract(format!("{op} with no rows")));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op,
                lhs: vec![r, c],
                rhs: vec![bad],
            });
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(v.row(i));
        }
        Tensor::new(vec![rows.len(), c], out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2("concat_cols", a)?;
        let (rb, cb) = self.dims2("concat_cols", b)?;
        if ra != rb {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(va.row(i));
            out.extend_from_slice(vb.row(i));
        }
        let value = Tensor::new(vec![ra, ca + cb], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::ConcatCols { a, b }, "concat_cols"))
    }

    /// Scaled dot-product multi-head self-attention over packed sequences.
    /// Keys whose `key_valid` flag is false receive zero weight; a query
    /// with no valid key outputs zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        key_valid: &[bool],
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (t, d) = self.dims2("attention", q)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("width {d} not divisible by {heads} heads")));
        }
        if key_valid.len() != t {
            return Err(Error::Dimension {
                op: "attention",
                lhs: vec![t, d],
                rhs: vec![key_valid.len()],
            });
        }
        if let Some(s) = segments.iter().find(|s| s.len == 0 || s.start + s.len > t) {
            return Err(Error::Contract(format!(
                "segment {}..{} outside {t} rows",
                s.start,
                s.start + s.len
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d + off..][..dh];
                    let row = &mut p[i * len..(i + 1) * len];
                    let mut max = f64::NEG_INFINITY;
                    for (j, slot) in row.iter_mut().enumerate() {
                        if !key_valid[seg.start + j] {
                            continue;
                        }
                        let kj = &kd[(seg.start + j) * d + off..][..dh];
                        let s = scale * dot(qi, kj);
                        *slot = s;
                        max = max.max(s);
                    }
                    if max == f64::NEG_INFINITY {
                        row.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for (j, slot) in row.iter_mut().enumerate() {
                        if key_valid[seg.start + j] {
                            *slot = (*slot - max).exp();
                            z += *slot;
                        } else {
                            *slot = 0.0;
                        }
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                    let oi = &mut out[(seg.start + i) * d + off..][..dh];
                    for (j, &w) in row.iter().enumerate() {
                        if w != 0.0 {
                            let vj = &vd[(seg.start + j) * d + off..][..dh];
                            oi.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                        }
                    }
                }
                probs.push(p);
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            "attention",
        ))
    }

    /// Per row: `x` where `mask` is false, `(1-beta)·x + beta·z` where it is
    /// true.
    pub fn blend(&mut self, x: Var, z: Var, mask: &[bool], beta: f64) -> Result<Var> {
        self.same_shape("blend", x, z)?;
        let vx = self.value(x);
        let c = vx.cols();
        if mask.len() != vx.rows() {
            return Err(Error::Dimension {
                op: "blend",
                lhs: vx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let vz = self.value(z);
        let mut out = vx.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                let zr = vz.row(r);
                for (o, zv) in out[r * c..(r + 1) * c].iter_mut().zip(zr) {
                    *o = (1.0 - beta) * *o + beta * zv;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, z]);
        Ok(self.push(
            value,
            rg,
            Op::Blend {
                x,
                z,
                mask: mask.to_vec(),
                beta,
            },
            "blend",
        ))
    }

    /// Per-row `KL(N(mu, sigma²) ‖ N(0, 1))` summed over the last axis.
    pub fn kl_standard_normal(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        self.same_shape("kl_standard_normal", mu, sigma)?;
        let (vm, vs) = (self.value(mu), self.value(sigma));
        if let Some(bad) = vs.data().iter().find(|&&s| s <= 0.0 || s.is_nan()) {
            return Err(Error::Domain(format!("sigma must be positive, got {bad}")));
        }
        let c = vm.cols();
        let out: Vec<f64> = vm
            .data()
            .chunks(c)
            .zip(vs.data().chunks(c))
            .map(|(m, s)| {
                m.iter()
                    .zip(s)
                    .map(|(m, s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![out.len()], out)?;
        let rg = self.rg(&[mu, sigma]);
        Ok(self.push(value, rg, Op::Kl { mu, sigma }, "kl_standard_normal"))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    /// Calling it again without [`Tape::zero_grad`] adds to existing grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.ensure_finite()?;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            propagate(&self.nodes, i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Gradient buffer for `v`, or `None` when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    if let Some(g) = slot(nodes, grads, v) {
        g.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (ad, bd) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(m, n, k, g, false, bd, true, 1.0, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(k, m, n, ad, true, g, false, 1.0, gb);
            }
        }
        Op::Add { a, b } => {
            add_into(nodes, grads, *a, g);
            add_into(nodes, grads, *b, g);
        }
        Op::AddRow { x, bias } => {
            add_into(nodes, grads, *x, g);
            if let Some(gb) = slot(nodes, grads, *bias) {
                let n = gb.len();
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Mul { a, b } => {
            let da: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
            let db: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
            add_into(nodes, grads, *a, &da);
            add_into(nodes, grads, *b, &db);
        }
        Op::MulConst { x, c } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g.iter().zip(c)).for_each(|(a, (g, c))| *a += g * c);
            }
        }
        Op::Scale { x, s } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, g)| *a += s * g);
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::WeightedSum { x, w } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(w).for_each(|(a, w)| *a += g[0] * w);
            }
        }
        Op::Softplus { x } => {
            let xd = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, g), x) in gx.iter_mut().zip(g).zip(xd) {
                    *a += g * sigmoid(*x);
                }
            }
        }
        Op::Gelu { x } => {
            let xd = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, g), x) in gx.iter_mut().zip(g).zip(xd) {
                    *a += g * gelu_grad(*x);
                }
            }
        }
        Op::SoftmaxRows { x } => {
            let y = nodes[i].value.data();
            let c = nodes[i].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((gxr, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let inner = dot(gr, yr);
                    for ((a, g), y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *a += y * (g - inner);
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
            let d = nodes[i].value.cols();
            let gd = val(*gain);
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for gr in g.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dh = vec![0.0; d];
                for (r, ((gxr, gr), hr)) in gx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    for j in 0..d {
                        dh[j] = gr[j] * gd[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dhh = dot(&dh, hr) / d as f64;
                    for j in 0..d {
                        gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            gold,
            probs,
        } => {
            let b = gold.len();
            let c = probs.len() / b;
            if let Some(gl) = slot(nodes, grads, *logits) {
                let s = g[0] / b as f64;
                for (r, &y) in gold.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[r * c + j] += s * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Op::Embedding { table: src, ids: rows } | Op::GatherRows { x: src, rows } => {
            let c = nodes[src.0].value.cols();
            if let Some(gs) = slot(nodes, grads, *src) {
                for (t, &r) in rows.iter().enumerate() {
                    let gr = &g[t * c..(t + 1) * c];
                    gs[r * c..(r + 1) * c].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::ConcatCols { a, b } => {
            let ca = nodes[a.0].value.cols();
            let cb = nodes[b.0].value.cols();
            let w = ca + cb;
            if let Some(ga) = slot(nodes, grads, *a) {
                for (gar, gr) in ga.chunks_mut(ca).zip(g.chunks(w)) {
                    gar.iter_mut().zip(&gr[..ca]).for_each(|(x, y)| *x += y);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (gbr, gr) in gb.chunks_mut(cb).zip(g.chunks(w)) {
                    gbr.iter_mut().zip(&gr[ca..]).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            heads,
            probs,
        } => attention_backward(nodes, g, grads, (*q, *k, *v), segments, *heads, probs),
        Op::Blend { x, z, mask, beta } => {
            let c = nodes[i].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((gxr, gr), &m) in gx.chunks_mut(c).zip(g.chunks(c)).zip(mask) {
                    let w = if m { 1.0 - beta } else { 1.0 };
                    gxr.iter_mut().zip(gr).for_each(|(a, g)| *a += w * g);
                }
            }
            if let Some(gz) = slot(nodes, grads, *z) {
                for ((gzr, gr), &m) in gz.chunks_mut(c).zip(g.chunks(c)).zip(mask) {
                    if m {
                        gzr.iter_mut().zip(gr).for_each(|(a, g)| *a += beta * g);
                    }
                }
            }
        }
        Op::Kl { mu, sigma } => {
            let c = nodes[mu.0].value.cols();
            let md = val(*mu);
            let sd = val(*sigma);
            if let Some(gm) = slot(nodes, grads, *mu) {
                for (j, a) in gm.iter_mut().enumerate() {
                    *a += g[j / c] * md[j];
                }
            }
            if let Some(gs) = slot(nodes, grads, *sigma) {
                for (j, a) in gs.iter_mut().enumerate() {
                    *a += g[j / c] * (sd[j] - 1.0 / sd[j]);
                }
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    (q, k, v): (Var, Var, Var),
    segments: &[Segment],
    heads: usize,
    probs: &[Vec<f64>],
) {
    let qv = &nodes[q.0].value;
    let d = qv.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (qv.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; qd.len()];
    let mut dv = vec![0.0; qd.len()];
    let mut dp = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        let len = seg.len;
        let row = |t: usize, off: usize| (seg.start + t) * d + off;
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[si * heads + h];
            dp.clear();
            dp.resize(len * len, 0.0);
            for i in 0..len {
                let go = &g[row(i, off)..][..dh];
                for j in 0..len {
                    let pij = p[i * len + j];
                    if pij == 0.0 {
                        continue;
                    }
                    dp[i * len + j] = dot(go, &vd[row(j, off)..][..dh]);
                    let dvj = &mut dv[row(j, off)..][..dh];
                    dvj.iter_mut().zip(go).for_each(|(a, b)| *a += pij * b);
                }
                let pr = &p[i * len..(i + 1) * len];
                let inner = dot(pr, &dp[i * len..(i + 1) * len]);
                for j in 0..len {
                    let ds = pr[j] * (dp[i * len + j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (ri, rj) = (row(i, off), row(j, off));
                    for c in 0..dh {
                        dq[ri + c] += ds * kd[rj + c];
                        dk[rj + c] += ds * qd[ri + c];
                    }
                }
            }
        }
    }
    add_into(nodes, grads, q, &dq);
    add_into(nodes, grads, k, &dk);
    add_into(nodes, grads, v, &dv);
}

fn argmax_index(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}
