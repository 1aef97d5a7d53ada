use serde::{Deserialize, Serialize};

use super::kernels::{gemm, log_softmax_in_place, softmax_in_place};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sequence pooling operator used for sequence-level representations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    #[serde(alias = "average")]
    Mean,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Max => "max",
            PoolMode::Mean => "mean",
        }
    }
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "mean" | "average" => Ok(PoolMode::Mean),
            other => Err(Error::Config(format!("unknown pool mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Layout and masking for the fused multi-head attention op.
///
/// Queries are `[batch * q_len, d]`, keys and values `[batch * kv_len, d]`,
/// both batch-major. `key_mask[b * kv_len + j] == false` hides key `j` from
/// every query of sample `b`. Samples with `active[b] == false` produce zero
/// output rows and never read their keys or values.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub causal: bool,
    pub key_mask: Option<Vec<bool>>,
    pub active: Option<Vec<bool>>,
}

impl AttentionSpec {
    fn key_visible(&self, b: usize, j: usize) -> bool {
        self.key_mask.as_ref().is_none_or(|m| m[b * self.kv_len + j])
    }

    fn sample_active(&self, b: usize) -> bool {
        self.active.as_ref().is_none_or(|a| a[b])
    }
}

enum Op {
    Leaf,
    Constant,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { x: Var, bias: Var },
    Sum(Var),
    Reshape(Var),
    Gelu(Var),
    Softmax { x: Var, outer: usize, axis_len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: Option<usize>, probs: Vec<f64>, scale: f64 },
    Pool { x: Var, mode: PoolMode, route: Vec<usize>, weights: Vec<f64> },
    Cosine { a: Var, b: Var, na: f64, nb: f64, a_free: bool, b_free: bool },
    PairwiseCosine { x: Var, norms: Vec<f64>, free: Vec<bool> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Append-only record of a forward computation. Nodes are stored in creation
/// order, which is a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

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

    /// Registers a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Constant)
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

    /// Accumulated gradient of a leaf, `None` if nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the leaf; zeros when absent.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.push_raw(value, requires_grad, op)
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, what: &str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul lhs", a)?;
        let (k2, n) = self.matrix_dims("matmul rhs", b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::Matmul { a, b, m, k, n }))
    }

    fn zip_with(&mut self, what: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(what, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        self.push(value, &[a], Op::Scale(a, s))
    }

    /// Adds a `[D]` bias to every row of a `[.., D]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::Dimension("add_row on a scalar".into()))?;
        if self.value(bias).numel() != d {
            return Err(Error::Dimension(format!(
                "add_row: rows of width {d} vs bias {:?}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, &[x, bias], Op::AddRow { x, bias }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), &[x], Op::Sum(x))
    }

    /// Sum of all elements added in ascending order, so the value does not
    /// depend on how the elements are arranged.
    pub fn sum_sorted(&mut self, x: Var) -> Var {
        let mut vals = self.value(x).data().to_vec();
        vals.sort_by(f64::total_cmp);
        let total = vals.iter().sum();
        self.push(Tensor::scalar(total), &[x], Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], Op::Reshape(x)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, &[x], Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = src.to_vec();
        let mut lane = vec![0.0; axis_len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                for (a, l) in lane.iter_mut().enumerate() {
                    *l = src[base + a * inner];
                }
                softmax_in_place(&mut lane);
                for (a, l) in lane.iter().enumerate() {
                    out[base + a * inner] = *l;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[x], Op::Softmax { x, outer, axis_len, inner }))
    }

    /// Layer normalization over the last dimension with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::Dimension("layer_norm on a scalar".into()))?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: width {d} vs gain {:?} / bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims("embedding table", table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Index(format!("token id {bad} for an embedding table of {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Dimension("embedding lookup with no ids".into()));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, &[table], Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Fused scaled-dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = self.matrix_dims("attention queries", q)?;
        let (kr, dk) = self.matrix_dims("attention keys", k)?;
        self.same_shape("attention keys/values", k, v)?;
        if dk != d || d % spec.heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: query width {d}, key width {dk}, {} heads",
                spec.heads
            )));
        }
        if qr != spec.batch * spec.q_len || kr != spec.batch * spec.kv_len {
            return Err(Error::Dimension(format!(
                "attention: {qr} query rows / {kr} key rows for batch {} x ({}, {})",
                spec.batch, spec.q_len, spec.kv_len
            )));
        }
        if spec.key_mask.as_ref().is_some_and(|m| m.len() != kr)
            || spec.active.as_ref().is_some_and(|a| a.len() != spec.batch)
        {
            return Err(Error::Dimension("attention: mask length mismatch".into()));
        }
        let (t_len, s_len, heads) = (spec.q_len, spec.kv_len, spec.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; spec.batch * heads * t_len * s_len];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; s_len];
        for b in 0..spec.batch {
            if !spec.sample_active(b) {
                continue;
            }
            for h in 0..heads {
                for t in 0..t_len {
                    let qrow = &qd[(b * t_len + t) * d + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        if (spec.causal && j > t) || !spec.key_visible(b, j) {
                            *s = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &kd[(b * s_len + j) * d + h * dh..][..dh];
                        *s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = if *s == f64::NEG_INFINITY { 0.0 } else { (*s - max).exp() };
                        z += *s;
                    }
                    let prow = &mut probs[((b * heads + h) * t_len + t) * s_len..][..s_len];
                    let orow = &mut out[(b * t_len + t) * d + h * dh..][..dh];
                    for (j, s) in scores.iter().enumerate() {
                        if *s == 0.0 {
                            continue;
                        }
                        let p = s / z;
                        prow[j] = p;
                        let vrow = &vd[(b * s_len + j) * d + h * dh..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![qr, d], out)?;
        Ok(self.push(value, &[q, k, v], Op::Attention { q, k, v, spec, probs }))
    }

    /// Cross entropy of `[N, V]` logits against integer targets. Positions
    /// whose target equals `ignore` contribute neither value nor gradient.
    /// With [`Reduction::Mean`] the sum is divided by the number of counted
    /// positions; an all-ignored input yields zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
        reduction: Reduction,
    ) -> Result<Var> {
        let (n, vocab) = self.matrix_dims("cross_entropy logits", logits)?;
        if targets.len() != n {
            return Err(Error::Dimension(format!("cross_entropy: {n} rows vs {} targets", targets.len())));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        let mut count = 0usize;
        let mut lane = vec![0.0; vocab];
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= vocab {
                return Err(Error::Index(format!("target {t} for vocabulary of {vocab}")));
            }
            lane.copy_from_slice(&src[i * vocab..(i + 1) * vocab]);
            log_softmax_in_place(&mut lane);
            total -= lane[t];
            for (p, l) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(&lane) {
                *p = l.exp();
            }
            count += 1;
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if count > 0 => 1.0 / count as f64,
            Reduction::Mean => 0.0,
        };
        let value = Tensor::scalar(total * scale);
        Ok(self.push(
            value,
            &[logits],
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, scale },
        ))
    }

    /// Pools `[segments * len, D]` rows into `[segments, D]`, reducing each
    /// segment over its unmasked rows. Max ties go to the earliest row.
    pub fn pool(&mut self, x: Var, mask: &[bool], segments: usize, mode: PoolMode) -> Result<Var> {
        let (rows, d) = self.matrix_dims("pool input", x)?;
        if segments == 0 || rows % segments != 0 || mask.len() != rows {
            return Err(Error::Dimension(format!(
                "pool: {rows} rows, {} mask entries, {segments} segments",
                mask.len()
            )));
        }
        let len = rows / segments;
        let src = self.value(x).data();
        let mut out = vec![0.0; segments * d];
        let mut route = Vec::new();
        let mut weights = Vec::new();
        for s in 0..segments {
            let valid: Vec<usize> = (s * len..(s + 1) * len).filter(|&r| mask[r]).collect();
            if valid.is_empty() {
                return Err(Error::EmptyPool);
            }
            match mode {
                PoolMode::Max => {
                    for j in 0..d {
                        let mut best = valid[0];
                        for &r in &valid[1..] {
                            if src[r * d + j] > src[best * d + j] {
                                best = r;
                            }
                        }
                        out[s * d + j] = src[best * d + j];
                        route.push(best);
                    }
                }
                PoolMode::Mean => {
                    let w = 1.0 / valid.len() as f64;
                    for j in 0..d {
                        out[s * d + j] = valid.iter().map(|&r| src[r * d + j]).sum::<f64>() / valid.len() as f64;
                    }
                    weights.extend(mask[s * len..(s + 1) * len].iter().map(|&m| if m { w } else { 0.0 }));
                }
            }
        }
        let value = Tensor::new(vec![segments, d], out)?;
        Ok(self.push(value, &[x], Op::Pool { x, mode, route, weights }))
    }

    /// `a . b / (max(|a|, eps) * max(|b|, eps))` as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
        let norm_a = ad.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_b = bd.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (na, nb) = (norm_a.max(eps), norm_b.max(eps));
        let value = Tensor::scalar(dot / (na * nb));
        Ok(self.push(
            value,
            &[a, b],
            Op::Cosine { a, b, na, nb, a_free: norm_a > eps, b_free: norm_b > eps },
        ))
    }

    /// All-pairs cosine similarity of the rows of a `[B, D]` matrix.
    pub fn pairwise_cosine(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.matrix_dims("pairwise_cosine input", x)?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(rows);
        let mut free = Vec::with_capacity(rows);
        for r in 0..rows {
            let norm = src[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm.max(eps));
            free.push(norm > eps);
        }
        let mut out = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                let dot: f64 = src[i * d..(i + 1) * d].iter().zip(&src[j * d..(j + 1) * d]).map(|(p, q)| p * q).sum();
                out[i * rows + j] = dot / (norms[i] * norms[j]);
            }
        }
        let value = Tensor::new(vec![rows, rows], out)?;
        Ok(self.push(value, &[x], Op::PairwiseCosine { x, norms, free }))
    }

    /// Reverse sweep from a scalar loss. Gradients are accumulated into every
    /// leaf reachable from `loss`; calling twice adds the same amount twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Rank(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut sink = GradSink { nodes: &self.nodes, grads: &mut grads };
            match &node.op {
                Op::Constant => {}
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Matmul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let bv = self.nodes[b.0].value.data();
                    let av = self.nodes[a.0].value.data();
                    sink.with(*a, |da| gemm(m, n, k, 1.0, &g, false, bv, true, 1.0, da));
                    sink.with(*b, |db| gemm(k, m, n, 1.0, av, true, &g, false, 1.0, db));
                }
                Op::Add(a, b) => {
                    sink.add_scaled(*a, &g, 1.0);
                    sink.add_scaled(*b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    sink.add_scaled(*a, &g, 1.0);
                    sink.add_scaled(*b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    sink.with(*a, |da| {
                        for ((d, gg), y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gg * y;
                        }
                    });
                    sink.with(*b, |db| {
                        for ((d, gg), x) in db.iter_mut().zip(&g).zip(av) {
                            *d += gg * x;
                        }
                    });
                }
                Op::Scale(a, s) => sink.add_scaled(*a, &g, *s),
                Op::AddRow { x, bias } => {
                    sink.add_scaled(*x, &g, 1.0);
                    sink.with(*bias, |db| {
                        let width = db.len();
                        for row in g.chunks(width) {
                            for (d, gg) in db.iter_mut().zip(row) {
                                *d += gg;
                            }
                        }
                    });
                }
                Op::Sum(x) => sink.with(*x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
                Op::Reshape(x) => sink.add_scaled(*x, &g, 1.0),
                Op::Gelu(x) => {
                    let xv = self.nodes[x.0].value.data();
                    sink.with(*x, |dx| {
                        for ((d, gg), &v) in dx.iter_mut().zip(&g).zip(xv) {
                            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            *d += gg * (0.5 * (1.0 + t) + 0.5 * v * dt);
                        }
                    });
                }
                Op::Softmax { x, outer, axis_len, inner } => {
                    let y = node.value.data();
                    let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
                    sink.with(*x, |dx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * axis_len * inner + i;
                                let dot: f64 =
                                    (0..axis_len).map(|a| g[base + a * inner] * y[base + a * inner]).sum();
                                for a in 0..axis_len {
                                    let idx = base + a * inner;
                                    dx[idx] += y[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = self.nodes[gain.0].value.data();
                    let d = gv.len();
                    sink.with(*gain, |dg| {
                        for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += row[j] * hrow[j];
                            }
                        }
                    });
                    sink.with(*bias, |db| {
                        for row in g.chunks(d) {
                            for (acc, gg) in db.iter_mut().zip(row) {
                                *acc += gg;
                            }
                        }
                    });
                    sink.with(*x, |dx| {
                        let mut dh = vec![0.0; d];
                        for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            for j in 0..d {
                                dh[j] = row[j] * gv[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                dx[r * d + j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    sink.with(*table, |dt| {
                        let d = g.len() / ids.len();
                        for (row, &id) in g.chunks(d).zip(ids) {
                            for (acc, gg) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                                *acc += gg;
                            }
                        }
                    });
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        &g,
                        self.nodes[q.0].value.data(),
                        self.nodes[k.0].value.data(),
                        self.nodes[v.0].value.data(),
                        spec,
                        probs,
                    );
                    sink.add_scaled(*q, &dq, 1.0);
                    sink.add_scaled(*k, &dk, 1.0);
                    sink.add_scaled(*v, &dv, 1.0);
                }
                Op::CrossEntropy { logits, targets, ignore, probs, scale } => {
                    let vocab = probs.len() / targets.len();
                    let factor = g[0] * scale;
                    sink.with(*logits, |dl| {
                        for (i, &t) in targets.iter().enumerate() {
                            if Some(t) == *ignore {
                                continue;
                            }
                            let row = &mut dl[i * vocab..(i + 1) * vocab];
                            for (d, p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                                *d += factor * p;
                            }
                            row[t] -= factor;
                        }
                    });
                }
                Op::Pool { x, mode, route, weights } => {
                    let d = node.value.shape()[1];
                    sink.with(*x, |dx| match mode {
                        PoolMode::Max => {
                            for (idx, &r) in route.iter().enumerate() {
                                dx[r * d + idx % d] += g[idx];
                            }
                        }
                        PoolMode::Mean => {
                            let len = weights.len() / (g.len() / d);
                            for (r, &w) in weights.iter().enumerate() {
                                if w == 0.0 {
                                    continue;
                                }
                                let s = r / len;
                                for j in 0..d {
                                    dx[r * d + j] += w * g[s * d + j];
                                }
                            }
                        }
                    });
                }
                Op::Cosine { a, b, na, nb, a_free, b_free } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let c = node.value.data()[0];
                    let inv = 1.0 / (na * nb);
                    let (ca, cb) = (
                        if *a_free { c / (na * na) } else { 0.0 },
                        if *b_free { c / (nb * nb) } else { 0.0 },
                    );
                    sink.with(*a, |da| {
                        for ((d, x), y) in da.iter_mut().zip(av).zip(bv) {
                            *d += g[0] * (y * inv - ca * x);
                        }
                    });
                    sink.with(*b, |db| {
                        for ((d, x), y) in db.iter_mut().zip(av).zip(bv) {
                            *d += g[0] * (x * inv - cb * y);
                        }
                    });
                }
                Op::PairwiseCosine { x, norms, free } => {
                    let xv = self.nodes[x.0].value.data();
                    let rows = norms.len();
                    let d = xv.len() / rows;
                    sink.with(*x, |dx| {
                        let unit: Vec<f64> =
                            (0..rows * d).map(|idx| xv[idx] / norms[idx / d]).collect();
                        let mut du = vec![0.0; d];
                        for i in 0..rows {
                            du.iter_mut().for_each(|v| *v = 0.0);
                            for j in 0..rows {
                                let w = g[i * rows + j] + g[j * rows + i];
                                for (acc, u) in du.iter_mut().zip(&unit[j * d..(j + 1) * d]) {
                                    *acc += w * u;
                                }
                            }
                            let ui = &unit[i * d..(i + 1) * d];
                            let proj = if free[i] { du.iter().zip(ui).map(|(a, b)| a * b).sum() } else { 0.0 };
                            for c in 0..d {
                                dx[i * d + c] += (du[c] - proj * ui[c]) / norms[i];
                            }
                        }
                    });
                }
            }
        }

        for (i, g) in leaf_grads {
            let slot = &mut self.nodes[i].grad;
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Lazily-allocated gradient buffers for nodes upstream of the current one.
struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(buf);
    }

    fn add_scaled(&mut self, v: Var, g: &[f64], s: f64) {
        self.with(v, |d| {
            for (acc, gg) in d.iter_mut().zip(g) {
                *acc += s * gg;
            }
        });
    }
}

fn attention_backward(
    g: &[f64],
    qd: &[f64],
    kd: &[f64],
    vd: &[f64],
    spec: &AttentionSpec,
    probs: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = qd.len() / (spec.batch * spec.q_len);
    let (t_len, s_len, heads) = (spec.q_len, spec.kv_len, spec.heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; s_len];
    for b in 0..spec.batch {
        if !spec.sample_active(b) {
            continue;
        }
        for h in 0..heads {
            for t in 0..t_len {
                let prow = &probs[((b * heads + h) * t_len + t) * s_len..][..s_len];
                let grow = &g[(b * t_len + t) * d + h * dh..][..dh];
                let mut weighted = 0.0;
                for j in 0..s_len {
                    if prow[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let voff = (b * s_len + j) * d + h * dh;
                    let vrow = &vd[voff..voff + dh];
                    dp[j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                    weighted += prow[j] * dp[j];
                    for (acc, gg) in dv[voff..voff + dh].iter_mut().zip(grow) {
                        *acc += prow[j] * gg;
                    }
                }
                let qoff = (b * t_len + t) * d + h * dh;
                for j in 0..s_len {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let koff = (b * s_len + j) * d + h * dh;
                    for c in 0..dh {
                        dq[qoff + c] += ds * kd[koff + c];
                        dk[koff + c] += ds * qd[qoff + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
