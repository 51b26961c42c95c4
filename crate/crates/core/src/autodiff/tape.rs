//! Define-by-run tape. Every op appends a node whose inputs already live on
//! the tape, so node ids are a topological order and the backward sweep is a
//! single reverse pass.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// A value recorded on the tape together with its gradient slot.
#[derive(Debug, Clone)]
pub struct DiffTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub node_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Add,
    Mul,
    Scale,
    Exp,
    Log,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        k: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        // softmax probabilities, B x K
        probs: Vec<f64>,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        m: usize,
        n: usize,
    },
    NodeMix {
        adj: Var,
        x: Var,
    },
    TemporalConv {
        x: Var,
        w: Var,
    },
    MeanRows {
        x: Var,
        rows: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Scatter {
        x: Var,
        pairs: Vec<(usize, usize)>,
    },
    Concat(Vec<Var>),
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(_) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::NodeMix { .. } => "node_mix",
            Op::TemporalConv { .. } => "temporal_conv",
            Op::MeanRows { .. } => "mean_rows",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Concat(_) => "concat",
            Op::StraightThrough(_) => "straight_through",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// Ordered record of executed operations.
///
/// A tape is rebuilt for every forward pass. It is `Send` but not meant to be
/// shared: one tape per thread per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let id = self.nodes.len();
        self.grads.push(vec![0.0; data.len()]);
        self.nodes.push(Node { shape, data, op });
        Var(id)
    }

    /// Records a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![], vec![value], Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    /// Snapshot of a node as a [`DiffTensor`].
    pub fn tensor(&self, v: Var) -> DiffTensor {
        let n = &self.nodes[v.0];
        DiffTensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            grad: self.grads[v.0].clone(),
            node_id: v.0,
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// First node (in recording order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.data.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((node, op)) => Err(Error::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    // ----- ops -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// Elementwise dispatcher. `Scale` takes the factor in `scale`; binary
    /// kinds take two inputs, the rest one.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var], scale: f64) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                "elementwise",
                format!("{kind:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        match kind {
            Elementwise::Relu => Ok(self.relu(inputs[0])),
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Scale => Ok(self.scale(inputs[0], scale)),
            Elementwise::Exp => Ok(self.exp(inputs[0])),
            Elementwise::Log => self.log(inputs[0]),
        }
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else if numel(sb) == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::shape(
                op,
                format!("cannot broadcast {sa:?} with {sb:?} (only scalar broadcasting)"),
            ))
        }
    }

    fn binary(&self, a: Var, b: Var, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        (0..n).map(|i| f(pick(va, i), pick(vb, i))).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("add", a, b)?;
        let out = self.binary(a, b, numel(&shape), |x, y| x + y);
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("mul", a, b)?;
        let out = self.binary(a, b, numel(&shape), |x, y| x * y);
        Ok(self.push(shape, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(self.shape(a).to_vec(), out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of nonpositive value {bad}"),
            });
        }
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Log(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let outer = numel(&shape[..axis]);
        let k = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * k + c) * inner + i;
                let m = (0..k).map(|c| v[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    let e = (v[idx(c)] - m).exp();
                    out[idx(c)] = e;
                    z += e;
                }
                for c in 0..k {
                    out[idx(c)] /= z;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                k,
                inner,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &v[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[label];
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
            }
        }
        Ok(self.push(
            vec![],
            vec![total / b as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} to {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape, data, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-d, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose { x, m, n }))
    }

    /// Per-frame graph aggregation: `out[t,v,c] = sum_u adj[v,u] * x[t,u,c]`.
    pub fn node_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(adj).to_vec(), self.shape(x).to_vec());
        if sa.len() != 2 || sx.len() != 3 || sa[0] != sa[1] || sa[1] != sx[1] {
            return Err(Error::shape(
                "node_mix",
                format!("adjacency {sa:?} incompatible with features {sx:?}"),
            ));
        }
        let (t, v, c) = (sx[0], sx[1], sx[2]);
        let (a, xv) = (self.value(adj), self.value(x));
        let mut out = vec![0.0; t * v * c];
        for f in 0..t {
            let xf = &xv[f * v * c..(f + 1) * v * c];
            let of = &mut out[f * v * c..(f + 1) * v * c];
            for i in 0..v {
                let orow = &mut of[i * c..(i + 1) * c];
                for u in 0..v {
                    let w = a[i * v + u];
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &xi) in orow.iter_mut().zip(&xf[u * c..(u + 1) * c]) {
                        *o += w * xi;
                    }
                }
            }
        }
        Ok(self.push(sx, out, Op::NodeMix { adj, x }))
    }

    /// Depthwise temporal convolution over axis 0 of a `[T, V, C]` input with
    /// a `[C, K]` kernel, `K` odd, zero padding `K / 2`, stride 1.
    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] || sw[1] % 2 == 0 {
            return Err(Error::shape(
                "temporal_conv",
                format!("kernel {sw:?} incompatible with features {sx:?} (need [C, odd K])"),
            ));
        }
        let (t, v, c) = (sx[0], sx[1], sx[2]);
        let k = sw[1];
        let pad = k / 2;
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; t * v * c];
        let stride = v * c;
        for f in 0..t {
            for j in 0..k {
                let src = f as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let xs = &xv[src * stride..(src + 1) * stride];
                let os = &mut out[f * stride..(f + 1) * stride];
                for (idx, (o, &xi)) in os.iter_mut().zip(xs).enumerate() {
                    *o += wv[(idx % c) * k + j] * xi;
                }
            }
        }
        Ok(self.push(sx, out, Op::TemporalConv { x, w }))
    }

    /// Mean over all leading axes: `[.., C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&c) = s.last() else {
            return Err(Error::shape("mean_rows", "scalar input"));
        };
        let rows = numel(&s[..s.len() - 1]);
        if rows == 0 || c == 0 {
            return Err(Error::shape("mean_rows", format!("empty input {s:?}")));
        }
        let v = self.value(x);
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for (o, &xi) in out.iter_mut().zip(&v[r * c..(r + 1) * c]) {
                *o += xi;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        Ok(self.push(vec![c], out, Op::MeanRows { x, rows }))
    }

    /// `out[n] = x[index[n]]` over the flat data.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return Err(Error::Index {
                op: "gather",
                detail: format!("index {bad} out of range for {} values", v.len()),
            });
        }
        let out = index.iter().map(|&i| v[i]).collect();
        Ok(self.push(
            vec![index.len()],
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Scatter-add: for each `(src, dst)` pair, `out[dst] += x[src]`, over
    /// flat data; the result has `shape`.
    pub fn scatter(&mut self, x: Var, pairs: &[(usize, usize)], shape: Vec<usize>) -> Result<Var> {
        let n = numel(&shape);
        let v = self.value(x);
        if let Some(&(s, d)) = pairs.iter().find(|&&(s, d)| s >= v.len() || d >= n) {
            return Err(Error::Index {
                op: "scatter",
                detail: format!("pair ({s}, {d}) out of range"),
            });
        }
        let mut out = vec![0.0; n];
        for &(s, d) in pairs {
            out[d] += v[s];
        }
        Ok(self.push(
            shape,
            out,
            Op::Scatter {
                x,
                pairs: pairs.to_vec(),
            },
        ))
    }

    /// Concatenates flat data of `parts` and gives it `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: Vec<usize>) -> Result<Var> {
        let total: usize = parts.iter().map(|&p| self.value(p).len()).sum();
        if total != numel(&shape) {
            return Err(Error::shape(
                "concat",
                format!("{total} values cannot fill {shape:?}"),
            ));
        }
        let mut out = Vec::with_capacity(total);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(shape, out, Op::Concat(parts.to_vec())))
    }

    /// Forward: one-hot at the argmax of each last-axis row (ties go to the
    /// lowest index). Backward: identity.
    pub fn straight_through(&mut self, soft: Var) -> Result<Var> {
        let shape = self.shape(soft).to_vec();
        let Some(&k) = shape.last() else {
            return Err(Error::shape("straight_through", "scalar input"));
        };
        if k == 0 {
            return Err(Error::shape("straight_through", "empty last axis"));
        }
        let v = self.value(soft);
        let mut out = vec![0.0; v.len()];
        for (row, orow) in v.chunks(k).zip(out.chunks_mut(k)) {
            orow[argmax(row)] = 1.0;
        }
        Ok(self.push(shape, out, Op::StraightThrough(soft)))
    }

    // ----- backward -----

    /// Populates gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut live = vec![false; loss.0 + 1];
        live[loss.0] = true;
        self.grads[loss.0][0] += 1.0;
        for id in (0..=loss.0).rev() {
            if !live[id] {
                continue;
            }
            for input in self.inputs(id) {
                live[input.0] = true;
            }
            let g = std::mem::take(&mut self.grads[id]);
            self.backprop_node(id, &g);
            self.grads[id] = g;
        }
        Ok(())
    }

    fn inputs(&self, id: usize) -> Vec<Var> {
        match &self.nodes[id].op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::NodeMix { adj, x } => vec![*adj, *x],
            Op::TemporalConv { x, w } => vec![*x, *w],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::StraightThrough(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::Transpose { x, .. }
            | Op::MeanRows { x, .. }
            | Op::Gather { x, .. }
            | Op::Scatter { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat(parts) => parts.clone(),
        }
    }

    fn accumulate(&mut self, v: Var, g: impl IntoIterator<Item = f64>) {
        for (dst, src) in self.grads[v.0].iter_mut().zip(g) {
            *dst += src;
        }
    }

    /// Adds `g` into `v`'s gradient, summing when `v` was broadcast.
    fn accumulate_broadcast(&mut self, v: Var, g: Vec<f64>) {
        if self.grads[v.0].len() == 1 && g.len() != 1 {
            self.grads[v.0][0] += g.iter().sum::<f64>();
        } else {
            self.accumulate(v, g);
        }
    }

    fn backprop_node(&mut self, id: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // dA = dC * B^T
                let bv = self.value(*b);
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gij * bv[p * n + j];
                        }
                    }
                }
                // dB = A^T * dC
                let av = self.value(*a);
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(*a, g.to_vec());
                self.accumulate_broadcast(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let n = g.len();
                let (va, vb) = (self.value(*a), self.value(*b));
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                let ga: Vec<f64> = (0..n).map(|i| g[i] * pick(vb, i)).collect();
                let gb: Vec<f64> = (0..n).map(|i| g[i] * pick(va, i)).collect();
                self.accumulate_broadcast(*a, ga);
                self.accumulate_broadcast(*b, gb);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(*x, g.iter().map(|gi| gi * c));
            }
            Op::Relu(x) => {
                // relu'(0) = 0
                let d: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(*x, d);
            }
            Op::Exp(x) => {
                let d: Vec<f64> = self.nodes[id].data.iter().zip(g).map(|(y, gi)| y * gi).collect();
                self.accumulate(*x, d);
            }
            Op::Log(x) => {
                let d: Vec<f64> = self.value(*x).iter().zip(g).map(|(xi, gi)| gi / xi).collect();
                self.accumulate(*x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, std::iter::repeat_n(g[0], n));
            }
            Op::Softmax { x, outer, k, inner } => {
                let (outer, k, inner) = (*outer, *k, *inner);
                let y = &self.nodes[id].data;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |c: usize| (o * k + c) * inner + i;
                        let dot: f64 = (0..k).map(|c| g[idx(c)] * y[idx(c)]).sum();
                        for c in 0..k {
                            d[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
                        }
                    }
                }
                self.accumulate(*x, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                self.accumulate(*logits, d);
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                self.accumulate(*x, g.iter().copied());
            }
            Op::Transpose { x, m, n } => {
                let (m, n) = (*m, *n);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(*x, d);
            }
            Op::NodeMix { adj, x } => {
                let s = self.nodes[x.0].shape.clone();
                let (t, v, c) = (s[0], s[1], s[2]);
                let (a, xv) = (self.value(*adj), self.value(*x));
                let mut dx = vec![0.0; t * v * c];
                let mut da = vec![0.0; v * v];
                for f in 0..t {
                    let base = f * v * c;
                    for i in 0..v {
                        let grow = &g[base + i * c..base + (i + 1) * c];
                        for u in 0..v {
                            let xrow = &xv[base + u * c..base + (u + 1) * c];
                            da[i * v + u] += grow.iter().zip(xrow).map(|(p, q)| p * q).sum::<f64>();
                            let w = a[i * v + u];
                            if w != 0.0 {
                                for (dxi, gi) in dx[base + u * c..base + (u + 1) * c].iter_mut().zip(grow) {
                                    *dxi += w * gi;
                                }
                            }
                        }
                    }
                }
                self.accumulate(*adj, da);
                self.accumulate(*x, dx);
            }
            Op::TemporalConv { x, w } => {
                let s = self.nodes[x.0].shape.clone();
                let (t, v, c) = (s[0], s[1], s[2]);
                let k = self.nodes[w.0].shape[1];
                let pad = k / 2;
                let stride = v * c;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dx = vec![0.0; t * stride];
                let mut dw = vec![0.0; c * k];
                for f in 0..t {
                    for j in 0..k {
                        let src = f as isize + j as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        let gs = &g[f * stride..(f + 1) * stride];
                        let xs = &xv[src * stride..(src + 1) * stride];
                        let dxs = &mut dx[src * stride..(src + 1) * stride];
                        for idx in 0..stride {
                            let ch = idx % c;
                            dxs[idx] += wv[ch * k + j] * gs[idx];
                            dw[ch * k + j] += gs[idx] * xs[idx];
                        }
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
            }
            Op::MeanRows { x, rows } => {
                let c = g.len();
                let inv = 1.0 / *rows as f64;
                let d: Vec<f64> = (0..rows * c).map(|i| g[i % c] * inv).collect();
                self.accumulate(*x, d);
            }
            Op::Gather { x, index } => {
                for (gi, &i) in g.iter().zip(index) {
                    self.grads[x.0][i] += gi;
                }
            }
            Op::Scatter { x, pairs } => {
                for &(s, d) in pairs {
                    self.grads[x.0][s] += g[d];
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.grads[p.0].len();
                    self.accumulate(p, g[off..off + n].iter().copied());
                    off += n;
                }
            }
        }
        self.nodes[id].op = op;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}
