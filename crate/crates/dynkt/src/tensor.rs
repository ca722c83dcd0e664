//! Dense tensors and a reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] records every operation performed during a forward pass; a
//! single call to [`Graph::backward`] then propagates gradients from a scalar
//! loss to every leaf created with `requires_grad`. The tape is rebuilt for
//! each training step, which keeps per-step randomness (dropout masks) trivial
//! to handle. All storage is 64-bit, row-major and dense.
//!
//! Shape errors are programmer errors and panic with a message naming the
//! operation and both shapes. Gradients accumulate additively across fan-out,
//! so a value used twice receives the sum of both contributions. A graph is
//! confined to one thread; independent graphs may run in parallel.
//!
//! Broadcasting is deliberately minimal: for `add` and `mul` the right-hand
//! operand may be a suffix of the left-hand shape (e.g. a `[C]` bias against a
//! `[B, T, C]` activation). Nothing else broadcasts.

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// A dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, panicking unless `product(shape) == values.len()`.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            values.len(),
            "tensor shape {:?} implies {} elements but {} values were given",
            shape,
            numel(&shape),
            values.len()
        );
        Tensor { shape, values, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![0.0; numel(shape)])
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient of the last backward pass, if one reached this tensor.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Recorded operation. Operand fields index into `Graph::nodes` and always
/// precede the node that holds them, so a single reverse sweep visits every
/// node after all of its consumers.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Matmul { a: usize, b: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Reshape { input: usize },
    Sum { input: usize, axis: Option<usize> },
    Mean { input: usize, axis: Option<usize> },
    Relu { input: usize },
    Sigmoid { input: usize },
    Tanh { input: usize },
    Exp { input: usize },
    Log { input: usize },
    Affine { input: usize, mul: f64, add: f64 },
    Powf { input: usize, exponent: f64 },
    Clamp { input: usize, lo: f64, hi: f64 },
    Embedding { table: usize, ids: Vec<usize> },
    Conv1d { x: usize, w: usize, b: usize },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Tape of recorded operations for one forward/backward cycle.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an external tensor as a leaf.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf)
    }

    /// Records a non-differentiable leaf from raw parts.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> TensorId {
        self.leaf(Tensor::new(shape.to_vec(), values))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.values
    }

    /// Gradient accumulated for `id` by the last [`Graph::backward`] call.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Clones the value (and gradient, if any) out of the graph.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        self.nodes[id.0].tensor.clone()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].tensor.requires_grad
    }

    fn record(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op, name: &str) -> TensorId {
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite value produced by {name} (shape {shape:?})"
        );
        let mut t = Tensor::new(shape, values);
        t.requires_grad = requires_grad;
        self.push(t, op)
    }

    // ── elementwise binary ──────────────────────────────────────────────

    /// Elementwise sum; `b` may be a suffix-shaped operand broadcast across
    /// the leading dimensions of `a`.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.broadcast_binary(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    /// Elementwise product with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// `a - b`, composed from `add` and `affine`.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    fn broadcast_binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorId {
        let (ashape, bshape) = (self.shape(a), self.shape(b));
        assert!(
            suffix_broadcastable(ashape, bshape),
            "{name}: shape {bshape:?} is not equal to nor a suffix of shape {ashape:?}"
        );
        let av = self.values(a);
        let bv = self.values(b);
        let bn = bv.len().max(1);
        let out: Vec<f64> = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % bn])).collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        let shape = self.shape(a).to_vec();
        self.record(shape, out, rg, op, name)
    }

    // ── matrix multiply ─────────────────────────────────────────────────

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            ashape.len() == 2 && bshape.len() == 2 && ashape[1] == bshape[0],
            "matmul: incompatible shapes {ashape:?} x {bshape:?}"
        );
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let out = matmul_raw(self.values(a), self.values(b), m, k, n);
        let rg = self.requires(a.0) || self.requires(b.0);
        self.record(vec![m, n], out, rg, Op::Matmul { a: a.0, b: b.0 }, "matmul")
    }

    // ── shape ops ───────────────────────────────────────────────────────

    /// Concatenates equal-rank tensors along `axis`; off-axis dims must match.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> TensorId {
        assert!(!inputs.is_empty(), "concat: empty input list");
        let first = self.shape(inputs[0]).to_vec();
        assert!(axis < first.len(), "concat: axis {axis} out of range for shape {first:?}");
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            assert!(
                s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y),
                "concat: shape {s:?} incompatible with {first:?} off axis {axis}"
            );
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer = first[..axis].iter().product::<usize>();
        let inner = first[axis + 1..].iter().product::<usize>();
        let mut out = vec![0.0; numel(&shape)];
        let row = axis_total * inner;
        let mut offset = 0;
        for &id in inputs {
            let d = self.shape(id)[axis];
            let block = d * inner;
            let v = self.values(id);
            for o in 0..outer {
                out[o * row + offset..o * row + offset + block]
                    .copy_from_slice(&v[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let rg = inputs.iter().any(|id| self.requires(id.0));
        self.record(
            shape,
            out,
            rg,
            Op::Concat { inputs: inputs.iter().map(|i| i.0).collect(), axis },
            "concat",
        )
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, input: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let shape = self.shape(input).to_vec();
        assert!(axis < shape.len(), "slice: axis {axis} out of range for shape {shape:?}");
        assert!(
            start + len <= shape[axis] && len > 0,
            "slice: range {start}..{} exceeds axis {axis} of shape {shape:?}",
            start + len
        );
        let outer = shape[..axis].iter().product::<usize>();
        let inner = shape[axis + 1..].iter().product::<usize>();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let v = self.values(input);
        let src_row = shape[axis] * inner;
        let dst_row = len * inner;
        for o in 0..outer {
            let src = o * src_row + start * inner;
            out[o * dst_row..(o + 1) * dst_row].copy_from_slice(&v[src..src + dst_row]);
        }
        let rg = self.requires(input.0);
        self.record(out_shape, out, rg, Op::Slice { input: input.0, axis, start }, "slice")
    }

    /// Same values, new shape of identical element count.
    pub fn reshape(&mut self, input: TensorId, shape: &[usize]) -> TensorId {
        let old = self.shape(input);
        assert_eq!(
            numel(old),
            numel(shape),
            "reshape: cannot view shape {old:?} as {shape:?}"
        );
        let values = self.values(input).to_vec();
        let rg = self.requires(input.0);
        self.record(shape.to_vec(), values, rg, Op::Reshape { input: input.0 }, "reshape")
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum over one axis, or over everything (`None` -> rank-0 scalar).
    pub fn sum(&mut self, input: TensorId, axis: Option<usize>) -> TensorId {
        self.reduce(input, axis, false)
    }

    /// Mean over one axis, or over everything (`None` -> rank-0 scalar).
    pub fn mean(&mut self, input: TensorId, axis: Option<usize>) -> TensorId {
        self.reduce(input, axis, true)
    }

    fn reduce(&mut self, input: TensorId, axis: Option<usize>, mean: bool) -> TensorId {
        let shape = self.shape(input).to_vec();
        let name = if mean { "mean" } else { "sum" };
        let v = self.values(input);
        let (out_shape, out) = match axis {
            None => {
                let total: f64 = v.iter().sum();
                let denom = if mean { v.len().max(1) as f64 } else { 1.0 };
                (vec![], vec![total / denom])
            }
            Some(ax) => {
                assert!(ax < shape.len(), "{name}: axis {ax} out of range for shape {shape:?}");
                let outer = shape[..ax].iter().product::<usize>();
                let n = shape[ax];
                let inner = shape[ax + 1..].iter().product::<usize>();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += v[base + i];
                        }
                    }
                }
                if mean {
                    let inv = 1.0 / n as f64;
                    out.iter_mut().for_each(|x| *x *= inv);
                }
                let mut os = shape.clone();
                os.remove(ax);
                (os, out)
            }
        };
        let rg = self.requires(input.0);
        let op = if mean { Op::Mean { input: input.0, axis } } else { Op::Sum { input: input.0, axis } };
        self.record(out_shape, out, rg, op, name)
    }

    // ── elementwise unary ───────────────────────────────────────────────

    /// ReLU; the derivative at exactly 0 is defined as 0.
    pub fn relu(&mut self, input: TensorId) -> TensorId {
        self.unary(input, "relu", |x| x.max(0.0), Op::Relu { input: input.0 })
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        self.unary(input, "sigmoid", sigmoid_scalar, Op::Sigmoid { input: input.0 })
    }

    pub fn tanh(&mut self, input: TensorId) -> TensorId {
        self.unary(input, "tanh", f64::tanh, Op::Tanh { input: input.0 })
    }

    pub fn exp(&mut self, input: TensorId) -> TensorId {
        self.unary(input, "exp", f64::exp, Op::Exp { input: input.0 })
    }

    /// Natural logarithm; inputs must be positive.
    pub fn log(&mut self, input: TensorId) -> TensorId {
        self.unary(input, "log", f64::ln, Op::Log { input: input.0 })
    }

    /// `mul * x + add` with scalar constants.
    pub fn affine(&mut self, input: TensorId, mul: f64, add: f64) -> TensorId {
        self.unary(input, "affine", |x| mul * x + add, Op::Affine { input: input.0, mul, add })
    }

    /// Elementwise power with constant exponent.
    pub fn powf(&mut self, input: TensorId, exponent: f64) -> TensorId {
        self.unary(input, "powf", |x| x.powf(exponent), Op::Powf { input: input.0, exponent })
    }

    /// Clamps into `[lo, hi]`; gradient is passed only strictly inside.
    pub fn clamp(&mut self, input: TensorId, lo: f64, hi: f64) -> TensorId {
        assert!(lo < hi, "clamp: lo {lo} must be below hi {hi}");
        self.unary(input, "clamp", |x| x.clamp(lo, hi), Op::Clamp { input: input.0, lo, hi })
    }

    fn unary(&mut self, input: TensorId, name: &str, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let out: Vec<f64> = self.values(input).iter().map(|&x| f(x)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires(input.0);
        self.record(shape, out, rg, op, name)
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Row lookup: `out[i, :] = table[ids[i], :]`, output shape
    /// `ids_shape x [dim]`. The gradient scatters back onto the looked-up
    /// rows only.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize], ids_shape: &[usize]) -> TensorId {
        let tshape = self.shape(table).to_vec();
        assert!(tshape.len() == 2, "embedding: table must be 2-D, got shape {tshape:?}");
        assert_eq!(
            numel(ids_shape),
            ids.len(),
            "embedding: ids shape {ids_shape:?} does not match {} ids",
            ids.len()
        );
        let (rows, dim) = (tshape[0], tshape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            panic!("embedding: id {bad} out of range for table with {rows} rows");
        }
        let tv = self.values(table);
        let mut out = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            out[i * dim..(i + 1) * dim].copy_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let rg = self.requires(table.0);
        self.record(shape, out, rg, Op::Embedding { table: table.0, ids: ids.to_vec() }, "embedding")
    }

    /// 1-D convolution over the time axis with zero "same" padding and
    /// stride 1: `x [B, T, C] * w [F, K, C] + b [F] -> [B, T, F]`.
    /// The kernel size must be odd so the padding is symmetric.
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        assert!(xs.len() == 3, "conv1d: input must be [B, T, C], got {xs:?}");
        assert!(ws.len() == 3, "conv1d: weights must be [F, K, C], got {ws:?}");
        let (batch, time, chans) = (xs[0], xs[1], xs[2]);
        let (filters, kernel, wc) = (ws[0], ws[1], ws[2]);
        assert!(kernel % 2 == 1, "conv1d: kernel size {kernel} must be odd for same padding");
        assert!(time >= 1, "conv1d: empty time axis in shape {xs:?}");
        assert_eq!(wc, chans, "conv1d: weight channels {wc} != input channels {chans} ({ws:?} vs {xs:?})");
        assert_eq!(bs, vec![filters], "conv1d: bias shape {bs:?} != [{filters}]");

        let xv = self.values(x);
        let wv = self.values(w);
        let bv = self.values(b);
        let pad = kernel / 2;
        let mut out = vec![0.0; batch * time * filters];
        for bi in 0..batch {
            for t in 0..time {
                for f in 0..filters {
                    let mut acc = bv[f];
                    for k in 0..kernel {
                        let src = t + k;
                        if src < pad || src - pad >= time {
                            continue;
                        }
                        let xt = (bi * time + (src - pad)) * chans;
                        let wk = (f * kernel + k) * chans;
                        for c in 0..chans {
                            acc += wv[wk + c] * xv[xt + c];
                        }
                    }
                    out[(bi * time + t) * filters + f] = acc;
                }
            }
        }
        let rg = self.requires(x.0) || self.requires(w.0) || self.requires(b.0);
        self.record(
            vec![batch, time, filters],
            out,
            rg,
            Op::Conv1d { x: x.0, w: w.0, b: b.0 },
            "conv1d",
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagates `d loss / d leaf` to every differentiable leaf reachable
    /// from `loss`. The loss must be a rank-0 scalar produced on this graph,
    /// and a graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: TensorId) {
        assert!(
            !self.backward_done,
            "stale graph: backward was already called; record a fresh forward pass first"
        );
        assert!(loss.0 < self.nodes.len(), "backward: loss is not on this graph");
        assert!(
            self.nodes[loss.0].tensor.is_scalar(),
            "backward: non-scalar loss of shape {:?}",
            self.nodes[loss.0].tensor.shape
        );
        self.backward_done = true;
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let Some(go) = self.nodes[i].tensor.grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.step_backward(i, &op, &go);
            self.nodes[i].op = op;
            self.nodes[i].tensor.grad = Some(go);
        }
    }

    /// Adds `delta` into the gradient buffer of node `id` if it participates
    /// in differentiation.
    fn accumulate(&mut self, id: usize, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].tensor.requires_grad {
            return;
        }
        let n = self.nodes[id].tensor.values.len();
        let g = self.nodes[id].tensor.grad.get_or_insert_with(|| vec![0.0; n]);
        delta(g);
    }

    fn step_backward(&mut self, node: usize, op: &Op, go: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(a, |g| {
                    for (gi, &d) in g.iter_mut().zip(go) {
                        *gi += d;
                    }
                });
                let bn = self.nodes[b].tensor.values.len();
                self.accumulate(b, |g| {
                    for (i, &d) in go.iter().enumerate() {
                        g[i % bn] += d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let bn = self.nodes[b].tensor.values.len();
                if self.requires(a) {
                    let contrib: Vec<f64> = go
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| d * self.nodes[b].tensor.values[i % bn])
                        .collect();
                    self.accumulate(a, |g| {
                        for (gi, d) in g.iter_mut().zip(contrib) {
                            *gi += d;
                        }
                    });
                }
                if self.requires(b) {
                    let mut contrib = vec![0.0; bn];
                    for (i, &d) in go.iter().enumerate() {
                        contrib[i % bn] += d * self.nodes[a].tensor.values[i];
                    }
                    self.accumulate(b, |g| {
                        for (gi, d) in g.iter_mut().zip(contrib) {
                            *gi += d;
                        }
                    });
                }
            }
            Op::Matmul { a, b } => {
                let m = self.nodes[a].tensor.shape[0];
                let k = self.nodes[a].tensor.shape[1];
                let n = self.nodes[b].tensor.shape[1];
                if self.requires(a) {
                    // dA = dOut . B^T
                    let bv = &self.nodes[b].tensor.values;
                    let mut contrib = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = go[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                contrib[i * k + p] += d * bv[p * n + j];
                            }
                        }
                    }
                    self.accumulate(a, |g| {
                        for (gi, d) in g.iter_mut().zip(contrib) {
                            *gi += d;
                        }
                    });
                }
                if self.requires(b) {
                    // dB = A^T . dOut
                    let av = &self.nodes[a].tensor.values;
                    let mut contrib = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                contrib[p * n + j] += x * go[i * n + j];
                            }
                        }
                    }
                    self.accumulate(b, |g| {
                        for (gi, d) in g.iter_mut().zip(contrib) {
                            *gi += d;
                        }
                    });
                }
            }
            Op::Concat { ref inputs, axis } => {
                let shape = &self.nodes[node].tensor.shape;
                let outer = shape[..axis].iter().product::<usize>();
                let inner = shape[axis + 1..].iter().product::<usize>();
                let row = shape[axis] * inner;
                let mut offset = 0;
                for &inp in inputs {
                    let d = self.nodes[inp].tensor.shape[axis];
                    let block = d * inner;
                    if self.requires(inp) {
                        let mut contrib = vec![0.0; outer * block];
                        for o in 0..outer {
                            contrib[o * block..(o + 1) * block]
                                .copy_from_slice(&go[o * row + offset..o * row + offset + block]);
                        }
                        self.accumulate(inp, |g| {
                            for (gi, d) in g.iter_mut().zip(contrib) {
                                *gi += d;
                            }
                        });
                    }
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.nodes[input].tensor.shape.clone();
                let len = self.nodes[node].tensor.shape[axis];
                let outer = in_shape[..axis].iter().product::<usize>();
                let inner = in_shape[axis + 1..].iter().product::<usize>();
                let src_row = in_shape[axis] * inner;
                let dst_row = len * inner;
                self.accumulate(input, |g| {
                    for o in 0..outer {
                        let dst = o * src_row + start * inner;
                        for i in 0..dst_row {
                            g[dst + i] += go[o * dst_row + i];
                        }
                    }
                });
            }
            Op::Reshape { input } => {
                self.accumulate(input, |g| {
                    for (gi, &d) in g.iter_mut().zip(go) {
                        *gi += d;
                    }
                });
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let mean = matches!(op, Op::Mean { .. });
                let in_shape = self.nodes[input].tensor.shape.clone();
                match axis {
                    None => {
                        let scale = if mean { 1.0 / numel(&in_shape).max(1) as f64 } else { 1.0 };
                        let d = go[0] * scale;
                        self.accumulate(input, |g| g.iter_mut().for_each(|gi| *gi += d));
                    }
                    Some(ax) => {
                        let outer = in_shape[..ax].iter().product::<usize>();
                        let n = in_shape[ax];
                        let inner = in_shape[ax + 1..].iter().product::<usize>();
                        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                        self.accumulate(input, |g| {
                            for o in 0..outer {
                                for j in 0..n {
                                    let base = (o * n + j) * inner;
                                    for i in 0..inner {
                                        g[base + i] += go[o * inner + i] * scale;
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::Relu { input } => {
                let mask: Vec<f64> = self.nodes[input]
                    .tensor
                    .values
                    .iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                self.accumulate(input, |g| {
                    for ((gi, &d), m) in g.iter_mut().zip(go).zip(mask) {
                        *gi += d * m;
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y: Vec<f64> = self.nodes[node].tensor.values.clone();
                self.accumulate(input, |g| {
                    for ((gi, &d), yi) in g.iter_mut().zip(go).zip(y) {
                        *gi += d * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh { input } => {
                let y: Vec<f64> = self.nodes[node].tensor.values.clone();
                self.accumulate(input, |g| {
                    for ((gi, &d), yi) in g.iter_mut().zip(go).zip(y) {
                        *gi += d * (1.0 - yi * yi);
                    }
                });
            }
            Op::Exp { input } => {
                let y: Vec<f64> = self.nodes[node].tensor.values.clone();
                self.accumulate(input, |g| {
                    for ((gi, &d), yi) in g.iter_mut().zip(go).zip(y) {
                        *gi += d * yi;
                    }
                });
            }
            Op::Log { input } => {
                let x: Vec<f64> = self.nodes[input].tensor.values.clone();
                self.accumulate(input, |g| {
                    for ((gi, &d), xi) in g.iter_mut().zip(go).zip(x) {
                        *gi += d / xi;
                    }
                });
            }
            Op::Affine { input, mul, .. } => {
                self.accumulate(input, |g| {
                    for (gi, &d) in g.iter_mut().zip(go) {
                        *gi += d * mul;
                    }
                });
            }
            Op::Powf { input, exponent } => {
                let x: Vec<f64> = self.nodes[input].tensor.values.clone();
                self.accumulate(input, |g| {
                    for ((gi, &d), xi) in g.iter_mut().zip(go).zip(x) {
                        *gi += d * exponent * xi.powf(exponent - 1.0);
                    }
                });
            }
            Op::Clamp { input, lo, hi } => {
                let pass: Vec<f64> = self.nodes[input]
                    .tensor
                    .values
                    .iter()
                    .map(|&x| if x > lo && x < hi { 1.0 } else { 0.0 })
                    .collect();
                self.accumulate(input, |g| {
                    for ((gi, &d), m) in g.iter_mut().zip(go).zip(pass) {
                        *gi += d * m;
                    }
                });
            }
            Op::Embedding { table, ref ids } => {
                let dim = self.nodes[table].tensor.shape[1];
                let ids = ids.clone();
                self.accumulate(table, |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            g[id * dim + c] += go[i * dim + c];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let xs = self.nodes[x].tensor.shape.clone();
                let ws = self.nodes[w].tensor.shape.clone();
                let (batch, time, chans) = (xs[0], xs[1], xs[2]);
                let (filters, kernel) = (ws[0], ws[1]);
                let pad = kernel / 2;
                if self.requires(x) {
                    let wv = self.nodes[w].tensor.values.clone();
                    let mut contrib = vec![0.0; batch * time * chans];
                    for bi in 0..batch {
                        for t in 0..time {
                            for f in 0..filters {
                                let d = go[(bi * time + t) * filters + f];
                                if d == 0.0 {
                                    continue;
                                }
                                for k in 0..kernel {
                                    let src = t + k;
                                    if src < pad || src - pad >= time {
                                        continue;
                                    }
                                    let xt = (bi * time + (src - pad)) * chans;
                                    let wk = (f * kernel + k) * chans;
                                    for c in 0..chans {
                                        contrib[xt + c] += d * wv[wk + c];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, |g| {
                        for (gi, d) in g.iter_mut().zip(contrib) {
                            *gi += d;
                        }
                    });
                }
                if self.requires(w) {
                    let xv = self.nodes[x].tensor.values.clone();
                    let mut contrib = vec![0.0; filters * kernel * chans];
                    for bi in 0..batch {
                        for t in 0..time {
                            for f in 0..filters {
                                let d = go[(bi * time + t) * filters + f];
                                if d == 0.0 {
                                    continue;
                                }
                                for k in 0..kernel {
                                    let src = t + k;
                                    if src < pad || src - pad >= time {
                                        continue;
                                    }
                                    let xt = (bi * time + (src - pad)) * chans;
                                    let wk = (f * kernel + k) * chans;
                                    for c in 0..chans {
                                        contrib[wk + c] += d * xv[xt + c];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(w, |g| {
                        for (gi, d) in g.iter_mut().zip(contrib) {
                            *gi += d;
                        }
                    });
                }
                if self.requires(b) {
                    let mut contrib = vec![0.0; filters];
                    for chunk in go.chunks_exact(filters) {
                        for (f, &d) in chunk.iter().enumerate() {
                            contrib[f] += d;
                        }
                    }
                    self.accumulate(b, |g| {
                        for (gi, d) in g.iter_mut().zip(contrib) {
                            *gi += d;
                        }
                    });
                }
            }
        }
    }
}

fn suffix_broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let acc = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(row) {
                *o += x * bv;
            }
        }
    }
    out
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── gradient checking ───────────────────────────────────────────────────

/// Outcome of [`grad_check`]: the worst relative error over the components
/// of `x`, plus any components excluded as non-differentiable (detected by
/// disagreeing one-sided differences, e.g. a ReLU kink).
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub nondifferentiable: Vec<usize>,
}

/// Compares the backward-pass gradient of a scalar-valued `f` at `x` against
/// central finite differences with step `h`, returning the maximum relative
/// error `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must be pure: two evaluations on identical inputs must agree exactly.
/// `h` is restricted to `[1e-7, 1e-3]`, the window where central differences
/// on 64-bit floats are trustworthy.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> GradCheck
where
    F: Fn(&mut Graph, TensorId) -> TensorId,
{
    assert!((1e-7..=1e-3).contains(&h), "grad_check: step {h} outside [1e-7, 1e-3]");

    let eval = |values: &[f64]| -> f64 {
        let mut g = Graph::new();
        let id = g.leaf(Tensor::new(x.shape().to_vec(), values.to_vec()));
        let out = f(&mut g, id);
        assert!(
            g.shape(out).is_empty(),
            "grad_check: f returned non-scalar of shape {:?}",
            g.shape(out)
        );
        g.values(out)[0]
    };

    // Analytic gradient.
    let mut g = Graph::new();
    let id = g.leaf(Tensor::new(x.shape().to_vec(), x.values().to_vec()).with_grad());
    let out = f(&mut g, id);
    assert!(
        g.shape(out).is_empty(),
        "grad_check: f returned non-scalar of shape {:?}",
        g.shape(out)
    );
    g.backward(out);
    let analytic = g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let f0 = eval(x.values());
    let mut max_rel = 0.0_f64;
    let mut kinks = Vec::new();
    let mut probe = x.values().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe);
        probe[i] = orig - h;
        let fm = eval(&probe);
        probe[i] = orig;

        let central = (fp - fm) / (2.0 * h);
        let left = (f0 - fm) / h;
        let right = (fp - f0) / h;
        if (left - right).abs() > 1e-2 * left.abs().max(right.abs()).max(1.0) {
            // One-sided slopes disagree: a kink, not a smooth point.
            kinks.push(i);
            continue;
        }
        let rel = (analytic[i] - central).abs() / analytic[i].abs().max(central.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    GradCheck { max_rel_err: max_rel, nondifferentiable: kinks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec())
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let out = g.matmul(a, eye);
        assert_eq!(g.values(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let y = g.sigmoid(x);
        assert_eq!(g.values(y), &[0.5]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.values(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[4.0, -1.0, 2.5]).with_grad());
        let s = g.sum(x, None);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = g.mul(x, x);
        let s = g.sum(sq, None);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fanout_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[3.0, -1.0]).with_grad());
        let y = g.add(x, x);
        let s = g.sum(y, None);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let a: Vec<f64> = (0..12).map(|_| next()).collect();
        let w: Vec<f64> = (0..8).map(|_| next()).collect();
        let wt = t(&[4, 2], &w);
        let check = grad_check(
            |g, x| {
                let wi = g.leaf(wt.clone());
                let p = g.matmul(x, wi);
                g.sum(p, None)
            },
            &t(&[3, 4], &a),
            1e-5,
        );
        assert!(check.max_rel_err <= 1e-6, "rel err {}", check.max_rel_err);

        // And with respect to the weight operand.
        let at = t(&[3, 4], &a);
        let check_w = grad_check(
            |g, x| {
                let ai = g.leaf(at.clone());
                let p = g.matmul(ai, x);
                g.sum(p, None)
            },
            &t(&[4, 2], &w),
            1e-5,
        );
        assert!(check_w.max_rel_err <= 1e-6, "rel err {}", check_w.max_rel_err);
    }

    #[test]
    fn grad_check_sigmoid_closed_form() {
        let x = t(&[5], &[0.3, -1.2, 0.7, 2.0, -0.4]);
        let check = grad_check(
            |g, x| {
                let s = g.sigmoid(x);
                g.sum(s, None)
            },
            &x,
            1e-5,
        );
        assert!(check.max_rel_err <= 1e-6, "rel err {}", check.max_rel_err);
        assert!(check.nondifferentiable.is_empty());

        // Closed form: d/dx sum(sigmoid) = s(x)(1-s(x)).
        let mut g = Graph::new();
        let xi = g.leaf(x.clone().with_grad());
        let s = g.sigmoid(xi);
        let sum = g.sum(s, None);
        g.backward(sum);
        for (gi, &v) in g.grad(xi).unwrap().iter().zip(x.values()) {
            let s = sigmoid_scalar(v);
            assert!((gi - s * (1.0 - s)).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_linear_is_exact() {
        // Larger step: for linear f the difference quotient is exact, and
        // h = 1e-3 keeps the floating-point cancellation noise below 1e-12.
        let check = grad_check(|g, x| g.sum(x, None), &t(&[4], &[0.1, 0.2, -0.3, 0.4]), 1e-3);
        assert!(check.max_rel_err <= 1e-12, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn grad_check_flags_relu_kink() {
        let check = grad_check(
            |g, x| {
                let r = g.relu(x);
                g.sum(r, None)
            },
            &t(&[3], &[1.0, 0.0, -1.0]),
            1e-5,
        );
        assert_eq!(check.nondifferentiable, vec![1]);
        assert!(check.max_rel_err <= 1e-9);
    }

    #[test]
    fn concat_then_slice_roundtrips_exactly() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let c = g.concat(&[a, b], 1);
        assert_eq!(g.shape(c), &[2, 5]);
        let ra = g.slice(c, 1, 0, 2);
        let rb = g.slice(c, 1, 2, 3);
        assert_eq!(g.values(ra), g.values(a));
        assert_eq!(g.values(rb), g.values(b));
    }

    #[test]
    fn concat_gradient_splits() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]).with_grad());
        let b = g.leaf(t(&[1, 1], &[3.0]).with_grad());
        let c = g.concat(&[a, b], 1);
        let w = g.leaf(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let p = g.mul(c, w);
        let s = g.sum(p, None);
        g.backward(s);
        assert_eq!(g.grad(a).unwrap(), &[10.0, 20.0]);
        assert_eq!(g.grad(b).unwrap(), &[30.0]);
    }

    #[test]
    fn mean_axis_reduces_correctly() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let m0 = g.mean(x, Some(0));
        assert_eq!(g.values(m0), &[2.5, 3.5, 4.5]);
        let m1 = g.mean(x, Some(1));
        assert_eq!(g.values(m1), &[2.0, 5.0]);
    }

    #[test]
    fn bias_broadcast_add_backward() {
        let base = t(&[2, 3], &[0.5, -0.2, 0.1, 0.9, -1.0, 0.3]);
        let check = grad_check(
            |g, bias| {
                let x = g.leaf(t(&[2, 3], &[0.5, -0.2, 0.1, 0.9, -1.0, 0.3]));
                let y = g.add(x, bias);
                let sq = g.mul(y, y);
                g.sum(sq, None)
            },
            &t(&[3], &[0.1, 0.2, 0.3]),
            1e-5,
        );
        assert!(check.max_rel_err <= 1e-6, "rel err {}", check.max_rel_err);
        drop(base);
    }

    #[test]
    fn embedding_backward_scatters_rows() {
        let mut g = Graph::new();
        let table = g.leaf(t(&[4, 2], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let e = g.embedding(table, &[3, 3], &[1, 2]);
        assert_eq!(g.shape(e), &[1, 2, 2]);
        let s = g.sum(e, None);
        g.backward(s);
        let grad = g.grad(table).unwrap();
        assert_eq!(grad, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "embedding: id 7 out of range")]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.leaf(t(&[4, 2], &[0.0; 8]));
        g.embedding(table, &[7], &[1]);
    }

    #[test]
    fn conv1d_hand_example() {
        // All-ones kernel, K=3, single channel: [1,2,3] -> [3,6,5] with zero pad.
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let w = g.leaf(t(&[1, 3, 1], &[1.0, 1.0, 1.0]));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b);
        assert_eq!(g.values(y), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 4, 1], &[0.5, -1.5, 2.0, 3.0]));
        let w = g.leaf(t(&[1, 3, 1], &[0.0, 1.0, 0.0]));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b);
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let mk = |seed: u64, n: usize| -> Vec<f64> {
            let mut s = seed;
            (0..n)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect()
        };
        let (b_, t_, cin, f_, k_) = (2usize, 7usize, 4usize, 3usize, 3usize);
        let xv = mk(1, b_ * t_ * cin);
        let wv = mk(2, f_ * k_ * cin);
        let bv = mk(3, f_);

        let xt = t(&[b_, t_, cin], &xv);
        let wt = t(&[f_, k_, cin], &wv);
        let bt = t(&[f_], &bv);

        let cx = grad_check(
            |g, x| {
                let w = g.leaf(wt.clone());
                let b = g.leaf(bt.clone());
                let y = g.conv1d(x, w, b);
                let sq = g.mul(y, y);
                g.sum(sq, None)
            },
            &xt,
            1e-5,
        );
        assert!(cx.max_rel_err <= 1e-5, "x grad rel err {}", cx.max_rel_err);

        let cw = grad_check(
            |g, w| {
                let x = g.leaf(xt.clone());
                let b = g.leaf(bt.clone());
                let y = g.conv1d(x, w, b);
                let sq = g.mul(y, y);
                g.sum(sq, None)
            },
            &wt,
            1e-5,
        );
        assert!(cw.max_rel_err <= 1e-5, "w grad rel err {}", cw.max_rel_err);

        let cb = grad_check(
            |g, b| {
                let x = g.leaf(xt.clone());
                let w = g.leaf(wt.clone());
                let y = g.conv1d(x, w, b);
                let sq = g.mul(y, y);
                g.sum(sq, None)
            },
            &bt,
            1e-5,
        );
        assert!(cb.max_rel_err <= 1e-5, "b grad rel err {}", cb.max_rel_err);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[0.0; 6]));
        let b = g.leaf(t(&[2, 2], &[0.0; 4]));
        g.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "non-scalar loss")]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        g.backward(x);
    }

    #[test]
    #[should_panic(expected = "stale graph")]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let s = g.sum(x, None);
        g.backward(s);
        g.backward(s);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(t(&[3], &[0.1, 0.2, 0.3]).with_grad());
            let e = g.exp(x);
            let l = g.log(e);
            let th = g.tanh(l);
            let s = g.sum(th, None);
            g.backward(s);
            (g.values(s).to_vec(), g.grad(x).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reshape_and_powf_backward() {
        let check = grad_check(
            |g, x| {
                let r = g.reshape(x, &[2, 2]);
                let p = g.powf(r, 3.0);
                g.mean(p, None)
            },
            &t(&[4], &[1.0, 2.0, 0.5, 1.5]),
            1e-5,
        );
        assert!(check.max_rel_err <= 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.5, 2.0, -2.0]).with_grad());
        let c = g.clamp(x, 0.0, 1.0);
        let s = g.sum(c, None);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }
}
