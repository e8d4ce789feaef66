use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::{gemm, MatRef};
use super::{strides, Tensor, TensorId};
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Primitive kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    MatMul,
    Transpose,
    Sum,
    Mean,
    Max,
    Reshape,
    Concat,
    Narrow,
    Conv1d,
    BatchNorm,
    MaxPool1d,
}

/// Deliberately scales the input gradients produced by one primitive's
/// backward rule. Exists so gradient checking has a negative control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Sum {
        a: Var,
        axis: Option<usize>,
    },
    Mean {
        a: Var,
        axis: Option<usize>,
    },
    Max {
        a: Var,
        // flat input index feeding each output element
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Max { .. } => OpKind::Max,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::MaxPool1d { .. } => OpKind::MaxPool1d,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len_in: usize,
    len_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ConvGeom { c_in, len_in, len_out, kernel, stride, padding, dilation, .. } = *self;
        for ci in 0..c_in {
            let xrow = &x[ci * len_in..(ci + 1) * len_in];
            for kk in 0..kernel {
                let row = &mut cols[(ci * kernel + kk) * len_out..(ci * kernel + kk + 1) * len_out];
                let offset = (kk * dilation) as isize - padding as isize;
                for (lo, c) in row.iter_mut().enumerate() {
                    let pos = (lo * stride) as isize + offset;
                    *c = if pos >= 0 && (pos as usize) < len_in { xrow[pos as usize] } else { 0.0 };
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let ConvGeom { c_in, len_in, len_out, kernel, stride, padding, dilation, .. } = *self;
        for ci in 0..c_in {
            let xrow = &mut dx[ci * len_in..(ci + 1) * len_in];
            for kk in 0..kernel {
                let row = &cols[(ci * kernel + kk) * len_out..(ci * kernel + kk + 1) * len_out];
                let offset = (kk * dilation) as isize - padding as isize;
                for (lo, c) in row.iter().enumerate() {
                    let pos = (lo * stride) as isize + offset;
                    if pos >= 0 && (pos as usize) < len_in {
                        xrow[pos as usize] += c;
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended as they are
/// computed, so the record is always in topological order.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    bindings: HashMap<TensorId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<BackwardFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        Tape {
            id: NEXT.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bindings: HashMap::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        let mut tape = Self::new();
        tape.fault = Some(fault);
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "Var used on a tape that did not record it");
        &self.nodes[v.index]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.node(v).op.kind()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are well-formed")
    }

    /// Gradient of the last backward pass's loss w.r.t. `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.tape, self.id, "Var used on a tape that did not record it");
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|&i| self.node(i).requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// Records `t` as a leaf. Trainable tensors are bound by identity, so
    /// using the same parameter twice yields one node whose gradient sums
    /// both uses.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if t.requires_grad() {
            if let Some(&v) = self.bindings.get(&t.id()) {
                return v;
            }
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        let v = Var { tape: self.id, index: self.nodes.len() - 1 };
        if t.requires_grad() {
            self.bindings.insert(t.id(), v);
        }
        v
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Var bound to `t` on this tape, if `t` was recorded as a trainable leaf.
    pub fn binding(&self, t: &Tensor) -> Option<Var> {
        self.bindings.get(&t.id()).copied()
    }

    /// Accumulates this tape's gradient for `t` into `t.grad`. Returns
    /// whether a gradient was available.
    pub fn write_grad(&self, t: &mut Tensor) -> Result<bool> {
        match self.binding(t).and_then(|v| self.grad(v)) {
            Some(g) => {
                t.accumulate_grad(g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        if sa == sb {
            return Ok((sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()));
        }
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::contract(format!("{name}: shapes {sa:?} and {sb:?} do not broadcast")))?;
        let mut value = vec![0.0; out.iter().product()];
        for_each_broadcast(&out, &broadcast_strides(&sa, &out), &broadcast_strides(&sb, &out), |o, ia, ib| {
            value[o] = f(va[ia], vb[ib]);
        });
        Ok((out, value))
    }

    /// Elementwise sum with trailing-dimension (numpy-style) broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(shape, value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(shape, value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(shape, value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Sigmoid(a), &[a])
    }

    // ----- linear algebra ----------------------------------------------

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} and {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::row_major(self.value(a), k),
            MatRef::row_major(self.value(b), n),
            0.0,
            &mut value,
        );
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        ensure!(s.len() == 2, "transpose expects a matrix, got shape {s:?}");
        let (rows, cols) = (s[0], s[1]);
        let va = self.value(a);
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                value[c * rows + r] = va[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], value, Op::Transpose { a, rows, cols }, &[a]))
    }

    // ----- reductions --------------------------------------------------

    fn reduce_dims(&self, a: Var, axis: Option<usize>, name: &str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape(a);
        match axis {
            None => Ok((1, s.iter().product(), 1, vec![])),
            Some(ax) => {
                ensure!(ax < s.len(), "{name}: axis {ax} out of range for shape {s:?}");
                let outer = s[..ax].iter().product();
                let inner = s[ax + 1..].iter().product();
                let mut out = s.to_vec();
                out.remove(ax);
                Ok((outer, s[ax], inner, out))
            }
        }
    }

    fn reduce_sum(&self, a: Var, outer: usize, len: usize, inner: usize) -> Vec<f64> {
        let va = self.value(a);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..len {
                let src = &va[(o * len + r) * inner..(o * len + r + 1) * inner];
                value[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        value
    }

    /// Sum over `axis` (removing it) or over all elements when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (outer, len, inner, shape) = self.reduce_dims(a, axis, "sum")?;
        let value = self.reduce_sum(a, outer, len, inner);
        Ok(self.push(shape, value, Op::Sum { a, axis }, &[a]))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (outer, len, inner, shape) = self.reduce_dims(a, axis, "mean")?;
        let mut value = self.reduce_sum(a, outer, len, inner);
        value.iter_mut().for_each(|v| *v /= len as f64);
        Ok(self.push(shape, value, Op::Mean { a, axis }, &[a]))
    }

    /// Maximum over `axis`. The backward pass routes the gradient to the
    /// first maximal element of each reduced slice.
    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (outer, len, inner, shape) = self.reduce_dims(a, axis, "max")?;
        let va = self.value(a);
        let mut value = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                for r in 0..len {
                    let idx = (o * len + r) * inner + i;
                    if r == 0 || va[idx] > value[slot] {
                        value[slot] = va[idx];
                        argmax[slot] = idx;
                    }
                }
            }
        }
        Ok(self.push(shape, value, Op::Max { a, argmax }, &[a]))
    }

    // ----- shape manipulation ------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.value(a).len() && shape.iter().all(|&d| d > 0),
            "reshape: cannot view {:?} as {shape:?}",
            self.shape(a)
        );
        let value = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat of zero tensors");
        let first = self.shape(inputs[0]).to_vec();
        ensure!(axis < first.len(), "concat: axis {axis} out of range for {first:?}");
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y),
                "concat: shape {s:?} incompatible with {first:?} along axis {axis}"
            );
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(axis < s.len(), "narrow: axis {axis} out of range for {s:?}");
        ensure!(len > 0 && start + len <= s[axis], "narrow: [{start}, {}) exceeds {}", start + len, s[axis]);
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let va = self.value(a);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            value.extend_from_slice(&va[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, value, Op::Narrow { a, axis, start }, &[a]))
    }

    // ----- neural primitives -------------------------------------------

    /// 1D cross-correlation with zero padding.
    /// `x: [B, C_in, L]`, `w: [C_out, C_in, K]`, `b: [C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure!(sx.len() == 3, "conv1d: input must be [B, C, L], got {sx:?}");
        ensure!(sw.len() == 3, "conv1d: weight must be [C_out, C_in, K], got {sw:?}");
        ensure!(sx[1] == sw[1], "conv1d: input has {} channels, weight expects {}", sx[1], sw[1]);
        ensure!(stride > 0 && dilation > 0, "conv1d: stride and dilation must be positive");
        if let Some(b) = b {
            ensure!(self.shape(b) == [sw[0]], "conv1d: bias shape {:?} != [{}]", self.shape(b), sw[0]);
        }
        let len_out = conv_len(sx[2], sw[2], stride, padding, dilation).ok_or_else(|| {
            Error::contract(format!(
                "conv1d: input length {} too short for kernel {} (stride {stride}, padding {padding}, dilation {dilation})",
                sx[2], sw[2]
            ))
        })?;
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            len_in: sx[2],
            len_out,
            kernel: sw[2],
            stride,
            padding,
            dilation,
        };
        let ck = geom.c_in * geom.kernel;
        let vx = self.value(x);
        let vw = self.value(w);
        let mut value = vec![0.0; geom.batch * geom.c_out * len_out];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; ck * len_out] };
        for bi in 0..geom.batch {
            let xb = &vx[bi * geom.c_in * geom.len_in..(bi + 1) * geom.c_in * geom.len_in];
            let cols_ref: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                geom.im2col(xb, &mut cols);
                &cols
            };
            let out = &mut value[bi * geom.c_out * len_out..(bi + 1) * geom.c_out * len_out];
            gemm(
                geom.c_out,
                ck,
                len_out,
                1.0,
                MatRef::row_major(vw, ck),
                MatRef::row_major(cols_ref, len_out),
                0.0,
                out,
            );
            if let Some(b) = b {
                let vb = self.value(b);
                for (co, row) in out.chunks_mut(len_out).enumerate() {
                    row.iter_mut().for_each(|v| *v += vb[co]);
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(vec![geom.batch, geom.c_out, len_out], value, Op::Conv1d { x, w, b, geom }, &inputs))
    }

    /// Batch normalization over `[B, C, L]` (or `[B, C]`) per channel.
    ///
    /// With `running: None` the batch statistics are used and returned as
    /// `(mean, biased variance)` so the caller can update its running
    /// estimates. With `running: Some((mean, var))` the given statistics
    /// are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 2 || s.len() == 3, "batch_norm: expected [B, C, L] or [B, C], got {s:?}");
        let (batch, ch) = (s[0], s[1]);
        let len = if s.len() == 3 { s[2] } else { 1 };
        ensure!(
            self.shape(gamma) == [ch] && self.shape(beta) == [ch],
            "batch_norm: affine parameters must have shape [{ch}]"
        );
        let count = batch * len;
        let vx = self.value(x);
        let (mean, var, batch_stats) = match running {
            None => {
                ensure!(count >= 2, "batch_norm: batch statistics need at least 2 values per channel, got {count}");
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut acc = 0.0;
                    for bi in 0..batch {
                        acc += vx[(bi * ch + c) * len..(bi * ch + c + 1) * len].iter().sum::<f64>();
                    }
                    mean[c] = acc / count as f64;
                    let mut sq = 0.0;
                    for bi in 0..batch {
                        sq += vx[(bi * ch + c) * len..(bi * ch + c + 1) * len]
                            .iter()
                            .map(|v| (v - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                    var[c] = sq / count as f64;
                }
                (mean, var, true)
            }
            Some((m, v)) => {
                ensure!(m.len() == ch && v.len() == ch, "batch_norm: running statistics must have {ch} entries");
                (m.to_vec(), v.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; vx.len()];
        let mut value = vec![0.0; vx.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let range = (bi * ch + c) * len..(bi * ch + c + 1) * len;
                for i in range {
                    xhat[i] = (vx[i] - mean[c]) * inv_std[c];
                    value[i] = vg[c] * xhat[i] + vb[c];
                }
            }
        }
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats };
        let out = self.push(s, value, op, &[x, gamma, beta]);
        Ok((out, batch_stats.then_some((mean, var))))
    }

    /// Windowed maximum over the last axis of `[B, C, L]`; padding acts as
    /// negative infinity.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 3, "max_pool1d: expected [B, C, L], got {s:?}");
        ensure!(kernel > 0 && stride > 0, "max_pool1d: kernel and stride must be positive");
        ensure!(padding * 2 <= kernel, "max_pool1d: padding {padding} exceeds half the kernel {kernel}");
        let len = s[2];
        let len_out = conv_len(len, kernel, stride, padding, 1)
            .ok_or_else(|| Error::contract(format!("max_pool1d: input length {len} yields an empty output")))?;
        let vx = self.value(x);
        let rows = s[0] * s[1];
        let mut value = vec![0.0; rows * len_out];
        let mut argmax = vec![0; rows * len_out];
        for r in 0..rows {
            for lo in 0..len_out {
                let start = (lo * stride) as isize - padding as isize;
                let lo_idx = start.max(0) as usize;
                let hi_idx = ((start + kernel as isize) as usize).min(len);
                let mut best = r * len + lo_idx;
                for p in lo_idx..hi_idx {
                    if vx[r * len + p] > vx[best] {
                        best = r * len + p;
                    }
                }
                value[r * len_out + lo] = vx[best];
                argmax[r * len_out + lo] = best;
            }
        }
        Ok(self.push(vec![s[0], s[1], len_out], value, Op::MaxPool1d { x, argmax }, &[x]))
    }

    // ----- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients from earlier passes are
    /// discarded, so repeated calls produce identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.node(loss);
        ensure!(n.value.len() == 1, "backward: loss must be scalar, got shape {:?}", n.shape);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink { nodes: &self.nodes, grads: &mut grads, fault: self.fault, kind: node.op.kind() };
            backward_node(node, &g, &self.nodes, &mut sink);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    fault: Option<BackwardFault>,
    kind: OpKind,
}

impl GradSink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn add(&mut self, v: Var, mut contrib: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        if let Some(f) = self.fault.filter(|f| f.op == self.kind) {
            contrib.iter_mut().for_each(|c| *c *= f.factor);
        }
        match &mut self.grads[v.index] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }
}

fn backward_node(node: &Node, g: &[f64], nodes: &[Node], sink: &mut GradSink<'_>) {
    let val = |v: Var| -> &[f64] { &nodes[v.index].value };
    let shp = |v: Var| -> &[usize] { &nodes[v.index].shape };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if sink.wants(*a) {
                sink.add(*a, unbroadcast(g, &node.shape, shp(*a), |gi, _| gi));
            }
            if sink.wants(*b) {
                sink.add(*b, unbroadcast(g, &node.shape, shp(*b), |gi, _| sign * gi));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (sa, sb) = (shp(*a), shp(*b));
            if sa == sb {
                if sink.wants(*a) {
                    sink.add(*a, g.iter().zip(vb).map(|(gi, y)| gi * y).collect());
                }
                if sink.wants(*b) {
                    sink.add(*b, g.iter().zip(va).map(|(gi, x)| gi * x).collect());
                }
            } else {
                let ta = broadcast_strides(sa, &node.shape);
                let tb = broadcast_strides(sb, &node.shape);
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for_each_broadcast(&node.shape, &ta, &tb, |o, ia, ib| {
                    ga[ia] += g[o] * vb[ib];
                    gb[ib] += g[o] * va[ia];
                });
                sink.add(*a, ga);
                sink.add(*b, gb);
            }
        }
        Op::Scale(a, f) => sink.add(*a, g.iter().map(|gi| gi * f).collect()),
        Op::Relu(a) => sink.add(*a, g.iter().zip(val(*a)).map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 }).collect()),
        Op::Sigmoid(a) => sink.add(*a, g.iter().zip(&node.value).map(|(gi, y)| gi * y * (1.0 - y)).collect()),
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if sink.wants(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, 1.0, MatRef::row_major(g, n), MatRef::transposed(val(*b), n), 0.0, &mut ga);
                sink.add(*a, ga);
            }
            if sink.wants(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, 1.0, MatRef::transposed(val(*a), k), MatRef::row_major(g, n), 0.0, &mut gb);
                sink.add(*b, gb);
            }
        }
        Op::Transpose { a, rows, cols } => {
            let mut ga = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    ga[r * cols + c] = g[c * rows + r];
                }
            }
            sink.add(*a, ga);
        }
        Op::Sum { a, axis } | Op::Mean { a, axis } => {
            let s = shp(*a);
            let (outer, len, inner) = match axis {
                None => (1, s.iter().product(), 1),
                Some(ax) => (s[..*ax].iter().product(), s[*ax], s[*ax + 1..].iter().product()),
            };
            let scale = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for r in 0..len {
                    let dst = &mut ga[(o * len + r) * inner..(o * len + r + 1) * inner];
                    dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, gi)| *d = gi * scale);
                }
            }
            sink.add(*a, ga);
        }
        Op::Max { a, argmax } | Op::MaxPool1d { x: a, argmax } => {
            let mut ga = vec![0.0; val(*a).len()];
            for (gi, &idx) in g.iter().zip(argmax) {
                ga[idx] += gi;
            }
            sink.add(*a, ga);
        }
        Op::Reshape(a) => sink.add(*a, g.to_vec()),
        Op::Concat { inputs, axis } => {
            let outer: usize = node.shape[..*axis].iter().product();
            let inner: usize = node.shape[axis + 1..].iter().product();
            let total = node.shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let chunk = shp(v)[*axis] * inner;
                if sink.wants(v) {
                    let mut gv = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        gv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    sink.add(v, gv);
                }
                offset += chunk;
            }
        }
        Op::Narrow { a, axis, start } => {
            let s = shp(*a);
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = node.shape[*axis];
            let mut ga = vec![0.0; val(*a).len()];
            for o in 0..outer {
                let base = (o * s[*axis] + start) * inner;
                ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            sink.add(*a, ga);
        }
        Op::Conv1d { x, w, b, geom } => conv1d_backward(g, *x, *w, *b, geom, nodes, sink),
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let s = &node.shape;
            let (batch, ch) = (s[0], s[1]);
            let len = if s.len() == 3 { s[2] } else { 1 };
            let count = (batch * len) as f64;
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            for bi in 0..batch {
                for c in 0..ch {
                    for i in (bi * ch + c) * len..(bi * ch + c + 1) * len {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
            }
            if sink.wants(*x) {
                let vg = val(*gamma);
                let mut gx = vec![0.0; g.len()];
                for bi in 0..batch {
                    for c in 0..ch {
                        let k = vg[c] * inv_std[c];
                        for i in (bi * ch + c) * len..(bi * ch + c + 1) * len {
                            gx[i] = if *batch_stats {
                                k * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                sink.add(*x, gx);
            }
            sink.add(*gamma, sum_gx);
            sink.add(*beta, sum_g);
        }
    }
}

fn conv1d_backward(g: &[f64], x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, nodes: &[Node], sink: &mut GradSink<'_>) {
    let ck = geom.c_in * geom.kernel;
    let (lo, co) = (geom.len_out, geom.c_out);
    let vx = &nodes[x.index].value;
    let vw = &nodes[w.index].value;
    let want_x = sink.wants(x);
    let want_w = sink.wants(w);
    let mut gx = if want_x { vec![0.0; vx.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![0.0; vw.len()] } else { Vec::new() };
    let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { ck * lo }];
    let mut dcols = vec![0.0; if geom.is_pointwise() || !want_x { 0 } else { ck * lo }];
    for bi in 0..geom.batch {
        let gb = &g[bi * co * lo..(bi + 1) * co * lo];
        let xb = &vx[bi * geom.c_in * geom.len_in..(bi + 1) * geom.c_in * geom.len_in];
        if want_w {
            let cols_ref: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                geom.im2col(xb, &mut cols);
                &cols
            };
            gemm(co, lo, ck, 1.0, MatRef::row_major(gb, lo), MatRef::transposed(cols_ref, lo), 1.0, &mut gw);
        }
        if want_x {
            let gxb = &mut gx[bi * geom.c_in * geom.len_in..(bi + 1) * geom.c_in * geom.len_in];
            if geom.is_pointwise() {
                gemm(ck, co, lo, 1.0, MatRef::transposed(vw, ck), MatRef::row_major(gb, lo), 1.0, gxb);
            } else {
                gemm(ck, co, lo, 1.0, MatRef::transposed(vw, ck), MatRef::row_major(gb, lo), 0.0, &mut dcols);
                geom.col2im_add(&dcols, gxb);
            }
        }
    }
    if want_x {
        sink.add(x, gx);
    }
    if want_w {
        sink.add(w, gw);
    }
    if let Some(b) = b {
        if sink.wants(b) {
            let mut gbias = vec![0.0; co];
            for bi in 0..geom.batch {
                for c in 0..co {
                    gbias[c] += g[(bi * co + c) * lo..(bi * co + c + 1) * lo].iter().sum::<f64>();
                }
            }
            sink.add(b, gbias);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `floor((len + 2p − d(k−1) − 1)/s) + 1`, or `None` when no output remains.
pub fn conv_len(len: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` laid over `out`, zero along broadcast dimensions.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - src.len();
    let st = strides(src);
    (0..out.len())
        .map(|i| if i < pad || src[i - pad] == 1 { 0 } else { st[i - pad] })
        .collect()
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0; rank];
    let (mut ia, mut ib) = (0, 0);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `g` (shaped like `out`) down to `src` over its broadcast axes.
fn unbroadcast(g: &[f64], out: &[usize], src: &[usize], f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    if out == src {
        return g.iter().enumerate().map(|(i, &gi)| f(gi, i)).collect();
    }
    let n: usize = src.iter().product();
    let mut acc = vec![0.0; n];
    let st = broadcast_strides(src, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &st, &zeros, |o, i, _| acc[i] += f(g[o], i));
    acc
}
