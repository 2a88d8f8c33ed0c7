use super::kernels::{gemm, sigmoid, softplus};
use super::Tensor;
use crate::error::{KtError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Softplus,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Unary {
        a: Var,
        kind: UnaryKind,
    },
    Affine {
        a: Var,
        scale: f64,
    },
    MulConst {
        a: Var,
        factor: Vec<f64>,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        a: Var,
        width: usize,
        inv_std: Vec<f64>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
        width: usize,
    },
    Pick {
        a: Var,
        idx: Vec<usize>,
        width: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
        width: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        offset: usize,
    },
    Reshape {
        a: Var,
    },
    Tile {
        a: Var,
    },
    RepeatElems {
        a: Var,
        times: usize,
    },
    Sum {
        a: Var,
    },
    MemoryWrite {
        memory: Var,
        w: Var,
        erase: Var,
        add: Var,
        slots: usize,
        width: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation tape.
///
/// Every operation appends a node holding its output value together with
/// enough of its inputs to compute local gradients. Nodes only refer to
/// earlier nodes, so the recording order is a topological order.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape on which nothing requires gradients (inference).
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It takes part in differentiation when
    /// `tensor.requires_grad()` is set and the tape has gradients enabled.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad;
        self.nodes.push(Node {
            value: Tensor {
                requires_grad,
                grad: None,
                ..tensor
            },
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Snapshot of the recorded value with its gradient attached.
    pub fn tensor(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = self.grads[v.0].clone();
        t
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ----- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product of `op(a)` and `op(b)` where `op` transposes the last
    /// two axes when the corresponding flag is set. Rank-3 inputs are
    /// treated as batches of matrices with equal batch size.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || KtError::shape("matmul", &sa, &sb);
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(bad());
        }
        let (batch, ra, ca, rb, cb) = if sa.len() == 3 {
            if sa[0] != sb[0] {
                return Err(bad());
            }
            (sa[0], sa[1], sa[2], sb[1], sb[2])
        } else {
            (1, sa[0], sa[1], sb[0], sb[1])
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for t in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &ad[t * m * k..(t + 1) * m * k],
                    ta,
                    &bd[t * k * n..(t + 1) * k * n],
                    tb,
                    0.0,
                    &mut out[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    // ----- elementwise --------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind, name: &'static str) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na = self.value(a).numel();
        let nb = self.value(b).numel();
        let shape = if sa == sb || nb == 1 {
            sa.to_vec()
        } else if na == 1 {
            sb.to_vec()
        } else {
            return Err(KtError::shape(name, sa, sb));
        };
        let n = na.max(nb);
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = ad[if na == 1 { 0 } else { i }];
            let y = bd[if nb == 1 { 0 } else { i }];
            out.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            });
        }
        if kind == BinaryKind::Div && bd.contains(&0.0) {
            return Err(KtError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        Ok(self.push(shape, out, Op::Binary { a, b, kind }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div, "div")
    }

    fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        let x = self.data(a);
        if kind == UnaryKind::Log {
            if let Some(bad) = x.iter().find(|&&v| v <= 0.0) {
                return Err(KtError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Softplus => softplus,
        };
        let out = x.iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Unary { a, kind }, &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Softplus)
    }

    /// `a * scale + shift` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.data(a).iter().map(|&v| v * scale + shift).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Affine { a, scale }, &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Elementwise product with a constant of identical length (masks,
    /// dropout).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(a).numel() {
            return Err(KtError::shape("mul_const", self.shape(a), &[factor.len()]));
        }
        let out = self
            .data(a)
            .iter()
            .zip(&factor)
            .map(|(x, f)| x * f)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MulConst { a, factor }, &[a]))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: rand::Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(KtError::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.data(a).iter().map(|&v| v.clamp(lo, hi)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Clamp { a, lo, hi }, &[a])
    }

    // ----- normalisation ------------------------------------------------

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(KtError::shape("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    /// Normalises each slice along the last axis to zero mean and unit
    /// variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().unwrap();
        let x = self.data(a);
        let rows = x.len() / width;
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(
            shape,
            out,
            Op::LayerNorm {
                a,
                width,
                inv_std,
            },
            &[a],
        )
    }

    // ----- indexing and layout -----------------------------------------

    /// Rows of a 2-D table selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(KtError::shape("gather_rows", &shape, &[idx.len()]));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(KtError::Index {
                what: "embedding table",
                index: bad,
                size: rows,
            });
        }
        let x = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&x[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            vec![idx.len(), width],
            out,
            Op::GatherRows {
                a: table,
                idx: idx.to_vec(),
                width,
            },
            &[table],
        ))
    }

    /// `out[r] = a[r, idx[r]]` for a 2-D `a`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(KtError::shape("pick", &shape, &[idx.len()]));
        }
        let width = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
            return Err(KtError::Index {
                what: "pick column",
                index: bad,
                size: width,
            });
        }
        let x = self.data(a);
        let out = idx.iter().enumerate().map(|(r, &c)| x[r * width + c]).collect();
        Ok(self.push(
            vec![idx.len()],
            out,
            Op::Pick {
                a,
                idx: idx.to_vec(),
                width,
            },
            &[a],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(KtError::shape("concat_cols", self.shape(parts[0]), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.data(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&x[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: parts.iter().copied().zip(widths).collect(),
                rows,
            },
            parts,
        ))
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start >= end || end > shape[1] {
            return Err(KtError::shape("slice_cols", &shape, &[start, end]));
        }
        let (rows, width) = (shape[0], shape[1]);
        let x = self.data(a);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&x[r * width + start..r * width + end]);
        }
        Ok(self.push(
            vec![rows, end - start],
            out,
            Op::SliceCols { a, start, width },
            &[a],
        ))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(KtError::shape("concat_rows", self.shape(parts[0]), s));
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(
            shape,
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Entries `start..end` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[0] {
            return Err(KtError::shape("slice_rows", &shape, &[start, end]));
        }
        let stride: usize = shape[1..].iter().product();
        let out = self.data(a)[start * stride..end * stride].to_vec();
        let mut new_shape = shape.clone();
        new_shape[0] = end - start;
        Ok(self.push(
            new_shape,
            out,
            Op::SliceRows {
                a,
                offset: start * stride,
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(KtError::shape("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, &[a]))
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn tile(&mut self, a: Var, times: usize) -> Var {
        let x = self.data(a);
        let mut out = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            out.extend_from_slice(x);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(a));
        self.push(shape, out, Op::Tile { a }, &[a])
    }

    /// Repeats every element `times` times along a new trailing axis.
    pub fn repeat_elems(&mut self, a: Var, times: usize) -> Var {
        let x = self.data(a);
        let mut out = Vec::with_capacity(x.len() * times);
        for &v in x {
            out.extend(std::iter::repeat_n(v, times));
        }
        let mut shape = self.shape(a).to_vec();
        shape.push(times);
        self.push(shape, out, Op::RepeatElems { a, times }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.push(vec![1], vec![total], Op::Sum { a }, &[a])
    }

    /// Erase-then-add update of a batch of slot memories:
    /// `M'[b,n,:] = M[b,n,:] * (1 - w[b,n] e[b,:]) + w[b,n] a[b,:]` with
    /// `memory: [B, N, d]`, `w: [B, N]`, `erase, add: [B, d]`.
    pub fn memory_write(&mut self, memory: Var, w: Var, erase: Var, add: Var) -> Result<Var> {
        let sm = self.shape(memory).to_vec();
        let sw = self.shape(w).to_vec();
        if sm.len() != 3 || sw != sm[..2] {
            return Err(KtError::shape("memory_write", &sm, &sw));
        }
        let (bsz, slots, width) = (sm[0], sm[1], sm[2]);
        for v in [erase, add] {
            if self.shape(v) != [bsz, width] {
                return Err(KtError::shape("memory_write", &sm, self.shape(v)));
            }
        }
        let (m, wd, ed, ad) = (self.data(memory), self.data(w), self.data(erase), self.data(add));
        let mut out = vec![0.0; m.len()];
        for b in 0..bsz {
            let e = &ed[b * width..(b + 1) * width];
            let a = &ad[b * width..(b + 1) * width];
            for n in 0..slots {
                let wn = wd[b * slots + n];
                let at = (b * slots + n) * width;
                for k in 0..width {
                    out[at + k] = m[at + k] * (1.0 - wn * e[k]) + wn * a[k];
                }
            }
        }
        let op = Op::MemoryWrite {
            memory,
            w,
            erase,
            add,
            slots,
            width,
        };
        Ok(self.push(sm, out, op, &[memory, w, erase, add]))
    }

    // ----- backward -----------------------------------------------------

    /// Propagates gradients of the scalar `loss` to every reachable node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(KtError::Backward(
                "backward already ran; call reset_grads first".into(),
            ));
        }
        if self.is_empty() {
            return Err(KtError::Backward("empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(KtError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![0.0; node.value.numel()])
            .as_mut_slice(),
    )
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let y = &node.value.data;
    let val = |v: Var| nodes[v.0].value.data.as_slice();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
        } => {
            let (ad, bd) = (val(a), val(b));
            if let Some(ga) = slot(nodes, grads, a) {
                for t in 0..batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let bt = &bd[t * k * n..(t + 1) * k * n];
                    let out = &mut ga[t * m * k..(t + 1) * m * k];
                    if ta {
                        // stored a is k x m: op(b) * g^T
                        gemm(k, n, m, 1.0, bt, tb, gt, true, 1.0, out);
                    } else {
                        gemm(m, n, k, 1.0, gt, false, bt, !tb, 1.0, out);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for t in 0..batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let at = &ad[t * m * k..(t + 1) * m * k];
                    let out = &mut gb[t * k * n..(t + 1) * k * n];
                    if tb {
                        // stored b is n x k: g^T * op(a)
                        gemm(n, m, k, 1.0, gt, true, at, ta, 1.0, out);
                    } else {
                        gemm(k, m, n, 1.0, at, !ta, gt, false, 1.0, out);
                    }
                }
            }
        }
        &Op::Binary { a, b, kind } => {
            let (ad, bd) = (val(a), val(b));
            let (na, nb) = (ad.len(), bd.len());
            let av = |j: usize| ad[if na == 1 { 0 } else { j }];
            let bv = |j: usize| bd[if nb == 1 { 0 } else { j }];
            if let Some(ga) = slot(nodes, grads, a) {
                for (j, &gj) in g.iter().enumerate() {
                    let d = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gj,
                        BinaryKind::Mul => gj * bv(j),
                        BinaryKind::Div => gj / bv(j),
                    };
                    ga[if na == 1 { 0 } else { j }] += d;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for (j, &gj) in g.iter().enumerate() {
                    let d = match kind {
                        BinaryKind::Add => gj,
                        BinaryKind::Sub => -gj,
                        BinaryKind::Mul => gj * av(j),
                        BinaryKind::Div => -gj * av(j) / (bv(j) * bv(j)),
                    };
                    gb[if nb == 1 { 0 } else { j }] += d;
                }
            }
        }
        &Op::Unary { a, kind } => {
            let x = val(a);
            if let Some(ga) = slot(nodes, grads, a) {
                for j in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Tanh => 1.0 - y[j] * y[j],
                        UnaryKind::Sigmoid => y[j] * (1.0 - y[j]),
                        UnaryKind::Relu => {
                            if x[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Exp => y[j],
                        UnaryKind::Log => 1.0 / x[j],
                        UnaryKind::Softplus => sigmoid(x[j]),
                    };
                    ga[j] += g[j] * d;
                }
            }
        }
        &Op::Affine { a, scale } => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(o, gj)| *o += gj * scale);
            }
        }
        Op::MulConst { a, factor } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    ga[j] += g[j] * factor[j];
                }
            }
        }
        &Op::Clamp { a, lo, hi } => {
            let x = val(a);
            if let Some(ga) = slot(nodes, grads, a) {
                for j in 0..g.len() {
                    if x[j] >= lo && x[j] <= hi {
                        ga[j] += g[j];
                    }
                }
            }
        }
        &Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { a, width, inv_std } => {
            let width = *width;
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, s) in inv_std.iter().enumerate() {
                    let range = r * width..(r + 1) * width;
                    let gr = &g[range.clone()];
                    let yr = &y[range.clone()];
                    let mean_g = gr.iter().sum::<f64>() / width as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    for (j, o) in ga[range].iter_mut().enumerate() {
                        *o += s * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            }
        }
        Op::GatherRows { a, idx, width } => {
            let width = *width;
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[src * width..(src + 1) * width];
                    for (o, gj) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *o += gj;
                    }
                }
            }
        }
        Op::Pick { a, idx, width } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &c) in idx.iter().enumerate() {
                    ga[r * width + c] += g[r];
                }
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, w) in parts {
                if let Some(gp) = slot(nodes, grads, p) {
                    for r in 0..*rows {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        &Op::SliceCols { a, start, width } => {
            if let Some(ga) = slot(nodes, grads, a) {
                let w = node.value.shape[1];
                for r in 0..node.value.shape[0] {
                    for c in 0..w {
                        ga[r * width + start + c] += g[r * w + c];
                    }
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                if let Some(gp) = slot(nodes, grads, p) {
                    for (o, gj) in gp.iter_mut().zip(&g[offset..offset + len]) {
                        *o += gj;
                    }
                }
                offset += len;
            }
        }
        &Op::SliceRows { a, offset } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (o, gj) in ga[offset..offset + g.len()].iter_mut().zip(g) {
                    *o += gj;
                }
            }
        }
        &Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(g).for_each(|(o, gj)| *o += gj);
            }
        }
        &Op::Tile { a } => {
            if let Some(ga) = slot(nodes, grads, a) {
                let len = ga.len();
                for chunk in g.chunks(len) {
                    ga.iter_mut().zip(chunk).for_each(|(o, gj)| *o += gj);
                }
            }
        }
        &Op::RepeatElems { a, times } => {
            if let Some(ga) = slot(nodes, grads, a) {
                for (o, chunk) in ga.iter_mut().zip(g.chunks(times)) {
                    *o += chunk.iter().sum::<f64>();
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        &Op::MemoryWrite {
            memory,
            w,
            erase,
            add,
            slots,
            width,
        } => {
            let (m, wd, ed, ad) = (val(memory), val(w), val(erase), val(add));
            let bsz = wd.len() / slots;
            if let Some(gm) = slot(nodes, grads, memory) {
                for b in 0..bsz {
                    let e = &ed[b * width..(b + 1) * width];
                    for n in 0..slots {
                        let wn = wd[b * slots + n];
                        let at = (b * slots + n) * width;
                        for k in 0..width {
                            gm[at + k] += g[at + k] * (1.0 - wn * e[k]);
                        }
                    }
                }
            }
            if let Some(gw) = slot(nodes, grads, w) {
                for b in 0..bsz {
                    let e = &ed[b * width..(b + 1) * width];
                    let a = &ad[b * width..(b + 1) * width];
                    for n in 0..slots {
                        let at = (b * slots + n) * width;
                        let mut acc = 0.0;
                        for k in 0..width {
                            acc += g[at + k] * (a[k] - m[at + k] * e[k]);
                        }
                        gw[b * slots + n] += acc;
                    }
                }
            }
            if let Some(ge) = slot(nodes, grads, erase) {
                for b in 0..bsz {
                    for n in 0..slots {
                        let wn = wd[b * slots + n];
                        let at = (b * slots + n) * width;
                        for k in 0..width {
                            ge[b * width + k] -= g[at + k] * m[at + k] * wn;
                        }
                    }
                }
            }
            if let Some(ga) = slot(nodes, grads, add) {
                for b in 0..bsz {
                    for n in 0..slots {
                        let wn = wd[b * slots + n];
                        let at = (b * slots + n) * width;
                        for k in 0..width {
                            ga[b * width + k] += g[at + k] * wn;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn param(shape: &[usize], data: &[f64]) -> Tensor {
        t(shape, data).with_requires_grad(true)
    }

    /// Central-difference check of `d loss / d inputs` for a graph built by
    /// `build` from leaves holding `inputs`.
    fn check_grad(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let eval = |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let loss = build(&mut tape, &vars);
            tape.data(loss)[0]
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.numel()]);
            for i in 0..x.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[i];
                let scale = a.abs().max(numeric.abs()).max(1e-3);
                assert!((a - numeric).abs() / scale < 1e-5, "input {k}[{i}]: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Weighted sum so that every output element gets a distinct gradient.
    fn weigh(tape: &mut Tape, v: Var) -> Var {
        let n = tape.value(v).numel();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64 - 0.01 * (i * i) as f64).collect();
        let m = tape.mul_const(v, w).unwrap();
        tape.sum(m)
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.data(p), &[1.0, 2.0, 3.0, 4.0]);
        let x = tape.leaf(t(&[1, 2], &[1.0, 1.0]));
        let y = tape.leaf(t(&[2, 1], &[1.0, -1.0]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.data(z), &[0.0]);
        let bad = tape.leaf(t(&[3, 1], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.matmul(a, bad), Err(KtError::Shape { .. })));
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.data(s), &[0.5]);
        let m = tape.leaf(t(&[1], &[-3.0]));
        let r = tape.relu(m).unwrap();
        assert_eq!(tape.data(r), &[0.0]);
        let big = tape.leaf(t(&[2], &[800.0, -800.0]));
        let s = tape.sigmoid(big).unwrap();
        assert_eq!(tape.data(s), &[1.0, 0.0]);
        let sp = tape.softplus(big).unwrap();
        assert_eq!(tape.data(sp), &[800.0, 0.0]);
        let neg = tape.leaf(t(&[1], &[0.0]));
        assert!(matches!(tape.log(neg), Err(KtError::Domain { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(z, 0).unwrap();
        for &v in tape.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.leaf(t(&[3], &[1000.0, 1001.0, 1002.0]));
        let s = tape.softmax(big, 0).unwrap();
        let total: f64 = tape.data(s).iter().sum();
        assert!(tape.data(s).iter().all(|v| v.is_finite()));
        assert!((total - 1.0).abs() < 1e-12);
        let e = [(-2.0f64).exp(), (-1.0f64).exp(), 1.0];
        let z: f64 = e.iter().sum();
        for (v, w) in tape.data(s).iter().zip(e) {
            assert!((v - w / z).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_entries_are_exact_zeros() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[2, 3], &[0.3, -1e9, -1e9, 0.1, 0.2, -1e9]));
        let s = tape.softmax(z, 1).unwrap();
        assert_eq!(tape.data(s)[..3], [1.0, 0.0, 0.0]);
        assert_eq!(tape.data(s)[5], 0.0);
    }

    #[test]
    fn backward_simple_graphs() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(param(&[1], &[3.0]));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        assert!(matches!(tape.backward(sq), Err(KtError::Backward(_))));
        tape.reset_grads();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        let mut empty = Tape::new();
        assert!(matches!(empty.backward(Var(0)), Err(KtError::Backward(_))));
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        let x0 = [0.4, -1.2, 2.0];
        let grad_of = |c: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(param(&[3], &x0));
            let y = tape.tanh(x).unwrap();
            let z = tape.mul(y, x).unwrap();
            let s = tape.sum(z);
            let l = tape.scale(s, c);
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (g1, g3) = (grad_of(1.0), grad_of(3.0));
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tanh_derivative_matches_difference_quotient() {
        for &z in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let mut tape = Tape::new();
            let x = tape.leaf(param(&[1], &[z]));
            let y = tape.tanh(x).unwrap();
            tape.backward(y).unwrap();
            let h = 1e-6;
            let numeric = ((z + h).tanh() - (z - h).tanh()) / (2.0 * h);
            assert!((tape.grad(x).unwrap()[0] - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn no_grad_tape_records_no_gradients() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(param(&[2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn elementwise_gradients() {
        let a = param(&[2, 3], &[0.5, -1.0, 2.0, 0.1, 1.5, -0.7]);
        let b = param(&[2, 3], &[1.2, 0.3, -0.4, 2.2, -1.1, 0.9]);
        let s = param(&[1], &[0.8]);
        check_grad(&[a.clone(), b.clone()], |tp, v| {
            let x = tp.add(v[0], v[1]).unwrap();
            let y = tp.sub(x, v[1]).unwrap();
            let y = tp.mul(y, v[1]).unwrap();
            let z = tp.div(y, v[0]).unwrap();
            let z = tp.add(z, v[0]).unwrap();
            weigh(tp, z)
        });
        check_grad(&[a.clone(), s], |tp, v| {
            let x = tp.mul(v[0], v[1]).unwrap();
            let y = tp.div(v[1], x).unwrap();
            let z = tp.sub(y, v[1]).unwrap();
            weigh(tp, z)
        });
        check_grad(&[a], |tp, v| {
            let x1 = tp.tanh(v[0]).unwrap();
            let x2 = tp.sigmoid(v[0]).unwrap();
            let x3 = tp.relu(v[0]).unwrap();
            let x4 = tp.exp(v[0]).unwrap();
            let x5 = tp.softplus(v[0]).unwrap();
            let x6 = tp.affine(v[0], -0.5, 3.0);
            let x6 = tp.log(x6).unwrap();
            let x7 = tp.clamp(v[0], -0.8, 1.0);
            let mut acc = x1;
            for x in [x2, x3, x4, x5, x6, x7] {
                acc = tp.add(acc, x).unwrap();
            }
            weigh(tp, acc)
        });
    }

    #[test]
    fn matmul_gradients_all_layouts() {
        let a = param(&[2, 3], &[0.5, -1.0, 2.0, 0.1, 1.5, -0.7]);
        let b = param(&[3, 2], &[1.2, 0.3, -0.4, 2.2, -1.1, 0.9]);
        let bt = param(&[2, 3], &[1.2, -0.4, -1.1, 0.3, 2.2, 0.9]);
        check_grad(&[a.clone(), b.clone()], |tp, v| {
            let p = tp.matmul(v[0], v[1]).unwrap();
            weigh(tp, p)
        });
        check_grad(&[a.clone(), bt.clone()], |tp, v| {
            let p = tp.matmul_t(v[0], v[1], false, true).unwrap();
            weigh(tp, p)
        });
        check_grad(&[b.clone(), bt.clone()], |tp, v| {
            let p = tp.matmul_t(v[0], v[1], true, true).unwrap();
            weigh(tp, p)
        });
        check_grad(&[a.clone(), bt], |tp, v| {
            let p = tp.matmul_t(v[0], v[1], true, false).unwrap();
            weigh(tp, p)
        });
        let a3 = param(&[2, 2, 3], &[0.5, -1.0, 2.0, 0.1, 1.5, -0.7, 0.3, 0.2, -0.9, 1.1, 0.4, -0.2]);
        let b3 = param(&[2, 3, 2], &[1.2, 0.3, -0.4, 2.2, -1.1, 0.9, 0.6, -0.5, 0.8, 0.1, -0.3, 0.7]);
        check_grad(&[a3.clone(), b3], |tp, v| {
            let p = tp.matmul(v[0], v[1]).unwrap();
            weigh(tp, p)
        });
        check_grad(&[a3.clone(), a3], |tp, v| {
            let p = tp.matmul_t(v[0], v[1], false, true).unwrap();
            weigh(tp, p)
        });
    }

    #[test]
    fn normalisation_gradients() {
        let a = param(&[2, 2, 3], &[0.5, -1.0, 2.0, 0.1, 1.5, -0.7, 0.3, 0.2, -0.9, 1.1, 0.4, -0.2]);
        for axis in 0..3 {
            check_grad(std::slice::from_ref(&a), |tp, v| {
                let s = tp.softmax(v[0], axis).unwrap();
                weigh(tp, s)
            });
        }
        check_grad(&[a], |tp, v| {
            let s = tp.layer_norm(v[0], 1e-8);
            weigh(tp, s)
        });
    }

    #[test]
    fn layout_gradients() {
        let table = param(&[4, 2], &[0.5, -1.0, 2.0, 0.1, 1.5, -0.7, 0.3, 0.2]);
        let m = param(&[3, 2], &[1.2, 0.3, -0.4, 2.2, -1.1, 0.9]);
        check_grad(&[table.clone(), m.clone()], |tp, v| {
            let g = tp.gather_rows(v[0], &[3, 0, 3, 1]).unwrap();
            let p = tp.pick(v[0], &[1, 0, 0, 1]).unwrap();
            let c = tp.concat_cols(&[g, v[0]]).unwrap();
            let s = tp.slice_cols(c, 1, 3).unwrap();
            let r = tp.concat_rows(&[s, v[1]]).unwrap();
            let r = tp.slice_rows(r, 2, 6).unwrap();
            let r = tp.reshape(r, &[8]).unwrap();
            let pr = tp.repeat_elems(p, 2);
            let pr = tp.reshape(pr, &[8]).unwrap();
            let x = tp.mul(r, pr).unwrap();
            let tl = tp.tile(x, 3);
            weigh(tp, tl)
        });
    }

    #[test]
    fn memory_write_gradients() {
        let m = param(&[2, 3, 2], &[0.5, -1.0, 2.0, 0.1, 1.5, -0.7, 0.3, 0.2, -0.9, 1.1, 0.4, -0.2]);
        let w = param(&[2, 3], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]);
        let e = param(&[2, 2], &[0.4, 0.9, 0.7, 0.2]);
        let a = param(&[2, 2], &[-0.3, 0.8, 0.5, -0.6]);
        check_grad(&[m, w, e, a], |tp, v| {
            let out = tp.memory_write(v[0], v[1], v[2], v[3]).unwrap();
            weigh(tp, out)
        });
    }

    #[test]
    fn index_errors() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert!(matches!(tape.gather_rows(table, &[2]), Err(KtError::Index { .. })));
        assert!(tape.pick(table, &[0, 5]).is_err());
        let zero = tape.leaf(t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]));
        assert!(matches!(tape.div(table, zero), Err(KtError::Domain { .. })));
    }

    #[test]
    fn dropout_is_seeded_and_unbiased_in_scale() {
        let run = |seed| {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[1000], &[1.0; 1000]));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = tape.dropout(x, 0.25, &mut rng).unwrap();
            tape.data(y).to_vec()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert_ne!(a, run(8));
        assert!(a.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let mean = a.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1);
    }
}
