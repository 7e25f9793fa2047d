use super::gemm::{gemm, Strided};
use super::Tensor;
use crate::error::{Result, SrplError};

/// Target value excluded from the cross-entropy mean.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Additive score for masked (future) keys in causal attention.
pub const MASK_VALUE: f64 = -1e30;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One packed sequence seen by the causal attention op.
///
/// Keys/values for the sequence occupy rows `key_start..key_start + key_len`.
/// Queries occupy rows `query_start..query_start + query_pos.len()` of the
/// query matrix; `query_pos[i]` is the in-sequence position of query row `i`,
/// so key `j` is visible to it iff `j <= query_pos[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnSegment {
    pub key_start: usize,
    pub key_len: usize,
    pub query_start: usize,
    pub query_pos: Vec<usize>,
}

impl AttnSegment {
    /// Full causal self-attention over `len` rows starting at `start`.
    pub fn full(start: usize, len: usize) -> Self {
        AttnSegment {
            key_start: start,
            key_len: len,
            query_start: start,
            query_pos: (0..len).collect(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Sum { a: Var },
    Gelu { a: Var, tanh: Vec<f64> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    Rotate(Box<RotateOp>),
    Attention(Box<AttentionOp>),
    SoftmaxRows { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct RotateOp {
    x: Var,
    omega: Var,
    amplitude: Var,
    phase: Var,
    positions: Vec<usize>,
}

#[derive(Debug)]
struct AttentionOp {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<AttnSegment>,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Dynamic reverse-mode tape, rebuilt for every forward pass.
///
/// Not `Sync`-shared: one tape belongs to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (shape.iter().product::<usize>() / cols, cols)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn gelu_tanh(x: f64) -> f64 {
    (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh()
}

/// Derivative of the tanh-GELU given `t = gelu_tanh(x)`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape; it receives gradients iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.iter().all(|v| v.is_finite()) {
            return Err(SrplError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Clears leaf gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(SrplError::Dimension {
                op,
                lhs: s.clone(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(SrplError::Dimension {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(SrplError::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &self.nodes[a.0].value,
            Strided::new(0, k, 1),
            &self.nodes[b.0].value,
            Strided::new(0, n, 1),
            0.0,
            &mut out,
            Strided::new(0, n, 1),
        );
        self.push("matmul", vec![m, n], out, &[a, b], Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("add", shape, out, &[a, b], Op::Add { a, b })
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(&self.nodes[a.0].shape);
        if self.nodes[bias.0].value.len() != cols {
            return Err(SrplError::Dimension {
                op: "add_bias",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let b = &self.nodes[bias.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("add_bias", shape, out, &[a, bias], Op::AddBias { a, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("mul", shape, out, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("scale", shape, out, &[a], Op::Scale { a, c })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().sum();
        self.push("sum", vec![1], vec![s], &[a], Op::Sum { a })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let tanh: Vec<f64> = x.iter().map(|&x| gelu_tanh(x)).collect();
        let out = x.iter().zip(&tanh).map(|(x, t)| 0.5 * x * (1.0 + t)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("gelu", shape, out, &[a], Op::Gelu { a, tanh })
    }

    /// Root-mean-square normalization over the last dimension with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        if self.nodes[gain.0].value.len() != cols {
            return Err(SrplError::Dimension {
                op: "rms_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(g).map(|(v, w)| v * inv * w));
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push("rms_norm", shape, out, &[x, gain], Op::RmsNorm { x, gain, inv_rms })
    }

    /// Row lookup into a `[vocab × dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2(table, "embedding")?;
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(SrplError::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        self.push(
            "embedding",
            vec![ids.len(), dim],
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims2(a, "gather_rows")?;
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(SrplError::Index {
                    what: "gather_rows",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(&av[r * cols..(r + 1) * cols]);
        }
        self.push(
            "gather_rows",
            vec![rows.len(), cols],
            out,
            &[a],
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
        )
    }

    /// Amplitude-scaled rotation of interleaved dimension pairs.
    ///
    /// `x` is `[rows × width]` where `width` is a multiple of `2 * half` and
    /// `omega`, `amplitude`, `phase` all have length `half`. Every
    /// `2 * half`-wide block of a row (one attention head) shares the basis.
    /// Pair `(x[2j], x[2j+1])` at position `m` is multiplied, as a complex
    /// number, by `amplitude[j] * exp(i * (m * omega[j] + phase[j]))`.
    pub fn rotate(&mut self, x: Var, positions: &[usize], omega: Var, amplitude: Var, phase: Var) -> Result<Var> {
        let (rows, width) = self.dims2(x, "rotate")?;
        let half = self.nodes[omega.0].value.len();
        for v in [amplitude, phase] {
            if self.nodes[v.0].value.len() != half {
                return Err(SrplError::Dimension {
                    op: "rotate",
                    lhs: self.nodes[omega.0].shape.clone(),
                    rhs: self.nodes[v.0].shape.clone(),
                });
            }
        }
        if half == 0 || width % (2 * half) != 0 {
            return Err(SrplError::Dimension {
                op: "rotate",
                lhs: vec![rows, width],
                rhs: vec![2 * half],
            });
        }
        if positions.len() != rows {
            return Err(SrplError::Dimension {
                op: "rotate",
                lhs: vec![rows, width],
                rhs: vec![positions.len()],
            });
        }
        let d = 2 * half;
        let blocks = width / d;
        let xv = &self.nodes[x.0].value;
        let om = &self.nodes[omega.0].value;
        let amp = &self.nodes[amplitude.0].value;
        let ph = &self.nodes[phase.0].value;
        let mut out = vec![0.0; xv.len()];
        for (r, &pos) in positions.iter().enumerate() {
            let m = pos as f64;
            for j in 0..half {
                let (s, c) = (m * om[j] + ph[j]).sin_cos();
                let a = amp[j];
                for h in 0..blocks {
                    let i = r * width + h * d + 2 * j;
                    let (x0, x1) = (xv[i], xv[i + 1]);
                    out[i] = a * (x0 * c - x1 * s);
                    out[i + 1] = a * (x0 * s + x1 * c);
                }
            }
        }
        self.push(
            "rotate",
            vec![rows, width],
            out,
            &[x, omega, amplitude, phase],
            Op::Rotate(Box::new(RotateOp {
                x,
                omega,
                amplitude,
                phase,
                positions: positions.to_vec(),
            })),
        )
    }

    /// Multi-head causal attention over packed sequences.
    ///
    /// `q` is `[query_rows × hidden]`, `k`/`v` are `[key_rows × hidden]`, with
    /// head `h` occupying columns `h*head_dim..(h+1)*head_dim`. Scores are
    /// scaled by `1/sqrt(head_dim)`; future keys get an additive [`MASK_VALUE`],
    /// evaluated as a softmax over the visible prefix (the masked terms
    /// underflow to exactly zero).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[AttnSegment]) -> Result<Var> {
        let (q_rows, hidden) = self.dims2(q, "causal_attention")?;
        let (k_rows, hk) = self.dims2(k, "causal_attention")?;
        self.same_shape(k, v, "causal_attention")?;
        if hk != hidden || heads == 0 || hidden % heads != 0 {
            return Err(SrplError::Dimension {
                op: "causal_attention",
                lhs: vec![q_rows, hidden],
                rhs: vec![k_rows, hk],
            });
        }
        let mut probs_len = 0;
        for seg in segments {
            let nq = seg.query_pos.len();
            if seg.key_start + seg.key_len > k_rows
                || seg.query_start + nq > q_rows
                || seg.query_pos.iter().any(|&p| p >= seg.key_len)
            {
                return Err(SrplError::contract(format!(
                    "attention segment {seg:?} exceeds q rows {q_rows} / k rows {k_rows}"
                )));
            }
            probs_len += heads * nq * seg.key_len;
        }
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut out = vec![0.0; q_rows * hidden];
        let mut probs = vec![0.0; probs_len];
        let mut off = 0;
        for seg in segments {
            let nq = seg.query_pos.len();
            let t = seg.key_len;
            if nq == 0 {
                continue;
            }
            for h in 0..heads {
                let p = &mut probs[off..off + nq * t];
                gemm(
                    nq,
                    dh,
                    t,
                    scale,
                    qv,
                    Strided::new(seg.query_start * hidden + h * dh, hidden, 1),
                    kv,
                    Strided::new(seg.key_start * hidden + h * dh, 1, hidden),
                    0.0,
                    p,
                    Strided::new(0, t, 1),
                );
                for (i, row) in p.chunks_exact_mut(t).enumerate() {
                    // Masked scores would underflow to exactly 0 after exp.
                    let pos = seg.query_pos[i];
                    softmax_in_place(&mut row[..=pos]);
                    row[pos + 1..].fill(0.0);
                }
                gemm(
                    nq,
                    t,
                    dh,
                    1.0,
                    p,
                    Strided::new(0, t, 1),
                    vv,
                    Strided::new(seg.key_start * hidden + h * dh, hidden, 1),
                    0.0,
                    &mut out,
                    Strided::new(seg.query_start * hidden + h * dh, hidden, 1),
                );
                off += nq * t;
            }
        }
        self.push(
            "causal_attention",
            vec![q_rows, hidden],
            out,
            &[q, k, v],
            Op::Attention(Box::new(AttentionOp {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            })),
        )
    }

    /// Attention probabilities recorded by a `causal_attention` node, laid out
    /// segment-major then head-major, each block `[queries × key_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(op) => Some(&op.probs),
            _ => None,
        }
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = rows_cols(&self.nodes[a.0].shape);
        let mut out = self.nodes[a.0].value.clone();
        out.chunks_exact_mut(cols).for_each(softmax_in_place);
        let shape = self.nodes[a.0].shape.clone();
        self.push("softmax_rows", shape, out, &[a], Op::SoftmaxRows { a })
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// [`IGNORE_INDEX`]. Returns 0 when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(SrplError::Dimension {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        let mut probs = self.nodes[logits.0].value.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (row, &t) in probs.chunks_exact_mut(vocab).zip(targets) {
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= vocab {
                return Err(SrplError::Index {
                    what: "cross_entropy vocabulary",
                    index: t,
                    bound: vocab,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
            softmax_in_place(row);
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Interior adjoints are recomputed on
    /// every call; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(SrplError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Takes (or allocates) the gradient buffer of `v` for accumulation.
    /// Returns `None` when `v` does not require gradients.
    fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        let n = &mut self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(n.grad.take().unwrap_or_else(|| vec![0.0; n.value.len()]))
    }

    fn put_grad(&mut self, v: Var, g: Vec<f64>) {
        self.nodes[v.0].grad = Some(g);
    }

    /// Fresh zeroed buffer for ops whose inputs may alias each other.
    fn scratch_grad(&self, v: Var) -> Option<Vec<f64>> {
        let n = &self.nodes[v.0];
        n.requires_grad.then(|| vec![0.0; n.value.len()])
    }

    fn accumulate(&mut self, v: Var, buf: Vec<f64>) {
        match &mut self.nodes[v.0].grad {
            Some(g) => add_into(g, &buf),
            slot @ None => *slot = Some(buf),
        }
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if let Some(mut ga) = self.take_grad(*a) {
                    // dA += G · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        Strided::new(0, n, 1),
                        &self.nodes[b.0].value,
                        Strided::new(0, 1, n),
                        1.0,
                        &mut ga,
                        Strided::new(0, k, 1),
                    );
                    self.put_grad(*a, ga);
                }
                if let Some(mut gb) = self.take_grad(*b) {
                    // dB += Aᵀ · G
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &self.nodes[a.0].value,
                        Strided::new(0, 1, k),
                        g,
                        Strided::new(0, n, 1),
                        1.0,
                        &mut gb,
                        Strided::new(0, n, 1),
                    );
                    self.put_grad(*b, gb);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(mut gv) = self.take_grad(v) {
                        add_into(&mut gv, g);
                        self.put_grad(v, gv);
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(mut ga) = self.take_grad(*a) {
                    add_into(&mut ga, g);
                    self.put_grad(*a, ga);
                }
                if let Some(mut gb) = self.take_grad(*bias) {
                    let cols = gb.len();
                    for row in g.chunks_exact(cols) {
                        add_into(&mut gb, row);
                    }
                    self.put_grad(*bias, gb);
                }
            }
            Op::Mul { a, b } => {
                if let Some(mut ga) = self.take_grad(*a) {
                    let bv = &self.nodes[b.0].value;
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (gi, bi))| *d += gi * bi);
                    self.put_grad(*a, ga);
                }
                if let Some(mut gb) = self.take_grad(*b) {
                    let av = &self.nodes[a.0].value;
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (gi, ai))| *d += gi * ai);
                    self.put_grad(*b, gb);
                }
            }
            Op::Scale { a, c } => {
                if let Some(mut ga) = self.take_grad(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
                    self.put_grad(*a, ga);
                }
            }
            Op::Sum { a } => {
                if let Some(mut ga) = self.take_grad(*a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                    self.put_grad(*a, ga);
                }
            }
            Op::Gelu { a, tanh } => {
                if let Some(mut ga) = self.take_grad(*a) {
                    let av = &self.nodes[a.0].value;
                    ga.iter_mut()
                        .zip(g.iter().zip(av.iter().zip(tanh)))
                        .for_each(|(d, (gi, (x, t)))| *d += gi * gelu_grad(*x, *t));
                    self.put_grad(*a, ga);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let cols = self.nodes[gain.0].value.len();
                if let Some(mut gg) = self.take_grad(*gain) {
                    let xv = &self.nodes[x.0].value;
                    for ((grow, xrow), inv) in g.chunks_exact(cols).zip(xv.chunks_exact(cols)).zip(inv_rms) {
                        for c in 0..cols {
                            gg[c] += grow[c] * xrow[c] * inv;
                        }
                    }
                    self.put_grad(*gain, gg);
                }
                if let Some(mut gx) = self.take_grad(*x) {
                    let xv = &self.nodes[x.0].value;
                    let w = &self.nodes[gain.0].value;
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (grow, xrow) = (&g[span.clone()], &xv[span.clone()]);
                        let dot: f64 = (0..cols).map(|c| grow[c] * w[c] * xrow[c] * inv).sum::<f64>() / cols as f64;
                        let dst = &mut gx[span];
                        for c in 0..cols {
                            let u = xrow[c] * inv;
                            dst[c] += inv * (grow[c] * w[c] - u * dot);
                        }
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(mut gt) = self.take_grad(*table) {
                    let dim = self.nodes[table.0].shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                    self.put_grad(*table, gt);
                }
            }
            Op::GatherRows { a, rows } => {
                if let Some(mut ga) = self.take_grad(*a) {
                    let cols = self.nodes[a.0].shape[1];
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                    self.put_grad(*a, ga);
                }
            }
            Op::Rotate(op) => self.backprop_rotate(op, g),
            Op::Attention(op) => self.backprop_attention(op, g),
            Op::SoftmaxRows { a } => {
                if let Some(mut ga) = self.take_grad(*a) {
                    let cols = *self.nodes[i].shape.last().unwrap();
                    let y = &self.nodes[i].value;
                    for ((d, grow), yrow) in ga.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            d[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                    self.put_grad(*a, ga);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                if let Some(mut gl) = self.take_grad(*logits) {
                    let vocab = self.nodes[logits.0].shape[1];
                    let s = g[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (c, d) in row.iter_mut().enumerate() {
                            let p = probs[r * vocab + c];
                            *d += s * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    self.put_grad(*logits, gl);
                }
            }
        }
    }

    fn backprop_rotate(&mut self, op: &RotateOp, g: &[f64]) {
        let half = self.nodes[op.omega.0].value.len();
        let d = 2 * half;
        let width = self.nodes[op.x.0].shape[1];
        let blocks = width / d;
        let mut gx = self.scratch_grad(op.x);
        let mut g_omega = self.scratch_grad(op.omega);
        let mut g_amp = self.scratch_grad(op.amplitude);
        let mut g_phase = self.scratch_grad(op.phase);
        let xv = &self.nodes[op.x.0].value;
        let om = &self.nodes[op.omega.0].value;
        let amp = &self.nodes[op.amplitude.0].value;
        let ph = &self.nodes[op.phase.0].value;
        let need_basis = g_omega.is_some() || g_amp.is_some() || g_phase.is_some();
        for (r, &pos) in op.positions.iter().enumerate() {
            let m = pos as f64;
            for j in 0..half {
                let (s, c) = (m * om[j] + ph[j]).sin_cos();
                let a = amp[j];
                let mut d_amp = 0.0;
                let mut d_angle = 0.0;
                for h in 0..blocks {
                    let idx = r * width + h * d + 2 * j;
                    let (g0, g1) = (g[idx], g[idx + 1]);
                    let (x0, x1) = (xv[idx], xv[idx + 1]);
                    if let Some(gx) = gx.as_mut() {
                        gx[idx] += a * (c * g0 + s * g1);
                        gx[idx + 1] += a * (c * g1 - s * g0);
                    }
                    if need_basis {
                        let r0 = x0 * c - x1 * s;
                        let r1 = x0 * s + x1 * c;
                        d_amp += g0 * r0 + g1 * r1;
                        d_angle += a * (g1 * r0 - g0 * r1);
                    }
                }
                if let Some(go) = g_omega.as_mut() {
                    go[j] += m * d_angle;
                }
                if let Some(ga) = g_amp.as_mut() {
                    ga[j] += d_amp;
                }
                if let Some(gp) = g_phase.as_mut() {
                    gp[j] += d_angle;
                }
            }
        }
        for (v, buf) in [(op.x, gx), (op.omega, g_omega), (op.amplitude, g_amp), (op.phase, g_phase)] {
            if let Some(buf) = buf {
                self.accumulate(v, buf);
            }
        }
    }

    fn backprop_attention(&mut self, op: &AttentionOp, g: &[f64]) {
        let hidden = self.nodes[op.q.0].shape[1];
        let dh = hidden / op.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = self.scratch_grad(op.q);
        let mut gk = self.scratch_grad(op.k);
        let mut gv = self.scratch_grad(op.v);
        let qv = &self.nodes[op.q.0].value;
        let kv = &self.nodes[op.k.0].value;
        let vv = &self.nodes[op.v.0].value;
        let mut off = 0;
        let mut dp = Vec::new();
        for seg in &op.segments {
            let nq = seg.query_pos.len();
            let t = seg.key_len;
            if nq == 0 {
                continue;
            }
            let q_view = |h: usize| Strided::new(seg.query_start * hidden + h * dh, hidden, 1);
            let k_view = |h: usize| Strided::new(seg.key_start * hidden + h * dh, hidden, 1);
            for h in 0..op.heads {
                let p = &op.probs[off..off + nq * t];
                off += nq * t;
                if let Some(gv) = gv.as_mut() {
                    // dV += Pᵀ · G
                    gemm(t, nq, dh, 1.0, p, Strided::new(0, 1, t), g, q_view(h), 1.0, gv, k_view(h));
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                // dP = G · Vᵀ
                dp.clear();
                dp.resize(nq * t, 0.0);
                let vt = Strided::new(seg.key_start * hidden + h * dh, 1, hidden);
                gemm(nq, dh, t, 1.0, g, q_view(h), vv, vt, 0.0, &mut dp, Strided::new(0, t, 1));
                // dS = P ⊙ (dP − rowdot(dP, P))
                for (drow, prow) in dp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    drow.iter_mut().zip(prow).for_each(|(d, p)| *d = p * (*d - dot));
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(nq, t, dh, scale, &dp, Strided::new(0, t, 1), kv, k_view(h), 1.0, gq, q_view(h));
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(t, nq, dh, scale, &dp, Strided::new(0, 1, t), qv, q_view(h), 1.0, gk, k_view(h));
                }
            }
        }
        for (v, buf) in [(op.q, gq), (op.k, gk), (op.v, gv)] {
            if let Some(buf) = buf {
                self.accumulate(v, buf);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let i = tape.constant(&t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(&t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(&t2(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let b = tape.constant(&t2(&[vec![0.0, 0.0], vec![0.0, 1.0]]));
        let z = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(z), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.constant(&Tensor::zeros(vec![2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let a = tape.constant(&t2(&[vec![0.0, 0.0], vec![1000.0, 0.0]]));
        let s = tape.softmax_rows(a).unwrap();
        let v = tape.value(s);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert_eq!(v[2], 1.0);
        assert!(v[3] < 1e-300);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let uniform = Tensor::zeros(vec![3, 4]).unwrap();
        let l = crate::tensor::cross_entropy(&uniform, &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let sure = t2(&[vec![50.0, 0.0]]);
        assert!(crate::tensor::cross_entropy(&sure, &[0]).unwrap() < 1e-20);

        let err = crate::tensor::cross_entropy(&uniform, &[0, 4, 1]).unwrap_err();
        assert!(matches!(err, SrplError::Index { .. }));
    }

    #[test]
    fn cross_entropy_skips_ignored_rows() {
        let logits = t2(&[vec![0.0, 0.0], vec![100.0, -100.0]]);
        let l = crate::tensor::cross_entropy(&logits, &[IGNORE_INDEX, 0]).unwrap();
        assert!(l.abs() < 1e-40);
        let all = crate::tensor::cross_entropy(&logits, &[IGNORE_INDEX, IGNORE_INDEX]).unwrap();
        assert_eq!(all, 0.0);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![3.0]).unwrap());
        let xx = tape.mul(x, x).unwrap();
        let loss = tape.sum(xx).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn unrelated_param_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let p = tape.param(&Tensor::vector(vec![5.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(p).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(SrplError::Contract(_))));
    }

    #[test]
    fn attention_single_position_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.constant(&t2(&[vec![0.3, -0.2, 1.0, 0.5]]));
        let k = tape.constant(&t2(&[vec![0.1, 0.9, -0.4, 0.2]]));
        let v = tape.constant(&t2(&[vec![1.0, 2.0, 3.0, 4.0]]));
        let out = tape.causal_attention(q, k, v, 2, &[AttnSegment::full(0, 1)]).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn prefix_softmax_equals_additive_mask() {
        let scores = [0.3, -1.7, 2.5, 0.9, -0.2];
        for pos in 0..scores.len() {
            let mut masked = scores;
            masked[pos + 1..].iter_mut().for_each(|s| *s += MASK_VALUE);
            softmax_in_place(&mut masked);
            let mut prefix = scores;
            softmax_in_place(&mut prefix[..=pos]);
            prefix[pos + 1..].fill(0.0);
            assert_eq!(masked, prefix);
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![1e308]).unwrap());
        let r = tape.scale(x, 10.0);
        if cfg!(debug_assertions) {
            assert!(matches!(r, Err(SrplError::NonFinite { op: "scale" })));
        }
    }
}
