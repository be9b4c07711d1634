//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends one record whose operands are earlier records or
//! leaves, so the record order is already a topological order and `backward`
//! is a single reverse sweep. A tape is single-threaded; independent tapes
//! share nothing and may run on separate threads.

use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc};
use super::{GradError, Tensor};

/// Handle to a record on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Non-fatal conditions raised while evaluating an operation.
#[derive(Clone, Debug, PartialEq)]
pub enum TapeWarning {
    /// Every entry of a softmax row was masked; the row was set to zeros.
    DegenerateSoftmaxRow { record: usize, row: usize },
    /// A cosine-similarity operand had norm below the epsilon floor.
    CosineEpsilonFloor { record: usize },
}

pub const COSINE_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Cosine {
        u: Var,
        v: Var,
        nu: f64,
        nv: f64,
        u_floored: bool,
        v_floored: bool,
    },
    Sum(Var),
    Mean(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice2d {
        x: Var,
        r0: usize,
        c0: usize,
    },
    Splice2d {
        base: Var,
        block: Var,
        r0: usize,
        c0: usize,
    },
    Stack(Vec<Var>),
    CalibrateRows {
        x: Var,
        rows: Vec<usize>,
        c0: usize,
        weights: Vec<f64>,
        renormalize: bool,
        // per calibrated row: (scale = s0/s1, s1)
        stats: Vec<(f64, f64)>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy_logits",
            Op::Cosine { .. } => "cosine_similarity",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RmsNorm { .. } => "rms_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Slice2d { .. } => "slice2d",
            Op::Splice2d { .. } => "splice2d",
            Op::Stack(..) => "stack",
            Op::CalibrateRows { .. } => "calibrate_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    warnings: Vec<TapeWarning>,
}

fn shape_err(op: &'static str, detail: String) -> GradError {
    GradError::Shape { op, detail }
}

fn dims2_strict(op: &'static str, t: &Tensor) -> Result<(usize, usize), GradError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a 2-D tensor, got {s:?}"))),
    }
}

/// Rows and row length of a tensor viewed as `[..., n]`.
fn rows_of(t: &Tensor) -> (usize, usize) {
    let n = *t.shape().last().unwrap_or(&1);
    (t.numel() / n, n)
}

/// `b` broadcasts against `a` when its shape is a suffix of `a`'s shape.
fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), GradError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
        Ok(())
    } else {
        Err(shape_err(op, format!("{sa:?} and {sb:?} are not broadcast-compatible")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of records, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn warnings(&self) -> &[TapeWarning] {
        &self.warnings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Registers a leaf; it participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if !matches!(op, Op::Leaf) {
            value.set_requires_grad(needs_grad);
            value.zero_grad();
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2_strict("matmul", ta)?;
        let (k2, p) = dims2_strict("matmul", tb)?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ: {:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * p];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, p);
        let value = Tensor::new(vec![m, p], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let ta = self.value(a);
        let (m, n) = dims2_strict("transpose", ta)?;
        let src = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_broadcast(name, ta, tb)?;
        let bd = tb.data();
        let bl = bd.len();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    /// `a + b`, where `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product with leading-dimension broadcast of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(GradError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Row-wise softmax over the last dimension with an optional additive
    /// mask whose entries must be `0` or `-inf`. Masked entries come out as
    /// exactly zero; a fully masked row yields zeros and a warning.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var, GradError> {
        let tx = self.value(x);
        if let Some(m) = mask {
            check_broadcast("softmax_rows", tx, m)?;
            if m.data().iter().any(|&v| !(v == 0.0 || v == f64::NEG_INFINITY)) {
                return Err(GradError::Contract(
                    "softmax_rows mask entries must be 0 or -inf".into(),
                ));
            }
        }
        let (rows, n) = rows_of(tx);
        let xd = tx.data();
        let mut out = vec![0.0; xd.len()];
        let mut degenerate = Vec::new();
        let mut z = vec![0.0; n];
        for r in 0..rows {
            let base = r * n;
            for j in 0..n {
                let mv = mask.map_or(0.0, |m| m.data()[(base + j) % m.numel()]);
                z[j] = xd[base + j] + mv;
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                degenerate.push(r);
                continue;
            }
            let row = &mut out[base..base + n];
            let mut sum = 0.0;
            for (o, &zj) in row.iter_mut().zip(&z) {
                *o = (zj - max).exp();
                sum += *o;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        let var = self.push(value, Op::Softmax(x), ng);
        for row in degenerate {
            log::warn!("softmax_rows: row {row} fully masked, emitting zeros");
            self.warnings.push(TapeWarning::DegenerateSoftmaxRow {
                record: var.0,
                row,
            });
        }
        Ok(var)
    }

    /// `-log softmax(logits)[target]` over all elements of `logits`.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Result<Var, GradError> {
        let xd = self.value(logits).data();
        let c = xd.len();
        if target >= c {
            return Err(GradError::Index {
                op: "cross_entropy_logits",
                index: target,
                bound: c,
            });
        }
        let max = xd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xd.iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() - (xd[target] - max);
        let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        ))
    }

    /// `u·v / (‖u‖‖v‖)` with both norms floored at [`COSINE_EPS`].
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var, GradError> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.numel() != tv.numel() {
            return Err(shape_err(
                "cosine_similarity",
                format!("{:?} vs {:?}", tu.shape(), tv.shape()),
            ));
        }
        let dot: f64 = tu.data().iter().zip(tv.data()).map(|(a, b)| a * b).sum();
        let raw_u = tu.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let raw_v = tv.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let (u_floored, v_floored) = (raw_u < COSINE_EPS, raw_v < COSINE_EPS);
        let nu = raw_u.max(COSINE_EPS);
        let nv = raw_v.max(COSINE_EPS);
        let s = (dot / (nu * nv)).clamp(-1.0, 1.0);
        let ng = self.ng(&[u, v]);
        let var = self.push(
            Tensor::scalar(s),
            Op::Cosine {
                u,
                v,
                nu,
                nv,
                u_floored,
                v_floored,
            },
            ng,
        );
        if u_floored || v_floored {
            log::warn!("cosine_similarity: zero-norm operand, epsilon floor applied");
            self.warnings
                .push(TapeWarning::CosineEpsilonFloor { record: var.0 });
        }
        Ok(var)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Root-mean-square normalisation of each row followed by a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, GradError> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (m, d) = dims2_strict("rms_norm", tx)?;
        if tg.shape() != [d] {
            return Err(shape_err(
                "rms_norm",
                format!("gain {:?} for input {:?}", tg.shape(), tx.shape()),
            ));
        }
        let (xd, gd) = (tx.data(), tg.data());
        let mut out = vec![0.0; m * d];
        let mut inv_rms = Vec::with_capacity(m);
        for r in 0..m {
            let row = &xd[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * gd[j];
            }
        }
        let value = Tensor::new(vec![m, d], out)?;
        let ng = self.ng(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Selects rows of a `[V×d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, GradError> {
        let tt = self.value(table);
        let (v, d) = dims2_strict("gather_rows", tt)?;
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "empty index list".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(GradError::Index {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let mut rows = 0;
        let mut cols = None;
        for &p in parts {
            let (r, c) = dims2_strict("concat_rows", self.value(p))?;
            if *cols.get_or_insert(c) != c {
                return Err(shape_err("concat_rows", format!("column counts differ: {c} vs {cols:?}")));
            }
            rows += r;
        }
        let cols = cols.ok_or_else(|| shape_err("concat_rows", "no operands".into()))?;
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2_strict("concat_cols", self.value(p))?;
            if *rows.get_or_insert(r) != r {
                return Err(shape_err("concat_cols", format!("row counts differ: {r} vs {rows:?}")));
            }
            widths.push(c);
        }
        let rows = rows.ok_or_else(|| shape_err("concat_cols", "no operands".into()))?;
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rectangular block `[r0..r0+nr) × [c0..c0+nc)` of a 2-D tensor.
    pub fn slice2d(&mut self, x: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var, GradError> {
        let tx = self.value(x);
        let (m, n) = dims2_strict("slice2d", tx)?;
        if nr == 0 || nc == 0 || r0 + nr > m || c0 + nc > n {
            return Err(shape_err(
                "slice2d",
                format!("block rows {r0}+{nr}, cols {c0}+{nc} outside {:?}", tx.shape()),
            ));
        }
        let xd = tx.data();
        let mut out = Vec::with_capacity(nr * nc);
        for r in r0..r0 + nr {
            out.extend_from_slice(&xd[r * n + c0..r * n + c0 + nc]);
        }
        let value = Tensor::new(vec![nr, nc], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Slice2d { x, r0, c0 }, ng))
    }

    /// Copy of `base` with `block` written at `(r0, c0)`.
    pub fn splice2d(&mut self, base: Var, block: Var, r0: usize, c0: usize) -> Result<Var, GradError> {
        let (tb, tk) = (self.value(base), self.value(block));
        let (m, n) = dims2_strict("splice2d", tb)?;
        let (nr, nc) = dims2_strict("splice2d", tk)?;
        if r0 + nr > m || c0 + nc > n {
            return Err(shape_err(
                "splice2d",
                format!("block {:?} at ({r0},{c0}) outside {:?}", tk.shape(), tb.shape()),
            ));
        }
        let mut out = tb.data().to_vec();
        let kd = tk.data();
        for r in 0..nr {
            out[(r0 + r) * n + c0..(r0 + r) * n + c0 + nc].copy_from_slice(&kd[r * nc..(r + 1) * nc]);
        }
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(&[base, block]);
        Ok(self.push(value, Op::Splice2d { base, block, r0, c0 }, ng))
    }

    /// Stacks single-element tensors into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var, GradError> {
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.value(s);
            if t.numel() != 1 {
                return Err(shape_err("stack", format!("operand of shape {:?} is not a scalar", t.shape())));
            }
            out.push(t.item());
        }
        let value = Tensor::vector(out)?;
        let ng = self.ng(scalars);
        Ok(self.push(value, Op::Stack(scalars.to_vec()), ng))
    }

    /// Multiplies `x[row, c0..c0+w.len()]` by `weights` for each listed row.
    ///
    /// With `renormalize`, each touched row is then rescaled by
    /// `sum(original row) / sum(weighted row)` so its total mass is kept.
    /// Unit weights therefore leave the row bitwise unchanged.
    pub fn calibrate_rows(
        &mut self,
        x: Var,
        rows: &[usize],
        c0: usize,
        weights: &[f64],
        renormalize: bool,
    ) -> Result<Var, GradError> {
        let tx = self.value(x);
        let (m, n) = dims2_strict("calibrate_rows", tx)?;
        if c0 + weights.len() > n {
            return Err(shape_err(
                "calibrate_rows",
                format!("{} weights at column {c0} exceed row length {n}", weights.len()),
            ));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return Err(GradError::Index {
                op: "calibrate_rows",
                index: r,
                bound: m,
            });
        }
        let mut out = tx.data().to_vec();
        let mut stats = Vec::with_capacity(rows.len());
        for &r in rows {
            let row = &mut out[r * n..(r + 1) * n];
            let s0: f64 = row.iter().sum();
            for (v, w) in row[c0..c0 + weights.len()].iter_mut().zip(weights) {
                *v *= w;
            }
            if renormalize {
                let s1: f64 = row.iter().sum();
                let c = s0 / s1;
                row.iter_mut().for_each(|v| *v *= c);
                stats.push((c, s1));
            } else {
                stats.push((1.0, s0));
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            value,
            Op::CalibrateRows {
                x,
                rows: rows.to_vec(),
                c0,
                weights: weights.to_vec(),
                renormalize,
                stats,
            },
            ng,
        ))
    }

    /// Clears leaf gradients and re-arms [`Tape::backward`].
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a single-element `loss`. Populates the gradient of
    /// every leaf that requires one (zeros when unreachable). A second call
    /// without [`Tape::reset_grads`] is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if self.backward_done {
            return Err(GradError::Contract(
                "backward called twice on the same tape without reset".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(GradError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                leaf_grads.push((idx, g));
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (idx, g) in leaf_grads {
            self.nodes[idx].value.accumulate_grad(&g)?;
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.value.grad().is_none() {
                let zeros = vec![0.0; node.value.numel()];
                node.value.set_grad(zeros)?;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let p = node.value.shape()[1];
                acc(*a, &mut |ga| gemm_bt_acc(g, val(*b), ga, m, k, p));
                acc(*b, &mut |gb| gemm_at_acc(val(*a), g, gb, m, k, p));
            }
            Op::Transpose(a) => {
                let (m, n) = nodes[a.0].value.dims2().unwrap();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| {
                    let bl = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % bl] += sign * gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let bl = bd.len();
                acc(*a, &mut |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * bd[i % bl];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % bl] += gi * ad[i];
                    }
                });
            }
            Op::Relu(a) => {
                let ad = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let ad = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / ad[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (rows, n) = rows_of(&node.value);
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        let s = r * n..(r + 1) * n;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let g0 = g[0];
                acc(*logits, &mut |ga| {
                    for (i, p) in probs.iter().enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        ga[i] += g0 * (p - onehot);
                    }
                });
            }
            Op::Cosine {
                u,
                v,
                nu,
                nv,
                u_floored,
                v_floored,
            } => {
                let s = node.value.item();
                let g0 = g[0];
                let (ud, vd) = (val(*u), val(*v));
                let inv = 1.0 / (nu * nv);
                acc(*u, &mut |gu| {
                    for i in 0..gu.len() {
                        let self_term = if *u_floored { 0.0 } else { s * ud[i] / (nu * nu) };
                        gu[i] += g0 * (vd[i] * inv - self_term);
                    }
                });
                acc(*v, &mut |gv| {
                    for i in 0..gv.len() {
                        let self_term = if *v_floored { 0.0 } else { s * vd[i] / (nv * nv) };
                        gv[i] += g0 * (ud[i] * inv - self_term);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / nodes[a.0].value.numel() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g0));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, d) = nodes[x.0].value.dims2().unwrap();
                let (xd, gd) = (val(*x), val(*gain));
                acc(*gain, &mut |gg| {
                    for r in 0..m {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xd[r * d + j] * inv_rms[r];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        let inv = inv_rms[r];
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += g[r * d + j] * gd[j] * xd[r * d + j] * inv;
                        }
                        dot /= d as f64;
                        for j in 0..d {
                            let xhat = xd[r * d + j] * inv;
                            gx[r * d + j] += inv * (g[r * d + j] * gd[j] - xhat * dot);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = node.value.shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |gp| {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice2d { x, r0, c0 } => {
                let n = nodes[x.0].value.shape()[1];
                let (nr, nc) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &mut |gx| {
                    for r in 0..nr {
                        for j in 0..nc {
                            gx[(r0 + r) * n + c0 + j] += g[r * nc + j];
                        }
                    }
                });
            }
            Op::Splice2d { base, block, r0, c0 } => {
                let n = node.value.shape()[1];
                let (nr, nc) = nodes[block.0].value.dims2().unwrap();
                let inside = |i: usize| {
                    let (r, c) = (i / n, i % n);
                    r >= *r0 && r < r0 + nr && c >= *c0 && c < c0 + nc
                };
                acc(*base, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        if !inside(i) {
                            gb[i] += gi;
                        }
                    }
                });
                acc(*block, &mut |gk| {
                    for r in 0..nr {
                        for j in 0..nc {
                            gk[r * nc + j] += g[(r0 + r) * n + c0 + j];
                        }
                    }
                });
            }
            Op::Stack(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    acc(p, &mut |gp| gp[0] += g[i]);
                }
            }
            Op::CalibrateRows {
                x,
                rows,
                c0,
                weights,
                renormalize,
                stats,
            } => {
                let n = node.value.shape()[1];
                let xd = val(*x);
                let w_at = |j: usize| {
                    if j >= *c0 && j < c0 + weights.len() {
                        weights[j - c0]
                    } else {
                        1.0
                    }
                };
                acc(*x, &mut |gx| {
                    let mut touched = vec![false; node.value.shape()[0]];
                    for (k, &r) in rows.iter().enumerate() {
                        touched[r] = true;
                        let (c, s1) = stats[k];
                        let s = r * n..(r + 1) * n;
                        if *renormalize {
                            let s0 = c * s1;
                            // sum_j g_j * a_j where a_j = x_j * w_j
                            let ga: f64 = s.clone().map(|i| g[i] * xd[i] * w_at(i - r * n)).sum();
                            for i in s {
                                let w = w_at(i - r * n);
                                gx[i] += w * c * g[i] + ga * (1.0 / s1 - s0 * w / (s1 * s1));
                            }
                        } else {
                            for i in s {
                                gx[i] += w_at(i - r * n) * g[i];
                            }
                        }
                    }
                    for (r, t) in touched.iter().enumerate() {
                        if !t {
                            for i in r * n..(r + 1) * n {
                                gx[i] += g[i];
                            }
                        }
                    }
                });
            }
        }
    }
}
