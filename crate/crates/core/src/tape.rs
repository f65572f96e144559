//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Parents always
//! precede children, so a single reverse sweep over the node list visits
//! each node exactly once. Composite attention ops are recorded as chains of
//! primitives; there are no fused backward rules above this level.
//!
//! The tape also keeps a running count of multiplications and additions,
//! charged per primitive as it executes. Score-transform primitives (constant
//! scaling, scalar shifts and weights, exp/log, softmax, division, activation
//! maps, layer normalization) are free, which reproduces the convention of
//! leaving the softmax operator out of attention cost accounting. A pairwise
//! squared distance is charged like the dot product it replaces: `2D - 1`.

use crate::error::{MgkError, Result};
use crate::tensor::{self, expect_matrix, Mask, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    EluPlusOne(Var),
    SumAll(Var),
    SumRows(Var),
    MeanRows(Var),
    SqDist(Var, Var),
    SoftmaxRows(Var),
    LogSumExpStack(Vec<Var>),
    MaxStack(Vec<Var>, Vec<u32>),
    ConcatCols(Vec<Var>),
    Index(Var, usize),
    NormalizeSum(Var),
    CumsumRows(Var),
    RowOuter(Var, Var),
    RowVecMat(Var, Var),
    RowDot(Var, Var),
    DivRows(Var, Var),
    LayerNormRows(Var, f64),
    EmbedRows(Var, Vec<usize>),
    CrossEntropy(Var, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; zeros when `v` did not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MgkError::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn matmul_cost(m: usize, k: usize, n: usize) -> u64 {
    if k == 0 {
        0
    } else {
        (m * n * (2 * k - 1)) as u64
    }
}

fn scalar_of(t: &Tensor, op: &'static str) -> Result<f64> {
    if t.len() != 1 {
        return Err(MgkError::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![1],
        });
    }
    Ok(t.data()[0])
}

/// Width of a row-broadcast operand: `[C]` or `[1, C]`.
fn broadcast_width(op: &'static str, x: &Tensor, b: &Tensor) -> Result<usize> {
    let (_, c) = expect_matrix(op, x)?;
    let ok = match b.shape() {
        [w] => *w == c,
        [1, w] => *w == c,
        _ => false,
    };
    if !ok {
        return Err(MgkError::Dimension {
            op,
            left: x.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(c)
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

    /// Multiplications and additions executed so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, cost: u64) -> Var {
        self.flops += cost;
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = tensor::matmul(av, bv)?;
        let cost = matmul_cost(av.rows(), av.cols(), bv.cols());
        Ok(self.push(Op::Matmul(a, b), out, cost))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), out, 0))
    }

    /// `x · wᵀ`, the projection convention used for every weight matrix.
    pub fn project(&mut self, x: Var, w: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out = zip_map(av, bv, |x, y| x + y);
        let n = out.len() as u64;
        Ok(self.push(Op::Add(a, b), out, n))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let out = zip_map(av, bv, |x, y| x - y);
        let n = out.len() as u64;
        Ok(self.push(Op::Sub(a, b), out, n))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let out = zip_map(av, bv, |x, y| x * y);
        let n = out.len() as u64;
        Ok(self.push(Op::Mul(a, b), out, n))
    }

    /// Adds a length-`C` vector to every row of an `N×C` matrix.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = broadcast_width("add_row_broadcast", xv, bv)?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            row.iter_mut().zip(bv.data()).for_each(|(o, &bb)| *o += bb);
        }
        let n = out.len() as u64;
        Ok(self.push(Op::AddRowBroadcast(x, b), out, n))
    }

    /// Multiplies every row of an `N×C` matrix by a length-`C` vector.
    pub fn mul_row_broadcast(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        let c = broadcast_width("mul_row_broadcast", xv, gv)?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            row.iter_mut().zip(gv.data()).for_each(|(o, &gg)| *o *= gg);
        }
        let n = out.len() as u64;
        Ok(self.push(Op::MulRowBroadcast(x, g), out, n))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), out, 0)
    }

    /// Multiplies by a one-element tensor held on the tape.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = scalar_of(self.value(s), "mul_scalar")?;
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(Op::MulScalar(x, s), out, 0))
    }

    /// Adds a one-element tensor held on the tape.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = scalar_of(self.value(s), "add_scalar")?;
        let out = self.value(x).map(|v| v + sv);
        Ok(self.push(Op::AddScalar(x, s), out, 0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), out, 0)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(Op::Log(x), out, 0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out, 0)
    }

    /// Positive feature map `u + 1` for `u >= 0`, `exp(u)` otherwise.
    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        let out = self.value(x).map(elu_plus_one);
        self.push(Op::EluPlusOne(x), out, 0)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let total = xv.data().iter().sum();
        let cost = xv.len().saturating_sub(1) as u64;
        self.push(Op::SumAll(x), Tensor::scalar(total), cost)
    }

    /// Column sums of an `N×C` matrix, as `1×C`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = expect_matrix("sum_rows", xv)?;
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let cost = (n.saturating_sub(1) * c) as u64;
        Ok(self.push(Op::SumRows(x), Tensor::new(vec![1, c], out)?, cost))
    }

    /// Column means of an `N×C` matrix, as `1×C`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = expect_matrix("mean_rows", xv)?;
        if n == 0 {
            return Err(MgkError::EmptyInput("mean over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let cost = (n.saturating_sub(1) * c) as u64;
        Ok(self.push(Op::MeanRows(x), Tensor::new(vec![1, c], out)?, cost))
    }

    pub fn sqdist(&mut self, q: Var, k: Var) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let out = tensor::pairwise_sqdist(qv, kv)?;
        let cost = matmul_cost(qv.rows(), qv.cols(), kv.rows());
        Ok(self.push(Op::SqDist(q, k), out, cost))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x), mask)?;
        Ok(self.push(Op::SoftmaxRows(x), out, 0))
    }

    /// Elementwise `log Σ_r exp(x_r)` over same-shape tensors.
    pub fn logsumexp_stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.stack_check("logsumexp_stack", xs)?;
        let len = first.len();
        let mut out = vec![0.0; len];
        for (e, o) in out.iter_mut().enumerate() {
            let m = xs
                .iter()
                .map(|&x| self.value(x).data()[e])
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = xs.iter().map(|&x| (self.value(x).data()[e] - m).exp()).sum();
            *o = m + s.ln();
        }
        let cost = ((xs.len() - 1) * len) as u64;
        let t = Tensor::new(first.shape().to_vec(), out)?;
        Ok(self.push(Op::LogSumExpStack(xs.to_vec()), t, cost))
    }

    /// Elementwise max over same-shape tensors. Ties go to the earliest
    /// operand, and the gradient flows only to the selected operand.
    pub fn max_stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.stack_check("max_stack", xs)?;
        let len = first.len();
        let mut out = vec![f64::NEG_INFINITY; len];
        let mut arg = vec![0u32; len];
        for (r, &x) in xs.iter().enumerate() {
            for (e, &v) in self.value(x).data().iter().enumerate() {
                if v > out[e] {
                    out[e] = v;
                    arg[e] = r as u32;
                }
            }
        }
        let cost = ((xs.len() - 1) * len) as u64;
        let t = Tensor::new(first.shape().to_vec(), out)?;
        Ok(self.push(Op::MaxStack(xs.to_vec(), arg), t, cost))
    }

    fn stack_check(&self, op: &'static str, xs: &[Var]) -> Result<Tensor> {
        let Some(&x0) = xs.first() else {
            return Err(MgkError::Contract(format!("{op} needs at least one operand")));
        };
        let first = self.value(x0);
        for &x in &xs[1..] {
            same_shape(op, first, self.value(x))?;
        }
        Ok(Tensor::zeros(first.shape()))
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(MgkError::Contract("concat_cols needs an operand".into()));
        }
        let (n, _) = expect_matrix("concat_cols", self.value(xs[0]))?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let xv = self.value(x);
            let (r, c) = expect_matrix("concat_cols", xv)?;
            if r != n {
                return Err(MgkError::Dimension {
                    op: "concat_cols",
                    left: self.value(xs[0]).shape().to_vec(),
                    right: xv.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        let t = Tensor::new(vec![n, total], out)?;
        Ok(self.push(Op::ConcatCols(xs.to_vec()), t, 0))
    }

    /// Picks one entry of a tensor as a one-element tensor.
    pub fn index(&mut self, v: Var, i: usize) -> Result<Var> {
        let vv = self.value(v);
        if i >= vv.len() {
            return Err(MgkError::Contract(format!(
                "index {i} out of range for {:?}",
                vv.shape()
            )));
        }
        let t = Tensor::scalar(vv.data()[i]);
        Ok(self.push(Op::Index(v, i), t, 0))
    }

    /// `v / Σ v` for a tensor of positive weights.
    pub fn normalize_sum(&mut self, v: Var) -> Result<Var> {
        let vv = self.value(v);
        let s: f64 = vv.data().iter().sum();
        if !(s > 0.0) || vv.data().iter().any(|&x| x < 0.0) {
            return Err(MgkError::Config(format!(
                "mixing weights must be non-negative with positive mass, got {:?}",
                vv.data()
            )));
        }
        let out = vv.map(|x| x / s);
        Ok(self.push(Op::NormalizeSum(v), out, 0))
    }

    /// Running sum down the rows: row `i` holds `Σ_{j<=i} x_j`.
    pub fn cumsum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = expect_matrix("cumsum_rows", xv)?;
        let mut out = xv.clone();
        let data = out.data_mut();
        for i in 1..n {
            let (prev, cur) = data.split_at_mut(i * c);
            let prev = &prev[(i - 1) * c..];
            cur[..c].iter_mut().zip(prev).for_each(|(o, &p)| *o += p);
        }
        let cost = (n.saturating_sub(1) * c) as u64;
        Ok(self.push(Op::CumsumRows(x), out, cost))
    }

    /// Row-wise outer products: row `i` is `a_iᵀ b_i` flattened row-major.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d) = expect_matrix("row_outer", av)?;
        let (n2, e) = expect_matrix("row_outer", bv)?;
        if n != n2 {
            return Err(MgkError::Dimension {
                op: "row_outer",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * d * e);
        for i in 0..n {
            for &x in av.row(i) {
                out.extend(bv.row(i).iter().map(|&y| x * y));
            }
        }
        let t = Tensor::new(vec![n, d * e], out)?;
        Ok(self.push(Op::RowOuter(a, b), t, (n * d * e) as u64))
    }

    /// Row-wise vector-matrix products: `y_i = q_i · S_i` where row `i` of
    /// `s` is a `D×E` matrix flattened row-major.
    pub fn row_vecmat(&mut self, q: Var, s: Var) -> Result<Var> {
        let (qv, sv) = (self.value(q), self.value(s));
        let (n, d) = expect_matrix("row_vecmat", qv)?;
        let (n2, de) = expect_matrix("row_vecmat", sv)?;
        if n != n2 || d == 0 || de % d != 0 {
            return Err(MgkError::Dimension {
                op: "row_vecmat",
                left: qv.shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let e = de / d;
        let mut out = vec![0.0; n * e];
        for i in 0..n {
            let srow = sv.row(i);
            let orow = &mut out[i * e..(i + 1) * e];
            for (dd, &qx) in qv.row(i).iter().enumerate() {
                orow.iter_mut()
                    .zip(&srow[dd * e..(dd + 1) * e])
                    .for_each(|(o, &sx)| *o += qx * sx);
            }
        }
        let t = Tensor::new(vec![n, e], out)?;
        Ok(self.push(Op::RowVecMat(q, s), t, matmul_cost(n, d, e)))
    }

    /// Row-wise dot products, as `N×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("row_dot", av, bv)?;
        let (n, c) = expect_matrix("row_dot", av)?;
        let out = (0..n)
            .map(|i| av.row(i).iter().zip(bv.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let t = Tensor::new(vec![n, 1], out)?;
        Ok(self.push(Op::RowDot(a, b), t, matmul_cost(n, c, 1)))
    }

    /// Divides each row of `a` by the matching entry of the `N×1` column `d`.
    pub fn div_rows(&mut self, a: Var, d: Var) -> Result<Var> {
        let (av, dv) = (self.value(a), self.value(d));
        let (n, c) = expect_matrix("div_rows", av)?;
        if dv.shape() != [n, 1] {
            return Err(MgkError::Dimension {
                op: "div_rows",
                left: av.shape().to_vec(),
                right: dv.shape().to_vec(),
            });
        }
        if let Some(row) = dv.data().iter().position(|&x| x == 0.0 || !x.is_finite()) {
            return Err(MgkError::DegenerateNormalizer { row });
        }
        let mut out = av.clone();
        for (row, &den) in out.data_mut().chunks_mut(c.max(1)).zip(dv.data()) {
            row.iter_mut().for_each(|v| *v /= den);
        }
        Ok(self.push(Op::DivRows(a, d), out, 0))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = expect_matrix("layer_norm_rows", xv)?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let (mean, inv) = row_stats(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        Ok(self.push(Op::LayerNormRows(x, eps), out, 0))
    }

    /// Gathers rows of an embedding table.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, c) = expect_matrix("embed_rows", tv)?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(MgkError::Contract(format!(
                    "token id {id} outside embedding table of {v} rows"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), c], out)?;
        Ok(self.push(Op::EmbedRows(table, ids.to_vec()), t, 0))
    }

    /// Softmax cross-entropy of a single logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(MgkError::Contract(format!(
                "label {label} outside {} classes",
                z.len()
            )));
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let t = Tensor::scalar(lse - z[label]);
        Ok(self.push(Op::CrossEntropy(logits, label), t, 0))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(MgkError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let da = tensor::matmul_nt(&dy, self.value(*b))?;
                    let db = tensor::matmul_tn(self.value(*a), &dy)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Transpose(a) => acc(&mut grads, *a, tensor::transpose(&dy)?),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, dy.map(|v| -v));
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&dy, self.value(*b), |g, x| g * x);
                    let db = zip_map(&dy, self.value(*a), |g, x| g * x);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRowBroadcast(x, b) => {
                    let bshape = self.value(*b).shape().to_vec();
                    let db = column_sums(&dy).reshape(&bshape)?;
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *x, dy);
                }
                Op::MulRowBroadcast(x, g) => {
                    let (xv, gv) = (self.value(*x), self.value(*g));
                    let c = gv.len();
                    let mut dx = dy.clone();
                    for row in dx.data_mut().chunks_mut(c.max(1)) {
                        row.iter_mut().zip(gv.data()).for_each(|(o, &gg)| *o *= gg);
                    }
                    let dg = column_sums(&zip_map(&dy, xv, |a, b| a * b))
                        .reshape(gv.shape())?;
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *g, dg);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, dy.map(|v| v * c)),
                Op::MulScalar(x, s) => {
                    let sv = self.value(*s);
                    let xv = self.value(*x);
                    let ds: f64 = dy.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    let s0 = sv.data()[0];
                    acc(&mut grads, *s, Tensor::filled(sv.shape(), ds));
                    acc(&mut grads, *x, dy.map(|v| v * s0));
                }
                Op::AddScalar(x, s) => {
                    let ds: f64 = dy.data().iter().sum();
                    let shape = self.value(*s).shape().to_vec();
                    acc(&mut grads, *s, Tensor::filled(&shape, ds));
                    acc(&mut grads, *x, dy);
                }
                Op::Exp(x) => acc(&mut grads, *x, zip_map(&dy, y, |g, e| g * e)),
                Op::Log(x) => acc(&mut grads, *x, zip_map(&dy, self.value(*x), |g, v| g / v)),
                Op::Relu(x) => acc(
                    &mut grads,
                    *x,
                    zip_map(&dy, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 }),
                ),
                Op::EluPlusOne(x) => acc(
                    &mut grads,
                    *x,
                    zip_map(&dy, self.value(*x), |g, v| {
                        if v >= 0.0 {
                            g
                        } else {
                            g * v.exp()
                        }
                    }),
                ),
                Op::SumAll(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, Tensor::filled(&shape, dy.data()[0]));
                }
                Op::SumRows(x) | Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let n = xv.rows();
                    let scale = if matches!(node.op, Op::MeanRows(_)) {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    let mut dx = Vec::with_capacity(xv.len());
                    for _ in 0..n {
                        dx.extend(dy.data().iter().map(|g| g * scale));
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::SqDist(q, k) => {
                    let (dq, dk) = sqdist_backward(&dy, self.value(*q), self.value(*k))?;
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                }
                Op::SoftmaxRows(x) => {
                    let c = y.cols();
                    let mut dx = zip_map(&dy, y, |g, p| g * p);
                    for (row, yrow) in dx.data_mut().chunks_mut(c.max(1)).zip(y.data().chunks(c.max(1))) {
                        let s: f64 = row.iter().sum();
                        row.iter_mut().zip(yrow).for_each(|(o, &p)| *o -= p * s);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LogSumExpStack(xs) => {
                    for &x in xs {
                        let dx = zip_map(self.value(x), y, |v, out| (v - out).exp());
                        acc(&mut grads, x, zip_map(&dx, &dy, |w, g| w * g));
                    }
                }
                Op::MaxStack(xs, arg) => {
                    for (r, &x) in xs.iter().enumerate() {
                        let data = dy
                            .data()
                            .iter()
                            .zip(arg)
                            .map(|(&g, &a)| if a as usize == r { g } else { 0.0 })
                            .collect();
                        acc(&mut grads, x, Tensor::new(dy.shape().to_vec(), data)?);
                    }
                }
                Op::ConcatCols(xs) => {
                    let n = dy.rows();
                    let total = dy.cols();
                    let mut offset = 0;
                    for &x in xs {
                        let c = self.value(x).cols();
                        let mut dx = Vec::with_capacity(n * c);
                        for i in 0..n {
                            dx.extend_from_slice(&dy.data()[i * total + offset..i * total + offset + c]);
                        }
                        acc(&mut grads, x, Tensor::new(vec![n, c], dx)?);
                        offset += c;
                    }
                }
                Op::Index(v, i) => {
                    let mut dv = Tensor::zeros(self.value(*v).shape());
                    dv.data_mut()[*i] = dy.data()[0];
                    acc(&mut grads, *v, dv);
                }
                Op::NormalizeSum(v) => {
                    let s: f64 = self.value(*v).data().iter().sum();
                    let dot: f64 = dy.data().iter().zip(y.data()).map(|(g, p)| g * p).sum();
                    acc(&mut grads, *v, dy.map(|g| (g - dot) / s));
                }
                Op::CumsumRows(x) => {
                    let (n, c) = (dy.rows(), dy.cols());
                    let mut dx = dy.clone();
                    let data = dx.data_mut();
                    for i in (0..n.saturating_sub(1)).rev() {
                        let (cur, next) = data.split_at_mut((i + 1) * c);
                        cur[i * c..].iter_mut().zip(&next[..c]).for_each(|(o, &nx)| *o += nx);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::RowOuter(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, d, e) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; n * d];
                    let mut db = vec![0.0; n * e];
                    for i in 0..n {
                        let g = dy.row(i);
                        for dd in 0..d {
                            let gr = &g[dd * e..(dd + 1) * e];
                            da[i * d + dd] = gr.iter().zip(bv.row(i)).map(|(x, y)| x * y).sum();
                            let ad = av.at(i, dd);
                            db[i * e..(i + 1) * e]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(o, &gx)| *o += gx * ad);
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(vec![n, d], da)?);
                    acc(&mut grads, *b, Tensor::new(vec![n, e], db)?);
                }
                Op::RowVecMat(q, s) => {
                    let (qv, sv) = (self.value(*q), self.value(*s));
                    let (n, d) = (qv.rows(), qv.cols());
                    let e = dy.cols();
                    let mut dq = vec![0.0; n * d];
                    let mut ds = vec![0.0; n * d * e];
                    for i in 0..n {
                        let g = dy.row(i);
                        let srow = sv.row(i);
                        for dd in 0..d {
                            let sr = &srow[dd * e..(dd + 1) * e];
                            dq[i * d + dd] = g.iter().zip(sr).map(|(x, y)| x * y).sum();
                            let qd = qv.at(i, dd);
                            ds[i * d * e + dd * e..i * d * e + (dd + 1) * e]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(o, &gx)| *o = qd * gx);
                        }
                    }
                    acc(&mut grads, *q, Tensor::new(vec![n, d], dq)?);
                    acc(&mut grads, *s, Tensor::new(vec![n, d * e], ds)?);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let c = av.cols();
                    let scale_rows = |src: &Tensor| {
                        let mut out = src.clone();
                        for (row, &g) in out.data_mut().chunks_mut(c.max(1)).zip(dy.data()) {
                            row.iter_mut().for_each(|v| *v *= g);
                        }
                        out
                    };
                    let da = scale_rows(bv);
                    let db = scale_rows(av);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::DivRows(a, d) => {
                    let (av, dv) = (self.value(*a), self.value(*d));
                    let c = av.cols();
                    let mut da = dy.clone();
                    let mut dd = vec![0.0; dv.len()];
                    for (i, row) in da.data_mut().chunks_mut(c.max(1)).enumerate() {
                        let den = dv.data()[i];
                        let arow = av.row(i);
                        dd[i] = -row.iter().zip(arow).map(|(g, x)| g * x).sum::<f64>() / (den * den);
                        row.iter_mut().for_each(|v| *v /= den);
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *d, Tensor::new(dv.shape().to_vec(), dd)?);
                }
                Op::LayerNormRows(x, eps) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = Vec::with_capacity(xv.len());
                    for i in 0..xv.rows() {
                        let (_, inv) = row_stats(xv.row(i), *eps);
                        let g = dy.row(i);
                        let yh = y.row(i);
                        let mg = g.iter().sum::<f64>() / c as f64;
                        let mgy = g.iter().zip(yh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        dx.extend(g.iter().zip(yh).map(|(&gg, &yy)| inv * (gg - mg - yy * mgy)));
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::EmbedRows(table, ids) => {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut dt = Tensor::zeros(tv.shape());
                    for (i, &id) in ids.iter().enumerate() {
                        dt.data_mut()[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(dy.row(i))
                            .for_each(|(o, &g)| *o += g);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::CrossEntropy(logits, label) => {
                    let zv = self.value(*logits);
                    let z = zv.data();
                    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    let g0 = dy.data()[0];
                    let mut dz: Vec<f64> = z.iter().map(|v| g0 * (v - m).exp() / s).collect();
                    dz[*label] -= g0;
                    acc(&mut grads, *logits, Tensor::new(zv.shape().to_vec(), dz)?);
                }
            }
            // Intermediate gradients are not kept; only leaves retain theirs.
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

pub(crate) fn elu_plus_one(u: f64) -> f64 {
    if u >= 0.0 {
        u + 1.0
    } else {
        u.exp()
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

fn column_sums(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for row in t.data().chunks(c.max(1)) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
    Tensor::vector(out)
}

fn sqdist_backward(dy: &Tensor, q: &Tensor, k: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, d) = (q.rows(), q.cols());
    let n2 = k.rows();
    let gk = tensor::matmul(dy, k)?; // N×D
    let gq = tensor::matmul_tn(dy, q)?; // N'×D
    let mut dq = vec![0.0; n * d];
    for i in 0..n {
        let rs: f64 = dy.row(i).iter().sum();
        for c in 0..d {
            dq[i * d + c] = 2.0 * (rs * q.at(i, c) - gk.at(i, c));
        }
    }
    let mut dk = vec![0.0; n2 * d];
    for j in 0..n2 {
        let cs: f64 = (0..n).map(|i| dy.at(i, j)).sum();
        for c in 0..d {
            dk[j * d + c] = 2.0 * (cs * k.at(j, c) - gq.at(j, c));
        }
    }
    Ok((Tensor::new(vec![n, d], dq)?, Tensor::new(vec![n2, d], dk)?))
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(e, &x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Central-difference check of `build` with respect to every input.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(out).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let o = build(&mut t, &vs).unwrap();
            t.value(o).data()[0]
        };
        let eps = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[which]);
            for e in 0..input.len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[e] += eps;
                let mut minus = inputs.clone();
                minus[which].data_mut()[e] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[e];
                assert!(
                    (a - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                    "input {which} entry {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    /// Projects an arbitrary-shape output onto a fixed random direction.
    fn contract(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let shape = tape.value(v).shape().to_vec();
        let w = random(&mut SplitMix64::new(seed), &shape);
        let w = tape.leaf(w);
        let p = tape.mul(v, w)?;
        Ok(tape.sum_all(p))
    }

    #[test]
    fn sum_and_half_square_norm() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let s = tape.sum_all(v);
        assert_eq!(tape.backward(s).unwrap().wrt(v).data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum_all(sq);
        let half = tape.scale(s, 0.5);
        assert_eq!(tape.backward(half).unwrap().wrt(v), x);
    }

    #[test]
    fn untouched_leaf_gets_zero_and_nonscalar_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![5.0]));
        let s = tape.sum_all(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).data(), &[0.0]);
        assert!(matches!(tape.backward(a), Err(MgkError::Contract(_))));
    }

    #[test]
    fn grad_matmul_transpose_add_sub_mul() {
        let mut rng = SplitMix64::new(1);
        let ins = vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]), random(&mut rng, &[3, 2])];
        check(ins, |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let a = t.add(m, v[2])?;
            let s = t.sub(a, v[2])?;
            let p = t.mul(s, a)?;
            let tr = t.transpose(p)?;
            contract(t, tr, 9)
        });
    }

    #[test]
    fn grad_broadcasts_and_scalars() {
        let mut rng = SplitMix64::new(2);
        let ins = vec![
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[1, 4]),
            random(&mut rng, &[4]),
            Tensor::scalar(0.7),
        ];
        check(ins, |t, v| {
            let a = t.add_row_broadcast(v[0], v[1])?;
            let b = t.mul_row_broadcast(a, v[2])?;
            let c = t.mul_scalar(b, v[3])?;
            let d = t.add_scalar(c, v[3])?;
            let e = t.scale(d, -1.3);
            contract(t, e, 4)
        });
    }

    #[test]
    fn grad_unary_maps() {
        let mut rng = SplitMix64::new(3);
        let x = random(&mut rng, &[4, 3]).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        check(vec![x.clone()], |t, v| {
            let e = t.exp(v[0]);
            let l = t.log(e);
            let r = t.relu(l);
            let f = t.elu_plus_one(v[0]);
            let s = t.add(r, f)?;
            contract(t, s, 5)
        });
    }

    #[test]
    fn grad_reductions() {
        let mut rng = SplitMix64::new(4);
        check(vec![random(&mut rng, &[5, 3])], |t, v| {
            let a = t.sum_rows(v[0])?;
            let b = t.mean_rows(v[0])?;
            let c = t.add(a, b)?;
            let d = t.cumsum_rows(v[0])?;
            let x = contract(t, c, 1)?;
            let y = contract(t, d, 2)?;
            t.add(x, y)
        });
    }

    #[test]
    fn grad_sqdist_and_softmax() {
        let mut rng = SplitMix64::new(5);
        let ins = vec![random(&mut rng, &[3, 2]), random(&mut rng, &[4, 2])];
        check(ins, |t, v| {
            let d = t.sqdist(v[0], v[1])?;
            let s = t.scale(d, -0.5);
            let a = t.softmax_rows(s, None)?;
            contract(t, a, 6)
        });
        let ins = vec![random(&mut rng, &[4, 4])];
        let mask = Mask::causal(4);
        check(ins, move |t, v| {
            let a = t.softmax_rows(v[0], Some(&mask))?;
            contract(t, a, 7)
        });
    }

    #[test]
    fn grad_stacks_concat_index_normalize() {
        let mut rng = SplitMix64::new(6);
        let ins = vec![
            random(&mut rng, &[3, 3]),
            random(&mut rng, &[3, 3]),
            Tensor::vector(vec![0.3, 0.9]),
        ];
        check(ins, |t, v| {
            let l = t.logsumexp_stack(&[v[0], v[1]])?;
            let m = t.max_stack(&[v[0], v[1]])?;
            let c = t.concat_cols(&[l, m])?;
            let p = t.normalize_sum(v[2])?;
            let p1 = t.index(p, 1)?;
            let w = t.mul_scalar(c, p1)?;
            contract(t, w, 8)
        });
    }

    #[test]
    fn grad_row_ops() {
        let mut rng = SplitMix64::new(7);
        let ins = vec![
            random(&mut rng, &[4, 3]),
            random(&mut rng, &[4, 2]),
            random(&mut rng, &[4, 3]),
        ];
        check(ins, |t, v| {
            let o = t.row_outer(v[0], v[1])?;
            let h = t.row_vecmat(v[2], o)?;
            let dot = t.row_dot(v[0], v[2])?;
            let pos = t.exp(dot);
            let r = t.div_rows(h, pos)?;
            contract(t, r, 10)
        });
    }

    #[test]
    fn grad_layer_norm_embed_cross_entropy() {
        let mut rng = SplitMix64::new(8);
        let ins = vec![random(&mut rng, &[5, 4]), random(&mut rng, &[4, 3])];
        check(ins, |t, v| {
            let e = t.embed_rows(v[0], &[1, 3, 1])?;
            let n = t.layer_norm_rows(e, 1e-5)?;
            let z = t.matmul(n, v[1])?;
            let p = t.mean_rows(z)?;
            t.cross_entropy(p, 2)
        });
    }

    #[test]
    fn flop_charges() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 4]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops(), 2 * 4 * 5);
        let c = tape.leaf(Tensor::zeros(&[5, 3]));
        tape.sqdist(a, c).unwrap();
        assert_eq!(tape.flops(), 40 + 2 * 5 * 5);
        let s = tape.scale(a, 2.0);
        tape.softmax_rows(s, None).unwrap();
        assert_eq!(tape.flops(), 90);
    }
}
