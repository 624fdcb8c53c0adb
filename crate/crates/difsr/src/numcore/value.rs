//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Value`] is one node in an acyclic computation graph: row-major data,
//! an optional same-shape gradient buffer, and the operands plus backward
//! rule that produced it. Gradients accumulate with `+=` into each node, so
//! a tensor consumed by several downstream ops receives the sum of their
//! contributions in a fixed (reverse-topological) order — the property the
//! gradient-rigidity diagnostics rely on.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule tag. Carries whatever forward-pass context the gradient
/// needs beyond the parents' data.
enum Rule {
    Leaf,
    Add,
    /// `[B, r, c] + [r, c]`, the right operand broadcast over the batch axis.
    AddBcast,
    /// `[.., d] + [d]`.
    AddBias,
    Mul,
    Scale(f64),
    /// `[.., k] · [k, n]` with leading axes of the left operand collapsed.
    Matmul,
    /// `[.., k] · [n, k]ᵀ`.
    MatmulNt,
    /// Batched `[B, r, k] · [B, k, c]`.
    Bmm,
    /// Batched `[B, r, k] · [B, c, k]ᵀ`.
    BmmNt,
    Reshape,
    /// Softmax over the last axis; `false` entries are forced to exactly 0.
    MaskedSoftmax { mask: Option<Rc<Vec<bool>>> },
    /// Normalization stats cached from the forward pass.
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { indices: Rc<Vec<usize>> },
    /// Per output row, the mean of a set of table rows (empty set → zeros).
    GatherMeanRows { groups: Rc<Vec<Vec<usize>>> },
    Gelu,
    Sigmoid,
    Sum,
    ConcatLast,
    Dropout { mask: Rc<Vec<bool>>, scale: f64 },
    /// Mean over rows of −log softmax(row)[target].
    CrossEntropyMean { targets: Rc<Vec<usize>> },
    /// Mean over rows of summed binary cross-entropy against 0/1 targets.
    BceMean { targets: Rc<Vec<f64>>, eps: f64 },
    /// `m * coeffs[idx]` where `coeffs` is the second parent (1-D).
    MulCoeff { idx: usize },
    /// `m + coeffs[idx]` broadcast to every element.
    AddCoeff { idx: usize },
    /// Overwrite the given last-axis columns with a constant.
    MaskColumns { cols: Rc<Vec<usize>> },
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Value>,
    rule: Rule,
    requires_grad: bool,
}

/// Handle to a graph node. Cloning is cheap (reference-counted).
#[derive(Clone)]
pub struct Value {
    node: Rc<Node>,
}

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Value")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Value {
    fn with_flag(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Value>,
        rule: Rule,
        requires_grad: bool,
    ) -> Value {
        debug_assert_eq!(numel(&shape), data.len());
        Value {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                parents,
                rule,
                requires_grad,
            }),
        }
    }

    fn new(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Value>, rule: Rule) -> Value {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Value::with_flag(shape, data, parents, rule, requires_grad)
    }

    /// Leaf that participates in differentiation (a learnable tensor).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Value {
        assert_eq!(
            numel(shape),
            data.len(),
            "param data length {} != shape {:?}",
            data.len(),
            shape
        );
        Value::with_flag(shape.to_vec(), data, vec![], Rule::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Value {
        assert_eq!(numel(shape), data.len());
        Value::with_flag(shape.to_vec(), data, vec![], Rule::Leaf, false)
    }

    pub fn zeros(shape: &[usize]) -> Value {
        Value::constant(shape, vec![0.0; numel(shape)])
    }

    pub fn scalar(x: f64) -> Value {
        Value::constant(&[], vec![x])
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Scalar content of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.node.shape);
        self.node.data.borrow()[0]
    }

    /// Overwrite the stored data (used by the optimizer; caller keeps shape).
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel());
        *self.node.data.borrow_mut() = data;
    }

    /// In-place mutation of the stored data.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.node.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    /// Read the gradient without cloning it.
    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[f64]>) -> R) -> R {
        f(self.node.grad.borrow().as_deref())
    }

    pub fn reset_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn last_dim(&self) -> usize {
        *self.node.shape.last().unwrap_or(&1)
    }

    fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.numel() / d
        }
    }

    fn dim_err(op: &'static str, a: &Value, b: &Value) -> Error {
        Error::DimMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn add(&self, other: &Value) -> Result<Value> {
        if self.shape() != other.shape() {
            return Err(Self::dim_err("add", self, other));
        }
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Ok(Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Rule::Add,
        ))
    }

    /// `[B, r, c] + [r, c]` with the right side repeated along the batch axis.
    pub fn add_bcast(&self, other: &Value) -> Result<Value> {
        if self.ndim() != 3 || other.ndim() != 2 || self.shape()[1..] != *other.shape() {
            return Err(Self::dim_err("add_bcast", self, other));
        }
        let chunk = other.numel();
        let data = {
            let a = self.data();
            let b = other.data();
            a.chunks(chunk)
                .flat_map(|blk| blk.iter().zip(b.iter()).map(|(x, y)| x + y))
                .collect()
        };
        Ok(Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Rule::AddBcast,
        ))
    }

    /// `[.., d] + [d]`.
    pub fn add_bias(&self, bias: &Value) -> Result<Value> {
        if bias.ndim() != 1 || self.last_dim() != bias.numel() {
            return Err(Self::dim_err("add_bias", self, bias));
        }
        let d = bias.numel();
        let data = {
            let a = self.data();
            let b = bias.data();
            a.chunks(d)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(x, y)| x + y))
                .collect()
        };
        Ok(Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Rule::AddBias,
        ))
    }

    pub fn mul(&self, other: &Value) -> Result<Value> {
        if self.shape() != other.shape() {
            return Err(Self::dim_err("mul", self, other));
        }
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Rule::Mul,
        ))
    }

    pub fn scale(&self, c: f64) -> Value {
        let data = self.data().iter().map(|x| x * c).collect();
        Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Rule::Scale(c),
        )
    }

    // ── matrix products ──────────────────────────────────────────────────

    /// `[.., k] · [k, n]`: leading axes of `self` are treated as stacked rows.
    pub fn matmul(&self, other: &Value) -> Result<Value> {
        if other.ndim() != 2 || self.ndim() < 1 || self.last_dim() != other.shape()[0] {
            return Err(Self::dim_err("matmul", self, other));
        }
        let k = self.last_dim();
        let n = other.shape()[1];
        let m = self.rows();
        let mut out = vec![0.0; m * n];
        mm_acc(&self.data(), &other.data(), m, k, n, &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Value::new(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Rule::Matmul,
        ))
    }

    /// `[.., k] · [n, k]ᵀ`.
    pub fn matmul_nt(&self, other: &Value) -> Result<Value> {
        if other.ndim() != 2 || self.ndim() < 1 || self.last_dim() != other.shape()[1] {
            return Err(Self::dim_err("matmul_nt", self, other));
        }
        let k = self.last_dim();
        let n = other.shape()[0];
        let m = self.rows();
        let mut out = vec![0.0; m * n];
        mm_nt_acc(&self.data(), &other.data(), m, k, n, &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Value::new(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Rule::MatmulNt,
        ))
    }

    /// Batched `[B, r, k] · [B, k, c]`.
    pub fn bmm(&self, other: &Value) -> Result<Value> {
        if self.ndim() != 3
            || other.ndim() != 3
            || self.shape()[0] != other.shape()[0]
            || self.shape()[2] != other.shape()[1]
        {
            return Err(Self::dim_err("bmm", self, other));
        }
        let (b, r, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let c = other.shape()[2];
        let mut out = vec![0.0; b * r * c];
        {
            let a = self.data();
            let bb = other.data();
            for i in 0..b {
                mm_acc(
                    &a[i * r * k..(i + 1) * r * k],
                    &bb[i * k * c..(i + 1) * k * c],
                    r,
                    k,
                    c,
                    &mut out[i * r * c..(i + 1) * r * c],
                );
            }
        }
        Ok(Value::new(
            vec![b, r, c],
            out,
            vec![self.clone(), other.clone()],
            Rule::Bmm,
        ))
    }

    /// Batched `[B, r, k] · [B, c, k]ᵀ`.
    pub fn bmm_nt(&self, other: &Value) -> Result<Value> {
        if self.ndim() != 3
            || other.ndim() != 3
            || self.shape()[0] != other.shape()[0]
            || self.shape()[2] != other.shape()[2]
        {
            return Err(Self::dim_err("bmm_nt", self, other));
        }
        let (b, r, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let c = other.shape()[1];
        let mut out = vec![0.0; b * r * c];
        {
            let a = self.data();
            let bb = other.data();
            for i in 0..b {
                mm_nt_acc(
                    &a[i * r * k..(i + 1) * r * k],
                    &bb[i * c * k..(i + 1) * c * k],
                    r,
                    k,
                    c,
                    &mut out[i * r * c..(i + 1) * r * c],
                );
            }
        }
        Ok(Value::new(
            vec![b, r, c],
            out,
            vec![self.clone(), other.clone()],
            Rule::BmmNt,
        ))
    }

    // ── shape ────────────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Value> {
        if numel(shape) != self.numel() {
            return Err(Error::DimMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Value::new(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Rule::Reshape,
        ))
    }

    /// Concatenate along the last axis. All parts must share leading axes.
    pub fn concat_last(parts: &[Value]) -> Result<Value> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_last on empty list".into()))?;
        let lead = &first.shape()[..first.ndim() - 1];
        let rows = first.rows();
        let mut total_d = 0;
        for p in parts {
            if p.ndim() != first.ndim() || &p.shape()[..p.ndim() - 1] != lead {
                return Err(Self::dim_err("concat_last", first, p));
            }
            total_d += p.last_dim();
        }
        let mut out = vec![0.0; rows * total_d];
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for r in 0..rows {
            let mut off = 0;
            for (p, d) in parts.iter().zip(datas.iter()) {
                let w = p.last_dim();
                out[r * total_d + off..r * total_d + off + w]
                    .copy_from_slice(&d[r * w..(r + 1) * w]);
                off += w;
            }
        }
        drop(datas);
        let mut shape = lead.to_vec();
        shape.push(total_d);
        Ok(Value::new(shape, out, parts.to_vec(), Rule::ConcatLast))
    }

    // ── nonlinearities and normalization ─────────────────────────────────

    /// Softmax over the last axis. `mask` (same length as the data, `true` =
    /// keep) zeroes masked entries exactly; every row needs at least one kept
    /// entry. Row maxima are subtracted before exponentiation.
    pub fn masked_softmax(&self, mask: Option<Rc<Vec<bool>>>) -> Result<Value> {
        let c = self.last_dim();
        let rows = self.rows();
        if let Some(m) = &mask {
            if m.len() != self.numel() {
                return Err(Error::Contract(format!(
                    "softmax mask length {} != tensor size {}",
                    m.len(),
                    self.numel()
                )));
            }
        }
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let kept = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j]);
                let mut max = f64::NEG_INFINITY;
                for j in 0..c {
                    if kept(j) && row[j] > max {
                        max = row[j];
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateRow { row: r });
                }
                let mut sum = 0.0;
                for j in 0..c {
                    if kept(j) {
                        let e = (row[j] - max).exp();
                        out[r * c + j] = e;
                        sum += e;
                    }
                }
                for j in 0..c {
                    if kept(j) {
                        out[r * c + j] /= sum;
                    }
                }
            }
        }
        Ok(Value::new(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Rule::MaskedSoftmax { mask },
        ))
    }

    /// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Value, bias: &Value, eps: f64) -> Result<Value> {
        let d = self.last_dim();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Self::dim_err("layer_norm", self, gain));
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let rows = self.rows();
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            let g = gain.data();
            let b = bias.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = g[j] * h + b[j];
                }
            }
        }
        Ok(Value::new(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Rule::LayerNorm { xhat, inv_std },
        ))
    }

    pub fn gelu(&self) -> Value {
        let data = self.data().iter().map(|&x| gelu_fwd(x)).collect();
        Value::new(self.shape().to_vec(), data, vec![self.clone()], Rule::Gelu)
    }

    pub fn sigmoid(&self) -> Value {
        let data = self.data().iter().map(|&x| sigmoid_fwd(x)).collect();
        Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Rule::Sigmoid,
        )
    }

    /// Inverted dropout: kept entries are rescaled by `1/keep`.
    pub fn dropout(&self, mask: Rc<Vec<bool>>, rate: f64) -> Result<Value> {
        if mask.len() != self.numel() {
            return Err(Error::Contract(format!(
                "dropout mask length {} != tensor size {}",
                mask.len(),
                self.numel()
            )));
        }
        let scale = 1.0 / (1.0 - rate);
        let data = {
            let x = self.data();
            x.iter()
                .zip(mask.iter())
                .map(|(v, &keep)| if keep { v * scale } else { 0.0 })
                .collect()
        };
        Ok(Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Rule::Dropout { mask, scale },
        ))
    }

    // ── gathers ──────────────────────────────────────────────────────────

    /// Row lookup: output row `i` is table row `indices[i]`. The backward
    /// pass scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Value> {
        let d = self.last_dim();
        let rows = self.rows();
        for &ix in indices {
            if ix >= rows {
                return Err(Error::IndexOutOfRange {
                    index: ix,
                    len: rows,
                });
            }
        }
        let mut out = vec![0.0; indices.len() * d];
        {
            let t = self.data();
            for (i, &ix) in indices.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&t[ix * d..(ix + 1) * d]);
            }
        }
        Ok(Value::new(
            vec![indices.len(), d],
            out,
            vec![self.clone()],
            Rule::GatherRows {
                indices: Rc::new(indices.to_vec()),
            },
        ))
    }

    /// Row-set average: output row `i` is the mean of the table rows listed
    /// in `groups[i]`; an empty group yields a zero row.
    pub fn gather_mean_rows(&self, groups: Rc<Vec<Vec<usize>>>) -> Result<Value> {
        let d = self.last_dim();
        let rows = self.rows();
        for g in groups.iter() {
            for &ix in g {
                if ix >= rows {
                    return Err(Error::IndexOutOfRange {
                        index: ix,
                        len: rows,
                    });
                }
            }
        }
        let mut out = vec![0.0; groups.len() * d];
        {
            let t = self.data();
            for (i, g) in groups.iter().enumerate() {
                if g.is_empty() {
                    continue;
                }
                let inv = 1.0 / g.len() as f64;
                let row = &mut out[i * d..(i + 1) * d];
                for &ix in g {
                    let src = &t[ix * d..(ix + 1) * d];
                    for j in 0..d {
                        row[j] += src[j];
                    }
                }
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
        }
        Ok(Value::new(
            vec![groups.len(), d],
            out,
            vec![self.clone()],
            Rule::GatherMeanRows { groups },
        ))
    }

    // ── reductions and losses ────────────────────────────────────────────

    pub fn sum(&self) -> Value {
        let s: f64 = self.data().iter().sum();
        Value::new(vec![], vec![s], vec![self.clone()], Rule::Sum)
    }

    /// Mean over rows of −log softmax(row)[target], stabilized by
    /// log-sum-exp.
    pub fn cross_entropy_mean(&self, targets: &[usize]) -> Result<Value> {
        let c = self.last_dim();
        let rows = self.rows();
        if targets.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy_mean: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        for &t in targets {
            if t >= c {
                return Err(Error::IndexOutOfRange { index: t, len: c });
            }
        }
        let mut total = 0.0;
        {
            let x = self.data();
            for (r, &t) in targets.iter().enumerate() {
                let row = &x[r * c..(r + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        Ok(Value::new(
            vec![],
            vec![total / rows as f64],
            vec![self.clone()],
            Rule::CrossEntropyMean {
                targets: Rc::new(targets.to_vec()),
            },
        ))
    }

    /// Mean over rows of Σ −[y·log p + (1−y)·log(1−p)], with probabilities
    /// clamped to `[eps, 1−eps]`.
    pub fn bce_mean(&self, targets: &[f64], eps: f64) -> Result<Value> {
        if targets.len() != self.numel() {
            return Err(Error::Contract(format!(
                "bce_mean: {} targets for {} probabilities",
                targets.len(),
                self.numel()
            )));
        }
        let rows = self.rows().max(1);
        let mut total = 0.0;
        {
            let p = self.data();
            for (v, y) in p.iter().zip(targets.iter()) {
                let q = v.clamp(eps, 1.0 - eps);
                total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            }
        }
        Ok(Value::new(
            vec![],
            vec![total / rows as f64],
            vec![self.clone()],
            Rule::BceMean {
                targets: Rc::new(targets.to_vec()),
                eps,
            },
        ))
    }

    // ── scalar-coefficient helpers (fusion gates) ────────────────────────

    /// `self * coeffs[idx]`, differentiable in both operands.
    pub fn mul_coeff(&self, coeffs: &Value, idx: usize) -> Result<Value> {
        if idx >= coeffs.numel() {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: coeffs.numel(),
            });
        }
        let c = coeffs.data()[idx];
        let data = self.data().iter().map(|x| x * c).collect();
        Ok(Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone(), coeffs.clone()],
            Rule::MulCoeff { idx },
        ))
    }

    /// `self + coeffs[idx]` broadcast to every element.
    pub fn add_coeff(&self, coeffs: &Value, idx: usize) -> Result<Value> {
        if idx >= coeffs.numel() {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: coeffs.numel(),
            });
        }
        let c = coeffs.data()[idx];
        let data = self.data().iter().map(|x| x + c).collect();
        Ok(Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone(), coeffs.clone()],
            Rule::AddCoeff { idx },
        ))
    }

    /// Overwrite the listed last-axis columns with `fill`; no gradient flows
    /// through the overwritten entries.
    pub fn mask_columns(&self, cols: &[usize], fill: f64) -> Result<Value> {
        let d = self.last_dim();
        for &cix in cols {
            if cix >= d {
                return Err(Error::IndexOutOfRange { index: cix, len: d });
            }
        }
        let rows = self.rows();
        let mut data = self.to_vec();
        for r in 0..rows {
            for &cix in cols {
                data[r * d + cix] = fill;
            }
        }
        Ok(Value::new(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Rule::MaskColumns {
                cols: Rc::new(cols.to_vec()),
            },
        ))
    }
}

// ── backward ─────────────────────────────────────────────────────────────

/// Reverse-mode sweep from a scalar root. Every node with `requires_grad`
/// that contributed to the root ends up holding dL/dnode. Calling this
/// twice on the same root without resetting gradients is an error.
pub fn backward(root: &Value) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    if root.node.grad.borrow().is_some() {
        return Err(Error::BackwardRepeated);
    }
    if !root.node.requires_grad {
        return Ok(()); // nothing to differentiate
    }

    // Iterative DFS producing reverse topological order; each node visited
    // exactly once. Subtrees that do not require gradients are skipped.
    let mut order: Vec<Value> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack: Vec<(Value, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.node.id);
    while let Some((v, pi)) = stack.pop() {
        if pi < v.node.parents.len() {
            stack.push((v.clone(), pi + 1));
            let p = v.node.parents[pi].clone();
            if p.node.requires_grad && visited.insert(p.node.id) {
                stack.push((p, 0));
            }
        } else {
            order.push(v);
        }
    }

    *root.node.grad.borrow_mut() = Some(vec![1.0]);
    for v in order.iter().rev() {
        let grad = v.node.grad.borrow().clone().unwrap_or_else(|| {
            // Reachable from the root strictly through parent edges, so a
            // gradient must have been deposited already.
            unreachable!("node {} missing gradient during backward", v.node.id)
        });
        propagate(v, &grad);
    }
    Ok(())
}

fn add_into(node: &Value, contrib: impl FnOnce(&mut [f64])) {
    if !node.node.requires_grad {
        return;
    }
    let mut slot = node.node.grad.borrow_mut();
    let buf = slot.get_or_insert_with(|| vec![0.0; node.numel()]);
    contrib(buf);
}

fn propagate(v: &Value, g: &[f64]) {
    let parents = &v.node.parents;
    match &v.node.rule {
        Rule::Leaf => {}
        Rule::Add => {
            add_into(&parents[0], |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            });
            add_into(&parents[1], |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            });
        }
        Rule::AddBcast => {
            add_into(&parents[0], |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            });
            let chunk = parents[1].numel();
            add_into(&parents[1], |buf| {
                for (i, gi) in g.iter().enumerate() {
                    buf[i % chunk] += gi;
                }
            });
        }
        Rule::AddBias => {
            add_into(&parents[0], |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            });
            let d = parents[1].numel();
            add_into(&parents[1], |buf| {
                for (i, gi) in g.iter().enumerate() {
                    buf[i % d] += gi;
                }
            });
        }
        Rule::Mul => {
            let a = parents[0].to_vec();
            let b = parents[1].to_vec();
            add_into(&parents[0], |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * b[i];
                }
            });
            add_into(&parents[1], |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * a[i];
                }
            });
        }
        Rule::Scale(c) => {
            let c = *c;
            add_into(&parents[0], |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi * c;
                }
            });
        }
        Rule::Matmul => {
            let (a, b) = (&parents[0], &parents[1]);
            let k = a.last_dim();
            let n = b.shape()[1];
            let m = a.rows();
            add_into(a, |buf| mm_nt_acc(g, &b.data(), m, n, k, buf));
            add_into(b, |buf| mm_tn_acc(&a.data(), g, m, k, n, buf));
        }
        Rule::MatmulNt => {
            let (a, b) = (&parents[0], &parents[1]);
            let k = a.last_dim();
            let n = b.shape()[0];
            let m = a.rows();
            // out = a·bᵀ: ∇a += g·b, ∇b += gᵀ·a
            add_into(a, |buf| mm_acc(g, &b.data(), m, n, k, buf));
            add_into(b, |buf| mm_tn_acc(g, &a.data(), m, n, k, buf));
        }
        Rule::Bmm => {
            let (a, b) = (&parents[0], &parents[1]);
            let (bs, r, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let c = b.shape()[2];
            add_into(a, |buf| {
                let bd = b.data();
                for i in 0..bs {
                    mm_nt_acc(
                        &g[i * r * c..(i + 1) * r * c],
                        &bd[i * k * c..(i + 1) * k * c],
                        r,
                        c,
                        k,
                        &mut buf[i * r * k..(i + 1) * r * k],
                    );
                }
            });
            add_into(b, |buf| {
                let ad = a.data();
                for i in 0..bs {
                    mm_tn_acc(
                        &ad[i * r * k..(i + 1) * r * k],
                        &g[i * r * c..(i + 1) * r * c],
                        r,
                        k,
                        c,
                        &mut buf[i * k * c..(i + 1) * k * c],
                    );
                }
            });
        }
        Rule::BmmNt => {
            let (a, b) = (&parents[0], &parents[1]);
            let (bs, r, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let c = b.shape()[1];
            add_into(a, |buf| {
                let bd = b.data();
                for i in 0..bs {
                    mm_acc(
                        &g[i * r * c..(i + 1) * r * c],
                        &bd[i * c * k..(i + 1) * c * k],
                        r,
                        c,
                        k,
                        &mut buf[i * r * k..(i + 1) * r * k],
                    );
                }
            });
            add_into(b, |buf| {
                let ad = a.data();
                for i in 0..bs {
                    mm_tn_acc(
                        &g[i * r * c..(i + 1) * r * c],
                        &ad[i * r * k..(i + 1) * r * k],
                        r,
                        c,
                        k,
                        &mut buf[i * c * k..(i + 1) * c * k],
                    );
                }
            });
        }
        Rule::Reshape => {
            add_into(&parents[0], |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            });
        }
        Rule::MaskedSoftmax { mask } => {
            let y = v.to_vec();
            let c = v.last_dim();
            add_into(&parents[0], |buf| {
                for r in 0..y.len() / c {
                    let kept = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j]);
                    let mut dot = 0.0;
                    for j in 0..c {
                        if kept(j) {
                            dot += g[r * c + j] * y[r * c + j];
                        }
                    }
                    for j in 0..c {
                        if kept(j) {
                            buf[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
                        }
                    }
                }
            });
        }
        Rule::LayerNorm { xhat, inv_std } => {
            let d = v.last_dim();
            let rows = inv_std.len();
            let gain = parents[1].to_vec();
            add_into(&parents[0], |buf| {
                for r in 0..rows {
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    for j in 0..d {
                        let h = g[r * d + j] * gain[j];
                        mean_h += h;
                        mean_hx += h * xhat[r * d + j];
                    }
                    mean_h /= d as f64;
                    mean_hx /= d as f64;
                    for j in 0..d {
                        let h = g[r * d + j] * gain[j];
                        buf[r * d + j] += inv_std[r] * (h - mean_h - xhat[r * d + j] * mean_hx);
                    }
                }
            });
            add_into(&parents[1], |buf| {
                for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            add_into(&parents[2], |buf| {
                for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g[r * d + j];
                    }
                }
            });
        }
        Rule::GatherRows { indices } => {
            let d = parents[0].last_dim();
            add_into(&parents[0], |buf| {
                for (i, &ix) in indices.iter().enumerate() {
                    let src = &g[i * d..(i + 1) * d];
                    let dst = &mut buf[ix * d..(ix + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
            });
        }
        Rule::GatherMeanRows { groups } => {
            let d = parents[0].last_dim();
            add_into(&parents[0], |buf| {
                for (i, grp) in groups.iter().enumerate() {
                    if grp.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / grp.len() as f64;
                    let src = &g[i * d..(i + 1) * d];
                    for &ix in grp {
                        let dst = &mut buf[ix * d..(ix + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j] * inv;
                        }
                    }
                }
            });
        }
        Rule::Gelu => {
            let x = parents[0].to_vec();
            add_into(&parents[0], |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * gelu_grad(x[i]);
                }
            });
        }
        Rule::Sigmoid => {
            let y = v.to_vec();
            add_into(&parents[0], |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Rule::Sum => {
            let s = g[0];
            add_into(&parents[0], |buf| {
                for b in buf.iter_mut() {
                    *b += s;
                }
            });
        }
        Rule::ConcatLast => {
            let rows = v.rows();
            let total_d = v.last_dim();
            let mut off = 0;
            for p in parents {
                let w = p.last_dim();
                let start = off;
                add_into(p, |buf| {
                    for r in 0..rows {
                        let src = &g[r * total_d + start..r * total_d + start + w];
                        let dst = &mut buf[r * w..(r + 1) * w];
                        for j in 0..w {
                            dst[j] += src[j];
                        }
                    }
                });
                off += w;
            }
        }
        Rule::Dropout { mask, scale } => {
            let scale = *scale;
            add_into(&parents[0], |buf| {
                for i in 0..g.len() {
                    if mask[i] {
                        buf[i] += g[i] * scale;
                    }
                }
            });
        }
        Rule::CrossEntropyMean { targets } => {
            let x = parents[0].to_vec();
            let c = parents[0].last_dim();
            let rows = targets.len();
            let gscale = g[0] / rows as f64;
            add_into(&parents[0], |buf| {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &x[r * c..(r + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / sum;
                        let delta = if j == t { 1.0 } else { 0.0 };
                        buf[r * c + j] += gscale * (p - delta);
                    }
                }
            });
        }
        Rule::BceMean { targets, eps } => {
            let p = parents[0].to_vec();
            let rows = parents[0].rows().max(1);
            let gscale = g[0] / rows as f64;
            let eps = *eps;
            add_into(&parents[0], |buf| {
                for i in 0..p.len() {
                    // Zero gradient where the clamp is active: the forward
                    // value is constant there.
                    if p[i] > eps && p[i] < 1.0 - eps {
                        buf[i] += gscale * (p[i] - targets[i]) / (p[i] * (1.0 - p[i]));
                    }
                }
            });
        }
        Rule::MulCoeff { idx } => {
            let idx = *idx;
            let c = parents[1].data()[idx];
            let m = parents[0].to_vec();
            add_into(&parents[0], |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * c;
                }
            });
            add_into(&parents[1], |buf| {
                let mut acc = 0.0;
                for i in 0..g.len() {
                    acc += g[i] * m[i];
                }
                buf[idx] += acc;
            });
        }
        Rule::AddCoeff { idx } => {
            let idx = *idx;
            add_into(&parents[0], |buf| {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            });
            add_into(&parents[1], |buf| {
                buf[idx] += g.iter().sum::<f64>();
            });
        }
        Rule::MaskColumns { cols, .. } => {
            let d = v.last_dim();
            let masked: std::collections::HashSet<usize> = cols.iter().cloned().collect();
            add_into(&parents[0], |buf| {
                for i in 0..g.len() {
                    if !masked.contains(&(i % d)) {
                        buf[i] += g[i];
                    }
                }
            });
        }
    }
}

// ── scalar kernels ───────────────────────────────────────────────────────

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── matmul kernels (row-major) ───────────────────────────────────────────

/// out[m×n] += a[m×k] · b[k×n]
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            orow[j] += acc;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}
