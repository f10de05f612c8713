//! Reverse-mode gradient tape.
//!
//! Operations append nodes to a [`Tape`]; each node stores its forward value
//! and enough context for an exact vector-Jacobian product. [`Tape::backward`]
//! consumes the tape, replays the ops in reverse and returns gradients for
//! every `requires_grad` leaf.
//!
//! The op set is exactly what the transformer and the losses need. All
//! reductions run in a fixed order, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<E> {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: E },
    AddScalar { a: Var },
    ClampMin { a: Var, c: E },
    ClampMax { a: Var, c: E },
    Log { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, gain: Var, bias: Var, eps: E },
    Mean { a: Var },
    Sum { a: Var },
    Recip { a: Var },
    MulScalarVar { a: Var, s: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

/// Gradients keyed by the `Var` handles of the consumed tape.
#[derive(Debug)]
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// out[i*n + j] += sum_k a[i*k + p] * b[p*n + j], fixed p-ascending order.
fn matmul_kernel<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_kernel<E: Scalar>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_scalar<E: Scalar>(x: E) -> E {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let half = E::from_f64(0.5);
    let one = E::one();
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(GELU_COEF);
    let u = c * (x + k * x * x * x);
    half * x * (one + u.tanh())
}

fn gelu_grad_scalar<E: Scalar>(x: E) -> E {
    let half = E::from_f64(0.5);
    let one = E::one();
    let three = E::from_f64(3.0);
    let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64(GELU_COEF);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (one + three * k * x * x);
    half * (one + t) + half * x * (one - t * t) * du
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor; grad participation follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Register a tensor that never receives gradient.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: E) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    // ---- ops ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.val(a).data(), self.val(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose_kernel(self.val(a).data(), r, c);
        let out = Tensor::new(vec![c, r], data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Transpose { a }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.val(a).reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape { a }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Numeric("concat_rows: empty part list".into()));
        }
        let cols = self.val(parts[0]).shape().get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != 2 || s[1] != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.val(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.val(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Numeric("concat_cols: empty part list".into()));
        }
        let rows = self.val(parts[0]).shape().first().copied().unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.val(parts[0]).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            cols += s[1];
        }
        let mut data = vec![E::zero(); rows * cols];
        let mut offset = 0;
        for &p in parts {
            let pc = self.val(p).shape()[1];
            let pd = self.val(p).data();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&pd[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.val(a).shape();
        if s.len() != 2 || start + len > s[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: s.to_vec(),
                rhs: vec![start, len],
            });
        }
        let cols = s[1];
        let data = self.val(a).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(vec![len, cols], data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.val(a).shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: s.to_vec(),
                rhs: vec![start, len],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.val(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceCols { a, start }, ng))
    }

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::Shape {
                op,
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<E> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Broadcast-add a `[n]` (or `[1, n]`) row vector over every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let sa = self.val(a).shape().to_vec();
        let n = *self.val(row).shape().last().unwrap_or(&0);
        if sa.len() != 2 || sa[1] != n || self.val(row).numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: sa,
                rhs: self.val(row).shape().to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let rd = self.val(row).data();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(self.val(a).data()[r * n + c] + rd[c]);
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow { a, row }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<E> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<E> = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let data: Vec<E> = self.val(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let data: Vec<E> = self.val(a).data().iter().map(|&x| x + c).collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::AddScalar { a }, ng)
    }

    pub fn clamp_min(&mut self, a: Var, c: E) -> Var {
        let data: Vec<E> = self.val(a).data().iter().map(|&x| x.max(c)).collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::ClampMin { a, c }, ng)
    }

    pub fn clamp_max(&mut self, a: Var, c: E) -> Var {
        let data: Vec<E> = self.val(a).data().iter().map(|&x| x.min(c)).collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::ClampMax { a, c }, ng)
    }

    /// Natural log. Inputs must be positive; clamp first when in doubt.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.val(a).data().iter().any(|&x| x <= E::zero()) {
            return Err(Error::Numeric("log: non-positive input".into()));
        }
        let data: Vec<E> = self.val(a).data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Log { a }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<E> = self.val(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a);
        self.push(out, Op::Gelu { a }, ng)
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.val(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = lane_dims(&shape, axis);
        let src = self.val(a).data();
        let mut data = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = src[idx(0)];
                for j in 1..len {
                    mx = mx.max(src[idx(j)]);
                }
                let mut denom = E::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - mx).exp();
                    data[idx(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    data[idx(j)] = data[idx(j)] / denom;
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax { a, axis }, ng))
    }

    /// Normalize the last axis to zero mean and unit variance, then apply
    /// elementwise gain and bias (both `[last]`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: E) -> Result<Var> {
        let shape = self.val(a).shape().to_vec();
        let cols = *shape.last().ok_or(Error::Shape {
            op: "layer_norm",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if eps <= E::zero() {
            return Err(Error::Numeric("layer_norm: eps must be positive".into()));
        }
        if self.val(gain).numel() != cols || self.val(bias).numel() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.val(gain).shape().to_vec(),
            });
        }
        let rows = self.val(a).numel() / cols;
        let src = self.val(a).data();
        let g = self.val(gain).data();
        let b = self.val(bias).data();
        let mut data = vec![E::zero(); src.len()];
        let nrecip = E::from_f64(1.0 / cols as f64);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mut mean = E::zero();
            for &x in row {
                mean += x;
            }
            mean = mean * nrecip;
            let mut var = E::zero();
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var = var * nrecip;
            let inv = (var + eps).sqrt().recip();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        let out = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { a, gain, bias, eps }, ng))
    }

    /// Mean over all elements; result has shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a).numel();
        let sum: E = self.val(a).data().iter().copied().sum();
        let out = Tensor::scalar(sum * E::from_f64(1.0 / n as f64));
        let ng = self.needs(a);
        self.push(out, Op::Mean { a }, ng)
    }

    /// Sum over all elements; result has shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let sum: E = self.val(a).data().iter().copied().sum();
        let out = Tensor::scalar(sum);
        let ng = self.needs(a);
        self.push(out, Op::Sum { a }, ng)
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.val(a).data().iter().any(|&x| x == E::zero()) {
            return Err(Error::Numeric("recip: zero input".into()));
        }
        let data: Vec<E> = self.val(a).data().iter().map(|&x| x.recip()).collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Recip { a }, ng))
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.val(s).numel() != 1 {
            return Err(Error::Shape {
                op: "mul_scalar_var",
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(s).shape().to_vec(),
            });
        }
        let sv = self.val(s).item();
        let data: Vec<E> = self.val(a).data().iter().map(|&x| x * sv).collect();
        let out = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(out, Op::MulScalarVar { a, s }, ng))
    }

    /// Mean over rows of `-log softmax(logits)[label]`; logits `[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.val(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (bsz, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Numeric(format!(
                "cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        let src = self.val(logits).data();
        let mut total = E::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let mut mx = row[0];
            for &x in row {
                mx = mx.max(x);
            }
            let mut denom = E::zero();
            for &x in row {
                denom += (x - mx).exp();
            }
            total += mx + denom.ln() - row[y];
        }
        let out = Tensor::scalar(total * E::from_f64(1.0 / bsz as f64));
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; returns the
    /// gradient of every `requires_grad` leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<E>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Numeric(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
        grads[loss.0] = Some(vec![E::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backward_op(id, &g, &mut grads);
            // leaves keep their accumulated gradient
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| match (&self.nodes[id].op, g) {
                (Op::Leaf, Some(data)) if self.nodes[id].needs_grad => {
                    Some(Tensor::new(self.nodes[id].value.shape().to_vec(), data).expect("shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<E>>], v: Var, contrib: &[E]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            None => grads[v.0] = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&self, id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.val(*a).shape();
                let sb = self.val(*b).shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = g . B^T
                    let bt = transpose_kernel(self.val(*b).data(), k, n);
                    let da = matmul_kernel(g, &bt, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T . g
                    let at = transpose_kernel(self.val(*a).data(), m, k);
                    let db = matmul_kernel(&at, g, k, m, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let s = self.val(*a).shape();
                let (r, c) = (s[0], s[1]);
                let da = transpose_kernel(g, c, r);
                self.accumulate(grads, *a, &da);
            }
            Op::Reshape { a } => self.accumulate(grads, *a, g),
            Op::ConcatRows { parts } => {
                let cols = self.nodes[id].value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let pr = self.val(p).shape()[0];
                    self.accumulate(grads, p, &g[off * cols..(off + pr) * cols]);
                    off += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[id].value.shape()[0];
                let cols = self.nodes[id].value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let pc = self.val(p).shape()[1];
                    let mut dp = vec![E::zero(); rows * pc];
                    for r in 0..rows {
                        dp[r * pc..(r + 1) * pc]
                            .copy_from_slice(&g[r * cols + off..r * cols + off + pc]);
                    }
                    self.accumulate(grads, p, &dp);
                    off += pc;
                }
            }
            Op::SliceRows { a, start } => {
                let s = self.val(*a).shape();
                let cols = s[1];
                let mut da = vec![E::zero(); s[0] * cols];
                da[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accumulate(grads, *a, &da);
            }
            Op::SliceCols { a, start } => {
                let s = self.val(*a).shape();
                let (rows, cols) = (s[0], s[1]);
                let len = self.nodes[id].value.shape()[1];
                let mut da = vec![E::zero(); rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::AddRow { a, row } => {
                self.accumulate(grads, *a, g);
                if self.needs(*row) {
                    let n = self.val(*row).numel();
                    let mut dr = vec![E::zero(); n];
                    for (i, &gv) in g.iter().enumerate() {
                        dr[i % n] += gv;
                    }
                    self.accumulate(grads, *row, &dr);
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                if self.needs(*b) {
                    let db: Vec<E> = g.iter().map(|&x| -x).collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<E> = g
                        .iter()
                        .zip(self.val(*b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<E> = g
                        .iter()
                        .zip(self.val(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<E> = g.iter().map(|&x| x * *c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, g),
            Op::ClampMin { a, c } => {
                let da: Vec<E> = g
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| if x > *c { gv } else { E::zero() })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::ClampMax { a, c } => {
                let da: Vec<E> = g
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| if x < *c { gv } else { E::zero() })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Log { a } => {
                let da: Vec<E> = g
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<E> = g
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| gv * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax { a, axis } => {
                let shape = self.val(*a).shape();
                let (outer, len, inner) = lane_dims(shape, *axis);
                let s = self.nodes[id].value.data();
                let mut da = vec![E::zero(); s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut dot = E::zero();
                        for j in 0..len {
                            dot += g[idx(j)] * s[idx(j)];
                        }
                        for j in 0..len {
                            da[idx(j)] = s[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let shape = self.val(*a).shape();
                let cols = *shape.last().unwrap();
                let rows = self.val(*a).numel() / cols;
                let src = self.val(*a).data();
                let gv = self.val(*gain).data();
                let nrecip = E::from_f64(1.0 / cols as f64);
                let mut da = vec![E::zero(); src.len()];
                let mut dgain = vec![E::zero(); cols];
                let mut dbias = vec![E::zero(); cols];
                for r in 0..rows {
                    let row = &src[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut mean = E::zero();
                    for &x in row {
                        mean += x;
                    }
                    mean = mean * nrecip;
                    let mut var = E::zero();
                    for &x in row {
                        let d = x - mean;
                        var += d * d;
                    }
                    var = var * nrecip;
                    let inv = (var + *eps).sqrt().recip();
                    // dxhat, plus gain/bias accumulation
                    let mut sum_dxhat = E::zero();
                    let mut sum_dxhat_xhat = E::zero();
                    let mut dxhat = vec![E::zero(); cols];
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        dgain[c] += grow[c] * xhat;
                        dbias[c] += grow[c];
                        let dxh = grow[c] * gv[c];
                        dxhat[c] = dxh;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat;
                    }
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        da[r * cols + c] = inv
                            * (dxhat[c] - nrecip * sum_dxhat - xhat * nrecip * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *bias, &dbias);
            }
            Op::Mean { a } => {
                let n = self.val(*a).numel();
                let v = g[0] * E::from_f64(1.0 / n as f64);
                let da = vec![v; n];
                self.accumulate(grads, *a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.val(*a).numel()];
                self.accumulate(grads, *a, &da);
            }
            Op::Recip { a } => {
                let da: Vec<E> = g
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| -gv / (x * x))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::MulScalarVar { a, s } => {
                let sv = self.val(*s).item();
                if self.needs(*a) {
                    let da: Vec<E> = g.iter().map(|&x| x * sv).collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.needs(*s) {
                    let mut ds = E::zero();
                    for (&gv, &av) in g.iter().zip(self.val(*a).data()) {
                        ds += gv * av;
                    }
                    self.accumulate(grads, *s, &[ds]);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let s = self.val(*logits).shape();
                let (bsz, classes) = (s[0], s[1]);
                let src = self.val(*logits).data();
                let scale = g[0] * E::from_f64(1.0 / bsz as f64);
                let mut da = vec![E::zero(); src.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let row = &src[r * classes..(r + 1) * classes];
                    let mut mx = row[0];
                    for &x in row {
                        mx = mx.max(x);
                    }
                    let mut denom = E::zero();
                    for &x in row {
                        denom += (x - mx).exp();
                    }
                    for c in 0..classes {
                        let p = (row[c] - mx).exp() / denom;
                        let delta = if c == y { E::one() } else { E::zero() };
                        da[r * classes + c] = (p - delta) * scale;
                    }
                }
                self.accumulate(grads, *logits, &da);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn randn(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::<f64>::new();
        let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(out).data(), t.value(a).data());
    }

    #[test]
    fn matmul_forced_arithmetic() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        // independent oracle: plain i-j-k accumulation
        let mut rng = Rng::seed(42);
        let a = randn(&mut rng, vec![5, 7]);
        let b = randn(&mut rng, vec![7, 3]);
        let mut expect = vec![0.0f64; 5 * 3];
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                expect[i * 3 + j] = acc;
            }
        }
        let mut t = Tape::new();
        let av = t.constant(a);
        let bv = t.constant(b);
        let out = t.matmul(av, bv).unwrap();
        for (got, want) in t.value(out).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![4, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_definition() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let x2 = t.constant(Tensor::new(vec![2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap());
        let s2 = t.softmax(x2, 0).unwrap();
        assert!((t.value(s2).data()[0] - 0.25).abs() < 1e-12);
        assert!((t.value(s2).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        assert!(t.value(s).is_finite());
    }

    #[test]
    fn softmax_invalid_axis_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(vec![2, 2]));
        assert!(t.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_affine() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(vec![1, 4], 3.25));
        let g = t.constant(Tensor::full(vec![4], 1.0));
        let b = t.constant(Tensor::zeros(vec![4]));
        let out = t.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in t.value(out).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let g = t.constant(Tensor::full(vec![2], 1.0));
        let b = t.constant(Tensor::zeros(vec![2]));
        let out = t.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((t.value(out).data()[0] - 1.0).abs() < 1e-6);
        assert!((t.value(out).data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::seed(7);
        let x = randn(&mut rng, vec![3, 8]);
        let gain = randn(&mut rng, vec![8]);
        let bias = randn(&mut rng, vec![8]);
        let eps = 1e-5;
        // two-pass oracle
        let mut expect = vec![0.0f64; 24];
        for r in 0..3 {
            let row = &x.data()[r * 8..(r + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            for c in 0..8 {
                expect[r * 8 + c] =
                    (row[c] - mean) / (var + eps).sqrt() * gain.data()[c] + bias.data()[c];
            }
        }
        let mut t = Tape::new();
        let xv = t.constant(x);
        let gv = t.constant(gain);
        let bv = t.constant(bias);
        let out = t.layer_norm(xv, gv, bv, eps).unwrap();
        for (got, want) in t.value(out).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::<f64>::new();
        let logits = t.constant(Tensor::zeros(vec![1, 2]));
        let loss = t.cross_entropy(logits, &[0]).unwrap();
        assert!((t.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut t = Tape::<f64>::new();
        let logits = t.constant(Tensor::new(vec![1, 2], vec![20.0, -20.0]).unwrap());
        let loss = t.cross_entropy(logits, &[0]).unwrap();
        assert!(t.value(loss).item() < 1e-10);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = Rng::seed(11);
        let logits = randn(&mut rng, vec![4, 5]);
        let labels = [1usize, 0, 4, 2];
        let mut expect = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &logits.data()[r * 5..(r + 1) * 5];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            expect += lse - row[y];
        }
        expect /= 4.0;
        let mut t = Tape::new();
        let lv = t.constant(logits);
        let loss = t.cross_entropy(lv, &labels).unwrap();
        assert!((t.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut t = Tape::<f64>::new();
        let logits = t.constant(Tensor::zeros(vec![2, 3]));
        assert!(t.cross_entropy(logits, &[0, 3]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let s = t.sum(x);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_at_three() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::scalar(3.0).with_grad());
        let sq = t.mul(x, x).unwrap();
        let grads = t.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(vec![2]).with_grad());
        let y = t.scale(x, 2.0);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn backward_accumulates_over_multiple_uses() {
        // loss = x*x + x  =>  d/dx = 2x + 1
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::scalar(5.0).with_grad());
        let sq = t.mul(x, x).unwrap();
        let sum = t.add(sq, x).unwrap();
        let grads = t.backward(sum).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[11.0]);
    }

    /// Finite-difference sweep over every registered primitive, 20 random
    /// inputs each, 64-bit, h = 1e-5, relative error < 1e-6.
    #[test]
    fn every_primitive_matches_central_differences() {
        type BuildFn = fn(&mut Tape<f64>, Var) -> crate::error::Result<Var>;
        // Each case maps an input tensor to a scalar through the op under test;
        // mean() at the end reduces to a scalar without hiding the op's jacobian.
        let cases: Vec<(&str, Vec<usize>, BuildFn)> = vec![
            ("matmul_lhs", vec![3, 4], |t, x| {
                let mut rng = Rng::seed(900);
                let w = t.constant(Tensor::from_fn(vec![4, 2], |_| rng.normal()));
                let y = t.matmul(x, w)?;
                Ok(t.mean(y))
            }),
            ("matmul_rhs", vec![4, 2], |t, x| {
                let mut rng = Rng::seed(901);
                let w = t.constant(Tensor::from_fn(vec![3, 4], |_| rng.normal()));
                let y = t.matmul(w, x)?;
                Ok(t.mean(y))
            }),
            ("transpose", vec![3, 4], |t, x| {
                let y = t.transpose(x)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("reshape", vec![2, 6], |t, x| {
                let y = t.reshape(x, vec![3, 4])?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("concat_rows", vec![2, 3], |t, x| {
                let mut rng = Rng::seed(902);
                let other = t.constant(Tensor::from_fn(vec![1, 3], |_| rng.normal()));
                let y = t.concat_rows(&[x, other, x])?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("concat_cols", vec![2, 3], |t, x| {
                let mut rng = Rng::seed(903);
                let other = t.constant(Tensor::from_fn(vec![2, 2], |_| rng.normal()));
                let y = t.concat_cols(&[other, x])?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("slice_rows", vec![4, 3], |t, x| {
                let y = t.slice_rows(x, 1, 2)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("slice_cols", vec![3, 5], |t, x| {
                let y = t.slice_cols(x, 2, 2)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("add", vec![3, 3], |t, x| {
                let mut rng = Rng::seed(904);
                let other = t.constant(Tensor::from_fn(vec![3, 3], |_| rng.normal()));
                let y = t.add(x, other)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("add_row_matrix", vec![3, 4], |t, x| {
                let mut rng = Rng::seed(905);
                let row = t.constant(Tensor::from_fn(vec![4], |_| rng.normal()));
                let y = t.add_row(x, row)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("add_row_vector", vec![4], |t, x| {
                let mut rng = Rng::seed(906);
                let m = t.constant(Tensor::from_fn(vec![3, 4], |_| rng.normal()));
                let y = t.add_row(m, x)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("sub", vec![3, 3], |t, x| {
                let mut rng = Rng::seed(907);
                let other = t.constant(Tensor::from_fn(vec![3, 3], |_| rng.normal()));
                let y = t.sub(x, other)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("sub_rhs", vec![3, 3], |t, x| {
                let mut rng = Rng::seed(908);
                let other = t.constant(Tensor::from_fn(vec![3, 3], |_| rng.normal()));
                let y = t.sub(other, x)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("mul", vec![3, 3], |t, x| {
                let mut rng = Rng::seed(909);
                let other = t.constant(Tensor::from_fn(vec![3, 3], |_| rng.normal()));
                let y = t.mul(x, other)?;
                Ok(t.mean(y))
            }),
            ("scale", vec![5], |t, x| {
                let y = t.scale(x, -1.7);
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("add_scalar", vec![5], |t, x| {
                let y = t.add_scalar(x, 0.35);
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("clamp_min", vec![6], |t, x| {
                // inputs are standard normal; clamp far from values to avoid the kink
                let y = t.clamp_min(x, -10.0);
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("clamp_max", vec![6], |t, x| {
                let y = t.clamp_max(x, 10.0);
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("log", vec![5], |t, x| {
                // shift inputs positive
                let y = t.add_scalar(x, 10.0);
                let l = t.log(y)?;
                Ok(t.mean(l))
            }),
            ("gelu", vec![6], |t, x| {
                let y = t.gelu(x);
                Ok(t.mean(y))
            }),
            ("softmax", vec![2, 5], |t, x| {
                let s = t.softmax(x, 1)?;
                let mut rng = Rng::seed(910);
                let w = t.constant(Tensor::from_fn(vec![2, 5], |_| rng.normal()));
                let y = t.mul(s, w)?;
                Ok(t.mean(y))
            }),
            ("softmax_axis0", vec![4, 3], |t, x| {
                let s = t.softmax(x, 0)?;
                let mut rng = Rng::seed(911);
                let w = t.constant(Tensor::from_fn(vec![4, 3], |_| rng.normal()));
                let y = t.mul(s, w)?;
                Ok(t.mean(y))
            }),
            ("layer_norm_input", vec![3, 6], |t, x| {
                let mut rng = Rng::seed(912);
                let g = t.constant(Tensor::from_fn(vec![6], |_| rng.normal()));
                let b = t.constant(Tensor::from_fn(vec![6], |_| rng.normal()));
                let y = t.layer_norm(x, g, b, 1e-5)?;
                let mut rng2 = Rng::seed(913);
                let w = t.constant(Tensor::from_fn(vec![3, 6], |_| rng2.normal()));
                let z = t.mul(y, w)?;
                Ok(t.mean(z))
            }),
            ("layer_norm_gain", vec![6], |t, x| {
                let mut rng = Rng::seed(914);
                let a = t.constant(Tensor::from_fn(vec![3, 6], |_| rng.normal()));
                let b = t.constant(Tensor::from_fn(vec![6], |_| rng.normal()));
                let y = t.layer_norm(a, x, b, 1e-5)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("layer_norm_bias", vec![6], |t, x| {
                let mut rng = Rng::seed(915);
                let a = t.constant(Tensor::from_fn(vec![3, 6], |_| rng.normal()));
                let g = t.constant(Tensor::from_fn(vec![6], |_| rng.normal()));
                let y = t.layer_norm(a, g, x, 1e-5)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("mean", vec![7], |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.mean(sq))
            }),
            ("sum", vec![7], |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            }),
            ("recip", vec![5], |t, x| {
                let y = t.add_scalar(x, 10.0);
                let r = t.recip(y)?;
                Ok(t.mean(r))
            }),
            ("mul_scalar_var_lhs", vec![4], |t, x| {
                let s = t.constant(Tensor::scalar(1.3));
                let y = t.mul_scalar_var(x, s)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("mul_scalar_var_scalar", vec![1], |t, x| {
                let mut rng = Rng::seed(916);
                let a = t.constant(Tensor::from_fn(vec![4], |_| rng.normal()));
                let y = t.mul_scalar_var(a, x)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean(sq))
            }),
            ("cross_entropy", vec![3, 4], |t, x| {
                t.cross_entropy(x, &[2, 0, 3])
            }),
        ];

        for (name, shape, build) in cases {
            for trial in 0..20u64 {
                let mut rng = Rng::stream(5000 + trial, name.len() as u64);
                let x = Tensor::from_fn(shape.clone(), |_| rng.normal());
                let mut f = |t: &mut Tape<f64>, v: Var| build(t, v);
                let err = finite_diff_check(&mut f, &x, 1e-5)
                    .unwrap_or_else(|e| panic!("{name}: {e}"));
                assert!(err < 1e-6, "{name} trial {trial}: rel err {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e3f64..1e3, 12)) {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::new(vec![3, 4], vals).unwrap());
            let s = t.softmax(x, 1).unwrap();
            let d = t.value(s).data();
            for r in 0..3 {
                let sum: f64 = d[r * 4..(r + 1) * 4].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                prop_assert!(d[r * 4..(r + 1) * 4].iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            let mut rng = Rng::seed(seed);
            let a = Tensor::from_fn(vec![3, 4], |_| rng.normal());
            let b = Tensor::from_fn(vec![4, 5], |_| rng.normal());
            let c = Tensor::from_fn(vec![5, 2], |_| rng.normal());
            let mut t = Tape::<f64>::new();
            let (av, bv, cv) = (t.constant(a), t.constant(b), t.constant(c));
            let ab = t.matmul(av, bv).unwrap();
            let ab_c = t.matmul(ab, cv).unwrap();
            let bc = t.matmul(bv, cv).unwrap();
            let a_bc = t.matmul(av, bc).unwrap();
            for (x, y) in t.value(ab_c).data().iter().zip(t.value(a_bc).data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
