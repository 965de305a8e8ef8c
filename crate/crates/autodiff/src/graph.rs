//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! node is created, and [`Graph::backward`] walks the tape in reverse creation
//! order, which is a valid reverse topological order because a node can only
//! reference nodes created before it.
//!
//! Complex tensors are real tensors whose last axis has length 2. Gradients of
//! complex tensors are stored in the same layout as `(∂L/∂re, ∂L/∂im)`, which
//! makes the chain rule for a holomorphic map `w = f(z)` read
//! `G_z = G_w · conj(f'(z))`.

use num_complex::Complex64;

use crate::error::{AutodiffError, Result};
use crate::kernels::{cadd, cget, cinverse, cmatmul_acc, cset, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::tensor::Tensor;

/// Condition-number threshold above which a matrix is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this crate.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Gradient contribution for each input, given the upstream gradient of
    /// the output. `None` means the input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    ComplexMatMul(Var, Var),
    Transpose(Var),
    ComplexTranspose(Var),
    Conj(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    RepeatAxis { src: Var, axis: usize },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ComplexInverse(Var),
    Trace(Var),
    RealPart(Var),
    MagnitudeSquared(Var),
    ComplexMul(Var, Var),
    ComplexDiv(Var, Var),
    DiagEmbed(Var),
    Ln(Var),
    ClampMin(Var, f64),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A single-use computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument { op, msg: msg.into() }
}

/// `b` broadcasts onto `a` if its shape is a suffix of `a`'s shape.
fn suffix_of(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn check_complex(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.last() != Some(&2) {
        return Err(invalid(op, format!("expected complex tensor (last axis 2), got {:?}", shape)));
    }
    Ok(())
}

/// `[..., c, c, 2]` → (batch, c)
fn complex_square(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    check_complex(op, shape)?;
    let r = shape.len();
    if r < 3 || shape[r - 2] != shape[r - 3] {
        return Err(invalid(op, format!("expected [..., C, C, 2], got {:?}", shape)));
    }
    let c = shape[r - 2];
    Ok((shape[..r - 3].iter().product(), c))
}

fn reduce_suffix(g: &Tensor, target: &[usize]) -> Tensor {
    let n: usize = target.iter().product();
    let mut out = Tensor::zeros(target);
    if n == 0 {
        return out;
    }
    let od = out.data_mut();
    for chunk in g.data().chunks(n) {
        for (o, v) in od.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn transpose_last2(src: &[f64], shape: &[usize], elem: usize) -> (Vec<f64>, Vec<usize>) {
    // `elem` = 1 for real, 2 for complex (the pair axis trails the matrix axes)
    let r = shape.len();
    let (m, n) = if elem == 1 {
        (shape[r - 2], shape[r - 1])
    } else {
        (shape[r - 3], shape[r - 2])
    };
    let mat = m * n * elem;
    let mut out = vec![0.0; src.len()];
    for (b, chunk) in src.chunks(mat).enumerate() {
        let o = &mut out[b * mat..(b + 1) * mat];
        for i in 0..m {
            for j in 0..n {
                for e in 0..elem {
                    o[(j * m + i) * elem + e] = chunk[(i * n + j) * elem + e];
                }
            }
        }
    }
    let mut new_shape = shape.to_vec();
    if elem == 1 {
        new_shape.swap(r - 2, r - 1);
    } else {
        new_shape.swap(r - 3, r - 2);
    }
    (out, new_shape)
}

/// (outer, axis_len, inner) for an axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears all gradients so that `backward` may be called again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    // ---------------------------------------------------------------- ops

    fn binary_bcast(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !suffix_of(av.shape(), bv.shape()) {
            return Err(mismatch(op, av.shape(), bv.shape()));
        }
        let n = bv.len().max(1);
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % n]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_bcast("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_bcast("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_bcast("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * k).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    /// Real matrix product `[..., m, k] × [k, n]` or `[..., m, k] × [..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch_a * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch_a {
                let boff = if shared { 0 } else { bi * k * n };
                matmul_acc(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Complex matrix product on `[..., m, k, 2] × [..., k, n, 2]` (or a
    /// shared right operand `[k, n, 2]`).
    pub fn complex_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_complex("complex_matmul", &sa)?;
        check_complex("complex_matmul", &sb)?;
        if sa.len() < 3 || sb.len() < 3 {
            return Err(mismatch("complex_matmul", &sa, &sb));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k) = (sa[ra - 3], sa[ra - 2]);
        let (k2, n) = (sb[rb - 3], sb[rb - 2]);
        let shared = rb == 3;
        if k != k2 || (!shared && sa[..ra - 3] != sb[..rb - 3]) {
            return Err(mismatch("complex_matmul", &sa, &sb));
        }
        let batch: usize = sa[..ra - 3].iter().product();
        let mut out = vec![0.0; batch * m * n * 2];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let boff = if shared { 0 } else { bi * k * n * 2 };
                cmatmul_acc(
                    &ad[bi * m * k * 2..(bi + 1) * m * k * 2],
                    &bd[boff..boff + k * n * 2],
                    &mut out[bi * m * n * 2..(bi + 1) * m * n * 2],
                    m,
                    k,
                    n,
                    false,
                    false,
                );
            }
        }
        let mut shape = sa[..ra - 3].to_vec();
        shape.extend([m, n, 2]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ComplexMatMul(a, b), rg))
    }

    /// Swaps the last two axes of a real tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() < 2 {
            return Err(invalid("transpose", "rank < 2"));
        }
        let (d, s) = transpose_last2(av.data(), av.shape(), 1);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(s, d)?, Op::Transpose(a), rg))
    }

    /// Swaps the two matrix axes of a complex `[..., m, n, 2]` tensor.
    pub fn complex_transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        check_complex("complex_transpose", av.shape())?;
        if av.rank() < 3 {
            return Err(invalid("complex_transpose", "rank < 3"));
        }
        let (d, s) = transpose_last2(av.data(), av.shape(), 2);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(s, d)?, Op::ComplexTranspose(a), rg))
    }

    pub fn conj(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        check_complex("conj", av.shape())?;
        let mut t = av.clone();
        for p in t.data_mut().chunks_mut(2) {
            p[1] = -p[1];
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Conj(a), rg))
    }

    /// Conjugate transpose of a complex matrix batch.
    pub fn complex_hermitian(&mut self, a: Var) -> Result<Var> {
        let t = self.complex_transpose(a)?;
        self.conj(t)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(mismatch("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid("slice", format!("range {}..{} on axis {} of {:?}", start, start + len, axis, s)));
        }
        let (outer, alen, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { src: a, axis, start }, rg))
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the input.
    pub fn repeat_axis(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis > s.len() {
            return Err(invalid("repeat_axis", "axis out of range"));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.insert(axis, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::RepeatAxis { src: a, axis }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = *av.shape().last().ok_or_else(|| invalid("softmax", "rank 0"))?;
        let mut t = av.clone();
        if n > 0 {
            for row in t.data_mut().chunks_mut(n) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("sum_axis", "axis out of range"));
        }
        let (outer, alen, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..alen {
                let src = &d[(o * alen + k) * inner..(o * alen + k + 1) * inner];
                for (x, y) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(a, axis), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.max(0.0)).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| invalid("layer_norm", "rank 0"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &s, self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batched inverse of complex `[..., C, C, 2]` matrices.
    ///
    /// Fails with [`AutodiffError::Singular`] when the 1-norm condition
    /// estimate exceeds [`SINGULAR_CONDITION`].
    pub fn complex_matrix_inverse(&mut self, a: Var) -> Result<Var> {
        let (batch, c) = complex_square("complex_matrix_inverse", self.shape(a))?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; ad.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); c * c];
        for b in 0..batch {
            for (i, z) in buf.iter_mut().enumerate() {
                *z = cget(ad, b * c * c + i);
            }
            let (inv, cond) = cinverse(&buf, c)?;
            if !(cond <= SINGULAR_CONDITION) {
                return Err(AutodiffError::Singular { cond });
            }
            for (i, z) in inv.into_iter().enumerate() {
                cset(&mut out, b * c * c + i, z);
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ComplexInverse(a), rg))
    }

    /// Trace of complex `[..., C, C, 2]` matrices → `[..., 2]`.
    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let (batch, c) = complex_square("trace", self.shape(a))?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; batch * 2];
        for b in 0..batch {
            let mut s = Complex64::new(0.0, 0.0);
            for i in 0..c {
                s += cget(ad, b * c * c + i * c + i);
            }
            cset(&mut out, b, s);
        }
        let s = self.shape(a);
        let mut shape = s[..s.len() - 3].to_vec();
        shape.push(2);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Trace(a), rg))
    }

    pub fn real_part(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        check_complex("real_part", av.shape())?;
        let out: Vec<f64> = av.data().chunks(2).map(|p| p[0]).collect();
        let shape = av.shape()[..av.rank() - 1].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::RealPart(a), rg))
    }

    pub fn magnitude_squared(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        check_complex("magnitude_squared", av.shape())?;
        let out: Vec<f64> = av.data().chunks(2).map(|p| p[0] * p[0] + p[1] * p[1]).collect();
        let shape = av.shape()[..av.rank() - 1].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MagnitudeSquared(a), rg))
    }

    fn complex_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        check_complex(op, av.shape())?;
        check_complex(op, bv.shape())?;
        if !suffix_of(av.shape(), bv.shape()) {
            return Err(mismatch(op, av.shape(), bv.shape()));
        }
        let nb = bv.len() / 2;
        let na = av.len() / 2;
        let mut out = vec![0.0; av.len()];
        for i in 0..na {
            cset(&mut out, i, f(cget(av.data(), i), cget(bv.data(), i % nb)));
        }
        Tensor::new(av.shape().to_vec(), out)
    }

    /// Elementwise complex product; `b` may broadcast over leading axes.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.complex_binary("complex_mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::ComplexMul(a, b), rg))
    }

    /// Elementwise complex quotient; `b` may broadcast over leading axes.
    pub fn complex_div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.complex_binary("complex_div", a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::ComplexDiv(a, b), rg))
    }

    /// Real `[...]` → complex `[..., n, n, 2]` with the value on the real
    /// diagonal (a scaled identity per batch element).
    pub fn diag_embed(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let mut out = vec![0.0; av.len() * n * n * 2];
        for (b, &v) in av.data().iter().enumerate() {
            for i in 0..n {
                out[(b * n * n + i * n + i) * 2] = v;
            }
        }
        let mut shape = av.shape().to_vec();
        shape.extend([n, n, 2]);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out).expect("consistent"), Op::DiagEmbed(a), rg)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|&x| !(x > 0.0)) {
            return Err(invalid("ln", "non-positive argument"));
        }
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.ln()).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Ln(a), rg))
    }

    /// `max(a, lo)` elementwise; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.max(lo)).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::ClampMin(a, lo), rg)
    }

    /// Records an externally computed value with a user-supplied backward.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), op), rg)
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.shape().to_vec()));
        }
        let shape = ls.shape().to_vec();
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            backprop(before, node, g);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], v: Var, g: Tensor) {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return;
    }
    match n.grad.as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => n.grad = Some(g),
    }
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn with_data(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape")
}

fn backprop(nodes: &mut [Node], node: &Node, g: &Tensor) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(nodes, *b) {
                let bs = nodes[b.0].value.shape().to_vec();
                let mut gb = reduce_suffix(g, &bs);
                if sign < 0.0 {
                    gb.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                accumulate(nodes, *b, gb);
            }
            if needs(nodes, *a) {
                accumulate(nodes, *a, g.clone());
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let nb = bv.len().max(1);
            let ga = needs(nodes, *a).then(|| {
                with_data(
                    av.shape(),
                    gd.iter().enumerate().map(|(i, x)| x * bv.data()[i % nb]).collect(),
                )
            });
            let gb = needs(nodes, *b).then(|| {
                let prod = with_data(av.shape(), gd.iter().zip(av.data()).map(|(x, y)| x * y).collect());
                reduce_suffix(&prod, bv.shape())
            });
            if let Some(ga) = ga {
                accumulate(nodes, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(nodes, *b, gb);
            }
        }
        Op::Scale(a, k) => {
            let ga = with_data(g.shape(), gd.iter().map(|x| x * k).collect());
            accumulate(nodes, *a, ga);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            let batch = av.len() / (m * k).max(1);
            let shared = sb.len() == 2;
            let ga = needs(nodes, *a).then(|| {
                let mut out = vec![0.0; av.len()];
                for bi in 0..batch {
                    let boff = if shared { 0 } else { bi * k * n };
                    matmul_nt_acc(
                        &gd[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[boff..boff + k * n],
                        &mut out[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                with_data(sa, out)
            });
            let gb = needs(nodes, *b).then(|| {
                let mut out = vec![0.0; bv.len()];
                for bi in 0..batch {
                    let boff = if shared { 0 } else { bi * k * n };
                    matmul_tn_acc(
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        &gd[bi * m * n..(bi + 1) * m * n],
                        &mut out[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
                with_data(sb, out)
            });
            if let Some(ga) = ga {
                accumulate(nodes, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(nodes, *b, gb);
            }
        }
        Op::ComplexMatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            let (m, k) = (sa[sa.len() - 3], sa[sa.len() - 2]);
            let n = sb[sb.len() - 2];
            let batch = av.len() / (2 * m * k).max(1);
            let shared = sb.len() == 3;
            // G_A = G Bᴴ, G_B = Aᴴ G
            let ga = needs(nodes, *a).then(|| {
                let mut out = vec![0.0; av.len()];
                for bi in 0..batch {
                    let boff = if shared { 0 } else { bi * k * n * 2 };
                    cmatmul_acc(
                        &gd[bi * m * n * 2..(bi + 1) * m * n * 2],
                        &bv.data()[boff..boff + k * n * 2],
                        &mut out[bi * m * k * 2..(bi + 1) * m * k * 2],
                        m,
                        n,
                        k,
                        false,
                        true,
                    );
                }
                with_data(sa, out)
            });
            let gb = needs(nodes, *b).then(|| {
                let mut out = vec![0.0; bv.len()];
                for bi in 0..batch {
                    let boff = if shared { 0 } else { bi * k * n * 2 };
                    cmatmul_acc(
                        &av.data()[bi * m * k * 2..(bi + 1) * m * k * 2],
                        &gd[bi * m * n * 2..(bi + 1) * m * n * 2],
                        &mut out[boff..boff + k * n * 2],
                        k,
                        m,
                        n,
                        true,
                        false,
                    );
                }
                with_data(sb, out)
            });
            if let Some(ga) = ga {
                accumulate(nodes, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(nodes, *b, gb);
            }
        }
        Op::Transpose(a) => {
            let (d, s) = transpose_last2(gd, g.shape(), 1);
            accumulate(nodes, *a, with_data(&s, d));
        }
        Op::ComplexTranspose(a) => {
            let (d, s) = transpose_last2(gd, g.shape(), 2);
            accumulate(nodes, *a, with_data(&s, d));
        }
        Op::Conj(a) => {
            let mut d = gd.to_vec();
            d.chunks_mut(2).for_each(|p| p[1] = -p[1]);
            accumulate(nodes, *a, with_data(g.shape(), d));
        }
        Op::Reshape(a) => {
            let s = nodes[a.0].value.shape().to_vec();
            accumulate(nodes, *a, with_data(&s, gd.to_vec()));
        }
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = axis_split(g.shape(), *axis);
            let total = g.shape()[*axis];
            let mut offset = 0;
            for p in parts {
                let ps = nodes[p.0].value.shape().to_vec();
                let len = ps[*axis];
                if needs(nodes, *p) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    accumulate(nodes, *p, with_data(&ps, d));
                }
                offset += len;
            }
        }
        Op::Slice { src, axis, start } => {
            let ss = nodes[src.0].value.shape().to_vec();
            let (outer, alen, inner) = axis_split(&ss, *axis);
            let len = g.shape()[*axis];
            let mut d = vec![0.0; nodes[src.0].value.len()];
            for o in 0..outer {
                let base = o * alen * inner + start * inner;
                d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, *src, with_data(&ss, d));
        }
        Op::RepeatAxis { src, axis } => {
            let ss = nodes[src.0].value.shape().to_vec();
            let outer: usize = ss[..*axis].iter().product();
            let inner: usize = ss[*axis..].iter().product();
            let n = g.shape()[*axis];
            let mut d = vec![0.0; outer * inner];
            for o in 0..outer {
                for r in 0..n {
                    let base = (o * n + r) * inner;
                    for (x, y) in d[o * inner..(o + 1) * inner].iter_mut().zip(&gd[base..base + inner]) {
                        *x += y;
                    }
                }
            }
            accumulate(nodes, *src, with_data(&ss, d));
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let n = *g.shape().last().unwrap_or(&1);
            let mut d = vec![0.0; y.len()];
            if n > 0 {
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
            }
            accumulate(nodes, *a, with_data(g.shape(), d));
        }
        Op::Sum(a) => {
            let s = nodes[a.0].value.shape().to_vec();
            accumulate(nodes, *a, Tensor::full(&s, gd[0]));
        }
        Op::Mean(a) => {
            let v = &nodes[a.0].value;
            let s = v.shape().to_vec();
            let n = v.len() as f64;
            accumulate(nodes, *a, Tensor::full(&s, gd[0] / n));
        }
        Op::SumAxis(a, axis) => {
            let s = nodes[a.0].value.shape().to_vec();
            let (outer, alen, inner) = axis_split(&s, *axis);
            let mut d = vec![0.0; outer * alen * inner];
            for o in 0..outer {
                for k in 0..alen {
                    d[(o * alen + k) * inner..(o * alen + k + 1) * inner]
                        .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(nodes, *a, with_data(&s, d));
        }
        Op::Relu(a) => {
            let av = nodes[a.0].value.data();
            let d = gd.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(nodes, *a, with_data(g.shape(), d));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = *g.shape().last().unwrap();
            let gam = nodes[gamma.0].value.data().to_vec();
            let rows = gd.len() / d;
            if needs(nodes, *gamma) || needs(nodes, *beta) {
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += gd[r * d + j] * xhat[r * d + j];
                        gb[j] += gd[r * d + j];
                    }
                }
                accumulate(nodes, *gamma, with_data(&[d], gg));
                accumulate(nodes, *beta, with_data(&[d], gb));
            }
            if needs(nodes, *x) {
                let mut gx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = gd[r * d + j] * gam[j];
                        m1 += dh;
                        m2 += dh * xhat[r * d + j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dh = gd[r * d + j] * gam[j];
                        gx[r * d + j] = inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
                    }
                }
                accumulate(nodes, *x, with_data(g.shape(), gx));
            }
        }
        Op::ComplexInverse(a) => {
            // G_A = -Xᴴ G Xᴴ
            let xd = node.value.data();
            let s = g.shape();
            let c = s[s.len() - 2];
            let batch = xd.len() / (2 * c * c);
            let mut out = vec![0.0; xd.len()];
            let mut tmp = vec![0.0; 2 * c * c];
            for b in 0..batch {
                let r = b * 2 * c * c..(b + 1) * 2 * c * c;
                tmp.iter_mut().for_each(|v| *v = 0.0);
                cmatmul_acc(&xd[r.clone()], &gd[r.clone()], &mut tmp, c, c, c, true, false);
                cmatmul_acc(&tmp, &xd[r.clone()], &mut out[r.clone()], c, c, c, false, true);
            }
            out.iter_mut().for_each(|v| *v = -*v);
            accumulate(nodes, *a, with_data(s, out));
        }
        Op::Trace(a) => {
            let s = nodes[a.0].value.shape().to_vec();
            let c = s[s.len() - 2];
            let batch = gd.len() / 2;
            let mut out = vec![0.0; nodes[a.0].value.len()];
            for b in 0..batch {
                let gv = cget(gd, b);
                for i in 0..c {
                    cset(&mut out, b * c * c + i * c + i, gv);
                }
            }
            accumulate(nodes, *a, with_data(&s, out));
        }
        Op::RealPart(a) => {
            let s = nodes[a.0].value.shape().to_vec();
            let mut out = vec![0.0; gd.len() * 2];
            for (i, v) in gd.iter().enumerate() {
                out[2 * i] = *v;
            }
            accumulate(nodes, *a, with_data(&s, out));
        }
        Op::MagnitudeSquared(a) => {
            let av = &nodes[a.0].value;
            let s = av.shape().to_vec();
            let out = av.data().iter().enumerate().map(|(i, z)| 2.0 * z * gd[i / 2]).collect();
            accumulate(nodes, *a, with_data(&s, out));
        }
        Op::ComplexMul(a, b) | Op::ComplexDiv(a, b) => {
            let is_div = matches!(node.op, Op::ComplexDiv(..));
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let na = av.len() / 2;
            let nb = bv.len() / 2;
            let out = node.value.data();
            let mut ga = needs(nodes, *a).then(|| vec![0.0; av.len()]);
            let mut gb = needs(nodes, *b).then(|| vec![0.0; bv.len()]);
            for i in 0..na {
                let gv = cget(gd, i);
                let bz = cget(bv.data(), i % nb);
                if let Some(ga) = ga.as_mut() {
                    let v = if is_div { gv / bz.conj() } else { gv * bz.conj() };
                    cset(ga, i, v);
                }
                if let Some(gb) = gb.as_mut() {
                    let v = if is_div {
                        -gv * (cget(out, i) / bz).conj()
                    } else {
                        gv * cget(av.data(), i).conj()
                    };
                    cadd(gb, i % nb, v);
                }
            }
            let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
            if let Some(ga) = ga {
                accumulate(nodes, *a, with_data(&sa, ga));
            }
            if let Some(gb) = gb {
                accumulate(nodes, *b, with_data(&sb, gb));
            }
        }
        Op::DiagEmbed(a) => {
            let s = nodes[a.0].value.shape().to_vec();
            let n = g.shape()[g.rank() - 2];
            let batch = nodes[a.0].value.len();
            let out = (0..batch)
                .map(|b| (0..n).map(|i| gd[(b * n * n + i * n + i) * 2]).sum())
                .collect();
            accumulate(nodes, *a, with_data(&s, out));
        }
        Op::Ln(a) => {
            let av = nodes[a.0].value.data();
            let out = gd.iter().zip(av).map(|(g, x)| g / x).collect();
            accumulate(nodes, *a, with_data(g.shape(), out));
        }
        Op::ClampMin(a, lo) => {
            let av = nodes[a.0].value.data();
            let out = gd.iter().zip(av).map(|(g, x)| if x > lo { *g } else { 0.0 }).collect();
            accumulate(nodes, *a, with_data(g.shape(), out));
        }
        Op::Custom(inputs, op) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let grads = op.backward(&vals, &node.value, g);
            for (v, gr) in inputs.iter().zip(grads) {
                if let Some(gr) = gr {
                    accumulate(nodes, *v, gr);
                }
            }
        }
    }
}
