use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::linalg;
use crate::par::Exec;

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: T },
    AddScalar { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Relu { a: usize },
    Tanh { a: usize },
    Log { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    Conv2d { x: usize, k: usize, b: Option<usize>, geom: ConvGeom, batch: usize },
    Upsample2 { x: usize, planes: usize, h: usize, w: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize>, in_shape: Vec<usize> },
    SliceCols { a: usize, cols: usize, start: usize },
    ConcatCols { parts: Vec<(usize, usize)> },
    GatherRows { table: usize, idx: Vec<usize> },
    SqDist { z: usize, c: usize },
    Standardize { a: usize, rows: usize, inv_std: Vec<T> },
    InvSpd { a: usize },
    StraightThrough { a: usize },
    MeanRows { a: usize },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Record of the differentiable operations of one forward pass.
///
/// A tape supports exactly one [`backward`](Tape::backward); build a new
/// tape for every training step.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    exec: Exec,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is untracked or
    /// does not influence the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but substitutes zeros of the right shape.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        debug_assert!(value.all_finite(), "non-finite value produced by tape op");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A tracked leaf: its gradient is reported by `backward`.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// An untracked leaf.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(&Tensor::scalar(v))
    }

    /// Propagates `∂loss/∂node` to every tracked node. Consumes the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !loss_node.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(self.exec, &nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    contrib: impl FnOnce() -> Vec<T>,
) {
    if !nodes[id].tracked {
        return;
    }
    let data = contrib();
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(
                Tensor::new(nodes[id].value.shape(), data).expect("gradient shape matches value"),
            );
        }
    }
}

fn backprop<T: Scalar>(
    exec: Exec,
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let gd = g.data();
    let val = |id: usize| nodes[id].value.clone();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(a), val(b));
            accumulate(nodes, grads, a, || {
                let mut d = vec![T::zero(); m * k];
                kernels::gemm_nt(m, n, k, gd, bv.data(), &mut d);
                d
            });
            accumulate(nodes, grads, b, || {
                let mut d = vec![T::zero(); k * n];
                kernels::gemm_tn(k, m, n, av.data(), gd, &mut d);
                d
            });
        }
        &Op::Transpose { a, rows, cols } => {
            accumulate(nodes, grads, a, || kernels::transpose(cols, rows, gd));
        }
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, || gd.to_vec());
            accumulate(nodes, grads, b, || gd.to_vec());
        }
        &Op::Sub { a, b } => {
            accumulate(nodes, grads, a, || gd.to_vec());
            accumulate(nodes, grads, b, || gd.iter().map(|&v| -v).collect());
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            accumulate(nodes, grads, a, || {
                gd.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect()
            });
            accumulate(nodes, grads, b, || {
                gd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect()
            });
        }
        &Op::Scale { a, s } => {
            accumulate(nodes, grads, a, || gd.iter().map(|&v| v * s).collect());
        }
        &Op::AddScalar { a } | &Op::Reshape { a } | &Op::StraightThrough { a } => {
            accumulate(nodes, grads, a, || gd.to_vec());
        }
        &Op::Sum { a } => {
            let n = nodes[a].value.numel();
            accumulate(nodes, grads, a, || vec![gd[0]; n]);
        }
        &Op::Mean { a } => {
            let n = nodes[a].value.numel();
            let v = gd[0] / T::from_f64_lossy(n as f64);
            accumulate(nodes, grads, a, || vec![v; n]);
        }
        &Op::Relu { a } => {
            let av = val(a);
            accumulate(nodes, grads, a, || {
                gd.iter()
                    .zip(av.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect()
            });
        }
        &Op::Tanh { a } => {
            let y = &node.value;
            accumulate(nodes, grads, a, || {
                gd.iter()
                    .zip(y.data())
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect()
            });
        }
        &Op::Log { a } => {
            let av = val(a);
            accumulate(nodes, grads, a, || {
                gd.iter().zip(av.data()).map(|(&g, &x)| g / x).collect()
            });
        }
        &Op::Softmax { a, outer, len, inner } => {
            let y = node.value.data();
            accumulate(nodes, grads, a, || {
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                d
            });
        }
        &Op::Conv2d {
            x,
            k,
            b,
            ref geom,
            batch,
        } => {
            let (xv, kv) = (val(x), val(k));
            let want_b = b.is_some_and(|b| nodes[b].tracked);
            let cg = kernels::conv2d_backward(
                exec,
                geom,
                batch,
                xv.data(),
                kv.data(),
                gd,
                nodes[x].tracked,
                nodes[k].tracked,
                want_b,
            );
            if let Some(dx) = cg.dx {
                accumulate(nodes, grads, x, || dx);
            }
            if let Some(dk) = cg.dk {
                accumulate(nodes, grads, k, || dk);
            }
            if let (Some(b), Some(db)) = (b, cg.db) {
                accumulate(nodes, grads, b, || db);
            }
        }
        &Op::Upsample2 { x, planes, h, w } => {
            accumulate(nodes, grads, x, || kernels::upsample2_backward(planes, h, w, gd));
        }
        Op::Permute { a, perm, in_shape } => {
            accumulate(nodes, grads, *a, || {
                let inv = invert_perm(perm);
                let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                permute_data(gd, &out_shape, &inv)
            });
        }
        &Op::SliceCols { a, cols, start } => {
            let (rows, width) = node.value.dims2()?;
            accumulate(nodes, grads, a, || {
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&gd[r * width..(r + 1) * width]);
                }
                d
            });
        }
        Op::ConcatCols { parts } => {
            let (rows, total) = node.value.dims2()?;
            let mut offset = 0;
            for &(id, width) in parts {
                accumulate(nodes, grads, id, || {
                    let mut d = vec![T::zero(); rows * width];
                    for r in 0..rows {
                        d[r * width..(r + 1) * width]
                            .copy_from_slice(&gd[r * total + offset..r * total + offset + width]);
                    }
                    d
                });
                offset += width;
            }
        }
        Op::GatherRows { table, idx } => {
            let (rows, d) = nodes[*table].value.dims2()?;
            accumulate(nodes, grads, *table, || {
                let mut out = vec![T::zero(); rows * d];
                for (p, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        out[i * d + j] += gd[p * d + j];
                    }
                }
                out
            });
        }
        &Op::SqDist { z, c } => {
            let (zv, cv) = (val(z), val(c));
            let (p, d) = zv.dims2()?;
            let (a, _) = cv.dims2()?;
            let (zd, cd) = (zv.data(), cv.data());
            let two = T::from_f64_lossy(2.0);
            accumulate(nodes, grads, z, || {
                let mut out = vec![T::zero(); p * d];
                for i in 0..p {
                    for j in 0..a {
                        let w = two * gd[i * a + j];
                        for t in 0..d {
                            out[i * d + t] += w * (zd[i * d + t] - cd[j * d + t]);
                        }
                    }
                }
                out
            });
            accumulate(nodes, grads, c, || {
                let mut out = vec![T::zero(); a * d];
                for i in 0..p {
                    for j in 0..a {
                        let w = two * gd[i * a + j];
                        for t in 0..d {
                            out[j * d + t] += w * (cd[j * d + t] - zd[i * d + t]);
                        }
                    }
                }
                out
            });
        }
        Op::Standardize { a, rows, inv_std } => {
            let y = node.value.data();
            let len = y.len() / rows;
            let inv_len = T::from_f64_lossy(1.0 / len as f64);
            accumulate(nodes, grads, *a, || {
                let mut d = vec![T::zero(); y.len()];
                for r in 0..*rows {
                    let gs = &gd[r * len..(r + 1) * len];
                    let ys = &y[r * len..(r + 1) * len];
                    let mean_g = gs.iter().copied().sum::<T>() * inv_len;
                    let mean_gy = gs.iter().zip(ys).map(|(&g, &y)| g * y).sum::<T>() * inv_len;
                    for t in 0..len {
                        d[r * len + t] = inv_std[r] * (gs[t] - mean_g - ys[t] * mean_gy);
                    }
                }
                d
            });
        }
        &Op::InvSpd { a } => {
            // d(A⁻¹) = −A⁻¹ dA A⁻¹  ⇒  ∂L/∂A = −A⁻ᵀ G A⁻ᵀ
            let inv = &node.value;
            let (n, _) = inv.dims2()?;
            let it = kernels::transpose(n, n, inv.data());
            accumulate(nodes, grads, a, || {
                let mut tmp = vec![T::zero(); n * n];
                kernels::gemm_nn(n, n, n, &it, gd, &mut tmp);
                let mut out = vec![T::zero(); n * n];
                kernels::gemm_nn(n, n, n, &tmp, &it, &mut out);
                out.iter().map(|&v| -v).collect()
            });
        }
        &Op::MeanRows { a } => {
            let (rows, cols) = nodes[a].value.dims2()?;
            let inv = T::from_f64_lossy(1.0 / rows as f64);
            accumulate(nodes, grads, a, || {
                (0..rows * cols).map(|i| gd[i % cols] * inv).collect()
            });
        }
    }
    Ok(())
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` is input axis `perm[i]`.
fn permute_data<T: Scalar>(data: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    /// Borrow of the stored value; do not hold it across tape operations.
    pub fn peek(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &*n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.peek().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// The scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.peek().item()
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let tracked = self.is_tracked();
        self.tape.push(value, op, tracked)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let tracked = self.is_tracked() || other.is_tracked();
        self.tape.push(value, op, tracked)
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape(op, &a, &b));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Var<'t, T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data).expect("same shape")
    }

    /// A copy of this value that blocks gradient flow.
    pub fn detach(self) -> Var<'t, T> {
        let v = self.value();
        self.tape.push((*v).clone(), Op::Leaf, false)
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), rhs.value());
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, av.data(), bv.data(), &mut out);
        let value = Tensor::new([m, n], out)?;
        Ok(self.binary(rhs, value, Op::MatMul { a: self.id, b: rhs.id, m, k, n }))
    }

    pub fn t(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        let value = Tensor::new([cols, rows], kernels::transpose(rows, cols, v.data()))?;
        Ok(self.unary(value, Op::Transpose { a: self.id, rows, cols }))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&rhs, "add")?;
        let value = self.zip_with(&rhs, |x, y| x + y);
        Ok(self.binary(rhs, value, Op::Add { a: self.id, b: rhs.id }))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&rhs, "sub")?;
        let value = self.zip_with(&rhs, |x, y| x - y);
        Ok(self.binary(rhs, value, Op::Sub { a: self.id, b: rhs.id }))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(&rhs, "mul")?;
        let value = self.zip_with(&rhs, |x, y| x * y);
        Ok(self.binary(rhs, value, Op::Mul { a: self.id, b: rhs.id }))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let value = self.value().map(|v| v * s);
        self.unary(value, Op::Scale { a: self.id, s })
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let value = self.value().map(|v| v + s);
        self.unary(value, Op::AddScalar { a: self.id })
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = self.value();
        let s = v.data().iter().copied().sum::<T>() / T::from_f64_lossy(v.numel() as f64);
        self.unary(Tensor::scalar(s), Op::Mean { a: self.id })
    }

    /// Mean squared difference, a scalar.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.sub(target)?.square().mean())
    }

    pub fn relu(self) -> Var<'t, T> {
        let value = self.value().map(|v| v.max(T::zero()));
        self.unary(value, Op::Relu { a: self.id })
    }

    pub fn tanh(self) -> Var<'t, T> {
        let value = self.value().map(|v| v.tanh());
        self.unary(value, Op::Tanh { a: self.id })
    }

    pub fn ln(self) -> Var<'t, T> {
        let value = self.value().map(|v| v.ln());
        self.unary(value, Op::Log { a: self.id })
    }

    /// Softmax along `axis` (max-subtracted).
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(Error::Param(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer = shape[..axis].iter().product();
        let len = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        let value = Tensor::new(shape, kernels::softmax_axis(outer, len, inner, v.data()))?;
        Ok(self.unary(value, Op::Softmax { a: self.id, outer, len, inner }))
    }

    /// Batched NCHW cross-correlation with zero padding.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        if stride == 0 {
            return Err(Error::Param("conv2d stride must be positive".into()));
        }
        let (xv, kv) = (self.value(), kernel.value());
        let (&[batch, cin, h, w], &[cout, kcin, kh, kw]) = (xv.shape(), kv.shape()) else {
            return Err(Error::shape("conv2d", xv.shape(), kv.shape()));
        };
        if cin != kcin || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape("conv2d", xv.shape(), kv.shape()));
        }
        let geom = ConvGeom { cin, h, w, cout, kh, kw, stride, pad };
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [cout] {
                    return Err(Error::shape("conv2d bias", bv.shape(), &[cout]));
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(
            self.tape.exec,
            &geom,
            batch,
            xv.data(),
            kv.data(),
            bv.as_deref().map(|b| b.data()),
        );
        let value = Tensor::new([batch, cout, geom.out_h(), geom.out_w()], out)?;
        let tracked = self.is_tracked()
            || kernel.is_tracked()
            || bias.is_some_and(|b| b.is_tracked());
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                b: bias.map(|b| b.id),
                geom,
                batch,
            },
            tracked,
        ))
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let &[b, c, h, w] = v.shape() else {
            return Err(Error::shape("upsample2", v.shape(), &[0, 0, 0, 0]));
        };
        let value = Tensor::new([b, c, 2 * h, 2 * w], kernels::upsample2(b * c, h, w, v.data()))?;
        Ok(self.unary(value, Op::Upsample2 { x: self.id, planes: b * c, h, w }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape { a: self.id }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Param(format!("invalid permutation {perm:?} for shape {in_shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let value = Tensor::new(out_shape, permute_data(v.data(), &in_shape, perm))?;
        Ok(self.unary(value, Op::Permute { a: self.id, perm: perm.to_vec(), in_shape }))
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        if width == 0 || start + width > cols {
            return Err(Error::Param(format!(
                "column slice {start}..{} out of range for {cols} columns",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&v.data()[r * cols + start..r * cols + start + width]);
        }
        let value = Tensor::new([rows, width], out)?;
        Ok(self.unary(value, Op::SliceCols { a: self.id, cols, start }))
    }

    /// Rows of a 2-D table selected by `idx`, an `[idx.len() × d]` result.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let (rows, d) = v.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::Param(format!("gather row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new([idx.len(), d], out)?;
        Ok(self.unary(value, Op::GatherRows { table: self.id, idx: idx.to_vec() }))
    }

    /// Squared Euclidean distances between rows of `self[p×d]` and
    /// rows of `codes[a×d]`, a `[p×a]` result.
    pub fn sq_dist(self, codes: Var<'t, T>) -> Result<Var<'t, T>> {
        let (zv, cv) = (self.value(), codes.value());
        let (p, d) = zv.dims2()?;
        let (a, d2) = cv.dims2()?;
        if d != d2 {
            return Err(Error::shape("sq_dist", zv.shape(), cv.shape()));
        }
        let value = Tensor::new([p, a], sq_dist_values(zv.data(), cv.data(), p, a, d))?;
        Ok(self.binary(codes, value, Op::SqDist { z: self.id, c: codes.id }))
    }

    /// Per-row standardization of an `[rows × len]` view:
    /// `(x − mean) / sqrt(var + eps)` with population variance.
    pub fn standardize_rows(self, rows: usize, eps: f64) -> Result<Var<'t, T>> {
        let v = self.value();
        let n = v.numel();
        if rows == 0 || !n.is_multiple_of(rows) || n / rows < 2 {
            return Err(Error::Param(format!(
                "cannot standardize {n} values as {rows} rows of at least 2"
            )));
        }
        let len = n / rows;
        let (out, inv_std) = standardize_values(v.data(), rows, len, T::from_f64_lossy(eps));
        let value = Tensor::new(v.shape(), out)?;
        Ok(self.unary(value, Op::Standardize { a: self.id, rows, inv_std }))
    }

    /// Inverse of a symmetric positive-definite matrix via Cholesky.
    pub fn inv_spd(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let (n, n2) = v.dims2()?;
        if n != n2 {
            return Err(Error::shape("inv_spd", v.shape(), &[n, n]));
        }
        let a = linalg::Matrix::new(n, n, v.to_f64_vec())?;
        let inv = linalg::spd_inverse(&a)?;
        let value = Tensor::from_f64([n, n], inv.data())?;
        Ok(self.unary(value, Op::InvSpd { a: self.id }))
    }

    /// Forward value `hard`, backward identity into `self`.
    pub fn straight_through(self, hard: &Tensor<T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape != hard.shape() {
            return Err(Error::shape("straight_through", &shape, hard.shape()));
        }
        Ok(self.unary(hard.clone(), Op::StraightThrough { a: self.id }))
    }

    /// Mean over the rows of a 2-D tensor, a `[cols]` result.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        let inv = T::from_f64_lossy(1.0 / rows as f64);
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &x) in out.iter_mut().zip(&v.data()[r * cols..(r + 1) * cols]) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::new([cols], out)?;
        Ok(self.unary(value, Op::MeanRows { a: self.id }))
    }
}

/// Concatenates 2-D variables with equal row counts along columns.
pub fn concat_cols<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Param("concat of zero tensors".into()))?;
    let tape = first.tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let (rows, _) = values[0].dims2()?;
    let mut widths = Vec::with_capacity(parts.len());
    for v in &values {
        let (r, w) = v.dims2()?;
        if r != rows {
            return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
        }
        widths.push(w);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let tracked = parts.iter().any(|p| p.is_tracked());
    let op = Op::ConcatCols {
        parts: parts.iter().map(|p| p.id).zip(widths).collect(),
    };
    Ok(tape.push(Tensor::new([rows, total], out)?, op, tracked))
}

pub(crate) fn sq_dist_values<T: Scalar>(z: &[T], c: &[T], p: usize, a: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * a];
    for i in 0..p {
        let zi = &z[i * d..(i + 1) * d];
        for j in 0..a {
            let cj = &c[j * d..(j + 1) * d];
            out[i * a + j] = zi
                .iter()
                .zip(cj)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
        }
    }
    out
}

pub(crate) fn standardize_values<T: Scalar>(x: &[T], rows: usize, len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let inv_len = T::from_f64_lossy(1.0 / len as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * len..(r + 1) * len];
        let mean = xs.iter().copied().sum::<T>() * inv_len;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_len;
        let s = T::one() / (var + eps).sqrt();
        for (o, &v) in out[r * len..(r + 1) * len].iter_mut().zip(xs) {
            *o = (v - mean) * s;
        }
        inv_std.push(s);
    }
    (out, inv_std)
}
