//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, so the tape is already topologically sorted and
//! [`Graph::backward`] walks it in reverse. Gradients accumulate on leaves
//! until [`Graph::zero_grad`] (for variables) or [`ParamStore::zero_grad`]
//! (for parameters) clears them. Only first-order gradients are supported.
//!
//! Parameters live in a [`ParamStore`] outside the graph and are shared
//! into it by reference count, so building a graph never copies weights.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::TensorError;
use crate::tensor::{
    broadcast_shapes, broadcast_strides, contiguous_strides, for_each_broadcast, numel, Element, Tensor,
};

type OpResult<'g, T> = Result<Var<'g, T>, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    PowScalar(usize, T),
    /// `min(c, x)`; a tie routes the gradient to the constant.
    MinScalar(usize, T),
    /// `max(c, x)`; a tie routes the gradient to the constant.
    MaxScalar(usize, T),
    Matmul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    SumAll(usize),
    SumLast(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A recording of tensor operations that can be differentiated in reverse.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<HashMap<usize, Vec<T>>>,
    checked: bool,
    fault: RefCell<Option<TensorError>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Element> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(HashMap::new()),
            checked: false,
            fault: RefCell::new(None),
        }
    }

    /// A graph that validates every produced value is finite. The first
    /// offending operation is reported by [`Graph::check`] and by
    /// [`Graph::backward`].
    pub fn checked() -> Self {
        Graph {
            checked: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false, None)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// A leaf that receives gradient, readable through [`Graph::grad`].
    pub fn variable(&self, t: Tensor<T>) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true, None)
    }

    /// A leaf bound to a stored parameter; its gradient is collected by
    /// [`ParamStore::accumulate_grads`].
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let p = &store.params[id.0];
        self.push_shared(
            p.shape.clone(),
            Arc::clone(&p.value),
            Op::Leaf,
            p.requires_grad,
            Some(id),
        )
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(&v.id)?;
        Some(Tensor::new(&v.shape(), g.clone()).expect("gradient matches node shape"))
    }

    /// Clears gradients accumulated on this graph's leaves.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// In checked mode, the first non-finite value produced so far.
    pub fn check(&self) -> Result<(), TensorError> {
        match self.fault.borrow().as_ref() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var<'_, T> {
        self.push_shared(shape, Arc::new(data), op, requires_grad, param)
    }

    fn push_shared(
        &self,
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        op: Op<T>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.checked && self.fault.borrow().is_none() {
            if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
                *self.fault.borrow_mut() = Some(TensorError::Invalid(format!(
                    "non-finite value at flat index {pos} produced by node {id} ({op:?})"
                )));
            }
        }
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            param,
        });
        Var { graph: self, id }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Propagates d(loss)/d(node) to every gradient-requiring leaf,
    /// accumulating onto gradients from earlier calls.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<(), TensorError> {
        self.check()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads = self.grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                }
                continue;
            }
            backward_node(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

/// Adds `delta` into the gradient slot of `id`, allocating on first use.
fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn backward_node<T: Element>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let out = &node.data;
    match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::Binary(kind, a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let a_strides = broadcast_strides(&na.shape, &node.shape);
            let b_strides = broadcast_strides(&nb.shape, &node.shape);
            let (ad, bd) = (&na.data, &nb.data);
            if na.requires_grad {
                let ga = accumulate(grads, *a, ad.len());
                for_each_broadcast(&node.shape, &a_strides, &b_strides, |o, ia, ib| {
                    let (x, y) = (ad[ia], bd[ib]);
                    let d = match kind {
                        Binary::Add | Binary::Sub => T::one(),
                        Binary::Mul => y,
                        Binary::Div => y.recip(),
                        Binary::Pow => {
                            if y == T::zero() {
                                T::zero()
                            } else {
                                y * x.powf(y - T::one())
                            }
                        }
                        Binary::Min => {
                            if x <= y {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Binary::Max => {
                            if x >= y {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    ga[ia] += g[o] * d;
                });
            }
            if nb.requires_grad {
                let gb = accumulate(grads, *b, bd.len());
                for_each_broadcast(&node.shape, &a_strides, &b_strides, |o, ia, ib| {
                    let (x, y) = (ad[ia], bd[ib]);
                    let d = match kind {
                        Binary::Add => T::one(),
                        Binary::Sub => -T::one(),
                        Binary::Mul => x,
                        Binary::Div => -x / (y * y),
                        Binary::Pow => {
                            if out[o] == T::zero() {
                                T::zero()
                            } else {
                                out[o] * x.ln()
                            }
                        }
                        Binary::Min => {
                            if x <= y {
                                T::zero()
                            } else {
                                T::one()
                            }
                        }
                        Binary::Max => {
                            if x >= y {
                                T::zero()
                            } else {
                                T::one()
                            }
                        }
                    };
                    gb[ib] += g[o] * d;
                });
            }
        }
        Op::Unary(kind, a) => {
            let x = &nodes[*a].data;
            let ga = accumulate(grads, *a, x.len());
            for i in 0..g.len() {
                let d = match kind {
                    Unary::Neg => -T::one(),
                    Unary::Exp => out[i],
                    Unary::Ln => x[i].recip(),
                    Unary::Sigmoid => out[i] * (T::one() - out[i]),
                    Unary::Relu => {
                        if x[i] > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                };
                ga[i] += g[i] * d;
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            let ga = accumulate(grads, *a, g.len());
            ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
        }
        Op::MulScalar(a, c) => {
            let ga = accumulate(grads, *a, g.len());
            ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
        }
        Op::PowScalar(a, p) => {
            let x = &nodes[*a].data;
            let ga = accumulate(grads, *a, g.len());
            for i in 0..g.len() {
                ga[i] += g[i] * *p * x[i].powf(*p - T::one());
            }
        }
        Op::MinScalar(a, c) => {
            let x = &nodes[*a].data;
            let ga = accumulate(grads, *a, g.len());
            for i in 0..g.len() {
                if x[i] < *c {
                    ga[i] += g[i];
                }
            }
        }
        Op::MaxScalar(a, c) => {
            let x = &nodes[*a].data;
            let ga = accumulate(grads, *a, g.len());
            for i in 0..g.len() {
                if x[i] > *c {
                    ga[i] += g[i];
                }
            }
        }
        Op::Matmul { a, b, transpose_b } => {
            matmul_backward(nodes, node, *a, *b, *transpose_b, g, grads);
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let back = permute_data(g, &node.shape, &inverse);
            let ga = accumulate(grads, *a, g.len());
            ga.iter_mut().zip(back).for_each(|(x, y)| *x += y);
        }
        Op::Softmax(a) => {
            let cols = *node.shape.last().unwrap_or(&1);
            let ga = accumulate(grads, *a, g.len());
            for ((gr, yr), gar) in g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols)) {
                let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                for k in 0..cols {
                    gar[k] += yr[k] * (gr[k] - dot);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let cols = *node.shape.last().unwrap_or(&1);
            let ga = accumulate(grads, *a, g.len());
            for ((gr, yr), gar) in g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols)) {
                let total: T = gr.iter().copied().sum();
                for k in 0..cols {
                    gar[k] += gr[k] - yr[k].exp() * total;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let cols = *node.shape.last().unwrap_or(&1);
            let gamma = &nodes[*gain].data;
            if nodes[*gain].requires_grad {
                let gg = accumulate(grads, *gain, cols);
                for (gr, xr) in g.chunks(cols).zip(normalized.chunks(cols)) {
                    for k in 0..cols {
                        gg[k] += gr[k] * xr[k];
                    }
                }
            }
            if nodes[*bias].requires_grad {
                let gb = accumulate(grads, *bias, cols);
                for gr in g.chunks(cols) {
                    for k in 0..cols {
                        gb[k] += gr[k];
                    }
                }
            }
            if nodes[*x].requires_grad {
                let n = T::from_usize(cols).unwrap();
                let gx = accumulate(grads, *x, g.len());
                let mut dxhat = vec![T::zero(); cols];
                for (row, ((gr, xr), gxr)) in g
                    .chunks(cols)
                    .zip(normalized.chunks(cols))
                    .zip(gx.chunks_mut(cols))
                    .enumerate()
                {
                    let mut sum = T::zero();
                    let mut sum_x = T::zero();
                    for k in 0..cols {
                        dxhat[k] = gr[k] * gamma[k];
                        sum += dxhat[k];
                        sum_x += dxhat[k] * xr[k];
                    }
                    let scale = inv_std[row] / n;
                    for k in 0..cols {
                        gxr[k] += scale * (n * dxhat[k] - sum - xr[k] * sum_x);
                    }
                }
            }
        }
        Op::SumAll(a) => {
            let len = nodes[*a].data.len();
            let ga = accumulate(grads, *a, len);
            ga.iter_mut().for_each(|x| *x += g[0]);
        }
        Op::SumLast(a) => {
            let cols = *nodes[*a].shape.last().unwrap_or(&1);
            let len = nodes[*a].data.len();
            let ga = accumulate(grads, *a, len);
            for (row, gar) in ga.chunks_mut(cols).enumerate() {
                gar.iter_mut().for_each(|x| *x += g[row]);
            }
        }
        Op::Gather { table, ids } => {
            let cols = nodes[*table].shape[1];
            let len = nodes[*table].data.len();
            let gt = accumulate(grads, *table, len);
            for (row, &id) in ids.iter().enumerate() {
                let src = &g[row * cols..(row + 1) * cols];
                let dst = &mut gt[id * cols..(id + 1) * cols];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let cols = *nodes[*logits].shape.last().unwrap();
            let len = nodes[*logits].data.len();
            let scale = g[0] / T::from_usize(*count).unwrap();
            let gl = accumulate(grads, *logits, len);
            for (row, target) in targets.iter().enumerate() {
                let Some(t) = target else { continue };
                let p = &probs[row * cols..(row + 1) * cols];
                let dst = &mut gl[row * cols..(row + 1) * cols];
                for k in 0..cols {
                    let onehot = if k == *t { T::one() } else { T::zero() };
                    dst[k] += scale * (p[k] - onehot);
                }
            }
        }
    }
}

/// Batch layout of a matmul: per output matrix, the matrix offsets into
/// `a` and `b`.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    pairs: Vec<(usize, usize)>,
    out_shape: Vec<usize>,
    /// `b` has no batch dimensions and `a` can be flattened into one matrix.
    flat: bool,
}

fn plan_matmul(a: &[usize], b: &[usize], transpose_b: bool) -> Result<MatmulPlan, TensorError> {
    let err = || TensorError::MatmulShape {
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(err());
    }
    let (a_batch, b_batch) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shapes(a_batch, b_batch).map_err(|_| err())?;
    let a_strides = broadcast_strides(a_batch, &batch);
    let b_strides = broadcast_strides(b_batch, &batch);
    let mut pairs = Vec::with_capacity(numel(&batch));
    for_each_broadcast(&batch, &a_strides, &b_strides, |_, ia, ib| {
        pairs.push((ia * m * k, ib * k * n))
    });
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        pairs,
        out_shape,
        flat: b_batch.is_empty(),
    })
}

/// Row/column strides of `b` (or its transpose) as a `k x n` operand.
fn b_layout(k: usize, n: usize, transpose_b: bool) -> (isize, isize) {
    if transpose_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    }
}

fn matmul_forward<T: Element>(ad: &[T], bd: &[T], plan: &MatmulPlan, transpose_b: bool) -> Vec<T> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![T::zero(); numel(&plan.out_shape)];
    let bl = b_layout(k, n, transpose_b);
    if plan.flat {
        let rows = ad.len() / k.max(1);
        if rows > 0 && n > 0 {
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                ad,
                (k as isize, 1),
                bd,
                bl,
                T::zero(),
                &mut out,
                (n as isize, 1),
            );
        }
        return out;
    }
    for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &ad[oa..oa + m * k],
            (k as isize, 1),
            &bd[ob..ob + k * n],
            bl,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            (n as isize, 1),
        );
    }
    out
}

fn matmul_backward<T: Element>(
    nodes: &[Node<T>],
    node: &Node<T>,
    a: usize,
    b: usize,
    transpose_b: bool,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (na, nb) = (&nodes[a], &nodes[b]);
    let plan = plan_matmul(&na.shape, &nb.shape, transpose_b).expect("validated in forward");
    debug_assert_eq!(plan.out_shape, node.shape);
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let (ad, bd) = (&na.data, &nb.data);
    let (ki, ni) = (k as isize, n as isize);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if na.requires_grad {
        // dA = dC @ B^T, where B^T of the k x n operand.
        let bt = if transpose_b { (ki, 1) } else { (1, ni) };
        let ga = accumulate(grads, a, ad.len());
        if plan.flat {
            let rows = ad.len() / k;
            T::gemm(rows, n, k, T::one(), g, (ni, 1), bd, bt, T::one(), ga, (ki, 1));
        } else {
            for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &g[i * m * n..(i + 1) * m * n],
                    (ni, 1),
                    &bd[ob..ob + k * n],
                    bt,
                    T::one(),
                    &mut ga[oa..oa + m * k],
                    (ki, 1),
                );
            }
        }
    }
    if nb.requires_grad {
        // dB (k x n layout) = A^T @ dC; for a transposed b write dB^T.
        let gb_layout = if transpose_b { (1, ki) } else { (ni, 1) };
        let gb = accumulate(grads, b, bd.len());
        if plan.flat {
            let rows = ad.len() / k;
            T::gemm(k, rows, n, T::one(), ad, (1, ki), g, (ni, 1), T::one(), gb, gb_layout);
        } else {
            for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &ad[oa..oa + m * k],
                    (1, ki),
                    &g[i * m * n..(i + 1) * m * n],
                    (ni, 1),
                    T::one(),
                    &mut gb[ob..ob + k * n],
                    gb_layout,
                );
            }
        }
    }
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); data.len()];
    for_each_broadcast(&out_shape, &strides, &zeros, |o, i, _| out[o] = data[i]);
    out
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    /// Copies the current value out of the graph.
    pub fn value(&self) -> Tensor<T> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.data.as_ref().clone()).expect("node shape is consistent")
    }

    pub fn item(&self) -> T {
        let nodes = self.graph.nodes.borrow();
        nodes[self.id].data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn wrap(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var<'g, T> {
        let rg = self.graph.needs_grad(inputs);
        self.graph.push(shape, data, op, rg, None)
    }

    fn binary(&self, other: Var<'g, T>, kind: Binary) -> OpResult<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let f = |x: T, y: T| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Pow => x.powf(y),
                Binary::Min => {
                    if x <= y {
                        x
                    } else {
                        y
                    }
                }
                Binary::Max => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
            };
            if a.shape == b.shape {
                let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
                (a.shape.clone(), data)
            } else {
                let shape = broadcast_shapes(&a.shape, &b.shape)?;
                let sa = broadcast_strides(&a.shape, &shape);
                let sb = broadcast_strides(&b.shape, &shape);
                let mut data = vec![T::zero(); numel(&shape)];
                for_each_broadcast(&shape, &sa, &sb, |o, i, j| data[o] = f(a.data[i], b.data[j]));
                (shape, data)
            }
        };
        Ok(self.wrap(shape, data, Op::Binary(kind, self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'g, T>) -> OpResult<'g, T> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: Var<'g, T>) -> OpResult<'g, T> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: Var<'g, T>) -> OpResult<'g, T> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: Var<'g, T>) -> OpResult<'g, T> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise `self ^ exponent`.
    pub fn pow(&self, exponent: Var<'g, T>) -> OpResult<'g, T> {
        self.binary(exponent, Binary::Pow)
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(&self, other: Var<'g, T>) -> OpResult<'g, T> {
        self.binary(other, Binary::Min)
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(&self, other: Var<'g, T>) -> OpResult<'g, T> {
        self.binary(other, Binary::Max)
    }

    fn unary(&self, kind: Unary) -> Var<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let data = a
                .data
                .iter()
                .map(|&x| match kind {
                    Unary::Neg => -x,
                    Unary::Exp => x.exp(),
                    Unary::Ln => x.ln(),
                    Unary::Sigmoid => sigmoid(x),
                    Unary::Relu => {
                        if x > T::zero() {
                            x
                        } else {
                            T::zero()
                        }
                    }
                })
                .collect();
            (a.shape.clone(), data)
        };
        self.wrap(shape, data, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.unary(Unary::Neg)
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'g, T> {
        self.unary(Unary::Ln)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(Unary::Sigmoid)
    }

    /// `max(0, x)`; zero gradient at the kink.
    pub fn relu(&self) -> Var<'g, T> {
        self.unary(Unary::Relu)
    }

    fn map_scalar(&self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
        };
        self.wrap(shape, data, op, &[self.id])
    }

    pub fn add_scalar(&self, c: T) -> Var<'g, T> {
        self.map_scalar(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: T) -> Var<'g, T> {
        self.map_scalar(|x| x * c, Op::MulScalar(self.id, c))
    }

    /// `c - x`.
    pub fn rsub_scalar(&self, c: T) -> Var<'g, T> {
        self.neg().add_scalar(c)
    }

    pub fn powf(&self, p: T) -> Var<'g, T> {
        self.map_scalar(|x| x.powf(p), Op::PowScalar(self.id, p))
    }

    /// `min(c, x)` with the constant as first operand: on a tie the
    /// gradient goes to the constant.
    pub fn min_scalar(&self, c: T) -> Var<'g, T> {
        self.map_scalar(|x| if c <= x { c } else { x }, Op::MinScalar(self.id, c))
    }

    /// `max(c, x)` with the constant as first operand.
    pub fn max_scalar(&self, c: T) -> Var<'g, T> {
        self.map_scalar(|x| if c >= x { c } else { x }, Op::MaxScalar(self.id, c))
    }

    /// `min(hi, max(lo, x))`.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'g, T> {
        self.max_scalar(lo).min_scalar(hi)
    }

    /// Batched matrix product over the last two dimensions; leading
    /// dimensions broadcast.
    pub fn matmul(&self, other: Var<'g, T>) -> OpResult<'g, T> {
        self.matmul_impl(other, false)
    }

    /// `self @ other^T` over the last two dimensions.
    pub fn matmul_t(&self, other: Var<'g, T>) -> OpResult<'g, T> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: Var<'g, T>, transpose_b: bool) -> OpResult<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let plan = plan_matmul(&a.shape, &b.shape, transpose_b)?;
            let data = matmul_forward(&a.data, &b.data, &plan, transpose_b);
            (plan.out_shape, data)
        };
        let op = Op::Matmul {
            a: self.id,
            b: other.id,
            transpose_b,
        };
        Ok(self.wrap(shape, data, op, &[self.id, other.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> OpResult<'g, T> {
        let (data, rg) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            if numel(shape) != a.data.len() {
                return Err(TensorError::Reshape {
                    from: a.shape.clone(),
                    to: shape.to_vec(),
                });
            }
            (Arc::clone(&a.data), a.requires_grad)
        };
        Ok(self
            .graph
            .push_shared(shape.to_vec(), data, Op::Reshape(self.id), rg, None))
    }

    /// Reorders dimensions: output dim `i` is input dim `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> OpResult<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let mut seen = vec![false; a.shape.len()];
            let valid = axes.len() == a.shape.len()
                && axes
                    .iter()
                    .all(|&x| x < seen.len() && !std::mem::replace(&mut seen[x], true));
            if !valid {
                return Err(TensorError::Permute {
                    axes: axes.to_vec(),
                    rank: a.shape.len(),
                });
            }
            let shape: Vec<usize> = axes.iter().map(|&x| a.shape[x]).collect();
            (shape, permute_data(&a.data, &a.shape, axes))
        };
        Ok(self.wrap(shape, data, Op::Permute(self.id, axes.to_vec()), &[self.id]))
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last(&self) -> OpResult<'g, T> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::Permute { axes: vec![], rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(&axes)
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&self) -> Var<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let cols = *a.shape.last().unwrap_or(&1);
            let mut data = a.data.as_ref().clone();
            for row in data.chunks_mut(cols.max(1)) {
                softmax_in_place(row);
            }
            (a.shape.clone(), data)
        };
        self.wrap(shape, data, Op::Softmax(self.id), &[self.id])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let cols = *a.shape.last().unwrap_or(&1);
            let mut data = a.data.as_ref().clone();
            for row in data.chunks_mut(cols.max(1)) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|x| *x = *x - lse);
            }
            (a.shape.clone(), data)
        };
        self.wrap(shape, data, Op::LogSoftmax(self.id), &[self.id])
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> OpResult<'g, T> {
        let (shape, data, normalized, inv_std) = {
            let nodes = self.graph.nodes.borrow();
            let (x, gm, bt) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let cols = *x.shape.last().unwrap_or(&1);
            if gm.data.len() != cols || bt.data.len() != cols {
                return Err(TensorError::Broadcast {
                    lhs: x.shape.clone(),
                    rhs: gm.shape.clone(),
                });
            }
            let n = T::from_usize(cols).unwrap();
            let mut out = vec![T::zero(); x.data.len()];
            let mut normalized = vec![T::zero(); x.data.len()];
            let mut inv_std = Vec::with_capacity(x.data.len() / cols.max(1));
            for ((xr, nr), or) in x
                .data
                .chunks(cols)
                .zip(normalized.chunks_mut(cols))
                .zip(out.chunks_mut(cols))
            {
                let mean = xr.iter().copied().sum::<T>() / n;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = (var + eps).sqrt().recip();
                for k in 0..cols {
                    nr[k] = (xr[k] - mean) * inv;
                    or[k] = nr[k] * gm.data[k] + bt.data[k];
                }
                inv_std.push(inv);
            }
            (x.shape.clone(), out, normalized, inv_std)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            normalized,
            inv_std,
        };
        Ok(self.wrap(shape, data, op, &[self.id, gain.id, bias.id]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Var<'g, T> {
        let total = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].data.iter().copied().sum::<T>()
        };
        self.wrap(vec![], vec![total], Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = self.graph.nodes.borrow()[self.id].data.len();
        self.sum().mul_scalar(T::from_usize(n.max(1)).unwrap().recip())
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&self) -> Var<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let cols = *a.shape.last().unwrap_or(&1);
            let mut shape = a.shape.clone();
            if let Some(last) = shape.last_mut() {
                *last = 1;
            }
            let data = a.data.chunks(cols.max(1)).map(|r| r.iter().copied().sum()).collect();
            (shape, data)
        };
        self.wrap(shape, data, Op::SumLast(self.id), &[self.id])
    }

    /// Row lookup into a `[rows, cols]` table: output `[ids.len(), cols]`.
    pub fn gather_rows(&self, ids: &[usize]) -> OpResult<'g, T> {
        let (shape, data) = {
            let nodes = self.graph.nodes.borrow();
            let t = &nodes[self.id];
            if t.shape.len() != 2 {
                return Err(TensorError::Invalid(format!(
                    "gather_rows needs a matrix, got {:?}",
                    t.shape
                )));
            }
            let (rows, cols) = (t.shape[0], t.shape[1]);
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::IndexOutOfRange { index: id, bound: rows });
                }
                data.extend_from_slice(&t.data[id * cols..(id + 1) * cols]);
            }
            (vec![ids.len(), cols], data)
        };
        let op = Op::Gather {
            table: self.id,
            ids: ids.to_vec(),
        };
        Ok(self.wrap(shape, data, op, &[self.id]))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(self)`,
    /// where `self` is `[rows, classes]`. `None` targets are skipped.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> OpResult<'g, T> {
        let (loss, probs, count) = {
            let nodes = self.graph.nodes.borrow();
            let l = &nodes[self.id];
            let cols = *l.shape.last().unwrap_or(&1);
            let rows = l.data.len() / cols.max(1);
            if rows != targets.len() {
                return Err(TensorError::Invalid(format!(
                    "cross_entropy has {rows} rows but {} targets",
                    targets.len()
                )));
            }
            let mut probs = l.data.as_ref().clone();
            let mut total = T::zero();
            let mut count = 0;
            for (row, (p, target)) in probs.chunks_mut(cols).zip(targets).enumerate() {
                let Some(t) = *target else { continue };
                if t >= cols {
                    return Err(TensorError::IndexOutOfRange { index: t, bound: cols });
                }
                let logits = &l.data[row * cols..(row + 1) * cols];
                total += log_sum_exp(logits) - logits[t];
                softmax_in_place(p);
                count += 1;
            }
            if count == 0 {
                return Err(TensorError::Invalid(
                    "cross_entropy needs at least one non-ignored target".into(),
                ));
            }
            (total / T::from_usize(count).unwrap(), probs, count)
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.wrap(vec![], vec![loss], op, &[self.id]))
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / total);
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Element> Parameter<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            value: Arc::new(value.into_data()),
            grad: None,
            requires_grad: true,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> Tensor<T> {
        let p = &self.params[id.0];
        Tensor::new(&p.shape, p.value.as_ref().clone()).expect("parameter shape is consistent")
    }

    /// Mutable access to a parameter's values. Clones the buffer only if a
    /// live graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        Arc::make_mut(&mut self.params[id.0].value).as_mut_slice()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if value.shape() != p.shape.as_slice() {
            return Err(TensorError::Reshape {
                from: value.shape().to_vec(),
                to: p.shape.clone(),
            });
        }
        p.value = Arc::new(value.into_data());
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Adds the gradients that `graph` computed for this store's parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        let nodes = graph.nodes.borrow();
        let grads = graph.grads.borrow();
        for (&node_id, g) in grads.iter() {
            let Some(pid) = nodes[node_id].param else { continue };
            let p = &mut self.params[pid.0];
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub(crate) fn update(&mut self, id: ParamId, f: impl FnOnce(&mut [T], Option<&[T]>)) {
        let p = &mut self.params[id.0];
        let value = Arc::make_mut(&mut p.value);
        f(value, p.grad.as_deref());
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: Arc::new(p.value.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect()),
                    grad: None,
                    requires_grad: p.requires_grad,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error used by gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
