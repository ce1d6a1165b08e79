//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors form a dynamic (define-by-run) computation graph: each op records
//! a node holding its inputs and whatever context the backward rule needs.
//! `backward` walks the graph once in reverse topological order and
//! accumulates gradients into every tensor that requires them.
//!
//! A `Tensor` is a cheap handle (`Rc`); cloning shares the underlying buffer.
//! Graphs are confined to one thread; independent graphs may live on
//! independent threads.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{AuxError, Result};

/// Operation recorded on a graph node. Saved fields are whatever the
/// backward rule needs beyond the inputs themselves.
#[derive(Debug)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Relu,
    Exp,
    Log,
    Abs,
    ClampMin(f64),
    Sum,
    Mean,
    /// inputs: [x, weight, bias]; weight is [out, in, k, k].
    Conv2d { stride: usize, padding: usize },
    /// inputs: [x, weight, bias]; weight is [in, out, k, k].
    TransposedConv2d { stride: usize },
    /// Flat input index of the window maximum, per output element.
    MaxPool2 { argmax: Vec<usize> },
    SoftmaxChannels,
    /// Channel count of the first input (split point for the backward).
    ConcatChannels { first_channels: usize },
    /// Flat indices into the input, one per gathered element.
    Gather { indices: Vec<usize> },
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Tensor>,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Dense n-dimensional f64 value, optionally tracked in a computation graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn alloc(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// Leaf tensor from raw data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(AuxError::InvalidArgument(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if numel_of(shape) != data.len() {
            return Err(AuxError::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::alloc(shape.to_vec(), data, requires_grad, None))
    }

    /// Scalar leaf (shape `[1]`).
    pub fn scalar(value: f64) -> Self {
        Self::alloc(vec![1], vec![value], false, None)
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        Self::alloc(shape.to_vec(), vec![0.0; numel_of(shape)], requires_grad, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "value() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite the data buffer (length must match). Used by optimizers,
    /// checkpoint loading and finite-difference probes.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.numel() {
            return Err(AuxError::ShapeMismatch(format!(
                "set_data: expected {} elements, got {}",
                self.numel(),
                data.len()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    /// Overwrite a single element; used by finite-difference probes.
    pub fn set_data_at(&self, index: usize, value: f64) {
        self.inner.data.borrow_mut()[index] = value;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn with_grad<R>(&self, f: impl FnOnce(Option<&[f64]>) -> R) -> R {
        f(self.inner.grad.borrow().as_deref())
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same data, no graph node, `requires_grad = false`. Gradients never
    /// flow through the result.
    pub fn detach(&self) -> Tensor {
        Self::alloc(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    fn ptr(&self) -> *const Inner {
        Rc::as_ptr(&self.inner)
    }

    fn record(shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: Vec<Tensor>) -> Tensor {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = if requires_grad {
            Some(Node { op, inputs })
        } else {
            None
        };
        Self::alloc(shape, data, requires_grad, node)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_elementwise(self, other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_elementwise(self, other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_elementwise(self, other, Op::Mul, |a, b| a * b)
    }

    pub fn scalar_mul(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| c * x).collect();
        Tensor::record(
            self.shape().to_vec(),
            data,
            Op::ScalarMul(c),
            vec![self.clone()],
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scalar_mul(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        Tensor::record(self.shape().to_vec(), data, Op::Relu, vec![self.clone()])
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::record(self.shape().to_vec(), data, Op::Exp, vec![self.clone()])
    }

    /// Natural log; errors on the first non-positive element.
    pub fn log(&self) -> Result<Tensor> {
        {
            let data = self.data();
            if let Some((index, &value)) = data.iter().enumerate().find(|(_, &x)| x <= 0.0) {
                return Err(AuxError::LogDomain { index, value });
            }
        }
        let data = self.data().iter().map(|&x| x.ln()).collect();
        Ok(Tensor::record(
            self.shape().to_vec(),
            data,
            Op::Log,
            vec![self.clone()],
        ))
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        Tensor::record(self.shape().to_vec(), data, Op::Abs, vec![self.clone()])
    }

    /// `max(x, c)` per element. Gradient passes only where x > c.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(c)).collect();
        Tensor::record(
            self.shape().to_vec(),
            data,
            Op::ClampMin(c),
            vec![self.clone()],
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(AuxError::InvalidArgument("sum of empty tensor".into()));
        }
        let s = self.data().iter().sum();
        Ok(Tensor::record(vec![1], vec![s], Op::Sum, vec![self.clone()]))
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(AuxError::InvalidArgument("mean of empty tensor".into()));
        }
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum();
        Ok(Tensor::record(
            vec![1],
            vec![s / n],
            Op::Mean,
            vec![self.clone()],
        ))
    }

    /// Gather elements at `indices` (flat) into a rank-1 tensor. Backward
    /// scatter-adds into the gathered positions.
    pub fn gather(&self, indices: Vec<usize>) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(AuxError::InvalidArgument("gather with no indices".into()));
        }
        let data = self.data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in &indices {
            match data.get(i) {
                Some(&v) => out.push(v),
                None => {
                    return Err(AuxError::InvalidArgument(format!(
                        "gather index {i} out of bounds for {} elements",
                        data.len()
                    )))
                }
            }
        }
        drop(data);
        let n = indices.len();
        Ok(Tensor::record(
            vec![n],
            out,
            Op::Gather { indices },
            vec![self.clone()],
        ))
    }

    pub(crate) fn record_op(shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: Vec<Tensor>) -> Tensor {
        Tensor::record(shape, data, op, inputs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Every reachable tensor with
    /// `requires_grad` receives (accumulates) `d root / d tensor`; calling
    /// twice without zeroing doubles the gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(AuxError::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(AuxError::InvalidArgument(
                "backward root does not require grad".into(),
            ));
        }

        // Post-order DFS over grad-requiring tensors: children land before
        // parents, so reversing gives topological order from the root.
        let mut order: Vec<Tensor> = Vec::new();
        let mut position: HashMap<*const Inner, usize> = HashMap::new();
        {
            let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
            let mut visiting: HashMap<*const Inner, bool> = HashMap::new();
            visiting.insert(self.ptr(), false);
            while let Some((t, child)) = stack.pop() {
                let children: &[Tensor] = match &t.inner.node {
                    Some(node) => &node.inputs,
                    None => &[],
                };
                let mut pushed = false;
                let mut next = child;
                while next < children.len() {
                    let c = &children[next];
                    next += 1;
                    if c.requires_grad() && !visiting.contains_key(&c.ptr()) {
                        visiting.insert(c.ptr(), false);
                        stack.push((t.clone(), next));
                        stack.push((c.clone(), 0));
                        pushed = true;
                        break;
                    }
                }
                if !pushed {
                    position.insert(t.ptr(), order.len());
                    order.push(t);
                }
            }
        }

        // Scratch gradient buffers for this sweep only; merged into the
        // persistent .grad fields at the end so repeated sweeps accumulate.
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; order.len()];
        let root_pos = position[&self.ptr()];
        scratch[root_pos] = Some(vec![1.0]);

        for i in (0..order.len()).rev() {
            let upstream = match scratch[i].take() {
                Some(g) => g,
                None => continue, // not reachable from the root with nonzero grad
            };
            let t = &order[i];
            // Merge into the persistent gradient before the node rule gets
            // to reuse the buffer.
            {
                let mut grad = t.inner.grad.borrow_mut();
                match grad.as_mut() {
                    Some(g) => {
                        for (a, b) in g.iter_mut().zip(&upstream) {
                            *a += b;
                        }
                    }
                    None => *grad = Some(upstream.clone()),
                }
            }
            if let Some(node) = &t.inner.node {
                backprop_node(t, node, upstream, &mut |input: &Tensor, contrib: Vec<f64>| {
                    let pos = position[&input.ptr()];
                    match &mut scratch[pos] {
                        Some(buf) => {
                            for (a, b) in buf.iter_mut().zip(&contrib) {
                                *a += b;
                            }
                        }
                        None => scratch[pos] = Some(contrib),
                    }
                });
            }
        }
        Ok(())
    }
}

/// Result of `binary_elementwise` shape reconciliation: equal shapes, or one
/// operand scalar (numel 1) broadcast against the other.
fn binary_elementwise(
    a: &Tensor,
    b: &Tensor,
    op: Op,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (out_shape, data) = {
        let da = a.data();
        let db = b.data();
        if a.shape() == b.shape() {
            let data = da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)).collect();
            (a.shape().to_vec(), data)
        } else if b.numel() == 1 {
            let s = db[0];
            (a.shape().to_vec(), da.iter().map(|&x| f(x, s)).collect())
        } else if a.numel() == 1 {
            let s = da[0];
            (b.shape().to_vec(), db.iter().map(|&y| f(s, y)).collect())
        } else {
            return Err(AuxError::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
    };
    Ok(Tensor::record(
        out_shape,
        data,
        op,
        vec![a.clone(), b.clone()],
    ))
}

/// Gradient contribution for one input of a binary op, reducing to a scalar
/// by summation when that input was broadcast.
fn reduce_for(input: &Tensor, full: Vec<f64>) -> Vec<f64> {
    if input.numel() == 1 && full.len() != 1 {
        vec![full.iter().sum()]
    } else {
        full
    }
}

fn backprop_node(
    out: &Tensor,
    node: &Node,
    mut upstream: Vec<f64>,
    sink: &mut dyn FnMut(&Tensor, Vec<f64>),
) {
    let inputs = &node.inputs;
    match &node.op {
        Op::Add => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if b.requires_grad() {
                sink(b, reduce_for(b, upstream.clone()));
            }
            if a.requires_grad() {
                sink(a, reduce_for(a, upstream));
            }
        }
        Op::Sub => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.requires_grad() {
                sink(a, reduce_for(a, upstream.clone()));
            }
            if b.requires_grad() {
                for g in upstream.iter_mut() {
                    *g = -*g;
                }
                sink(b, reduce_for(b, upstream));
            }
        }
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if b.requires_grad() {
                let da = a.data();
                let full: Vec<f64> = if a.numel() == 1 {
                    upstream.iter().map(|&g| g * da[0]).collect()
                } else if b.numel() == 1 {
                    vec![upstream.iter().zip(da.iter()).map(|(&g, &x)| g * x).sum()]
                } else {
                    upstream.iter().zip(da.iter()).map(|(&g, &x)| g * x).collect()
                };
                drop(da);
                sink(b, full);
            }
            if a.requires_grad() {
                let db = b.data();
                if b.numel() == 1 {
                    let s = db[0];
                    for g in upstream.iter_mut() {
                        *g *= s;
                    }
                    drop(db);
                    sink(a, upstream);
                } else if a.numel() == 1 {
                    let s = upstream.iter().zip(db.iter()).map(|(&g, &y)| g * y).sum();
                    drop(db);
                    sink(a, vec![s]);
                } else {
                    for (g, &y) in upstream.iter_mut().zip(db.iter()) {
                        *g *= y;
                    }
                    drop(db);
                    sink(a, upstream);
                }
            }
        }
        Op::ScalarMul(c) => {
            let input = &inputs[0];
            if input.requires_grad() {
                for g in upstream.iter_mut() {
                    *g *= c;
                }
                sink(input, upstream);
            }
        }
        Op::Relu => {
            let input = &inputs[0];
            if input.requires_grad() {
                // Subgradient at 0 is 0.
                let x = input.data();
                for (g, &v) in upstream.iter_mut().zip(x.iter()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                drop(x);
                sink(input, upstream);
            }
        }
        Op::Exp => {
            let input = &inputs[0];
            if input.requires_grad() {
                let y = out.data();
                for (g, &e) in upstream.iter_mut().zip(y.iter()) {
                    *g *= e;
                }
                drop(y);
                sink(input, upstream);
            }
        }
        Op::Log => {
            let input = &inputs[0];
            if input.requires_grad() {
                let x = input.data();
                for (g, &v) in upstream.iter_mut().zip(x.iter()) {
                    *g /= v;
                }
                drop(x);
                sink(input, upstream);
            }
        }
        Op::Abs => {
            let input = &inputs[0];
            if input.requires_grad() {
                // sign(0) = 0: subgradient at the kink.
                let x = input.data();
                for (g, &v) in upstream.iter_mut().zip(x.iter()) {
                    *g *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                drop(x);
                sink(input, upstream);
            }
        }
        Op::ClampMin(c) => {
            let input = &inputs[0];
            if input.requires_grad() {
                let x = input.data();
                for (g, &v) in upstream.iter_mut().zip(x.iter()) {
                    if v <= *c {
                        *g = 0.0;
                    }
                }
                drop(x);
                sink(input, upstream);
            }
        }
        Op::Sum => {
            let input = &inputs[0];
            if input.requires_grad() {
                sink(input, vec![upstream[0]; input.numel()]);
            }
        }
        Op::Mean => {
            let input = &inputs[0];
            if input.requires_grad() {
                let g = upstream[0] / input.numel() as f64;
                sink(input, vec![g; input.numel()]);
            }
        }
        Op::Gather { indices } => {
            let input = &inputs[0];
            if input.requires_grad() {
                let mut g = vec![0.0; input.numel()];
                for (&idx, &u) in indices.iter().zip(&upstream) {
                    g[idx] += u;
                }
                sink(input, g);
            }
        }
        Op::Conv2d { stride, padding } => {
            crate::layers::conv2d_backward(inputs, out, &upstream, *stride, *padding, sink);
        }
        Op::TransposedConv2d { stride } => {
            crate::layers::transposed_conv2d_backward(inputs, &upstream, *stride, sink);
        }
        Op::MaxPool2 { argmax } => {
            let input = &inputs[0];
            if input.requires_grad() {
                let mut g = vec![0.0; input.numel()];
                for (&src, &u) in argmax.iter().zip(&upstream) {
                    g[src] += u;
                }
                sink(input, g);
            }
        }
        Op::SoftmaxChannels => {
            crate::layers::softmax_channels_backward(inputs, out, upstream, sink);
        }
        Op::ConcatChannels { first_channels } => {
            crate::layers::concat_channels_backward(inputs, &upstream, *first_channels, sink);
        }
    }
}

// ── gradient checking ───────────────────────────────────────────────────

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Relative error with a small floor so near-zero gradient pairs compare on
/// an absolute scale.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` rebuilds the scalar loss from the current parameter values; `entries`
/// selects (param index, flat element) pairs to probe, or every entry of
/// every parameter when `None`.
pub fn grad_check<F>(
    mut f: F,
    params: &[Tensor],
    entries: Option<&[(usize, usize)]>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(AuxError::InvalidArgument("grad_check: h must be > 0".into()));
    }
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    if !loss.value().is_finite() {
        return Err(AuxError::NonFinite("grad_check: loss".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let all_entries: Vec<(usize, usize)> = match entries {
        Some(e) => e.to_vec(),
        None => params
            .iter()
            .enumerate()
            .flat_map(|(pi, p)| (0..p.numel()).map(move |ei| (pi, ei)))
            .collect(),
    };

    let mut max_rel = 0.0f64;
    for &(pi, ei) in &all_entries {
        let p = &params[pi];
        let orig = p.data()[ei];
        p.data_mut()[ei] = orig + h;
        let up = f()?.value();
        p.data_mut()[ei] = orig - h;
        let down = f()?.value();
        p.data_mut()[ei] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(AuxError::NonFinite(format!(
                "grad_check: probe at param {pi} entry {ei}"
            )));
        }
        let fd = (up - down) / (2.0 * h);
        max_rel = max_rel.max(rel_err(fd, analytic[pi][ei]));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked: all_entries.len(),
        passed: max_rel <= tol,
    })
}
