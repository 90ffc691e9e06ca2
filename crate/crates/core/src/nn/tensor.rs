//! Reverse-mode automatic differentiation over dense n-dimensional arrays.
//!
//! Eager evaluation, tape-free: every op produces a new [`Tensor`] holding its
//! values, handles to its inputs, and a closure that pushes the output
//! cotangent back into the inputs. [`Tensor::backward`] runs a deterministic
//! reverse topological sweep from a scalar loss. A value used by several
//! downstream ops (weight sharing, siamese branches) accumulates its gradient
//! additively from every use.
//!
//! Graphs are per-thread (`Rc`-based); kernels inside an op are plain
//! sequential loops so results are bit-identical across runs.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::scalar::{gemm, MatRef, Scalar};

use super::NnError;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` without recording any backward closures; the graph built inside is
/// evaluation-only and upstream tensors keep no extra references.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _restore = NO_GRAD.with(|c| {
        let prev = c.get();
        c.set(true);
        Restore(prev)
    });
    f()
}

fn grad_recording() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// Arguments handed to an op's backward closure.
pub struct BackwardArgs<'a, S: Scalar> {
    /// Values of the op's output.
    pub values: &'a [S],
    /// Cotangent of the op's output.
    pub grad: &'a [S],
    /// The op's inputs, in construction order.
    pub parents: &'a [Tensor<S>],
}

type BackwardFn<S> = Box<dyn Fn(&BackwardArgs<'_, S>)>;

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Shared handle to a node in the computation graph.
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<S: Scalar> Tensor<S> {
    fn new_node(
        shape: Vec<usize>,
        values: Vec<S>,
        requires_grad: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = NEXT_ID.with(|c| {
            let id = c.get();
            c.set(id + 1);
            id
        });
        Tensor {
            node: Rc::new(Node {
                id,
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Trainable leaf.
    pub fn parameter(shape: &[usize], values: Vec<S>) -> Self {
        Self::new_node(shape.to_vec(), values, true, Vec::new(), None)
    }

    /// Non-trainable leaf (inputs, labels, buffers such as running stats).
    pub fn constant(shape: &[usize], values: Vec<S>) -> Self {
        Self::new_node(shape.to_vec(), values, false, Vec::new(), None)
    }

    pub fn scalar(v: S) -> Self {
        Self::constant(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(shape, vec![S::zero(); shape.iter().product()])
    }

    /// Result of an op. Inputs and the backward closure are dropped when
    /// gradients are off or no input needs them, so evaluation-only forward
    /// passes free intermediate storage eagerly.
    pub fn from_op(
        shape: Vec<usize>,
        values: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let needs = grad_recording() && parents.iter().any(|p| p.requires_grad());
        if needs {
            Self::new_node(shape, values, true, parents, Some(backward))
        } else {
            Self::new_node(shape, values, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<S>> {
        self.node.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.values.borrow().clone()
    }

    /// Overwrite values in place (optimizer updates, running-stat refresh).
    pub fn set_values(&self, v: &[S]) {
        let mut dst = self.node.values.borrow_mut();
        assert_eq!(dst.len(), v.len(), "set_values length mismatch");
        dst.copy_from_slice(v);
    }

    pub fn update_values(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.node.values.borrow_mut());
    }

    /// Accumulated gradient, if any flowed here during the last backward.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.node.values.borrow()[0]
    }

    /// Add a contribution into this tensor's gradient buffer.
    pub fn accumulate_grad(&self, f: impl FnOnce(&mut [S])) {
        if !self.node.requires_grad {
            return;
        }
        let len = self.len();
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![S::zero(); len]);
        f(buf);
    }

    /// Detached copy: same values, fresh constant leaf.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::constant(&self.node.shape, self.to_vec())
    }

    /// Reverse sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and pushes
    /// cotangents through every recorded op in reverse topological order.
    pub fn backward(&self) -> Result<(), NnError> {
        if self.len() != 1 {
            return Err(NnError::NonScalarLoss { len: self.len() });
        }
        // Post-order over inputs; reversed, every node is visited after all
        // of its consumers, so its gradient is complete when its closure runs.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        enum Frame<S: Scalar> {
            Enter(Tensor<S>),
            Exit(Tensor<S>),
        }
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if visited.insert(t.node.id) {
                        stack.push(Frame::Exit(t.clone()));
                        for p in t.node.parents.iter().rev() {
                            if !visited.contains(&p.node.id) {
                                stack.push(Frame::Enter(p.clone()));
                            }
                        }
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        *self.node.grad.borrow_mut() = Some(vec![S::one()]);
        for t in order.iter().rev() {
            let Some(back) = &t.node.backward else { continue };
            let grad_ref = t.node.grad.borrow();
            let Some(g) = grad_ref.as_ref() else { continue };
            let values = t.node.values.borrow();
            back(&BackwardArgs { values: &values, grad: g, parents: &t.node.parents });
        }
        Ok(())
    }
}

fn check_same_shape<S: Scalar>(op: &str, a: &Tensor<S>, b: &Tensor<S>) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::ShapeMismatch {
            op: op.to_string(),
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        check_same_shape("add", self, other)?;
        let out: Vec<S> =
            self.values().iter().zip(other.values().iter()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|args| {
                for p in args.parents {
                    p.accumulate_grad(|g| {
                        for (gi, &go) in g.iter_mut().zip(args.grad) {
                            *gi = *gi + go;
                        }
                    });
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        check_same_shape("sub", self, other)?;
        let out: Vec<S> =
            self.values().iter().zip(other.values().iter()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|args| {
                args.parents[0].accumulate_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(args.grad) {
                        *gi = *gi + go;
                    }
                });
                args.parents[1].accumulate_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(args.grad) {
                        *gi = *gi - go;
                    }
                });
            }),
        ))
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.values().iter().map(|&a| a * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |args| {
                args.parents[0].accumulate_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(args.grad) {
                        *gi = *gi + go * c;
                    }
                });
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let s: S = self.values().iter().copied().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(|args| {
                let go = args.grad[0];
                args.parents[0].accumulate_grad(|g| {
                    for gi in g.iter_mut() {
                        *gi = *gi + go;
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = S::from_f64(self.len() as f64);
        let s: S = self.values().iter().copied().sum();
        Tensor::from_op(
            vec![1],
            vec![s / n],
            vec![self.clone()],
            Box::new(move |args| {
                let go = args.grad[0] / n;
                args.parents[0].accumulate_grad(|g| {
                    for gi in g.iter_mut() {
                        *gi = *gi + go;
                    }
                });
            }),
        )
    }

    /// Same storage order, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>, NnError> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(NnError::ShapeMismatch {
                op: "reshape".into(),
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|args| {
                args.parents[0].accumulate_grad(|g| {
                    for (gi, &go) in g.iter_mut().zip(args.grad) {
                        *gi = *gi + go;
                    }
                });
            }),
        ))
    }

    /// Collapse all trailing axes: [B, ...] -> [B, prod(...)].
    pub fn flatten(&self) -> Result<Tensor<S>, NnError> {
        let b = *self.shape().first().unwrap_or(&0);
        let rest: usize = self.shape().iter().skip(1).product();
        self.reshape(&[b, rest])
    }

    /// Concatenate two [B, m] / [B, n] matrices into [B, m+n].
    pub fn concat_cols(&self, other: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(NnError::ShapeMismatch {
                op: "concat_cols".into(),
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let (b, m, n) = (sa[0], sa[1], sb[1]);
        let av = self.values();
        let bv = other.values();
        let mut out = Vec::with_capacity(b * (m + n));
        for r in 0..b {
            out.extend_from_slice(&av[r * m..(r + 1) * m]);
            out.extend_from_slice(&bv[r * n..(r + 1) * n]);
        }
        drop(av);
        drop(bv);
        Ok(Tensor::from_op(
            vec![b, m + n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |args| {
                args.parents[0].accumulate_grad(|g| {
                    for r in 0..b {
                        for j in 0..m {
                            g[r * m + j] = g[r * m + j] + args.grad[r * (m + n) + j];
                        }
                    }
                });
                args.parents[1].accumulate_grad(|g| {
                    for r in 0..b {
                        for j in 0..n {
                            g[r * n + j] = g[r * n + j] + args.grad[r * (m + n) + m + j];
                        }
                    }
                });
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// max(x, slope * x); derivative at exactly 0 is defined as `slope`.
    pub fn leaky_relu(&self, slope: S) -> Tensor<S> {
        let out: Vec<S> =
            self.values().iter().map(|&x| if x > S::zero() { x } else { x * slope }).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |args| {
                let xv = args.parents[0].values();
                args.parents[0].accumulate_grad(|g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(args.grad).zip(xv.iter()) {
                        let d = if x > S::zero() { S::one() } else { slope };
                        *gi = *gi + go * d;
                    }
                });
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let out: Vec<S> = self.values().iter().map(|&x| sigmoid_scalar(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|args| {
                args.parents[0].accumulate_grad(|g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(args.grad).zip(args.values) {
                        *gi = *gi + go * y * (S::one() - y);
                    }
                });
            }),
        )
    }

    /// Row-wise softmax over the last axis of a [B, K] tensor, max-shifted.
    pub fn softmax_rows(&self) -> Result<Tensor<S>, NnError> {
        let shape = self.shape().to_vec();
        if shape.len() != 2 {
            return Err(NnError::ShapeMismatch {
                op: "softmax_rows".into(),
                detail: format!("{shape:?}"),
            });
        }
        let (b, k) = (shape[0], shape[1]);
        let xv = self.values();
        let mut out = vec![S::zero(); b * k];
        for r in 0..b {
            let row = &xv[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for j in 0..k {
                let e = (row[j] - m).exp();
                out[r * k + j] = e;
                sum = sum + e;
            }
            for j in 0..k {
                out[r * k + j] = out[r * k + j] / sum;
            }
        }
        drop(xv);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |args| {
                args.parents[0].accumulate_grad(|g| {
                    for r in 0..b {
                        let s = &args.values[r * k..(r + 1) * k];
                        let go = &args.grad[r * k..(r + 1) * k];
                        let dot: S = s.iter().zip(go).map(|(&si, &gi)| si * gi).sum();
                        for j in 0..k {
                            g[r * k + j] = g[r * k + j] + s[j] * (go[j] - dot);
                        }
                    }
                });
            }),
        ))
    }
}

pub(crate) fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// ---------------------------------------------------------------------------
// Affine map
// ---------------------------------------------------------------------------

/// y[B,n] = x[B,m] . w[m,n] + b[n]
pub fn dense<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NnError> {
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
        return Err(NnError::ShapeMismatch {
            op: "dense".into(),
            detail: format!("x{xs:?} w{ws:?} b{bs:?}"),
        });
    }
    let (batch, m, n) = (xs[0], ws[0], ws[1]);
    let mut out = vec![S::zero(); batch * n];
    gemm(
        batch,
        m,
        n,
        S::one(),
        MatRef::row_major(&x.values(), m),
        MatRef::row_major(&w.values(), n),
        S::zero(),
        &mut out,
    );
    {
        let bv = b.values();
        for r in 0..batch {
            for j in 0..n {
                out[r * n + j] = out[r * n + j] + bv[j];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![batch, n],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |args| {
            let xp = &args.parents[0];
            let wp = &args.parents[1];
            let bp = &args.parents[2];
            // dx += g . w^T
            if xp.requires_grad() {
                let wv = wp.values();
                xp.accumulate_grad(|g| {
                    gemm(
                        batch,
                        n,
                        m,
                        S::one(),
                        MatRef::row_major(args.grad, n),
                        MatRef::transposed(&wv, n),
                        S::one(),
                        g,
                    );
                });
            }
            // dw += x^T . g
            if wp.requires_grad() {
                let xv = xp.values();
                wp.accumulate_grad(|g| {
                    gemm(
                        m,
                        batch,
                        n,
                        S::one(),
                        MatRef::transposed(&xv, m),
                        MatRef::row_major(args.grad, n),
                        S::one(),
                        g,
                    );
                });
            }
            // db += column sums of g
            bp.accumulate_grad(|g| {
                for r in 0..batch {
                    for j in 0..n {
                        g[j] = g[j] + args.grad[r * n + j];
                    }
                }
            });
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_all_ones() {
        let x = Tensor::<f64>::parameter(&[4], vec![1.0, -2.0, 3.0, 0.5]);
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
        // d(loss)/d(loss) = 1
        assert_eq!(loss.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]);
        assert!(matches!(x.backward(), Err(NnError::NonScalarLoss { len: 2 })));
    }

    #[test]
    fn reused_input_accumulates_both_contributions() {
        // loss = sum(x + x) => grad = 2
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, 2.0, 3.0]);
        let loss = x.add(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn no_grad_builds_leaf_only_graph() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]);
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.requires_grad());
        assert!(y.node.parents.is_empty());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_handle_large_logits() {
        let x = Tensor::<f64>::constant(&[2, 2], vec![0.0, 0.0, 1000.0, 1000.0]);
        let s = x.softmax_rows().unwrap();
        let v = s.to_vec();
        assert_eq!(v, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::<f64>::constant(&[3], vec![-1.0, 0.0, 3.0]);
        let y = x.leaky_relu(0.2);
        assert_eq!(y.to_vec(), vec![-0.2, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_saturates_toward_zero_at_minus_five() {
        let x = Tensor::<f64>::constant(&[1], vec![-5.0]);
        let y = x.sigmoid();
        assert!((y.item() - 0.0066928509).abs() < 1e-8);
    }

    #[test]
    fn dense_identity_passthrough_and_shape() {
        let x = Tensor::<f64>::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut wv = vec![0.0; 9];
        for i in 0..3 {
            wv[i * 3 + i] = 1.0;
        }
        let w = Tensor::parameter(&[3, 3], wv);
        let b = Tensor::parameter(&[3], vec![0.0; 3]);
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let w2 = Tensor::parameter(&[4, 3], vec![0.5; 12]);
        let b2 = Tensor::parameter(&[3], vec![0.0; 3]);
        let x2 = Tensor::<f64>::constant(&[2, 4], vec![1.0; 8]);
        let y2 = dense(&x2, &w2, &b2).unwrap();
        assert_eq!(y2.shape(), &[2, 3]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let x = Tensor::<f32>::constant(&[2, 4], (0..8).map(|i| i as f32 * 0.37 - 1.0).collect());
        let w = Tensor::parameter(&[4, 3], (0..12).map(|i| (i as f32).sin()).collect());
        let b = Tensor::parameter(&[3], vec![0.1, -0.2, 0.3]);
        let y1 = dense(&x, &w, &b).unwrap().sigmoid().to_vec();
        let y2 = dense(&x, &w, &b).unwrap().sigmoid().to_vec();
        assert!(y1.iter().zip(&y2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
