//! Dense real tensors with reverse-mode autodiff.
//!
//! A [`Tape`] records operations as they execute; [`Tensor::backward`] walks
//! the recording in reverse and accumulates gradients into every
//! `requires_grad` leaf that the loss depends on. Tensors are cheap handles:
//! cloning shares the underlying storage, so an optimizer holding clones of
//! the model parameters updates the same memory the model reads.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::{Rc, Weak};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

type BackwardFn<E> = Box<dyn Fn(&[E], &mut GradStore<E>)>;

enum NodeKind<E: Scalar> {
    /// Input or parameter. If it requires grad, backward deposits here.
    Leaf { slot: Option<Rc<RefCell<Option<Vec<E>>>>> },
    /// Recorded operation: given the output gradient, push contributions
    /// to the parent nodes.
    Op { backward: BackwardFn<E> },
}

struct Node<E: Scalar> {
    kind: NodeKind<E>,
}

struct TapeInner<E: Scalar> {
    id: u64,
    nodes: Vec<Node<E>>,
}

/// Gradient tape. Nodes are appended in execution order, so every node's
/// inputs precede it and a single reverse sweep visits each node once.
pub struct Tape<E: Scalar> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
                nodes: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    fn push(&self, node: Node<E>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }
}

/// Per-node gradient accumulator used during a backward sweep.
pub struct GradStore<E: Scalar> {
    slots: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> GradStore<E> {
    fn new(n: usize) -> Self {
        GradStore { slots: vec![None; n] }
    }

    /// Add `contrib` into the gradient of node `id` (fan-out sums).
    pub fn accum(&mut self, id: usize, contrib: &[E]) {
        match &mut self.slots[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += *ci;
                }
            }
            slot @ None => *slot = Some(contrib.to_vec()),
        }
    }

    fn take(&mut self, id: usize) -> Option<Vec<E>> {
        self.slots[id].take()
    }
}

struct Track<E: Scalar> {
    tape: Weak<RefCell<TapeInner<E>>>,
    tape_id: u64,
    node: usize,
}

/// Dense tensor of rank 1, 2 or 4, row-major, NCHW for rank 4.
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<E>>>,
    requires_grad: bool,
    grad: Rc<RefCell<Option<Vec<E>>>>,
    track: Rc<RefCell<Option<Track<E>>>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    /// Shallow clone: shares storage, gradient slot and tape linkage.
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: Rc::clone(&self.grad),
            track: Rc::clone(&self.track),
        }
    }
}

impl<E: Scalar> core::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(RefCell::new(data)),
            requires_grad: false,
            grad: Rc::new(RefCell::new(None)),
            track: Rc::new(RefCell::new(None)),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![E::ZERO; numel]).unwrap()
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![v; numel]).unwrap()
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    pub fn from_f64s(shape: &[usize], vals: &[f64]) -> Result<Self> {
        Tensor::new(shape, vals.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the raw storage. Kernels hold this only for the kernel's
    /// duration.
    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.borrow().clone()
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.len(), 1);
        self.data.borrow()[0]
    }

    /// Overwrite storage in place (shapes must agree). Used by the
    /// optimizer and checkpoint restore.
    pub fn set_data(&self, vals: &[E]) {
        let mut d = self.data.borrow_mut();
        assert_eq!(d.len(), vals.len());
        d.copy_from_slice(vals);
    }

    /// Mutate storage through a closure (single borrow).
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.data.borrow_mut());
    }

    /// Shared handle to the storage; ops capture this in backward closures
    /// so recomputation sees the forward-time values.
    pub(crate) fn data_rc(&self) -> &Rc<RefCell<Vec<E>>> {
        &self.data
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.grad.borrow().clone()
    }

    /// Set the gradient directly (testing and oracle harnesses).
    pub fn seed_grad(&self, vals: &[E]) {
        assert_eq!(self.len(), vals.len());
        *self.grad.borrow_mut() = Some(vals.to_vec());
    }

    /// Mutate the gradient in place if present (clipping, divergence checks).
    pub fn with_grad_mut(&self, f: impl FnOnce(&mut [E])) {
        if let Some(g) = self.grad.borrow_mut().as_mut() {
            f(g);
        }
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    /// Copy of this tensor with fresh storage, no grad, no tape linkage.
    pub fn deep_clone(&self) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::new(RefCell::new(self.data.borrow().clone())),
            requires_grad: false,
            grad: Rc::new(RefCell::new(None)),
            track: Rc::new(RefCell::new(None)),
        }
    }

    /// Register this tensor as a leaf on `tape` so downstream ops record.
    pub fn attach(&self, tape: &Tape<E>) {
        let slot = self.requires_grad.then(|| Rc::clone(&self.grad));
        let node = tape.push(Node { kind: NodeKind::Leaf { slot } });
        *self.track.borrow_mut() = Some(Track {
            tape: Rc::downgrade(&tape.inner),
            tape_id: tape.id(),
            node,
        });
    }

    /// True if all elements are finite.
    pub fn all_finite(&self) -> bool {
        self.data.borrow().iter().all(|v| v.is_finite())
    }

    fn live_tape(&self) -> Option<(Tape<E>, usize)> {
        let tr = self.track.borrow();
        let tr = tr.as_ref()?;
        let inner = tr.tape.upgrade()?;
        Some((Tape { inner }, tr.node))
    }

    /// Node id of this tensor on `tape`, registering it lazily as a leaf
    /// when it participates in gradient flow. `None` means no gradient
    /// flows through this operand.
    fn node_on(&self, tape: &Tape<E>) -> Option<usize> {
        {
            let tr = self.track.borrow();
            if let Some(tr) = tr.as_ref() {
                if tr.tape_id == tape.id() && tr.tape.upgrade().is_some() {
                    return Some(tr.node);
                }
            }
        }
        if self.requires_grad {
            self.attach(tape);
            return self.track.borrow().as_ref().map(|t| t.node);
        }
        None
    }

    /// Run `loss.backward()`: `self` must be a scalar recorded on a live
    /// tape. Gradients accumulate (+=) into every reachable
    /// `requires_grad` leaf; call [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let (tape, root) = self
            .live_tape()
            .ok_or_else(|| Error::state("backward called without an active tape"))?;
        let inner = tape.inner.borrow();
        let mut store = GradStore::new(inner.nodes.len());
        store.accum(root, &[E::ONE]);
        for i in (0..=root).rev() {
            let Some(g) = store.take(i) else { continue };
            match &inner.nodes[i].kind {
                NodeKind::Leaf { slot: Some(slot) } => {
                    let mut s = slot.borrow_mut();
                    match s.as_mut() {
                        Some(acc) => {
                            for (a, gi) in acc.iter_mut().zip(&g) {
                                *a += *gi;
                            }
                        }
                        None => *s = Some(g),
                    }
                }
                NodeKind::Leaf { slot: None } => {}
                NodeKind::Op { backward } => backward(&g, &mut store),
            }
        }
        Ok(())
    }
}

/// Find a live tape among the operands of an op.
pub(crate) fn active_tape<E: Scalar>(inputs: &[&Tensor<E>]) -> Option<Tape<E>> {
    inputs.iter().find_map(|t| t.live_tape().map(|(tape, _)| tape))
}

/// Record an op result on `tape` (if any) with the given backward rule.
/// `parents` are resolved via [`Tensor::node_on`] by the caller.
pub(crate) fn record_result<E: Scalar>(
    tape: Option<&Tape<E>>,
    backward: Option<BackwardFn<E>>,
    out: Tensor<E>,
) -> Tensor<E> {
    if let (Some(tape), Some(backward)) = (tape, backward) {
        let node = tape.push(Node { kind: NodeKind::Op { backward } });
        *out.track.borrow_mut() = Some(Track {
            tape: Rc::downgrade(&tape.inner),
            tape_id: tape.id(),
            node,
        });
    }
    out
}

/// Resolve the operand node ids for an op about to be recorded on `tape`.
pub(crate) fn parent_ids<E: Scalar>(tape: &Tape<E>, inputs: &[&Tensor<E>]) -> Vec<Option<usize>> {
    inputs.iter().map(|t| t.node_on(tape)).collect()
}

fn check_same_shape<E: Scalar>(op: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{op}: operand shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Elementwise binary op with per-element local derivatives.
fn binary_elementwise<E: Scalar>(
    name: &str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: fn(E, E) -> E,
    df: fn(E, E) -> (E, E),
) -> Result<Tensor<E>> {
    check_same_shape(name, a, b)?;
    let out = {
        let ad = a.data();
        let bd = b.data();
        let data: Vec<E> = ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(&a.shape, data)?
    };
    let tape = active_tape(&[a, b]);
    let backward = tape.as_ref().and_then(|tp| {
        let ps = parent_ids(tp, &[a, b]);
        if ps.iter().all(Option::is_none) {
            return None;
        }
        let (pa, pb) = (ps[0], ps[1]);
        let ad = Rc::clone(&a.data);
        let bd = Rc::clone(&b.data);
        Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
            let ad = ad.borrow();
            let bd = bd.borrow();
            if let Some(pa) = pa {
                let contrib: Vec<E> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gi, (&x, &y))| gi * df(x, y).0)
                    .collect();
                store.accum(pa, &contrib);
            }
            if let Some(pb) = pb {
                let contrib: Vec<E> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&gi, (&x, &y))| gi * df(x, y).1)
                    .collect();
                store.accum(pb, &contrib);
            }
        }) as BackwardFn<E>)
    });
    Ok(record_result(tape.as_ref(), backward, out))
}

/// Elementwise unary op: `f` maps the value, `df` its derivative.
pub(crate) fn unary_elementwise<E: Scalar>(
    x: &Tensor<E>,
    f: impl Fn(E) -> E,
    df: impl Fn(E) -> E + 'static,
) -> Tensor<E> {
    let out = {
        let xd = x.data();
        let data: Vec<E> = xd.iter().map(|&v| f(v)).collect();
        Tensor::new(&x.shape, data).unwrap()
    };
    let tape = active_tape(&[x]);
    let backward = tape.as_ref().and_then(|tp| {
        let p = parent_ids(tp, &[x])[0]?;
        let xd = Rc::clone(&x.data);
        Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
            let xd = xd.borrow();
            let contrib: Vec<E> = g.iter().zip(xd.iter()).map(|(&gi, &v)| gi * df(v)).collect();
            store.accum(p, &contrib);
        }) as BackwardFn<E>)
    });
    record_result(tape.as_ref(), backward, out)
}

impl<E: Scalar> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary_elementwise("add", self, other, |x, y| x + y, |_, _| (E::ONE, E::ONE))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary_elementwise("sub", self, other, |x, y| x - y, |_, _| (E::ONE, -E::ONE))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary_elementwise("mul", self, other, |x, y| x * y, |x, y| (y, x))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&self) -> Tensor<E> {
        unary_elementwise(self, |v| E::ONE - v, |_| -E::ONE)
    }

    pub fn scale(&self, k: E) -> Tensor<E> {
        unary_elementwise(self, move |v| v * k, move |_| k)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<E> {
        let total: E = self.data().iter().copied().sum();
        let out = Tensor::scalar(total);
        let n = self.len();
        let tape = active_tape(&[self]);
        let backward = tape.as_ref().and_then(|tp| {
            let p = parent_ids(tp, &[self])[0]?;
            Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
                store.accum(p, &vec![g[0]; n]);
            }) as BackwardFn<E>)
        });
        record_result(tape.as_ref(), backward, out)
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::shape("matmul expects rank-2 operands"));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        let (k2, m) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: ({n}x{k}) . ({k2}x{m})"
            )));
        }
        let out = {
            let ad = self.data();
            let bd = other.data();
            let mut data = vec![E::ZERO; n * m];
            matmul_raw(&ad, &bd, n, k, m, &mut data);
            Tensor::new(&[n, m], data)?
        };
        let tape = active_tape(&[self, other]);
        let backward = tape.as_ref().and_then(|tp| {
            let ps = parent_ids(tp, &[self, other]);
            if ps.iter().all(Option::is_none) {
                return None;
            }
            let (pa, pb) = (ps[0], ps[1]);
            let ad = Rc::clone(&self.data);
            let bd = Rc::clone(&other.data);
            Some(Box::new(move |g: &[E], store: &mut GradStore<E>| {
                if let Some(pa) = pa {
                    // dA = G . B^T
                    let bd = bd.borrow();
                    let mut da = vec![E::ZERO; n * k];
                    matmul_raw_bt(g, &bd, n, m, k, &mut da);
                    store.accum(pa, &da);
                }
                if let Some(pb) = pb {
                    // dB = A^T . G
                    let ad = ad.borrow();
                    let mut db = vec![E::ZERO; k * m];
                    matmul_raw_at(&ad, g, n, k, m, &mut db);
                    store.accum(pb, &db);
                }
            }) as BackwardFn<E>)
        });
        Ok(record_result(tape.as_ref(), backward, out))
    }
}

/// C[n x m] += A[n x k] . B[k x m], row-major, ikj order.
pub(crate) fn matmul_raw<E: Scalar>(a: &[E], b: &[E], n: usize, k: usize, m: usize, c: &mut [E]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == E::ZERO {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[n x k] += A[n x m] . B[k x m]^T.
pub(crate) fn matmul_raw_bt<E: Scalar>(a: &[E], b: &[E], n: usize, m: usize, k: usize, c: &mut [E]) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = E::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// C[k x m] += A[n x k]^T . B[n x m].
pub(crate) fn matmul_raw_at<E: Scalar>(a: &[E], b: &[E], n: usize, k: usize, m: usize, c: &mut [E]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == E::ZERO {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Checkpoint/debug helper: stable textual key for a shape.
pub fn shape_key(shape: &[usize]) -> String {
    let mut s = String::new();
    for (i, d) in shape.iter().enumerate() {
        if i > 0 {
            s.push('x');
        }
        s.push_str(&format!("{d}"));
    }
    s
}
