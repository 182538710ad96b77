//! Reverse-mode automatic differentiation over dynamic-rank `ndarray` arrays.
//!
//! The engine is a classic Wengert tape: every operation pushes a node holding
//! its value, the indices of its parents and a backward closure that maps the
//! node's output gradient to per-parent gradient contributions. Calling
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients of
//! registered parameters into a [`ParamSet`].
//!
//! Design notes:
//!
//! * **Generic scalar.** Everything is generic over [`Scalar`] (`f32` or
//!   `f64`). Training uses `f32` for speed; gradient checks and numeric
//!   oracles instantiate `f64` so central finite differences with step `1e-4`
//!   are meaningful.
//! * **Single core friendly.** Values are `Rc`-shared, backward closures
//!   capture only what they need, and gradient buffers are dropped as soon as
//!   a node has been processed, keeping peak memory proportional to the live
//!   frontier rather than the whole tape.
//! * **Determinism.** No threading inside the engine, no hashing, no pointer
//!   iteration order: identical inputs produce bit-identical outputs.
//!
//! Operations live in [`ops`] (elementwise, reductions, matmul, softmaxes,
//! attention-specific kernels) and [`conv`] (im2col-based convolutions).
//! [`fd`] provides the finite-difference harness used by gradient tests and
//! [`optim`] a deterministic Adam with global gradient-norm clipping.

pub mod conv;
pub mod fd;
pub mod ops;
pub mod optim;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};

/// Scalar element type of the tape: `f32` or `f64`.
pub trait Scalar:
    LinalgScalar
    + Float
    + NumAssign
    + ScalarOperand
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Tag stored in checkpoint headers to detect precision mismatches.
    const DTYPE: Dtype;

    /// Conversion from `f64` (used for constants and config values).
    fn cast(v: f64) -> Self;

    /// Widening conversion to `f64` (used for reporting and metrics).
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn cast(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn cast(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Scalar precision tag used in serialized artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    /// 32-bit IEEE float.
    F32,
    /// 64-bit IEEE float.
    F64,
}

impl Dtype {
    /// Single-byte tag for binary headers.
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    /// Inverse of [`Dtype::tag`].
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Backward closure: maps the node's output gradient to per-parent
/// contributions (aligned with the node's parent list; `None` means "no
/// gradient flows to this parent").
type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// A Wengert tape recording one differentiable computation.
///
/// Create one per training episode (or per inference step), build the forward
/// pass through [`Var`] methods, then call [`Tape::backward`] once on the
/// final scalar. The tape is not thread-safe by design; parallelism happens
/// across tapes, never within one.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    /// Create an empty tape.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes (used by memory diagnostics and tests).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// True if no nodes have been recorded yet.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<F>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<F>>,
        param: Option<ParamId>,
    ) -> Var<'_, F> {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "tape node produced non-finite values"
        );
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = param.is_some()
            || parents.iter().any(|&p| nodes[p].requires_grad);
        let idx = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if requires_grad { backward } else { None },
            param,
            requires_grad,
        });
        Var { tape: self, idx }
    }

    /// Record a constant (no gradient flows into it).
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push(value, Vec::new(), None, None)
    }

    /// Record a leaf bound to a registered parameter. Gradients reaching the
    /// leaf are accumulated into the matching slot of the [`ParamSet`] passed
    /// to [`Tape::backward`].
    pub fn param(&self, params: &ParamSet<F>, id: ParamId) -> Var<'_, F> {
        self.push(params.values[id.0].clone(), Vec::new(), None, Some(id))
    }

    /// Shared read access to a node's value.
    pub(crate) fn value(&self, idx: usize) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    /// Run reverse-mode accumulation from `loss` (a one-element array) and
    /// add parameter gradients into `params`.
    ///
    /// # Panics
    ///
    /// Panics if `loss` does not hold exactly one element; that is an
    /// internal contract violation, not a user-facing error.
    pub fn backward(&self, loss: Var<'_, F>, params: &mut ParamSet<F>) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.idx].value.len(),
            1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(loss.idx + 1);
        grads.resize_with(loss.idx + 1, || None);
        grads[loss.idx] = Some(ArrayD::ones(nodes[loss.idx].value.raw_dim()));

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(pid) = node.param {
                params.grads[pid.0].zip_mut_with(&g, |a, &b| *a += b);
            }
            if let Some(back) = &node.backward {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (slot, contrib) in contribs.into_iter().enumerate() {
                    let Some(c) = contrib else { continue };
                    let p = node.parents[slot];
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        c.shape(),
                        nodes[p].value.shape(),
                        "gradient shape mismatch at node {p}"
                    );
                    match &mut grads[p] {
                        Some(acc) => acc.zip_mut_with(&c, |a, &b| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }
    }
}

/// Handle to a tape node. Cheap to copy; all operations are methods here or
/// free functions in [`ops`]/[`conv`].
pub struct Var<'t, F: Scalar> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) idx: usize,
}

impl<F: Scalar> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F: Scalar> Copy for Var<'_, F> {}

impl<'t, F: Scalar> Var<'t, F> {
    /// Shared handle to the node value.
    pub fn value(&self) -> Rc<ArrayD<F>> {
        self.tape.value(self.idx)
    }

    /// Owned copy of the node value.
    pub fn to_array(&self) -> ArrayD<F> {
        (*self.value()).clone()
    }

    /// Extract a one-element node as a scalar.
    pub fn scalar(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().copied().next().unwrap()
    }

    /// Shape of the node value.
    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub(crate) fn tape(&self) -> &'t Tape<F> {
        self.tape
    }
}

/// Identifier of a registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named collection of parameter tensors with persistent gradient buffers.
///
/// Registration order is fixed by construction, which makes initialization,
/// checkpoint layout and optimizer state deterministic.
#[derive(Clone)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    grads: Vec<ArrayD<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    /// Create an empty parameter set.
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Register a tensor under a unique name and return its id.
    ///
    /// # Panics
    ///
    /// Panics on duplicate names — parameter names double as checkpoint keys.
    pub fn register(&mut self, name: &str, value: ArrayD<F>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.grads.push(ArrayD::zeros(value.raw_dim()));
        self.values.push(value);
        id
    }

    /// Number of registered tensors.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// True if nothing is registered.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Parameter value by id.
    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    /// Mutable parameter value (used by the optimizer and tests).
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    /// Accumulated gradient by id.
    pub fn grad(&self, id: ParamId) -> &ArrayD<F> {
        &self.grads[id.0]
    }

    /// Name of a parameter.
    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Iterate `(name, value)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Reset all gradient buffers to zero.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(F::zero());
        }
    }

    /// Add `other`'s gradients into this set (used to merge per-episode
    /// gradients in a fixed order).
    ///
    /// # Panics
    ///
    /// Panics if the two sets were not built identically.
    pub fn add_grads_from(&mut self, other: &ParamSet<F>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            a.zip_mut_with(b, |x, &y| *x += y);
        }
    }

    /// Scale all gradients by a constant (e.g. 1/number of episodes).
    pub fn scale_grads(&mut self, s: F) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * s);
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> F {
        let mut acc = F::zero();
        for g in &self.grads {
            for &v in g.iter() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

}

/// Convenience constructor for 0-d (scalar) arrays.
pub fn scalar_array<F: Scalar>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// One tape leaf per registered parameter, created once per forward pass so
/// layer code can look leaves up by [`ParamId`].
pub struct Leaves<'t, F: Scalar> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Scalar> Leaves<'t, F> {
    /// Bind every parameter in `ps` to a leaf on `tape`.
    pub fn new(tape: &'t Tape<F>, ps: &ParamSet<F>) -> Self {
        Leaves {
            vars: ps.ids().map(|id| tape.param(ps, id)).collect(),
        }
    }

    /// Leaf for a parameter id.
    pub fn get(&self, id: ParamId) -> Var<'t, F> {
        self.vars[id.0]
    }
}

/// Xavier/Glorot uniform initialization: `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`. Draws happen in row-major order from
/// the supplied RNG, so initialization is reproducible for a fixed seed and
/// registration order.
pub fn xavier_uniform<F: Scalar, R: rand::Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> ArrayD<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        F::cast(rng.gen_range(-a..a))
    })
}
