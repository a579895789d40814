//! Reverse-mode tape.
//!
//! A [`Tape`] is a Wengert list rebuilt for every forward pass. Nodes are
//! appended in topological order, so a node's inputs always have smaller ids;
//! [`Tape::backward`] walks the list in reverse, handing each recorded op its
//! output gradient together with mutable access to the gradients of everything
//! recorded before it.
//!
//! Parameters live outside the tape in a [`ParamBank`]; a forward pass leases
//! them in as leaf nodes and [`Tape::write_grads`] accumulates the resulting
//! leaf gradients back into the bank.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::params::{ParamBank, ParamId};
use crate::tensor::{Shape, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

/// A recorded backward step. `grads` covers exactly the nodes with smaller ids
/// than the op's output, which is every possible input.
pub(crate) trait BackwardOp {
    fn backward(&self, out_grad: &[f64], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]);
}

pub(crate) fn accum(slot: &mut Option<Vec<f64>>, idx: usize, v: f64) {
    if let Some(g) = slot.as_mut() {
        g[idx] += v;
    }
}

/// Adds `v` into a node's gradient buffer if that node tracks gradients.
pub(crate) fn accum_all(slot: &mut Option<Vec<f64>>, v: &[f64]) {
    if let Some(g) = slot.as_mut() {
        for (gi, vi) in g.iter_mut().zip(v) {
            *gi += vi;
        }
    }
}

pub struct Tape {
    shapes: Vec<Shape>,
    vals: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
    backs: Vec<Option<Box<dyn BackwardOp>>>,
    leases: Vec<(ParamId, ValueId)>,
    grad_enabled: bool,
}

impl Tape {
    /// A tape that records backward ops. Evaluation passes should use
    /// [`Tape::no_grad`] instead and skip the bookkeeping entirely.
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            backs: Vec::new(),
            leases: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        let mut t = Tape::new();
        t.grad_enabled = false;
        t
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &Shape {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.vals[id.0]
    }

    /// Gradient of a node, if it tracked one and backward has run.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub(crate) fn wants_grad(&self, id: ValueId) -> bool {
        self.grads[id.0].is_some()
    }

    pub(crate) fn push(
        &mut self,
        shape: Shape,
        vals: Vec<f64>,
        back: Option<Box<dyn BackwardOp>>,
        wants_grad: bool,
    ) -> ValueId {
        debug_assert_eq!(shape.len(), vals.len());
        let wants = wants_grad && self.grad_enabled;
        let n = vals.len();
        self.shapes.push(shape);
        self.vals.push(vals);
        self.grads.push(if wants { Some(vec![0.0; n]) } else { None });
        self.backs.push(if wants { back } else { None });
        ValueId(self.vals.len() - 1)
    }

    /// Leaf with no gradient tracking (inputs, labels-adjacent data).
    pub fn input(&mut self, t: &Tensor) -> ValueId {
        self.push(t.shape.clone(), t.data.clone(), None, false)
    }

    /// Leaf from a constant vector.
    pub fn constant(&mut self, shape: Shape, vals: Vec<f64>) -> ValueId {
        self.push(shape, vals, None, false)
    }

    /// Leases a parameter onto the tape. Learnable parameters become
    /// gradient-tracked leaves and are recorded for [`Tape::write_grads`];
    /// state slots come in as plain constants.
    pub fn lease(&mut self, bank: &ParamBank, id: ParamId) -> ValueId {
        let p = bank.get(id);
        debug_assert!(p.alive, "leased dead parameter {}", p.label);
        let track = p.learnable;
        let vid = self.push(p.shape.clone(), p.data.clone(), None, track);
        if track && self.grad_enabled {
            self.leases.push((id, vid));
        }
        vid
    }

    /// Runs reverse-mode accumulation from a scalar node.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.shapes[loss.0].len() != 1 {
            return Err(CoreError::ShapeMismatch(
                "backward root must be a scalar".into(),
            ));
        }
        if self.grads[loss.0].is_none() {
            return Err(CoreError::Invalid(
                "backward root does not track gradients".into(),
            ));
        }
        self.grads[loss.0].as_mut().unwrap()[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if self.backs[i].is_none() || self.grads[i].is_none() {
                continue;
            }
            let (prefix, rest) = self.grads.split_at_mut(i);
            let out_grad = rest[0].take().unwrap();
            self.backs[i]
                .as_ref()
                .unwrap()
                .backward(&out_grad, &self.vals, prefix);
            rest[0] = Some(out_grad);
        }
        Ok(())
    }

    /// Accumulates leaf gradients of leased parameters back into the bank.
    pub fn write_grads(&self, bank: &mut ParamBank) {
        for &(pid, vid) in &self.leases {
            if let Some(g) = self.grads[vid.0].as_deref() {
                bank.accumulate_grad(pid, g);
            }
        }
    }

    /// Extracts a node as a plain tensor.
    pub fn detach(&self, id: ValueId) -> Tensor {
        Tensor {
            shape: self.shapes[id.0].clone(),
            data: self.vals[id.0].clone(),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
