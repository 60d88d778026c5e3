use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{BackwardFn, NodeRef, Tape};

/// An immutable, reference-counted, row-major `f32` tensor.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<Vec<f32>>,
    shape: Vec<usize>,
    pub(crate) node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::from_rc(Rc::new(data), shape)
    }

    /// Wraps an existing shared buffer without copying it.
    pub fn from_rc(data: Rc<Vec<f32>>, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            data,
            shape: shape.to_vec(),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            data: Rc::new(vec![value; n]),
            shape: shape.to_vec(),
            node: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_rc(&self) -> &Rc<Vec<f32>> {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return crate::error::shape_err("item", format!("expected one element, got {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => crate::error::shape_err("dims4", format!("expected rank 4, got {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => crate::error::shape_err("dims2", format!("expected rank 2, got {:?}", self.shape)),
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same data, no autodiff history.
    pub fn detach(&self) -> Self {
        Self {
            data: self.data.clone(),
            shape: self.shape.clone(),
            node: None,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return crate::error::shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            );
        }
        let out = self.data.clone();
        let backward: BackwardFn = Box::new(move |g: &[f32]| vec![Some(g.to_vec())]);
        Self::record_rc(out, shape, &[self], backward)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Builds the output of an operation and records it on the inputs' tape
    /// when any input is tracked.
    pub(crate) fn record(
        data: Vec<f32>,
        shape: &[usize],
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Result<Self> {
        Self::record_rc(Rc::new(data), shape, inputs, backward)
    }

    pub(crate) fn record_rc(
        data: Rc<Vec<f32>>,
        shape: &[usize],
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Result<Self> {
        let mut out = Self::from_rc(data, shape)?;
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(tp) = t.tape() {
                match tape {
                    None => tape = Some(tp),
                    Some(existing) if existing.same_as(tp) => {}
                    Some(_) => return Err(TensorError::TapeMismatch),
                }
            }
        }
        if let Some(tape) = tape {
            let parents = inputs.iter().map(|t| t.node_id()).collect();
            let id = tape.push(parents, Some(backward), false);
            out.node = Some(NodeRef {
                tape: tape.clone(),
                id,
            });
        }
        Ok(out)
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }
}
