use std::fmt;
use std::rc::Rc;

use super::kernels::{self, Op, View};
use super::tape::{Input, Node, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Var {
    pub tape: Tape,
    pub id: usize,
}

/// Dense row-major tensor of `f64`, optionally recorded on a [`Tape`].
///
/// Tensors without a tape node are constants: operations among constants
/// compute values without recording anything.
#[derive(Clone)]
pub struct Tensor {
    shape: Rc<[usize]>,
    data: Rc<[f64]>,
    var: Option<Var>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("node", &self.var.as_ref().map(|v| v.id))
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if kernels::numel(shape) != data.len() {
            return Err(Error::Data(format!(
                "shape {shape:?} needs {} values, got {}",
                kernels::numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.into(), data.into(), None))
    }

    pub(crate) fn from_parts(shape: Rc<[usize]>, data: Rc<[f64]>, var: Option<Var>) -> Self {
        Self { shape, data, var }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n].into(), data.into(), None)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Rc::from(Vec::new()), vec![value].into(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.into(), vec![value; kernels::numel(shape)].into(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub(crate) fn shape_rc(&self) -> Rc<[usize]> {
        self.shape.clone()
    }

    pub(crate) fn data_rc(&self) -> Rc<[f64]> {
        self.data.clone()
    }

    pub(crate) fn var(&self) -> Option<&Var> {
        self.var.as_ref()
    }

    pub fn is_tracked(&self) -> bool {
        self.var.is_some()
    }

    /// Tape node id, when recorded.
    pub fn node_id(&self) -> Option<usize> {
        self.var.as_ref().map(|v| v.id)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.var.as_ref().map(|v| &v.tape)
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.clone(), None)
    }

    /// Apply `op` to `inputs`, recording a node when any input is tracked.
    pub fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let views: Vec<View> = inputs
            .iter()
            .map(|t| View {
                shape: &t.shape,
                data: &t.data,
            })
            .collect();
        let (shape, data) = kernels::eval(&op, &views)?;
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(v) = &t.var {
                match tape {
                    Some(existing) if !existing.same_as(&v.tape) => return Err(Error::TapeMismatch),
                    _ => tape = Some(&v.tape),
                }
            }
        }
        let shape: Rc<[usize]> = shape.into();
        let data: Rc<[f64]> = data.into();
        let Some(tape) = tape else {
            return Ok(Self::from_parts(shape, data, None));
        };
        let node_inputs = inputs
            .iter()
            .map(|t| match &t.var {
                Some(v) => Input::Node(v.id),
                None => Input::Const {
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                },
            })
            .collect();
        let id = tape.push(Node {
            op,
            inputs: node_inputs,
            shape: shape.clone(),
            value: data.clone(),
        });
        Ok(Self::from_parts(shape, data, Some(Var { tape: tape.clone(), id })))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Add, &[self, other])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Sub, &[self, other])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Mul, &[self, other])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Div, &[self, other])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::MatMul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        Self::apply(Op::Transpose, &[self])
    }

    pub fn tanh(&self) -> Result<Tensor> {
        Self::apply(Op::Tanh, &[self])
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        Self::apply(Op::Sigmoid, &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        Self::apply(Op::Exp, &[self])
    }

    pub fn log(&self) -> Result<Tensor> {
        Self::apply(Op::Log, &[self])
    }

    pub fn neg(&self) -> Result<Tensor> {
        Self::apply(Op::Neg, &[self])
    }

    pub fn square(&self) -> Result<Tensor> {
        Self::apply(Op::Square, &[self])
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        Self::apply(Op::Scale(c), &[self])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        Self::apply(Op::AddScalar(c), &[self])
    }

    pub fn clamp(&self, min: f64, max: f64) -> Result<Tensor> {
        Self::apply(Op::Clamp { min, max }, &[self])
    }

    pub fn softmax(&self) -> Result<Tensor> {
        Self::apply(Op::Softmax, &[self])
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        Self::apply(Op::LogSoftmax, &[self])
    }

    pub fn sum(&self) -> Result<Tensor> {
        Self::apply(Op::Sum, &[self])
    }

    pub fn mean(&self) -> Result<Tensor> {
        Self::apply(Op::Mean, &[self])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        Self::apply(Op::SumTo(shape.to_vec()), &[self])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        Self::apply(Op::Broadcast(shape.to_vec()), &[self])
    }

    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        Self::apply(Op::Concat, parts)
    }

    pub fn slice_last(&self, start: usize, end: usize) -> Result<Tensor> {
        Self::apply(Op::SliceLast { start, end }, &[self])
    }

    pub fn pad_last(&self, before: usize, after: usize) -> Result<Tensor> {
        Self::apply(Op::PadLast { before, after }, &[self])
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        Self::apply(Op::SelectRows(indices.into()), &[self])
    }

    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        Self::apply(
            Op::ScatterRows {
                indices: indices.into(),
                rows,
            },
            &[self],
        )
    }

    /// Sum over the last axis, keeping it with width one.
    pub fn sum_last(&self) -> Result<Tensor> {
        let mut shape = self.shape.to_vec();
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => return Err(Error::shape("sum_last", &[&self.shape])),
        }
        self.sum_to(&shape)
    }

    /// Squared Euclidean norm of the values.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}
