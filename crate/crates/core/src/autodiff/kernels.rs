//! Forward kernels. Every kernel is a pure function of its input values so
//! that tape replay reproduces recorded outputs bit for bit.

use std::rc::Rc;

use crate::error::{Error, Result};

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Neg,
    Square,
    Scale(f64),
    AddScalar(f64),
    Clamp { min: f64, max: f64 },
    /// Rowwise softmax over the last axis.
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    /// Reduce a broadcast result back to `shape`.
    SumTo(Vec<usize>),
    /// Expand size-1 (or missing leading) axes to `shape`.
    Broadcast(Vec<usize>),
    /// Concatenate along the last axis.
    Concat,
    SliceLast { start: usize, end: usize },
    PadLast { before: usize, after: usize },
    SelectRows(Rc<[usize]>),
    ScatterRows { indices: Rc<[usize]>, rows: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Div => "divide",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Neg => "negate",
            Op::Square => "square",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Clamp { .. } => "clamp",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumTo(_) => "sum_to",
            Op::Broadcast(_) => "broadcast",
            Op::Concat => "concat",
            Op::SliceLast { .. } => "slice",
            Op::PadLast { .. } => "pad",
            Op::SelectRows(_) => "select_rows",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }
}

pub(crate) struct View<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

pub(crate) type Output = (Vec<usize>, Vec<f64>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn arity(op: &Op, inputs: &[View], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(
            op.name(),
            &inputs.iter().map(|v| v.shape).collect::<Vec<_>>(),
        ));
    }
    Ok(())
}

fn unary(inputs: &[View], f: impl Fn(f64) -> f64) -> Output {
    let v = &inputs[0];
    (v.shape.to_vec(), v.data.iter().map(|&x| f(x)).collect())
}

fn binary(op: &Op, inputs: &[View], f: impl Fn(f64, f64) -> f64) -> Result<Output> {
    let (a, b) = (&inputs[0], &inputs[1]);
    if a.shape != b.shape {
        return Err(Error::shape(op.name(), &[a.shape, b.shape]));
    }
    let data = a.data.iter().zip(b.data).map(|(&x, &y)| f(x, y)).collect();
    Ok((a.shape.to_vec(), data))
}

/// Split a shape into (rows, last-axis width).
fn rows_cols(op: &Op, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&cols) => Ok((numel(&shape[..shape.len() - 1]), cols)),
        None => Err(Error::shape(op.name(), &[shape])),
    }
}

/// For every flat index of `dst`, the flat index of `src` it reads from under
/// broadcasting. `src` is left-padded with unit axes.
pub(crate) fn broadcast_map(op: &Op, src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(Error::shape(op.name(), &[src, dst]));
    }
    let pad = dst.len() - src.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(src.iter().copied()).collect();
    for (s, d) in padded.iter().zip(dst) {
        if *s != *d && *s != 1 {
            return Err(Error::shape(op.name(), &[src, dst]));
        }
    }
    let mut src_strides = vec![0usize; dst.len()];
    let mut stride = 1;
    for axis in (0..dst.len()).rev() {
        src_strides[axis] = if padded[axis] == 1 { 0 } else { stride };
        stride *= padded[axis];
    }
    let total = numel(dst);
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; dst.len()];
    for _ in 0..total {
        map.push(index.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for axis in (0..dst.len()).rev() {
            index[axis] += 1;
            if index[axis] < dst[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok(map)
}

pub(crate) fn eval(op: &Op, inputs: &[View]) -> Result<Output> {
    match op {
        Op::Leaf => Err(Error::Domain {
            op: "leaf",
            detail: "leaves carry their own values".into(),
        }),
        Op::Add => {
            arity(op, inputs, 2)?;
            binary(op, inputs, |a, b| a + b)
        }
        Op::Sub => {
            arity(op, inputs, 2)?;
            binary(op, inputs, |a, b| a - b)
        }
        Op::Mul => {
            arity(op, inputs, 2)?;
            binary(op, inputs, |a, b| a * b)
        }
        Op::Div => {
            arity(op, inputs, 2)?;
            if inputs[1].data.iter().any(|&b| b == 0.0) {
                return Err(Error::Domain {
                    op: "divide",
                    detail: "division by zero".into(),
                });
            }
            binary(op, inputs, |a, b| a / b)
        }
        Op::MatMul => {
            arity(op, inputs, 2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape("matmul", &[a.shape, b.shape]));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a.data[i * k + p];
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            Ok((vec![m, n], out))
        }
        Op::Transpose => {
            arity(op, inputs, 1)?;
            let a = &inputs[0];
            if a.shape.len() != 2 {
                return Err(Error::shape("transpose", &[a.shape]));
            }
            let (m, n) = (a.shape[0], a.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.data[i * n + j];
                }
            }
            Ok((vec![n, m], out))
        }
        Op::Tanh => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs, f64::tanh))
        }
        Op::Sigmoid => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs, sigmoid))
        }
        Op::Exp => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs, f64::exp))
        }
        Op::Log => {
            arity(op, inputs, 1)?;
            if let Some(&bad) = inputs[0].data.iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("nonpositive input {bad}"),
                });
            }
            Ok(unary(inputs, f64::ln))
        }
        Op::Neg => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs, |x| -x))
        }
        Op::Square => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs, |x| x * x))
        }
        Op::Scale(c) => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs, |x| x * c))
        }
        Op::AddScalar(c) => {
            arity(op, inputs, 1)?;
            Ok(unary(inputs, |x| x + c))
        }
        Op::Clamp { min, max } => {
            arity(op, inputs, 1)?;
            if min > max {
                return Err(Error::Domain {
                    op: "clamp",
                    detail: format!("min {min} exceeds max {max}"),
                });
            }
            Ok(unary(inputs, |x| x.clamp(*min, *max)))
        }
        Op::Softmax | Op::LogSoftmax => {
            arity(op, inputs, 1)?;
            let a = &inputs[0];
            let (rows, cols) = rows_cols(op, a.shape)?;
            let mut out = vec![0.0; a.data.len()];
            for r in 0..rows {
                let src = &a.data[r * cols..(r + 1) * cols];
                let dst = &mut out[r * cols..(r + 1) * cols];
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = src.iter().map(|&x| (x - max).exp()).sum();
                if matches!(op, Op::Softmax) {
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d = (x - max).exp() / denom;
                    }
                } else {
                    let log_denom = denom.ln();
                    for (d, &x) in dst.iter_mut().zip(src) {
                        *d = x - max - log_denom;
                    }
                }
            }
            Ok((a.shape.to_vec(), out))
        }
        Op::Sum => {
            arity(op, inputs, 1)?;
            Ok((vec![], vec![inputs[0].data.iter().sum()]))
        }
        Op::Mean => {
            arity(op, inputs, 1)?;
            let n = inputs[0].data.len();
            if n == 0 {
                return Err(Error::Domain {
                    op: "mean",
                    detail: "empty tensor".into(),
                });
            }
            Ok((vec![], vec![inputs[0].data.iter().sum::<f64>() / n as f64]))
        }
        Op::SumTo(target) => {
            arity(op, inputs, 1)?;
            let map = broadcast_map(op, target, inputs[0].shape)?;
            let mut out = vec![0.0; numel(target)];
            for (&src, &g) in map.iter().zip(inputs[0].data) {
                out[src] += g;
            }
            Ok((target.clone(), out))
        }
        Op::Broadcast(target) => {
            arity(op, inputs, 1)?;
            let map = broadcast_map(op, inputs[0].shape, target)?;
            Ok((target.clone(), map.iter().map(|&i| inputs[0].data[i]).collect()))
        }
        Op::Concat => {
            let shapes: Vec<&[usize]> = inputs.iter().map(|v| v.shape).collect();
            let first = inputs.first().ok_or_else(|| Error::shape("concat", &[]))?;
            let (rows, _) = rows_cols(op, first.shape)?;
            let lead = &first.shape[..first.shape.len() - 1];
            let mut width = 0;
            for v in inputs {
                if v.shape.is_empty() || &v.shape[..v.shape.len() - 1] != lead {
                    return Err(Error::shape("concat", &shapes));
                }
                width += v.shape[v.shape.len() - 1];
            }
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for v in inputs {
                    let c = v.shape[v.shape.len() - 1];
                    out.extend_from_slice(&v.data[r * c..(r + 1) * c]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Ok((shape, out))
        }
        Op::SliceLast { start, end } => {
            arity(op, inputs, 1)?;
            let a = &inputs[0];
            let (rows, cols) = rows_cols(op, a.shape)?;
            if start > end || *end > cols {
                return Err(Error::shape("slice", &[a.shape]));
            }
            let mut out = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                out.extend_from_slice(&a.data[r * cols + start..r * cols + end]);
            }
            let mut shape = a.shape.to_vec();
            *shape.last_mut().unwrap() = end - start;
            Ok((shape, out))
        }
        Op::PadLast { before, after } => {
            arity(op, inputs, 1)?;
            let a = &inputs[0];
            let (rows, cols) = rows_cols(op, a.shape)?;
            let width = before + cols + after;
            let mut out = vec![0.0; rows * width];
            for r in 0..rows {
                out[r * width + before..r * width + before + cols]
                    .copy_from_slice(&a.data[r * cols..(r + 1) * cols]);
            }
            let mut shape = a.shape.to_vec();
            *shape.last_mut().unwrap() = width;
            Ok((shape, out))
        }
        Op::SelectRows(indices) => {
            arity(op, inputs, 1)?;
            let a = &inputs[0];
            let rows = *a.shape.first().ok_or_else(|| Error::shape("select_rows", &[a.shape]))?;
            let width = numel(&a.shape[1..]);
            let mut out = Vec::with_capacity(indices.len() * width);
            for &i in indices.iter() {
                if i >= rows {
                    return Err(Error::Domain {
                        op: "select_rows",
                        detail: format!("row {i} out of range for {rows} rows"),
                    });
                }
                out.extend_from_slice(&a.data[i * width..(i + 1) * width]);
            }
            let mut shape = a.shape.to_vec();
            shape[0] = indices.len();
            Ok((shape, out))
        }
        Op::ScatterRows { indices, rows } => {
            arity(op, inputs, 1)?;
            let a = &inputs[0];
            if a.shape.first() != Some(&indices.len()) {
                return Err(Error::shape("scatter_rows", &[a.shape]));
            }
            let width = numel(&a.shape[1..]);
            let mut out = vec![0.0; rows * width];
            for (k, &i) in indices.iter().enumerate() {
                if i >= *rows {
                    return Err(Error::Domain {
                        op: "scatter_rows",
                        detail: format!("row {i} out of range for {rows} rows"),
                    });
                }
                for j in 0..width {
                    out[i * width + j] += a.data[k * width + j];
                }
            }
            let mut shape = a.shape.to_vec();
            shape[0] = *rows;
            Ok((shape, out))
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
