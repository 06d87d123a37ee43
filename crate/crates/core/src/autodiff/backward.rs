//! Vector-Jacobian products, written with tensor operations so that they are
//! recorded (and differentiable) whenever their operands are tracked.

use super::kernels::Op;
use super::tensor::Tensor;
use crate::error::Result;

/// Contributions of upstream gradient `g` to each input of `op`. Entries with
/// `needs[i] == false` are skipped and returned as `None`.
pub(crate) fn backward(
    op: &Op,
    x: &[Tensor],
    y: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![
            want(0).then(|| g.clone()),
            want(1).then(|| g.clone()),
        ]),
        Op::Sub => Ok(vec![
            want(0).then(|| g.clone()),
            if want(1) { Some(g.neg()?) } else { None },
        ]),
        Op::Mul => Ok(vec![
            if want(0) { Some(g.mul(&x[1])?) } else { None },
            if want(1) { Some(g.mul(&x[0])?) } else { None },
        ]),
        Op::Div => Ok(vec![
            if want(0) { Some(g.div(&x[1])?) } else { None },
            if want(1) {
                Some(g.mul(y)?.div(&x[1])?.neg()?)
            } else {
                None
            },
        ]),
        Op::MatMul => Ok(vec![
            if want(0) {
                Some(g.matmul(&x[1].transpose()?)?)
            } else {
                None
            },
            if want(1) {
                Some(x[0].transpose()?.matmul(g)?)
            } else {
                None
            },
        ]),
        Op::Transpose => one(g.transpose()),
        Op::Tanh => one(g.mul(&y.square()?.neg()?.add_scalar(1.0)?)),
        Op::Sigmoid => one(g.mul(&y.mul(&y.neg()?.add_scalar(1.0)?)?)),
        Op::Exp => one(g.mul(y)),
        Op::Log => one(g.div(&x[0])),
        Op::Neg => one(g.neg()),
        Op::Square => one(g.mul(&x[0])?.scale(2.0)),
        Op::Scale(c) => one(g.scale(*c)),
        Op::AddScalar(_) => Ok(vec![Some(g.clone())]),
        Op::Clamp { min, max } => {
            let mask: Vec<f64> = x[0]
                .data()
                .iter()
                .map(|&v| if v >= *min && v <= *max { 1.0 } else { 0.0 })
                .collect();
            one(g.mul(&Tensor::new(x[0].shape(), mask)?))
        }
        Op::Softmax => {
            let shape = y.shape().to_vec();
            let dot = g.mul(y)?.sum_last()?.broadcast_to(&shape)?;
            one(y.mul(&g.sub(&dot)?))
        }
        Op::LogSoftmax => {
            let shape = y.shape().to_vec();
            let total = g.sum_last()?.broadcast_to(&shape)?;
            one(g.sub(&y.exp()?.mul(&total)?))
        }
        Op::Sum => one(g.broadcast_to(x[0].shape())),
        Op::Mean => {
            let n = x[0].numel() as f64;
            one(g.scale(1.0 / n)?.broadcast_to(x[0].shape()))
        }
        Op::SumTo(_) => one(g.broadcast_to(x[0].shape())),
        Op::Broadcast(_) => one(g.sum_to(x[0].shape())),
        Op::Concat => {
            let mut start = 0;
            let mut out = Vec::with_capacity(x.len());
            for (i, part) in x.iter().enumerate() {
                let width = *part.shape().last().unwrap_or(&0);
                out.push(if want(i) {
                    Some(g.slice_last(start, start + width)?)
                } else {
                    None
                });
                start += width;
            }
            Ok(out)
        }
        Op::SliceLast { start, end } => {
            let width = *x[0].shape().last().unwrap_or(&0);
            one(g.pad_last(*start, width - end))
        }
        Op::PadLast { before, .. } => {
            let width = *x[0].shape().last().unwrap_or(&0);
            one(g.slice_last(*before, before + width))
        }
        Op::SelectRows(indices) => one(g.scatter_rows(indices, x[0].shape()[0])),
        Op::ScatterRows { indices, .. } => one(g.select_rows(indices)),
    }
}
