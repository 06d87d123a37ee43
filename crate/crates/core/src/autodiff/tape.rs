use std::cell::RefCell;
use std::rc::Rc;

use super::backward::backward;
use super::kernels::{self, Op, View};
use super::tensor::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) enum Input {
    Node(usize),
    Const { shape: Rc<[usize]>, data: Rc<[f64]> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Input>,
    pub shape: Rc<[usize]>,
    pub value: Rc<[f64]>,
}

/// Append-only record of operations. Cloning yields another handle to the
/// same tape.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Register `t`'s values as a differentiable leaf on this tape.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let shape = t.shape_rc();
        let value = t.data_rc();
        let id = self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: shape.clone(),
            value: value.clone(),
        });
        Tensor::from_parts(shape, value, Some(Var { tape: self.clone(), id }))
    }

    pub(crate) fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(node.inputs.iter().all(|i| match i {
            Input::Node(p) => *p < nodes.len(),
            Input::Const { .. } => true,
        }));
        nodes.push(node);
        nodes.len() - 1
    }

    pub(crate) fn node_tensor(&self, id: usize, tracked: bool) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[id];
        let var = tracked.then(|| Var { tape: self.clone(), id });
        Tensor::from_parts(node.shape.clone(), node.value.clone(), var)
    }

    /// Parent ids of node `id`.
    pub fn parents(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id]
            .inputs
            .iter()
            .filter_map(|i| match i {
                Input::Node(p) => Some(*p),
                Input::Const { .. } => None,
            })
            .collect()
    }

    /// Recompute every non-leaf node from its recorded inputs and compare
    /// against the stored outputs bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            if node.op == Op::Leaf {
                continue;
            }
            let views: Vec<View> = node
                .inputs
                .iter()
                .map(|i| match i {
                    Input::Node(p) => View {
                        shape: &nodes[*p].shape,
                        data: &nodes[*p].value,
                    },
                    Input::Const { shape, data } => View { shape, data },
                })
                .collect();
            let (shape, data) = kernels::eval(&node.op, &views)?;
            if shape.as_slice() != &*node.shape
                || data.iter().zip(node.value.iter()).any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Reverse-mode gradients of scalar `output` with respect to `wrt`.
///
/// With `create_graph` the returned gradients are themselves recorded on the
/// tape and can be differentiated again. Entries of `wrt` that do not
/// influence `output` receive zeros.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(Error::NonScalarOutput(output.shape().to_vec()));
    }
    let zeros = || wrt.iter().map(|w| Tensor::zeros(w.shape())).collect();
    let Some(root) = output.var() else {
        if wrt.iter().any(|w| w.var().is_none()) {
            return Err(Error::NotOnTape);
        }
        return Ok(zeros());
    };
    let tape = root.tape.clone();
    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for w in wrt {
        match w.var() {
            Some(v) if v.tape.same_as(&tape) => wrt_ids.push(v.id),
            _ => return Err(Error::NotOnTape),
        }
    }
    let n = root.id + 1;
    let mut is_wrt = vec![false; n];
    for &id in &wrt_ids {
        if id < n {
            is_wrt[id] = true;
        }
    }

    // relevant: node depends on some wrt entry; reach: node feeds the root.
    let mut relevant = is_wrt.clone();
    let mut reach = vec![false; n];
    {
        let nodes = tape.nodes.borrow();
        for i in 0..n {
            if !relevant[i] {
                relevant[i] = nodes[i]
                    .inputs
                    .iter()
                    .any(|inp| matches!(inp, Input::Node(p) if relevant[*p]));
            }
        }
        reach[root.id] = true;
        for i in (0..n).rev() {
            if reach[i] {
                for inp in &nodes[i].inputs {
                    if let Input::Node(p) = inp {
                        reach[*p] = true;
                    }
                }
            }
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[root.id] = Some(Tensor::ones(output.shape()));
    for i in (0..n).rev() {
        if !reach[i] || !relevant[i] {
            continue;
        }
        let Some(g) = (if is_wrt[i] { grads[i].clone() } else { grads[i].take() }) else {
            continue;
        };
        let (op, inputs) = {
            let nodes = tape.nodes.borrow();
            (nodes[i].op.clone(), nodes[i].inputs.clone())
        };
        if inputs.is_empty() {
            continue;
        }
        let needs: Vec<bool> = inputs
            .iter()
            .map(|inp| matches!(inp, Input::Node(p) if relevant[*p]))
            .collect();
        let operands: Vec<Tensor> = inputs
            .iter()
            .map(|inp| match inp {
                Input::Node(p) => tape.node_tensor(*p, create_graph),
                Input::Const { shape, data } => Tensor::from_parts(shape.clone(), data.clone(), None),
            })
            .collect();
        let out = tape.node_tensor(i, create_graph);
        let g = if create_graph { g } else { g.detach() };
        let contributions = backward(&op, &operands, &out, &g, &needs)?;
        for (inp, contrib) in inputs.iter().zip(contributions) {
            if let (Input::Node(p), Some(c)) = (inp, contrib) {
                grads[*p] = Some(match grads[*p].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }
    }

    Ok(wrt_ids
        .iter()
        .zip(wrt)
        .map(|(&id, w)| {
            let g = if id < n { grads[id].clone() } else { None };
            g.unwrap_or_else(|| Tensor::zeros(w.shape()))
        })
        .collect())
}
