//! The differentiation tape.
//!
//! One tape is active per thread at a time, opened with [`with_tape`]. Nodes
//! are appended in execution order, so parents always precede children and a
//! single reverse sweep visits each node exactly once. The tape runs in one
//! of two modes:
//!
//! - `Reverse`: operations are recorded, [`grad`] replays them backwards
//!   accumulating vector-Jacobian products into watched leaves.
//! - `Forward`: tangents propagate eagerly as each operation executes
//!   (vectorized dual numbers); [`jvp`] seeds a leaf and reads the tangent
//!   off the result.
//!
//! Tensors from an earlier tape generation are treated as constants, so
//! handles can safely outlive the scope that created them.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{binary_map, dgemm_strided, Activation, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddConst,
    Sin,
    Cos,
    MatMul,
    AddRow,
    MulCol,
    Act(Activation),
    Sum,
    ConcatCols(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    generation: u64,
    index: usize,
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Arc<Vec<f64>>,
    shape: Vec<usize>,
    /// Cached transcendentals for activations.
    aux: Option<Arc<Vec<f64>>>,
    /// Forward-mode tangent; `None` means identically zero.
    tangent: Option<Vec<f64>>,
    /// Whether any watched leaf can reach this node.
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Reverse,
    Forward,
}

pub(crate) struct Tape {
    generation: u64,
    mode: Mode,
    nodes: Vec<Node>,
}

thread_local! {
    static ACTIVE: RefCell<Option<Tape>> = const { RefCell::new(None) };
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

/// Run `f` with a fresh tape installed on this thread. Nesting is a bug.
pub fn with_tape<R>(mode: Mode, f: impl FnOnce() -> R) -> R {
    let generation = GENERATION.fetch_add(1, Ordering::Relaxed);
    ACTIVE.with(|cell| {
        let mut slot = cell.borrow_mut();
        assert!(slot.is_none(), "nested tapes are not supported");
        *slot = Some(Tape {
            generation,
            mode,
            nodes: Vec::new(),
        });
    });
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            ACTIVE.with(|cell| cell.borrow_mut().take());
        }
    }
    let _guard = Guard;
    f()
}

pub fn tape_active() -> bool {
    ACTIVE.with(|cell| cell.borrow().is_some())
}

fn with_active<R>(f: impl FnOnce(&mut Tape) -> R) -> Option<R> {
    ACTIVE.with(|cell| cell.borrow_mut().as_mut().map(f))
}

/// Node index of a tensor on the *current* tape; stale refs read as None.
fn live_index(tape: &Tape, t: &Tensor) -> Option<usize> {
    t.node.and_then(|r| {
        if r.generation == tape.generation {
            Some(r.index)
        } else {
            None
        }
    })
}

fn push_leaf(tape: &mut Tape, t: &Tensor, tangent: Option<Vec<f64>>, requires_grad: bool) -> usize {
    let index = tape.nodes.len();
    tape.nodes.push(Node {
        op: Op::Leaf,
        parents: Vec::new(),
        value: t.data_arc(),
        shape: t.shape().to_vec(),
        aux: None,
        tangent,
        requires_grad,
    });
    index
}

pub(crate) fn watch(t: &Tensor) -> Tensor {
    let node = with_active(|tape| {
        let index = push_leaf(tape, t, None, true);
        NodeRef {
            generation: tape.generation,
            index,
        }
    });
    Tensor::with_node(t.shape().to_vec(), t.data_arc(), node)
}

pub(crate) fn watch_with_tangent(t: &Tensor, tangent: &Tensor) -> Tensor {
    let node = with_active(|tape| {
        let index = push_leaf(tape, t, Some(tangent.data().to_vec()), false);
        NodeRef {
            generation: tape.generation,
            index,
        }
    });
    Tensor::with_node(t.shape().to_vec(), t.data_arc(), node)
}

pub(crate) fn tangent_of(t: &Tensor) -> Option<Tensor> {
    let data: Option<Vec<f64>> = with_active(|tape| {
        live_index(tape, t).and_then(|i| tape.nodes[i].tangent.clone())
    })
    .flatten();
    data.map(|d| Tensor::from_vec(t.shape().to_vec(), d))
}

pub(crate) fn emit(
    op: Op,
    parents: &[&Tensor],
    shape: Vec<usize>,
    data: Vec<f64>,
    aux: Option<Arc<Vec<f64>>>,
) -> Tensor {
    emit_n(op, parents, shape, data, aux)
}

/// Record an op whose output value has already been computed. When no live
/// tape exists, or no operand is linked, this is a plain tensor constructor.
pub(crate) fn emit_n<T: std::borrow::Borrow<Tensor>>(
    op: Op,
    parents: &[T],
    shape: Vec<usize>,
    data: Vec<f64>,
    aux: Option<Arc<Vec<f64>>>,
) -> Tensor {
    let data = Arc::new(data);
    let node = with_active(|tape| {
        let any_live = parents
            .iter()
            .any(|p| live_index(tape, p.borrow()).is_some());
        if !any_live {
            return None;
        }
        // Register unlinked operands as constant leaves.
        let parent_idx: Vec<usize> = parents
            .iter()
            .map(|p| {
                let p = p.borrow();
                live_index(tape, p).unwrap_or_else(|| push_leaf(tape, p, None, false))
            })
            .collect();
        let requires_grad = parent_idx.iter().any(|&i| tape.nodes[i].requires_grad);
        let tangent = if tape.mode == Mode::Forward {
            forward_tangent(tape, &op, &parent_idx, &data, aux.as_deref())
        } else {
            None
        };
        let index = tape.nodes.len();
        tape.nodes.push(Node {
            op,
            parents: parent_idx,
            value: Arc::clone(&data),
            shape: shape.clone(),
            aux,
            tangent,
            requires_grad,
        });
        Some(NodeRef {
            generation: tape.generation,
            index,
        })
    })
    .flatten();
    Tensor::with_node(shape, data, node)
}

// ── forward mode ─────────────────────────────────────────────────────

/// Tangent of a freshly recorded node from its parents' tangents.
/// `None` tangents are identically-zero and skipped.
fn forward_tangent(
    tape: &Tape,
    op: &Op,
    parents: &[usize],
    _value: &[f64],
    aux: Option<&Vec<f64>>,
) -> Option<Vec<f64>> {
    let tan = |i: usize| tape.nodes[parents[i]].tangent.as_deref();
    let val = |i: usize| -> &[f64] { &tape.nodes[parents[i]].value };
    match op {
        Op::Leaf => None,
        Op::Add => match (tan(0), tan(1)) {
            (None, None) => None,
            (Some(a), None) => Some(a.to_vec()),
            (None, Some(b)) => Some(b.to_vec()),
            (Some(a), Some(b)) => Some(binary_map(a, b, |x, y| x + y)),
        },
        Op::Sub => match (tan(0), tan(1)) {
            (None, None) => None,
            (Some(a), None) => Some(a.to_vec()),
            (None, Some(b)) => Some(b.iter().map(|v| -v).collect()),
            (Some(a), Some(b)) => Some(binary_map(a, b, |x, y| x - y)),
        },
        Op::Mul => {
            let mut out: Option<Vec<f64>> = None;
            if let Some(da) = tan(0) {
                out = Some(binary_map(da, val(1), |x, y| x * y));
            }
            if let Some(db) = tan(1) {
                let term = binary_map(val(0), db, |x, y| x * y);
                out = Some(match out {
                    None => term,
                    Some(acc) => binary_map(&acc, &term, |x, y| x + y),
                });
            }
            out
        }
        Op::Neg => tan(0).map(|d| d.iter().map(|v| -v).collect()),
        Op::Scale(c) => tan(0).map(|d| d.iter().map(|v| c * v).collect()),
        Op::AddConst => tan(0).map(|d| d.to_vec()),
        Op::Sin => tan(0).map(|d| binary_map(d, val(0), |t, x| t * x.cos())),
        Op::Cos => tan(0).map(|d| binary_map(d, val(0), |t, x| -t * x.sin())),
        Op::MatMul => {
            let (m, k) = dims2(&tape.nodes[parents[0]].shape);
            let n = dims2(&tape.nodes[parents[1]].shape).1;
            let mut out: Option<Vec<f64>> = None;
            if let Some(da) = tan(0) {
                let mut c = vec![0.0; m * n];
                dgemm_strided(m, k, n, 1.0, da, k as isize, 1, val(1), n as isize, 1, 0.0, &mut c, n as isize, 1);
                out = Some(c);
            }
            if let Some(db) = tan(1) {
                let c = out.get_or_insert_with(|| vec![0.0; m * n]);
                dgemm_strided(m, k, n, 1.0, val(0), k as isize, 1, db, n as isize, 1, 1.0, c, n as isize, 1);
            }
            out
        }
        Op::AddRow => {
            let (m, n) = dims2(&tape.nodes[parents[0]].shape);
            let mut out = tan(0).map(|d| d.to_vec());
            if let Some(db) = tan(1) {
                let acc = out.get_or_insert_with(|| vec![0.0; m * n]);
                for r in 0..m {
                    for c in 0..n {
                        acc[r * n + c] += db[c];
                    }
                }
            }
            out
        }
        Op::MulCol => {
            let (m, n) = dims2(&tape.nodes[parents[0]].shape);
            let mat = val(0);
            let col = val(1);
            let mut out: Option<Vec<f64>> = None;
            if let Some(dmat) = tan(0) {
                let mut acc = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        acc[r * n + c] = dmat[r * n + c] * col[r];
                    }
                }
                out = Some(acc);
            }
            if let Some(dcol) = tan(1) {
                let acc = out.get_or_insert_with(|| vec![0.0; m * n]);
                for r in 0..m {
                    for c in 0..n {
                        acc[r * n + c] += mat[r * n + c] * dcol[r];
                    }
                }
            }
            out
        }
        Op::Act(act) => tan(0).map(|d| {
            let x = val(0);
            let mut deriv = vec![0.0; x.len()];
            act.derivative(x, aux.expect("activation aux"), &mut deriv);
            binary_map(d, &deriv, |t, f| t * f)
        }),
        Op::Sum => tan(0).map(|d| vec![d.iter().sum()]),
        Op::ConcatCols(widths) => {
            if (0..parents.len()).all(|i| tan(i).is_none()) {
                return None;
            }
            let m = dims2(&tape.nodes[parents[0]].shape).0;
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; m * total];
            let mut offset = 0;
            for (i, &w) in widths.iter().enumerate() {
                if let Some(d) = tan(i) {
                    for r in 0..m {
                        out[r * total + offset..r * total + offset + w]
                            .copy_from_slice(&d[r * w..(r + 1) * w]);
                    }
                }
                offset += w;
            }
            Some(out)
        }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}

// ── reverse mode ─────────────────────────────────────────────────────

/// Gradients of a scalar `loss` with respect to `params`.
///
/// Params that were never watched on the live tape (or watched on an earlier
/// one) receive zero gradients. A non-scalar loss is a contract violation.
pub fn grad(loss: &Tensor, params: &[Tensor]) -> Result<Vec<Tensor>> {
    if !loss.is_scalar() {
        return Err(Error::contract(format!(
            "grad requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let grads: Option<Vec<Tensor>> = with_active(|tape| {
        let adjoints = match live_index(tape, loss) {
            Some(loss_idx) => sweep(tape, loss_idx),
            None => vec![None; tape.nodes.len()],
        };
        params
            .iter()
            .map(|p| {
                let g = live_index(tape, p)
                    .and_then(|i| adjoints[i].clone())
                    .unwrap_or_else(|| vec![0.0; p.numel()]);
                Tensor::from_vec(p.shape().to_vec(), g)
            })
            .collect()
    });
    grads.ok_or_else(|| Error::contract("grad called with no active tape"))
}

/// Reverse sweep from `loss_idx`, returning per-node adjoints.
fn sweep(tape: &Tape, loss_idx: usize) -> Vec<Option<Vec<f64>>> {
    let nodes = &tape.nodes;
    let mut adj: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    adj[loss_idx] = Some(vec![1.0]);

    for i in (0..=loss_idx).rev() {
        if adj[i].is_none() || !nodes[i].requires_grad {
            continue;
        }
        let g = adj[i].take().unwrap();
        backward_op(nodes, i, &g, &mut adj);
        adj[i] = Some(g);
    }
    adj
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    adj[idx].get_or_insert_with(|| vec![0.0; len])
}

fn backward_op(nodes: &[Node], i: usize, g: &[f64], adj: &mut Vec<Option<Vec<f64>>>) {
    let node = &nodes[i];
    let needs = |p: usize| nodes[node.parents[p]].requires_grad;
    let plen = |p: usize| nodes[node.parents[p]].value.len();
    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            for p in 0..2 {
                if needs(p) {
                    let acc = accumulate(adj, node.parents[p], plen(p));
                    for (a, &gv) in acc.iter_mut().zip(g) {
                        *a += gv;
                    }
                }
            }
        }
        Op::Sub => {
            if needs(0) {
                let acc = accumulate(adj, node.parents[0], plen(0));
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += gv;
                }
            }
            if needs(1) {
                let acc = accumulate(adj, node.parents[1], plen(1));
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a -= gv;
                }
            }
        }
        Op::Mul => {
            if needs(0) {
                let b = Arc::clone(&nodes[node.parents[1]].value);
                let acc = accumulate(adj, node.parents[0], plen(0));
                for ((a, &gv), &bv) in acc.iter_mut().zip(g).zip(b.iter()) {
                    *a += gv * bv;
                }
            }
            if needs(1) {
                let a_val = Arc::clone(&nodes[node.parents[0]].value);
                let acc = accumulate(adj, node.parents[1], plen(1));
                for ((a, &gv), &av) in acc.iter_mut().zip(g).zip(a_val.iter()) {
                    *a += gv * av;
                }
            }
        }
        Op::Neg => {
            if needs(0) {
                let acc = accumulate(adj, node.parents[0], plen(0));
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a -= gv;
                }
            }
        }
        Op::Scale(c) => {
            if needs(0) {
                let acc = accumulate(adj, node.parents[0], plen(0));
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += c * gv;
                }
            }
        }
        Op::AddConst => {
            if needs(0) {
                let acc = accumulate(adj, node.parents[0], plen(0));
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += gv;
                }
            }
        }
        Op::Sin => {
            if needs(0) {
                let x = Arc::clone(&nodes[node.parents[0]].value);
                let acc = accumulate(adj, node.parents[0], plen(0));
                for ((a, &gv), &xv) in acc.iter_mut().zip(g).zip(x.iter()) {
                    *a += gv * xv.cos();
                }
            }
        }
        Op::Cos => {
            if needs(0) {
                let x = Arc::clone(&nodes[node.parents[0]].value);
                let acc = accumulate(adj, node.parents[0], plen(0));
                for ((a, &gv), &xv) in acc.iter_mut().zip(g).zip(x.iter()) {
                    *a -= gv * xv.sin();
                }
            }
        }
        Op::MatMul => {
            let (m, k) = dims2(&nodes[node.parents[0]].shape);
            let n = dims2(&nodes[node.parents[1]].shape).1;
            if needs(0) {
                // dA += g · Bᵀ
                let b = Arc::clone(&nodes[node.parents[1]].value);
                let acc = accumulate(adj, node.parents[0], m * k);
                dgemm_strided(m, n, k, 1.0, g, n as isize, 1, &b, 1, n as isize, 1.0, acc, k as isize, 1);
            }
            if needs(1) {
                // dB += Aᵀ · g
                let a = Arc::clone(&nodes[node.parents[0]].value);
                let acc = accumulate(adj, node.parents[1], k * n);
                dgemm_strided(k, m, n, 1.0, &a, 1, k as isize, g, n as isize, 1, 1.0, acc, n as isize, 1);
            }
        }
        Op::AddRow => {
            let (m, n) = dims2(&node.shape);
            if needs(0) {
                let acc = accumulate(adj, node.parents[0], m * n);
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += gv;
                }
            }
            if needs(1) {
                let acc = accumulate(adj, node.parents[1], plen(1));
                for r in 0..m {
                    for c in 0..n {
                        acc[c] += g[r * n + c];
                    }
                }
            }
        }
        Op::MulCol => {
            let (m, n) = dims2(&node.shape);
            if needs(0) {
                let col = Arc::clone(&nodes[node.parents[1]].value);
                let acc = accumulate(adj, node.parents[0], m * n);
                for r in 0..m {
                    for c in 0..n {
                        acc[r * n + c] += g[r * n + c] * col[r];
                    }
                }
            }
            if needs(1) {
                let mat = Arc::clone(&nodes[node.parents[0]].value);
                let acc = accumulate(adj, node.parents[1], plen(1));
                for r in 0..m {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += g[r * n + c] * mat[r * n + c];
                    }
                    acc[r] += s;
                }
            }
        }
        Op::Act(act) => {
            if needs(0) {
                let x = Arc::clone(&nodes[node.parents[0]].value);
                let aux = Arc::clone(node.aux.as_ref().expect("activation aux"));
                let mut deriv = vec![0.0; x.len()];
                act.derivative(&x, &aux, &mut deriv);
                let acc = accumulate(adj, node.parents[0], plen(0));
                for ((a, &gv), &dv) in acc.iter_mut().zip(g).zip(deriv.iter()) {
                    *a += gv * dv;
                }
            }
        }
        Op::Sum => {
            if needs(0) {
                let acc = accumulate(adj, node.parents[0], plen(0));
                let gv = g[0];
                for a in acc.iter_mut() {
                    *a += gv;
                }
            }
        }
        Op::ConcatCols(widths) => {
            let m = dims2(&node.shape).0;
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (p, &w) in widths.iter().enumerate() {
                if needs(p) {
                    let acc = accumulate(adj, node.parents[p], m * w);
                    for r in 0..m {
                        for c in 0..w {
                            acc[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
    }
}

// ── spec-level entry points ──────────────────────────────────────────

/// Value and directional derivative of `f` at `x` along `tangent`,
/// computed in a single forward-mode pass.
pub fn jvp(
    f: impl FnOnce(&Tensor) -> Tensor,
    x: &Tensor,
    tangent: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if tangent.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: tangent.shape().to_vec(),
            context: "jvp tangent",
        });
    }
    with_tape(Mode::Forward, || {
        let xw = x.with_tangent(tangent)?;
        let y = f(&xw);
        let dy = y
            .tangent()
            .unwrap_or_else(|| Tensor::zeros(y.shape().to_vec()));
        Ok((y.detach(), dy))
    })
}

/// Convenience for computing a loss and its parameter gradients in one
/// reverse-mode scope. `f` receives the watched parameter handles.
pub fn value_and_grad(
    params: &[Tensor],
    f: impl FnOnce(&[Tensor]) -> Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    with_tape(Mode::Reverse, || {
        let watched: Vec<Tensor> = params.iter().map(|p| p.watched()).collect();
        let loss = f(&watched);
        let grads = grad(&loss, &watched)?;
        Ok((loss.item(), grads))
    })
}
