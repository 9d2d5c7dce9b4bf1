//! Dense f64 tensors with optional links into the active differentiation tape.
//!
//! A `Tensor` is a cheap handle: shape plus `Arc`-shared storage plus an
//! optional tape node. Operations always compute eagerly; when a tape is
//! active and at least one operand is linked, the operation is also recorded
//! (reverse mode) or its tangent is pushed forward immediately (forward
//! mode). Tensors are rank 1 or rank 2; a rank-1 tensor of length n behaves
//! as a 1×n row where a matrix is required.

use std::sync::Arc;

use super::tape::{self, NodeRef, Op};
use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        assert!(
            shape.len() == 1 || shape.len() == 2,
            "only rank-1/rank-2 tensors are supported"
        );
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::from_vec(vec![rows, cols], data)
    }

    /// Column vector of shape [n, 1].
    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_vec(vec![n, 1], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// (rows, cols), treating rank-1 [n] as 1×n.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mutable access to the underlying storage. Breaks any tape link, since
    /// recorded values must stay immutable.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        self.node = None;
        Arc::make_mut(&mut self.data)
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        Tensor { shape, data, node }
    }

    // ── tape entry points ────────────────────────────────────────────

    /// Register this tensor as a differentiable leaf on the active tape.
    /// Gradients from a later `grad` call flow into the returned handle.
    pub fn watched(&self) -> Tensor {
        tape::watch(self)
    }

    /// Register this tensor as a forward-mode leaf carrying `tangent`.
    pub fn with_tangent(&self, tangent: &Tensor) -> Result<Tensor> {
        if tangent.shape != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: tangent.shape.clone(),
                context: "with_tangent",
            });
        }
        Ok(tape::watch_with_tangent(self, tangent))
    }

    /// Cut the tape link: downstream results of a detached tensor contribute
    /// no gradients and no tangents (stop-gradient).
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Forward-mode tangent of this tensor, if the active tape propagated one.
    /// Zero tangents are represented as `None`.
    pub fn tangent(&self) -> Option<Tensor> {
        tape::tangent_of(self)
    }

    // ── arithmetic ──────────────────────────────────────────────────

    fn assert_same_shape(&self, other: &Tensor, context: &'static str) {
        assert_eq!(
            self.shape, other.shape,
            "{context}: shape {:?} vs {:?}",
            self.shape, other.shape
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let data = binary_map(&self.data, &other.data, |a, b| a + b);
        tape::emit(Op::Add, &[self, other], self.shape.clone(), data, None)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let data = binary_map(&self.data, &other.data, |a, b| a - b);
        tape::emit(Op::Sub, &[self, other], self.shape.clone(), data, None)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let data = binary_map(&self.data, &other.data, |a, b| a * b);
        tape::emit(Op::Mul, &[self, other], self.shape.clone(), data, None)
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data.iter().map(|v| -v).collect();
        tape::emit(Op::Neg, &[self], self.shape.clone(), data, None)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|v| c * v).collect();
        tape::emit(Op::Scale(c), &[self], self.shape.clone(), data, None)
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|v| v + c).collect();
        tape::emit(Op::AddConst, &[self], self.shape.clone(), data, None)
    }

    pub fn sin(&self) -> Tensor {
        let data = self.data.iter().map(|v| v.sin()).collect();
        tape::emit(Op::Sin, &[self], self.shape.clone(), data, None)
    }

    pub fn cos(&self) -> Tensor {
        let data = self.data.iter().map(|v| v.cos()).collect();
        tape::emit(Op::Cos, &[self], self.shape.clone(), data, None)
    }

    /// Matrix product [m,k]·[k,n] → [m,n].
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        dgemm(m, k, n, 1.0, &self.data, &other.data, 0.0, &mut out);
        tape::emit(Op::MatMul, &[self, other], vec![m, n], out, None)
    }

    /// Broadcast-add a bias row ([n] or [1,n]) to every row of [m,n].
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        let (m, n) = self.dims2();
        assert_eq!(bias.numel(), n, "add_row: bias len {} vs cols {n}", bias.numel());
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &self.data[r * n..(r + 1) * n];
            out.extend(row.iter().zip(bias.data.iter()).map(|(a, b)| a + b));
        }
        tape::emit(Op::AddRow, &[self, bias], self.shape.clone(), out, None)
    }

    /// Broadcast-multiply each row of [m,n] by the matching entry of a
    /// column tensor ([m] treated as column, or [m,1]).
    pub fn mul_col(&self, col: &Tensor) -> Tensor {
        let (m, n) = self.dims2();
        assert_eq!(col.numel(), m, "mul_col: col len {} vs rows {m}", col.numel());
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let c = col.data[r];
            out.extend(self.data[r * n..(r + 1) * n].iter().map(|v| c * v));
        }
        tape::emit(Op::MulCol, &[self, col], self.shape.clone(), out, None)
    }

    pub fn activation(&self, act: Activation) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        let mut aux = vec![0.0; self.data.len()];
        act.apply(&self.data, &mut out, &mut aux);
        tape::emit(
            Op::Act(act),
            &[self],
            self.shape.clone(),
            out,
            Some(Arc::new(aux)),
        )
    }

    pub fn gelu(&self) -> Tensor {
        self.activation(Activation::Gelu)
    }

    pub fn silu(&self) -> Tensor {
        self.activation(Activation::Silu)
    }

    /// Sum of all elements → scalar of shape [1].
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data.iter().sum();
        tape::emit(Op::Sum, &[self], vec![1], vec![s], None)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let m = parts[0].dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pm, pn) = p.dims2();
                assert_eq!(pm, m, "concat_cols: row mismatch");
                pn
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, w) in parts.iter().zip(widths.iter()) {
                out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        tape::emit_n(Op::ConcatCols(widths), parts, vec![m, total], out, None)
    }

    // ── small numeric conveniences (not differentiable paths) ────────

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub(crate) fn binary_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// Row-major dgemm: c = alpha·a·b + beta·c.
pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    dgemm_strided(
        m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
    );
}

/// dgemm over arbitrary row/column strides; transposed views are expressed
/// by swapping strides instead of copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    debug_assert!(a.len() > ((m - 1) as isize * rsa + (k - 1) as isize * csa) as usize);
    debug_assert!(b.len() > ((k - 1) as isize * rsb + (n - 1) as isize * csb) as usize);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Pointwise nonlinearities with cached auxiliaries so backward and
/// forward-mode passes avoid re-evaluating transcendentals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn fast_tanh(a: f64) -> f64 {
    if a > 20.0 {
        1.0
    } else if a < -20.0 {
        -1.0
    } else {
        let e = (2.0 * a).exp();
        (e - 1.0) / (e + 1.0)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    /// Compute `out = f(x)` and stash the transcendental part in `aux`
    /// (tanh of the inner polynomial for GELU, the sigmoid for SiLU).
    pub(crate) fn apply(self, x: &[f64], out: &mut [f64], aux: &mut [f64]) {
        match self {
            Activation::Gelu => {
                for i in 0..x.len() {
                    let xi = x[i];
                    let t = fast_tanh(GELU_C * (xi + GELU_A * xi * xi * xi));
                    aux[i] = t;
                    out[i] = 0.5 * xi * (1.0 + t);
                }
            }
            Activation::Silu => {
                for i in 0..x.len() {
                    let s = sigmoid(x[i]);
                    aux[i] = s;
                    out[i] = x[i] * s;
                }
            }
        }
    }

    /// f'(x) given the cached aux from `apply`.
    pub(crate) fn derivative(self, x: &[f64], aux: &[f64], out: &mut [f64]) {
        match self {
            Activation::Gelu => {
                for i in 0..x.len() {
                    let xi = x[i];
                    let t = aux[i];
                    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi);
                    out[i] = 0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * dinner;
                }
            }
            Activation::Silu => {
                for i in 0..x.len() {
                    let s = aux[i];
                    out[i] = s * (1.0 + x[i] * (1.0 - s));
                }
            }
        }
    }
}
