//! Closed-form reference flows used as calibration oracles.
//!
//! The linear flow v(x,t) = x has an exact flow map Φ(x,t,s) = x·e^{s-t},
//! average velocity u(x,t,s) = x·(e^{s-t}-1)/(s-t), constant divergence d,
//! and a closed-form likelihood: log p₁(x₁) = log N(x₁·e^{-1}; 0, I) - d.
//! Every likelihood path in the crate can be checked against it.

use crate::autodiff::Tensor;
use crate::model::{JointFlowMap, JointJvp, VelocityField};

/// The exact joint flow map of v(x,t) = x in `dim` dimensions.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticLinearFlow {
    pub dim: usize,
}

/// (e^w - 1)/w, continuously extended through w = 0.
fn avg_growth(w: f64) -> f64 {
    if w.abs() < 1e-4 {
        1.0 + w / 2.0 + w * w / 6.0 + w * w * w / 24.0
    } else {
        (w.exp() - 1.0) / w
    }
}

/// d/dw of `avg_growth`.
fn avg_growth_deriv(w: f64) -> f64 {
    if w.abs() < 1e-4 {
        0.5 + w / 3.0 + w * w / 8.0 + w * w * w / 30.0
    } else {
        ((w - 1.0) * w.exp() + 1.0) / (w * w)
    }
}

impl AnalyticLinearFlow {
    /// Closed-form log-density of x₁ under the flow from N(0, I).
    pub fn log_density(&self, x1: &[f64]) -> f64 {
        let shrunk: Vec<f64> = x1.iter().map(|v| v * (-1.0f64).exp()).collect();
        crate::density::gaussian_logpdf(&shrunk) - self.dim as f64
    }
}

impl JointFlowMap for AnalyticLinearFlow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn joint(&self, x: &Tensor, t: &Tensor, s: &Tensor) -> (Tensor, Tensor) {
        let (n, d) = x.dims2();
        let mut u = vec![0.0; n * d];
        for r in 0..n {
            let g = avg_growth(s.data()[r] - t.data()[r]);
            for c in 0..d {
                u[r * d + c] = x.data()[r * d + c] * g;
            }
        }
        (
            Tensor::matrix(n, d, u),
            Tensor::column(vec![-(d as f64); n]),
        )
    }

    fn joint_jvp(
        &self,
        x: &Tensor,
        t: &Tensor,
        s: &Tensor,
        dx: Option<&Tensor>,
        dt: Option<&Tensor>,
        ds: Option<&Tensor>,
    ) -> JointJvp {
        let (n, d) = x.dims2();
        let (u, dcol) = self.joint(x, t, s);
        let mut du = vec![0.0; n * d];
        for r in 0..n {
            let w = s.data()[r] - t.data()[r];
            let g = avg_growth(w);
            let gp = avg_growth_deriv(w);
            let dw = ds.map_or(0.0, |v| v.data()[r]) - dt.map_or(0.0, |v| v.data()[r]);
            for c in 0..d {
                let dxp = dx.map_or(0.0, |v| v.data()[r * d + c]);
                du[r * d + c] = dxp * g + x.data()[r * d + c] * gp * dw;
            }
        }
        JointJvp {
            u,
            d: dcol,
            du: Tensor::matrix(n, d, du),
            dd: Tensor::column(vec![0.0; n]),
        }
    }

    fn d_grad_x(&self, x: &Tensor, _t: &Tensor, _s: &Tensor) -> Tensor {
        Tensor::zeros(x.shape().to_vec())
    }
}

impl VelocityField for AnalyticLinearFlow {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &Tensor, _t: &Tensor) -> Tensor {
        x.clone()
    }

    fn velocity_jvp(&self, x: &Tensor, _t: &Tensor, dx: &Tensor) -> (Tensor, Tensor) {
        (x.clone(), dx.clone())
    }
}

/// A flow map with constant velocity and constant D; handy as a fixed point
/// of the self-consistency losses.
#[derive(Debug, Clone)]
pub struct ConstantFlow {
    pub velocity: Vec<f64>,
    pub d_value: f64,
}

impl JointFlowMap for ConstantFlow {
    fn dim(&self) -> usize {
        self.velocity.len()
    }

    fn joint(&self, x: &Tensor, _t: &Tensor, _s: &Tensor) -> (Tensor, Tensor) {
        let (n, d) = x.dims2();
        let mut u = Vec::with_capacity(n * d);
        for _ in 0..n {
            u.extend_from_slice(&self.velocity);
        }
        (Tensor::matrix(n, d, u), Tensor::column(vec![self.d_value; n]))
    }

    fn joint_jvp(
        &self,
        x: &Tensor,
        t: &Tensor,
        s: &Tensor,
        _dx: Option<&Tensor>,
        _dt: Option<&Tensor>,
        _ds: Option<&Tensor>,
    ) -> JointJvp {
        let (u, d) = self.joint(x, t, s);
        let du = Tensor::zeros(u.shape().to_vec());
        let dd = Tensor::zeros(d.shape().to_vec());
        JointJvp { u, d, du, dd }
    }

    fn d_grad_x(&self, x: &Tensor, _t: &Tensor, _s: &Tensor) -> Tensor {
        Tensor::zeros(x.shape().to_vec())
    }
}

/// The zero velocity field (identity transport).
#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl VelocityField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &Tensor, _t: &Tensor) -> Tensor {
        Tensor::zeros(x.shape().to_vec())
    }

    fn velocity_jvp(&self, x: &Tensor, _t: &Tensor, _dx: &Tensor) -> (Tensor, Tensor) {
        (
            Tensor::zeros(x.shape().to_vec()),
            Tensor::zeros(x.shape().to_vec()),
        )
    }
}

/// A linear velocity field v(x) = x·A (row-vector convention), so the
/// Jacobian is Aᵀ. Used to cross-check trace estimators.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub a: Tensor,
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.a.dims2().0
    }

    fn velocity(&self, x: &Tensor, _t: &Tensor) -> Tensor {
        x.matmul(&self.a)
    }

    fn velocity_jvp(&self, x: &Tensor, _t: &Tensor, dx: &Tensor) -> (Tensor, Tensor) {
        (x.matmul(&self.a), dx.matmul(&self.a))
    }
}
