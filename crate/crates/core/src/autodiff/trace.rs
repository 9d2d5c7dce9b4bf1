//! Jacobian trace estimation: exact via basis-vector JVP passes, and the
//! stochastic estimator with Rademacher (default) or Gaussian probes.

use super::tape::jvp;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Cost ceiling for the exact trace: one JVP pass per dimension.
pub const EXACT_TRACE_MAX_DIM: usize = 16;

/// Exact trace of the Jacobian of `f` at `x`: Σᵢ ∂fᵢ/∂xᵢ via one JVP per
/// basis direction. Requires square input/output dimensions.
pub fn jacobian_trace_exact(f: impl Fn(&Tensor) -> Tensor, x: &Tensor) -> Result<f64> {
    let d = x.numel();
    if d > EXACT_TRACE_MAX_DIM {
        return Err(Error::contract(format!(
            "exact trace limited to d <= {EXACT_TRACE_MAX_DIM}, got {d}"
        )));
    }
    let mut total = 0.0;
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        let tangent = Tensor::from_vec(x.shape().to_vec(), e);
        let (y, dy) = jvp(&f, x, &tangent)?;
        if y.numel() != d {
            return Err(Error::contract(format!(
                "trace requires square Jacobian: input dim {d}, output dim {}",
                y.numel()
            )));
        }
        total += dy.data()[i];
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeDist {
    Rademacher,
    Gaussian,
}

/// Stochastic trace estimate: mean over probes of εᵀ(J·ε). Unbiased for any
/// zero-mean unit-covariance probe distribution; Rademacher probes are exact
/// whenever the Jacobian is diagonal.
pub fn hutchinson_trace(
    f: impl Fn(&Tensor) -> Tensor,
    x: &Tensor,
    n_probes: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    hutchinson_trace_with(f, x, n_probes, ProbeDist::Rademacher, rng)
}

pub fn hutchinson_trace_with(
    f: impl Fn(&Tensor) -> Tensor,
    x: &Tensor,
    n_probes: usize,
    dist: ProbeDist,
    rng: &mut RngStream,
) -> Result<f64> {
    if n_probes == 0 {
        return Err(Error::contract("hutchinson_trace requires n_probes >= 1"));
    }
    let d = x.numel();
    let mut total = 0.0;
    for _ in 0..n_probes {
        let probe: Vec<f64> = (0..d)
            .map(|_| match dist {
                ProbeDist::Rademacher => rng.rademacher(),
                ProbeDist::Gaussian => rng.standard_normal(),
            })
            .collect();
        let tangent = Tensor::from_vec(x.shape().to_vec(), probe.clone());
        let (y, dy) = jvp(&f, x, &tangent)?;
        if y.numel() != d {
            return Err(Error::contract(format!(
                "trace requires square Jacobian: input dim {d}, output dim {}",
                y.numel()
            )));
        }
        total += probe
            .iter()
            .zip(dy.data().iter())
            .map(|(e, je)| e * je)
            .sum::<f64>();
    }
    Ok(total / n_probes as f64)
}
