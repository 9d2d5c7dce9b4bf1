//! Verification helpers: throwaway MLPs and central finite differences.
//!
//! These exist to be an oracle for the differentiation machinery, so they
//! deliberately use only plain forward evaluation. Used by the unit tests
//! and by the acceptance suite.

use super::tensor::{Activation, Tensor};
use crate::rng::RngStream;

/// A plain fully-connected network with the given layer sizes.
pub struct RandomMlp {
    pub sizes: Vec<usize>,
    pub act: Activation,
    pub params: Vec<Tensor>,
}

impl RandomMlp {
    /// He-style initialization with N(0, 2/fan_in) weights and zero biases.
    pub fn new(sizes: &[usize], act: Activation, rng: &mut RngStream) -> Self {
        assert!(sizes.len() >= 2);
        let mut params = Vec::new();
        for win in sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| std * rng.standard_normal())
                .collect();
            params.push(Tensor::matrix(fan_in, fan_out, w));
            params.push(Tensor::zeros(vec![fan_out]));
        }
        RandomMlp {
            sizes: sizes.to_vec(),
            act,
            params,
        }
    }

    /// Forward pass with externally supplied parameters (e.g. watched
    /// handles). The activation is applied to every layer but the last.
    pub fn forward_with(&self, params: &[Tensor], x: &Tensor) -> Tensor {
        let layers = self.sizes.len() - 1;
        let mut h = x.clone();
        for l in 0..layers {
            h = h.matmul(&params[2 * l]).add_row(&params[2 * l + 1]);
            if l + 1 < layers {
                h = h.activation(self.act);
            }
        }
        h
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_with(&self.params, x)
    }
}

/// Central finite-difference gradients of `loss_fn` with respect to every
/// entry of every parameter tensor.
pub fn fd_grads(
    params: &[Tensor],
    h: f64,
    loss_fn: impl Fn(&[Tensor]) -> Tensor,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = vec![0.0; params[pi].numel()];
        for (ei, gv) in g.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut bumped: Vec<Tensor> = params.to_vec();
                let mut data = bumped[pi].data().to_vec();
                data[ei] += delta;
                bumped[pi] = Tensor::from_vec(params[pi].shape().to_vec(), data);
                loss_fn(&bumped).item()
            };
            *gv = (eval(h) - eval(-h)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest elementwise relative error, with an absolute floor so that
/// near-zero entries compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
