//! Synthetic densities with exact samplers and analytic log-densities, and
//! interpolant construction for training batches.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::rng::RngStream;

/// Natural log of the checkerboard support area (8 cells of area 4).
pub const CHECKERBOARD_LOG_DENSITY: f64 = -3.465_735_902_799_726_5; // -ln 32

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A 2D synthetic data distribution with an exact sampler and analytic
/// log-density. Off-support points report `-inf`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Density2D {
    /// 4×4 alternating grid of 2×2 cells tiling [-4,4]²; cell (i,j) is
    /// occupied iff i+j is even. Uniform on the 8 occupied cells.
    Checkerboard,
    StandardGaussian { dim: usize },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        /// Per-component diagonal variances.
        variances: Vec<Vec<f64>>,
    },
}

impl Density2D {
    pub fn dim(&self) -> usize {
        match self {
            Density2D::Checkerboard => 2,
            Density2D::StandardGaussian { dim } => *dim,
            Density2D::GaussianMixture { means, .. } => means[0].len(),
        }
    }

    /// Draw n i.i.d. samples as an [n, d] tensor.
    pub fn sample(&self, rng: &mut RngStream, n: usize) -> Tensor {
        assert!(n >= 1, "sample count must be >= 1");
        match self {
            Density2D::Checkerboard => checkerboard_sample(rng, n),
            Density2D::StandardGaussian { dim } => {
                let mut data = vec![0.0; n * dim];
                rng.fill_standard_normal(&mut data);
                Tensor::matrix(n, *dim, data)
            }
            Density2D::GaussianMixture {
                weights,
                means,
                variances,
            } => {
                let d = means[0].len();
                let total: f64 = weights.iter().sum();
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n {
                    let mut pick = rng.uniform() * total;
                    let mut k = 0;
                    for (i, w) in weights.iter().enumerate() {
                        if pick < *w {
                            k = i;
                            break;
                        }
                        pick -= w;
                        k = i;
                    }
                    for j in 0..d {
                        data.push(means[k][j] + variances[k][j].sqrt() * rng.standard_normal());
                    }
                }
                Tensor::matrix(n, d, data)
            }
        }
    }

    pub fn logpdf(&self, p: &[f64]) -> f64 {
        match self {
            Density2D::Checkerboard => checkerboard_logpdf(p[0], p[1]),
            Density2D::StandardGaussian { .. } => gaussian_logpdf(p),
            Density2D::GaussianMixture {
                weights,
                means,
                variances,
            } => {
                let total: f64 = weights.iter().sum();
                let d = means[0].len();
                let mut max = f64::NEG_INFINITY;
                let mut terms = Vec::with_capacity(weights.len());
                for k in 0..weights.len() {
                    let mut logp = (weights[k] / total).ln();
                    for j in 0..d {
                        let var = variances[k][j];
                        let diff = p[j] - means[k][j];
                        logp += -0.5 * (LN_2PI + var.ln()) - diff * diff / (2.0 * var);
                    }
                    max = max.max(logp);
                    terms.push(logp);
                }
                max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
            }
        }
    }

    pub fn logpdf_batch(&self, points: &Tensor) -> Vec<f64> {
        let (n, d) = points.dims2();
        (0..n)
            .map(|r| self.logpdf(&points.data()[r * d..(r + 1) * d]))
            .collect()
    }
}

/// Cell index of a coordinate in the 4×4 checkerboard grid, or None outside
/// [-4, 4). Boundaries belong to the cell given by floor indexing.
#[inline]
fn cell_index(coord: f64) -> Option<i64> {
    let i = ((coord + 4.0) / 2.0).floor() as i64;
    if (0..4).contains(&i) {
        Some(i)
    } else {
        None
    }
}

/// -ln 32 on occupied cells, -inf off support.
pub fn checkerboard_logpdf(x: f64, y: f64) -> f64 {
    match (cell_index(x), cell_index(y)) {
        (Some(i), Some(j)) if (i + j) % 2 == 0 => CHECKERBOARD_LOG_DENSITY,
        _ => f64::NEG_INFINITY,
    }
}

/// The 8 occupied cells in fixed lexicographic (i, j) order.
fn occupied_cells() -> [(i64, i64); 8] {
    let mut cells = [(0i64, 0i64); 8];
    let mut n = 0;
    for i in 0..4 {
        for j in 0..4 {
            if (i + j) % 2 == 0 {
                cells[n] = (i, j);
                n += 1;
            }
        }
    }
    cells
}

/// n points uniform over the occupied cells, as an [n, 2] tensor.
pub fn checkerboard_sample(rng: &mut RngStream, n: usize) -> Tensor {
    assert!(n >= 1, "sample count must be >= 1");
    let cells = occupied_cells();
    let mut data = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let (i, j) = cells[rng.index(8)];
        data.push(-4.0 + 2.0 * (i as f64 + rng.uniform()));
        data.push(-4.0 + 2.0 * (j as f64 + rng.uniform()));
    }
    Tensor::matrix(n, 2, data)
}

/// Standard-normal log-density: -(d/2)·ln(2π) - ‖p‖²/2.
pub fn gaussian_logpdf(p: &[f64]) -> f64 {
    let d = p.len() as f64;
    let sq: f64 = p.iter().map(|v| v * v).sum();
    -0.5 * d * LN_2PI - 0.5 * sq
}

pub fn gaussian_logpdf_batch(points: &Tensor) -> Vec<f64> {
    let (n, d) = points.dims2();
    (0..n)
        .map(|r| gaussian_logpdf(&points.data()[r * d..(r + 1) * d]))
        .collect()
}

// ── interpolants ─────────────────────────────────────────────────────

/// How the time arguments of a batch are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    /// t ~ U[0,1], s = t.
    Uniform,
    /// (t, s) ~ U([0,1]²) conditioned on t < s via sorting the pair.
    UniformPairs,
    /// t and s on the 1/128 grid with dyadic gaps s-t ∈ {1, 1/2, …, 1/128}.
    DyadicGrid,
}

/// Smallest time unit of the dyadic grid.
pub const GRID_UNITS: usize = 128;
/// Number of dyadic gap lengths: {2^0, …, 2^-7}.
pub const N_GAP_LENGTHS: usize = 8;

/// Sampled (x0, x1, t, s, x_t, v_target) tuples feeding every loss.
/// x_t = (1-t)·x0 + t·x1 and v_target = x1 - x0, held exactly.
#[derive(Debug, Clone)]
pub struct InterpolantBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    /// [n, 1] column.
    pub t: Tensor,
    /// [n, 1] column, t ≤ s.
    pub s: Tensor,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

impl InterpolantBatch {
    pub fn len(&self) -> usize {
        self.t.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch over a row range (cheap copies; used for chunking).
    pub fn slice_rows(&self, lo: usize, hi: usize) -> InterpolantBatch {
        let d = self.x0.dims2().1;
        let take = |t: &Tensor, w: usize| {
            Tensor::matrix(hi - lo, w, t.data()[lo * w..hi * w].to_vec())
        };
        InterpolantBatch {
            x0: take(&self.x0, d),
            x1: take(&self.x1, d),
            t: take(&self.t, 1),
            s: take(&self.s, 1),
            x_t: take(&self.x_t, d),
            v_target: take(&self.v_target, d),
        }
    }
}

pub fn make_interpolant_batch(
    rng: &mut RngStream,
    density: &Density2D,
    n: usize,
    scheme: TimeScheme,
) -> InterpolantBatch {
    assert!(n >= 1, "batch size must be >= 1");
    let d = density.dim();
    let x1 = density.sample(rng, n);
    let mut x0_data = vec![0.0; n * d];
    rng.fill_standard_normal(&mut x0_data);
    let x0 = Tensor::matrix(n, d, x0_data);

    let mut t = vec![0.0; n];
    let mut s = vec![0.0; n];
    for r in 0..n {
        match scheme {
            TimeScheme::Uniform => {
                t[r] = rng.uniform();
                s[r] = t[r];
            }
            TimeScheme::UniformPairs => {
                let a = rng.uniform();
                let b = rng.uniform();
                t[r] = a.min(b);
                s[r] = a.max(b);
            }
            TimeScheme::DyadicGrid => {
                let k = rng.index(N_GAP_LENGTHS);
                let gap_units = GRID_UNITS >> k;
                let start = rng.index(GRID_UNITS - gap_units + 1);
                t[r] = start as f64 / GRID_UNITS as f64;
                s[r] = (start + gap_units) as f64 / GRID_UNITS as f64;
            }
        }
    }

    let mut x_t = vec![0.0; n * d];
    let mut v = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            let (a, b) = (x0.data()[r * d + c], x1.data()[r * d + c]);
            x_t[r * d + c] = (1.0 - t[r]) * a + t[r] * b;
            v[r * d + c] = b - a;
        }
    }

    InterpolantBatch {
        x0,
        x1,
        t: Tensor::column(t),
        s: Tensor::column(s),
        x_t: Tensor::matrix(n, d, x_t),
        v_target: Tensor::matrix(n, d, v),
    }
}
