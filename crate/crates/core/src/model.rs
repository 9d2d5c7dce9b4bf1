//! The joint flow-map network: a shared MLP trunk with a velocity head
//! u(x,t,s) and a scalar divergence head D(x,t,s), plus the linear flow-map
//! application and batched divergence estimation over velocity fields.
//!
//! Conventions:
//! - The network consumes (x, t, s-t); both time scalars are raw inputs by
//!   default, with a sinusoidal embedding behind a config switch.
//! - D predicts the *negative* average divergence, so the log-density map
//!   is z + (s-t)·D directly.
//! - The divergence head is trained in scaled units (`div_scale`); `joint`
//!   returns the unscaled read-out.

use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{self, Mode};
use crate::autodiff::trace::ProbeDist;
use crate::autodiff::{Activation, Tensor};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeEmbed {
    /// Concatenate raw (t, s-t) scalars to the input.
    Raw,
    /// Sinusoidal features per time scalar; `dim` must be even.
    Sinusoidal { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub div_head_hidden: usize,
    pub time_embed: TimeEmbed,
    /// Divergence targets are multiplied by this during training; the head
    /// output is divided by it at read-out. A conditioning trick only.
    pub div_scale: f64,
    /// Zero-init the final layer of both heads so the initial map is the
    /// identity in X and constant in Z.
    pub zero_init_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 2,
            hidden_width: 256,
            hidden_layers: 4,
            activation: Activation::Gelu,
            div_head_hidden: 64,
            time_embed: TimeEmbed::Raw,
            div_scale: 1.0,
            zero_init_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn time_feature_dim(&self) -> usize {
        match self.time_embed {
            TimeEmbed::Raw => 2,
            TimeEmbed::Sinusoidal { dim } => 2 * dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dim + self.time_feature_dim()
    }

    /// Canonical parameter order: trunk (W, b) per layer, velocity head
    /// (W, b), divergence head (W1, b1, W2, b2). Checkpoints rely on it.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim();
        for _ in 0..self.hidden_layers {
            shapes.push(vec![fan_in, self.hidden_width]);
            shapes.push(vec![self.hidden_width]);
            fan_in = self.hidden_width;
        }
        shapes.push(vec![self.hidden_width, self.dim]);
        shapes.push(vec![self.dim]);
        shapes.push(vec![self.hidden_width, self.div_head_hidden]);
        shapes.push(vec![self.div_head_hidden]);
        shapes.push(vec![self.div_head_hidden, 1]);
        shapes.push(vec![1]);
        shapes
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.hidden_layers {
            names.push(format!("trunk.{l}.weight"));
            names.push(format!("trunk.{l}.bias"));
        }
        names.extend(
            ["vel_head.weight", "vel_head.bias", "div_head.0.weight",
             "div_head.0.bias", "div_head.1.weight", "div_head.1.bias"]
                .map(String::from),
        );
        names
    }
}

/// Shared-trunk joint flow-map model.
#[derive(Debug, Clone)]
pub struct JointFlowMapModel {
    pub cfg: ModelConfig,
    pub params: Vec<Tensor>,
}

impl JointFlowMapModel {
    pub fn init(cfg: ModelConfig, rng: &mut RngStream) -> Self {
        let shapes = cfg.param_shapes();
        let n = shapes.len();
        let mut params = Vec::with_capacity(n);
        for (i, shape) in shapes.iter().enumerate() {
            let is_bias = shape.len() == 1;
            // Final layers of both heads: velocity head at 2L, div output at 2L+4.
            let head_final = i == 2 * cfg.hidden_layers || i == 2 * cfg.hidden_layers + 4;
            let numel: usize = shape.iter().product();
            let data = if is_bias || (head_final && cfg.zero_init_heads) {
                vec![0.0; numel]
            } else {
                let std = (2.0 / shape[0] as f64).sqrt();
                (0..numel).map(|_| std * rng.standard_normal()).collect()
            };
            params.push(Tensor::from_vec(shape.clone(), data));
        }
        JointFlowMapModel { cfg, params }
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for p in &self.params {
            flat.extend_from_slice(p.data());
        }
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length mismatch");
        let mut offset = 0;
        for p in self.params.iter_mut() {
            let n = p.numel();
            let shape = p.shape().to_vec();
            *p = Tensor::from_vec(shape, flat[offset..offset + n].to_vec());
            offset += n;
        }
    }

    /// View over externally supplied parameter handles (e.g. watched copies
    /// inside a gradient scope).
    pub fn view<'a>(&'a self, params: &'a [Tensor]) -> ParamView<'a> {
        ParamView {
            cfg: &self.cfg,
            params,
        }
    }

    /// Forward-mode tangent of Φ_X = x + (s-t)·u with the whole composition
    /// built on the tape, seeded with (dx, dt, ds). Exercises the chain rule
    /// through the time conditioning and the map assembly itself.
    pub fn flow_map_tangent(
        &self,
        x: &Tensor,
        t: &Tensor,
        s: &Tensor,
        dx: Option<&Tensor>,
        dt: Option<&Tensor>,
        ds: Option<&Tensor>,
    ) -> Tensor {
        tape::with_tape(Mode::Forward, || {
            let xw = seed(x, dx);
            let tw = seed(t, dt);
            let sw = seed(s, ds);
            let (u, _) = forward_with(&self.cfg, &self.params, &xw, &tw, &sw);
            let gap = sw.sub(&tw);
            let phi = xw.add(&u.mul_col(&gap));
            phi.tangent()
                .unwrap_or_else(|| Tensor::zeros(phi.shape().to_vec()))
        })
    }
}

fn seed(v: &Tensor, tangent: Option<&Tensor>) -> Tensor {
    match tangent {
        Some(d) => v.with_tangent(d).expect("tangent shape"),
        None => v.clone(),
    }
}

/// Borrowed (config, parameters) pair evaluating the same network as
/// [`JointFlowMapModel`]. Parameters may be watched tape handles.
pub struct ParamView<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a [Tensor],
}

fn time_features(cfg: &ModelConfig, t: &Tensor, gap: &Tensor) -> Vec<Tensor> {
    match cfg.time_embed {
        TimeEmbed::Raw => vec![t.clone(), gap.clone()],
        TimeEmbed::Sinusoidal { dim } => {
            assert!(dim >= 2 && dim % 2 == 0, "sinusoidal dim must be even");
            let mut feats = Vec::with_capacity(2 * dim);
            for tau in [t, gap] {
                for j in 0..dim / 2 {
                    let scaled = tau.scale(std::f64::consts::PI * (1 << j) as f64);
                    feats.push(scaled.sin());
                    feats.push(scaled.cos());
                }
            }
            feats
        }
    }
}

/// One trunk evaluation feeding both heads. Returns (u, raw divergence-head
/// output in scaled units).
pub fn forward_with(
    cfg: &ModelConfig,
    params: &[Tensor],
    x: &Tensor,
    t: &Tensor,
    s: &Tensor,
) -> (Tensor, Tensor) {
    let (rows, d) = x.dims2();
    assert_eq!(d, cfg.dim, "input dim {d} vs model dim {}", cfg.dim);
    assert_eq!(t.numel(), rows, "t column length");
    assert_eq!(s.numel(), rows, "s column length");

    let gap = s.sub(t);
    let tf = time_features(cfg, t, &gap);
    let mut parts: Vec<&Tensor> = vec![x];
    parts.extend(tf.iter());
    let mut h = Tensor::concat_cols(&parts);

    let l = cfg.hidden_layers;
    for i in 0..l {
        h = h
            .matmul(&params[2 * i])
            .add_row(&params[2 * i + 1])
            .activation(cfg.activation);
    }
    let u = h.matmul(&params[2 * l]).add_row(&params[2 * l + 1]);
    let dh = h
        .matmul(&params[2 * l + 2])
        .add_row(&params[2 * l + 3])
        .activation(cfg.activation);
    let d_raw = dh.matmul(&params[2 * l + 4]).add_row(&params[2 * l + 5]);
    (u, d_raw)
}

/// Values and forward-mode tangents of one joint evaluation.
pub struct JointJvp {
    pub u: Tensor,
    pub d: Tensor,
    pub du: Tensor,
    pub dd: Tensor,
}

/// A joint flow map: average velocity u(x,t,s) and average negative
/// divergence D(x,t,s) with the linear parametrization Φ = x + (s-t)·u.
pub trait JointFlowMap: Sync {
    fn dim(&self) -> usize;

    /// Scale factor of the divergence head's training units. The `joint`
    /// read-out is already unscaled; losses multiply back by this.
    fn div_scale(&self) -> f64 {
        1.0
    }

    /// One evaluation at (x, t, s): u as [n,d], unscaled D as [n,1].
    /// `t` and `s` are per-row columns. Inputs must be finite.
    fn joint(&self, x: &Tensor, t: &Tensor, s: &Tensor) -> (Tensor, Tensor);

    /// Forward-mode evaluation: tangents of (u, D) for input tangents
    /// (dx, dt, ds), where `None` means zero. Must not be called while a
    /// tape is already active on this thread.
    fn joint_jvp(
        &self,
        x: &Tensor,
        t: &Tensor,
        s: &Tensor,
        dx: Option<&Tensor>,
        dt: Option<&Tensor>,
        ds: Option<&Tensor>,
    ) -> JointJvp;

    /// Gradient of Σ_rows D(x,t,s) with respect to x (for self-guidance).
    fn d_grad_x(&self, x: &Tensor, t: &Tensor, s: &Tensor) -> Tensor;
}

impl JointFlowMap for JointFlowMapModel {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn div_scale(&self) -> f64 {
        self.cfg.div_scale
    }

    fn joint(&self, x: &Tensor, t: &Tensor, s: &Tensor) -> (Tensor, Tensor) {
        self.view(&self.params).joint(x, t, s)
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
        tape::with_tape(Mode::Forward, || {
            let xw = seed(x, dx);
            let tw = seed(t, dt);
            let sw = seed(s, ds);
            let (u, d_raw) = forward_with(&self.cfg, &self.params, &xw, &tw, &sw);
            let du = u
                .tangent()
                .unwrap_or_else(|| Tensor::zeros(u.shape().to_vec()));
            let dd_raw = d_raw
                .tangent()
                .unwrap_or_else(|| Tensor::zeros(d_raw.shape().to_vec()));
            let inv = 1.0 / self.cfg.div_scale;
            JointJvp {
                u: u.detach(),
                d: d_raw.detach().scale(inv),
                du,
                dd: dd_raw.scale(inv),
            }
        })
    }

    fn d_grad_x(&self, x: &Tensor, t: &Tensor, s: &Tensor) -> Tensor {
        tape::with_tape(Mode::Reverse, || {
            let xw = x.watched();
            let (_, d_raw) = forward_with(&self.cfg, &self.params, &xw, t, s);
            let total = d_raw.sum().scale(1.0 / self.cfg.div_scale);
            tape::grad(&total, std::slice::from_ref(&xw)).expect("d_grad_x")[0].clone()
        })
    }
}

impl JointFlowMap for ParamView<'_> {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn div_scale(&self) -> f64 {
        self.cfg.div_scale
    }

    fn joint(&self, x: &Tensor, t: &Tensor, s: &Tensor) -> (Tensor, Tensor) {
        assert!(
            x.is_finite() && t.is_finite() && s.is_finite(),
            "joint flow map inputs must be finite"
        );
        let (u, d_raw) = forward_with(self.cfg, self.params, x, t, s);
        let d = if self.cfg.div_scale == 1.0 {
            d_raw
        } else {
            d_raw.scale(1.0 / self.cfg.div_scale)
        };
        (u, d)
    }

    fn joint_jvp(
        &self,
        _x: &Tensor,
        _t: &Tensor,
        _s: &Tensor,
        _dx: Option<&Tensor>,
        _dt: Option<&Tensor>,
        _ds: Option<&Tensor>,
    ) -> JointJvp {
        unimplemented!("joint_jvp on a borrowed view; evaluate through the owning model")
    }

    fn d_grad_x(&self, _x: &Tensor, _t: &Tensor, _s: &Tensor) -> Tensor {
        unimplemented!("d_grad_x on a borrowed view; evaluate through the owning model")
    }
}

/// Φ_X(x,t,s) = x + (s-t)·u(x,t,s).
pub fn flow_map_apply(map: &dyn JointFlowMap, x: &Tensor, t: &Tensor, s: &Tensor) -> Tensor {
    let (u, _) = map.joint(x, t, s);
    let gap = s.sub(t);
    x.add(&u.mul_col(&gap))
}

/// Φ_Z(z; x,t,s) = z + (s-t)·D(x,t,s). D depends on x only, never on z.
pub fn logdensity_map_apply(
    map: &dyn JointFlowMap,
    x: &Tensor,
    z: &Tensor,
    t: &Tensor,
    s: &Tensor,
) -> Tensor {
    let (_, d) = map.joint(x, t, s);
    let gap = s.sub(t);
    z.add(&d.mul(&gap))
}

/// Column of the given constant, for scalar-time evaluation.
pub fn const_col(rows: usize, v: f64) -> Tensor {
    Tensor::column(vec![v; rows])
}

// ── instantaneous velocity fields ────────────────────────────────────

/// An instantaneous velocity field v(x, t) with forward-mode access for
/// divergence computation.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    /// v at points x ([n,d]) and per-row times t ([n,1]).
    fn velocity(&self, x: &Tensor, t: &Tensor) -> Tensor;
    /// (v, J_v·dx) at fixed t.
    fn velocity_jvp(&self, x: &Tensor, t: &Tensor, dx: &Tensor) -> (Tensor, Tensor);
}

/// The diagonal u(·,t,t) of a joint flow map, viewed as an instantaneous
/// velocity field (the tangent identity).
pub struct Diagonal<'a, M: JointFlowMap + ?Sized>(pub &'a M);

impl<M: JointFlowMap + ?Sized> VelocityField for Diagonal<'_, M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn velocity(&self, x: &Tensor, t: &Tensor) -> Tensor {
        self.0.joint(x, t, t).0
    }

    fn velocity_jvp(&self, x: &Tensor, t: &Tensor, dx: &Tensor) -> (Tensor, Tensor) {
        let eval = self.0.joint_jvp(x, t, t, Some(dx), None, None);
        (eval.u, eval.du)
    }
}

// ── divergence estimation ────────────────────────────────────────────

/// How divergence terms are computed from a velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum TraceMode {
    Exact,
    Hutchinson { probes: usize, dist: ProbeDist },
}

impl TraceMode {
    pub fn hutchinson(probes: usize) -> Self {
        TraceMode::Hutchinson {
            probes,
            dist: ProbeDist::Rademacher,
        }
    }

    /// Field evaluations per divergence computation at dimension d.
    pub fn passes(&self, d: usize) -> usize {
        match self {
            TraceMode::Exact => d,
            TraceMode::Hutchinson { probes, .. } => *probes,
        }
    }
}

/// Batched divergence of `field` at (x, t): returns the velocity and the
/// per-row divergence. Exact mode runs d basis-vector passes; Hutchinson
/// runs `probes` random-probe passes (requires an rng).
pub fn divergence(
    field: &dyn VelocityField,
    x: &Tensor,
    t: &Tensor,
    mode: TraceMode,
    mut rng: Option<&mut RngStream>,
) -> (Tensor, Vec<f64>) {
    let (n, d) = x.dims2();
    match mode {
        TraceMode::Exact => {
            let mut div = vec![0.0; n];
            let mut v: Option<Tensor> = None;
            for i in 0..d {
                let mut basis = vec![0.0; n * d];
                for r in 0..n {
                    basis[r * d + i] = 1.0;
                }
                let (val, jv) = field.velocity_jvp(x, t, &Tensor::matrix(n, d, basis));
                for r in 0..n {
                    div[r] += jv.data()[r * d + i];
                }
                v.get_or_insert(val);
            }
            (v.expect("d >= 1"), div)
        }
        TraceMode::Hutchinson { probes, dist } => {
            assert!(probes >= 1, "hutchinson requires probes >= 1");
            let rng = rng.expect("hutchinson divergence needs an rng");
            let mut div = vec![0.0; n];
            let mut v: Option<Tensor> = None;
            for _ in 0..probes {
                let eps: Vec<f64> = (0..n * d)
                    .map(|_| match dist {
                        ProbeDist::Rademacher => rng.rademacher(),
                        ProbeDist::Gaussian => rng.standard_normal(),
                    })
                    .collect();
                let probe = Tensor::matrix(n, d, eps.clone());
                let (val, jv) = field.velocity_jvp(x, t, &probe);
                for r in 0..n {
                    let mut acc = 0.0;
                    for c in 0..d {
                        acc += eps[r * d + c] * jv.data()[r * d + c];
                    }
                    div[r] += acc;
                }
                v.get_or_insert(val);
            }
            for item in div.iter_mut() {
                *item /= probes as f64;
            }
            (v.expect("probes >= 1"), div)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{AnalyticLinearFlow, ConstantFlow, LinearField};
    use crate::autodiff::check::max_rel_err;
    use crate::rng::{RngStream, StreamKind};

    fn random_model(seed: u64) -> JointFlowMapModel {
        let cfg = ModelConfig {
            hidden_width: 24,
            hidden_layers: 3,
            div_head_hidden: 8,
            zero_init_heads: false,
            ..Default::default()
        };
        let mut rng = RngStream::new(seed, StreamKind::Init);
        JointFlowMapModel::init(cfg, &mut rng)
    }

    fn random_inputs(seed: u64, n: usize) -> (Tensor, Tensor, Tensor) {
        let mut rng = RngStream::new(seed, StreamKind::Data);
        let x = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.standard_normal()).collect());
        let mut t = vec![0.0; n];
        let mut s = vec![0.0; n];
        for i in 0..n {
            let a = rng.uniform();
            let b = rng.uniform();
            t[i] = a.min(b);
            s[i] = a.max(b);
        }
        (x, Tensor::column(t), Tensor::column(s))
    }

    #[test]
    fn zero_init_heads_give_zero_outputs() {
        let mut rng = RngStream::new(1, StreamKind::Init);
        let model = JointFlowMapModel::init(ModelConfig::default(), &mut rng);
        let (x, t, s) = random_inputs(2, 16);
        let (u, d) = model.joint(&x, &t, &s);
        assert!(u.data().iter().all(|&v| v == 0.0));
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_map_at_equal_times_is_identity_bit_exact() {
        let model = random_model(3);
        let (x, t, _) = random_inputs(4, 32);
        let out = flow_map_apply(&model, &x, &t, &t);
        for (a, b) in out.data().iter().zip(x.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let z = Tensor::column(vec![0.3; 32]);
        let z_out = logdensity_map_apply(&model, &x, &z, &t, &t);
        for (a, b) in z_out.data().iter().zip(z.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn constant_velocity_flow_map() {
        let map = ConstantFlow {
            velocity: vec![1.0, 1.0],
            d_value: -2.0,
        };
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        let t = const_col(1, 0.0);
        let s = const_col(1, 1.0);
        let out = flow_map_apply(&map, &x, &t, &s);
        assert_eq!(out.data(), &[1.0, 1.0]);

        let z = Tensor::column(vec![0.0]);
        let z_out = logdensity_map_apply(&map, &x, &z, &t, &s);
        assert_eq!(z_out.data(), &[-2.0]);
    }

    #[test]
    fn logdensity_map_is_affine_in_z_with_unit_slope() {
        let model = random_model(5);
        let (x, t, s) = random_inputs(6, 8);
        let z0 = Tensor::column(vec![0.0; 8]);
        let z1 = Tensor::column(vec![7.5; 8]);
        let out0 = logdensity_map_apply(&model, &x, &z0, &t, &s);
        let out1 = logdensity_map_apply(&model, &x, &z1, &t, &s);
        for r in 0..8 {
            let slope = (out1.data()[r] - out0.data()[r]) / 7.5;
            assert!((slope - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_jvp_matches_finite_differences() {
        let model = random_model(7);
        let (x, t, s) = random_inputs(8, 6);
        let mut rng = RngStream::new(9, StreamKind::Data);
        let dx = Tensor::matrix(6, 2, (0..12).map(|_| rng.standard_normal()).collect());
        let dt = Tensor::column((0..6).map(|_| rng.standard_normal()).collect());
        let ds = Tensor::column((0..6).map(|_| rng.standard_normal()).collect());

        let eval = model.joint_jvp(&x, &t, &s, Some(&dx), Some(&dt), Some(&ds));

        let h = 1e-6;
        let bump = |sign: f64| {
            let xb = x.add(&dx.scale(sign * h));
            let tb = t.add(&dt.scale(sign * h));
            let sb = s.add(&ds.scale(sign * h));
            model.joint(&xb, &tb, &sb)
        };
        let (up, dp) = bump(1.0);
        let (um, dm) = bump(-1.0);
        let fd_u = up.sub(&um).scale(1.0 / (2.0 * h));
        let fd_d = dp.sub(&dm).scale(1.0 / (2.0 * h));
        assert!(max_rel_err(eval.du.data(), fd_u.data()) < 1e-5);
        assert!(max_rel_err(eval.dd.data(), fd_d.data()) < 1e-5);
    }

    #[test]
    fn trunk_gradients_are_nonzero_after_random_init() {
        let model = random_model(11);
        let (x, t, s) = random_inputs(12, 4);
        let (_, grads) = crate::autodiff::value_and_grad(&model.params, |ps| {
            let view = model.view(ps);
            let (u, d) = view.joint(&x, &t, &s);
            u.sum().add(&d.sum())
        })
        .unwrap();
        // First trunk layer weight gradient should be generically nonzero.
        assert!(grads[0].max_abs() > 0.0);
    }

    #[test]
    fn eulerian_residual_equals_mean_velocity_identity_residual() {
        // Tangent of Φ built on-tape along (v, 1, 0) must equal
        // v - u + (s-t)·(∂_t u + ∇u·v) assembled by hand: the linear
        // parametrization makes these algebraically identical.
        for seed in 0..5 {
            let model = random_model(100 + seed);
            let (x, t, s) = random_inputs(200 + seed, 16);
            let mut rng = RngStream::new(300 + seed, StreamKind::Data);
            let v = Tensor::matrix(16, 2, (0..32).map(|_| rng.standard_normal()).collect());
            let ones = Tensor::column(vec![1.0; 16]);

            let dphi = model.flow_map_tangent(&x, &t, &s, Some(&v), Some(&ones), None);

            let e = model.joint_jvp(&x, &t, &s, Some(&v), Some(&ones), None);
            let gap = s.sub(&t);
            // -[u - v - (s-t)·du] = v - u + (s-t)·du
            let rhs = v.sub(&e.u).add(&e.du.mul_col(&gap));
            for (a, b) in dphi.data().iter().zip(rhs.data().iter()) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn divergence_exact_and_hutchinson_agree_on_linear_field() {
        let a = Tensor::matrix(2, 2, vec![1.5, 0.3, -0.7, 2.0]);
        let field = LinearField { a };
        let (x, t, _) = random_inputs(14, 64);
        let (_, div_exact) = divergence(&field, &x, &t, TraceMode::Exact, None);
        for v in &div_exact {
            assert!((v - 3.5).abs() < 1e-12);
        }
        // Rademacher probes are exact on diagonal Jacobians only; here the
        // off-diagonal terms cancel in expectation. Use many probes.
        let mut rng = RngStream::new(15, StreamKind::Probes);
        let (_, div_h) = divergence(
            &field,
            &x,
            &t,
            TraceMode::hutchinson(2000),
            Some(&mut rng),
        );
        let mean: f64 = div_h.iter().sum::<f64>() / div_h.len() as f64;
        assert!((mean - 3.5).abs() < 0.05, "hutchinson mean {mean}");
    }

    #[test]
    fn analytic_flow_maps_compose_exactly() {
        let flow = AnalyticLinearFlow { dim: 2 };
        let x = Tensor::matrix(1, 2, vec![0.8, -0.4]);
        // One big step.
        let one = flow_map_apply(&flow, &x, &const_col(1, 0.0), &const_col(1, 1.0));
        // Eight small steps.
        let mut cur = x.clone();
        for i in 0..8 {
            let t0 = i as f64 / 8.0;
            let t1 = (i + 1) as f64 / 8.0;
            cur = flow_map_apply(&flow, &cur, &const_col(1, t0), &const_col(1, t1));
        }
        for (a, b) in one.data().iter().zip(cur.data().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // And the exact endpoint x·e.
        for (a, b) in one.data().iter().zip(x.data().iter()) {
            assert!((a - b * 1f64.exp()).abs() < 1e-12);
        }
    }
}
