//! End-to-end verification suite. Each criterion runs at its pinned
//! tolerance and reports one pass/fail line; the expensive checkerboard
//! pipeline is trained once and shared by the criteria that need it.

use std::path::Path;
use std::time::Instant;

use crate::analytic::AnalyticLinearFlow;
use crate::autodiff::check::{fd_grads, max_rel_err, RandomMlp};
use crate::autodiff::{
    hutchinson_trace, jacobian_trace_exact, jvp, value_and_grad, Activation, Tensor,
};
use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::{energy_distance, eval_log_density, FewStepEval, ReferenceEval};
use crate::model::{Diagonal, JointFlowMap, JointFlowMapModel, ModelConfig, TraceMode};
use crate::residuals::flowmap_residuals;
use crate::rng::{RngStream, StreamKind};
use crate::sampling::{
    likelihood_fewstep, likelihood_reference_batch, self_guided_sample, GuidanceConfig,
    Integrator,
};
use crate::train::{run_training, TrainOutputs};

#[derive(Debug, Clone)]
pub struct CriterionOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {} ({}): {} — {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.details
        )
    }
}

fn outcome(id: usize, name: &'static str, passed: bool, details: String) -> CriterionOutcome {
    CriterionOutcome {
        id,
        name,
        passed,
        details,
    }
}

// ── criterion 1: autodiff correctness ────────────────────────────────

pub fn criterion_autodiff() -> CriterionOutcome {
    let started = Instant::now();
    let mut rng = RngStream::new(1001, StreamKind::Init);
    let mut worst_grad = 0.0f64;
    let mut worst_jvp = 0.0f64;
    for i in 0..100 {
        let layers = 1 + i % 4;
        let width = 4 + (i * 7) % 61;
        let act = if i % 2 == 0 {
            Activation::Gelu
        } else {
            Activation::Silu
        };
        let mut sizes = vec![3];
        sizes.extend(std::iter::repeat_n(width, layers));
        sizes.push(2);
        let mlp = RandomMlp::new(&sizes, act, &mut rng);
        let x = Tensor::matrix(2, 3, (0..6).map(|_| rng.standard_normal()).collect());

        let loss_fn = |ps: &[Tensor]| mlp.forward_with(ps, &x).sum();
        let (_, grads) = value_and_grad(&mlp.params, loss_fn).expect("grads");
        let fd = fd_grads(&mlp.params, 1e-5, loss_fn);
        for (g, f) in grads.iter().zip(fd.iter()) {
            worst_grad = worst_grad.max(max_rel_err(g.data(), f));
        }

        let xv = Tensor::from_vec(vec![3], (0..3).map(|_| rng.standard_normal()).collect());
        let tangent = Tensor::from_vec(vec![3], (0..3).map(|_| rng.standard_normal()).collect());
        let (_, dy) = jvp(|x| mlp.forward(x), &xv, &tangent).expect("jvp");
        let h = 1e-5;
        let fd_dir = mlp
            .forward(&xv.add(&tangent.scale(h)))
            .sub(&mlp.forward(&xv.sub(&tangent.scale(h))))
            .scale(1.0 / (2.0 * h));
        worst_jvp = worst_jvp.max(max_rel_err(dy.data(), fd_dir.data()));
    }
    let secs = started.elapsed().as_secs_f64();
    let passed = worst_grad <= 1e-5 && worst_jvp <= 1e-6 && secs < 60.0;
    outcome(
        1,
        "autodiff correctness",
        passed,
        format!(
            "100 random MLPs: worst grad rel err {worst_grad:.2e} (<=1e-5), worst jvp rel err {worst_jvp:.2e} (<=1e-6), {secs:.1}s (<60s)"
        ),
    )
}

// ── criterion 2: trace estimation ────────────────────────────────────

pub fn criterion_trace() -> CriterionOutcome {
    let started = Instant::now();
    let mut rng = RngStream::new(1002, StreamKind::Init);
    let mut probe_rng = RngStream::new(1002, StreamKind::Probes);

    // Exact trace vs finite-difference Jacobian diagonal on random MLPs.
    let mut worst_exact = 0.0f64;
    for _ in 0..20 {
        let mlp = RandomMlp::new(&[2, 24, 24, 2], Activation::Gelu, &mut rng);
        let x = Tensor::from_vec(vec![2], (0..2).map(|_| rng.standard_normal()).collect());
        let tr = jacobian_trace_exact(|x| mlp.forward(x), &x).expect("trace");
        let h = 1e-5;
        let mut fd_tr = 0.0;
        for i in 0..2 {
            let mut xp = x.data().to_vec();
            let mut xm = xp.clone();
            xp[i] += h;
            xm[i] -= h;
            let yp = mlp.forward(&Tensor::from_vec(vec![2], xp));
            let ym = mlp.forward(&Tensor::from_vec(vec![2], xm));
            fd_tr += (yp.data()[i] - ym.data()[i]) / (2.0 * h);
        }
        worst_exact = worst_exact.max((tr - fd_tr).abs());
    }

    // Rademacher probes are exact on diagonal Jacobians.
    let mut worst_diag = 0.0f64;
    for _ in 0..20 {
        let d0 = 1.0 + rng.uniform() * 3.0;
        let d1 = -2.0 + rng.uniform() * 4.0;
        let a = Tensor::matrix(2, 2, vec![d0, 0.0, 0.0, d1]);
        let x = Tensor::from_vec(vec![2], vec![0.0, 0.0]);
        let est = hutchinson_trace(|x| x.matmul(&a), &x, 1, &mut probe_rng).expect("hutch");
        worst_diag = worst_diag.max((est - (d0 + d1)).abs());
    }

    // 3 sigma band on random 2x2 maps with 1e4 probes.
    let mut band_ok = true;
    let mut band_detail = String::new();
    for _ in 0..5 {
        let a_data: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
        let a = Tensor::matrix(2, 2, a_data.clone());
        let x = Tensor::from_vec(vec![2], vec![0.0, 0.0]);
        let exact = a_data[0] + a_data[3];
        let sd = (a_data[1] + a_data[2]).abs();
        let n = 10_000;
        let est = hutchinson_trace(|x| x.matmul(&a), &x, n, &mut probe_rng).expect("hutch");
        let band = 3.0 * sd / (n as f64).sqrt() + 1e-12;
        if (est - exact).abs() > band {
            band_ok = false;
            band_detail = format!("|{est:.4}-{exact:.4}| > {band:.4}");
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let passed = worst_exact <= 1e-6 && worst_diag <= 1e-12 && band_ok && secs < 60.0;
    outcome(
        2,
        "trace estimation",
        passed,
        format!(
            "exact vs FD diag {worst_exact:.2e} (<=1e-6), diagonal-probe dev {worst_diag:.2e}, 3-sigma bands {}{band_detail}, {secs:.1}s (<60s)",
            if band_ok { "ok" } else { "violated " }
        ),
    )
}

// ── criterion 3: analytic linear-flow oracle ─────────────────────────

pub fn criterion_analytic_flow() -> CriterionOutcome {
    let flow = AnalyticLinearFlow { dim: 2 };
    let test_points = [[0.5, -0.3], [1.2, 0.9], [-1.8, 1.1], [2.0, -2.0]];

    let mut worst_ref = 0.0f64;
    let mut worst_few = 0.0f64;
    let mut ratios_ok = true;
    let mut ratio_detail = String::new();
    for p in &test_points {
        let expected = flow.log_density(p);
        let x1 = Tensor::matrix(1, 2, p.to_vec());

        let reports = likelihood_reference_batch(
            &flow,
            &x1,
            256,
            TraceMode::Exact,
            Integrator::Euler,
            None,
        )
        .expect("reference");
        worst_ref = worst_ref.max((reports[0].log_density - expected).abs());

        for k in [1usize, 2, 4, 8] {
            let report = likelihood_fewstep(&flow, p, k).expect("fewstep");
            worst_few = worst_few.max((report.log_density - expected).abs());
        }

        let err = |steps: usize| {
            let r = likelihood_reference_batch(
                &flow,
                &x1,
                steps,
                TraceMode::Exact,
                Integrator::Euler,
                None,
            )
            .expect("reference");
            (r[0].log_density - expected).abs()
        };
        let (e64, e128, e256) = (err(64), err(128), err(256));
        for ratio in [e64 / e128, e128 / e256] {
            if !(1.6..=2.4).contains(&ratio) {
                ratios_ok = false;
                ratio_detail = format!(" (ratio {ratio:.2})");
            }
        }
    }
    let passed = worst_ref <= 5e-3 && worst_few <= 1e-10 && ratios_ok;
    outcome(
        3,
        "analytic linear-flow oracle",
        passed,
        format!(
            "256-step reference err {worst_ref:.2e} (<=5e-3), exact-map few-step err {worst_few:.2e} (<=1e-10), first-order halving {}{ratio_detail}",
            if ratios_ok { "ok" } else { "violated" }
        ),
    )
}

// ── criterion 4: Eulerian/mean-velocity identity ─────────────────────

pub fn criterion_identity() -> CriterionOutcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let cfg = ModelConfig {
            hidden_width: 24,
            hidden_layers: 2,
            div_head_hidden: 8,
            zero_init_heads: false,
            ..Default::default()
        };
        let mut rng = RngStream::new(2000 + seed, StreamKind::Init);
        let model = JointFlowMapModel::init(cfg, &mut rng);

        let n = 8;
        let x = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.standard_normal()).collect());
        let mut t = vec![0.0; n];
        let mut s = vec![0.0; n];
        for i in 0..n {
            let a = rng.uniform();
            let b = rng.uniform();
            t[i] = a.min(b);
            s[i] = a.max(b);
        }
        let t = Tensor::column(t);
        let s = Tensor::column(s);
        let v = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.standard_normal()).collect());
        let ones = Tensor::column(vec![1.0; n]);

        // LHS: tangent of Φ composed on the tape along (v, 1, 0).
        let dphi = model.flow_map_tangent(&x, &t, &s, Some(&v), Some(&ones), None);
        // RHS: −[u − v − (s−t)·(∂_t u + ∇u·v)] assembled from one JVP.
        let e = model.joint_jvp(&x, &t, &s, Some(&v), Some(&ones), None);
        let gap = s.sub(&t);
        let rhs = v.sub(&e.u).add(&e.du.mul_col(&gap));
        for (a, b) in dphi.data().iter().zip(rhs.data().iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    let passed = worst <= 1e-8;
    outcome(
        4,
        "Eulerian equals mean-velocity identity",
        passed,
        format!("50 random networks: worst residual gap {worst:.2e} (<=1e-8)"),
    )
}

// ── the trained checkerboard pipeline (criteria 5–7) ─────────────────

pub struct PipelineArtifacts {
    pub config: RunConfig,
    pub outputs: TrainOutputs,
    pub held_points: Tensor,
    pub train_secs: f64,
}

impl PipelineArtifacts {
    pub fn teacher(&self) -> &JointFlowMapModel {
        self.outputs.model("teacher").expect("teacher stage")
    }

    pub fn joint(&self) -> &JointFlowMapModel {
        self.outputs.final_model()
    }
}

/// Train the shipped checkerboard pipeline once.
pub fn train_pipeline(config: &RunConfig, out_dir: &Path) -> Result<PipelineArtifacts> {
    let started = Instant::now();
    let outputs = run_training(config, out_dir)?;
    let train_secs = started.elapsed().as_secs_f64();
    let mut eval_rng = RngStream::new(config.seed ^ 0x5eed, StreamKind::Eval);
    let held_points = config.density.sample(&mut eval_rng, config.eval.n_samples);
    Ok(PipelineArtifacts {
        config: config.clone(),
        outputs,
        held_points,
        train_secs,
    })
}

pub fn criterion_pipeline(art: &PipelineArtifacts) -> CriterionOutcome {
    let density = &art.config.density;
    let teacher = art.teacher();
    let joint = art.joint();
    let ref_steps = art.config.eval.reference_steps;

    // Evaluate each log-density route once over the shared held-out points.
    let analytic = density.logpdf_batch(&art.held_points);
    let tdiag = Diagonal(teacher);
    let ref_eval = ReferenceEval {
        field: &tdiag,
        steps: ref_steps,
        trace: TraceMode::Exact,
        integrator: Integrator::Euler,
    };
    let (ref_logp, _) =
        eval_log_density(&ref_eval, &art.held_points).expect("teacher reference");
    let baseline = ReferenceEval {
        field: &tdiag,
        steps: 1,
        trace: TraceMode::Exact,
        integrator: Integrator::Euler,
    };
    let (base_logp, _) = eval_log_density(&baseline, &art.held_points).expect("baseline");

    let mean_abs = |a: &[f64], b: &[f64]| -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for (x, y) in a.iter().zip(b.iter()) {
            if y.is_finite() {
                total += (x - y).abs();
                n += 1;
            }
        }
        total / n.max(1) as f64
    };

    let teacher_err = mean_abs(&ref_logp, &analytic);
    let baseline_err = mean_abs(&base_logp, &analytic);

    let mut worst_k_err = 0.0f64;
    let mut joint_k1_logp = Vec::new();
    for &k in &art.config.eval.k_values {
        let few = FewStepEval { map: joint, k };
        let (logp, _) = eval_log_density(&few, &art.held_points).expect("few-step");
        worst_k_err = worst_k_err.max(mean_abs(&logp, &analytic));
        if k == 1 {
            joint_k1_logp = logp;
        }
    }

    let joint_err = mean_abs(&joint_k1_logp, &ref_logp);
    let base_err = mean_abs(&base_logp, &ref_logp);
    let ratio = base_err / joint_err;

    let minutes = art.train_secs / 60.0;
    let a = teacher_err <= 0.15;
    let b = worst_k_err <= 0.3;
    let c = baseline_err > 1.0;
    let d = ratio >= 5.0;
    let time_ok = minutes <= 30.0;
    outcome(
        5,
        "checkerboard pipeline",
        a && b && c && d && time_ok,
        format!(
            "(a) teacher {ref_steps}-step err {teacher_err:.3} nats (<=0.15: {a}); (b) few-step worst-K err {worst_k_err:.3} nats (<=0.3: {b}); (c) baseline K=1 err {baseline_err:.2} nats (>1: {c}); (d) per-sample ratio {ratio:.1}x (>=5: {d}); training {minutes:.1} min (<=30: {time_ok})"
        ),
    )
}

pub fn criterion_residuals(art: &PipelineArtifacts) -> CriterionOutcome {
    let joint = art.joint();
    // Untrained comparison model: same architecture, fully random heads
    // (zero-initialized heads would trivially zero the semigroup residual).
    let cfg = ModelConfig {
        zero_init_heads: false,
        ..art.config.model.clone()
    };
    let mut rng = RngStream::new(art.config.seed ^ 0xbad, StreamKind::Init);
    let untrained = JointFlowMapModel::init(cfg, &mut rng);

    let n = 512;
    let mut test_rng = RngStream::new(art.config.seed ^ 0x7e57, StreamKind::Eval);
    let points = art.config.density.sample(&mut test_rng, n);
    let mut t = vec![0.0; n];
    let mut s = vec![0.0; n];
    for i in 0..n {
        let a = test_rng.uniform();
        let b = test_rng.uniform();
        t[i] = a.min(b);
        s[i] = a.max(b);
    }
    let t = Tensor::column(t);
    let s = Tensor::column(s);

    let trained_diag = Diagonal(joint);
    let trained = flowmap_residuals(joint, &trained_diag, &points, &t, &s);
    let untrained_diag = Diagonal(&untrained);
    let untrained_res = flowmap_residuals(&untrained, &untrained_diag, &points, &t, &s);

    let (_, te, ts) = trained.medians();
    let (_, ue, us) = untrained_res.medians();
    let eulerian_ok = te <= ue / 10.0;
    let semigroup_ok = ts <= us / 10.0;
    outcome(
        6,
        "flow-map conditions after training",
        eulerian_ok && semigroup_ok,
        format!(
            "median eulerian {te:.3e} vs untrained {ue:.3e} ({}), median semigroup {ts:.3e} vs untrained {us:.3e} ({})",
            if eulerian_ok { "<=1/10" } else { ">1/10" },
            if semigroup_ok { "<=1/10" } else { ">1/10" }
        ),
    )
}

pub fn criterion_guidance(art: &PipelineArtifacts) -> CriterionOutcome {
    let joint = art.joint();
    let g = &art.config.guidance;
    let n = g.n_samples.max(1024);
    let cfg = GuidanceConfig {
        steps: 1,
        lr: g.effective_lr(),
        k_samp: g.k_samp,
    };

    let mut rng = RngStream::new(art.config.seed, StreamKind::Guidance);
    let guided = self_guided_sample(joint, &mut rng, &cfg, n).expect("guided sampling");
    let improved = guided
        .traces
        .iter()
        .filter(|t| t[1] < t[0])
        .count() as f64
        / n as f64;

    // Unguided baseline from the same initial noise.
    let unguided = crate::sampling::euler_sample(joint, &guided.x0_initial, cfg.k_samp)
        .expect("unguided sampling")
        .pop()
        .unwrap();

    let mut data_rng = RngStream::new(art.config.seed ^ 0xed, StreamKind::Eval);
    let held = art.config.density.sample(&mut data_rng, 2048);
    let ed_guided = energy_distance(&guided.samples, &held);
    let ed_unguided = energy_distance(&unguided, &held);

    let improve_ok = improved >= 0.90;
    let ed_ok = ed_guided <= ed_unguided * 1.10 + 1e-6;
    outcome(
        7,
        "self-guidance",
        improve_ok && ed_ok,
        format!(
            "surrogate NLL decreased for {:.1}% of {n} seeds (>=90%: {improve_ok}); energy distance guided {ed_guided:.4} vs unguided {ed_unguided:.4} (<=+10%: {ed_ok})",
            improved * 100.0
        ),
    )
}

// ── criterion 8: determinism ─────────────────────────────────────────

/// Shorten a config's stages so the double run fits the suite's budget;
/// every stage and loss family still executes.
pub fn truncated_config(config: &RunConfig, max_iterations: u64) -> RunConfig {
    let mut cfg = config.clone();
    for stage in cfg.stages.iter_mut() {
        stage.iterations = stage.iterations.min(max_iterations);
        stage.log_interval = stage.log_interval.min(25);
        if let Some(es) = &mut stage.early_stop {
            es.interval = es.interval.min(max_iterations.max(1));
            es.n_samples = es.n_samples.min(512);
        }
    }
    cfg.eval.n_samples = cfg.eval.n_samples.min(1000);
    cfg
}

pub fn criterion_determinism(config: &RunConfig) -> CriterionOutcome {
    let cfg = truncated_config(config, 100);
    let run = |dir: &Path| -> Result<Vec<u8>> {
        run_training(&cfg, dir)?;
        Ok(std::fs::read(dir.join("metrics.csv"))?)
    };
    let result = (|| -> Result<(Vec<u8>, Vec<u8>)> {
        let d1 = tempfile::tempdir().map_err(crate::error::Error::Io)?;
        let d2 = tempfile::tempdir().map_err(crate::error::Error::Io)?;
        Ok((run(d1.path())?, run(d2.path())?))
    })();
    match result {
        Ok((a, b)) => {
            let passed = a == b;
            outcome(
                8,
                "determinism",
                passed,
                format!(
                    "two truncated runs of the shipped config: metrics CSVs {} ({} bytes)",
                    if passed {
                        "byte-identical"
                    } else {
                        "differ"
                    },
                    a.len()
                ),
            )
        }
        Err(e) => outcome(8, "determinism", false, format!("run failed: {e}")),
    }
}

/// Run the full suite. The pipeline is trained once into `out_dir`.
pub fn run_all(config: &RunConfig, out_dir: &Path) -> Result<Vec<CriterionOutcome>> {
    let mut outcomes = vec![
        criterion_autodiff(),
        criterion_trace(),
        criterion_analytic_flow(),
        criterion_identity(),
    ];
    let artifacts = train_pipeline(config, out_dir)?;
    outcomes.push(criterion_pipeline(&artifacts));
    outcomes.push(criterion_residuals(&artifacts));
    outcomes.push(criterion_guidance(&artifacts));
    outcomes.push(criterion_determinism(config));
    Ok(outcomes)
}
