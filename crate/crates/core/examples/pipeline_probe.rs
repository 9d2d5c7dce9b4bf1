// Scratch probe: full 3-stage pipeline at candidate production scale, with
// the acceptance-style evaluations. Prints quality numbers per stage.
use flowmap_core::config::{DivSource, EarlyStopConfig, StageConfig};
use flowmap_core::density::{Density2D, TimeScheme};
use flowmap_core::losses::LossKind;
use flowmap_core::metrics::{nll_calibration_on, per_sample_nll_error, FewStepEval, ReferenceEval};
use flowmap_core::model::{Diagonal, JointFlowMapModel, ModelConfig, TraceMode};
use flowmap_core::rng::{RngStream, StreamKind};
use flowmap_core::sampling::Integrator;
use flowmap_core::train::{run_stage, NullMetrics, StageContext};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(512);
    let teacher_steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20_000);
    let sd_steps: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10_000);
    let ft_steps: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3_000);
    println!("batch={batch} steps=({teacher_steps},{sd_steps},{ft_steps})");

    let t_start = Instant::now();
    let cfg = ModelConfig::default();
    let mut rng = RngStream::new(1234, StreamKind::Init);
    let mut model = JointFlowMapModel::init(cfg.clone(), &mut rng);
    let density = Density2D::Checkerboard;

    let base = StageConfig {
        name: "teacher".into(),
        iterations: teacher_steps,
        batch_size: batch,
        split: (1, 0),
        diag_losses: vec![LossKind::FlowMatching],
        pair_losses: vec![],
        pair_time_scheme: TimeScheme::DyadicGrid,
        bidirectional_pairs: false,
        teacher: None,
        warm_start: None,
        base_lr: 1e-3,
        decay_start: teacher_steps / 4,
        lambda_div: 1.0,
        trace: TraceMode::Exact,
        div_source: DivSource::Teacher,
        early_stop: None,
        ema_rate: 0.0,
        log_interval: 2000,
    };

    // ── stage 1: teacher ────────────────────────────────────────────
    let ctx = StageContext { density: &density, teacher: None, seed: 1234, stage_index: 0 };
    let t0 = Instant::now();
    run_stage(&mut model, &base, &ctx, &mut NullMetrics).unwrap();
    println!("teacher trained in {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    let teacher = model.clone();

    // held-out points
    let mut eval_rng = RngStream::new(99, StreamKind::Eval);
    let points = density.sample(&mut eval_rng, 10_000);

    let t0 = Instant::now();
    let tdiag = Diagonal(&teacher);
    let ref_eval = ReferenceEval { field: &tdiag, steps: 200, trace: TraceMode::Exact, integrator: Integrator::Euler };
    let cal = nll_calibration_on(&ref_eval, &density, &points).unwrap();
    println!(
        "teacher 200-step exact NLL: mean_nll={:.4} err={:.4} nats (target <=0.15), eval {:.1} min",
        cal.mean_nll, cal.mean_abs_error_vs_analytic, t0.elapsed().as_secs_f64() / 60.0
    );

    // ── stage 2: shortcut-distill ───────────────────────────────────
    let mut sd = base.clone();
    sd.name = "shortcut-distill".into();
    sd.iterations = sd_steps;
    sd.split = (3, 1);
    sd.teacher = Some("teacher".into());
    sd.pair_losses = vec![LossKind::ShortcutConsistency];
    sd.decay_start = sd_steps / 4;
    let ctx = StageContext { density: &density, teacher: Some(&teacher), seed: 1234, stage_index: 1 };
    let t0 = Instant::now();
    run_stage(&mut model, &sd, &ctx, &mut NullMetrics).unwrap();
    println!("shortcut-distill trained in {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    let sd_model = model.clone();

    // baseline failure mode: K=1 likelihood via diagonal divergence
    let sdd = Diagonal(&sd_model);
    let baseline1 = ReferenceEval { field: &sdd, steps: 1, trace: TraceMode::Exact, integrator: Integrator::Euler };
    let cal_b = nll_calibration_on(&baseline1, &density, &points).unwrap();
    println!("baseline diag-div K=1 err: {:.3} nats (want > 1)", cal_b.mean_abs_error_vs_analytic);

    // ── stage 3: joint distillation ─────────────────────────────────
    let mut ft = sd.clone();
    ft.name = "joint".into();
    ft.iterations = ft_steps;
    ft.diag_losses = vec![LossKind::FlowMatching, LossKind::DivMatch];
    ft.pair_losses = vec![LossKind::ShortcutConsistency, LossKind::DivConsistency];
    ft.decay_start = 0;
    ft.early_stop = Some(EarlyStopConfig { interval: 250, n_samples: 2048, k_values: vec![1, 2, 4, 8] });
    let ctx = StageContext { density: &density, teacher: Some(&teacher), seed: 1234, stage_index: 2 };
    let t0 = Instant::now();
    let summary = run_stage(&mut model, &ft, &ctx, &mut NullMetrics).unwrap();
    println!(
        "joint fine-tune in {:.1} min, best_eval {:?}",
        t0.elapsed().as_secs_f64() / 60.0,
        summary.best_eval
    );

    // few-step NLL per K
    for k in [1usize, 2, 4, 8] {
        let few = FewStepEval { map: &model, k };
        let cal = nll_calibration_on(&few, &density, &points).unwrap();
        println!("joint K={k}: err={:.4} nats (target <=0.3)", cal.mean_abs_error_vs_analytic);
    }

    // per-sample error ratio (criterion d)
    let ref200 = ReferenceEval { field: &tdiag, steps: 200, trace: TraceMode::Exact, integrator: Integrator::Euler };
    let few1 = FewStepEval { map: &model, k: 1 };
    let e_joint = per_sample_nll_error(&few1, &ref200, &points).unwrap();
    let e_base = per_sample_nll_error(&baseline1, &ref200, &points).unwrap();
    println!("per-sample err: joint={:.4} baseline={:.4} ratio={:.1} (want >=5)", e_joint, e_base, e_base / e_joint);

    println!("TOTAL {:.1} min", t_start.elapsed().as_secs_f64() / 60.0);
}
