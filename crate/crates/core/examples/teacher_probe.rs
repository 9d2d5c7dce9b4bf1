// Scratch probe: teacher quality vs integration error.
use flowmap_core::config::{DivSource, StageConfig};
use flowmap_core::density::{Density2D, TimeScheme};
use flowmap_core::losses::LossKind;
use flowmap_core::metrics::{nll_calibration_on, ReferenceEval};
use flowmap_core::model::{Diagonal, JointFlowMapModel, ModelConfig, TraceMode};
use flowmap_core::rng::{RngStream, StreamKind};
use flowmap_core::sampling::Integrator;
use flowmap_core::train::{run_stage, NullMetrics, StageContext};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(512);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20_000);
    let decay: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2_000);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1234);
    println!("teacher probe: batch={batch} steps={steps} decay_start={decay} seed={seed}");

    let cfg = ModelConfig::default();
    let mut rng = RngStream::new(seed, StreamKind::Init);
    let mut model = JointFlowMapModel::init(cfg, &mut rng);
    let density = Density2D::Checkerboard;

    let stage = StageConfig {
        name: "teacher".into(),
        iterations: steps,
        batch_size: batch,
        split: (1, 0),
        diag_losses: vec![LossKind::FlowMatching],
        pair_losses: vec![],
        pair_time_scheme: TimeScheme::DyadicGrid,
        bidirectional_pairs: false,
        teacher: None,
        warm_start: None,
        base_lr: 1e-3,
        decay_start: decay,
        lambda_div: 1.0,
        trace: TraceMode::Exact,
        div_source: DivSource::Teacher,
        early_stop: None,
        ema_rate: 0.0,
        log_interval: 5000,
    };
    let ctx = StageContext { density: &density, teacher: None, seed, stage_index: 0 };
    let t0 = Instant::now();
    run_stage(&mut model, &stage, &ctx, &mut NullMetrics).unwrap();
    println!("trained in {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    flowmap_core::checkpoint::save(
        std::path::Path::new("/root/teacher_probe.ckpt"), &model, "teacher", steps, &[], None,
    ).unwrap();

    let mut eval_rng = RngStream::new(99, StreamKind::Eval);
    let points = density.sample(&mut eval_rng, 4000);
    let diag = Diagonal(&model);
    for (name, steps, integ) in [
        ("euler-200", 200usize, Integrator::Euler),
        ("midpoint-200", 200, Integrator::Midpoint),
        ("midpoint-1024", 1024, Integrator::Midpoint),
    ] {
        let t0 = Instant::now();
        let eval = ReferenceEval { field: &diag, steps, trace: TraceMode::Exact, integrator: integ };
        let cal = nll_calibration_on(&eval, &density, &points).unwrap();
        println!(
            "{name}: mean_nll={:.4} err={:.4} nats ({:.1}s)",
            cal.mean_nll, cal.mean_abs_error_vs_analytic, t0.elapsed().as_secs_f64()
        );
    }
}
