// Scratch benchmark for training-step wall time at production scale.
use flowmap_core::config::{DivSource, StageConfig};
use flowmap_core::density::{Density2D, TimeScheme};
use flowmap_core::losses::LossKind;
use flowmap_core::model::{JointFlowMapModel, ModelConfig, TraceMode};
use flowmap_core::rng::{RngStream, StreamKind};
use flowmap_core::train::{run_stage, NullMetrics, StageContext};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default(); // 4x256 gelu, div head 64
    let mut rng = RngStream::new(1, StreamKind::Init);
    let mut model = JointFlowMapModel::init(cfg.clone(), &mut rng);
    let teacher = JointFlowMapModel::init(cfg, &mut rng);
    let density = Density2D::Checkerboard;

    let batch = 1024;
    let steps = 60u64;

    let mut stage = StageConfig {
        name: "bench".into(),
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
        decay_start: 0,
        lambda_div: 1.0,
        trace: TraceMode::Exact,
        div_source: DivSource::Teacher,
        early_stop: None,
        ema_rate: 0.0,
        log_interval: 1000,
    };

    // Stage 1 profile: plain flow matching.
    let ctx = StageContext { density: &density, teacher: None, seed: 7, stage_index: 0 };
    let t0 = Instant::now();
    run_stage(&mut model, &stage, &ctx, &mut NullMetrics).unwrap();
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("teacher-style step: {:.1} ms  → 20k steps ≈ {:.1} min", dt * 1e3, dt * 20_000.0 / 60.0);

    // Stage 2 profile: teacher-supervised FM + shortcut consistency (3:1).
    stage.split = (3, 1);
    stage.teacher = Some("x".into());
    stage.pair_losses = vec![LossKind::ShortcutConsistency];
    let ctx = StageContext { density: &density, teacher: Some(&teacher), seed: 7, stage_index: 1 };
    let t0 = Instant::now();
    run_stage(&mut model, &stage, &ctx, &mut NullMetrics).unwrap();
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("distill-style step: {:.1} ms  → 10k steps ≈ {:.1} min", dt * 1e3, dt * 10_000.0 / 60.0);

    // Stage 3 profile: all four losses, exact trace through the teacher.
    stage.diag_losses = vec![LossKind::FlowMatching, LossKind::DivMatch];
    stage.pair_losses = vec![LossKind::ShortcutConsistency, LossKind::DivConsistency];
    let ctx = StageContext { density: &density, teacher: Some(&teacher), seed: 7, stage_index: 2 };
    let t0 = Instant::now();
    run_stage(&mut model, &stage, &ctx, &mut NullMetrics).unwrap();
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("joint-style step:   {:.1} ms  → 3k steps ≈ {:.1} min", dt * 1e3, dt * 3_000.0 / 60.0);
}
