// Scratch sweep: rank teacher-training variants by calibration error.
use flowmap_core::config::{DivSource, StageConfig};
use flowmap_core::density::{Density2D, TimeScheme};
use flowmap_core::losses::LossKind;
use flowmap_core::metrics::{nll_calibration_on, ReferenceEval};
use flowmap_core::model::{Diagonal, JointFlowMapModel, ModelConfig, TimeEmbed, TraceMode};
use flowmap_core::rng::{RngStream, StreamKind};
use flowmap_core::sampling::Integrator;
use flowmap_core::train::{run_stage, NullMetrics, StageContext};
use std::time::Instant;

fn run_variant(
    name: &str,
    model_cfg: ModelConfig,
    batch: usize,
    steps: u64,
    decay: u64,
    ema: f64,
    points: &flowmap_core::Tensor,
    density: &Density2D,
) {
    let mut rng = RngStream::new(1234, StreamKind::Init);
    let mut model = JointFlowMapModel::init(model_cfg, &mut rng);
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
        ema_rate: ema,
        log_interval: 100_000,
    };
    let ctx = StageContext { density, teacher: None, seed: 1234, stage_index: 0 };
    let t0 = Instant::now();
    run_stage(&mut model, &stage, &ctx, &mut NullMetrics).unwrap();
    let train_min = t0.elapsed().as_secs_f64() / 60.0;
    let diag = Diagonal(&model);
    let eval = ReferenceEval { field: &diag, steps: 200, trace: TraceMode::Exact, integrator: Integrator::Midpoint };
    let cal = nll_calibration_on(&eval, density, points).unwrap();
    println!(
        "{name}: err={:.4} mean_nll={:.4} ({:.1} min train)",
        cal.mean_abs_error_vs_analytic, cal.mean_nll, train_min
    );
}

fn main() {
    let density = Density2D::Checkerboard;
    let mut eval_rng = RngStream::new(99, StreamKind::Eval);
    let points = density.sample(&mut eval_rng, 3000);
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(8000);

    let base = ModelConfig::default();
    let sinus = ModelConfig { time_embed: TimeEmbed::Sinusoidal { dim: 8 }, ..base.clone() };
    let decay = steps / 10;
    run_variant("ema999+sinus-full", sinus, 512, steps, decay, 0.999, &points, &density);
}
