//! The staged training pipeline: batch assembly, chunk-parallel gradient
//! computation with a fixed-order reduction, Adam updates under the lr
//! schedule, metrics emission, EMA, and early stopping on held-out NLL
//! calibration error.
//!
//! Determinism: batches and probe draws come from named per-stage streams
//! consumed single-threaded; gradients are computed per fixed-size chunk
//! and reduced in chunk order, so results are independent of thread count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, lr_schedule, tape, AdamHyper, AdamState, Mode, Tensor};
use crate::checkpoint;
use crate::config::{DivSource, RunConfig, StageConfig};
use crate::density::{make_interpolant_batch, Density2D, InterpolantBatch, TimeScheme};
use crate::error::{Error, Result};
use crate::losses::{
    meanflow_targets, sq_residual_sum, LossKind, LossTerms,
};
use crate::metrics::{nll_calibration_on, FewStepEval};
use crate::model::{
    divergence, Diagonal, JointFlowMap, JointFlowMapModel, VelocityField,
};
use crate::rng::{RngStream, StreamKind};

/// Rows per gradient chunk; fixed so reductions are machine-independent.
const GRAD_CHUNK: usize = 256;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow<'a> {
    pub stage: &'a str,
    pub step: u64,
    pub terms: LossTerms,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Consumer of per-interval training metrics.
pub trait MetricsSink {
    fn log(&mut self, row: &MetricsRow) -> Result<()>;
}

/// CSV writer with a fixed column set. Deliberately excludes wall-clock
/// time so that identical (seed, config) runs produce byte-identical files;
/// timing lives in the stage summaries.
pub struct CsvMetrics {
    out: std::io::BufWriter<std::fs::File>,
}

impl CsvMetrics {
    pub fn create(path: &Path) -> Result<Self> {
        use std::io::Write;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            out,
            "stage,step,loss_vm,loss_u_sc,loss_div,loss_d_sc,loss_total,lr,grad_norm"
        )?;
        Ok(CsvMetrics { out })
    }

    pub fn flush(&mut self) -> Result<()> {
        use std::io::Write;
        self.out.flush()?;
        Ok(())
    }
}

impl MetricsSink for CsvMetrics {
    fn log(&mut self, row: &MetricsRow) -> Result<()> {
        use std::io::Write;
        writeln!(
            self.out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            row.stage,
            row.step,
            row.terms.vm,
            row.terms.u_sc,
            row.terms.div,
            row.terms.d_sc,
            row.terms.total(),
            row.lr,
            row.grad_norm
        )?;
        Ok(())
    }
}

pub struct NullMetrics;

impl MetricsSink for NullMetrics {
    fn log(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub iterations: u64,
    pub skipped_steps: u64,
    pub final_terms: LossTerms,
    /// (step, held-out NLL error) of the checkpoint kept by early stopping.
    pub best_eval: Option<(u64, f64)>,
    pub wall_clock_secs: f64,
}

/// Everything a stage needs besides its own config.
pub struct StageContext<'a> {
    pub density: &'a Density2D,
    pub teacher: Option<&'a JointFlowMapModel>,
    pub seed: u64,
    pub stage_index: u32,
}

struct PartialSums {
    vm: f64,
    u_sc: f64,
    div: f64,
    d_sc: f64,
}

/// Output of one chunk: term value sums plus the gradient of the chunk's
/// (already weight-normalized) contribution to the total loss.
struct ChunkResult {
    sums: PartialSums,
    grads: Vec<Vec<f64>>,
}

enum ChunkTask {
    Diag {
        batch: InterpolantBatch,
        div_target: Option<Vec<f64>>,
    },
    Pair {
        batch: InterpolantBatch,
        mf_div_part: Option<Vec<f64>>,
        lagrangian_target: Option<Vec<f64>>,
    },
}

fn split_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(GRAD_CHUNK)
        .map(|lo| (lo, (lo + GRAD_CHUNK).min(n)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_chunk(
    model: &JointFlowMapModel,
    cfg: &StageConfig,
    teacher: Option<&JointFlowMapModel>,
    task: &ChunkTask,
    n_diag: usize,
    n_pair: usize,
    lambda: f64,
    div_active: bool,
) -> ChunkResult {
    let scale = model.cfg.div_scale;
    match task {
        ChunkTask::Diag { batch, div_target } => {
            // Plain-mode targets first, then the student pass under a tape.
            let fm_target = if cfg.diag_losses.contains(&LossKind::FlowMatching) {
                Some(match teacher {
                    Some(t) => Diagonal(t).velocity(&batch.x_t, &batch.t),
                    None => batch.v_target.clone(),
                })
            } else {
                None
            };
            let div_target_col = div_target.as_ref().map(|v| Tensor::column(v.clone()));

            tape::with_tape(Mode::Reverse, || {
                let watched: Vec<Tensor> = model.params.iter().map(|p| p.watched()).collect();
                let view = model.view(&watched);
                let (u, d) = view.joint(&batch.x_t, &batch.t, &batch.t);

                let mut sums = PartialSums {
                    vm: 0.0,
                    u_sc: 0.0,
                    div: 0.0,
                    d_sc: 0.0,
                };
                let mut total: Option<Tensor> = None;
                let add = |total: &mut Option<Tensor>, term: Tensor, weight: f64| {
                    let w = term.scale(weight);
                    *total = Some(match total.take() {
                        None => w,
                        Some(t) => t.add(&w),
                    });
                };
                if let Some(target) = &fm_target {
                    let vm_sum = sq_residual_sum(&u.sub(target));
                    sums.vm = vm_sum.item();
                    add(&mut total, vm_sum, 1.0 / n_diag as f64);
                }
                if div_active {
                    if let Some(target) = &div_target_col {
                        let div_sum = sq_residual_sum(&d.sub(target).scale(scale));
                        sums.div = div_sum.item();
                        add(&mut total, div_sum, lambda / n_diag as f64);
                    }
                }
                let grads = finish_chunk(&watched, total);
                ChunkResult { sums, grads }
            })
        }
        ChunkTask::Pair {
            batch,
            mf_div_part,
            lagrangian_target,
        } => {
            // Mean-velocity identity targets need a forward-mode pass, so
            // compute them before the reverse tape opens.
            let wants_mf = cfg.pair_losses.contains(&LossKind::MeanFlow);
            let wants_mf_div =
                div_active && cfg.pair_losses.contains(&LossKind::MeanFlowDiv);
            let mf = if wants_mf || wants_mf_div {
                Some(meanflow_targets(model, batch))
            } else {
                None
            };
            let mf_div_target = if wants_mf_div {
                let drift = &mf.as_ref().unwrap().d_drift;
                let div_col = Tensor::column(mf_div_part.clone().expect("mf div part"));
                Some(drift.sub(&div_col))
            } else {
                None
            };
            let lag_target = lagrangian_target.as_ref().map(|v| Tensor::column(v.clone()));

            let wants_sc = cfg.pair_losses.contains(&LossKind::ShortcutConsistency);
            let wants_dsc =
                div_active && cfg.pair_losses.contains(&LossKind::DivConsistency);

            tape::with_tape(Mode::Reverse, || {
                let watched: Vec<Tensor> = model.params.iter().map(|p| p.watched()).collect();
                let view = model.view(&watched);

                let mut sums = PartialSums {
                    vm: 0.0,
                    u_sc: 0.0,
                    div: 0.0,
                    d_sc: 0.0,
                };
                let mut total: Option<Tensor> = None;
                let add = |total: &mut Option<Tensor>, term: Tensor, weight: f64| {
                    let w = term.scale(weight);
                    *total = Some(match total.take() {
                        None => w,
                        Some(t) => t.add(&w),
                    });
                };

                // Consistency terms: two detached evaluations around the
                // midpoint of each interval, sharing the student tape. With
                // bidirectional pairs, half the rows train the reverse
                // orientation (s → t) so backward-in-time jumps — the ones
                // likelihood evaluation uses — are on the training
                // distribution rather than extrapolated.
                if wants_sc || wants_dsc {
                    let rows = batch.len();
                    let legs: Vec<(Tensor, Tensor, Tensor)> =
                        if cfg.bidirectional_pairs && rows >= 2 {
                            let half = rows / 2;
                            let fwd = batch.slice_rows(0, half);
                            let bwd = batch.slice_rows(half, rows);
                            let x_s = interpolant_at_s(&bwd);
                            vec![
                                (fwd.x_t.clone(), fwd.t.clone(), fwd.s.clone()),
                                (x_s, bwd.s.clone(), bwd.t.clone()),
                            ]
                        } else {
                            vec![(batch.x_t.clone(), batch.t.clone(), batch.s.clone())]
                        };
                    for (x_from, from, to) in &legs {
                        let r = from.add(to).scale(0.5);
                        let (u_fr, d_fr) = view.joint(x_from, from, &r);
                        let (u_fr, d_fr) = (u_fr.detach(), d_fr.detach());
                        let half_gap = r.sub(from).detach();
                        let x_r = x_from.detach().add(&u_fr.mul_col(&half_gap));
                        let (u_rt, d_rt) = view.joint(&x_r, &r, to);
                        let u_target = u_fr.add(&u_rt.detach()).scale(0.5);
                        let d_target = d_fr.add(&d_rt.detach()).scale(0.5);

                        let (u_student, d_student) = view.joint(x_from, from, to);
                        if wants_sc {
                            let term = sq_residual_sum(&u_student.sub(&u_target));
                            sums.u_sc += term.item();
                            add(&mut total, term, 1.0 / n_pair as f64);
                        }
                        if wants_dsc {
                            let term =
                                sq_residual_sum(&d_student.sub(&d_target).scale(scale));
                            sums.d_sc += term.item();
                            add(&mut total, term, lambda / n_pair as f64);
                        }
                    }
                }

                if wants_mf || mf_div_target.is_some() || (div_active && lag_target.is_some()) {
                    let (u_ts, d_ts) = view.joint(&batch.x_t, &batch.t, &batch.s);
                    if wants_mf {
                        let target = &mf.as_ref().unwrap().u_target;
                        let term = sq_residual_sum(&u_ts.sub(target));
                        sums.vm = term.item();
                        add(&mut total, term, 1.0 / n_pair as f64);
                    }
                    if let Some(target) = &mf_div_target {
                        let term = sq_residual_sum(&d_ts.sub(target).scale(scale));
                        sums.div = term.item();
                        add(&mut total, term, lambda / n_pair as f64);
                    }
                    if div_active {
                        if let Some(target) = &lag_target {
                            let term = sq_residual_sum(&d_ts.sub(target).scale(scale));
                            sums.d_sc += term.item();
                            add(&mut total, term, lambda / n_pair as f64);
                        }
                    }
                }
                let grads = finish_chunk(&watched, total);
                ChunkResult { sums, grads }
            })
        }
    }
}

/// Interpolant evaluated at the batch's s times: (1-s)·x0 + s·x1.
fn interpolant_at_s(batch: &InterpolantBatch) -> Tensor {
    let (n, d) = batch.x0.dims2();
    let mut data = vec![0.0; n * d];
    for r in 0..n {
        let s = batch.s.data()[r];
        for c in 0..d {
            let i = r * d + c;
            data[i] = (1.0 - s) * batch.x0.data()[i] + s * batch.x1.data()[i];
        }
    }
    Tensor::matrix(n, d, data)
}

fn finish_chunk(watched: &[Tensor], total: Option<Tensor>) -> Vec<Vec<f64>> {
    match total {
        None => watched.iter().map(|w| vec![0.0; w.numel()]).collect(),
        Some(loss) => tape::grad(&loss, watched)
            .expect("chunk gradient")
            .into_iter()
            .map(|g| g.data().to_vec())
            .collect(),
    }
}

/// One full training stage over `model`, in place.
pub fn run_stage(
    model: &mut JointFlowMapModel,
    cfg: &StageConfig,
    ctx: &StageContext,
    sink: &mut dyn MetricsSink,
) -> Result<StageSummary> {
    let started = Instant::now();
    let mut data_rng = RngStream::for_stage(ctx.seed, StreamKind::Data, ctx.stage_index);
    let mut probe_rng = RngStream::for_stage(ctx.seed, StreamKind::Probes, ctx.stage_index);
    let mut eval_rng = RngStream::for_stage(ctx.seed, StreamKind::Eval, ctx.stage_index);

    if cfg.has_divergence_losses()
        && cfg.div_source == DivSource::Teacher
        && ctx.teacher.is_none()
    {
        return Err(Error::Config(format!(
            "stage `{}` uses teacher divergence supervision but no teacher is loaded",
            cfg.name
        )));
    }

    let (n_diag, n_pair) = cfg.sub_batch_sizes();
    let lambda = cfg.lambda_div;
    // λ = 0 disables divergence losses entirely: gradients, values, and
    // probe-stream consumption all match a run without them.
    let div_active = lambda != 0.0 && cfg.has_divergence_losses();

    let hyper = AdamHyper {
        learning_rate: cfg.base_lr,
        ..Default::default()
    };
    let mut adam = AdamState::new(&model.params, hyper);

    let mut ema: Option<Vec<Vec<f64>>> = if cfg.ema_rate > 0.0 {
        Some(model.params.iter().map(|p| p.data().to_vec()).collect())
    } else {
        None
    };

    let heldout = cfg
        .early_stop
        .as_ref()
        .map(|es| ctx.density.sample(&mut eval_rng, es.n_samples));
    let mut best: Option<(u64, f64, Vec<f64>)> = None;

    let mut skipped = 0u64;
    let max_skipped = (cfg.iterations / 100).max(1);
    let mut last_terms = LossTerms::zero(lambda);

    for step in 0..cfg.iterations {
        adam.hyper.learning_rate = lr_schedule(step, cfg.base_lr, cfg.decay_start);

        // Batch assembly and probe draws: single-threaded, fixed order.
        let diag_batch = (n_diag > 0).then(|| {
            make_interpolant_batch(&mut data_rng, ctx.density, n_diag, TimeScheme::Uniform)
        });
        let pair_batch = (n_pair > 0).then(|| {
            make_interpolant_batch(&mut data_rng, ctx.density, n_pair, cfg.pair_time_scheme)
        });

        let teacher_diag = ctx.teacher.map(Diagonal);
        let self_diag = Diagonal(&*model);
        let source: &dyn VelocityField = match cfg.div_source {
            DivSource::Teacher => teacher_diag
                .as_ref()
                .map(|d| d as &dyn VelocityField)
                .unwrap_or(&self_diag),
            DivSource::SelfDiagonal => &self_diag,
        };

        // Full-batch divergence targets (consumes the probe stream).
        let diag_div_target: Option<Vec<f64>> = match (&diag_batch, div_active) {
            (Some(batch), true) if cfg.diag_losses.contains(&LossKind::DivMatch) => {
                let (_, div) =
                    divergence(source, &batch.x_t, &batch.t, cfg.trace, Some(&mut probe_rng));
                Some(div.iter().map(|v| -v).collect())
            }
            _ => None,
        };
        let pair_mf_div: Option<Vec<f64>> = match (&pair_batch, div_active) {
            (Some(batch), true) if cfg.pair_losses.contains(&LossKind::MeanFlowDiv) => {
                let (_, div) =
                    divergence(source, &batch.x_t, &batch.t, cfg.trace, Some(&mut probe_rng));
                Some(div)
            }
            _ => None,
        };
        let pair_lagrangian: Option<Vec<f64>> = match (&pair_batch, div_active) {
            (Some(batch), true) if cfg.pair_losses.contains(&LossKind::LagrangianDiv) => {
                let target = crate::losses::lagrangian_div_target(
                    &*model,
                    batch,
                    cfg.trace,
                    Some(&mut probe_rng),
                );
                Some(target.data().to_vec())
            }
            _ => None,
        };

        // Chunk tasks in deterministic order: diag chunks then pair chunks.
        let mut tasks: Vec<ChunkTask> = Vec::new();
        if let Some(batch) = &diag_batch {
            for (lo, hi) in split_ranges(batch.len()) {
                tasks.push(ChunkTask::Diag {
                    batch: batch.slice_rows(lo, hi),
                    div_target: diag_div_target.as_ref().map(|v| v[lo..hi].to_vec()),
                });
            }
        }
        if let Some(batch) = &pair_batch {
            for (lo, hi) in split_ranges(batch.len()) {
                tasks.push(ChunkTask::Pair {
                    batch: batch.slice_rows(lo, hi),
                    mf_div_part: pair_mf_div.as_ref().map(|v| v[lo..hi].to_vec()),
                    lagrangian_target: pair_lagrangian.as_ref().map(|v| v[lo..hi].to_vec()),
                });
            }
        }

        let results: Vec<ChunkResult> = tasks
            .par_iter()
            .map(|task| {
                run_chunk(
                    model,
                    cfg,
                    ctx.teacher,
                    task,
                    n_diag.max(1),
                    n_pair.max(1),
                    lambda,
                    div_active,
                )
            })
            .collect();

        // Fixed-order reduction.
        let mut grad_acc: Vec<Vec<f64>> =
            model.params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let mut sums = PartialSums {
            vm: 0.0,
            u_sc: 0.0,
            div: 0.0,
            d_sc: 0.0,
        };
        for r in results {
            for (acc, g) in grad_acc.iter_mut().zip(r.grads.iter()) {
                for (a, v) in acc.iter_mut().zip(g.iter()) {
                    *a += v;
                }
            }
            sums.vm += r.sums.vm;
            sums.u_sc += r.sums.u_sc;
            sums.div += r.sums.div;
            sums.d_sc += r.sums.d_sc;
        }

        // vm comes from the diag sub-batch, or from the pair sub-batch when
        // the mean-velocity loss plays that role.
        let vm_n = if diag_batch.is_some() { n_diag } else { n_pair };
        let div_n = if diag_div_target.is_some() { n_diag } else { n_pair };
        let terms = LossTerms {
            vm: sums.vm / vm_n.max(1) as f64,
            u_sc: sums.u_sc / n_pair.max(1) as f64,
            div: sums.div / div_n.max(1) as f64,
            d_sc: sums.d_sc / n_pair.max(1) as f64,
            lambda_div: lambda,
        };
        last_terms = terms;

        let grad_norm = grad_acc
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();

        let mut skip = !terms.is_finite() || !grad_norm.is_finite();
        if !skip {
            let grads: Vec<Tensor> = grad_acc
                .iter()
                .zip(model.params.iter())
                .map(|(g, p)| Tensor::from_vec(p.shape().to_vec(), g.clone()))
                .collect();
            match adam_step(&mut model.params, &grads, &mut adam) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => skip = true,
                Err(e) => return Err(e),
            }
        }
        if skip {
            skipped += 1;
            if skipped > max_skipped {
                return Err(Error::TrainingAbort {
                    stage: cfg.name.clone(),
                    step: step as usize,
                    reason: format!("{skipped} steps skipped (non-finite loss or gradients)"),
                });
            }
        }

        if let Some(shadow) = &mut ema {
            for (s, p) in shadow.iter_mut().zip(model.params.iter()) {
                for (sv, pv) in s.iter_mut().zip(p.data().iter()) {
                    *sv = cfg.ema_rate * *sv + (1.0 - cfg.ema_rate) * pv;
                }
            }
        }

        if step % cfg.log_interval == 0 || step + 1 == cfg.iterations {
            sink.log(&MetricsRow {
                stage: &cfg.name,
                step,
                terms,
                lr: adam.hyper.learning_rate,
                grad_norm,
            })?;
        }

        if let (Some(es), Some(points)) = (&cfg.early_stop, &heldout) {
            if (step + 1) % es.interval == 0 || step + 1 == cfg.iterations {
                let err = heldout_error(model, ctx.density, points, &es.k_values)?;
                if best.as_ref().is_none_or(|(_, b, _)| err < *b) {
                    best = Some((step + 1, err, model.params_flat()));
                }
            }
        }
    }

    // EMA shadow becomes the stage output when enabled; early stopping then
    // restores the best checkpoint seen (mutually exclusive in practice).
    if let Some(shadow) = ema {
        let flat: Vec<f64> = shadow.into_iter().flatten().collect();
        model.set_params_flat(&flat);
    }
    if let Some((_, _, params)) = &best {
        model.set_params_flat(params);
    }

    Ok(StageSummary {
        name: cfg.name.clone(),
        iterations: cfg.iterations,
        skipped_steps: skipped,
        final_terms: last_terms,
        best_eval: best.map(|(s, e, _)| (s, e)),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Worst-K mean absolute NLL error on held-out points.
fn heldout_error(
    model: &JointFlowMapModel,
    density: &Density2D,
    points: &Tensor,
    k_values: &[usize],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for &k in k_values {
        let eval = FewStepEval { map: model, k };
        let summary = nll_calibration_on(&eval, density, points)?;
        worst = worst.max(summary.mean_abs_error_vs_analytic);
    }
    Ok(worst)
}

// ── full-plan orchestration ──────────────────────────────────────────

#[derive(Debug)]
pub struct TrainOutputs {
    /// Stage name → trained model snapshot.
    pub stage_models: Vec<(String, JointFlowMapModel)>,
    pub summaries: Vec<StageSummary>,
    pub metrics_path: PathBuf,
}

impl TrainOutputs {
    pub fn model(&self, stage: &str) -> Option<&JointFlowMapModel> {
        self.stage_models
            .iter()
            .find(|(n, _)| n == stage)
            .map(|(_, m)| m)
    }

    pub fn final_model(&self) -> &JointFlowMapModel {
        &self.stage_models.last().expect("at least one stage").1
    }
}

/// Resolve a stage reference: the name of an earlier stage, or a checkpoint
/// path on disk.
fn resolve_source(
    reference: &str,
    outputs: &TrainOutputs,
    expected: &crate::model::ModelConfig,
) -> Result<JointFlowMapModel> {
    if let Some(m) = outputs.model(reference) {
        return Ok(m.clone());
    }
    let path = Path::new(reference);
    if path.exists() {
        return Ok(checkpoint::load_expecting(path, expected)?.model);
    }
    Err(Error::Config(format!(
        "`{reference}` is neither a completed stage nor a checkpoint path"
    )))
}

/// Run every stage of the config in order, writing metrics, checkpoints,
/// and stage summaries under `out_dir`.
pub fn run_training(config: &RunConfig, out_dir: &Path) -> Result<TrainOutputs> {
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = CsvMetrics::create(&metrics_path)?;

    let mut init_rng = RngStream::new(config.seed, StreamKind::Init);
    let mut model = JointFlowMapModel::init(config.model.clone(), &mut init_rng);

    let mut outputs = TrainOutputs {
        stage_models: Vec::new(),
        summaries: Vec::new(),
        metrics_path: metrics_path.clone(),
    };

    for (i, stage) in config.stages.iter().enumerate() {
        if let Some(reference) = &stage.warm_start {
            model = resolve_source(reference, &outputs, &config.model)?;
        }
        let teacher = match &stage.teacher {
            Some(reference) => Some(resolve_source(reference, &outputs, &config.model)?),
            None => None,
        };
        let ctx = StageContext {
            density: &config.density,
            teacher: teacher.as_ref(),
            seed: config.seed,
            stage_index: i as u32,
        };
        let summary = run_stage(&mut model, stage, &ctx, &mut metrics)?;
        metrics.flush()?;

        let data_state = RngStream::for_stage(config.seed, StreamKind::Data, i as u32).state();
        checkpoint::save(
            &out_dir.join(format!("checkpoints/{}.ckpt", stage.name)),
            &model,
            &stage.name,
            stage.iterations,
            &[data_state],
            None,
        )?;
        let summary_json = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Config(format!("summary encode: {e}")))?;
        std::fs::write(
            out_dir.join(format!("{}_summary.json", stage.name)),
            summary_json,
        )?;

        outputs.stage_models.push((stage.name.clone(), model.clone()));
        outputs.summaries.push(summary);
    }
    metrics.flush()?;
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EarlyStopConfig;

    struct VecMetrics(Vec<(u64, LossTerms)>);
    impl MetricsSink for VecMetrics {
        fn log(&mut self, row: &MetricsRow) -> Result<()> {
            self.0.push((row.step, row.terms));
            Ok(())
        }
    }

    fn fm_stage(name: &str, iterations: u64) -> StageConfig {
        StageConfig {
            name: name.into(),
            iterations,
            batch_size: 128,
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
            trace: crate::model::TraceMode::Exact,
            div_source: DivSource::SelfDiagonal,
            early_stop: None,
            ema_rate: 0.0,
            log_interval: 10,
        }
    }

    fn tiny_model(seed: u64) -> JointFlowMapModel {
        let cfg = crate::model::ModelConfig {
            hidden_width: 32,
            hidden_layers: 2,
            div_head_hidden: 8,
            ..Default::default()
        };
        let mut rng = RngStream::new(seed, StreamKind::Init);
        JointFlowMapModel::init(cfg, &mut rng)
    }

    #[test]
    fn zero_iteration_stage_returns_params_unchanged() {
        let mut model = tiny_model(1);
        let before = model.params_flat();
        let cfg = fm_stage("noop", 0);
        let density = Density2D::Checkerboard;
        let ctx = StageContext {
            density: &density,
            teacher: None,
            seed: 5,
            stage_index: 0,
        };
        let summary = run_stage(&mut model, &cfg, &ctx, &mut NullMetrics).unwrap();
        assert_eq!(model.params_flat(), before);
        assert_eq!(summary.skipped_steps, 0);
    }

    #[test]
    fn split_ratio_allocates_three_to_one() {
        let mut cfg = fm_stage("split", 1);
        cfg.batch_size = 512;
        cfg.split = (3, 1);
        cfg.pair_losses = vec![LossKind::ShortcutConsistency];
        assert_eq!(cfg.sub_batch_sizes(), (384, 128));
    }

    #[test]
    fn flow_matching_loss_decreases_on_checkerboard() {
        let mut model = tiny_model(2);
        let mut cfg = fm_stage("teacher", 600);
        cfg.log_interval = 1;
        let density = Density2D::Checkerboard;
        let ctx = StageContext {
            density: &density,
            teacher: None,
            seed: 11,
            stage_index: 0,
        };
        let mut sink = VecMetrics(Vec::new());
        run_stage(&mut model, &cfg, &ctx, &mut sink).unwrap();
        // 100-step moving averages of the total loss, strictly decreasing.
        let totals: Vec<f64> = sink.0.iter().map(|(_, t)| t.total()).collect();
        let avg = |range: std::ops::Range<usize>| {
            totals[range.clone()].iter().sum::<f64>() / range.len() as f64
        };
        let first = avg(0..100);
        let mid = avg(250..350);
        let last = avg(500..600);
        assert!(first > mid && mid > last, "{first} {mid} {last}");
    }

    #[test]
    fn lambda_zero_matches_plain_shortcut_trajectory() {
        // Teacher for both runs.
        let mut teacher = tiny_model(3);
        let density = Density2D::Checkerboard;
        let tcfg = fm_stage("teacher", 150);
        let ctx0 = StageContext {
            density: &density,
            teacher: None,
            seed: 21,
            stage_index: 0,
        };
        run_stage(&mut teacher, &tcfg, &ctx0, &mut NullMetrics).unwrap();

        let make_stage = |joint: bool| {
            let mut cfg = fm_stage("distill", 60);
            cfg.batch_size = 128;
            cfg.split = (3, 1);
            cfg.teacher = Some("teacher".into());
            cfg.pair_losses = if joint {
                vec![LossKind::ShortcutConsistency, LossKind::DivConsistency]
            } else {
                vec![LossKind::ShortcutConsistency]
            };
            if joint {
                cfg.diag_losses = vec![LossKind::FlowMatching, LossKind::DivMatch];
                cfg.lambda_div = 0.0;
            }
            cfg
        };

        let run = |cfg: &StageConfig| {
            let mut model = teacher.clone();
            let ctx = StageContext {
                density: &density,
                teacher: Some(&teacher),
                seed: 21,
                stage_index: 1,
            };
            run_stage(&mut model, cfg, &ctx, &mut NullMetrics).unwrap();
            model.params_flat()
        };
        let plain = run(&make_stage(false));
        let joint_zero = run(&make_stage(true));
        for (a, b) in plain.iter().zip(joint_zero.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn early_stopping_keeps_best_checkpoint() {
        let mut model = tiny_model(4);
        let mut cfg = fm_stage("es", 100);
        cfg.early_stop = Some(EarlyStopConfig {
            interval: 25,
            n_samples: 128,
            k_values: vec![1],
        });
        let density = Density2D::Checkerboard;
        let ctx = StageContext {
            density: &density,
            teacher: None,
            seed: 31,
            stage_index: 0,
        };
        let summary = run_stage(&mut model, &cfg, &ctx, &mut NullMetrics).unwrap();
        let (best_step, best_err) = summary.best_eval.unwrap();
        assert!(best_step >= 25 && best_step <= 100);
        assert!(best_err.is_finite());
    }

    #[test]
    fn run_training_emits_metrics_checkpoints_and_summaries() {
        let dir = tempfile::tempdir().unwrap();
        let toml = r#"
seed = 9

[density]
kind = "checkerboard"

[model]
dim = 2
hidden_width = 16
hidden_layers = 2
activation = "gelu"
div_head_hidden = 8
time_embed = "raw"
div_scale = 1.0
zero_init_heads = true

[[stages]]
name = "teacher"
iterations = 30
batch_size = 64
diag_losses = ["flow-matching"]
base_lr = 1e-3
log_interval = 10

[[stages]]
name = "joint"
iterations = 20
batch_size = 64
split = [3, 1]
diag_losses = ["flow-matching", "div-match"]
pair_losses = ["shortcut-consistency", "div-consistency"]
teacher = "teacher"
warm_start = "teacher"
base_lr = 1e-3
log_interval = 10
"#;
        let config = RunConfig::from_toml(toml).unwrap();
        let out = run_training(&config, dir.path()).unwrap();
        assert_eq!(out.summaries.len(), 2);
        assert!(dir.path().join("metrics.csv").exists());
        assert!(dir.path().join("checkpoints/teacher.ckpt").exists());
        assert!(dir.path().join("checkpoints/joint.ckpt").exists());
        assert!(dir.path().join("teacher_summary.json").exists());

        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("stage,step,"));
        assert!(metrics.contains("joint,"));
    }

    #[test]
    fn identical_seed_and_config_give_byte_identical_metrics() {
        let toml = r#"
seed = 40

[density]
kind = "checkerboard"

[model]
dim = 2
hidden_width = 16
hidden_layers = 2
activation = "gelu"
div_head_hidden = 8
time_embed = "raw"
div_scale = 1.0
zero_init_heads = true

[[stages]]
name = "t"
iterations = 40
batch_size = 320
diag_losses = ["flow-matching"]
base_lr = 1e-3
log_interval = 5
"#;
        let config = RunConfig::from_toml(toml).unwrap();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            run_training(&config, dir.path()).unwrap();
            std::fs::read(dir.path().join("metrics.csv")).unwrap()
        };
        assert_eq!(run(), run());
    }
}
