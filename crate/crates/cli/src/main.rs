//! Command-line front end: staged training, likelihood evaluation, guided
//! sampling, and the acceptance suite.
//!
//! Exit codes: 0 success; 1 runtime failure (training abort, I/O, failed
//! acceptance criteria); 2 invalid configuration, checkpoint, or usage.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowmap_core::acceptance;
use flowmap_core::checkpoint;
use flowmap_core::config::RunConfig;
use flowmap_core::error::Error as CoreError;
use flowmap_core::metrics::{density_grid, nll_calibration_on, FewStepEval};
use flowmap_core::model::JointFlowMapModel;
use flowmap_core::rng::{RngStream, StreamKind};
use flowmap_core::sampling::{
    euler_sample, likelihood_fewstep_batch, self_guided_sample, GuidanceConfig,
};
use flowmap_core::train::run_training;

#[derive(Parser)]
#[command(name = "flowmap", version, about = "Flow-map models on 2D synthetic densities: few-step sampling and likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the staged training pipeline, writing checkpoints and metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate few-step likelihood calibration and density grids.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Euler step counts, comma-separated (default from config).
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Maximum-likelihood self-guided sampling.
    Guide {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of Adam updates on the initial noise.
        #[arg(long)]
        guidance_steps: Option<usize>,
        /// Learning rate for the noise updates.
        #[arg(long)]
        guidance_lr: Option<f64>,
    },
    /// Run the acceptance suite (trains the configured pipeline).
    Acceptance {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CoreError> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_model(config: &RunConfig, path: &Path) -> Result<JointFlowMapModel, CoreError> {
    Ok(checkpoint::load_expecting(path, &config.model)?.model)
}

fn write_samples_csv(path: &Path, samples: &flowmap_core::Tensor) -> std::io::Result<()> {
    let (n, d) = samples.dims2();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", (0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(","))?;
    for r in 0..n {
        let row: Vec<String> = (0..d)
            .map(|c| format!("{:e}", samples.data()[r * d + c]))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}

fn cmd_train(common: &CommonArgs) -> Result<(), CoreError> {
    let config = load_config(common)?;
    let outputs = run_training(&config, &common.out)?;
    for summary in &outputs.summaries {
        eprintln!(
            "stage `{}`: {} iterations, {} skipped, final loss {:.4e}, {:.1}s",
            summary.name,
            summary.iterations,
            summary.skipped_steps,
            summary.final_terms.total(),
            summary.wall_clock_secs
        );
    }
    eprintln!("metrics: {}", outputs.metrics_path.display());
    Ok(())
}

fn cmd_eval(
    common: &CommonArgs,
    checkpoint_path: &Path,
    k_override: &[usize],
) -> Result<(), CoreError> {
    let config = load_config(common)?;
    let model = load_model(&config, checkpoint_path)?;
    std::fs::create_dir_all(&common.out)?;

    let k_values: Vec<usize> = if k_override.is_empty() {
        config.eval.k_values.clone()
    } else {
        k_override.to_vec()
    };
    let mut rng = RngStream::new(config.seed, StreamKind::Eval);
    let samples = config.density.sample(&mut rng, config.eval.n_samples);

    for &k in &k_values {
        let eval = FewStepEval { map: &model, k };
        let summary = nll_calibration_on(&eval, &config.density, &samples)?;
        let path = common.out.join(format!("eval_k{k}_summary.json"));
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&summary)
                .map_err(|e| CoreError::Config(format!("summary encode: {e}")))?,
        )?;
        eprintln!(
            "K={k}: mean NLL {:.4} nats, err vs analytic {:.4} nats → {}",
            summary.mean_nll,
            summary.mean_abs_error_vs_analytic,
            path.display()
        );

        let grid = density_grid(&eval, (-4.0, 4.0), config.eval.grid_resolution)?;
        let grid_path = common.out.join(format!("eval_k{k}_grid.csv"));
        let mut out = std::io::BufWriter::new(std::fs::File::create(&grid_path)?);
        writeln!(out, "x,y,logp")?;
        for gp in &grid {
            writeln!(out, "{:e},{:e},{:e}", gp.x, gp.y, gp.logp)?;
        }
        out.flush()?;

        let reports = likelihood_fewstep_batch(&model, &samples, k)?;
        let mut jsonl = std::io::BufWriter::new(std::fs::File::create(
            common.out.join(format!("eval_k{k}_reports.jsonl")),
        )?);
        for report in &reports {
            let line = serde_json::to_string(report)
                .map_err(|e| CoreError::Config(format!("report encode: {e}")))?;
            writeln!(jsonl, "{line}")?;
        }
        jsonl.flush()?;
    }
    Ok(())
}

fn cmd_guide(
    common: &CommonArgs,
    checkpoint_path: &Path,
    steps: Option<usize>,
    lr: Option<f64>,
) -> Result<(), CoreError> {
    let config = load_config(common)?;
    let model = load_model(&config, checkpoint_path)?;
    std::fs::create_dir_all(&common.out)?;

    let gcfg = GuidanceConfig {
        steps: steps.unwrap_or(config.guidance.steps),
        lr: lr.unwrap_or_else(|| config.guidance.effective_lr()),
        k_samp: config.guidance.k_samp,
    };
    let n = config.guidance.n_samples;
    let mut rng = RngStream::new(config.seed, StreamKind::Guidance);
    let outcome = self_guided_sample(&model, &mut rng, &gcfg, n)?;
    let unguided = euler_sample(&model, &outcome.x0_initial, gcfg.k_samp)?
        .pop()
        .unwrap();

    write_samples_csv(&common.out.join("guided_samples.csv"), &outcome.samples)?;
    write_samples_csv(&common.out.join("unguided_samples.csv"), &unguided)?;

    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(
        common.out.join("guidance_traces.jsonl"),
    )?);
    for trace in &outcome.traces {
        let line = serde_json::to_string(&serde_json::json!({ "surrogate_nll": trace }))
            .map_err(|e| CoreError::Config(format!("trace encode: {e}")))?;
        writeln!(jsonl, "{line}")?;
    }
    jsonl.flush()?;
    eprintln!(
        "wrote {n} guided/unguided samples and traces to {}",
        common.out.display()
    );
    Ok(())
}

fn cmd_acceptance(common: &CommonArgs) -> Result<bool, CoreError> {
    let config = load_config(common)?;
    let outcomes = acceptance::run_all(&config, &common.out)?;
    let mut all_passed = true;
    for outcome in &outcomes {
        println!("{}", outcome.line());
        all_passed &= outcome.passed;
    }
    Ok(all_passed)
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_)
        | CoreError::Checkpoint(_)
        | CoreError::Contract(_)
        | CoreError::ShapeMismatch { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<bool, CoreError> = match &cli.command {
        Command::Train { common } => cmd_train(common).map(|_| true),
        Command::Eval {
            common,
            checkpoint,
            k,
        } => cmd_eval(common, checkpoint, k).map(|_| true),
        Command::Guide {
            common,
            checkpoint,
            guidance_steps,
            guidance_lr,
        } => cmd_guide(common, checkpoint, *guidance_steps, *guidance_lr).map(|_| true),
        Command::Acceptance { common } => cmd_acceptance(common),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
