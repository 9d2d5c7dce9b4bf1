//! Run configuration: a single TOML document describing the density, model
//! architecture, staged training plan, and evaluation settings. The seed
//! fully determines every random stream in the run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::{Density2D, TimeScheme};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{ModelConfig, TraceMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivSource {
    /// div of the model's own diagonal u(·,t,t).
    SelfDiagonal,
    /// div of the frozen teacher's velocity.
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopConfig {
    /// Evaluate every this many steps (and at the end).
    pub interval: u64,
    /// Held-out sample count for the NLL-error monitor.
    pub n_samples: usize,
    /// Few-step K values monitored; the worst one drives the decision.
    pub k_values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub iterations: u64,
    pub batch_size: usize,
    /// diag : pair batch split, e.g. [3, 1].
    #[serde(default = "default_split")]
    pub split: (u32, u32),
    /// Losses on the diagonal (s = t) sub-batch.
    #[serde(default)]
    pub diag_losses: Vec<LossKind>,
    /// Losses on the (t < s) pair sub-batch.
    #[serde(default)]
    pub pair_losses: Vec<LossKind>,
    #[serde(default = "default_pair_scheme")]
    pub pair_time_scheme: TimeScheme,
    /// Train the consistency losses on both interval orientations (half the
    /// pair sub-batch each). Backward-in-time jumps are what likelihood
    /// evaluation performs, so covering them in training keeps those inputs
    /// on-distribution.
    #[serde(default)]
    pub bidirectional_pairs: bool,
    /// Earlier stage (or checkpoint path) providing the frozen teacher.
    #[serde(default)]
    pub teacher: Option<String>,
    /// Earlier stage (or checkpoint path) whose parameters warm-start this
    /// stage. Defaults to continuing from the previous stage's output only
    /// when set explicitly.
    #[serde(default)]
    pub warm_start: Option<String>,
    pub base_lr: f64,
    /// Square-root lr decay begins after this step; 0 disables decay.
    #[serde(default)]
    pub decay_start: u64,
    #[serde(default = "default_one")]
    pub lambda_div: f64,
    #[serde(default = "default_trace")]
    pub trace: TraceMode,
    #[serde(default = "default_div_source")]
    pub div_source: DivSource,
    #[serde(default)]
    pub early_stop: Option<EarlyStopConfig>,
    /// EMA rate for a parameter shadow; 0 disables (the default).
    #[serde(default)]
    pub ema_rate: f64,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
}

fn default_split() -> (u32, u32) {
    (3, 1)
}
fn default_pair_scheme() -> TimeScheme {
    TimeScheme::DyadicGrid
}
fn default_one() -> f64 {
    1.0
}
fn default_trace() -> TraceMode {
    TraceMode::Exact
}
fn default_div_source() -> DivSource {
    DivSource::Teacher
}
fn default_log_interval() -> u64 {
    100
}

impl StageConfig {
    pub fn has_divergence_losses(&self) -> bool {
        self.diag_losses
            .iter()
            .chain(self.pair_losses.iter())
            .any(|l| l.is_divergence())
    }

    /// (diag, pair) sub-batch sizes implied by the split ratio.
    pub fn sub_batch_sizes(&self) -> (usize, usize) {
        if self.diag_losses.is_empty() {
            return (0, self.batch_size);
        }
        if self.pair_losses.is_empty() {
            return (self.batch_size, 0);
        }
        let (a, b) = self.split;
        let n_diag = self.batch_size * a as usize / (a + b) as usize;
        (n_diag, self.batch_size - n_diag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k_list")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_grid_resolution")]
    pub grid_resolution: usize,
    #[serde(default = "default_eval_samples")]
    pub n_samples: usize,
    /// Steps for the reference integrator used in comparisons.
    #[serde(default = "default_ref_steps")]
    pub reference_steps: usize,
}

fn default_k_list() -> Vec<usize> {
    vec![1, 2, 4, 8]
}
fn default_grid_resolution() -> usize {
    128
}
fn default_eval_samples() -> usize {
    10_000
}
fn default_ref_steps() -> usize {
    200
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_values: default_k_list(),
            grid_resolution: default_grid_resolution(),
            n_samples: default_eval_samples(),
            reference_steps: default_ref_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    #[serde(default = "default_guidance_steps")]
    pub steps: usize,
    /// Guidance learning rate; when absent, picked from k_samp
    /// (1e-3 for one-step sampling, 5e-3 otherwise).
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_k_samp")]
    pub k_samp: usize,
    #[serde(default = "default_guidance_samples")]
    pub n_samples: usize,
}

fn default_guidance_steps() -> usize {
    1
}
fn default_k_samp() -> usize {
    2
}
fn default_guidance_samples() -> usize {
    1024
}

impl GuidanceSection {
    pub fn effective_lr(&self) -> f64 {
        self.lr
            .unwrap_or(if self.k_samp == 1 { 1e-3 } else { 5e-3 })
    }
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            steps: default_guidance_steps(),
            lr: None,
            k_samp: default_k_samp(),
            n_samples: default_guidance_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub density: Density2D,
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub guidance: GuidanceSection,
}

impl RunConfig {
    /// Parse and validate. TOML errors keep their line/column anchors.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        let mut seen: Vec<&str> = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let at = format!("stage[{i}] `{}`", stage.name);
            if seen.contains(&stage.name.as_str()) {
                return Err(Error::Config(format!("{at}: duplicate stage name")));
            }
            if stage.batch_size == 0 {
                return Err(Error::Config(format!("{at}: batch_size must be positive")));
            }
            if stage.base_lr <= 0.0 {
                return Err(Error::Config(format!("{at}: base_lr must be positive")));
            }
            if stage.split == (0, 0) {
                return Err(Error::Config(format!("{at}: split cannot be 0:0")));
            }
            if stage.diag_losses.is_empty() && stage.pair_losses.is_empty() {
                return Err(Error::Config(format!("{at}: no losses configured")));
            }
            let (n_diag, n_pair) = stage.sub_batch_sizes();
            if !stage.diag_losses.is_empty() && n_diag == 0 {
                return Err(Error::Config(format!(
                    "{at}: split allocates no diagonal samples"
                )));
            }
            if !stage.pair_losses.is_empty() && n_pair == 0 {
                return Err(Error::Config(format!(
                    "{at}: split allocates no pair samples"
                )));
            }
            for l in stage.diag_losses.iter() {
                if matches!(
                    l,
                    LossKind::ShortcutConsistency
                        | LossKind::DivConsistency
                        | LossKind::MeanFlow
                        | LossKind::MeanFlowDiv
                        | LossKind::LagrangianDiv
                ) {
                    return Err(Error::Config(format!(
                        "{at}: {l:?} requires the pair sub-batch"
                    )));
                }
            }
            for l in stage.pair_losses.iter() {
                if matches!(l, LossKind::FlowMatching | LossKind::DivMatch) {
                    return Err(Error::Config(format!(
                        "{at}: {l:?} belongs on the diagonal sub-batch"
                    )));
                }
            }
            if stage.has_divergence_losses()
                && stage.div_source == DivSource::Teacher
                && stage.teacher.is_none()
            {
                return Err(Error::Config(format!(
                    "{at}: divergence losses with div_source = teacher need a teacher"
                )));
            }
            // Stage references must point to earlier stages or existing files.
            for (field, reference) in [
                ("teacher", &stage.teacher),
                ("warm_start", &stage.warm_start),
            ] {
                if let Some(r) = reference {
                    let is_earlier_stage = seen.contains(&r.as_str());
                    if !is_earlier_stage && !Path::new(r).exists() {
                        return Err(Error::Config(format!(
                            "{at}: {field} `{r}` is neither an earlier stage nor an existing checkpoint path"
                        )));
                    }
                }
            }
            if let Some(es) = &stage.early_stop {
                if es.interval == 0 || es.n_samples == 0 || es.k_values.is_empty() {
                    return Err(Error::Config(format!(
                        "{at}: early_stop needs interval > 0, samples > 0 and k_values"
                    )));
                }
            }
            if !(0.0..1.0).contains(&stage.ema_rate) && stage.ema_rate != 0.0 {
                return Err(Error::Config(format!(
                    "{at}: ema_rate must be 0 (off) or in (0, 1)"
                )));
            }
            seen.push(&stage.name);
        }
        if self.eval.k_values.is_empty() {
            return Err(Error::Config("eval.k_values cannot be empty".into()));
        }
        if self.model.dim != self.density.dim() {
            return Err(Error::Config(format!(
                "model dim {} does not match density dim {}",
                self.model.dim,
                self.density.dim()
            )));
        }
        Ok(())
    }
}
