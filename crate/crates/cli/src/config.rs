//! Versioned TOML experiment configuration.
//!
//! Every table rejects unknown keys. Omitted keys take the defaults below.

use std::path::{Path, PathBuf};

use kvevict::scoring::{Policy, PolicyConfig};
use kvevict::StackShape;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Fidelity,
    Crs,
    Needle,
    Retention,
    Ablation,
    Selftest,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fidelity => "fidelity",
            Experiment::Crs => "crs",
            Experiment::Needle => "needle",
            Experiment::Retention => "retention",
            Experiment::Ablation => "ablation",
            Experiment::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    #[default]
    Attention,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            kv_heads: 4,
            head_dim: 16,
            seq_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self) -> Result<StackShape, CliError> {
        Ok(StackShape::new(self.layers, self.heads, self.kv_heads, self.head_dim)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrsConfig {
    pub trials: usize,
    /// Log-normal spread of per-column scales of `A`; 0 keeps plain normals.
    pub spread: f64,
}

impl Default for CrsConfig {
    fn default() -> Self {
        CrsConfig {
            trials: 500,
            spread: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleConfig {
    pub seq_len: usize,
    pub window: usize,
    pub budget: usize,
    pub needle_pos: usize,
    pub kernel: usize,
    pub degenerate: bool,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        NeedleConfig {
            seq_len: 128,
            window: 16,
            budget: 32,
            needle_pos: 37,
            kernel: 7,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetentionConfig {
    pub inputs: usize,
    /// Log-normal spread of per-token prompt scales.
    pub spread: f64,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        RetentionConfig { inputs: 8, spread: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub window: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { window: 32 }
    }
}

fn default_policies() -> Vec<PolicyConfig> {
    vec![PolicyConfig::new(Policy::Laprox), PolicyConfig::new(Policy::Snapkv)]
}

fn default_budgets() -> Vec<usize> {
    vec![64]
}

fn default_trials() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// When present it must match the subcommand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// First seed; trials use `seed, seed + 1, ...`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyConfig>,
    /// Per-head budgets, window included.
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
    #[serde(default)]
    pub site: Site,
    #[serde(default)]
    pub crs: CrsConfig,
    #[serde(default)]
    pub needle: NeedleConfig,
    #[serde(default)]
    pub retention: RetentionConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: SCHEMA_VERSION,
            experiment: None,
            output_dir: None,
            seed: 0,
            trials: default_trials(),
            model: ModelConfig::default(),
            policies: default_policies(),
            budgets: default_budgets(),
            site: Site::default(),
            crs: CrsConfig::default(),
            needle: NeedleConfig::default(),
            retention: RetentionConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        if cfg.version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "{}: unsupported schema version {} (expected {SCHEMA_VERSION})",
                origin.display(),
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.trials as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Keeps only the named policies, in config order.
    pub fn filter_policies(&mut self, names: &[Policy]) -> Result<(), CliError> {
        self.policies.retain(|p| names.contains(&p.policy));
        if self.policies.is_empty() {
            return Err(CliError::Config("policy filter leaves no configured policy".into()));
        }
        Ok(())
    }

    /// Checks cross-field constraints of the experiment about to run.
    pub fn validate_for(&self, experiment: Experiment) -> Result<(), CliError> {
        if let Some(e) = self.experiment {
            if e != experiment {
                return Err(CliError::Config(format!(
                    "config is for the {} experiment, not {}",
                    e.name(),
                    experiment.name()
                )));
            }
        }
        let needs_model = matches!(
            experiment,
            Experiment::Fidelity | Experiment::Retention | Experiment::Ablation
        );
        if needs_model {
            self.model.shape()?;
            if self.model.seq_len == 0 {
                return Err(CliError::Config("model.seq_len must be positive".into()));
            }
            if self.budgets.is_empty() {
                return Err(CliError::Config("budgets must not be empty".into()));
            }
        }
        if matches!(experiment, Experiment::Fidelity | Experiment::Ablation) && self.trials == 0 {
            return Err(CliError::Config("trials must be positive".into()));
        }
        if matches!(experiment, Experiment::Fidelity | Experiment::Retention) {
            if self.policies.is_empty() {
                return Err(CliError::Config("policies must not be empty".into()));
            }
            for p in &self.policies {
                p.validate()?;
                for &b in &self.budgets {
                    check_budget(p, b, self.model.seq_len)?;
                }
            }
        }
        if experiment == Experiment::Ablation {
            for &b in &self.budgets {
                check_budget(
                    &PolicyConfig::new(Policy::Laprox).with_window(self.ablation.window),
                    b,
                    self.model.seq_len,
                )?;
            }
        }
        if experiment == Experiment::Retention && self.retention.inputs < 2 {
            return Err(CliError::Config("retention.inputs must be at least 2".into()));
        }
        if experiment == Experiment::Crs && self.crs.trials == 0 {
            return Err(CliError::Config("crs.trials must be positive".into()));
        }
        Ok(())
    }
}

fn check_budget(p: &PolicyConfig, budget: usize, seq_len: usize) -> Result<(), CliError> {
    let window = p.window.min(seq_len);
    let floor = if p.policy == Policy::Sllm {
        p.sink_count + 1
    } else {
        window.max(1)
    };
    if budget < floor {
        return Err(CliError::Parameter(format!(
            "budget {budget} is below the minimum {floor} for policy {} (window {})",
            p.policy, p.window
        )));
    }
    Ok(())
}
