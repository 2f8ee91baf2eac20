//! TOML experiment configs. Every table rejects unknown keys so a typo
//! fails the run instead of silently falling back to a default.
//!
//! Desk defaults: ten scaling epochs, lambda 0.1, p = 50 with per-layer
//! thresholds, hard extraction. Anything not listed in a file takes the
//! default, so a minimal config is just mode, out_dir, arch and dataset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use splinter_core::arch::{self, ArchSpec};
use splinter_core::continual::ExtractionMode;
use splinter_core::metrics::CombineMode;
use splinter_core::network::InitDist;
use splinter_core::saliency::Scope;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ensemble,
    Cl,
    Single,
    Naive,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ensemble => "ensemble",
            Mode::Cl => "cl",
            Mode::Single => "single",
            Mode::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    Mlp,
    Lenet5,
    HalfVgg11,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub preset: ArchPreset,
    pub input: Vec<usize>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ArchConfig {
    pub fn resolve(&self) -> Result<ArchSpec> {
        let spec = match self.preset {
            ArchPreset::Mlp => {
                if self.input.len() != 1 {
                    return Err(CliError::Usage(format!(
                        "mlp wants a flat input like [2], got {:?}",
                        self.input
                    )));
                }
                if self.hidden.is_empty() {
                    return Err(CliError::Usage("mlp needs at least one hidden width".into()));
                }
                arch::mlp(self.input[0], &self.hidden, self.classes)
            }
            ArchPreset::Lenet5 => arch::lenet5(self.input.clone(), self.classes)?,
            ArchPreset::HalfVgg11 => arch::half_vgg11(self.input.clone(), self.classes)?,
        };
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Gaussians,
    Spirals,
    Idx,
    Csv,
}

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::Gaussians => "gaussians",
            DataKind::Spirals => "spirals",
            DataKind::Idx => "idx",
            DataKind::Csv => "csv",
        }
    }
}

fn default_data_seed() -> u64 {
    7
}
fn default_train_n() -> usize {
    2000
}
fn default_test_n() -> usize {
    500
}
fn default_noise() -> f64 {
    0.02
}
fn default_dims() -> usize {
    2
}
fn default_dev_frac() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DataKind,
    pub classes: usize,
    /// Generator seed for synthetic kinds; independent of the run seed so
    /// reseeding the models keeps the data fixed.
    #[serde(default = "default_data_seed")]
    pub seed: u64,
    #[serde(default = "default_train_n")]
    pub train_n: usize,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Feature count for synthetic kinds: the latent 2-d point is observed
    /// through this many noisy coordinates.
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_dev_frac")]
    pub dev_frac: f64,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub train_csv: Option<PathBuf>,
    #[serde(default)]
    pub test_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeChoice {
    Global,
    PerLayer,
}

impl ScopeChoice {
    pub fn to_scope(self) -> Scope {
        match self {
            ScopeChoice::Global => Scope::Global,
            ScopeChoice::PerLayer => Scope::PerLayer,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScopeChoice::Global => "global",
            ScopeChoice::PerLayer => "per_layer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionChoice {
    Hard,
    Soft,
}

impl ExtractionChoice {
    pub fn to_mode(self) -> ExtractionMode {
        match self {
            ExtractionChoice::Hard => ExtractionMode::Hard,
            ExtractionChoice::Soft => ExtractionMode::Soft,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExtractionChoice::Hard => "hard",
            ExtractionChoice::Soft => "soft",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineChoice {
    AvgSoftmax,
    MajorityVote,
}

impl CombineChoice {
    pub fn to_mode(self) -> CombineMode {
        match self {
            CombineChoice::AvgSoftmax => CombineMode::AvgSoftmax,
            CombineChoice::MajorityVote => CombineMode::MajorityVote,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CombineChoice::AvgSoftmax => "avg_softmax",
            CombineChoice::MajorityVote => "majority_vote",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitChoice {
    Normal,
    Uniform,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub p: f64,
    pub scope: ScopeChoice,
    pub extraction: ExtractionChoice,
    pub lambda: f64,
    pub mask_epochs: usize,
    pub mask_lr: f64,
    pub mask_batch: usize,
    pub scaling_init: InitChoice,
    /// Mean for normal init, lower bound for uniform.
    pub init_a: f64,
    /// Std for normal init, upper bound for uniform.
    pub init_b: f64,
    pub combine: CombineChoice,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 5,
            p: 50.0,
            scope: ScopeChoice::PerLayer,
            extraction: ExtractionChoice::Hard,
            lambda: 0.1,
            mask_epochs: 10,
            mask_lr: 0.01,
            mask_batch: 32,
            scaling_init: InitChoice::Normal,
            init_a: 0.0,
            init_b: 1.0,
            combine: CombineChoice::AvgSoftmax,
        }
    }
}

impl EnsembleConfig {
    pub fn init_dist(&self) -> InitDist {
        match self.scaling_init {
            InitChoice::Normal => InitDist::Normal {
                mean: self.init_a,
                std: self.init_b,
            },
            InitChoice::Uniform => InitDist::Uniform {
                lo: self.init_a,
                hi: self.init_b,
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Epochs without a dev-accuracy improvement before training stops.
    /// Zero disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 0.01,
            momentum: 0.9,
            batch: 32,
            lr_decay: 0.8,
            lr_decay_every: 50,
            patience: 20,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClConfig {
    pub tasks: usize,
}

impl Default for ClConfig {
    fn default() -> Self {
        ClConfig { tasks: 2 }
    }
}

fn default_ece_bins() -> usize {
    15
}
fn default_fgsm_eps() -> f64 {
    0.1
}
fn default_sigmas() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.3, 0.5]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_ece_bins")]
    pub ece_bins: usize,
    #[serde(default = "default_fgsm_eps")]
    pub fgsm_eps: f64,
    #[serde(default = "default_sigmas")]
    pub gaussian_sigmas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ece_bins: default_ece_bins(),
            fgsm_eps: default_fgsm_eps(),
            gaussian_sigmas: default_sigmas(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub arch: ArchConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub cl: ClConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_for_tests(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: "<inline>".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Usage(msg));
        if self.ensemble.members == 0 {
            return bad("ensemble.members must be at least 1".into());
        }
        if !(0.0..100.0).contains(&self.ensemble.p) {
            return bad(format!("ensemble.p must lie in [0, 100), got {}", self.ensemble.p));
        }
        if self.ensemble.lambda < 0.0 {
            return bad(format!("ensemble.lambda must be nonnegative, got {}", self.ensemble.lambda));
        }
        if self.train.epochs == 0 || self.train.batch == 0 {
            return bad("train.epochs and train.batch must be positive".into());
        }
        if !(self.train.lr_decay > 0.0 && self.train.lr_decay <= 1.0) {
            return bad(format!("train.lr_decay must lie in (0, 1], got {}", self.train.lr_decay));
        }
        if self.train.lr_decay_every == 0 {
            return bad("train.lr_decay_every must be positive".into());
        }
        if !(self.dataset.dev_frac > 0.0 && self.dataset.dev_frac < 0.5) {
            return bad(format!(
                "dataset.dev_frac must lie in (0, 0.5), got {}",
                self.dataset.dev_frac
            ));
        }
        if self.dataset.classes < 2 {
            return bad("dataset.classes must be at least 2".into());
        }
        match self.dataset.kind {
            DataKind::Gaussians | DataKind::Spirals => {
                if self.dataset.train_n < 10 || self.dataset.test_n == 0 {
                    return bad("synthetic data wants train_n >= 10 and test_n >= 1".into());
                }
                if self.dataset.noise < 0.0 {
                    return bad("dataset.noise must be nonnegative".into());
                }
                if self.dataset.dims < 2 {
                    return bad("dataset.dims must be at least 2".into());
                }
            }
            DataKind::Idx => {
                for (name, p) in [
                    ("train_images", &self.dataset.train_images),
                    ("train_labels", &self.dataset.train_labels),
                    ("test_images", &self.dataset.test_images),
                    ("test_labels", &self.dataset.test_labels),
                ] {
                    if p.is_none() {
                        return bad(format!("idx data needs dataset.{name}"));
                    }
                }
            }
            DataKind::Csv => {
                if self.dataset.train_csv.is_none() || self.dataset.test_csv.is_none() {
                    return bad("csv data needs dataset.train_csv and dataset.test_csv".into());
                }
            }
        }
        // A naive config may feed either pipeline (deep ensemble or
        // sequential baseline), so its class arithmetic is checked by the
        // command that consumes it.
        match self.mode {
            Mode::Cl => self.validate_task_arithmetic()?,
            Mode::Ensemble | Mode::Single => {
                if self.arch.classes != self.dataset.classes {
                    return bad(format!(
                        "arch.classes = {} but dataset.classes = {}",
                        self.arch.classes, self.dataset.classes
                    ));
                }
            }
            Mode::Naive => {}
        }
        Ok(())
    }

    /// Task-split arithmetic shared by both sequential pipelines.
    pub fn validate_task_arithmetic(&self) -> Result<()> {
        if self.cl.tasks == 0 {
            return Err(CliError::Usage("cl.tasks must be at least 1".into()));
        }
        if self.dataset.classes % self.cl.tasks != 0 {
            return Err(CliError::Usage(format!(
                "{} classes cannot split into {} equal tasks",
                self.dataset.classes, self.cl.tasks
            )));
        }
        let per_task = self.dataset.classes / self.cl.tasks;
        if self.arch.classes != per_task {
            return Err(CliError::Usage(format!(
                "cl heads emit {} classes but {} classes over {} tasks gives {} per task",
                self.arch.classes, self.dataset.classes, self.cl.tasks, per_task
            )));
        }
        Ok(())
    }

    /// True when the configuration degenerates to a plain single model:
    /// one member, nothing pruned, no diversity pressure.
    pub fn is_single_equivalent(&self) -> bool {
        self.mode == Mode::Single
            || (self.ensemble.members == 1 && self.ensemble.p == 0.0 && self.ensemble.lambda == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        mode = "ensemble"
        out_dir = "/tmp/x"

        [arch]
        preset = "mlp"
        input = [2]
        hidden = [16]
        classes = 4

        [dataset]
        kind = "gaussians"
        classes = 4
    "#;

    #[test]
    fn minimal_config_takes_desk_defaults() {
        let cfg = ExperimentConfig::from_str_for_tests(MINIMAL).unwrap();
        assert_eq!(cfg.ensemble.members, 5);
        assert_eq!(cfg.ensemble.p, 50.0);
        assert_eq!(cfg.ensemble.lambda, 0.1);
        assert_eq!(cfg.ensemble.mask_epochs, 10);
        assert_eq!(cfg.ensemble.scope, ScopeChoice::PerLayer);
        assert_eq!(cfg.ensemble.extraction, ExtractionChoice::Hard);
        assert_eq!(cfg.train.patience, 20);
        assert_eq!(cfg.dataset.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("[dataset]", "typo_key = 3\n[dataset]");
        let err = ExperimentConfig::from_str_for_tests(&text).unwrap_err();
        assert!(err.to_string().contains("typo_key"), "got: {err}");
    }

    fn cl_text(arch_classes: usize, data_classes: usize, tasks: usize) -> String {
        format!(
            "mode = \"cl\"\nout_dir = \"/tmp/x\"\n\n[arch]\npreset = \"mlp\"\ninput = [2]\nhidden = [16]\nclasses = {arch_classes}\n\n[dataset]\nkind = \"gaussians\"\nclasses = {data_classes}\n\n[cl]\ntasks = {tasks}\n"
        )
    }

    #[test]
    fn cl_split_must_divide_classes() {
        let err = ExperimentConfig::from_str_for_tests(&cl_text(2, 4, 3)).unwrap_err();
        assert!(err.to_string().contains("equal tasks"), "got: {err}");
    }

    #[test]
    fn cl_head_width_must_match_per_task_classes() {
        let err = ExperimentConfig::from_str_for_tests(&cl_text(4, 4, 2)).unwrap_err();
        assert!(err.to_string().contains("per task"), "got: {err}");
        assert!(ExperimentConfig::from_str_for_tests(&cl_text(2, 4, 2)).is_ok());
    }

    #[test]
    fn single_equivalence_rule() {
        let mut cfg = ExperimentConfig::from_str_for_tests(MINIMAL).unwrap();
        assert!(!cfg.is_single_equivalent());
        cfg.ensemble.members = 1;
        cfg.ensemble.p = 0.0;
        cfg.ensemble.lambda = 0.0;
        assert!(cfg.is_single_equivalent());
    }

    #[test]
    fn out_of_range_percentile_is_rejected() {
        let text = MINIMAL.to_string() + "\n[ensemble]\nmembers = 2\np = 100.0\nscope = \"global\"\nextraction = \"hard\"\nlambda = 0.0\nmask_epochs = 1\nmask_lr = 0.01\nmask_batch = 8\nscaling_init = \"normal\"\ninit_a = 0.0\ninit_b = 1.0\ncombine = \"avg_softmax\"\n";
        assert!(ExperimentConfig::from_str_for_tests(&text).is_err());
    }
}
