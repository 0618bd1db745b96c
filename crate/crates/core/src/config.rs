//! Experiment configuration files.
//!
//! TOML, human-editable, one experiment per file. Unknown keys are errors;
//! every field below is the complete schema. See the shipped `configs/`
//! directory for working examples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alloc::AllocationMode;
use crate::combine::{CombinerKind, DEFAULT_COSREG_BETA};
use crate::error::{Error, Result};
use crate::model::{Activation, DecoderSpec, EncoderSpec, HeadKind, LossKind, TaskLossSpec};
use crate::synth::{SyntheticTaskSpec, TaskKind};
use crate::weighting::{WeightStrategy, DEFAULT_DWA_TEMPERATURE, DEFAULT_GRADNORM_ALPHA};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Method name used in reports and comparison tables.
    pub name: String,
    pub seeds: Vec<u64>,
    /// Output directory; the CLI `--out` flag overrides it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Baselines JSON produced by the `baseline` subcommand; enables
    /// delta-mtl in reports.
    #[serde(default)]
    pub baselines: Option<PathBuf>,
    /// Seeds run concurrently. 1 keeps runs strictly sequential.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub benchmark: Option<BenchmarkConfig>,
    /// Directory created by dataset export, as an alternative to
    /// generating from `benchmark`.
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub allocation: AllocationConfig,
    #[serde(default)]
    pub weighting: WeightingConfig,
    #[serde(default)]
    pub combiner: CombinerConfig,
    pub optimizer: OptimizerConfig,
    /// Per-task static loss weights; default 1 everywhere.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub profile: ProfileConfig,
}

fn default_parallelism() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub input_dim: usize,
    pub teacher_hidden: usize,
    pub relatedness: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Seed for data generation, fixed across training seeds so every
    /// method sees the same dataset.
    #[serde(default)]
    pub data_seed: u64,
    pub tasks: Vec<TaskConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum TaskConfig {
    Regression {
        #[serde(default = "default_output_dim")]
        output_dim: usize,
        noise_std: f64,
    },
    Classification { classes: usize },
}

fn default_output_dim() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationConfig {
    /// ft | sta | ista | sta-gap
    pub mode: String,
    /// Subset size |ST| per example; also the reference for equal-steps.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Steps between the first and second visit of a batch (sta-gap).
    #[serde(default)]
    pub gap: Option<usize>,
    /// Revisit with the complement of the first allocation instead of an
    /// independent redraw (sta-gap).
    #[serde(default)]
    pub gap_complement: bool,
}

fn default_k() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingConfig {
    /// uniform | uncertainty | gradnorm | dwa
    #[serde(default = "default_strategy")]
    pub strategy: String,
    /// GradNorm balancing exponent.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// GradNorm weight learning rate; defaults to the optimizer rate.
    #[serde(default)]
    pub weight_lr: Option<f64>,
    /// DWA softmax temperature.
    #[serde(default)]
    pub temperature: Option<f64>,
}

fn default_strategy() -> String {
    "uniform".into()
}

impl Default for WeightingConfig {
    fn default() -> Self {
        WeightingConfig {
            strategy: default_strategy(),
            alpha: None,
            weight_lr: None,
            temperature: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinerConfig {
    /// sum | pcgrad | mgda | cosreg
    #[serde(default = "default_combiner")]
    pub kind: String,
    /// Cosine penalty scale (cosreg).
    #[serde(default)]
    pub beta: Option<f64>,
}

fn default_combiner() -> String {
    "sum".into()
}

impl Default for CombinerConfig {
    fn default() -> Self {
        CombinerConfig {
            kind: default_combiner(),
            beta: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Plain gradient-descent learning rate.
    pub lr: f64,
    /// Training length in planned batches. Exactly one of steps/epochs.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    pub batch_size: usize,
    /// FT+ control: run as many optimizer updates as the interleaved
    /// schedule would (steps x ceil(T/k)).
    #[serde(default)]
    pub equal_steps: bool,
    /// Normalize each accumulated task loss by its allocation count.
    /// Disabling gives the literal unnormalized accumulation.
    #[serde(default = "default_true")]
    pub normalize_task_losses: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    /// Profiling epochs over the training split.
    #[serde(default = "default_profile_epochs")]
    pub epochs: usize,
    /// Optional checkpoint to profile instead of the fresh initial model.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_profile_epochs() -> usize {
    2
}

/// Fully validated experiment, resolved from a [`ConfigFile`].
#[derive(Clone, Debug)]
pub struct Experiment {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub baselines_path: Option<PathBuf>,
    pub parallelism: usize,
    pub data: DataSource,
    pub model: ModelConfig,
    pub mode: AllocationMode,
    pub k: usize,
    pub weighting: WeightStrategy,
    pub combiner: CombinerKind,
    pub lr: f64,
    /// Planned batches; resolved from steps or epochs at run time.
    pub budget: Budget,
    pub batch_size: usize,
    pub equal_steps: bool,
    pub normalize_task_losses: bool,
    pub lambdas: Option<Vec<f64>>,
    pub profile: ProfileConfig,
    /// Raw config echo for reports.
    pub echo: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Steps(usize),
    Epochs(usize),
}

#[derive(Clone, Debug)]
pub enum DataSource {
    Synthetic { spec: SyntheticTaskSpec, data_seed: u64 },
    Directory(PathBuf),
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ConfigFile = toml::from_str(&text)?;
        Self::from_file(file)
    }

    pub fn from_file(file: ConfigFile) -> Result<Self> {
        if file.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if file.parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        let data = match (&file.benchmark, &file.dataset_dir) {
            (Some(b), None) => DataSource::Synthetic {
                spec: benchmark_to_spec(b)?,
                data_seed: b.data_seed,
            },
            (None, Some(d)) => DataSource::Directory(d.clone()),
            _ => {
                return Err(Error::Config(
                    "exactly one of [benchmark] or dataset_dir is required".into(),
                ))
            }
        };

        let mode = parse_mode(&file.allocation)?;
        let weighting = parse_weighting(&file.weighting, file.optimizer.lr)?;
        let combiner = parse_combiner(&file.combiner)?;
        combiner.validate()?;

        if file.optimizer.lr <= 0.0 {
            return Err(Error::Config(format!(
                "optimizer lr must be positive, got {}",
                file.optimizer.lr
            )));
        }
        if file.optimizer.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let budget = match (file.optimizer.steps, file.optimizer.epochs) {
            (Some(s), None) if s > 0 => Budget::Steps(s),
            (None, Some(e)) if e > 0 => Budget::Epochs(e),
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set exactly one of optimizer.steps and optimizer.epochs".into(),
                ))
            }
            _ => {
                return Err(Error::Config(
                    "optimizer needs a positive steps or epochs budget".into(),
                ))
            }
        };
        if file.optimizer.equal_steps && !matches!(mode, AllocationMode::Ft) {
            return Err(Error::Config(
                "equal_steps is the FT+ control and requires mode = \"ft\"".into(),
            ));
        }
        if let Some(lambdas) = &file.lambdas {
            if lambdas.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
                return Err(Error::Config("lambdas must be positive".into()));
            }
        }

        let echo = serde_json::to_value(&file)?;
        Ok(Experiment {
            name: file.name,
            seeds: file.seeds,
            out_dir: file.out_dir,
            baselines_path: file.baselines,
            parallelism: file.parallelism,
            data,
            model: file.model,
            mode,
            k: file.allocation.k,
            weighting,
            combiner,
            lr: file.optimizer.lr,
            budget,
            batch_size: file.optimizer.batch_size,
            equal_steps: file.optimizer.equal_steps,
            normalize_task_losses: file.optimizer.normalize_task_losses,
            lambdas: file.lambdas,
            profile: file.profile,
            echo,
        })
    }

    /// Encoder/decoder/loss specs for the given benchmark tasks.
    pub fn model_specs(
        &self,
        spec: &SyntheticTaskSpec,
    ) -> (EncoderSpec, Vec<DecoderSpec>, Vec<TaskLossSpec>) {
        let encoder = EncoderSpec {
            input_dim: spec.input_dim,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
        };
        let decoders = spec
            .tasks
            .iter()
            .enumerate()
            .map(|(t, kind)| match kind {
                TaskKind::Regression { output_dim, .. } => DecoderSpec {
                    task: t,
                    output_dim: *output_dim,
                    head: HeadKind::Regression,
                },
                TaskKind::Classification { classes } => DecoderSpec {
                    task: t,
                    output_dim: *classes,
                    head: HeadKind::Classification,
                },
            })
            .collect();
        let losses = spec
            .tasks
            .iter()
            .enumerate()
            .map(|(t, kind)| TaskLossSpec {
                task: t,
                loss: match kind {
                    TaskKind::Regression { .. } => LossKind::MeanSquaredError,
                    TaskKind::Classification { .. } => LossKind::SoftmaxCrossEntropy,
                },
                weight: self
                    .lambdas
                    .as_ref()
                    .and_then(|l| l.get(t).copied())
                    .unwrap_or(1.0),
            })
            .collect();
        (encoder, decoders, losses)
    }
}

fn benchmark_to_spec(b: &BenchmarkConfig) -> Result<SyntheticTaskSpec> {
    let spec = SyntheticTaskSpec {
        input_dim: b.input_dim,
        teacher_hidden: b.teacher_hidden,
        relatedness: b.relatedness,
        tasks: b
            .tasks
            .iter()
            .map(|t| match t {
                TaskConfig::Regression { output_dim, noise_std } => TaskKind::Regression {
                    output_dim: *output_dim,
                    noise_std: *noise_std,
                },
                TaskConfig::Classification { classes } => {
                    TaskKind::Classification { classes: *classes }
                }
            })
            .collect(),
        n_train: b.n_train,
        n_eval: b.n_eval,
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_mode(a: &AllocationConfig) -> Result<AllocationMode> {
    let mode = match a.mode.as_str() {
        "ft" => AllocationMode::Ft,
        "sta" => AllocationMode::Sta { k: a.k },
        "ista" => AllocationMode::Ista { k: a.k },
        "sta-gap" => AllocationMode::StaGap {
            k: a.k,
            gap: a.gap.ok_or_else(|| {
                Error::Config("allocation.gap is required for mode = \"sta-gap\"".into())
            })?,
            complement: a.gap_complement,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown allocation mode {other:?} (expected ft|sta|ista|sta-gap)"
            )))
        }
    };
    if !matches!(mode, AllocationMode::StaGap { .. }) {
        if a.gap.is_some() {
            return Err(Error::Config(
                "allocation.gap is only meaningful for mode = \"sta-gap\"".into(),
            ));
        }
        if a.gap_complement {
            return Err(Error::Config(
                "allocation.gap_complement is only meaningful for mode = \"sta-gap\"".into(),
            ));
        }
    }
    Ok(mode)
}

fn parse_weighting(w: &WeightingConfig, main_lr: f64) -> Result<WeightStrategy> {
    let strategy = match w.strategy.as_str() {
        "uniform" => WeightStrategy::Uniform,
        "uncertainty" => WeightStrategy::Uncertainty,
        "gradnorm" => WeightStrategy::GradNorm {
            alpha: w.alpha.unwrap_or(DEFAULT_GRADNORM_ALPHA),
            lr: w.weight_lr.unwrap_or(main_lr),
        },
        "dwa" => WeightStrategy::Dwa {
            temperature: w.temperature.unwrap_or(DEFAULT_DWA_TEMPERATURE),
        },
        other => {
            return Err(Error::Config(format!(
                "unknown weighting strategy {other:?} (expected uniform|uncertainty|gradnorm|dwa)"
            )))
        }
    };
    let gradnorm = matches!(strategy, WeightStrategy::GradNorm { .. });
    let dwa = matches!(strategy, WeightStrategy::Dwa { .. });
    if (w.alpha.is_some() || w.weight_lr.is_some()) && !gradnorm {
        return Err(Error::Config(
            "weighting.alpha/weight_lr apply only to strategy = \"gradnorm\"".into(),
        ));
    }
    if w.temperature.is_some() && !dwa {
        return Err(Error::Config(
            "weighting.temperature applies only to strategy = \"dwa\"".into(),
        ));
    }
    Ok(strategy)
}

fn parse_combiner(c: &CombinerConfig) -> Result<CombinerKind> {
    let kind = match c.kind.as_str() {
        "sum" => CombinerKind::Sum,
        "pcgrad" => CombinerKind::Pcgrad,
        "mgda" => CombinerKind::Mgda,
        "cosreg" => CombinerKind::Cosreg {
            beta: c.beta.unwrap_or(DEFAULT_COSREG_BETA),
        },
        other => {
            return Err(Error::Config(format!(
                "unknown combiner {other:?} (expected sum|pcgrad|mgda|cosreg)"
            )))
        }
    };
    if c.beta.is_some() && !matches!(kind, CombinerKind::Cosreg { .. }) {
        return Err(Error::Config(
            "combiner.beta applies only to kind = \"cosreg\"".into(),
        ));
    }
    Ok(kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        r#"
name = "ista"
seeds = [0, 1]

[benchmark]
input_dim = 16
teacher_hidden = 32
relatedness = 0.9
n_train = 100
n_eval = 50

[[benchmark.tasks]]
kind = "regression"
noise_std = 0.1

[[benchmark.tasks]]
kind = "classification"
classes = 4

[model]
hidden = [32, 4]
activation = "tanh"

[allocation]
mode = "ista"
k = 1

[optimizer]
lr = 0.05
steps = 10
batch_size = 8
"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses() {
        let file: ConfigFile = toml::from_str(&base_toml()).unwrap();
        let exp = Experiment::from_file(file).unwrap();
        assert_eq!(exp.mode, AllocationMode::Ista { k: 1 });
        assert_eq!(exp.weighting, WeightStrategy::Uniform);
        assert_eq!(exp.combiner, CombinerKind::Sum);
        assert_eq!(exp.budget, Budget::Steps(10));
        assert!(exp.normalize_task_losses);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = base_toml() + "\ntypo_key = 1\n";
        assert!(toml::from_str::<ConfigFile>(&bad).is_err());
        let bad_nested = base_toml().replace("[optimizer]", "[optimizer]\nmomentum = 0.9");
        assert!(toml::from_str::<ConfigFile>(&bad_nested).is_err());
    }

    #[test]
    fn steps_and_epochs_are_exclusive() {
        let both = base_toml().replace("steps = 10", "steps = 10\nepochs = 2");
        let file: ConfigFile = toml::from_str(&both).unwrap();
        assert!(Experiment::from_file(file).is_err());
        let neither = base_toml().replace("steps = 10\n", "");
        let file: ConfigFile = toml::from_str(&neither).unwrap();
        assert!(Experiment::from_file(file).is_err());
    }

    #[test]
    fn equal_steps_requires_ft() {
        let bad = base_toml().replace("batch_size = 8", "batch_size = 8\nequal_steps = true");
        let file: ConfigFile = toml::from_str(&bad).unwrap();
        assert!(Experiment::from_file(file).is_err());
        let good = bad.replace("mode = \"ista\"", "mode = \"ft\"");
        let file: ConfigFile = toml::from_str(&good).unwrap();
        assert!(Experiment::from_file(file).unwrap().equal_steps);
    }

    #[test]
    fn gap_options_are_mode_guarded() {
        let bad = base_toml().replace("k = 1", "k = 1\ngap = 4");
        let file: ConfigFile = toml::from_str(&bad).unwrap();
        assert!(Experiment::from_file(file).is_err());

        let good = base_toml()
            .replace("mode = \"ista\"", "mode = \"sta-gap\"")
            .replace("k = 1", "k = 1\ngap = 4\ngap_complement = true");
        let file: ConfigFile = toml::from_str(&good).unwrap();
        let exp = Experiment::from_file(file).unwrap();
        assert_eq!(
            exp.mode,
            AllocationMode::StaGap { k: 1, gap: 4, complement: true }
        );
    }

    #[test]
    fn strategy_specific_keys_are_guarded() {
        let bad = base_toml() + "\n[weighting]\nstrategy = \"uniform\"\ntemperature = 2.0\n";
        let file: ConfigFile = toml::from_str(&bad).unwrap();
        assert!(Experiment::from_file(file).is_err());

        let good = base_toml() + "\n[weighting]\nstrategy = \"gradnorm\"\nalpha = 1.5\n";
        let file: ConfigFile = toml::from_str(&good).unwrap();
        let exp = Experiment::from_file(file).unwrap();
        assert_eq!(exp.weighting, WeightStrategy::GradNorm { alpha: 1.5, lr: 0.05 });
    }

    #[test]
    fn benchmark_or_dataset_dir_exactly_one() {
        let neither: ConfigFile = toml::from_str(
            &base_toml().replace(
                r#"[benchmark]
input_dim = 16
teacher_hidden = 32
relatedness = 0.9
n_train = 100
n_eval = 50

[[benchmark.tasks]]
kind = "regression"
noise_std = 0.1

[[benchmark.tasks]]
kind = "classification"
classes = 4
"#,
                "",
            ),
        )
        .unwrap();
        assert!(Experiment::from_file(neither).is_err());
    }
}
