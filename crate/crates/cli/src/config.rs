//! Experiment configuration file (TOML) and its conversion to library types.

use std::path::{Path, PathBuf};

use kdvr_core::data_io::{DatasetSpec, LabelKind, Normalization, Source, SynthKind};
use kdvr_core::distillation::NeighborhoodConstant;
use kdvr_core::experiment::{TeacherSpec, DEFAULT_LAMBDA_GRID};
use kdvr_core::{Compressor, DistillationForm, ModelKind, Mode, Rng, RunSchedule, SamplingPolicy};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
}

fn default_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: SourceConfig,
    #[serde(default)]
    pub normalization: NormalizationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        /// Defaults to the last column.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label_column: Option<usize>,
        #[serde(default)]
        header: bool,
        #[serde(default)]
        labels: LabelConfig,
    },
    Synthetic {
        kind: SynthConfig,
        n: usize,
        d: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
        /// Only for `gaussian_classes`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelConfig {
    #[default]
    Classes,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthConfig {
    LinearGaussian,
    LogisticSeparable,
    LogisticNoisy,
    GaussianClasses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationConfig {
    #[default]
    None,
    Scale01,
    Standardize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetConfig {
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    LinearRegression,
    BinaryLogistic,
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    #[serde(default = "yes")]
    pub bias: bool,
    /// Hidden width of the `mlp` kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

fn yes() -> bool {
    true
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::LinearRegression,
            bias: true,
            hidden: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    Sgd,
    #[default]
    Kd,
    UnbiasedKd,
    CompressedKd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingConfig {
    #[default]
    WithReplacement,
    EpochShuffle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormConfig {
    #[default]
    Linearized,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicyConfig {
    /// One run per grid value.
    #[default]
    Fixed,
    /// Clamped neighborhood-minimizing weight, recomputed per phase.
    Optimal,
}

/// Constant `c` in the neighborhood size.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodConfig {
    #[default]
    QuarterMu,
    Smoothness,
    TwiceMu,
    Value(f64),
}

impl From<NeighborhoodConfig> for NeighborhoodConstant {
    fn from(c: NeighborhoodConfig) -> Self {
        match c {
            NeighborhoodConfig::QuarterMu => NeighborhoodConstant::QuarterMu,
            NeighborhoodConfig::Smoothness => NeighborhoodConstant::Smoothness,
            NeighborhoodConfig::TwiceMu => NeighborhoodConstant::TwiceMu,
            NeighborhoodConfig::Value(v) => NeighborhoodConstant::Value(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorConfig {
    Identity,
    RandK {
        k: usize,
    },
    RandomMask {
        sparsity: f64,
        #[serde(default)]
        seed: u64,
    },
    Quantize {
        levels: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Epochs between teacher refreshes; unset means never.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_epochs: Option<u64>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub form: FormConfig,
    #[serde(default)]
    pub lambda_policy: LambdaPolicyConfig,
    #[serde(default)]
    pub c: NeighborhoodConfig,
    #[serde(default)]
    pub track_variance: bool,
    #[serde(default)]
    pub track_kd_gap: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressor: Option<CompressorConfig>,
}

fn default_epochs() -> u64 {
    100
}

fn default_batch() -> usize {
    10
}

fn default_gamma() -> f64 {
    0.05
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            mode: ModeConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            gamma: default_gamma(),
            phase_epochs: None,
            sampling: SamplingConfig::default(),
            form: FormConfig::default(),
            lambda_policy: LambdaPolicyConfig::default(),
            c: NeighborhoodConfig::default(),
            track_variance: false,
            track_kd_gap: false,
            compressor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherConfig {
    #[default]
    None,
    Path {
        path: PathBuf,
    },
    SelfRefresh,
    /// Teacher with `f(theta) - f* = quality` along a seeded direction.
    Oracle {
        quality: f64,
        #[serde(default)]
        seed: u64,
    },
    SgdRun {
        #[serde(default = "default_epochs")]
        epochs: u64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default)]
        seed: u64,
    },
    Reference {
        #[serde(default = "default_reference_iterations")]
        iterations: usize,
    },
}

fn default_reference_iterations() -> usize {
    20_000
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: String| Err(CliError::Config(format!("{field}: {why}")));
        if self.seeds.is_empty() {
            return bad("seeds", "must not be empty".into());
        }
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid", "must not be empty".into());
        }
        for (i, l) in self.lambda_grid.iter().enumerate() {
            if !(0.0..=1.0).contains(l) {
                return bad(&format!("lambda_grid[{i}]"), format!("{l} is outside [0, 1]"));
            }
        }
        let s = &self.schedule;
        if s.epochs == 0 {
            return bad("schedule.epochs", "must be at least 1".into());
        }
        if s.batch_size == 0 {
            return bad("schedule.batch_size", "must be at least 1".into());
        }
        if !(s.gamma.is_finite() && s.gamma >= 0.0) {
            return bad("schedule.gamma", format!("{} is not a finite nonnegative step size", s.gamma));
        }
        if s.phase_epochs == Some(0) {
            return bad("schedule.phase_epochs", "must be at least 1".into());
        }
        if s.mode == ModeConfig::CompressedKd && s.compressor.is_none() {
            return bad("schedule.compressor", "required when mode = \"compressed_kd\"".into());
        }
        if self.objective.kind == ObjectiveKind::Mlp && self.objective.hidden.unwrap_or(0) == 0 {
            return bad("objective.hidden", "required (>= 1) for the mlp kind".into());
        }
        if let SourceConfig::Synthetic { kind, classes, .. } = &self.dataset.source {
            if *kind == SynthConfig::GaussianClasses && classes.unwrap_or(0) < 2 {
                return bad("dataset.source.classes", "gaussian_classes needs classes >= 2".into());
            }
        }
        Ok(())
    }

    /// Training additionally needs a teacher whenever some run distills.
    pub fn validate_for_training(&self) -> Result<(), CliError> {
        let s = &self.schedule;
        let needs_teacher = matches!(s.mode, ModeConfig::Kd | ModeConfig::UnbiasedKd | ModeConfig::CompressedKd)
            && self.lambda_grid.iter().any(|&l| l > 0.0);
        if needs_teacher && self.teacher == TeacherConfig::None {
            return Err(CliError::Config("teacher: a teacher is required when some lambda > 0".into()));
        }
        Ok(())
    }

    pub fn model_kind(&self, classes: Option<usize>) -> Result<ModelKind, CliError> {
        let need_classes = || {
            classes.ok_or_else(|| CliError::Config("objective.kind: needs class labels in the dataset".into()))
        };
        Ok(match self.objective.kind {
            ObjectiveKind::LinearRegression => ModelKind::LinearRegression,
            ObjectiveKind::BinaryLogistic => ModelKind::BinaryLogistic,
            ObjectiveKind::Softmax => ModelKind::SoftmaxLinear { classes: need_classes()? },
            ObjectiveKind::Mlp => ModelKind::MlpRelu {
                hidden: self.objective.hidden.unwrap_or(0),
                classes: need_classes()?,
            },
        })
    }

    pub fn teacher_spec(&self) -> TeacherSpec {
        match &self.teacher {
            TeacherConfig::None => TeacherSpec::None,
            TeacherConfig::Path { path } => TeacherSpec::Path(path.clone()),
            TeacherConfig::SelfRefresh => TeacherSpec::SelfRefresh,
            TeacherConfig::Oracle { quality, seed } => TeacherSpec::Oracle {
                quality: *quality,
                seed: *seed,
            },
            TeacherConfig::SgdRun {
                epochs,
                gamma,
                batch_size,
                seed,
            } => TeacherSpec::SgdRun {
                epochs: *epochs,
                gamma: *gamma,
                batch_size: *batch_size,
                seed: *seed,
            },
            TeacherConfig::Reference { iterations } => TeacherSpec::Reference { iterations: *iterations },
        }
    }

    /// Schedule template for a dataset of `n` samples and `dim` parameters.
    pub fn run_schedule(&self, n: usize, dim: usize) -> Result<RunSchedule, CliError> {
        let s = &self.schedule;
        let epoch = n.div_ceil(s.batch_size) as u64;
        let mode = match s.mode {
            ModeConfig::Sgd => Mode::Sgd,
            ModeConfig::Kd => Mode::Kd,
            ModeConfig::UnbiasedKd => Mode::UnbiasedKd,
            ModeConfig::CompressedKd => {
                let c = s.compressor.as_ref().expect("validated");
                let built = match c {
                    CompressorConfig::Identity => Ok(Compressor::identity()),
                    CompressorConfig::RandK { k } => Compressor::rand_k(dim, *k),
                    CompressorConfig::RandomMask { sparsity, seed } => {
                        Compressor::random_mask(dim, *sparsity, &mut Rng::new(*seed))
                    }
                    CompressorConfig::Quantize { levels } => Compressor::stochastic_quantize(dim, *levels),
                };
                Mode::CompressedKd(built.map_err(|e| CliError::Config(format!("schedule.compressor: {e}")))?)
            }
        };
        let mut r = RunSchedule::new(s.epochs * epoch, s.batch_size, s.gamma, mode, 0.0);
        if let Some(p) = s.phase_epochs {
            r.phase_length = p * epoch;
        }
        r.sampling = match s.sampling {
            SamplingConfig::WithReplacement => SamplingPolicy::WithReplacement,
            SamplingConfig::EpochShuffle => SamplingPolicy::EpochShuffle,
        };
        r.form = match s.form {
            FormConfig::Linearized => DistillationForm::Linearized,
            FormConfig::Network => DistillationForm::Network,
        };
        r.track_variance = s.track_variance;
        r.track_kd_gap = s.track_kd_gap;
        Ok(r)
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> DatasetSpec {
        let source = match &self.source {
            SourceConfig::Idx { images, labels } => Source::IdxPair {
                images: images.clone(),
                labels: labels.clone(),
            },
            SourceConfig::Csv {
                path,
                label_column,
                header,
                labels,
            } => Source::Csv {
                path: path.clone(),
                label_column: *label_column,
                header: *header,
                labels: match labels {
                    LabelConfig::Classes => LabelKind::Classes,
                    LabelConfig::Real => LabelKind::Real,
                },
            },
            SourceConfig::Synthetic {
                kind,
                n,
                d,
                noise,
                seed,
                classes,
            } => Source::Synthetic {
                kind: match kind {
                    SynthConfig::LinearGaussian => SynthKind::LinearGaussian,
                    SynthConfig::LogisticSeparable => SynthKind::LogisticSeparable,
                    SynthConfig::LogisticNoisy => SynthKind::LogisticNoisy,
                    SynthConfig::GaussianClasses => SynthKind::GaussianClasses {
                        classes: classes.unwrap_or(0),
                    },
                },
                n: *n,
                d: *d,
                noise: *noise,
                seed: *seed,
            },
        };
        DatasetSpec {
            source,
            normalization: match self.normalization {
                NormalizationConfig::None => Normalization::None,
                NormalizationConfig::Scale01 => Normalization::Scale01,
                NormalizationConfig::Standardize => Normalization::Standardize,
            },
            subset: self.subset.map(|s| (s.count, s.seed)),
        }
    }
}
