//! Command-line entry point: generation, training, alignment, registration,
//! mosaicking, evaluation and read-back validation of the files they write.

mod commands;
mod files;

pub use files::{
    self_check, AlignReport, BucketRow, CheckOutcome, Confusion, EvalSummary, Manifest, ManifestEntry, MosaicEdge,
    MosaicReport,
};

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::matcher::{MatcherConfig, MatcherError};
use crate::metrics::{MetricThresholds, MetricsError, OverlapVariant};
use crate::model::ModelError;
use crate::registration::{RegistrationConfig, RegistrationError, Strategy};
use crate::scenegraph::{GeneratorConfig, SceneGraphError, ScenePreset};
use crate::training::{TrainConfig, TrainError};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "SG_ALIGN_THREADS";

/// Failure of a command, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 2 for configuration errors, 3 for data errors, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SceneGraphError> for CliError {
    fn from(e: SceneGraphError) -> Self {
        match e {
            SceneGraphError::InfeasibleConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MatcherError> for CliError {
    fn from(e: MatcherError) -> Self {
        match e {
            MatcherError::InvalidConfig(_) => CliError::Config(e.to_string()),
            MatcherError::Scene(s) => s.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::CheckpointMismatch(_) | ModelError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DivergenceDetected { .. } => CliError::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::Matcher(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RegistrationError> for CliError {
    fn from(e: RegistrationError) -> Self {
        match e {
            RegistrationError::InvalidConfig(_) | RegistrationError::MissingAlignment => CliError::Config(e.to_string()),
            RegistrationError::ObjectOutOfRange { .. } | RegistrationError::DimensionMismatch { .. } => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::InvalidThresholds(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Options of `generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSettings {
    pub pairs: usize,
    /// Keep only pairs whose realized overlap lies in this closed range.
    pub overlap_filter: Option<(f64, f64)>,
    /// Draws allowed per requested pair before giving up.
    pub max_draws_per_pair: usize,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            pairs: 10,
            overlap_filter: None,
            max_draws_per_pair: 200,
        }
    }
}

/// Options of `mosaic` when the fragments are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MosaicSettings {
    pub fragments: usize,
    pub objects_per_fragment: usize,
    pub shared: usize,
    pub min_inliers: usize,
    pub min_inlier_ratio: f64,
}

impl Default for MosaicSettings {
    fn default() -> Self {
        Self {
            fragments: 3,
            objects_per_fragment: 6,
            shared: 3,
            min_inliers: 30,
            min_inlier_ratio: 0.3,
        }
    }
}

/// Parameters of one invocation, read from `--config` and overridden by
/// flags. The encoder and matcher sections, when present, must agree with
/// any checkpoint that is loaded. The run seed drives every random choice;
/// `training.seed` and `registration.seed` are derived from it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub generate: GenerateSettings,
    pub encoder: Option<EncoderConfig>,
    pub matcher: Option<MatcherConfig>,
    pub training: TrainConfig,
    pub registration: RegistrationConfig,
    pub strategy: Option<Strategy>,
    pub overlap_variant: Option<OverlapVariant>,
    pub thresholds: MetricThresholds,
    pub mosaic: MosaicSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Checks every section before any computation.
    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        if let Some(m) = &self.matcher {
            m.validate()?;
        }
        self.training.validate()?;
        self.registration.validate()?;
        self.thresholds.validate()?;
        if let Some((lo, hi)) = self.generate.overlap_filter {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(CliError::Config("overlap_filter must satisfy 0 ≤ min ≤ max ≤ 1".into()));
            }
        }
        if self.generate.max_draws_per_pair == 0 {
            return Err(CliError::Config("max_draws_per_pair must be positive".into()));
        }
        let ms = &self.mosaic;
        if ms.fragments < 2 || ms.shared >= ms.objects_per_fragment || !(0.0..=1.0).contains(&ms.min_inlier_ratio) {
            return Err(CliError::Config(
                "mosaic needs ≥ 2 fragments, shared < objects_per_fragment and min_inlier_ratio in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy.unwrap_or(Strategy::O2o)
    }

    pub fn overlap_variant(&self) -> OverlapVariant {
        self.overlap_variant.unwrap_or(OverlapVariant::All)
    }
}

#[derive(Debug, Parser)]
#[command(name = "sg-align", version, about = "Partial scene-graph matching, overlap checking, registration and mosaicking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RegistrationArgs {
    /// a2a, o2o, opo, opo-s[=S] or opo-k[=K].
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Weight of the semantic rescoring.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Pose from weighted SVD hypotheses instead of RANSAC.
    #[arg(long, conflicts_with = "ransac")]
    pub no_ransac: bool,
    #[arg(long)]
    pub ransac: bool,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

fn parse_preset(s: &str) -> Result<ScenePreset, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown preset `{s}` (expected standard, symmetric-stress or twin-objects)"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes scene-pair files and a manifest.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of pairs.
        #[arg(long)]
        n: Option<usize>,
        /// Lower end of the overlap filter.
        #[arg(long)]
        overlap_min: Option<f64>,
        /// Upper end of the overlap filter.
        #[arg(long)]
        overlap_max: Option<f64>,
        #[arg(long, value_parser = parse_preset)]
        preset: Option<ScenePreset>,
    },
    /// Trains a model on the pairs of a manifest.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Manifest written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint with training state to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Aligns the two fragments of a scene-pair file.
    Align {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pair: PathBuf,
        #[arg(long, value_enum)]
        overlap_variant: Option<OverlapVariant>,
        /// Include the soft matrix in the alignment file.
        #[arg(long)]
        soft: bool,
    },
    /// Registers the source fragment of a scene-pair file onto its reference.
    Register {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        pair: PathBuf,
        /// Model supplying the alignment; the ground truth is used without it.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        registration: RegistrationArgs,
    },
    /// Reconstructs a scene from scene files, or from generated fragments.
    Mosaic {
        #[command(flatten)]
        common: CommonArgs,
        /// Scene files; fragments are generated when none are given.
        #[arg(long, num_args = 1..)]
        scenes: Vec<PathBuf>,
        /// Model supplying alignments; node ids are matched without it.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        registration: RegistrationArgs,
    },
    /// Evaluates a model on the pairs of a manifest.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        registration: RegistrationArgs,
        #[arg(long, value_enum)]
        overlap_variant: Option<OverlapVariant>,
        /// Skip registration and report matching metrics only.
        #[arg(long)]
        no_registration: bool,
    },
    /// Validates every known output file in a directory.
    SelfCheck {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Builds the run configuration of a command: file, then flags.
fn run_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_registration_args(cfg: &mut RunConfig, args: &RegistrationArgs) {
    if let Some(s) = args.strategy {
        cfg.strategy = Some(s);
    }
    if let Some(g) = args.gamma {
        cfg.registration.gamma = g;
    }
    if args.no_ransac {
        cfg.registration.use_ransac = false;
    }
    if args.ransac {
        cfg.registration.use_ransac = true;
    }
}

/// Caps the global worker pool from [`THREADS_ENV`].
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Runs one parsed command. Messages for the user go to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate {
            common,
            n,
            overlap_min,
            overlap_max,
            preset,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(n) = n {
                cfg.generate.pairs = n;
            }
            if overlap_min.is_some() || overlap_max.is_some() {
                let (lo0, hi0) = cfg.generate.overlap_filter.unwrap_or(cfg.generator.overlap);
                let range = (overlap_min.unwrap_or(lo0), overlap_max.unwrap_or(hi0));
                cfg.generate.overlap_filter = Some(range);
                cfg.generator.overlap = range;
            }
            if let Some(p) = preset {
                cfg.generator.preset = p;
            }
            cfg.validate()?;
            commands::generate(&cfg, &common.out)
        }
        Command::Train {
            common,
            data,
            resume,
            epochs,
        } => {
            let mut cfg = run_config(&common)?;
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            cfg.validate()?;
            commands::train(&cfg, &data, resume.as_deref(), &common.out)
        }
        Command::Align {
            common,
            model,
            pair,
            overlap_variant,
            soft,
        } => {
            let mut cfg = run_config(&common)?;
            if overlap_variant.is_some() {
                cfg.overlap_variant = overlap_variant;
            }
            cfg.validate()?;
            commands::align(&cfg, &model, &pair, soft, &common.out)
        }
        Command::Register {
            common,
            pair,
            model,
            registration,
        } => {
            let mut cfg = run_config(&common)?;
            apply_registration_args(&mut cfg, &registration);
            cfg.validate()?;
            commands::register(&cfg, &pair, model.as_deref(), &common.out)
        }
        Command::Mosaic {
            common,
            scenes,
            model,
            registration,
        } => {
            let mut cfg = run_config(&common)?;
            apply_registration_args(&mut cfg, &registration);
            cfg.validate()?;
            commands::mosaic(&cfg, &scenes, model.as_deref(), &common.out)
        }
        Command::Evaluate {
            common,
            data,
            model,
            registration,
            overlap_variant,
            no_registration,
        } => {
            let mut cfg = run_config(&common)?;
            apply_registration_args(&mut cfg, &registration);
            if overlap_variant.is_some() {
                cfg.overlap_variant = overlap_variant;
            }
            cfg.validate()?;
            commands::evaluate(&cfg, &data, &model, !no_registration, &common.out)
        }
        Command::SelfCheck { dir } => {
            let outcomes = self_check(&dir)?;
            let mut failed = 0;
            for o in &outcomes {
                match &o.error {
                    None => println!("ok      {} ({})", o.path.display(), o.kind),
                    Some(e) => {
                        failed += 1;
                        println!("FAILED  {} ({}): {e}", o.path.display(), o.kind);
                    }
                }
            }
            println!("{} files checked, {failed} failed", outcomes.len());
            if failed > 0 {
                return Err(CliError::Data(format!("{failed} files failed validation")));
            }
            Ok(())
        }
    }
}

