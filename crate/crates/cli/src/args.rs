use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vhead_core::aggregate::{Correctness, HeadMetric, SampleFilter};
use vhead_core::compare::ComparisonKind;
use vhead_core::metrics::{ConcentrationScope, MetricConfig};
use vhead_core::{PromptVariant, QuestionType, SelectionRule, Stage};

#[derive(Debug, Parser)]
#[command(name = "vhead", version, about = "Find, score and ablate image-focused attention heads")]
pub struct Cli {
    /// Worker threads for per-sample work; outputs do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check every dump in a manifest against the ATND invariants.
    Validate(ValidateArgs),
    /// Aggregate per-head metrics over a manifest into a stats table.
    Score(ScoreArgs),
    /// Pairwise similarity matrix between stats tables.
    Compare(CompareArgs),
    /// Experiments on the embedded toy model.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Rankings, grids and head selections from a stats table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON report destination; a summary always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    FullRow,
    ImageOnly,
}

#[derive(Debug, Args)]
pub struct MetricArgs {
    /// Layer-modulation scale of the 1/l term.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub k: f64,
    /// Layer-modulation scale of the exponential term.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub a: f64,
    /// Layer-modulation decay rate.
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub b: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub eps_layer: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub eps_entropy: f64,
    /// Tokens the concentration term of the score is computed over.
    #[arg(long, value_enum, default_value_t = ScopeArg::FullRow)]
    pub scope: ScopeArg,
}

impl MetricArgs {
    pub fn config(&self) -> MetricConfig {
        MetricConfig {
            eps_entropy: self.eps_entropy,
            eps_layer: self.eps_layer,
            k: self.k,
            a: self.a,
            b: self.b,
            concentration_scope: match self.scope {
                ScopeArg::FullRow => ConcentrationScope::FullRow,
                ScopeArg::ImageOnly => ConcentrationScope::ImageOnly,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorrectArg {
    Correct,
    Incorrect,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub filter_qtype: Option<QuestionType>,
    #[arg(long)]
    pub filter_variant: Option<PromptVariant>,
    /// Keep only samples the model answered correctly (or incorrectly).
    #[arg(long, value_enum)]
    pub filter_correct: Option<CorrectArg>,
}

impl FilterArgs {
    pub fn filter(&self) -> SampleFilter {
        SampleFilter {
            question_type: self.filter_qtype,
            prompt_variant: self.filter_variant,
            correctness: self.filter_correct.map(|c| match c {
                CorrectArg::Correct => Correctness::Correct,
                CorrectArg::Incorrect => Correctness::Incorrect,
            }),
        }
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the table, heatmaps and scatter data.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub metric: MetricArgs,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[arg(long, default_value = "model")]
    pub model_id: String,
    /// Defaults to the manifest's file stem.
    #[arg(long)]
    pub dataset_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Stats tables written by `score`.
    #[arg(required = true)]
    pub tables: Vec<PathBuf>,
    #[arg(long, default_value = "pearson")]
    pub kind: ComparisonKind,
    #[arg(long, default_value = "detection_score")]
    pub metric: HeadMetric,
    /// EMD over (image mass, concentration) point clouds instead of one metric.
    #[arg(long)]
    pub emd_2d: bool,
    /// Directory for comparison.csv and comparison.json; CSV to stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Build a counting dataset and the manifest its dumps will use.
    Gen(ToyGenArgs),
    /// Forward every sample, writing dumps, a manifest and the accuracy.
    Run(ToyRunArgs),
    /// Staged masking experiment over stages x rules x counts.
    Ablate(ToyAblateArgs),
}

#[derive(Debug, Args)]
pub struct ToyGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    /// Root seed for model weights and data.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw the samples from this seed instead, keeping the model fixed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Model config JSON; its seed is replaced by --seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyRunArgs {
    /// Directory written by `toy gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `none`, `planted`, `image` or a mask JSON file.
    #[arg(long, default_value = "none")]
    pub mask: String,
}

#[derive(Debug, Args)]
pub struct ToyAblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stats table to rank heads by; computed from unmasked passes if absent.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "early,mid,late")]
    pub stage: Vec<Stage>,
    #[arg(long, value_delimiter = ',', default_value = "top,random")]
    pub rule: Vec<SelectionRule>,
    /// Heads masked per row.
    #[arg(long, value_delimiter = ',', default_value = "20")]
    pub count: Vec<usize>,
    /// Root seed for random masks; defaults to the dataset's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub metric: MetricArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict the ranking and selection to one stage.
    #[arg(long)]
    pub stage: Option<Stage>,
    /// Also write mask.json with the heads this rule selects.
    #[arg(long)]
    pub rule: Option<SelectionRule>,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Top-ranked heads the `others` rule skips.
    #[arg(long, default_value_t = vhead_core::aggregate::DEFAULT_OTHERS_SKIP)]
    pub others_skip: usize,
}
