use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dfbscan::indicators::{IndicatorId, INDICATOR_COUNT};
use dfbscan::selection::{SelectionMethod, DEFAULT_SEED};
use dfbscan::synth::Attack;
use dfbscan::LayerFormat;

#[derive(Debug, Parser)]
#[command(
    name = "dfbscan",
    version,
    about = "Data-free backdoor scanner for classifier final layers"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,

    /// Omit timing fields so repeated runs are byte-identical.
    #[arg(long, global = true)]
    pub no_timing: bool,

    /// Write the report to this file (atomically) instead of stdout.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,

    /// Extra diagnostics on stderr; repeat for more.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
    Human,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan one final layer against a calibrated profile.
    Scan(ScanArgs),
    /// Scan every model file in a directory.
    ScanBatch(ScanBatchArgs),
    /// Build a profile from clean and backdoored configuration models.
    Calibrate(CalibrateArgs),
    /// Choose an indicator subset and build its profile.
    Select(SelectArgs),
    /// Synthetic model generation.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Indicator matrix inspection.
    #[command(subcommand)]
    Indicators(IndicatorsCommand),
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    pub model: PathBuf,

    #[arg(long)]
    pub profile: PathBuf,

    #[arg(long, value_parser = parse_layer_format, default_value = "auto")]
    pub layer_format: LayerFormat,
}

#[derive(Debug, Args)]
pub struct ScanBatchArgs {
    pub dir: PathBuf,

    #[arg(
        long,
        required_unless_present = "reference_free",
        conflicts_with = "reference_free"
    )]
    pub profile: Option<PathBuf>,

    /// Flag models whose mean similarity to the rest of the batch is a low outlier.
    #[arg(long)]
    pub reference_free: bool,

    #[arg(long, default_value_t = dfbscan::detector::DEFAULT_Z_THRESHOLD, requires = "reference_free")]
    pub z_threshold: f64,

    /// Indicator ids or names for reference-free scoring (default: all 62).
    #[arg(long, value_delimiter = ',', value_parser = parse_indicator, requires = "reference_free")]
    pub indicators: Vec<usize>,

    /// Worker threads; 0 means one per logical CPU.
    #[arg(long, env = "DFBSCAN_THREADS", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ConfigDirs {
    /// Directory of clean models (optional labels.csv).
    #[arg(long)]
    pub clean: PathBuf,

    /// Directory of backdoored models with a labels.csv of `path,target`.
    #[arg(long)]
    pub backdoor: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub dirs: ConfigDirs,

    /// Indicator ids or names (default: all 62).
    #[arg(long, value_delimiter = ',', value_parser = parse_indicator)]
    pub indicators: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub dirs: ConfigDirs,

    #[arg(long, value_parser = parse_method, default_value = "all")]
    pub method: SelectionMethod,

    /// Fixed subset size; omitted means sweep for the best prefix.
    #[arg(long)]
    pub n: Option<usize>,

    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,

    /// Also save the selected profile here.
    #[arg(long)]
    pub profile_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write synthetic DFBS files and a labels.csv.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub k: usize,

    #[arg(long)]
    pub d: usize,

    #[arg(long)]
    pub count: usize,

    #[arg(long, value_parser = parse_attack, default_value = "none")]
    pub attack: Attack,

    #[arg(long, default_value_t = 3.0)]
    pub strength: f64,

    /// A class index, or `cycle` to rotate targets across models.
    #[arg(long, value_parser = parse_target, default_value = "cycle")]
    pub target: TargetArg,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub weight_scale: Option<f64>,

    #[arg(long)]
    pub bias_scale: Option<f64>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetArg {
    Index(usize),
    Cycle,
}

#[derive(Debug, Subcommand)]
pub enum IndicatorsCommand {
    /// Print the K x 62 indicator matrix of one model.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    pub model: PathBuf,

    /// CSV and human output show normalized rather than raw values.
    #[arg(long)]
    pub normalized: bool,

    #[arg(long, value_parser = parse_layer_format, default_value = "auto")]
    pub layer_format: LayerFormat,
}

fn parse_layer_format(s: &str) -> Result<LayerFormat, String> {
    s.parse().map_err(|e: dfbscan::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<SelectionMethod, String> {
    s.parse().map_err(|e: dfbscan::Error| e.to_string())
}

fn parse_attack(s: &str) -> Result<Attack, String> {
    s.parse().map_err(|e: dfbscan::Error| e.to_string())
}

fn parse_target(s: &str) -> Result<TargetArg, String> {
    if s.eq_ignore_ascii_case("cycle") {
        return Ok(TargetArg::Cycle);
    }
    s.parse()
        .map(TargetArg::Index)
        .map_err(|_| format!("expected a class index or `cycle`, got {s:?}"))
}

/// Accepts a canonical index (`12`) or a name (`WM-RAW`).
fn parse_indicator(s: &str) -> Result<usize, String> {
    if let Ok(n) = s.trim().parse::<usize>() {
        return if n < INDICATOR_COUNT {
            Ok(n)
        } else {
            Err(format!(
                "indicator index {n} out of range 0..{INDICATOR_COUNT}"
            ))
        };
    }
    IndicatorId::parse(s)
        .map(IndicatorId::index)
        .ok_or_else(|| format!("unknown indicator {s:?}"))
}
