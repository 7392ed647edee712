use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tsforge_core::embedding::Method;
use tsforge_core::metrics::{parse_metric_list, Pairing};

use crate::config::{BackendKindArg, Mode, RunConfig};
use crate::error::{CliError, Stage};
use crate::Layout;

#[derive(Debug, Parser)]
#[command(
    name = "tsforge",
    version,
    about = "Synthetic time series from functional embeddings and a text generator"
)]
pub struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut the input series into period-aligned windows.
    Segment(Overrides),
    /// Fit the per-channel basis and write the coefficient table.
    Embed(Overrides),
    /// Serialize the table as fill-in-the-middle prompts.
    Encode(Overrides),
    /// Fit the generator backend on the prompt corpus.
    Finetune(Overrides),
    /// Sample, filter and collect new coefficient rows.
    Generate(Overrides),
    /// Reconstruct series from the generated rows.
    Decode(Overrides),
    /// Score generated series against the originals.
    Evaluate(EvaluateArgs),
    /// Run every stage in order.
    Run(Overrides),
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Original instance directory (defaults to <out>/windows).
    #[arg(long)]
    pub original: Option<PathBuf>,
    /// Generated instance directory (defaults to <out>/decoded).
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Report path (defaults to <out>/report/metrics.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Settings layered over the config file, or over `<out>/config.json` left
/// by an earlier stage.
#[derive(Debug, Args, Default, Clone)]
pub struct Overrides {
    /// JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Comma-separated column names.
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub period: Option<usize>,
    #[arg(long)]
    pub no_period: bool,
    #[arg(long)]
    pub no_scale: bool,
    /// fpc or fica.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub variance_target: Option<f64>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub shared_basis: bool,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKindArg>,
    #[arg(long)]
    pub url: Option<String>,
    /// Number of series to generate.
    #[arg(long)]
    pub count: Option<usize>,
    /// Stop on diversity collapse or the cap instead of a fixed count.
    #[arg(long)]
    pub diversity: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub lambda_stop: Option<f64>,
    #[arg(long)]
    pub max_generated: Option<usize>,
    #[arg(long)]
    pub max_batches: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of mdd,acd,sd,kd,ed,dtw.
    #[arg(long)]
    pub metrics: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub max_lag: Option<usize>,
    #[arg(long)]
    pub dtw_window: Option<usize>,
    #[arg(long, value_parser = parse_pairing)]
    pub pairing: Option<Pairing>,
    #[arg(long)]
    pub fault_missing: Option<f64>,
    #[arg(long)]
    pub fault_duplicate: Option<f64>,
    #[arg(long)]
    pub fault_outlier: Option<f64>,
    #[arg(long)]
    pub fault_constant_norm: bool,
}

fn parse_pairing(s: &str) -> Result<Pairing, String> {
    match s {
        "nearest" => Ok(Pairing::Nearest),
        "indexed" => Ok(Pairing::Indexed),
        _ => Err(format!("unknown pairing '{s}' (nearest, indexed)")),
    }
}

impl Overrides {
    /// Base config (explicit file, else `<out>/config.json`, else defaults)
    /// with the flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => {
                let out = self
                    .out
                    .clone()
                    .unwrap_or_else(|| RunConfig::default().out_dir);
                let saved = Layout::new(&out).config();
                let mut c = if saved.exists() {
                    RunConfig::load(saved)?
                } else {
                    RunConfig::default()
                };
                c.out_dir = out;
                c
            }
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.out_dir, self.out);
        if !self.input.is_empty() {
            cfg.input = self.input.clone();
        }
        if !self.columns.is_empty() {
            cfg.columns = self.columns.clone();
        }
        set!(cfg.mode, self.mode);
        set!(cfg.window_len, self.window_len);
        set!(cfg.n_instances, self.instances);
        if self.period.is_some() {
            cfg.period = self.period;
        }
        cfg.no_period |= self.no_period;
        if self.no_scale {
            cfg.scale = false;
        }
        set!(cfg.method, self.method);
        if let Some(k) = self.k {
            cfg.k = k;
            cfg.variance_target = None;
        }
        if self.variance_target.is_some() {
            cfg.variance_target = self.variance_target;
        }
        if self.k_max.is_some() {
            cfg.k_max = self.k_max;
        }
        cfg.shared_basis |= self.shared_basis;
        set!(cfg.backend.kind, self.backend);
        if self.url.is_some() {
            cfg.backend.url = self.url.clone();
        }
        if self.count.is_some() {
            cfg.filter.target = self.count;
        }
        if self.diversity {
            cfg.filter.target = None;
        }
        set!(cfg.sampling.batch_size, self.batch_size);
        set!(cfg.sampling.temperature, self.temperature);
        if self.max_new_tokens.is_some() {
            cfg.sampling.max_new_tokens = self.max_new_tokens;
        }
        set!(cfg.filter.lambda_stop, self.lambda_stop);
        if self.max_generated.is_some() {
            cfg.filter.max_generated = self.max_generated;
        }
        set!(cfg.filter.max_batches, self.max_batches);
        set!(cfg.seed, self.seed);
        if let Some(m) = &self.metrics {
            cfg.evaluation.metrics =
                parse_metric_list(m).map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.bins.is_some() {
            cfg.evaluation.config.bins = self.bins;
        }
        if self.max_lag.is_some() {
            cfg.evaluation.config.max_lag = self.max_lag;
        }
        if self.dtw_window.is_some() {
            cfg.evaluation.config.dtw_window = self.dtw_window;
        }
        set!(cfg.evaluation.config.pairing, self.pairing);
        set!(cfg.backend.faults.missing_rate, self.fault_missing);
        set!(cfg.backend.faults.duplicate_rate, self.fault_duplicate);
        set!(cfg.backend.faults.outlier_rate, self.fault_outlier);
        cfg.backend.faults.constant_norm |= self.fault_constant_norm;
        Ok(())
    }
}

impl Command {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Command::Segment(_) => Some(Stage::Segment),
            Command::Embed(_) => Some(Stage::Embed),
            Command::Encode(_) => Some(Stage::Encode),
            Command::Finetune(_) => Some(Stage::Finetune),
            Command::Generate(_) => Some(Stage::Generate),
            Command::Decode(_) => Some(Stage::Decode),
            Command::Evaluate(_) | Command::Run(_) => None,
        }
    }

    pub fn overrides(&self) -> &Overrides {
        match self {
            Command::Segment(o)
            | Command::Embed(o)
            | Command::Encode(o)
            | Command::Finetune(o)
            | Command::Generate(o)
            | Command::Decode(o)
            | Command::Run(o) => o,
            Command::Evaluate(e) => &e.overrides,
        }
    }
}
