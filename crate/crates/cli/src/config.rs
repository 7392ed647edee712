use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsforge_core::backend::{FaultModes, SamplingParams, TrainingParams};
use tsforge_core::embedding::{FastIcaParams, Method};
use tsforge_core::filter::StoppingRule;
use tsforge_core::metrics::{Metric, MetricConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Instances given directly, one CSV per channel, one instance per row.
    Multisample,
    /// One long single-channel series, segmented into windows.
    #[default]
    Univariate,
    /// One long multi-channel series, segmented with a shared plan.
    Multivariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKindArg {
    #[default]
    Reference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKindArg,
    pub url: Option<String>,
    /// Retries for the remote client, counting the first attempt.
    pub max_attempts: Option<u32>,
    pub faults: FaultModes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub lambda_stop: f64,
    /// `Ĩ_max`; ten times the target when unset.
    pub max_generated: Option<usize>,
    /// `Ĩ_target`; `None` switches to diversity-driven stopping.
    pub target: Option<usize>,
    pub max_batches: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            lambda_stop: StoppingRule::DEFAULT_LAMBDA_STOP,
            max_generated: None,
            target: Some(100),
            max_batches: 1000,
        }
    }
}

impl FilterConfig {
    pub fn stopping_rule(&self) -> StoppingRule {
        let cap = self
            .max_generated
            .unwrap_or(10 * self.target.unwrap_or(100));
        StoppingRule {
            lambda_stop: self.lambda_stop,
            max_generated: cap,
            target: self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    pub metrics: Vec<Metric>,
    #[serde(flatten)]
    pub config: MetricConfig,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.to_vec(),
            config: MetricConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub input: Vec<PathBuf>,
    /// Columns to keep from a wide CSV; all value columns when empty.
    pub columns: Vec<String>,
    pub mode: Mode,
    pub window_len: usize,
    pub n_instances: usize,
    /// Overrides the ACF period estimate.
    pub period: Option<usize>,
    /// Disables period alignment of the stride.
    pub no_period: bool,
    /// Per-timestamp standard scaling before embedding.
    pub scale: bool,
    pub method: Method,
    /// Components per channel; ignored when `variance_target` is set.
    pub k: usize,
    pub variance_target: Option<f64>,
    pub k_max: Option<usize>,
    pub ica_max_iter: usize,
    pub ica_tol: f64,
    /// Pools all channels into one basis and conditions prompts on the
    /// channel name.
    pub shared_basis: bool,
    pub backend: BackendConfig,
    pub training: TrainingParams,
    pub sampling: SamplingParams,
    pub filter: FilterConfig,
    pub evaluation: MetricsSection,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ica = FastIcaParams::default();
        Self {
            input: Vec::new(),
            columns: Vec::new(),
            mode: Mode::Univariate,
            window_len: 250,
            n_instances: 30,
            period: None,
            no_period: false,
            scale: true,
            method: Method::Fica,
            k: 3,
            variance_target: None,
            k_max: None,
            ica_max_iter: ica.max_iter,
            ica_tol: ica.tol,
            shared_basis: false,
            backend: BackendConfig::default(),
            training: TrainingParams::default(),
            sampling: SamplingParams::default(),
            filter: FilterConfig::default(),
            evaluation: MetricsSection::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CliError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(path.as_ref(), text)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.as_ref().display())))
    }

    /// Checks everything that can be checked before a stage runs.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.window_len < 2 {
            return fail(format!("window_len must be >= 2, got {}", self.window_len));
        }
        if self.mode != Mode::Multisample && self.n_instances < 2 {
            return fail(format!(
                "n_instances must be >= 2, got {}",
                self.n_instances
            ));
        }
        if self.variance_target.is_none() && self.k == 0 {
            return fail("k must be >= 1".into());
        }
        if let Some(t) = self.variance_target {
            if !(t > 0.0 && t <= 1.0) {
                return fail(format!("variance_target must lie in (0, 1], got {t}"));
            }
        }
        if self.shared_basis && self.mode == Mode::Univariate {
            return fail(
                "shared_basis needs several channels (multivariate or multisample mode)".into(),
            );
        }
        if self.mode == Mode::Univariate && self.columns.len() > 1 {
            return fail("univariate mode takes at most one column".into());
        }
        if self.backend.kind == BackendKindArg::Remote && self.backend.url.is_none() {
            return fail("remote backend needs a url".into());
        }
        self.backend
            .faults
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.sampling
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.filter.lambda_stop > 0.0 && self.filter.lambda_stop <= 1.0) {
            return fail(format!(
                "lambda_stop must lie in (0, 1], got {}",
                self.filter.lambda_stop
            ));
        }
        if self.filter.target == Some(0) {
            return fail("target must be >= 1".into());
        }
        if self.evaluation.metrics.is_empty() {
            return fail("no metrics selected".into());
        }
        Ok(())
    }

    pub fn ica_params(&self, seed: u64) -> FastIcaParams {
        FastIcaParams {
            max_iter: self.ica_max_iter,
            tol: self.ica_tol,
            seed,
        }
    }
}
