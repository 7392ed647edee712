//! Staged pipeline around `tsforge-core`: every stage reads the artifacts of
//! the previous one from the output directory, so stages can be run one at a
//! time or all together.

pub mod args;
pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

use std::fs;

pub use artifacts::{ArtifactEntry, Layout, RunManifest, StageRecord};
pub use config::{BackendConfig, BackendKindArg, FilterConfig, MetricsSection, Mode, RunConfig};
pub use error::{CliError, Stage};
pub use stages::{decode_table, evaluate_dirs, run_stage, stage_seed};

fn prepare(cfg: &RunConfig) -> Result<Layout, CliError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    fs::create_dir_all(layout.root())
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", layout.root().display())))?;
    cfg.save(layout.config())?;
    Ok(layout)
}

/// Runs every stage in order. The manifest is rewritten after each stage, so
/// a failed run leaves the completed stages' artifacts and records behind.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let layout = prepare(cfg)?;
    let mut manifest = RunManifest::new(cfg.clone());
    for stage in Stage::ALL {
        let record = run_stage(stage, cfg, &layout);
        match record {
            Ok(r) => {
                manifest.upsert(r);
                manifest.save(layout.manifest())?;
            }
            Err(e) => {
                manifest.save(layout.manifest())?;
                return Err(e);
            }
        }
    }
    Ok(manifest)
}

/// Runs one stage and merges its record into the existing manifest.
pub fn run_single_stage(stage: Stage, cfg: &RunConfig) -> Result<StageRecord, CliError> {
    let layout = prepare(cfg)?;
    let mut manifest = if layout.manifest().exists() {
        RunManifest::load(layout.manifest())?
    } else {
        RunManifest::new(cfg.clone())
    };
    manifest.config = cfg.clone();
    let record = run_stage(stage, cfg, &layout)?;
    manifest.upsert(record.clone());
    manifest.save(layout.manifest())?;
    Ok(record)
}
