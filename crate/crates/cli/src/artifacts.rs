use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Stage};

/// Fixed artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dirs(&self, stage: Stage) -> Vec<PathBuf> {
        let names: &[&str] = match stage {
            Stage::Segment => &["windows"],
            Stage::Embed => &["basis", "table"],
            Stage::Encode => &["prompts"],
            Stage::Finetune => &["model"],
            Stage::Generate => &["generated"],
            Stage::Decode => &["decoded"],
            Stage::Evaluate => &["report"],
        };
        names.iter().map(|n| self.root.join(n)).collect()
    }

    pub fn windows(&self) -> PathBuf {
        self.root.join("windows")
    }

    pub fn plan(&self) -> PathBuf {
        self.root.join("windows/plan.json")
    }

    pub fn scaler(&self) -> PathBuf {
        self.root.join("windows/scaler.json")
    }

    pub fn basis(&self) -> PathBuf {
        self.root.join("basis/basis.json")
    }

    pub fn k_selection(&self) -> PathBuf {
        self.root.join("basis/k_selection.json")
    }

    pub fn table(&self) -> PathBuf {
        self.root.join("table/table.csv")
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("prompts/corpus.txt")
    }

    pub fn handle(&self) -> PathBuf {
        self.root.join("model/handle.json")
    }

    pub fn reference_model(&self) -> PathBuf {
        self.root.join("model/reference.json")
    }

    pub fn generated_table(&self) -> PathBuf {
        self.root.join("generated/table.csv")
    }

    pub fn filter_log(&self, label: Option<&str>) -> PathBuf {
        match label {
            Some(l) => self.root.join(format!("generated/filter_log.{l}.jsonl")),
            None => self.root.join("generated/filter_log.jsonl"),
        }
    }

    pub fn generation_summary(&self) -> PathBuf {
        self.root.join("generated/summary.json")
    }

    pub fn decoded(&self) -> PathBuf {
        self.root.join("decoded")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report/metrics.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    /// Fails with the expected path when an upstream artifact is absent.
    pub fn require(&self, stage: Stage, path: &Path) -> Result<(), CliError> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::MissingArtifact {
                stage,
                path: path.display().to_string(),
            })
        }
    }

    /// Empties (or creates) the directories a stage writes to.
    pub fn reset(&self, stage: Stage) -> std::io::Result<()> {
        for d in self.stage_dirs(stage) {
            if d.exists() {
                fs::remove_dir_all(&d)?;
            }
            fs::create_dir_all(&d)?;
        }
        Ok(())
    }

    pub fn collect(&self, stage: Stage) -> std::io::Result<Vec<ArtifactEntry>> {
        let mut files = Vec::new();
        for d in self.stage_dirs(stage) {
            walk(&d, &mut files)?;
        }
        files.sort();
        files
            .into_iter()
            .map(|f| {
                let bytes = fs::read(&f)?;
                let rel = f.strip_prefix(&self.root).unwrap_or(&f);
                Ok(ArtifactEntry {
                    path: rel
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy())
                        .collect::<Vec<_>>()
                        .join("/"),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect()
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seconds: f64,
    pub artifacts: Vec<ArtifactEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            stages: Vec::new(),
        }
    }

    /// Replaces the record of `record.stage`, keeping stage order.
    pub fn upsert(&mut self, record: StageRecord) {
        self.stages.retain(|s| s.stage != record.stage);
        self.stages.push(record);
        self.stages.sort_by_key(|s| s.stage as u8);
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// Every artifact path with its hash.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .flat_map(|s| {
                s.artifacts
                    .iter()
                    .map(|a| (a.path.clone(), a.sha256.clone()))
            })
            .collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CliError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(path.as_ref(), text)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.as_ref().display())))
    }
}
