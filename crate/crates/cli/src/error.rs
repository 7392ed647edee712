use std::fmt;

use tsforge_core::Error as CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Segment,
    Embed,
    Encode,
    Finetune,
    Generate,
    Decode,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Segment,
        Stage::Embed,
        Stage::Encode,
        Stage::Finetune,
        Stage::Generate,
        Stage::Decode,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Segment => "segment",
            Stage::Embed => "embed",
            Stage::Encode => "encode",
            Stage::Finetune => "finetune",
            Stage::Generate => "generate",
            Stage::Decode => "decode",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Stream id used to split the root generator.
    pub(crate) fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: CoreError,
    },

    #[error("stage '{stage}': missing upstream artifact {path}")]
    MissingArtifact { stage: Stage, path: String },
}

impl CliError {
    pub fn stage(stage: Stage) -> impl FnOnce(CoreError) -> CliError {
        move |source| CliError::Stage { stage, source }
    }

    /// 2 config error, 3 stage failure, 4 remote-backend failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage {
                source: CoreError::Transport { .. } | CoreError::Remote(_),
                ..
            } => 4,
            CliError::Stage { .. } | CliError::MissingArtifact { .. } => 3,
        }
    }
}
