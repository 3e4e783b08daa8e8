//! Library side of the `rescore` command-line tool.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};

use rescore_core::model::Variant;
use rescore_core::Error;

/// Exit code 1 for bad input, 2 for internal failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Input(_) | Error::Parse { .. } | Error::Io { .. } => CliError::Input(msg),
            Error::Usage(_) | Error::Dimension { .. } | Error::Diverged { .. } => CliError::Internal(msg),
        }
    }
}

/// Second-pass scorers the tool can train and apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scorer {
    Tra,
    Tr,
    Ngram,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::Tra => "tra",
            Scorer::Tr => "tr",
            Scorer::Ngram => "ngram",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Scorer::Tra => Some(Variant::Tra),
            Scorer::Tr => Some(Variant::Tr),
            Scorer::Ngram => None,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "dev", "eval"];

/// Where each command reads and writes inside the work directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub work: PathBuf,
    pub data: PathBuf,
}

impl Layout {
    /// `data` defaults to `<work>/data`.
    pub fn new(work: &Path, data: Option<&Path>) -> Self {
        Self { work: work.to_path_buf(), data: data.map_or_else(|| work.join("data"), Path::to_path_buf) }
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.data.join(format!("{name}.jsonl"))
    }

    pub fn tokenizer_dir(&self) -> PathBuf {
        self.work.join("tokenizer")
    }

    pub fn vocab(&self) -> PathBuf {
        self.tokenizer_dir().join("vocab.txt")
    }

    pub fn model_dir(&self, s: Scorer) -> PathBuf {
        self.work.join("models").join(s.name())
    }

    pub fn arpa(&self) -> PathBuf {
        self.model_dir(Scorer::Ngram).join("lm.arpa")
    }

    pub fn scores_dir(&self, s: Scorer) -> PathBuf {
        self.work.join("scores").join(s.name())
    }

    pub fn scores(&self, s: Scorer, split: &str) -> PathBuf {
        self.scores_dir(s).join(format!("{split}.jsonl"))
    }

    pub fn tune_dir(&self, s: Scorer) -> PathBuf {
        self.work.join("tune").join(s.name())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.work.join("report")
    }
}
