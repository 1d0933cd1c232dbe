use std::path::Path;
use std::process::Command;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::common::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one invocation: enough to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved settings, defaults included.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub started_at: String,
    pub finished_at: String,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// `git describe` of the source tree the binary was built from, or "unknown".
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub struct RunRecorder {
    command: String,
    argv: Vec<String>,
    started_at: String,
}

impl RunRecorder {
    pub fn start(command: &str, argv: Vec<String>) -> Self {
        Self {
            command: command.into(),
            argv,
            started_at: now(),
        }
    }

    /// Write `manifest.json` into `out` via rename, after checking every listed output exists.
    pub fn finish(
        self,
        out: &Path,
        config: serde_json::Value,
        seed: Option<u64>,
        outputs: Vec<String>,
    ) -> Result<RunManifest, CliError> {
        for o in &outputs {
            if !out.join(o).exists() {
                return Err(CliError::Usage(format!("output {o} was not written")));
            }
        }
        let m = RunManifest {
            command: self.command,
            argv: self.argv,
            config,
            seed,
            git_describe: git_describe(),
            started_at: self.started_at,
            finished_at: now(),
            outputs,
        };
        let tmp = out.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(&m)? + "\n")?;
        std::fs::rename(&tmp, out.join(MANIFEST_FILE))?;
        Ok(m)
    }
}
