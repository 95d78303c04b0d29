//! Output staging: every file is rendered in memory first and written only
//! after the whole experiment succeeded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Experiment, ExperimentConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    files: Vec<&'a str>,
    summary: &'a serde_json::Value,
    config: &'a ExperimentConfig,
}

impl Outputs {
    /// Renders one file through `write`.
    pub fn render(
        &mut self,
        name: impl Into<String>,
        write: impl FnOnce(&mut Vec<u8>) -> kvevict::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.files.push((name.into(), buf));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes all files plus the manifest into `dir`. Files are written under
    /// temporary names and renamed once all of them exist; on failure the
    /// temporaries are removed.
    pub fn commit(
        mut self,
        dir: &Path,
        experiment: Experiment,
        summary: &serde_json::Value,
        config: &ExperimentConfig,
    ) -> Result<Vec<PathBuf>, CliError> {
        let manifest = Manifest {
            experiment: experiment.name(),
            files: self.names().collect(),
            summary,
            config,
        };
        let mut text = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Output(e.to_string()))?;
        text.push(b'\n');
        self.files.push((MANIFEST.to_string(), text));

        fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))?;
        let staged: Vec<(PathBuf, PathBuf)> = self
            .files
            .iter()
            .map(|(name, _)| (dir.join(format!(".{name}.partial")), dir.join(name)))
            .collect();
        let cleanup = |upto: usize| {
            for (tmp, _) in &staged[..upto] {
                let _ = fs::remove_file(tmp);
            }
        };
        for (i, ((tmp, _), (_, bytes))) in staged.iter().zip(&self.files).enumerate() {
            if let Err(e) = fs::write(tmp, bytes) {
                cleanup(i + 1);
                return Err(CliError::Output(format!("{}: {e}", tmp.display())));
            }
        }
        for (tmp, dst) in &staged {
            fs::rename(tmp, dst).map_err(|e| CliError::Output(format!("{}: {e}", dst.display())))?;
        }
        Ok(staged.into_iter().map(|(_, dst)| dst).collect())
    }
}
