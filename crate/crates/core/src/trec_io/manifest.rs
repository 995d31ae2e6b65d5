use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrecError;
use crate::grades::Grade;

/// Collection manifest. The grade range is declared here rather than inferred
/// from the qrels, which may lack examples of some grades.
///
/// ```toml
/// name = "trec7"
/// max_grade = 1
/// qrels = "qrels.txt"
/// runs = ["runs"]          # files, or directories of run files
/// probs = "probs.jsonl"
/// topics = "topics.jsonl"
/// documents = "docs.jsonl"
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub max_grade: Grade,
    pub qrels: PathBuf,
    #[serde(default)]
    pub runs: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topics: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub documents: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, TrecError> {
        let text = fs::read_to_string(path).map_err(|e| {
            TrecError::InvalidManifest(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut manifest = Self::from_toml(&text)?;
        manifest.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(manifest)
    }

    pub fn from_toml(text: &str) -> Result<Self, TrecError> {
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| TrecError::InvalidManifest(e.to_string()))?;
        if manifest.max_grade == 0 {
            return Err(TrecError::InvalidManifest(
                "max_grade must be at least 1".into(),
            ));
        }
        if manifest.name.trim().is_empty() {
            return Err(TrecError::InvalidManifest("name is empty".into()));
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// All run files, expanding directories in name order.
    pub fn run_files(&self) -> Result<Vec<PathBuf>, TrecError> {
        let mut files = Vec::new();
        for entry in &self.runs {
            let path = self.resolve(entry);
            if path.is_dir() {
                let mut inner: Vec<PathBuf> = fs::read_dir(&path)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                inner.sort();
                files.extend(inner);
            } else {
                files.push(path);
            }
        }
        Ok(files)
    }
}
