//! Run manifest: what was run, with which inputs and config, and a
//! checksum for every file it produced.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<Artifact>,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect(&path, root, out)?;
        } else if path != root.join(MANIFEST_NAME) {
            out.push(path);
        }
    }
    Ok(())
}

/// Checksums of every file under `dir` except the manifest itself.
pub fn artifacts(dir: &Path) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).expect("under dir");
            Ok(Artifact {
                path: rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/"),
                sha256: sha256_file(&p)?,
                bytes: std::fs::metadata(&p)?.len(),
            })
        })
        .collect()
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    output_dir: PathBuf,
    seed: Option<u64>,
    started_at: String,
}

impl ManifestBuilder {
    pub fn start(command: &str, output_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            output_dir: output_dir.to_path_buf(),
            seed: None,
            started_at: now(),
        }
    }

    pub fn config(&mut self, config: impl Serialize) -> &mut Self {
        self.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    /// Checksums the output directory and writes the manifest into it.
    pub fn finish(&self, error: Option<&anyhow::Error>) -> Result<RunManifest> {
        std::fs::create_dir_all(&self.output_dir)?;
        let manifest = RunManifest {
            command: self.command.clone(),
            status: if error.is_some() { "failed" } else { "ok" }.into(),
            error: error.map(|e| format!("{e:#}")),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            started_at: self.started_at.clone(),
            finished_at: now(),
            artifacts: artifacts(&self.output_dir)?,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.output_dir.join(MANIFEST_NAME), text)?;
        Ok(manifest)
    }
}

/// Recomputes every checksum listed in the manifest at `path`.
pub fn verify(path: &Path) -> Result<RunManifest> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text).context("parsing manifest")?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for a in &manifest.artifacts {
        let file = dir.join(&a.path);
        let actual = sha256_file(&file)?;
        if actual != a.sha256 {
            bail!(
                "checksum mismatch for {}: manifest {}, file {actual}",
                a.path,
                a.sha256
            );
        }
    }
    Ok(manifest)
}
