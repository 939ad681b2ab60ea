//! Run directories, their manifests and config loading.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use polyinter_core::config::Config;
use polyinter_core::training::Stage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "ckpt.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_DIR: &str = "eval";

/// Git object hash of `bytes` in the SHA-256 object format:
/// `sha256("blob <len>\0" ++ bytes)`.
pub fn git_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse and validate a TOML config. Errors name the file and the field
/// path.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let de =
        toml::Deserializer::parse(&text).with_context(|| format!("config {}", path.display()))?;
    let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        anyhow::anyhow!(
            "config {}: {at}: {}",
            path.display(),
            e.into_inner().message().trim()
        )
    })?;
    cfg.validate()
        .with_context(|| format!("config {}", path.display()))?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub role: String,
    pub path: PathBuf,
    pub hash: String,
}

impl FileRecord {
    pub fn of(role: &str, path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .with_context(|| format!("cannot read {role} file {}", path.display()))?;
        let path =
            fs::canonicalize(path).with_context(|| format!("cannot resolve {}", path.display()))?;
        Ok(Self {
            role: role.into(),
            path,
            hash: git_hash(&bytes),
        })
    }
}

/// `manifest.json` of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub stage: Option<Stage>,
    pub config_hash: String,
    pub seed: u64,
    pub steps: Option<usize>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Parameters updated by this run's training phase.
    pub trainable_params: Option<usize>,
    pub interpreter_params: Option<usize>,
    pub trainable_fraction: Option<f64>,
    pub config: Config,
}

impl RunManifest {
    pub fn input(&self, role: &str) -> Option<&FileRecord> {
        self.inputs.iter().find(|f| f.role == role)
    }
}

/// Handle on a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Create `parent/name`, refusing to touch an existing non-empty
    /// directory.
    pub fn create(parent: &Path, name: &str) -> Result<Self> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            bail!("invalid run name `{name}`");
        }
        let path = parent.join(name);
        if path.exists()
            && fs::read_dir(&path)
                .with_context(|| format!("cannot list {}", path.display()))?
                .next()
                .is_some()
        {
            bail!(
                "run directory {} already exists and is not empty",
                path.display()
            );
        }
        fs::create_dir_all(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(Self { path })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.join(MANIFEST).is_file() {
            bail!("{} is not a run directory (no {MANIFEST})", path.display());
        }
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.file(CHECKPOINT)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let p = self.file(MANIFEST);
        let text =
            fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed {}", p.display()))
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<()> {
        write_new(
            &self.file(MANIFEST),
            serde_json::to_string_pretty(m)?.as_bytes(),
        )
    }
}

/// Write a file that must not exist yet.
pub fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    f.write_all(bytes)?;
    Ok(())
}
