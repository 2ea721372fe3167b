//! Volume persistence, configuration and dataset manifests.

pub mod config;
pub mod manifest;
pub mod nifti;
pub mod stream;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{parse_config, parse_config_str, preset, Config, ConfigError, GenerationSettings};
pub use manifest::{payload_checksum, DatasetManifest, PatchRecord};
pub use nifti::{read_volume, write_volume, ValueKind, VolumeData, VolumeHeader};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: malformed file at byte {offset}: {message}", path.display())]
    Format { path: PathBuf, offset: usize, message: String },
    #[error("{}: truncated payload, expected {expected} bytes, found {got}", path.display())]
    Length { path: PathBuf, expected: usize, got: usize },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// True for failures of the filesystem itself, as opposed to bad content.
    pub fn is_filesystem(&self) -> bool {
        matches!(self, Self::Io { .. })
    }
}

/// Write `bytes` next to `path` and rename into place, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| IoError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
}
