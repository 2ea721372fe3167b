//! Dataset manifest: everything needed to regenerate each patch bit for bit.
//!
//! Checksums are XXH3-64 over the little-endian voxel payload (not the file
//! bytes), so compressed and uncompressed copies of a volume agree.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti::{read_volume, VolumeData};
use super::{write_atomic, IoError};
use crate::image::ImageSynthParams;
use crate::vessels::LabelSynthParams;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;
pub const CHECKSUM_ALGORITHM: &str = "xxh3-64 over little-endian voxel payload";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub index: usize,
    pub sub_seed: u64,
    pub label_params: LabelSynthParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_params: Option<ImageSynthParams>,
    /// Relative to the dataset directory.
    pub label_path: PathBuf,
    pub label_checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_checksum: Option<String>,
    pub tree_count: usize,
    pub branch_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub engine: String,
    pub engine_version: String,
    pub prng: String,
    pub checksum_algorithm: String,
    pub global_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub compress: bool,
    pub patches: Vec<PatchRecord>,
}

impl DatasetManifest {
    pub fn new(global_seed: u64, preset: Option<String>, compress: bool) -> Self {
        Self {
            format_version: MANIFEST_FORMAT,
            engine: env!("CARGO_PKG_NAME").to_string(),
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            prng: crate::sampling::PRNG_NAME.to_string(),
            checksum_algorithm: CHECKSUM_ALGORITHM.to_string(),
            global_seed,
            preset,
            compress,
            patches: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| IoError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("manifest JSON: {e}"),
        })?;
        if m.format_version != MANIFEST_FORMAT {
            return Err(IoError::Invalid {
                path: path.to_path_buf(),
                message: format!("manifest format {} is not supported (expected {MANIFEST_FORMAT})", m.format_version),
            });
        }
        Ok(m)
    }

    /// Atomic write: readers see either the old manifest or the new one.
    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        write_atomic(path, json.as_bytes())
    }

    /// Every `(relative path, expected checksum)` the manifest references.
    pub fn files(&self) -> Vec<(&Path, &str)> {
        let mut out = Vec::new();
        for p in &self.patches {
            out.push((p.label_path.as_path(), p.label_checksum.as_str()));
            if let (Some(path), Some(sum)) = (&p.image_path, &p.image_checksum) {
                out.push((path.as_path(), sum.as_str()));
            }
        }
        out
    }

    /// Files under `root` that are missing or whose checksum differs.
    pub fn verify(&self, root: &Path) -> Vec<(PathBuf, String)> {
        self.files()
            .into_iter()
            .filter_map(|(rel, expected)| {
                let path = root.join(rel);
                match read_volume(&path) {
                    Ok((_, data)) if payload_checksum(&data) == expected => None,
                    Ok((_, data)) => Some((path, format!("checksum {} != {expected}", payload_checksum(&data)))),
                    Err(e) => Some((path, e.to_string())),
                }
            })
            .collect()
    }
}

pub fn checksum_bytes(bytes: &[u8]) -> String {
    format!("xxh3:{:016x}", xxhash_rust::xxh3::xxh3_64(bytes))
}

pub fn payload_checksum(data: &VolumeData) -> String {
    checksum_bytes(&data.payload_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::nifti::write_volume;
    use crate::volume::LabelVolume;

    #[test]
    fn checksum_ignores_compression() {
        let dir = tempfile::tempdir().unwrap();
        let v: VolumeData = LabelVolume::filled([3, 3, 3], 20.0, 4).into();
        write_volume(&dir.path().join("a.nii"), &v).unwrap();
        write_volume(&dir.path().join("a.nii.gz"), &v).unwrap();
        let a = payload_checksum(&read_volume(&dir.path().join("a.nii")).unwrap().1);
        let b = payload_checksum(&read_volume(&dir.path().join("a.nii.gz")).unwrap().1);
        assert_eq!(a, b);
        assert!(a.starts_with("xxh3:") && a.len() == 21);
    }

    #[test]
    fn save_load_verify() {
        let dir = tempfile::tempdir().unwrap();
        let v: VolumeData = LabelVolume::filled([3, 3, 3], 20.0, 4).into();
        write_volume(&dir.path().join("labels/p.nii"), &v).unwrap();
        let mut m = DatasetManifest::new(7, None, false);
        m.patches.push(PatchRecord {
            index: 0,
            sub_seed: 1,
            label_params: LabelSynthParams::default(),
            image_params: None,
            label_path: "labels/p.nii".into(),
            label_checksum: payload_checksum(&v),
            image_path: None,
            image_checksum: None,
            tree_count: 0,
            branch_count: 0,
        });
        let path = dir.path().join(MANIFEST_FILE);
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(back.verify(dir.path()).is_empty());
        std::fs::remove_file(dir.path().join("labels/p.nii")).unwrap();
        assert_eq!(back.verify(dir.path()).len(), 1);
    }
}
