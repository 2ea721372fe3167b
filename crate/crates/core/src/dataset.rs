//! Patch-parallel dataset generation and manifest-driven regeneration.
//!
//! Patch `i` draws everything from `sub_seed(global_seed, i)`. Labels and
//! images use separate forks of that seed, so changing image parameters never
//! changes the labels, and any single patch can be rebuilt alone.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{synthesize_image, ImageSynthParams};
use crate::io::config::Config;
use crate::io::manifest::{payload_checksum, DatasetManifest, PatchRecord, MANIFEST_FILE};
use crate::io::nifti::{read_labels, write_volume, VolumeData};
use crate::io::IoError;
use crate::sampling::{sub_seed, SeededRng};
use crate::vessels::{synthesize_label_volume, LabelSynthParams, VesselTree};
use crate::volume::{IntensityVolume, LabelVolume};

/// Fork tag of the label stream within a patch seed.
pub const LABEL_STREAM: u64 = 0x4c41_4245_4c53;
/// Fork tag of the image stream within a patch seed.
pub const IMAGE_STREAM: u64 = 0x494d_4147_4553;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("{} regenerated with checksum {got}, manifest says {expected}", path.display())]
    ChecksumMismatch { path: PathBuf, expected: String, got: String },
}

pub fn patch_seed(global_seed: u64, index: usize) -> u64 {
    sub_seed(global_seed, index as u64)
}

pub fn label_rng(patch_seed: u64) -> SeededRng {
    SeededRng::new(patch_seed).fork(LABEL_STREAM)
}

pub fn image_rng(patch_seed: u64) -> SeededRng {
    SeededRng::new(patch_seed).fork(IMAGE_STREAM)
}

pub fn synthesize_patch_labels(patch_seed: u64, params: &LabelSynthParams) -> (LabelVolume, Vec<VesselTree>) {
    synthesize_label_volume(params, &mut label_rng(patch_seed))
}

pub fn synthesize_patch_image(patch_seed: u64, labels: &LabelVolume, params: &ImageSynthParams) -> IntensityVolume {
    synthesize_image(labels, params, &image_rng(patch_seed))
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub seed: u64,
    pub n: usize,
    pub workers: usize,
    pub compress: bool,
    /// Also synthesize images (otherwise labels only).
    pub images: bool,
}

fn ext(compress: bool) -> &'static str {
    if compress {
        "nii.gz"
    } else {
        "nii"
    }
}

pub fn label_rel_path(index: usize, compress: bool) -> PathBuf {
    PathBuf::from(format!("labels/patch_{index:06}.{}", ext(compress)))
}

pub fn image_rel_path(index: usize, compress: bool) -> PathBuf {
    PathBuf::from(format!("images/patch_{index:06}.{}", ext(compress)))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, DatasetError> {
    if workers == 0 {
        return Err(DatasetError::Invalid("worker count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| DatasetError::Invalid(format!("cannot start worker pool: {e}")))
}

fn write_and_sum(root: &Path, rel: &Path, data: VolumeData) -> Result<String, IoError> {
    write_volume(&root.join(rel), &data)?;
    Ok(payload_checksum(&data))
}

fn generate_one(out: &Path, config: &Config, opts: &GenerateOptions, index: usize) -> Result<PatchRecord, DatasetError> {
    let start = Instant::now();
    let seed = patch_seed(opts.seed, index);
    let (labels, trees) = synthesize_patch_labels(seed, &config.labels);
    let label_path = label_rel_path(index, opts.compress);
    let (image_path, image_checksum, image_params) = if opts.images {
        let image = synthesize_patch_image(seed, &labels, &config.images);
        let rel = image_rel_path(index, opts.compress);
        let sum = write_and_sum(out, &rel, image.into())?;
        (Some(rel), Some(sum), Some(config.images.clone()))
    } else {
        (None, None, None)
    };
    let label_checksum = write_and_sum(out, &label_path, labels.into())?;
    let branch_count = trees.iter().map(VesselTree::len).sum();
    log::info!(
        "patch {index}: {} trees, {branch_count} branches, {:.2}s",
        trees.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(PatchRecord {
        index,
        sub_seed: seed,
        label_params: config.labels.clone(),
        image_params,
        label_path,
        label_checksum,
        image_path,
        image_checksum,
        tree_count: trees.len(),
        branch_count,
    })
}

/// Generate `opts.n` patches under `out` and write `out/manifest.json` last.
/// On failure no new manifest is written.
pub fn generate_dataset(out: &Path, config: &Config, opts: &GenerateOptions) -> Result<DatasetManifest, DatasetError> {
    if opts.n == 0 {
        return Err(DatasetError::Invalid("patch count must be at least 1".into()));
    }
    config.labels.validate().map_err(DatasetError::Invalid)?;
    config.images.validate().map_err(DatasetError::Invalid)?;
    let pool = pool(opts.workers)?;
    for sub in ["labels", "images"].iter().take(if opts.images { 2 } else { 1 }) {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| IoError::io(&dir, e))?;
    }
    let manifest_path = out.join(MANIFEST_FILE);
    // A stale manifest would describe files about to be overwritten.
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| IoError::io(&manifest_path, e))?;
    }
    let start = Instant::now();
    let records = pool.install(|| {
        (0..opts.n)
            .into_par_iter()
            .map(|i| generate_one(out, config, opts, i))
            .collect::<Result<Vec<_>, _>>()
    })?;
    log::info!("generated {} patches in {:.2}s", opts.n, start.elapsed().as_secs_f64());
    let mut manifest = DatasetManifest::new(opts.seed, config.preset.clone(), opts.compress);
    manifest.patches = records;
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

/// Synthesize images for an existing label-only (or labeled) dataset.
/// Labels are read from disk; the image stream of each patch is re-derived
/// from its recorded sub-seed.
pub fn generate_images_from_manifest(out: &Path, params: &ImageSynthParams, workers: usize) -> Result<DatasetManifest, DatasetError> {
    params.validate().map_err(DatasetError::Invalid)?;
    let manifest_path = out.join(MANIFEST_FILE);
    let mut manifest = DatasetManifest::load(&manifest_path)?;
    let pool = pool(workers)?;
    let compress = manifest.compress;
    let results = pool.install(|| {
        manifest
            .patches
            .par_iter()
            .map(|rec| -> Result<(PathBuf, String), DatasetError> {
                let start = Instant::now();
                let labels = read_labels(&out.join(&rec.label_path))?;
                let image = synthesize_patch_image(rec.sub_seed, &labels, params);
                let rel = image_rel_path(rec.index, compress);
                let sum = write_and_sum(out, &rel, image.into())?;
                log::info!("patch {} image: {:.2}s", rec.index, start.elapsed().as_secs_f64());
                Ok((rel, sum))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    for (rec, (rel, sum)) in manifest.patches.iter_mut().zip(results) {
        rec.image_params = Some(params.clone());
        rec.image_path = Some(rel);
        rec.image_checksum = Some(sum);
    }
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

fn regenerate_one(root: &Path, rec: &PatchRecord) -> Result<(), DatasetError> {
    let check = |rel: &Path, expected: &str, data: VolumeData| -> Result<(), DatasetError> {
        let got = write_and_sum(root, rel, data)?;
        if got != expected {
            return Err(DatasetError::ChecksumMismatch { path: root.join(rel), expected: expected.to_string(), got });
        }
        Ok(())
    };
    let (labels, _) = synthesize_patch_labels(rec.sub_seed, &rec.label_params);
    if let (Some(params), Some(rel), Some(sum)) = (&rec.image_params, &rec.image_path, &rec.image_checksum) {
        let image = synthesize_patch_image(rec.sub_seed, &labels, params);
        check(rel, sum, image.into())?;
    }
    check(&rec.label_path, &rec.label_checksum, labels.into())
}

/// Rebuild every volume a manifest references and confirm each checksum.
pub fn regenerate_from_manifest(root: &Path, workers: usize) -> Result<DatasetManifest, DatasetError> {
    let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
    let pool = pool(workers)?;
    pool.install(|| manifest.patches.par_iter().try_for_each(|rec| regenerate_one(root, rec)))?;
    Ok(manifest)
}
