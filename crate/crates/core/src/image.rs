//! Label-to-image synthesis.
//!
//! Pipeline: smooth parenchyma label map, per-label intensity, vessel
//! multiplier (textured or constant), element-wise fusion, gamma speckle,
//! then optional slab banding and optional spheres, and a final min-max
//! normalization into `[0, 1]`. Every stage draws from its own stream forked
//! off the caller's, so switching one stage off leaves the others' draws
//! untouched.

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{interpolation_matrix, Point3};
use crate::sampling::{DistSpec, SeededRng};
use crate::volume::{voxel_count, IntensityVolume, LabelVolume, Shape, Volume, VolumeError};

/// Vessel multiplier used when intra-vessel texture is switched off.
pub const ABLATED_VESSEL_MULTIPLIER: f32 = 0.25;
/// Upper end of the textured vessel multiplier range.
pub const VESSEL_MULTIPLIER_MAX: f32 = 0.5;

pub const STAGE_PARENCHYMA_LABELS: u64 = 1;
pub const STAGE_PARENCHYMA_INTENSITY: u64 = 2;
pub const STAGE_VESSEL_TEXTURE: u64 = 3;
pub const STAGE_SPECKLE: u64 = 4;
pub const STAGE_BANDING: u64 = 5;
pub const STAGE_SPHERES: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSynthParams {
    pub n_parenchyma_maps: DistSpec,
    pub spline_ctrl_per_dim: DistSpec,
    pub parenchyma_intensity_var: f64,
    pub vessel_texture_mean: DistSpec,
    pub vessel_texture_var: f64,
    pub speckle_sd: DistSpec,
    pub band_width: DistSpec,
    /// Multiplicative factor applied to each band.
    pub band_factor: DistSpec,
    pub sphere_radius: DistSpec,
    /// Spheres per voxel.
    pub sphere_freq: DistSpec,
    pub sphere_intensity: DistSpec,
    pub enable_banding: bool,
    pub enable_vessel_texture: bool,
    pub enable_spheres: bool,
}

impl Default for ImageSynthParams {
    fn default() -> Self {
        Self {
            n_parenchyma_maps: DistSpec::uniform_int(2, 10),
            spline_ctrl_per_dim: DistSpec::uniform_int(3, 10),
            parenchyma_intensity_var: 0.04,
            vessel_texture_mean: DistSpec::uniform(0.7, 1.0),
            vessel_texture_var: 0.64,
            speckle_sd: DistSpec::uniform(0.2, 0.8),
            band_width: DistSpec::uniform_int(2, 32),
            band_factor: DistSpec::uniform(0.5, 1.5),
            sphere_radius: DistSpec::uniform_int(2, 8),
            sphere_freq: DistSpec::uniform(1e-5, 1e-3),
            sphere_intensity: DistSpec::uniform(0.1, 2.0),
            enable_banding: true,
            enable_vessel_texture: true,
            enable_spheres: true,
        }
    }
}

impl ImageSynthParams {
    pub fn validate(&self) -> Result<(), String> {
        let dists = [
            ("n_parenchyma_maps", &self.n_parenchyma_maps),
            ("spline_ctrl_per_dim", &self.spline_ctrl_per_dim),
            ("vessel_texture_mean", &self.vessel_texture_mean),
            ("speckle_sd", &self.speckle_sd),
            ("band_width", &self.band_width),
            ("band_factor", &self.band_factor),
            ("sphere_radius", &self.sphere_radius),
            ("sphere_freq", &self.sphere_freq),
            ("sphere_intensity", &self.sphere_intensity),
        ];
        for (name, d) in dists {
            d.validate().map_err(|e| format!("image.{name}: {e}"))?;
        }
        if self.n_parenchyma_maps.a < 1.0 {
            return Err("image.n_parenchyma_maps must be at least 1".into());
        }
        if self.spline_ctrl_per_dim.a < 2.0 {
            return Err("image.spline_ctrl_per_dim must be at least 2".into());
        }
        if self.speckle_sd.a < 0.0 {
            return Err("image.speckle_sd must be non-negative".into());
        }
        if self.band_width.a < 1.0 {
            return Err("image.band_width must be at least 1".into());
        }
        if !(self.parenchyma_intensity_var >= 0.0) || !(self.vessel_texture_var >= 0.0) {
            return Err("image variances must be non-negative".into());
        }
        Ok(())
    }
}

/// Smooth scalar field: natural cubic upsampling of a control grid.
/// `controls` is laid out x-fastest with dimensions `ctrl`.
pub fn smooth_field(shape: Shape, ctrl: [usize; 3], controls: &[f64]) -> Vec<f64> {
    assert_eq!(controls.len(), ctrl[0] * ctrl[1] * ctrl[2], "control grid size");
    let [nx, ny, nz] = shape;
    let [cx, cy, cz] = ctrl;
    let wx = interpolation_matrix(cx, nx).expect("cx >= 2");
    let wy = interpolation_matrix(cy, ny).expect("cy >= 2");
    let wz = interpolation_matrix(cz, nz).expect("cz >= 2");

    // x pass: [nx, cy, cz]
    let mut a = vec![0.0; nx * cy * cz];
    for k in 0..cz {
        for j in 0..cy {
            let src = &controls[cx * (j + cy * k)..cx * (j + cy * k + 1)];
            let dst = &mut a[nx * (j + cy * k)..nx * (j + cy * k + 1)];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = wx[x].iter().zip(src).map(|(w, c)| w * c).sum();
            }
        }
    }
    // y pass: [nx, ny, cz]
    let mut b = vec![0.0; nx * ny * cz];
    for k in 0..cz {
        for y in 0..ny {
            let dst = &mut b[nx * (y + ny * k)..nx * (y + ny * k + 1)];
            for (j, w) in wy[y].iter().enumerate() {
                let src = &a[nx * (j + cy * k)..nx * (j + cy * k + 1)];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    // z pass: [nx, ny, nz]
    let plane = nx * ny;
    let mut out = vec![0.0; plane * nz];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, dst)| {
        for (k, w) in wz[z].iter().enumerate() {
            let src = &b[plane * k..plane * (k + 1)];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    });
    out
}

fn random_field(shape: Shape, ctrl: [usize; 3], rng: &mut SeededRng) -> Vec<f64> {
    let controls: Vec<f64> = (0..ctrl[0] * ctrl[1] * ctrl[2]).map(|_| rng.standard_normal()).collect();
    smooth_field(shape, ctrl, &controls)
}

/// Label each voxel with the 1-based index of the largest field; ties go
/// to the lowest index.
pub fn argmax_labels(shape: Shape, fields: impl IntoIterator<Item = Vec<f64>>) -> LabelVolume {
    let n = voxel_count(shape);
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut labels = vec![0i32; n];
    for (k, field) in fields.into_iter().enumerate() {
        assert_eq!(field.len(), n);
        for ((b, l), v) in best.iter_mut().zip(labels.iter_mut()).zip(field) {
            if v > *b {
                *b = v;
                *l = k as i32 + 1;
            }
        }
    }
    Volume::from_vec(shape, crate::volume::DEFAULT_VOXEL_SIZE_UM, labels).expect("shape matches")
}

/// Smooth random partition of the lattice into `K ~ n_parenchyma_maps`
/// labels (values `1..=K`). Returns the labels and `K`.
pub fn synth_parenchyma_labels(shape: Shape, params: &ImageSynthParams, rng: &mut SeededRng) -> (LabelVolume, usize) {
    let k = params.n_parenchyma_maps.sample_int(rng).max(1) as usize;
    let ctrl = [0; 3].map(|_| params.spline_ctrl_per_dim.sample_int(rng).max(2) as usize);
    let fields = (0..k).map(|_| random_field(shape, ctrl, rng));
    (argmax_labels(shape, fields), k)
}

/// Intensity `values[i - 1]` for label `i`, min-max normalized to `[0, 1]`.
pub fn parenchyma_intensity_from_values(labels: &LabelVolume, values: &[f64]) -> IntensityVolume {
    let mut out = labels.map(|&l| if l >= 1 { values[(l - 1) as usize] as f32 } else { 0.0 });
    out.normalize_unit();
    out
}

/// Draw one intensity per label from `N(i, parenchyma_intensity_var)` and
/// normalize. A volume whose intensities collapse to one value becomes all
/// zeros.
pub fn parenchyma_intensity(labels: &LabelVolume, params: &ImageSynthParams, rng: &mut SeededRng) -> IntensityVolume {
    let k = labels.data().iter().copied().max().unwrap_or(0).max(0) as usize;
    let values: Vec<f64> = (1..=k)
        .map(|i| DistSpec::normal(i as f64, params.parenchyma_intensity_var).sample(rng))
        .collect();
    parenchyma_intensity_from_values(labels, &values)
}

/// Multiplier field for vessels: 1 outside vessels, `[0, 0.5]` inside.
pub fn vessel_texture(vessels: &LabelVolume, params: &ImageSynthParams, rng: &mut SeededRng) -> IntensityVolume {
    let mut out = vessels.map(|_| 1.0f32);
    let inside: Vec<usize> = (0..vessels.len()).filter(|&i| vessels.data()[i] > 0).collect();
    if inside.is_empty() {
        return out;
    }
    if !params.enable_vessel_texture {
        for &i in &inside {
            out.data_mut()[i] = ABLATED_VESSEL_MULTIPLIER;
        }
        return out;
    }
    let (classes, k) = synth_parenchyma_labels(vessels.shape(), params, rng);
    let means: Vec<f64> = (0..k).map(|_| params.vessel_texture_mean.sample(rng)).collect();
    let sd = params.vessel_texture_var.sqrt();
    let raw: Vec<f64> = inside
        .iter()
        .map(|&i| means[(classes.data()[i] - 1) as usize] + sd * rng.standard_normal())
        .collect();
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let data = out.data_mut();
    for (&i, v) in inside.iter().zip(raw) {
        data[i] = if span > 0.0 {
            ((v - lo) / span * VESSEL_MULTIPLIER_MAX as f64) as f32
        } else {
            ABLATED_VESSEL_MULTIPLIER
        };
    }
    out
}

/// Element-wise product.
pub fn fuse(parenchyma: &IntensityVolume, multiplier: &IntensityVolume) -> Result<IntensityVolume, VolumeError> {
    parenchyma.check_same_shape(multiplier)?;
    let data = parenchyma.data().iter().zip(multiplier.data()).map(|(a, b)| a * b).collect();
    Volume::from_vec(parenchyma.shape(), parenchyma.voxel_size_um(), data)
}

/// Multiply every voxel by an independent `Gamma(mean 1, sd)` draw.
pub fn apply_speckle(image: &mut IntensityVolume, sd: f64, rng: &mut SeededRng) {
    if sd <= 0.0 {
        return;
    }
    let gamma = Gamma::new(1.0 / (sd * sd), sd * sd).expect("positive shape and scale");
    for v in image.data_mut() {
        *v = (*v as f64 * gamma.sample(rng)) as f32;
    }
}

/// Speckle with `sd ~ speckle_sd`. Returns the sd used.
pub fn speckle(image: &mut IntensityVolume, params: &ImageSynthParams, rng: &mut SeededRng) -> f64 {
    let sd = params.speckle_sd.sample(rng);
    apply_speckle(image, sd, rng);
    sd
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slab {
    pub start: usize,
    pub width: usize,
    pub factor: f64,
}

/// Slabs tiling one axis, each with its own intensity factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandLayout {
    pub axis: usize,
    pub slabs: Vec<Slab>,
}

impl BandLayout {
    pub fn sample(shape: Shape, params: &ImageSynthParams, rng: &mut SeededRng) -> Self {
        let axis = rng.index(3);
        let extent = shape[axis];
        let mut slabs = Vec::new();
        let mut start = 0;
        while start < extent {
            let width = (params.band_width.sample_int(rng).max(1) as usize).min(extent - start);
            let factor = params.band_factor.sample(rng);
            slabs.push(Slab { start, width, factor });
            start += width;
        }
        Self { axis, slabs }
    }

    pub fn apply(&self, image: &mut IntensityVolume) {
        let mut factor_at = vec![1.0f64; image.shape()[self.axis]];
        for s in &self.slabs {
            factor_at[s.start..s.start + s.width].fill(s.factor);
        }
        let axis = self.axis;
        let shape = image.shape();
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            let c = match axis {
                0 => i % shape[0],
                1 => (i / shape[0]) % shape[1],
                _ => i / (shape[0] * shape[1]),
            };
            *v = (*v as f64 * factor_at[c]) as f32;
        }
    }
}

pub fn banding(image: &mut IntensityVolume, params: &ImageSynthParams, rng: &mut SeededRng) -> BandLayout {
    let layout = BandLayout::sample(image.shape(), params, rng);
    layout.apply(image);
    layout
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Point3,
    pub radius: f64,
    pub intensity: f64,
}

/// `round(freq × voxel count)` spheres with uniform centers.
pub fn sample_spheres(shape: Shape, params: &ImageSynthParams, rng: &mut SeededRng) -> Vec<Sphere> {
    let freq = params.sphere_freq.sample(rng);
    let count = (freq * voxel_count(shape) as f64).round() as usize;
    (0..count)
        .map(|_| {
            let center = [0, 1, 2].map(|k| rng.unit() * shape[k] as f64);
            let radius = params.sphere_radius.sample_int(rng).max(0) as f64;
            let intensity = params.sphere_intensity.sample(rng);
            Sphere { center, radius, intensity }
        })
        .collect()
}

/// Multiply the voxels inside each sphere by its intensity.
pub fn apply_spheres(image: &mut IntensityVolume, spheres: &[Sphere]) {
    let shape = image.shape();
    for s in spheres {
        let r2 = s.radius * s.radius;
        let lo = [0, 1, 2].map(|k| (s.center[k] - s.radius).ceil().max(0.0) as usize);
        let hi = [0, 1, 2].map(|k| (s.center[k] + s.radius).floor().min(shape[k] as f64 - 1.0));
        if hi.iter().any(|&h| h < 0.0) {
            continue;
        }
        let hi = hi.map(|h| h as usize);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d = [x as f64 - s.center[0], y as f64 - s.center[1], z as f64 - s.center[2]];
                    if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r2 {
                        let v = image.get_mut(x, y, z);
                        *v = (*v as f64 * s.intensity) as f32;
                    }
                }
            }
        }
    }
}

pub fn spheres(image: &mut IntensityVolume, params: &ImageSynthParams, rng: &mut SeededRng) -> Vec<Sphere> {
    let s = sample_spheres(image.shape(), params, rng);
    apply_spheres(image, &s);
    s
}

/// Parenchyma texture times vessel multiplier, before any noise.
pub fn clean_image(vessels: &LabelVolume, params: &ImageSynthParams, rng: &SeededRng) -> IntensityVolume {
    let shape = vessels.shape();
    let (plabels, _) = synth_parenchyma_labels(shape, params, &mut rng.fork(STAGE_PARENCHYMA_LABELS));
    let parenchyma = parenchyma_intensity(&plabels, params, &mut rng.fork(STAGE_PARENCHYMA_INTENSITY));
    let multiplier = vessel_texture(vessels, params, &mut rng.fork(STAGE_VESSEL_TEXTURE));
    let mut fused = fuse(&parenchyma, &multiplier).expect("same shape by construction");
    fused.set_voxel_size_um(vessels.voxel_size_um());
    fused
}

/// Full label-to-image pipeline; the result is normalized to `[0, 1]`.
pub fn synthesize_image(vessels: &LabelVolume, params: &ImageSynthParams, rng: &SeededRng) -> IntensityVolume {
    let mut image = clean_image(vessels, params, rng);
    speckle(&mut image, params, &mut rng.fork(STAGE_SPECKLE));
    if params.enable_banding {
        banding(&mut image, params, &mut rng.fork(STAGE_BANDING));
    }
    if params.enable_spheres {
        spheres(&mut image, params, &mut rng.fork(STAGE_SPHERES));
    }
    image.normalize_unit();
    image
}
