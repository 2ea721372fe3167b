//! Sine-weighted sliding-window fusion of patch predictions.
//!
//! Each patch is weighted by the outer product of a 1D sine profile on
//! `[π/8, 7π/8]`, accumulated into a volume-sized lattice, and normalized by
//! the accumulated weight. Only the accumulation and weight-sum lattices are
//! kept in memory; patches stream through.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{voxel_count, IntensityVolume, LabelVolume, Shape, Volume};

pub const DEFAULT_PATCH_SIZE: usize = 128;
pub const DEFAULT_STEP: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("invalid window spec: {0}")]
    InvalidSpec(String),
    #[error("volume shape {shape:?} is smaller than the patch size {patch_size}")]
    VolumeTooSmall { shape: Shape, patch_size: usize },
    #[error("patch holds {got} values, expected {expected} ({patch_size}^3)")]
    PatchSize { patch_size: usize, expected: usize, got: usize },
    #[error("patch at origin {origin:?} extends past volume shape {shape:?}")]
    OutOfBounds { origin: [usize; 3], shape: Shape },
    #[error("{count} voxels received no patch; first uncovered voxel {first:?}, bounding box {lo:?}..={hi:?}")]
    Uncovered { count: usize, first: [usize; 3], lo: [usize; 3], hi: [usize; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub patch_size: usize,
    pub step: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { patch_size: DEFAULT_PATCH_SIZE, step: DEFAULT_STEP }
    }
}

impl WindowSpec {
    pub fn new(patch_size: usize, step: usize) -> Result<Self, FusionError> {
        let s = Self { patch_size, step };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.patch_size == 0 || self.step == 0 {
            return Err(FusionError::InvalidSpec("patch_size and step must be positive".into()));
        }
        if self.step > self.patch_size {
            return Err(FusionError::InvalidSpec(format!(
                "step {} exceeds patch_size {} and would leave gaps",
                self.step, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.pow(3)
    }

    /// Contributions per voxel away from the borders, when the step divides
    /// the patch size.
    pub fn interior_contributions(&self) -> Option<usize> {
        self.patch_size.is_multiple_of(self.step).then(|| (self.patch_size / self.step).pow(3))
    }
}

/// `w[i] = sin(π/8 + i/(p-1) · 6π/8)`; a single-voxel window gets weight 1.
pub fn weight_profile(spec: &WindowSpec) -> Vec<f64> {
    let p = spec.patch_size;
    if p == 1 {
        return vec![1.0];
    }
    (0..p)
        .map(|i| (PI / 8.0 + (i as f64 / (p - 1) as f64) * (6.0 * PI / 8.0)).sin())
        .collect()
}

/// Window origins along one axis: every `step`, plus a final window clamped
/// to end at the boundary.
pub fn window_origins(extent: usize, spec: &WindowSpec) -> Vec<usize> {
    let p = spec.patch_size;
    if extent < p {
        return Vec::new();
    }
    let mut out: Vec<usize> = (0..=extent - p).step_by(spec.step).collect();
    if *out.last().unwrap() + p < extent {
        out.push(extent - p);
    }
    out
}

/// All origins of the 3D lattice, x fastest.
pub fn lattice(shape: Shape, spec: &WindowSpec) -> Vec<[usize; 3]> {
    let [ox, oy, oz] = [0, 1, 2].map(|a| window_origins(shape[a], spec));
    let mut out = Vec::with_capacity(ox.len() * oy.len() * oz.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Streaming accumulator over patches.
pub struct FusionAccumulator {
    shape: Shape,
    spec: WindowSpec,
    profile: Vec<f64>,
    sum: Vec<f64>,
    weight: Vec<f64>,
    count: Vec<u16>,
}

impl FusionAccumulator {
    pub fn new(shape: Shape, spec: WindowSpec) -> Result<Self, FusionError> {
        spec.validate()?;
        if shape.iter().any(|&e| e < spec.patch_size) {
            return Err(FusionError::VolumeTooSmall { shape, patch_size: spec.patch_size });
        }
        let n = voxel_count(shape);
        Ok(Self {
            shape,
            spec,
            profile: weight_profile(&spec),
            sum: vec![0.0; n],
            weight: vec![0.0; n],
            count: vec![0; n],
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    /// Add one patch, stored x-fastest, with its minimum corner at `origin`.
    pub fn add(&mut self, origin: [usize; 3], patch: &[f32]) -> Result<(), FusionError> {
        let p = self.spec.patch_size;
        if patch.len() != self.spec.patch_voxels() {
            return Err(FusionError::PatchSize { patch_size: p, expected: p.pow(3), got: patch.len() });
        }
        if (0..3).any(|a| origin[a] + p > self.shape[a]) {
            return Err(FusionError::OutOfBounds { origin, shape: self.shape });
        }
        let [nx, ny, _] = self.shape;
        let w = &self.profile;
        for k in 0..p {
            for j in 0..p {
                let wjk = w[j] * w[k];
                let row = origin[0] + nx * (origin[1] + j + ny * (origin[2] + k));
                let src = p * (j + p * k);
                for i in 0..p {
                    let wt = w[i] * wjk;
                    let v = row + i;
                    self.sum[v] += wt * patch[src + i] as f64;
                    self.weight[v] += wt;
                    self.count[v] = self.count[v].saturating_add(1);
                }
            }
        }
        Ok(())
    }

    /// Number of patches that touched each voxel.
    pub fn contributions(&self) -> Volume<u16> {
        Volume::from_vec(self.shape, 0.0, self.count.clone()).expect("shape checked")
    }

    pub fn contribution_at(&self, v: [usize; 3]) -> u16 {
        self.count[v[0] + self.shape[0] * (v[1] + self.shape[1] * v[2])]
    }

    fn check_coverage(&self) -> Result<(), FusionError> {
        let [nx, ny, _] = self.shape;
        let mut count = 0;
        let mut first = None;
        let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
        for (i, &c) in self.count.iter().enumerate() {
            if c == 0 {
                let v = [i % nx, (i / nx) % ny, i / (nx * ny)];
                first.get_or_insert(v);
                for a in 0..3 {
                    lo[a] = lo[a].min(v[a]);
                    hi[a] = hi[a].max(v[a]);
                }
                count += 1;
            }
        }
        match first {
            None => Ok(()),
            Some(first) => Err(FusionError::Uncovered { count, first, lo, hi }),
        }
    }

    /// Normalized fused values in double precision.
    pub fn finish_f64(self) -> Result<Vec<f64>, FusionError> {
        self.check_coverage()?;
        Ok(self.sum.iter().zip(&self.weight).map(|(s, w)| s / w).collect())
    }

    pub fn finish(self, voxel_size_um: f64) -> Result<IntensityVolume, FusionError> {
        let shape = self.shape;
        let data = self.finish_f64()?.into_iter().map(|v| v as f32).collect();
        Ok(Volume::from_vec(shape, voxel_size_um, data).expect("shape checked"))
    }
}

/// Fuse a stream of `(origin, patch)` pairs into one volume.
pub fn fuse_patches<I, P>(patches: I, shape: Shape, spec: WindowSpec, voxel_size_um: f64) -> Result<IntensityVolume, FusionError>
where
    I: IntoIterator<Item = ([usize; 3], P)>,
    P: AsRef<[f32]>,
{
    let mut acc = FusionAccumulator::new(shape, spec)?;
    for (origin, patch) in patches {
        acc.add(origin, patch.as_ref())?;
    }
    acc.finish(voxel_size_um)
}

/// Binary mask `value >= threshold`.
pub fn threshold(volume: &IntensityVolume, t: f32) -> LabelVolume {
    volume.map(|&v| (v >= t) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn profile_endpoints_and_center() {
        let w = weight_profile(&WindowSpec::default());
        assert_eq!(w.len(), 128);
        assert!((w[0] - (PI / 8.0).sin()).abs() < 1e-12);
        assert!((w[127] - (PI / 8.0).sin()).abs() < 1e-12);
        assert!((w[0] - 0.38268).abs() < 1e-5);
        // Peak straddles the two central indices.
        assert!(w[63] > 0.9999 && (w[63] - w[64]).abs() < 1e-12);
    }

    #[test]
    fn origins_with_clamped_edge() {
        let s = WindowSpec::default();
        assert_eq!(window_origins(128, &s), vec![0]);
        assert_eq!(window_origins(160, &s), vec![0, 32]);
        assert_eq!(window_origins(170, &s), vec![0, 32, 42]);
        assert_eq!(window_origins(256, &s), vec![0, 32, 64, 96, 128]);
        assert!(window_origins(100, &s).is_empty());
    }

    #[test]
    fn interior_count_is_64() {
        let s = WindowSpec::new(16, 4).unwrap();
        let shape = [32, 32, 32];
        let mut acc = FusionAccumulator::new(shape, s).unwrap();
        let patch = vec![0.5f32; s.patch_voxels()];
        for o in lattice(shape, &s) {
            acc.add(o, &patch).unwrap();
        }
        assert_eq!(s.interior_contributions(), Some(64));
        assert_eq!(acc.contribution_at([12, 16, 19]), 64);
        assert_eq!(acc.contribution_at([0, 0, 0]), 1);
    }

    #[test]
    fn single_patch_is_identity() {
        let s = WindowSpec::new(8, 4).unwrap();
        let patch: Vec<f32> = (0..512).map(|i| (i % 17) as f32 / 17.0).collect();
        let out = fuse_patches([([0, 0, 0], patch.clone())], [8, 8, 8], s, 20.0).unwrap();
        assert_eq!(out.data(), &patch[..]);
    }

    #[test]
    fn errors() {
        let s = WindowSpec::new(8, 4).unwrap();
        let mut acc = FusionAccumulator::new([12, 8, 8], s).unwrap();
        assert!(matches!(acc.add([0, 0, 0], &[0.0; 10]), Err(FusionError::PatchSize { .. })));
        assert!(matches!(acc.add([8, 0, 0], &[0.0; 512]), Err(FusionError::OutOfBounds { .. })));
        acc.add([0, 0, 0], &[0.0; 512]).unwrap();
        match acc.finish(20.0) {
            Err(FusionError::Uncovered { count, first, .. }) => {
                assert_eq!(count, 4 * 64);
                assert_eq!(first, [8, 0, 0]);
            }
            other => panic!("{other:?}"),
        }
        assert!(WindowSpec::new(8, 9).is_err());
        assert!(FusionAccumulator::new([4, 8, 8], s).is_err());
    }

    #[test]
    fn threshold_mask() {
        let v = IntensityVolume::filled([2, 2, 2], 20.0, 0.7);
        assert!(threshold(&v, 0.5).data().iter().all(|&x| x == 1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn profile_symmetric(p in 1usize..300) {
            let w = weight_profile(&WindowSpec { patch_size: p, step: 1 });
            for i in 0..p {
                prop_assert!((w[i] - w[p - 1 - i]).abs() < 1e-12);
            }
        }

        #[test]
        fn every_voxel_covered(p in 2usize..9, step_frac in 1usize..4, ex in 0usize..12, ey in 0usize..12, ez in 0usize..12) {
            let step = (p / step_frac).max(1);
            let s = WindowSpec::new(p, step).unwrap();
            let shape = [p + ex, p + ey, p + ez];
            let mut acc = FusionAccumulator::new(shape, s).unwrap();
            let patch = vec![0.0f32; s.patch_voxels()];
            for o in lattice(shape, &s) {
                acc.add(o, &patch).unwrap();
            }
            prop_assert!(acc.contributions().data().iter().all(|&c| c >= 1));
        }

        #[test]
        fn convex_combination(seed in any::<u64>()) {
            use crate::sampling::SeededRng;
            let mut rng = SeededRng::new(seed);
            let s = WindowSpec::new(6, 2).unwrap();
            let shape = [10, 9, 8];
            let patches: Vec<_> = lattice(shape, &s)
                .into_iter()
                .map(|o| (o, (0..s.patch_voxels()).map(|_| rng.unit() as f32).collect::<Vec<f32>>()))
                .collect();
            let mut lo = vec![f64::INFINITY; voxel_count(shape)];
            let mut hi = vec![f64::NEG_INFINITY; voxel_count(shape)];
            for (o, p) in &patches {
                for k in 0..6 { for j in 0..6 { for i in 0..6 {
                    let v = o[0] + i + shape[0] * (o[1] + j + shape[1] * (o[2] + k));
                    let x = p[i + 6 * (j + 6 * k)] as f64;
                    lo[v] = lo[v].min(x);
                    hi[v] = hi[v].max(x);
                }}}
            }
            let mut acc = FusionAccumulator::new(shape, s).unwrap();
            for (o, p) in &patches {
                acc.add(*o, p).unwrap();
            }
            let out = acc.finish_f64().unwrap();
            for v in 0..out.len() {
                prop_assert!(out[v] >= lo[v] - 1e-12 && out[v] <= hi[v] + 1e-12);
            }
        }
    }
}
