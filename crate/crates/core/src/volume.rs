//! Dense 3D lattices.
//!
//! Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`, the same
//! order NIfTI uses on disk.

use thiserror::Error;

/// Isotropic voxel size used unless configured otherwise.
pub const DEFAULT_VOXEL_SIZE_UM: f64 = 20.0;

pub type Shape = [usize; 3];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VolumeError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Shape, Shape),
    #[error("buffer holds {got} voxels, shape {shape:?} needs {expected}")]
    BufferLength { shape: Shape, expected: usize, got: usize },
    #[error("shape entries must be positive, got {0:?}")]
    EmptyShape(Shape),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    shape: Shape,
    voxel_size_um: f64,
    data: Vec<T>,
}

/// Integer labels: 0 is background, positive values are branch or class ids.
pub type LabelVolume = Volume<i32>;
/// Scalar image or probability map.
pub type IntensityVolume = Volume<f32>;

pub fn voxel_count(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

impl<T: Clone> Volume<T> {
    pub fn filled(shape: Shape, voxel_size_um: f64, value: T) -> Self {
        Self { shape, voxel_size_um, data: vec![value; voxel_count(shape)] }
    }
}

impl<T: Clone + Default> Volume<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, DEFAULT_VOXEL_SIZE_UM, T::default())
    }
}

impl<T> Volume<T> {
    pub fn from_vec(shape: Shape, voxel_size_um: f64, data: Vec<T>) -> Result<Self, VolumeError> {
        if shape.contains(&0) {
            return Err(VolumeError::EmptyShape(shape));
        }
        let expected = voxel_count(shape);
        if data.len() != expected {
            return Err(VolumeError::BufferLength { shape, expected, got: data.len() });
        }
        Ok(Self { shape, voxel_size_um, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn voxel_size_um(&self) -> f64 {
        self.voxel_size_um
    }

    pub fn set_voxel_size_um(&mut self, um: f64) {
        self.voxel_size_um = um;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.shape;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize, z: usize) -> &mut T {
        let i = self.index(x, y, z);
        &mut self.data[i]
    }

    pub fn check_same_shape<U>(&self, other: &Volume<U>) -> Result<(), VolumeError> {
        if self.shape != other.shape {
            return Err(VolumeError::ShapeMismatch(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn map<U, F: Fn(&T) -> U>(&self, f: F) -> Volume<U> {
        Volume {
            shape: self.shape,
            voxel_size_um: self.voxel_size_um,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl LabelVolume {
    /// Binary foreground mask (`value > 0`).
    pub fn foreground(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v > 0).collect()
    }
}

impl IntensityVolume {
    /// Min and max over all voxels.
    pub fn range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Min-max rescale into `[0, 1]`. A constant volume becomes all zeros.
    pub fn normalize_unit(&mut self) {
        let (lo, hi) = self.range();
        let span = hi - lo;
        if !(span > 0.0) {
            self.data.fill(0.0);
            return;
        }
        for v in &mut self.data {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let v: LabelVolume = Volume::zeros([3, 4, 5]);
        for i in 0..v.len() {
            let [x, y, z] = v.coords(i);
            assert_eq!(v.index(x, y, z), i);
        }
    }

    #[test]
    fn buffer_length_checked() {
        assert!(Volume::from_vec([2, 2, 2], 20.0, vec![0i32; 7]).is_err());
        assert!(Volume::from_vec([0, 2, 2], 20.0, Vec::<i32>::new()).is_err());
    }

    #[test]
    fn normalize_constant_is_zero() {
        let mut v = IntensityVolume::filled([2, 2, 2], 20.0, 3.0);
        v.normalize_unit();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }
}
