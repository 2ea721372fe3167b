//! Single-file NIfTI-1 (`.nii`, optionally gzipped as `.nii.gz`).
//!
//! Only little-endian 3D volumes with int32 or float32 voxels are written or
//! accepted. Voxel sizes are stored in millimetres (`xyzt_units = 2`).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{write_atomic, IoError};
use crate::volume::{voxel_count, IntensityVolume, LabelVolume, Shape, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const UNITS_MM: u8 = 2;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_QFORM: usize = 252;
const OFF_SFORM: usize = 254;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    LabelsInt32,
    IntensityFloat32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub shape: Shape,
    pub voxel_size_um: f64,
    pub kind: ValueKind,
    /// Voxel-to-world transform in millimetres.
    pub affine: [[f64; 4]; 4],
}

impl VolumeHeader {
    pub fn new(shape: Shape, voxel_size_um: f64, kind: ValueKind) -> Self {
        let mm = voxel_size_um / 1000.0;
        let mut affine = [[0.0; 4]; 4];
        for (i, row) in affine.iter_mut().enumerate() {
            row[i] = if i < 3 { mm } else { 1.0 };
        }
        Self { shape, voxel_size_um, kind, affine }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Labels(LabelVolume),
    Intensity(IntensityVolume),
}

impl From<LabelVolume> for VolumeData {
    fn from(v: LabelVolume) -> Self {
        Self::Labels(v)
    }
}

impl From<IntensityVolume> for VolumeData {
    fn from(v: IntensityVolume) -> Self {
        Self::Intensity(v)
    }
}

impl VolumeData {
    pub fn shape(&self) -> Shape {
        match self {
            Self::Labels(v) => v.shape(),
            Self::Intensity(v) => v.shape(),
        }
    }

    pub fn voxel_size_um(&self) -> f64 {
        match self {
            Self::Labels(v) => v.voxel_size_um(),
            Self::Intensity(v) => v.voxel_size_um(),
        }
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            Self::Labels(_) => ValueKind::LabelsInt32,
            Self::Intensity(_) => ValueKind::IntensityFloat32,
        }
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader::new(self.shape(), self.voxel_size_um(), self.kind())
    }

    /// Voxel payload as little-endian bytes, exactly as stored on disk.
    pub fn payload_bytes(&self) -> Vec<u8> {
        match self {
            Self::Labels(v) => v.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
            Self::Intensity(v) => v.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    /// Binary mask: labels are foreground when positive, intensities when
    /// `>= threshold`.
    pub fn binarize(&self, threshold: f32) -> LabelVolume {
        match self {
            Self::Labels(v) => v.map(|&x| (x > 0) as i32),
            Self::Intensity(v) => v.map(|&x| (x >= threshold) as i32),
        }
    }

    pub fn into_intensity(self) -> IntensityVolume {
        match self {
            Self::Labels(v) => v.map(|&x| x as f32),
            Self::Intensity(v) => v,
        }
    }
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

/// Serialize to an uncompressed `.nii` byte image.
pub fn encode(data: &VolumeData) -> Vec<u8> {
    let h = data.header();
    let mut buf = vec![0u8; VOX_OFFSET];
    buf[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    buf[38] = b'r';
    let dims = [3, h.shape[0] as i16, h.shape[1] as i16, h.shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put_i16(&mut buf, OFF_DIM + 2 * i, *d);
    }
    let dt = match h.kind {
        ValueKind::LabelsInt32 => DT_INT32,
        ValueKind::IntensityFloat32 => DT_FLOAT32,
    };
    put_i16(&mut buf, OFF_DATATYPE, dt);
    put_i16(&mut buf, OFF_BITPIX, 32);
    let mm = (h.voxel_size_um / 1000.0) as f32;
    for (i, p) in [1.0, mm, mm, mm, 1.0, 1.0, 1.0, 1.0].iter().enumerate() {
        put_f32(&mut buf, OFF_PIXDIM + 4 * i, *p);
    }
    put_f32(&mut buf, OFF_VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut buf, OFF_SCL_SLOPE, 0.0);
    buf[OFF_XYZT_UNITS] = UNITS_MM;
    let descrip = b"vascsynth";
    buf[OFF_DESCRIP..OFF_DESCRIP + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut buf, OFF_QFORM, 0);
    put_i16(&mut buf, OFF_SFORM, 1);
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut buf, OFF_SROW + 16 * r + 4 * c, h.affine[r][c] as f32);
        }
    }
    buf[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);
    buf.extend_from_slice(&data.payload_bytes());
    buf
}

/// Parse an uncompressed `.nii` byte image. `path` is only used in errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(VolumeHeader, VolumeData), IoError> {
    let fmt = |offset: usize, message: String| IoError::Format { path: path.to_path_buf(), offset, message };
    if bytes.len() < HEADER_SIZE {
        return Err(IoError::Length { path: path.to_path_buf(), expected: HEADER_SIZE, got: bytes.len() });
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        let msg = if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("sizeof_hdr is {sizeof_hdr}, expected 348")
        };
        return Err(fmt(0, msg));
    }
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(fmt(OFF_MAGIC, format!("magic {:?} is not single-file NIfTI-1 \"n+1\"", &bytes[OFF_MAGIC..OFF_MAGIC + 4])));
    }
    let ndim = get_i16(bytes, OFF_DIM);
    if ndim != 3 {
        // Trailing singleton dimensions are tolerated.
        let extra_ok = (3..=7).contains(&ndim) && (4..=ndim as usize).all(|i| get_i16(bytes, OFF_DIM + 2 * i) == 1);
        if !extra_ok {
            return Err(fmt(OFF_DIM, format!("dim[0] = {ndim}, only 3D volumes are supported")));
        }
    }
    let mut shape = [0usize; 3];
    for (i, s) in shape.iter_mut().enumerate() {
        let d = get_i16(bytes, OFF_DIM + 2 * (i + 1));
        if d <= 0 {
            return Err(fmt(OFF_DIM + 2 * (i + 1), format!("dim[{}] = {d} must be positive", i + 1)));
        }
        *s = d as usize;
    }
    let kind = match get_i16(bytes, OFF_DATATYPE) {
        DT_INT32 => ValueKind::LabelsInt32,
        DT_FLOAT32 => ValueKind::IntensityFloat32,
        other => return Err(fmt(OFF_DATATYPE, format!("datatype {other} unsupported (int32 = 8, float32 = 16)"))),
    };
    if get_i16(bytes, OFF_BITPIX) != 32 {
        return Err(fmt(OFF_BITPIX, "bitpix must be 32".into()));
    }
    let vox_offset = get_f32(bytes, OFF_VOX_OFFSET);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(fmt(OFF_VOX_OFFSET, format!("vox_offset {vox_offset} is invalid")));
    }
    let pix = get_f32(bytes, OFF_PIXDIM + 4);
    if !(pix > 0.0) {
        return Err(fmt(OFF_PIXDIM + 4, format!("pixdim[1] = {pix} must be positive")));
    }
    let to_um = match bytes[OFF_XYZT_UNITS] & 0x07 {
        1 => 1e6,
        3 => 1.0,
        _ => 1000.0,
    };
    // Shortest decimal form of the stored f32, so 0.02 mm reads back as 20 µm.
    let voxel_size_um = pix.to_string().parse::<f64>().expect("float display parses") * to_um;

    let start = vox_offset as usize;
    let n = voxel_count(shape);
    let expected = start + 4 * n;
    if bytes.len() < expected {
        return Err(IoError::Length { path: path.to_path_buf(), expected, got: bytes.len() });
    }
    let payload = &bytes[start..expected];
    let words = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let data = match kind {
        ValueKind::LabelsInt32 => VolumeData::Labels(
            Volume::from_vec(shape, voxel_size_um, words.map(i32::from_le_bytes).collect()).expect("length checked"),
        ),
        ValueKind::IntensityFloat32 => VolumeData::Intensity(
            Volume::from_vec(shape, voxel_size_um, words.map(f32::from_le_bytes).collect()).expect("length checked"),
        ),
    };
    let mut header = VolumeHeader::new(shape, voxel_size_um, kind);
    if get_i16(bytes, OFF_SFORM) > 0 {
        for r in 0..3 {
            for c in 0..4 {
                header.affine[r][c] = get_f32(bytes, OFF_SROW + 16 * r + 4 * c) as f64;
            }
        }
    }
    Ok((header, data))
}

fn is_gz_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// Write a volume; a `.gz` extension selects gzip compression.
pub fn write_volume(path: &Path, data: &VolumeData) -> Result<(), IoError> {
    let raw = encode(data);
    let bytes = if is_gz_path(path) {
        let mut enc = GzEncoder::new(Vec::with_capacity(raw.len() / 4), Compression::fast());
        enc.write_all(&raw).map_err(|e| IoError::io(path, e))?;
        enc.finish().map_err(|e| IoError::io(path, e))?
    } else {
        raw
    };
    write_atomic(path, &bytes)
}

/// Read a volume; gzip is detected from the content, not the name.
pub fn read_volume(path: &Path) -> Result<(VolumeHeader, VolumeData), IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut raw).map_err(|e| IoError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("gzip stream: {e}"),
        })?;
        decode(&raw, path)
    } else {
        decode(&bytes, path)
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume, IoError> {
    match read_volume(path)?.1 {
        VolumeData::Labels(v) => Ok(v),
        VolumeData::Intensity(_) => Err(IoError::Invalid { path: path.to_path_buf(), message: "expected int32 labels, found float32".into() }),
    }
}

pub fn read_intensity(path: &Path) -> Result<IntensityVolume, IoError> {
    Ok(read_volume(path)?.1.into_intensity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SeededRng;
    use proptest::prelude::*;

    fn random_f32(seed: u64, shape: Shape) -> IntensityVolume {
        let mut rng = SeededRng::new(seed);
        let data = (0..voxel_count(shape)).map(|_| f32::from_bits(rand::RngCore::next_u32(&mut rng))).collect();
        Volume::from_vec(shape, 20.0, data).unwrap()
    }

    fn bits(v: &VolumeData) -> Vec<u8> {
        v.payload_bytes()
    }

    #[test]
    fn float_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let v: VolumeData = random_f32(3, [8, 8, 8]).into();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&p, &v).unwrap();
            let (h, back) = read_volume(&p).unwrap();
            assert_eq!(bits(&back), bits(&v));
            assert_eq!(h.shape, [8, 8, 8]);
            assert_eq!(h.kind, ValueKind::IntensityFloat32);
        }
        let gz = fs::read(dir.path().join("a.nii.gz")).unwrap();
        assert_eq!(&gz[..2], &[0x1f, 0x8b]);
    }

    #[test]
    fn pixdim_in_mm() {
        let v: VolumeData = LabelVolume::filled([2, 3, 4], 20.0, 7).into();
        let bytes = encode(&v);
        assert_eq!(bytes.len(), VOX_OFFSET + 4 * 24);
        for i in 1..=3 {
            assert_eq!(get_f32(&bytes, OFF_PIXDIM + 4 * i), 0.02f32);
        }
        assert_eq!(bytes[OFF_XYZT_UNITS], 2);
        let (h, back) = decode(&bytes, Path::new("x")).unwrap();
        assert!((h.voxel_size_um - 20.0).abs() < 1e-4);
        assert!((h.affine[0][0] - 0.02).abs() < 1e-9);
        assert_eq!(back.shape(), [2, 3, 4]);
    }

    #[test]
    fn rejects_non_3d() {
        let mut bytes = encode(&LabelVolume::filled([2, 2, 2], 20.0, 1).into());
        put_i16(&mut bytes, OFF_DIM, 5);
        put_i16(&mut bytes, OFF_DIM + 8, 3);
        match decode(&bytes, Path::new("x")) {
            Err(IoError::Format { offset, .. }) => assert_eq!(offset, OFF_DIM),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let good = encode(&LabelVolume::filled([2, 2, 2], 20.0, 1).into());
        let mut bad = good.clone();
        bad[OFF_MAGIC] = b'x';
        assert!(matches!(decode(&bad, Path::new("x")), Err(IoError::Format { offset: OFF_MAGIC, .. })));
        let cut = &good[..good.len() - 3];
        assert!(matches!(
            decode(cut, Path::new("x")),
            Err(IoError::Length { expected, got, .. }) if expected == good.len() && got == good.len() - 3
        ));
        let mut dt = good.clone();
        put_i16(&mut dt, OFF_DATATYPE, 64);
        assert!(matches!(decode(&dt, Path::new("x")), Err(IoError::Format { offset: OFF_DATATYPE, .. })));
    }

    #[test]
    fn missing_file_is_filesystem_error() {
        let e = read_volume(Path::new("/definitely/not/here.nii")).unwrap_err();
        assert!(e.is_filesystem());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn label_roundtrip(nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let data = (0..nx * ny * nz).map(|_| rand::RngCore::next_u32(&mut rng) as i32).collect();
            let v: VolumeData = Volume::from_vec([nx, ny, nz], 20.0, data).unwrap().into();
            let (_, back) = decode(&encode(&v), Path::new("x")).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
