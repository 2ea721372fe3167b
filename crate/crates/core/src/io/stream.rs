//! Patch transport for fusion.
//!
//! A stream record is three little-endian `u64` origin coordinates
//! (x, y, z) followed by `patch_size³` little-endian `f32` values, x fastest.
//! Patch files in a directory are named `patch_<x>_<y>_<z>.nii[.gz]`.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use super::IoError;

/// Origin and x-fastest values of one patch.
pub type Patch = ([usize; 3], Vec<f32>);

/// Read one record; `Ok(None)` at a clean end of stream.
pub fn read_patch_record<R: Read>(reader: &mut R, patch_size: usize) -> Result<Option<Patch>, IoError> {
    let path = PathBuf::from("<stdin>");
    let mut head = [0u8; 24];
    let got = read_full(reader, &mut head).map_err(|e| IoError::io(&path, e))?;
    if got == 0 {
        return Ok(None);
    }
    let payload_len = 4 * patch_size.pow(3);
    if got < head.len() {
        return Err(IoError::Length { path, expected: head.len() + payload_len, got });
    }
    let mut origin = [0usize; 3];
    for (i, o) in origin.iter_mut().enumerate() {
        *o = u64::from_le_bytes(head[8 * i..8 * i + 8].try_into().unwrap()) as usize;
    }
    let mut payload = vec![0u8; payload_len];
    let got = read_full(reader, &mut payload).map_err(|e| IoError::io(&path, e))?;
    if got < payload_len {
        return Err(IoError::Length { path, expected: head.len() + payload_len, got: head.len() + got });
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Some((origin, values)))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

pub fn write_patch_record<W: Write>(writer: &mut W, origin: [usize; 3], values: &[f32]) -> io::Result<()> {
    for o in origin {
        writer.write_all(&(o as u64).to_le_bytes())?;
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    writer.write_all(&bytes)
}

pub fn patch_file_name(origin: [usize; 3], compress: bool) -> String {
    let ext = if compress { "nii.gz" } else { "nii" };
    format!("patch_{}_{}_{}.{ext}", origin[0], origin[1], origin[2])
}

/// Origin encoded in a patch file name, if it follows the convention.
pub fn parse_patch_origin(name: &str) -> Option<[usize; 3]> {
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))?;
    let mut parts = stem.strip_prefix("patch_")?.split('_');
    let mut origin = [0usize; 3];
    for o in &mut origin {
        *o = parts.next()?.parse().ok()?;
    }
    parts.next().is_none().then_some(origin)
}

/// Patch files in `dir`, sorted by origin (z, then y, then x).
pub fn list_patch_files(dir: &Path) -> Result<Vec<([usize; 3], PathBuf)>, IoError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| IoError::io(dir, e))? {
        let entry = entry.map_err(|e| IoError::io(dir, e))?;
        if let Some(origin) = entry.file_name().to_str().and_then(parse_patch_origin) {
            out.push((origin, entry.path()));
        }
    }
    out.sort_by_key(|(o, _)| [o[2], o[1], o[0]]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrip() {
        let mut buf = Vec::new();
        let a: Vec<f32> = (0..8).map(|i| i as f32 * 0.1).collect();
        write_patch_record(&mut buf, [1, 2, 3], &a).unwrap();
        write_patch_record(&mut buf, [4, 5, 6], &a).unwrap();
        let mut r = &buf[..];
        assert_eq!(read_patch_record(&mut r, 2).unwrap(), Some(([1, 2, 3], a.clone())));
        assert_eq!(read_patch_record(&mut r, 2).unwrap(), Some(([4, 5, 6], a)));
        assert_eq!(read_patch_record(&mut r, 2).unwrap(), None);
    }

    #[test]
    fn truncated_record() {
        let mut buf = Vec::new();
        write_patch_record(&mut buf, [0, 0, 0], &[0.5; 8]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_patch_record(&mut &buf[..], 2), Err(IoError::Length { expected: 56, got: 55, .. })));
        assert!(matches!(read_patch_record(&mut &buf[..10], 2), Err(IoError::Length { .. })));
    }

    #[test]
    fn names() {
        assert_eq!(patch_file_name([0, 32, 128], true), "patch_0_32_128.nii.gz");
        assert_eq!(parse_patch_origin("patch_0_32_128.nii.gz"), Some([0, 32, 128]));
        assert_eq!(parse_patch_origin("patch_000001.nii"), None);
        assert_eq!(parse_patch_origin("patch_1_2_3_4.nii"), None);
        assert_eq!(parse_patch_origin("notes.txt"), None);
    }
}
