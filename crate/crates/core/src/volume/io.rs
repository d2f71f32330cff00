//! Binary volume files and landmark CSVs.
//!
//! Volume layout (little-endian): magic `VREG`, version `u32`, dtype `u32`
//! (1 = float32), dims `3×u32`, spacing `3×f64`, origin `3×f64`, then the
//! x-fastest float32 raster.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Point3;

use super::{Grid, Volume};
use crate::error::{Result, VregError};

const MAGIC: &[u8; 4] = b"VREG";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
pub const VOLUME_HEADER_LEN: usize = 4 + 4 + 4 + 12 + 24 + 24;

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let g = vol.grid();
    let mut buf = Vec::with_capacity(VOLUME_HEADER_LEN + 4 * vol.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for d in g.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in g.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for o in g.origin {
        buf.extend_from_slice(&o.to_le_bytes());
    }
    for v in vol.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < VOLUME_HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(VregError::format(path, "missing VREG header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(4) != VERSION {
        return Err(VregError::format(
            path,
            format!("unsupported version {}", u32_at(4)),
        ));
    }
    if u32_at(8) != DTYPE_F32 {
        return Err(VregError::format(
            path,
            format!("unsupported dtype {}", u32_at(8)),
        ));
    }
    let dims = [
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
    ];
    let spacing = [f64_at(24), f64_at(32), f64_at(40)];
    let origin = [f64_at(48), f64_at(56), f64_at(64)];
    let grid =
        Grid::new(dims, spacing, origin).map_err(|e| VregError::format(path, e.to_string()))?;
    let payload = &bytes[VOLUME_HEADER_LEN..];
    if payload.len() != 4 * grid.len() {
        return Err(VregError::format(
            path,
            format!(
                "expected {} raster bytes, found {}",
                4 * grid.len(),
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Volume::new(grid, data).map_err(|e| VregError::format(path, e.to_string()))
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    fs::write(path, encode_volume(vol)).map_err(|e| VregError::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| VregError::io(path, e))?;
    decode_volume(&bytes, path)
}

/// Writes `id,x_mm,y_mm,z_mm` rows.
pub fn write_landmarks(path: &Path, landmarks: &[Point3<f64>]) -> Result<()> {
    let mut out = String::from("id,x_mm,y_mm,z_mm\n");
    for (i, p) in landmarks.iter().enumerate() {
        out.push_str(&format!("{i},{},{},{}\n", p.x, p.y, p.z));
    }
    let mut f = fs::File::create(path).map_err(|e| VregError::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| VregError::io(path, e))
}

pub fn read_landmarks(path: &Path) -> Result<Vec<Point3<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| VregError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "id,x_mm,y_mm,z_mm" => {}
        _ => return Err(VregError::format(path, "bad landmark header")),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(VregError::format(
                path,
                format!("line {}: expected 4 columns", n + 2),
            ));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| VregError::format(path, format!("line {}: {e}", n + 2)))
        };
        out.push(Point3::new(
            parse(cols[1])?,
            parse(cols[2])?,
            parse(cols[3])?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let g = Grid::new([3, 2, 1], [0.5, 1.0, 2.0], [-1.0, 0.0, 4.0]).unwrap();
        let v = Volume::new(g, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5]).unwrap();
        let bytes = encode_volume(&v);
        assert_eq!(&bytes[..4], b"VREG");
        assert_eq!(bytes.len(), VOLUME_HEADER_LEN + 24);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 0.5);
        assert_eq!(f64::from_le_bytes(bytes[64..72].try_into().unwrap()), 4.0);
        let back = decode_volume(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let g = Grid::new([2, 2, 1], [1.0; 3], [0.0; 3]).unwrap();
        let bytes = encode_volume(&Volume::zeros(g));
        assert!(decode_volume(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode_volume(b"NOPE", Path::new("x")).is_err());
    }

    #[test]
    fn landmark_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.csv");
        let pts = vec![Point3::new(1.5, -2.0, 0.25), Point3::new(0.0, 3.0, 7.0)];
        write_landmarks(&path, &pts).unwrap();
        assert_eq!(read_landmarks(&path).unwrap(), pts);
    }
}
