//! Per-video feature container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic    8 bytes  "PAMFEAT1"
//! count    u32      number of arrays (always 3)
//! header   count × { name_len u32, name bytes, rows u32, cols u32 }
//! payload  for each array in header order: rows·cols f32 LE, row-major
//! ```
//!
//! Arrays are named `rgb`, `flow`, `audio` and appear in that order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::Modality;
use crate::error::{PamfnError, Result};
use crate::tensor::Matrix;

pub const CONTAINER_MAGIC: &[u8; 8] = b"PAMFEAT1";

pub fn write_container(path: &Path, rgb: &Matrix, flow: &Matrix, audio: &Matrix) -> Result<()> {
    let file = File::create(path).map_err(|e| PamfnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let arrays = [rgb, flow, audio];
    let io = |e| PamfnError::io(path, e);
    w.write_all(CONTAINER_MAGIC).map_err(io)?;
    w.write_all(&3u32.to_le_bytes()).map_err(io)?;
    for (m, a) in Modality::ALL.iter().zip(arrays) {
        let name = m.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(a.rows() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(a.cols() as u32).to_le_bytes()).map_err(io)?;
    }
    for a in arrays {
        for &x in a.data() {
            w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads the three arrays in `rgb, flow, audio` order.
pub fn read_container(path: &Path) -> Result<[Matrix; 3]> {
    let file = File::open(path).map_err(|e| PamfnError::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = |_| PamfnError::format(path, "truncated container");

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CONTAINER_MAGIC {
        return Err(PamfnError::format(path, "bad magic"));
    }
    let count = read_u32(&mut r).map_err(truncated)?;
    if count != 3 {
        return Err(PamfnError::format(path, format!("expected 3 arrays, found {count}")));
    }
    let mut shapes = Vec::with_capacity(3);
    for expected in Modality::ALL {
        let len = read_u32(&mut r).map_err(truncated)? as usize;
        if len > 64 {
            return Err(PamfnError::format(path, "array name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        if name != expected.name().as_bytes() {
            return Err(PamfnError::format(
                path,
                format!(
                    "expected array `{expected}`, found `{}`",
                    String::from_utf8_lossy(&name)
                ),
            ));
        }
        let rows = read_u32(&mut r).map_err(truncated)? as usize;
        let cols = read_u32(&mut r).map_err(truncated)? as usize;
        shapes.push((rows, cols));
    }
    let mut out = Vec::with_capacity(3);
    let mut buf = [0u8; 4];
    for (rows, cols) in shapes {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf).map_err(truncated)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        out.push(Matrix::from_vec(rows, cols, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| PamfnError::io(path, e))? != 0 {
        return Err(PamfnError::format(path, "trailing bytes after payload"));
    }
    let audio = out.pop().unwrap();
    let flow = out.pop().unwrap();
    let rgb = out.pop().unwrap();
    Ok([rgb, flow, audio])
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.pamf");
        let rgb = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let flow = Matrix::filled(2, 1, 1.5);
        let audio = Matrix::from_vec(2, 2, vec![-1.0, 2.0, 3.0, 1e-3]).unwrap();
        write_container(&path, &rgb, &flow, &audio).unwrap();
        let [r, f, a] = read_container(&path).unwrap();
        assert_eq!(r, rgb.map(|x| x as f32 as f64));
        assert_eq!(f, flow);
        assert_eq!(a, audio.map(|x| x as f32 as f64));
    }

    #[test]
    fn header_is_little_endian_and_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.pamf");
        let m = Matrix::filled(1, 1, 1.0);
        write_container(&path, &m, &m, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CONTAINER_MAGIC);
        assert_eq!(&bytes[8..12], &[3, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..19], b"rgb");
        // payload tail: 1.0f32 little-endian
        assert_eq!(&bytes[bytes.len() - 4..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pamf");
        std::fs::write(&path, b"NOTAFILE....").unwrap();
        assert!(matches!(read_container(&path), Err(PamfnError::Format { .. })));
        let m = Matrix::filled(2, 2, 1.0);
        write_container(&path, &m, &m, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_container(&path).is_err());
    }
}
