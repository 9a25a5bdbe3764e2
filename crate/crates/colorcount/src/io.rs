//! On-disk formats: 2-D real arrays as NPY v1.0 and annotation records as
//! JSON lines (one record per image).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Write a 2-D f64 array as NPY v1.0 (little-endian, C order).
pub fn save_npy_2d(path: &Path, arr: &Array2<f64>) -> Result<()> {
    let (h, w) = arr.dim();
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({h}, {w}), }}");
    // pad with spaces so that magic+version+len+header is a multiple of 64
    let unpadded = 6 + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat(unpadded.div_ceil(64) * 64 - unpadded));
    header.push('\n');

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        out.write_all(NPY_MAGIC)?;
        out.write_all(&[1, 0])?;
        out.write_u16::<LittleEndian>(header.len() as u16)?;
        out.write_all(header.as_bytes())?;
        for v in arr.iter() {
            out.write_f64::<LittleEndian>(*v)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Read a 2-D f64 NPY file written by [`save_npy_2d`] (or any C-order
/// little-endian float64 NPY of rank 2).
pub fn load_npy_2d(path: &Path) -> Result<Array2<f64>> {
    let corrupt = |reason: &str| Error::corrupt(path, reason);
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    rd.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic[..6] != NPY_MAGIC || magic[6] != 1 {
        return Err(corrupt("not an NPY v1.x file"));
    }
    let hlen = rd.read_u16::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut header = vec![0u8; hlen];
    rd.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let header = String::from_utf8_lossy(&header);
    if !header.contains("'descr': '<f8'") {
        return Err(corrupt("expected little-endian float64 data"));
    }
    if !header.contains("'fortran_order': False") {
        return Err(corrupt("expected C-order data"));
    }
    let shape_part = header
        .split("'shape': (")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| corrupt("missing shape in header"))?;
    let dims: Vec<usize> = shape_part
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| corrupt("bad shape value")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(corrupt(&format!("expected rank 2, got rank {}", dims.len())));
    }
    let (h, w) = (dims[0], dims[1]);
    let mut data = vec![0.0f64; h * w];
    for v in &mut data {
        *v = rd.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    }
    Array2::from_shape_vec((h, w), data).map_err(|e| corrupt(&e.to_string()))
}

/// One annotation record: an image path, its head points, and optionally a
/// crowd-level group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_path: String,
    /// (x, y) pixel coordinates.
    pub points: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<u8>,
}

/// Write records as JSON lines.
pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut text = String::new();
    for rec in records {
        text.push_str(&serde_json::to_string(rec)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read JSON-lines annotation records; blank lines are skipped.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}
