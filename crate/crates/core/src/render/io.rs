//! File formats for normal maps and meshes.
//!
//! Normal maps round-trip through PFM (portable float map, colour `PF`
//! variant): three `f32` channels per pixel, rows stored bottom-to-top,
//! little-endian signalled by a negative scale. Masked pixels are encoded
//! as exact zero in all channels, which no unit normal can collide with.
//! PPM (`P6`) is a lossy visualisation export that maps `[-1, 1]`
//! components to RGB. Meshes export to Wavefront OBJ with per-vertex
//! normals.

use super::{NormalMap, TriangleMesh};
use crate::geom::Vec3;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Write `map` as a little-endian colour PFM file.
pub fn write_pfm(path: &Path, map: &NormalMap) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "PF\n{} {}\n-1.0\n", map.width, map.height)?;
    // PFM stores rows bottom-to-top.
    for j in (0..map.height).rev() {
        for i in 0..map.width {
            let n = map.get(i, j);
            for c in [n.x, n.y, n.z] {
                out.write_all(&(c as f32).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a colour PFM file written by [`write_pfm`] (either endianness).
pub fn read_pfm(path: &Path) -> Result<NormalMap> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut token = |what: &str| -> Result<String> {
        // Header tokens are whitespace-separated; read byte-wise so we stop
        // exactly at the single whitespace byte before the pixel block.
        let mut s = String::new();
        let mut byte = [0u8; 1];
        loop {
            if reader.read(&mut byte)? == 0 {
                return Err(Error::Format(format!("unexpected end of file in {what}")));
            }
            if byte[0].is_ascii_whitespace() {
                if s.is_empty() {
                    continue;
                }
                return Ok(s);
            }
            s.push(byte[0] as char);
        }
    };
    let magic = token("magic")?;
    if magic != "PF" {
        return Err(Error::Format(format!("not a colour PFM file (magic {magic:?})")));
    }
    let parse = |s: String, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad {what} field {s:?}")))
    };
    let width = parse(token("width")?, "width")? as usize;
    let height = parse(token("height")?, "height")? as usize;
    let scale = parse(token("scale")?, "scale")?;
    if width == 0 || height == 0 || width > 1 << 16 || height > 1 << 16 {
        return Err(Error::Format(format!("implausible dimensions {width}x{height}")));
    }
    let little_endian = scale < 0.0;
    let mut bytes = vec![0u8; width * height * 3 * 4];
    reader.read_exact(&mut bytes).map_err(|_| {
        Error::Format(format!("pixel block truncated; expected {} bytes", bytes.len()))
    })?;
    let mut map = NormalMap::new(width, height);
    let mut at = 0;
    for j in (0..height).rev() {
        for i in 0..width {
            let mut ch = [0.0f64; 3];
            for c in &mut ch {
                let raw: [u8; 4] = bytes[at..at + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                if !v.is_finite() {
                    return Err(Error::Format("non-finite pixel value".into()));
                }
                *c = v as f64;
                at += 4;
            }
            map.set(i, j, Vec3::new(ch[0], ch[1], ch[2]));
        }
    }
    Ok(map)
}

/// Write `map` as a binary PPM visualisation: components mapped from
/// `[-1, 1]` to `[0, 255]`, masked pixels black.
pub fn write_ppm(path: &Path, map: &NormalMap) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", map.width, map.height)?;
    for j in 0..map.height {
        for i in 0..map.width {
            if map.is_masked(i, j) {
                out.write_all(&[0, 0, 0])?;
            } else {
                let n = map.get(i, j);
                let to_byte = |v: f64| ((v * 0.5 + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.write_all(&[to_byte(n.x), to_byte(n.y), to_byte(n.z)])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Save a normal map, choosing the format from the file extension:
/// `.pfm` (lossless, reloadable) or `.ppm` (visualisation only).
pub fn save_normal_map(path: &Path, map: &NormalMap) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => write_pfm(path, map),
        Some("ppm") => write_ppm(path, map),
        other => Err(Error::InvalidConfig(format!(
            "unsupported normal-map extension {other:?}; use .pfm or .ppm"
        ))),
    }
}

/// Load a normal map; only the lossless PFM format can be read back.
pub fn load_normal_map(path: &Path) -> Result<NormalMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path),
        other => Err(Error::InvalidConfig(format!(
            "unsupported normal-map extension {other:?}; only .pfm can be loaded"
        ))),
    }
}

/// Write `mesh` as Wavefront OBJ with per-vertex normals.
pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# {} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len())?;
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for n in &mesh.normals {
        writeln!(out, "vn {} {} {}", n.x, n.y, n.z)?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {0}//{0} {1}//{1} {2}//{2}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    out.flush()?;
    Ok(())
}
