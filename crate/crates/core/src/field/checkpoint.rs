//! Versioned binary checkpoints with byte-exact round trips.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SDFITCK1" (format version in the last byte)
//! sections   repeated until the END tag:
//!   tag u8:  1 = field MLP, 2 = voxel grid, 3 = discriminator MLP, 0 = END
//!   MLP section:   activation tag u8 (0 softplus, 1 leaky) + slope f64,
//!                  layer count u32, then per layer rows u32, cols u32,
//!                  rows*cols weights f64, rows biases f64 (row-major)
//!   voxel section: res u32, channels u32, (res+1)^3 * channels values f64
//! ```
//!
//! Floats are written bit-for-bit (`to_le_bytes`), so save/load/save
//! produces identical files.

use super::mlp::{Activation, Layer, Mlp};
use super::voxel::VoxelGrid;
use super::SdfField;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SDFITCK1";

const TAG_END: u8 = 0;
const TAG_FIELD_MLP: u8 = 1;
const TAG_VOXEL: u8 = 2;
const TAG_DISC_MLP: u8 = 3;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_mlp(w: &mut impl Write, mlp: &Mlp) -> Result<()> {
    match mlp.activation {
        Activation::Softplus => {
            w.write_all(&[0u8])?;
            write_f64s(w, &[0.0])?;
        }
        Activation::LeakyRelu(slope) => {
            w.write_all(&[1u8])?;
            write_f64s(w, &[slope])?;
        }
    }
    write_u32(w, mlp.layers.len() as u32)?;
    for l in &mlp.layers {
        write_u32(w, l.rows as u32)?;
        write_u32(w, l.cols as u32)?;
        write_f64s(w, &l.w)?;
        write_f64s(w, &l.b)?;
    }
    Ok(())
}

fn read_mlp(r: &mut impl Read) -> Result<Mlp> {
    let act_tag = read_u8(r)?;
    let slope = read_f64s(r, 1)?[0];
    let activation = match act_tag {
        0 => Activation::Softplus,
        1 => Activation::LeakyRelu(slope),
        t => return Err(Error::Format(format!("unknown activation tag {t}"))),
    };
    let n_layers = read_u32(r)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        if rows == 0 || cols == 0 || rows > 1 << 16 || cols > 1 << 16 {
            return Err(Error::Format(format!("implausible layer shape {rows}x{cols}")));
        }
        let w = read_f64s(r, rows * cols)?;
        let b = read_f64s(r, rows)?;
        layers.push(Layer { w, b, rows, cols });
    }
    Mlp::from_layers(layers, activation)
}

fn write_voxel(w: &mut impl Write, v: &VoxelGrid) -> Result<()> {
    write_u32(w, v.res as u32)?;
    write_u32(w, v.channels as u32)?;
    write_f64s(w, &v.values)
}

fn read_voxel(r: &mut impl Read) -> Result<VoxelGrid> {
    let res = read_u32(r)? as usize;
    let channels = read_u32(r)? as usize;
    if res == 0 || res > 512 || channels == 0 || channels > 1024 {
        return Err(Error::Format(format!("implausible voxel shape {res}^3 x {channels}")));
    }
    let values = read_f64s(r, (res + 1).pow(3) * channels)?;
    Ok(VoxelGrid { res, channels, values })
}

/// Everything a checkpoint stores: the trainable state, without the scene
/// inputs (prior shape and target maps), which are reconstructed from the
/// experiment description.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub field_mlp: Mlp,
    pub voxel: VoxelGrid,
    pub discriminator: Option<Mlp>,
}

/// Write the field's trainable state (and optionally the discriminator).
pub fn save_checkpoint(path: &Path, field: &SdfField, discriminator: Option<&Mlp>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&[TAG_FIELD_MLP])?;
    write_mlp(&mut w, &field.mlp)?;
    w.write_all(&[TAG_VOXEL])?;
    write_voxel(&mut w, &field.scene.voxel)?;
    if let Some(disc) = discriminator {
        w.write_all(&[TAG_DISC_MLP])?;
        write_mlp(&mut w, disc)?;
    }
    w.write_all(&[TAG_END])?;
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?} (expected {:?})",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut field_mlp = None;
    let mut voxel = None;
    let mut discriminator = None;
    loop {
        match read_u8(&mut r)? {
            TAG_END => break,
            TAG_FIELD_MLP => field_mlp = Some(read_mlp(&mut r)?),
            TAG_VOXEL => voxel = Some(read_voxel(&mut r)?),
            TAG_DISC_MLP => discriminator = Some(read_mlp(&mut r)?),
            t => return Err(Error::Format(format!("unknown checkpoint section tag {t}"))),
        }
    }
    match (field_mlp, voxel) {
        (Some(field_mlp), Some(voxel)) => Ok(Checkpoint { field_mlp, voxel, discriminator }),
        _ => Err(Error::Format("checkpoint missing field or voxel section".into())),
    }
}

/// Rebuild a usable field from a checkpoint plus the scene inputs it was
/// trained against.
pub fn restore_field(
    ckpt: Checkpoint,
    prior: crate::geom::AnalyticSdf,
    front: crate::render::NormalMap,
    back: crate::render::NormalMap,
) -> Result<SdfField> {
    let scene = super::PriorScene::new(prior, ckpt.voxel, front, back)?;
    if ckpt.field_mlp.input_dim() != scene.feature_dim() {
        return Err(Error::Format(format!(
            "checkpoint MLP expects {} features, scene provides {}",
            ckpt.field_mlp.input_dim(),
            scene.feature_dim()
        )));
    }
    Ok(SdfField {
        scene,
        mlp: ckpt.field_mlp,
        eval_count: std::sync::atomic::AtomicU64::new(0),
    })
}
