//! Binary file formats for flow fields and feature maps.
//!
//! Both start with a four-byte magic and a little-endian version, followed
//! by the grid geometry and row-major little-endian `f32` payloads. Values
//! are narrowed to `f32` on write.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, Pose2};
use crate::gtflow::{FlowDirection, FlowField, FlowUnit};
use crate::scenesim::BevFeatureMap;

const FLOW_MAGIC: &[u8; 4] = b"BFLW";
const FEATURE_MAGIC: &[u8; 4] = b"BFEA";
const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn check_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = get_u32(r)?;
    if v != VERSION {
        return Err(Error::Format(format!("unsupported version {v}")));
    }
    Ok(())
}

fn put_f32s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn get_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_flow<W: Write>(flow: &FlowField, mut w: W) -> Result<()> {
    let g = &flow.grid;
    w.write_all(FLOW_MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, g.width as u32)?;
    put_u32(&mut w, g.height as u32)?;
    put_f64(&mut w, g.cell)?;
    put_f64(&mut w, g.origin_x)?;
    put_f64(&mut w, g.origin_y)?;
    w.write_all(&[flow.direction.tag(), flow.unit.tag()])?;
    put_f32s(&mut w, &flow.data)
}

pub fn read_flow<R: Read>(mut r: R) -> Result<FlowField> {
    check_header(&mut r, FLOW_MAGIC)?;
    let width = get_u32(&mut r)? as usize;
    let height = get_u32(&mut r)? as usize;
    let cell = get_f64(&mut r)?;
    let origin_x = get_f64(&mut r)?;
    let origin_y = get_f64(&mut r)?;
    let grid = BevGridSpec::new(origin_x, origin_y, cell, width, height)?;
    let direction = FlowDirection::from_tag(get_u8(&mut r)?)?;
    let unit = FlowUnit::from_tag(get_u8(&mut r)?)?;
    let mut flow = FlowField::zeros(grid, direction, unit);
    flow.data = get_f32s(&mut r, 2 * grid.cell_count())?;
    Ok(flow)
}

/// The ego pose is not stored; maps read back carry the identity pose.
pub fn write_features<W: Write>(map: &BevFeatureMap, mut w: W) -> Result<()> {
    let g = &map.grid;
    w.write_all(FEATURE_MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, g.width as u32)?;
    put_u32(&mut w, g.height as u32)?;
    put_u32(&mut w, map.channels as u32)?;
    put_f64(&mut w, g.cell)?;
    put_f64(&mut w, g.origin_x)?;
    put_f64(&mut w, g.origin_y)?;
    put_f64(&mut w, map.timestamp)?;
    put_f32s(&mut w, &map.data)
}

pub fn read_features<R: Read>(mut r: R) -> Result<BevFeatureMap> {
    check_header(&mut r, FEATURE_MAGIC)?;
    let width = get_u32(&mut r)? as usize;
    let height = get_u32(&mut r)? as usize;
    let channels = get_u32(&mut r)? as usize;
    let cell = get_f64(&mut r)?;
    let origin_x = get_f64(&mut r)?;
    let origin_y = get_f64(&mut r)?;
    let timestamp = get_f64(&mut r)?;
    let grid = BevGridSpec::new(origin_x, origin_y, cell, width, height)?;
    let mut map = BevFeatureMap::zeros(grid, channels, timestamp, Pose2::IDENTITY);
    map.data = get_f32s(&mut r, channels * grid.cell_count())?;
    Ok(map)
}
