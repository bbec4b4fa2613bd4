//! Mask stacks as 16-bit grayscale PNG with a JSON sidecar, and report
//! files as CSV plus JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use slotbench_core::slot::MaskStack;

use crate::checkpoint::write_atomic;
use crate::error::{HarnessError, Result};

/// Describes how a mask PNG is laid out. The image is `num_slots` pages of
/// `height × width` stacked vertically; a pixel value `v` encodes the mask
/// weight `v / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub num_slots: usize,
    pub height: usize,
    pub width: usize,
    pub scale: u32,
    pub layout: String,
    /// Checksum of the parameters that produced the masks.
    pub model_checksum: String,
}

const SCALE: u32 = 65535;

pub fn encode_masks(masks: &MaskStack) -> Result<Vec<u8>> {
    let (k, h, w) = (masks.num_slots, masks.height, masks.width);
    let mut raw = Vec::with_capacity(2 * k * h * w);
    for &m in &masks.masks {
        let v = (m.clamp(0.0, 1.0) as f64 * SCALE as f64).round() as u16;
        raw.extend_from_slice(&v.to_be_bytes());
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, (k * h) as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut wr = enc.write_header().map_err(|e| HarnessError::Image(e.to_string()))?;
        wr.write_image_data(&raw).map_err(|e| HarnessError::Image(e.to_string()))?;
    }
    Ok(out)
}

/// Decode a mask PNG into `[k, h, w]` weights.
pub fn decode_masks(bytes: &[u8], sidecar: &MaskSidecar) -> Result<Vec<f32>> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes))
        .read_info()
        .map_err(|e| HarnessError::Image(e.to_string()))?;
    let size = dec.output_buffer_size().ok_or_else(|| HarnessError::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = dec.next_frame(&mut buf).map_err(|e| HarnessError::Image(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(HarnessError::Image("expected 16-bit grayscale".into()));
    }
    if info.width as usize != sidecar.width || info.height as usize != sidecar.num_slots * sidecar.height {
        return Err(HarnessError::Image("mask image size disagrees with sidecar".into()));
    }
    Ok(buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / sidecar.scale as f32)
        .collect())
}

/// Write `<stem>.png` and `<stem>.json` into `dir`.
pub fn write_masks(dir: &Path, stem: &str, masks: &MaskStack, model_checksum: &str) -> Result<MaskSidecar> {
    let sidecar = MaskSidecar {
        num_slots: masks.num_slots,
        height: masks.height,
        width: masks.width,
        scale: SCALE,
        layout: "slot pages stacked vertically, slot 0 on top".into(),
        model_checksum: model_checksum.into(),
    };
    write_atomic(&dir.join(format!("{stem}.png")), &encode_masks(masks)?)?;
    write_json(&dir.join(format!("{stem}.json")), &sidecar)?;
    Ok(sidecar)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Report(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| HarnessError::Report(e.to_string()))).collect()
}
