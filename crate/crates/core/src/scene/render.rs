//! Flat-shaded rasterizer and the matching ground-truth segmentation.
//!
//! Each pixel is shaded by the topmost entity containing its center. Draw
//! order, back to front: background/table, pole, blocks (roster order),
//! effector. Masks and raster share the same per-pixel entity decision, so
//! they agree exactly.

use alloc::vec;
use alloc::vec::Vec;

use super::geometry::{dist, point_in_polygon, Point};
use super::{SceneState, SimConfig};

pub const BACKGROUND_RGB: [u8; 3] = [30, 30, 36];
pub const TABLE_RGB: [u8; 3] = [200, 196, 186];
pub const POLE_RGB: [u8; 3] = [150, 60, 190];
pub const EFFECTOR_RGB: [u8; 3] = [70, 70, 70];

/// Channel-first RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `[3, height, width]`
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    /// Interleaved 8-bit RGB, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let p = self.height * self.width;
        let mut out = Vec::with_capacity(3 * p);
        for i in 0..p {
            for c in 0..3 {
                out.push(libm::roundf(self.data[c * p + i].clamp(0.0, 1.0) * 255.0) as u8);
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Self {
        let p = height * width;
        assert_eq!(rgb.len(), 3 * p, "rgb buffer size");
        let mut data = vec![0.0; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                data[c * p + i] = rgb[3 * i + c] as f32 / 255.0;
            }
        }
        Self { height, width, data }
    }
}

/// World coordinates of the center of pixel `(row, col)`.
pub fn pixel_center(row: usize, col: usize, height: usize, width: usize, cfg: &SimConfig) -> Point {
    let span = 1.0 + 2.0 * cfg.view_margin;
    [
        -cfg.view_margin + (col as f64 + 0.5) * span / width as f64,
        -cfg.view_margin + (row as f64 + 0.5) * span / height as f64,
    ]
}

/// Map image-normalized coordinates (`[0, 1]` across the frame) to table units.
pub fn image_to_table(u: Point, cfg: &SimConfig) -> Point {
    let span = 1.0 + 2.0 * cfg.view_margin;
    [u[0] * span - cfg.view_margin, u[1] * span - cfg.view_margin]
}

pub fn table_to_image(p: Point, cfg: &SimConfig) -> Point {
    let span = 1.0 + 2.0 * cfg.view_margin;
    [(p[0] + cfg.view_margin) / span, (p[1] + cfg.view_margin) / span]
}

/// Entity label per pixel: `0` background, `1..=n` blocks, `n + 1` pole,
/// `n + 2` effector.
pub fn entity_ids(state: &SceneState, height: usize, width: usize, cfg: &SimConfig) -> Vec<u8> {
    assert!(height > 0 && width > 0, "resolution must be positive");
    let n = state.n_blocks();
    let outlines: Vec<Vec<Point>> = state.blocks.iter().zip(&state.block_poses).map(|(b, p)| b.outline(p)).collect();
    let mut ids = vec![0u8; height * width];
    for row in 0..height {
        for col in 0..width {
            let p = pixel_center(row, col, height, width, cfg);
            let mut id = 0u8;
            if dist(p, state.pole) <= cfg.pole_radius {
                id = (n + 1) as u8;
            }
            for (k, (o, pose)) in outlines.iter().zip(&state.block_poses).enumerate() {
                if dist(p, pose.pos()) <= state.blocks[k].circumradius && point_in_polygon(p, o) {
                    id = (k + 1) as u8;
                }
            }
            if dist(p, state.effector) <= cfg.effector_radius {
                id = (n + 2) as u8;
            }
            ids[row * width + col] = id;
        }
    }
    ids
}

fn to_unit(c: [u8; 3]) -> [f32; 3] {
    [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
}

/// Rasterize `state` at `height × width`.
pub fn render(state: &SceneState, height: usize, width: usize, cfg: &SimConfig) -> Image {
    let ids = entity_ids(state, height, width, cfg);
    let n = state.n_blocks();
    let mut palette: Vec<[f32; 3]> = vec![to_unit(BACKGROUND_RGB)];
    palette.extend(state.blocks.iter().map(|b| to_unit(b.color.rgb())));
    palette.push(to_unit(POLE_RGB));
    palette.push(to_unit(EFFECTOR_RGB));
    let table = to_unit(TABLE_RGB);
    let p = height * width;
    let mut img = Image::zeros(height, width);
    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            let id = ids[i] as usize;
            let rgb = if id == 0 {
                let w = pixel_center(row, col, height, width, cfg);
                if (0.0..=1.0).contains(&w[0]) && (0.0..=1.0).contains(&w[1]) {
                    table
                } else {
                    palette[0]
                }
            } else {
                debug_assert!(id <= n + 2);
                palette[id]
            };
            for c in 0..3 {
                img.data[c * p + i] = rgb[c];
            }
        }
    }
    img
}

/// Per-entity binary masks partitioning the image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMasks {
    pub height: usize,
    pub width: usize,
    pub n_blocks: usize,
    /// Entity label per pixel, see [`entity_ids`].
    pub labels: Vec<u8>,
}

impl GroundTruthMasks {
    /// Number of mask channels: blocks, effector, pole, background.
    pub fn channels(&self) -> usize {
        self.n_blocks + 3
    }

    /// Channel index → pixel label.
    fn label_of(&self, channel: usize) -> u8 {
        let n = self.n_blocks;
        match channel {
            c if c < n => (c + 1) as u8,
            c if c == n => (n + 2) as u8,
            c if c == n + 1 => (n + 1) as u8,
            _ => 0,
        }
    }

    pub fn mask(&self, channel: usize) -> Vec<u8> {
        let l = self.label_of(channel);
        self.labels.iter().map(|&v| (v == l) as u8).collect()
    }

    pub fn block_mask(&self, block: usize) -> Vec<u8> {
        self.mask(block)
    }

    pub fn effector_mask(&self) -> Vec<u8> {
        self.mask(self.n_blocks)
    }

    pub fn pole_mask(&self) -> Vec<u8> {
        self.mask(self.n_blocks + 1)
    }

    pub fn background_mask(&self) -> Vec<u8> {
        self.mask(self.n_blocks + 2)
    }

    /// All masks stacked as `[channels, height, width]` floats.
    pub fn stacked(&self) -> Vec<f32> {
        let p = self.height * self.width;
        let mut out = vec![0.0f32; self.channels() * p];
        for c in 0..self.channels() {
            let l = self.label_of(c);
            for (o, &v) in out[c * p..(c + 1) * p].iter_mut().zip(&self.labels) {
                *o = if v == l { 1.0 } else { 0.0 };
            }
        }
        out
    }

    /// True for pixels that belong to a block, the effector or the pole.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&v| v != 0).collect()
    }
}

pub fn ground_truth_masks(state: &SceneState, height: usize, width: usize, cfg: &SimConfig) -> GroundTruthMasks {
    GroundTruthMasks { height, width, n_blocks: state.n_blocks(), labels: entity_ids(state, height, width, cfg) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{sample_scene, Pose};

    #[test]
    fn render_is_deterministic_and_bounded() {
        let cfg = SimConfig::default();
        let s = sample_scene(3, 8, &cfg).unwrap();
        let a = render(&s, 32, 32, &cfg);
        assert_eq!(a, render(&s, 32, 32, &cfg));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn masks_partition_every_pixel() {
        let cfg = SimConfig::default();
        let s = sample_scene(11, 8, &cfg).unwrap();
        let m = ground_truth_masks(&s, 40, 40, &cfg);
        let st = m.stacked();
        let p = 40 * 40;
        for i in 0..p {
            let total: f32 = (0..m.channels()).map(|c| st[c * p + i]).sum();
            assert_eq!(total, 1.0);
        }
    }

    #[test]
    fn fully_occluded_block_has_empty_mask() {
        let cfg = SimConfig { effector_radius: 0.2, ..Default::default() };
        let mut s = sample_scene(0, 1, &cfg).unwrap();
        s.block_poses[0] = Pose { x: 0.5, y: 0.5, theta: 0.3 };
        s.effector = [0.5, 0.5];
        let m = ground_truth_masks(&s, 48, 48, &cfg);
        assert!(m.block_mask(0).iter().all(|&v| v == 0));
        assert!(m.effector_mask().iter().any(|&v| v == 1));
    }

    #[test]
    fn rgb8_roundtrip_is_lossless() {
        let cfg = SimConfig::default();
        let s = sample_scene(5, 4, &cfg).unwrap();
        let img = render(&s, 16, 16, &cfg);
        assert_eq!(Image::from_rgb8(16, 16, &img.to_rgb8()), img);
    }
}
