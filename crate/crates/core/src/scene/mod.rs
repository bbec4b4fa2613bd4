//! Deterministic 2D block-pushing world.
//!
//! A disk end effector pushes rigid (non-rotating) blocks on a unit table
//! towards a goal pole. Contacts are resolved kinematically with minimal
//! translation vectors against each block's convex hull.

pub mod episode;
pub mod expert;
pub mod geometry;
pub mod render;

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use geometry::{arc, convex_hull, disk_polygon_mtv, polygon_mtv, regular_polygon, rotate, Point};

pub use episode::{generate_episodes, run_episode, Trajectory};
pub use expert::scripted_expert;
pub use render::{ground_truth_masks, render, entity_ids, GroundTruthMasks, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockShape {
    Moon,
    Cube,
    Star,
    Pentagon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockColor {
    Red,
    Blue,
    Green,
    Yellow,
}

impl BlockColor {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            BlockColor::Red => [220, 40, 40],
            BlockColor::Blue => [40, 80, 220],
            BlockColor::Green => [40, 170, 60],
            BlockColor::Yellow => [230, 200, 30],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub shape: BlockShape,
    pub color: BlockColor,
    pub circumradius: f64,
}

impl BlockSpec {
    pub fn name(&self) -> alloc::string::String {
        alloc::format!("{:?}_{:?}", self.color, self.shape).to_lowercase()
    }

    /// Outline at unit circumradius in the block frame (CCW).
    fn unit_outline(&self) -> Vec<Point> {
        match self.shape {
            BlockShape::Cube => regular_polygon(4, 1.0, PI / 4.0),
            BlockShape::Pentagon => regular_polygon(5, 1.0, -PI / 2.0),
            BlockShape::Star => (0..10)
                .map(|i| {
                    let r = if i % 2 == 0 { 1.0 } else { 0.45 };
                    let a = -PI / 2.0 + PI * i as f64 / 5.0;
                    [r * libm::cos(a), r * libm::sin(a)]
                })
                .collect(),
            BlockShape::Moon => {
                // Crescent: unit disk minus a disk of radius 0.85 offset by 0.5.
                let (c, ri) = (0.5, 0.85);
                let xt = (1.0 + c * c - ri * ri) / (2.0 * c);
                let yt = libm::sqrt(1.0 - xt * xt);
                let outer0 = libm::atan2(yt, xt);
                let inner0 = libm::atan2(yt, xt - c);
                let mut pts = arc([0.0, 0.0], 1.0, outer0, 2.0 * PI - outer0, 16);
                let inner = arc([c, 0.0], ri, 2.0 * PI - inner0, inner0, 12);
                pts.extend(inner.into_iter().skip(1).take(11));
                pts
            }
        }
    }

    /// Render outline (may be non-convex) at `pose`.
    pub fn outline(&self, pose: &Pose) -> Vec<Point> {
        self.unit_outline()
            .into_iter()
            .map(|p| {
                let q = rotate(p, pose.theta);
                [pose.x + self.circumradius * q[0], pose.y + self.circumradius * q[1]]
            })
            .collect()
    }

    /// Convex collision hull at `pose`.
    pub fn hull(&self, pose: &Pose) -> Vec<Point> {
        convex_hull(&self.outline(pose))
    }
}

/// Blocks present for each supported count, in draw (roster) order.
pub fn roster(n_blocks: usize, circumradius: f64) -> Result<Vec<BlockSpec>> {
    use BlockColor::*;
    use BlockShape::*;
    let all = [
        (Moon, Red),
        (Cube, Blue),
        (Star, Green),
        (Pentagon, Yellow),
        (Pentagon, Red),
        (Moon, Blue),
        (Cube, Green),
        (Star, Yellow),
    ];
    let picked: &[(BlockShape, BlockColor)] = match n_blocks {
        1 => &all[1..2],
        3 => &all[..3],
        4 => &all[..4],
        8 => &all[..],
        n => return Err(Error::UnsupportedRoster(n)),
    };
    Ok(picked.iter().map(|&(shape, color)| BlockSpec { shape, color, circumradius }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn pos(&self) -> Point {
        [self.x, self.y]
    }
}

/// World constants. Table is the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub block_radius: f64,
    pub effector_radius: f64,
    pub pole_radius: f64,
    pub max_step: f64,
    pub success_radius: f64,
    /// Border of background visible around the table, in table units.
    pub view_margin: f64,
    pub resolve_iters: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            block_radius: 0.06,
            effector_radius: 0.03,
            pole_radius: 0.025,
            max_step: 0.02,
            success_radius: 0.05,
            view_margin: 0.05,
            resolve_iters: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub blocks: Vec<BlockSpec>,
    pub block_poses: Vec<Pose>,
    pub effector: Point,
    pub pole: Point,
}

impl SceneState {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn hulls(&self) -> Vec<Vec<Point>> {
        self.blocks.iter().zip(&self.block_poses).map(|(b, p)| b.hull(p)).collect()
    }

    pub fn target_distance(&self, target: usize) -> f64 {
        geometry::dist(self.block_poses[target].pos(), self.pole)
    }

    /// Ground-truth keypoints: every block center, then the effector.
    pub fn keypoints(&self) -> Vec<Point> {
        let mut k: Vec<Point> = self.block_poses.iter().map(Pose::pos).collect();
        k.push(self.effector);
        k
    }
}

pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
const BLOCK_MARGIN: f64 = 0.1;
const POLE_MARGIN: f64 = 0.2;
const CLEARANCE: f64 = 0.01;

/// Rejection-sample a non-overlapping scene. Pure in `(seed, n_blocks, cfg)`.
pub fn sample_scene(seed: u64, n_blocks: usize, cfg: &SimConfig) -> Result<SceneState> {
    let blocks = roster(n_blocks, cfg.block_radius)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempts = 0usize;
    let mut bump = || {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            Err(Error::PlacementFailed { attempts: MAX_PLACEMENT_ATTEMPTS })
        } else {
            Ok(())
        }
    };
    let mut poses: Vec<Pose> = Vec::with_capacity(n_blocks);
    let mut hulls: Vec<Vec<Point>> = Vec::with_capacity(n_blocks);
    for b in &blocks {
        loop {
            bump()?;
            let pose = Pose {
                x: rng.random_range(BLOCK_MARGIN..1.0 - BLOCK_MARGIN),
                y: rng.random_range(BLOCK_MARGIN..1.0 - BLOCK_MARGIN),
                theta: rng.random_range(0.0..2.0 * PI),
            };
            // Circumcircle clearance is a cheap sufficient condition; it also
            // keeps room for the effector to pass between blocks.
            let far = poses.iter().all(|p| geometry::dist(p.pos(), pose.pos()) > 2.0 * cfg.block_radius + CLEARANCE);
            if far {
                hulls.push(b.hull(&pose));
                poses.push(pose);
                break;
            }
        }
    }
    let effector = loop {
        bump()?;
        let e = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        if hulls.iter().all(|h| disk_polygon_mtv(e, cfg.effector_radius + CLEARANCE, h).is_none()) {
            break e;
        }
    };
    let pole = loop {
        bump()?;
        let p = [rng.random_range(POLE_MARGIN..1.0 - POLE_MARGIN), rng.random_range(POLE_MARGIN..1.0 - POLE_MARGIN)];
        if poses.iter().all(|b| geometry::dist(b.pos(), p) > cfg.block_radius + cfg.pole_radius) {
            break p;
        }
    };
    Ok(SceneState { blocks, block_poses: poses, effector, pole })
}

fn clamp01(p: Point) -> Point {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Clamp an action to the disk of radius `max_step`.
pub fn clamp_action(action: Point, max_step: f64) -> Point {
    let n = geometry::norm(action);
    if !n.is_finite() {
        return [0.0, 0.0];
    }
    if n > max_step {
        geometry::scale(action, max_step / n)
    } else {
        action
    }
}

/// Advance the world by one effector displacement.
pub fn step(state: &SceneState, action: Point, cfg: &SimConfig) -> SceneState {
    let mut next = state.clone();
    let a = clamp_action(action, cfg.max_step);
    next.effector = clamp01(geometry::add(state.effector, a));
    let e = next.effector;
    let n = next.blocks.len();
    let mut hulls = next.hulls();
    let shift = |pose: &mut Pose, hull: &mut Vec<Point>, t: Point| {
        pose.x += t[0];
        pose.y += t[1];
        hull.iter_mut().for_each(|p| *p = geometry::add(*p, t));
    };
    for i in 0..n {
        if let Some(t) = disk_polygon_mtv(e, cfg.effector_radius, &hulls[i]) {
            shift(&mut next.block_poses[i], &mut hulls[i], t);
        }
    }
    for _ in 0..cfg.resolve_iters {
        let mut moved = false;
        for i in 0..n {
            for j in (i + 1)..n {
                if let Some((normal, depth)) = polygon_mtv(&hulls[i], &hulls[j]) {
                    let half = geometry::scale(normal, 0.5 * depth);
                    shift(&mut next.block_poses[j], &mut hulls[j], half);
                    shift(&mut next.block_poses[i], &mut hulls[i], geometry::scale(half, -1.0));
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
    for pose in &mut next.block_poses {
        pose.x = pose.x.clamp(0.0, 1.0);
        pose.y = pose.y.clamp(0.0, 1.0);
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free_scene() -> SceneState {
        let cfg = SimConfig::default();
        SceneState {
            blocks: roster(1, cfg.block_radius).unwrap(),
            block_poses: alloc::vec![Pose { x: 0.2, y: 0.2, theta: 0.0 }],
            effector: [0.5, 0.5],
            pole: [0.8, 0.8],
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = SimConfig::default();
        let a = sample_scene(7, 8, &cfg).unwrap();
        let b = sample_scene(7, 8, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_scene(8, 8, &cfg).unwrap());
    }

    #[test]
    fn single_block_scene_inside_table() {
        let cfg = SimConfig::default();
        for seed in 0..20 {
            let s = sample_scene(seed, 1, &cfg).unwrap();
            assert_eq!(s.block_poses.len(), 1);
            for p in [s.block_poses[0].pos(), s.effector, s.pole] {
                assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
            }
        }
    }

    #[test]
    fn unsupported_roster_rejected() {
        assert_eq!(sample_scene(0, 5, &SimConfig::default()), Err(Error::UnsupportedRoster(5)));
    }

    #[test]
    fn over_dense_configuration_fails() {
        let cfg = SimConfig { block_radius: 0.3, ..Default::default() };
        assert!(matches!(sample_scene(0, 8, &cfg), Err(Error::PlacementFailed { .. })));
    }

    #[test]
    fn free_space_motion() {
        let cfg = SimConfig::default();
        let s = free_scene();
        let n = step(&s, [0.01, 0.0], &cfg);
        assert!((n.effector[0] - 0.51).abs() < 1e-12 && (n.effector[1] - 0.5).abs() < 1e-12);
        assert_eq!(n.block_poses, s.block_poses);
    }

    #[test]
    fn boundary_clamp() {
        let cfg = SimConfig::default();
        let mut s = free_scene();
        s.effector = [0.99, 0.5];
        let n = step(&s, [0.05, 0.0], &cfg);
        assert_eq!(n.effector, [1.0, 0.5]);
    }

    #[test]
    fn moon_outline_is_simple_crescent() {
        let spec = BlockSpec { shape: BlockShape::Moon, color: BlockColor::Red, circumradius: 1.0 };
        let o = spec.outline(&Pose { x: 0.0, y: 0.0, theta: 0.0 });
        assert!(geometry::point_in_polygon([-0.9, 0.0], &o));
        assert!(!geometry::point_in_polygon([0.0, 0.0], &o));
        assert!(!geometry::point_in_polygon([0.9, 0.0], &o));
    }
}
