//! Closed-loop waypoint pusher used to generate demonstrations.

use core::f64::consts::PI;

use super::geometry::{add, dist, dot, norm, normalize, scale, sub, Point};
use super::{clamp_action, SceneState, SimConfig};

/// Extra distance behind the block at which a push starts.
const STANDOFF_GAP: f64 = 0.01;
/// How far the effector may drift sideways off the push line and keep pushing.
const LATERAL_TOLERANCE: f64 = 0.02;
/// Clearance kept from the block while circling to the push point.
const ORBIT_GAP: f64 = 0.02;
/// Angular step (radians) of one orbit waypoint.
const ORBIT_STEP: f64 = 0.6;

/// Action of the scripted expert for moving `target` onto the pole.
///
/// Phase one brings the effector to the push point behind the block on the
/// block→pole line, orbiting the block instead of crossing it. Phase two
/// pushes along the block→pole direction, steering back onto the line.
pub fn scripted_expert(state: &SceneState, target: usize, cfg: &SimConfig) -> Point {
    assert!(target < state.n_blocks(), "target block {target} does not exist");
    let block = state.block_poses[target].pos();
    let radius = state.blocks[target].circumradius;
    let eff = state.effector;
    let to_pole = sub(state.pole, block);
    if norm(to_pole) <= cfg.success_radius {
        return [0.0, 0.0];
    }
    let dir = normalize(to_pole);
    let standoff = radius + cfg.effector_radius + STANDOFF_GAP;
    let push_point = sub(block, scale(dir, standoff));

    let rel = sub(eff, block);
    let along = dot(rel, dir);
    let lateral = norm(sub(rel, scale(dir, along)));
    if along < 0.0 && -along <= standoff + 0.02 && lateral <= LATERAL_TOLERANCE {
        // Aim through a point just past the block center; this pulls the
        // effector back onto the push line while advancing.
        let aim = add(block, scale(dir, 0.05));
        return clamp_action(scale(normalize(sub(aim, eff)), cfg.max_step), cfg.max_step);
    }

    let orbit = radius + cfg.effector_radius + ORBIT_GAP;
    let waypoint = if segment_clears(eff, push_point, block, orbit) {
        push_point
    } else {
        let a_eff = libm::atan2(rel[1], rel[0]);
        let pp = sub(push_point, block);
        let a_push = libm::atan2(pp[1], pp[0]);
        let mut delta = a_push - a_eff;
        while delta > PI {
            delta -= 2.0 * PI;
        }
        while delta < -PI {
            delta += 2.0 * PI;
        }
        let turn = delta.signum() * delta.abs().min(ORBIT_STEP);
        let r = norm(rel).max(orbit);
        let a = a_eff + turn;
        add(block, [r * libm::cos(a), r * libm::sin(a)])
    };
    let step = sub(waypoint, eff);
    if norm(step) < 1e-12 {
        return [0.0, 0.0];
    }
    clamp_action(step, cfg.max_step)
}

/// True when the segment `a→b` keeps at least `radius` from `center`.
fn segment_clears(a: Point, b: Point, center: Point, radius: f64) -> bool {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(center, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    // Allow leaving the push point region itself, which sits inside the orbit.
    let closest = add(a, scale(ab, t));
    dist(closest, center) >= radius - 1e-9 || t >= 1.0 - 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{roster, Pose};

    fn scene(block: Point, effector: Point, pole: Point) -> SceneState {
        SceneState {
            blocks: roster(1, 0.06).unwrap(),
            block_poses: alloc::vec![Pose { x: block[0], y: block[1], theta: 0.3 }],
            effector,
            pole,
        }
    }

    #[test]
    fn pushes_along_block_to_pole_from_push_point() {
        let cfg = SimConfig::default();
        let (block, pole) = ([0.3, 0.4], [0.7, 0.8]);
        let dir = normalize(sub(pole, block));
        let pp = sub(block, scale(dir, 0.06 + cfg.effector_radius + STANDOFF_GAP));
        let a = scripted_expert(&scene(block, pp, pole), 0, &cfg);
        let ad = normalize(a);
        assert!((ad[0] - dir[0]).abs() < 1e-9 && (ad[1] - dir[1]).abs() < 1e-9);
        assert!(norm(a) <= cfg.max_step + 1e-15);
    }

    #[test]
    fn idle_when_block_on_pole() {
        let cfg = SimConfig::default();
        let a = scripted_expert(&scene([0.5, 0.5], [0.2, 0.2], [0.52, 0.53]), 0, &cfg);
        assert_eq!(a, [0.0, 0.0]);
    }

    #[test]
    fn orbits_instead_of_crossing_block() {
        let cfg = SimConfig::default();
        // Effector directly in front of the block, on the pole side.
        let s = scene([0.5, 0.5], [0.62, 0.5], [0.8, 0.5]);
        let a = scripted_expert(&s, 0, &cfg);
        // Must not head straight at the block (negative x).
        assert!(a[1].abs() > 1e-3, "expected a tangential move, got {a:?}");
    }
}
