use std::collections::HashMap;
use std::f64::consts::PI;

use proptest::prelude::*;
use slotbench_core::scene::episode::generate_episodes;
use slotbench_core::scene::render::{BACKGROUND_RGB, EFFECTOR_RGB, POLE_RGB, TABLE_RGB};
use slotbench_core::scene::{ground_truth_masks, render, roster, sample_scene, step, Pose, SceneState, SimConfig};

type P = [f64; 2];

fn cross(o: P, a: P, b: P) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_cross(a: P, b: P, c: P, d: P) -> bool {
    let (d1, d2) = (cross(c, d, a), cross(c, d, b));
    let (d3, d4) = (cross(a, b, c), cross(a, b, d));
    d1 * d2 <= 0.0 && d3 * d4 <= 0.0
}

/// Nonzero winding rule.
fn winding_inside(p: P, poly: &[P]) -> bool {
    let mut w = 0i32;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        if a[1] <= p[1] {
            if b[1] > p[1] && cross(a, b, p) > 0.0 {
                w += 1;
            }
        } else if b[1] <= p[1] && cross(a, b, p) < 0.0 {
            w -= 1;
        }
    }
    w != 0
}

/// Brute force: any crossing edge pair or one polygon inside the other.
fn polygons_intersect(a: &[P], b: &[P]) -> bool {
    for i in 0..a.len() {
        for j in 0..b.len() {
            if segments_cross(a[i], a[(i + 1) % a.len()], b[j], b[(j + 1) % b.len()]) {
                return true;
            }
        }
    }
    winding_inside(a[0], b) || winding_inside(b[0], a)
}

fn seg_dist(p: P, a: P, b: P) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / (ab[0] * ab[0] + ab[1] * ab[1])).clamp(0.0, 1.0);
    ((p[0] - a[0] - t * ab[0]).powi(2) + (p[1] - a[1] - t * ab[1]).powi(2)).sqrt()
}

fn disk_hits_polygon(c: P, r: f64, poly: &[P]) -> bool {
    winding_inside(c, poly) || (0..poly.len()).any(|i| seg_dist(c, poly[i], poly[(i + 1) % poly.len()]) < r)
}

#[test]
fn hundred_eight_block_scenes_have_no_overlaps() {
    let cfg = SimConfig::default();
    let mut overlapping = 0;
    for seed in 0..100 {
        let s = sample_scene(seed, 8, &cfg).unwrap();
        let outlines: Vec<Vec<P>> = s.blocks.iter().zip(&s.block_poses).map(|(b, p)| b.outline(p)).collect();
        for i in 0..8 {
            for j in (i + 1)..8 {
                overlapping += polygons_intersect(&outlines[i], &outlines[j]) as usize;
            }
            assert!(!disk_hits_polygon(s.effector, cfg.effector_radius, &outlines[i]), "seed {seed}: effector on block {i}");
        }
        for p in s.keypoints().iter().chain([&s.pole]) {
            assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
        }
    }
    assert_eq!(overlapping, 0);
}

/// Disk–convex-polygon separation by projecting on every edge normal plus
/// the axis through the nearest vertex; returns the push for the polygon.
fn sat_disk_mtv(c: P, r: f64, poly: &[P]) -> Option<P> {
    let mut axes: Vec<P> = (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            let n = [b[1] - a[1], a[0] - b[0]];
            let l = n[0].hypot(n[1]);
            [n[0] / l, n[1] / l]
        })
        .collect();
    let v = *poly.iter().min_by(|a, b| (a[0] - c[0]).hypot(a[1] - c[1]).total_cmp(&(b[0] - c[0]).hypot(b[1] - c[1]))).unwrap();
    let d = [v[0] - c[0], v[1] - c[1]];
    let l = d[0].hypot(d[1]);
    axes.push([d[0] / l, d[1] / l]);
    let mut best: Option<(P, f64)> = None;
    for ax in axes {
        let proj: Vec<f64> = poly.iter().map(|p| p[0] * ax[0] + p[1] * ax[1]).collect();
        let (pmin, pmax) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let cc = c[0] * ax[0] + c[1] * ax[1];
        let (dmin, dmax) = (cc - r, cc + r);
        let overlap = pmax.min(dmax) - pmin.max(dmin);
        if overlap <= 0.0 {
            return None;
        }
        // Resolve by moving the polygon to whichever side needs less travel.
        let (push, sign) = if pmax - dmin < dmax - pmin { (pmax - dmin, -1.0) } else { (dmax - pmin, 1.0) };
        if best.is_none_or(|(_, b)| push < b) {
            best = Some(([ax[0] * sign * push, ax[1] * sign * push], push));
        }
    }
    best.map(|b| b.0)
}

#[test]
fn face_on_push_matches_independent_mtv() {
    let cfg = SimConfig::default();
    let cube = roster(1, cfg.block_radius).unwrap();
    // Rotate so that the cube has a vertical left face.
    let v0 = cube[0].outline(&Pose { x: 0.0, y: 0.0, theta: 0.0 })[0];
    let theta = PI / 4.0 - v0[1].atan2(v0[0]);
    let pose = Pose { x: 0.5, y: 0.5, theta };
    let hull = cube[0].hull(&pose);
    let left = hull.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let on_face: Vec<&P> = hull.iter().filter(|p| (p[0] - left).abs() < 1e-12).collect();
    assert_eq!(on_face.len(), 2, "left face is vertical");

    let touching = [left - cfg.effector_radius, 0.5];
    let s = SceneState { blocks: cube, block_poses: vec![pose], effector: touching, pole: [0.9, 0.9] };
    let next = step(&s, [0.01, 0.0], &cfg);
    let moved = [next.block_poses[0].x - 0.5, next.block_poses[0].y - 0.5];
    let oracle = sat_disk_mtv(next.effector, cfg.effector_radius, &hull).unwrap();
    assert!((moved[0] - oracle[0]).abs() < 1e-12 && (moved[1] - oracle[1]).abs() < 1e-12, "{moved:?} vs {oracle:?}");
    assert!((moved[0] - 0.01).abs() < 1e-12 && moved[1].abs() < 1e-12);
}

fn pixel_center(row: usize, col: usize, h: usize, w: usize, m: f64) -> P {
    let span = 1.0 + 2.0 * m;
    [-m + (col as f64 + 0.5) / w as f64 * span, -m + (row as f64 + 0.5) / h as f64 * span]
}

/// Independent painter's-algorithm raster: 0 background, 1..=n blocks,
/// n + 1 pole, n + 2 effector.
fn id_buffer(s: &SceneState, h: usize, w: usize, cfg: &SimConfig) -> Vec<u8> {
    let n = s.n_blocks();
    let mut ids = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = pixel_center(r, c, h, w, cfg.view_margin);
            let id = &mut ids[r * w + c];
            if (p[0] - s.pole[0]).hypot(p[1] - s.pole[1]) <= cfg.pole_radius {
                *id = n as u8 + 1;
            }
            for (k, (b, pose)) in s.blocks.iter().zip(&s.block_poses).enumerate() {
                if winding_inside(p, &b.outline(pose)) {
                    *id = k as u8 + 1;
                }
            }
            if (p[0] - s.effector[0]).hypot(p[1] - s.effector[1]) <= cfg.effector_radius {
                *id = n as u8 + 2;
            }
        }
    }
    ids
}

#[test]
fn mask_argmax_matches_independent_id_buffer() {
    let cfg = SimConfig::default();
    for seed in [1, 5, 42] {
        let mut s = sample_scene(seed, 8, &cfg).unwrap();
        // Pull the effector over a block so occlusion is exercised.
        s.effector = s.block_poses[2].pos();
        let gt = ground_truth_masks(&s, 64, 64, &cfg);
        let stacked = gt.stacked();
        let n = s.n_blocks();
        let p = 64 * 64;
        let channel_to_id = |c: usize| match c {
            c if c < n => c as u8 + 1,
            c if c == n => n as u8 + 2,
            c if c == n + 1 => n as u8 + 1,
            _ => 0,
        };
        let argmax: Vec<u8> = (0..p)
            .map(|i| channel_to_id((0..gt.channels()).max_by(|&a, &b| stacked[a * p + i].total_cmp(&stacked[b * p + i])).unwrap()))
            .collect();
        assert_eq!(argmax, id_buffer(&s, 64, 64, &cfg), "seed {seed}");
    }
}

#[test]
fn per_color_pixel_counts_match_masks() {
    let cfg = SimConfig::default();
    let s = sample_scene(11, 8, &cfg).unwrap();
    let rgb = render(&s, 64, 64, &cfg).to_rgb8();
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    for px in rgb.chunks(3) {
        *counts.entry([px[0], px[1], px[2]]).or_default() += 1;
    }
    let gt = ground_truth_masks(&s, 64, 64, &cfg);
    let ones = |m: Vec<u8>| m.iter().filter(|&&v| v == 1).count();
    let mut expected: HashMap<[u8; 3], usize> = HashMap::new();
    for (k, b) in s.blocks.iter().enumerate() {
        *expected.entry(b.color.rgb()).or_default() += ones(gt.block_mask(k));
    }
    *expected.entry(POLE_RGB).or_default() += ones(gt.pole_mask());
    *expected.entry(EFFECTOR_RGB).or_default() += ones(gt.effector_mask());
    let bg = counts.get(&BACKGROUND_RGB).copied().unwrap_or(0) + counts.get(&TABLE_RGB).copied().unwrap_or(0);
    assert_eq!(bg, ones(gt.background_mask()));
    counts.remove(&BACKGROUND_RGB);
    counts.remove(&TABLE_RGB);
    expected.retain(|_, v| *v > 0);
    assert_eq!(counts, expected);
}

#[test]
fn empty_roster_renders_only_fixed_entities() {
    let cfg = SimConfig::default();
    let s = SceneState { blocks: vec![], block_poses: vec![], effector: [0.3, 0.3], pole: [0.7, 0.7] };
    let rgb = render(&s, 32, 32, &cfg).to_rgb8();
    let allowed = [BACKGROUND_RGB, TABLE_RGB, POLE_RGB, EFFECTOR_RGB];
    assert!(rgb.chunks(3).all(|px| allowed.contains(&[px[0], px[1], px[2]])));
}

#[test]
fn episode_generation_is_reproducible_and_successful() {
    let cfg = SimConfig::default();
    let a = generate_episodes(3, 10, 8, 200, &cfg).unwrap();
    assert_eq!(a, generate_episodes(3, 10, 8, 200, &cfg).unwrap());
    for e in &a {
        let last = e.states.last().unwrap();
        assert!(last.target_distance(e.target) <= cfg.success_radius);
        assert!(e.actions.iter().all(|v| v[0].hypot(v[1]) <= cfg.max_step + 1e-12));
    }
}

fn action() -> impl Strategy<Value = P> {
    (0.0..2.0 * PI, 0.0..0.02f64).prop_map(|(a, r)| [r * a.cos(), r * a.sin()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn steps_stay_on_table_and_never_teleport(seed in 0u64..10_000, n in prop::sample::select(vec![1usize, 3, 4, 8]), actions in prop::collection::vec(action(), 1..60)) {
        let cfg = SimConfig::default();
        let mut s = sample_scene(seed, n, &cfg).unwrap();
        for a in actions {
            // Steer toward the first block so that contacts actually happen.
            let b = s.block_poses[0].pos();
            let a = [a[0] + 0.5 * (b[0] - s.effector[0]).clamp(-0.02, 0.02), a[1] + 0.5 * (b[1] - s.effector[1]).clamp(-0.02, 0.02)];
            let next = step(&s, a, &cfg);
            let eff = (next.effector[0] - s.effector[0]).hypot(next.effector[1] - s.effector[1]);
            for (p, q) in s.block_poses.iter().zip(&next.block_poses) {
                prop_assert!((0.0..=1.0).contains(&q.x) && (0.0..=1.0).contains(&q.y));
                prop_assert!((q.x - p.x).hypot(q.y - p.y) <= eff + 2.0 * cfg.max_step + 1e-12);
                prop_assert_eq!(q.theta, p.theta);
            }
            prop_assert!((0.0..=1.0).contains(&next.effector[0]) && (0.0..=1.0).contains(&next.effector[1]));
            s = next;
        }
    }

    #[test]
    fn masks_partition_at_any_resolution(seed in 0u64..10_000, h in 1usize..40, w in 1usize..40) {
        let cfg = SimConfig::default();
        let s = sample_scene(seed, 4, &cfg).unwrap();
        let gt = ground_truth_masks(&s, h, w, &cfg);
        let stacked = gt.stacked();
        for i in 0..h * w {
            let sum: f32 = (0..gt.channels()).map(|c| stacked[c * h * w + i]).sum();
            prop_assert_eq!(sum, 1.0);
        }
    }
}
