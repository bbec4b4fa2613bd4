//! Planar geometry on `[x, y]` points: polygons, hulls, and overlap resolution.

use alloc::vec::Vec;
use core::f64::consts::PI;

pub type Point = [f64; 2];

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    libm::sqrt(dot(a, a))
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

pub fn normalize(a: Point) -> Point {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        [0.0, 0.0]
    }
}

pub fn rotate(p: Point, theta: f64) -> Point {
    let (s, c) = libm::sincos(theta);
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Points on a circle of `radius` around `center` from angle `a0` to `a1`, inclusive.
pub fn arc(center: Point, radius: f64, a0: f64, a1: f64, segments: usize) -> Vec<Point> {
    (0..=segments)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / segments as f64;
            [center[0] + radius * libm::cos(a), center[1] + radius * libm::sin(a)]
        })
        .collect()
}

pub fn regular_polygon(n: usize, radius: f64, phase: f64) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / n as f64;
            [radius * libm::cos(a), radius * libm::sin(a)]
        })
        .collect()
}

/// Even-odd point-in-polygon test for simple (possibly non-convex) polygons.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Counter-clockwise convex hull (Andrew's monotone chain).
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter().chain(pts.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(sub(hull[hull.len() - 1], hull[hull.len() - 2]), sub(p, hull[hull.len() - 2])) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn project(poly: &[Point], axis: Point) -> (f64, f64) {
    poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
        let d = dot(p, axis);
        (lo.min(d), hi.max(d))
    })
}

fn centroid(poly: &[Point]) -> Point {
    let s = poly.iter().fold([0.0, 0.0], |acc, &p| add(acc, p));
    scale(s, 1.0 / poly.len() as f64)
}

/// Separating-axis test between two convex CCW polygons.
///
/// Returns the minimal translation `(normal, depth)` that moves `b` out of
/// `a` (apply `normal * depth` to `b`), or `None` when they do not overlap.
pub fn polygon_mtv(a: &[Point], b: &[Point]) -> Option<(Point, f64)> {
    let mut best: Option<(Point, f64)> = None;
    for poly in [a, b] {
        for i in 0..poly.len() {
            let e = sub(poly[(i + 1) % poly.len()], poly[i]);
            let axis = normalize([e[1], -e[0]]);
            let (amin, amax) = project(a, axis);
            let (bmin, bmax) = project(b, axis);
            let overlap = amax.min(bmax) - amin.max(bmin);
            if overlap <= 0.0 {
                return None;
            }
            if best.is_none_or(|(_, d)| overlap < d) {
                best = Some((axis, overlap));
            }
        }
    }
    let (mut axis, depth) = best?;
    if dot(sub(centroid(b), centroid(a)), axis) < 0.0 {
        axis = scale(axis, -1.0);
    }
    Some((axis, depth))
}

/// Closest point on the boundary of a polygon to `p`.
pub fn closest_boundary_point(p: Point, poly: &[Point]) -> Point {
    let mut best = poly[0];
    let mut best_d = f64::INFINITY;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let ab = sub(b, a);
        let t = (dot(sub(p, a), ab) / dot(ab, ab)).clamp(0.0, 1.0);
        let q = add(a, scale(ab, t));
        let d = dist(p, q);
        if d < best_d {
            best_d = d;
            best = q;
        }
    }
    best
}

/// Translation to apply to a convex polygon so it no longer overlaps a disk.
///
/// `None` when the disk and the polygon are already separate.
pub fn disk_polygon_mtv(center: Point, radius: f64, poly: &[Point]) -> Option<Point> {
    let q = closest_boundary_point(center, poly);
    let d = dist(center, q);
    if point_in_polygon(center, poly) {
        // Center inside: move the polygon so the nearest face clears the disk.
        let dir = if d > 0.0 { normalize(sub(q, center)) } else { normalize(sub(centroid(poly), center)) };
        return Some(scale(dir, -(d + radius)));
    }
    if d >= radius {
        return None;
    }
    let dir = normalize(sub(q, center));
    Some(scale(dir, radius - d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(c: Point, half: f64) -> Vec<Point> {
        alloc::vec![
            [c[0] - half, c[1] - half],
            [c[0] + half, c[1] - half],
            [c[0] + half, c[1] + half],
            [c[0] - half, c[1] + half],
        ]
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let mut pts = square([0.0, 0.0], 1.0);
        pts.push([0.1, 0.2]);
        assert_eq!(convex_hull(&pts).len(), 4);
    }

    #[test]
    fn squares_mtv_is_axis_aligned() {
        let (n, d) = polygon_mtv(&square([0.0, 0.0], 1.0), &square([1.5, 0.2], 1.0)).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        assert!((n[0] - 1.0).abs() < 1e-12 && n[1].abs() < 1e-12);
        assert!(polygon_mtv(&square([0.0, 0.0], 1.0), &square([2.5, 0.0], 1.0)).is_none());
    }

    #[test]
    fn disk_face_push() {
        let sq = square([0.0, 0.0], 1.0);
        let t = disk_polygon_mtv([-1.2, 0.0], 0.3, &sq).unwrap();
        assert!((t[0] - 0.1).abs() < 1e-12 && t[1].abs() < 1e-12);
        assert!(disk_polygon_mtv([-1.4, 0.0], 0.3, &sq).is_none());
        // center inside near the left face
        let t = disk_polygon_mtv([-0.9, 0.0], 0.3, &sq).unwrap();
        assert!((t[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn even_odd_star() {
        let mut star = Vec::new();
        for i in 0..10 {
            let r = if i % 2 == 0 { 1.0 } else { 0.4 };
            let a = PI / 2.0 + PI * i as f64 / 5.0;
            star.push([r * libm::cos(a), r * libm::sin(a)]);
        }
        assert!(point_in_polygon([0.0, 0.0], &star));
        assert!(point_in_polygon([0.0, 0.9], &star));
        // notch between two tips
        let a = PI / 2.0 + PI / 5.0;
        assert!(!point_in_polygon([0.8 * libm::cos(a), 0.8 * libm::sin(a)], &star));
    }
}
