//! Exact rectangle intersection via the separating-axis test.
//!
//! Two oriented rectangles are disjoint iff one of the four edge normals
//! (two per box) separates their corner projections.

use crate::scene::OrientedBox;

fn project(corners: &[(f64, f64); 4], ax: f64, ay: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(x, y) in corners {
        let p = x * ax + y * ay;
        lo = lo.min(p);
        hi = hi.max(p);
    }
    (lo, hi)
}

fn axes(b: &OrientedBox) -> [(f64, f64); 2] {
    let (s, c) = b.heading.sin_cos();
    [(c, s), (-s, c)]
}

/// Separating-axis test where touching boundaries count as intersecting.
pub fn obbs_intersect(a: &OrientedBox, b: &OrientedBox) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    for (ax, ay) in axes(a).into_iter().chain(axes(b)) {
        let (lo_a, hi_a) = project(&ca, ax, ay);
        let (lo_b, hi_b) = project(&cb, ax, ay);
        if hi_a < lo_b || hi_b < lo_a {
            return false;
        }
    }
    true
}

/// Signed overlap margin: the smallest projection overlap across the four
/// candidate axes. Positive means the projections overlap everywhere
/// (boxes intersect with at least this depth), negative means some axis
/// separates them by at least the magnitude, zero means exact touching.
pub fn obb_overlap_margin(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    let mut margin = f64::INFINITY;
    for (ax, ay) in axes(a).into_iter().chain(axes(b)) {
        let (lo_a, hi_a) = project(&ca, ax, ay);
        let (lo_b, hi_b) = project(&cb, ax, ay);
        let overlap = hi_a.min(hi_b) - lo_a.max(lo_b);
        margin = margin.min(overlap);
    }
    margin
}
