//! Geometric footprint regularization: vertex-reduction simplification
//! followed by optional orthogonalization against a dominant axis pair.
//!
//! This is a deliberate geometric stand-in for a learned refinement model,
//! exposed as its own stage so one can be substituted later. The contract is
//! conservative: whatever happens, the returned polygon overlaps the input
//! with IoU >= 0.85, falling back first to the simplified-only ring and then
//! to the input itself.

use crate::raster::{iou, rasterize_polygons, Point, Polygon};

/// Edges at most this angular distance from the dominant axis pair count as
/// axis-aligned (radians, 15 degrees).
const AXIS_TOLERANCE: f64 = 15.0 * std::f64::consts::PI / 180.0;
/// Fraction of total edge length that must be axis-aligned before edges snap.
const AXIS_DOMINANCE: f64 = 0.8;
const MIN_OUTPUT_IOU: f64 = 0.85;

/// Simplify and, when the shape is dominantly rectilinear, orthogonalize one
/// polygon ring. `tolerance` is the maximum simplification deviation in
/// pixels.
pub fn regularize_polygon(polygon: &Polygon, tolerance: f64) -> Polygon {
    if polygon.distinct_vertex_count() < 3 {
        return polygon.clone();
    }
    let simplified = simplify_ring(polygon, tolerance);
    let simplified_ok =
        simplified.ring.len() >= 3 && polygon_iou(&simplified, polygon) >= MIN_OUTPUT_IOU;
    if let Some(ortho) = orthogonalize(&simplified) {
        if ortho.ring.len() >= 4 && polygon_iou(&ortho, polygon) >= MIN_OUTPUT_IOU {
            return ortho;
        }
    }
    if simplified_ok {
        simplified
    } else {
        polygon.clone()
    }
}

/// Simplify a closed ring by greedy vertex decimation: repeatedly remove the
/// cheapest vertex whose removal keeps every *original* vertex within
/// `tolerance` of the replacement edge. Measuring against the original ring
/// (not the intermediate one) keeps the stated max-deviation bound honest
/// under repeated removals.
pub fn simplify_ring(polygon: &Polygon, tolerance: f64) -> Polygon {
    let ring = &polygon.ring;
    let n = ring.len();
    if n <= 4 {
        return polygon.clone();
    }
    // Alive vertices by original index, cyclic.
    let mut alive: Vec<usize> = (0..n).collect();
    loop {
        if alive.len() <= 3 {
            break;
        }
        let k = alive.len();
        let mut best: Option<(usize, f64)> = None;
        for p in 0..k {
            let a = alive[(p + k - 1) % k];
            let b = alive[(p + 1) % k];
            let dev = span_deviation(ring, a, b);
            if dev <= tolerance && best.is_none_or(|(_, d)| dev < d) {
                best = Some((p, dev));
            }
        }
        match best {
            Some((p, _)) => {
                alive.remove(p);
            }
            None => break,
        }
    }
    Polygon::new(alive.into_iter().map(|i| ring[i]).collect())
}

/// Max distance of the original vertices strictly between `a` and `b`
/// (cyclic order) to the chord `a -> b`.
fn span_deviation(ring: &[Point], a: usize, b: usize) -> f64 {
    let n = ring.len();
    let mut worst = 0.0f64;
    let mut i = (a + 1) % n;
    while i != b {
        worst = worst.max(point_segment_distance(ring[i], ring[a], ring[b]));
        i = (i + 1) % n;
    }
    worst
}

fn dist2(p: Point, q: Point) -> f64 {
    (p.x - q.x).powi(2) + (p.y - q.y).powi(2)
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len2 = vx * vx + vy * vy;
    if len2 == 0.0 {
        return dist2(p, a).sqrt();
    }
    let t = ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2;
    let t = t.clamp(0.0, 1.0);
    dist2(p, Point::new(a.x + t * vx, a.y + t * vy)).sqrt()
}

/// Snap edges to the dominant axis pair when at least 80% of the edge length
/// lies within 15 degrees of it. Returns None when dominance fails or the
/// reconstruction degenerates.
fn orthogonalize(polygon: &Polygon) -> Option<Polygon> {
    let ring = &polygon.ring;
    let n = ring.len();
    if n < 4 {
        return None;
    }
    // Dominant direction modulo 90 degrees via the length-weighted circular
    // mean of 4*angle.
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut total_len = 0.0;
    let mut edges = Vec::with_capacity(n);
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len = (dx * dx + dy * dy).sqrt();
        if len == 0.0 {
            continue;
        }
        let angle = dy.atan2(dx);
        sx += len * (4.0 * angle).cos();
        sy += len * (4.0 * angle).sin();
        total_len += len;
        edges.push((a, b, len, angle));
    }
    if total_len == 0.0 || edges.len() < 4 {
        return None;
    }
    let phi = sy.atan2(sx) / 4.0;
    let aligned_len: f64 = edges
        .iter()
        .filter(|(_, _, _, angle)| axis_distance(*angle - phi) <= AXIS_TOLERANCE)
        .map(|(_, _, len, _)| len)
        .sum();
    if aligned_len / total_len < AXIS_DOMINANCE {
        return None;
    }

    // Work in the frame rotated by -phi, where the axis pair is horizontal /
    // vertical.
    let (sin, cos) = (-phi).sin_cos();
    let rot = |p: Point| Point::new(cos * p.x - sin * p.y, sin * p.x + cos * p.y);
    let unrot = |p: Point| Point::new(cos * p.x + sin * p.y, -sin * p.x + cos * p.y);

    // Classify each edge, then merge consecutive same-class runs into one
    // axis line at the length-weighted mean coordinate.
    #[derive(Clone, Copy, PartialEq)]
    enum Axis {
        Horizontal,
        Vertical,
    }
    let classified: Vec<(Axis, f64, f64)> = edges
        .iter()
        .map(|&(a, b, len, _)| {
            let (ra, rb) = (rot(a), rot(b));
            let (dx, dy) = (rb.x - ra.x, rb.y - ra.y);
            if dx.abs() >= dy.abs() {
                (Axis::Horizontal, (ra.y + rb.y) / 2.0, len)
            } else {
                (Axis::Vertical, (ra.x + rb.x) / 2.0, len)
            }
        })
        .collect();
    let mut runs: Vec<(Axis, f64, f64)> = Vec::new();
    for &(axis, coord, len) in &classified {
        match runs.last_mut() {
            Some((last_axis, acc_coord, acc_len)) if *last_axis == axis => {
                *acc_coord += coord * len;
                *acc_len += len;
            }
            _ => runs.push((axis, coord * len, len)),
        }
    }
    // Cyclic closure: first and last run may be the same class.
    if runs.len() >= 2 && runs[0].0 == runs[runs.len() - 1].0 {
        let (_, coord, len) = runs.pop().unwrap();
        runs[0].1 += coord;
        runs[0].2 += len;
    }
    if runs.len() < 4 || runs.len() % 2 != 0 {
        return None;
    }
    let lines: Vec<(Axis, f64)> =
        runs.iter().map(|&(axis, coord, len)| (axis, coord / len)).collect();
    // Consecutive lines alternate classes; their intersections are the new
    // corners.
    let m = lines.len();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let (ax_a, ca) = lines[i];
        let (ax_b, cb) = lines[(i + 1) % m];
        let corner = match (ax_a, ax_b) {
            (Axis::Horizontal, Axis::Vertical) => Point::new(cb, ca),
            (Axis::Vertical, Axis::Horizontal) => Point::new(ca, cb),
            _ => return None,
        };
        out.push(unrot(corner));
    }
    Some(Polygon::new(out))
}

fn axis_distance(angle: f64) -> f64 {
    // Distance to the nearest multiple of 90 degrees.
    let quarter = std::f64::consts::FRAC_PI_2;
    let r = angle.rem_euclid(quarter);
    r.min(quarter - r)
}

/// Rasterized IoU of two polygons on a shared local grid.
pub(crate) fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    let pts = a.ring.iter().chain(b.ring.iter());
    let mut x_lo = f64::INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for p in pts {
        x_lo = x_lo.min(p.x);
        y_lo = y_lo.min(p.y);
        x_hi = x_hi.max(p.x);
        y_hi = y_hi.max(p.y);
    }
    if !x_lo.is_finite() {
        return 0.0;
    }
    let shift = |poly: &Polygon| {
        Polygon::new(
            poly.ring
                .iter()
                .map(|p| Point::new(p.x - x_lo + 1.0, p.y - y_lo + 1.0))
                .collect(),
        )
    };
    let w = (x_hi - x_lo).ceil() as usize + 3;
    let h = (y_hi - y_lo).ceil() as usize + 3;
    let ra = rasterize_polygons(&[shift(a)], w, h).mask;
    let rb = rasterize_polygons(&[shift(b)], w, h).mask;
    iou(&ra, &rb).unwrap_or(0.0)
}
