//! Affine bridge between geographic and pixel coordinates.

use super::IngestError;
use crate::geojson::GeoPolygon;
use mapmend_core::raster::{Point, Polygon};
use serde::{Deserialize, Serialize};

/// Affine geotransform in the usual raster convention: pixel `(col, row)`
/// maps to `geo_x = x0 + dx_col * col + dx_row * row` and
/// `geo_y = y0 + dy_col * col + dy_row * row`. Stored as
/// `(x0, dx_col, dx_row, y0, dy_col, dy_row)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform(pub [f64; 6]);

impl GeoTransform {
    pub fn identity() -> Self {
        GeoTransform([0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    fn determinant(&self) -> f64 {
        let [_, dx_col, dx_row, _, dy_col, dy_row] = self.0;
        dx_col * dy_row - dx_row * dy_col
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(IngestError::SingularTransform);
        }
        Ok(())
    }

    /// Pixel `(col, row)` to geographic coordinates.
    pub fn pixel_to_geo(&self, col: f64, row: f64) -> (f64, f64) {
        let [x0, dx_col, dx_row, y0, dy_col, dy_row] = self.0;
        (x0 + dx_col * col + dx_row * row, y0 + dy_col * col + dy_row * row)
    }

    /// Geographic coordinates to pixel `(col, row)`.
    pub fn geo_to_pixel_point(&self, x: f64, y: f64) -> Result<(f64, f64), IngestError> {
        self.validate()?;
        let [x0, dx_col, dx_row, y0, dy_col, dy_row] = self.0;
        let det = self.determinant();
        let (ux, uy) = (x - x0, y - y0);
        Ok(((ux * dy_row - uy * dx_row) / det, (uy * dx_col - ux * dy_col) / det))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClipStats {
    /// Polygons entirely outside the raster, not returned.
    pub dropped: usize,
    /// Polygons clipped to the raster rectangle.
    pub clipped: usize,
}

/// Convert geographic polygons to pixel polygons on a `width x height`
/// raster. Fully outside polygons are dropped; partially visible ones are
/// clipped to the raster rectangle and counted.
pub fn geo_to_pixel(
    polygons: &[GeoPolygon],
    transform: &GeoTransform,
    width: usize,
    height: usize,
) -> Result<(Vec<Polygon>, ClipStats), IngestError> {
    transform.validate()?;
    let mut stats = ClipStats::default();
    let mut out = Vec::new();
    let (w, h) = (width as f64, height as f64);
    for gp in polygons {
        let ring: Vec<Point> = gp
            .exterior
            .iter()
            .map(|&(x, y)| {
                let (col, row) = transform.geo_to_pixel_point(x, y).expect("validated above");
                Point::new(col, row)
            })
            .collect();
        if ring.len() < 3 {
            stats.dropped += 1;
            continue;
        }
        let inside =
            |p: &Point| p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h;
        let n_inside = ring.iter().filter(|p| inside(p)).count();
        if n_inside == ring.len() {
            out.push(Polygon::new(ring));
            continue;
        }
        let clipped = clip_to_rect(&ring, w, h);
        if clipped.len() < 3 {
            stats.dropped += 1;
        } else {
            stats.clipped += 1;
            out.push(Polygon::new(clipped));
        }
    }
    Ok((out, stats))
}

/// Sutherland-Hodgman clip of a ring against the rectangle `[0,w] x [0,h]`.
fn clip_to_rect(ring: &[Point], w: f64, h: f64) -> Vec<Point> {
    // Each edge: (keep predicate, intersection solver along the boundary).
    type Keep = Box<dyn Fn(&Point) -> bool>;
    type Cross = Box<dyn Fn(&Point, &Point) -> Point>;
    let edges: Vec<(Keep, Cross)> = vec![
        (
            Box::new(|p: &Point| p.x >= 0.0),
            Box::new(|a: &Point, b: &Point| intersect_vertical(a, b, 0.0)),
        ),
        (
            Box::new(move |p: &Point| p.x <= w),
            Box::new(move |a: &Point, b: &Point| intersect_vertical(a, b, w)),
        ),
        (
            Box::new(|p: &Point| p.y >= 0.0),
            Box::new(|a: &Point, b: &Point| intersect_horizontal(a, b, 0.0)),
        ),
        (
            Box::new(move |p: &Point| p.y <= h),
            Box::new(move |a: &Point, b: &Point| intersect_horizontal(a, b, h)),
        ),
    ];
    let mut current: Vec<Point> = ring.to_vec();
    for (keep, cross) in &edges {
        if current.is_empty() {
            break;
        }
        let mut next = Vec::with_capacity(current.len() + 4);
        for i in 0..current.len() {
            let a = current[i];
            let b = current[(i + 1) % current.len()];
            match (keep(&a), keep(&b)) {
                (true, true) => next.push(b),
                (true, false) => next.push(cross(&a, &b)),
                (false, true) => {
                    next.push(cross(&a, &b));
                    next.push(b);
                }
                (false, false) => {}
            }
        }
        current = next;
    }
    current
}

fn intersect_vertical(a: &Point, b: &Point, x: f64) -> Point {
    let t = (x - a.x) / (b.x - a.x);
    Point::new(x, a.y + t * (b.y - a.y))
}

fn intersect_horizontal(a: &Point, b: &Point, y: f64) -> Point {
    let t = (y - a.y) / (b.y - a.y);
    Point::new(a.x + t * (b.x - a.x), y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_transform_keeps_coordinates() {
        let gt = GeoTransform::identity();
        let polys = vec![GeoPolygon { exterior: vec![(1.0, 2.0), (5.0, 2.0), (5.0, 6.0)] }];
        let (px, stats) = geo_to_pixel(&polys, &gt, 10, 10).unwrap();
        assert_eq!(stats, ClipStats::default());
        assert_eq!(px[0].ring[0], Point::new(1.0, 2.0));
    }

    #[test]
    fn two_units_per_pixel_maps_geo_ten_to_col_five() {
        let gt = GeoTransform([0.0, 2.0, 0.0, 0.0, 0.0, 2.0]);
        let (col, row) = gt.geo_to_pixel_point(10.0, 4.0).unwrap();
        assert_eq!((col, row), (5.0, 2.0));
    }

    #[test]
    fn inverse_round_trips_within_tolerance() {
        let gt = GeoTransform([120.5, 0.003, 0.0001, -48.25, -0.0002, -0.0025]);
        for &(c, r) in &[(0.0, 0.0), (123.0, 456.0), (5000.0, 4999.0)] {
            let (x, y) = gt.pixel_to_geo(c, r);
            let (c2, r2) = gt.geo_to_pixel_point(x, y).unwrap();
            assert!((c2 - c).abs() < 1e-9 && (r2 - r).abs() < 1e-9);
        }
    }

    #[test]
    fn outside_polygons_drop_and_partial_ones_clip() {
        let gt = GeoTransform::identity();
        let polys = vec![
            GeoPolygon { exterior: vec![(20.0, 20.0), (25.0, 20.0), (25.0, 25.0)] },
            GeoPolygon { exterior: vec![(-3.0, 2.0), (5.0, 2.0), (5.0, 8.0), (-3.0, 8.0)] },
        ];
        let (px, stats) = geo_to_pixel(&polys, &gt, 10, 10).unwrap();
        assert_eq!(stats.dropped, 1);
        assert_eq!(stats.clipped, 1);
        assert_eq!(px.len(), 1);
        assert!(px[0].ring.iter().all(|p| p.x >= 0.0));
    }

    #[test]
    fn singular_transform_is_rejected() {
        let gt = GeoTransform([0.0, 1.0, 1.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            geo_to_pixel(&[], &gt, 4, 4),
            Err(IngestError::SingularTransform)
        ));
    }
}
