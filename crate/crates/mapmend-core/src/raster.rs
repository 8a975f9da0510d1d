//! Raster primitives shared by the whole crate: images, masks, instance
//! labeling, polygon rasterization/vectorization, and pixel metrics.
//!
//! Conventions
//!
//! - Pixels are addressed as `(row, col)`; rasters are stored row-major.
//! - Geometry (polygons, barycenters, transforms) uses `Point { x, y }` with
//!   `x = col` and `y = row`. Pixel `(r, c)` covers the unit square
//!   `[c, c+1] x [r, r+1]` and its center sits at `(c + 0.5, r + 0.5)`.
//! - Rasterization fills a pixel when its center is inside the ring under the
//!   even-odd rule; vectorization traces component boundaries along pixel
//!   edges, so `rasterize(vectorize(m))` reproduces `m` exactly for hole-free
//!   components.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("no such instance: label {label} not in 1..={count}")]
    NoSuchInstance { label: u32, count: usize },
    #[error("invalid raster: {0}")]
    Invalid(String),
}

/// A point in pixel geometry coordinates: `x` along columns, `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// A simple polygon given by one outer ring. The ring is stored open (the
/// closing edge back to the first vertex is implicit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub ring: Vec<Point>,
}

impl Polygon {
    pub fn new(ring: Vec<Point>) -> Self {
        Polygon { ring }
    }

    /// Distinct vertices after collapsing consecutive duplicates and the
    /// closing duplicate, if present.
    pub fn distinct_vertex_count(&self) -> usize {
        if self.ring.is_empty() {
            return 0;
        }
        let mut n = 0;
        let mut prev: Option<Point> = None;
        for &p in &self.ring {
            if prev.is_none_or(|q| q != p) {
                n += 1;
            }
            prev = Some(p);
        }
        if n > 1 && self.ring.first() == self.ring.last() {
            n -= 1;
        }
        n
    }

    /// Signed area via the shoelace formula (positive when the ring winds
    /// clockwise on screen, i.e. with y growing downward).
    pub fn signed_area(&self) -> f64 {
        let n = self.ring.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.ring[i];
            let b = self.ring[(i + 1) % n];
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }
}

/// RGB intensity image, channels-first `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    data: Array3<f32>,
}

impl IntensityImage {
    pub fn new(data: Array3<f32>) -> Result<Self, RasterError> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(RasterError::Invalid(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(RasterError::Invalid("empty image".into()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RasterError::Invalid("intensity values outside [0,1]".into()));
        }
        Ok(IntensityImage { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        IntensityImage { data: Array3::zeros((3, height, width)) }
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }
}

/// Binary raster mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<u8>,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>) -> Result<Self, RasterError> {
        if data.iter().any(|&v| v > 1) {
            return Err(RasterError::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { data: Array2::zeros((height, width)) }
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[[row, col]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[[row, col]] = v;
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Pixelwise OR with another mask of the same dimensions.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<(), RasterError> {
        check_dims(self.height(), self.width(), other.height(), other.width())?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a |= b;
        }
        Ok(())
    }

    /// Pixelwise AND NOT: clears every pixel set in `other`.
    pub fn subtract(&mut self, other: &BinaryMask) -> Result<(), RasterError> {
        check_dims(self.height(), self.width(), other.height(), other.width())?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            if b == 1 {
                *a = 0;
            }
        }
        Ok(())
    }

    pub fn to_probability(&self) -> ProbabilityMask {
        ProbabilityMask { data: self.data.mapv(|v| v as f64) }
    }
}

/// Soft mask with per-pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMask {
    data: Array2<f64>,
}

impl ProbabilityMask {
    pub fn new(data: Array2<f64>) -> Result<Self, RasterError> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RasterError::Invalid("probabilities outside [0,1]".into()));
        }
        Ok(ProbabilityMask { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ProbabilityMask { data: Array2::zeros((height, width)) }
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[[row, col]]
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    /// Binarize at `threshold` (values `>= threshold` become 1).
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask { data: self.data.mapv(|v| u8::from(v >= threshold)) }
    }
}

/// Pixel connectivity used for instance labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Integer-labeled raster separating the connected components of a binary
/// mask. Label 0 is background; components carry labels `1..=instance_count`
/// in raster-scan order of their first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    labels: Array2<u32>,
    count: usize,
}

impl InstanceMap {
    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn instance_count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn label_at(&self, row: usize, col: usize) -> u32 {
        self.labels[[row, col]]
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    /// All instance regions in label order, collected in one pass.
    pub fn regions(&self) -> Vec<InstanceRegion> {
        let mut pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.count];
        for ((r, c), &l) in self.labels.indexed_iter() {
            if l > 0 {
                pixels[(l - 1) as usize].push((r, c));
            }
        }
        pixels
            .into_iter()
            .enumerate()
            .map(|(i, px)| InstanceRegion::from_pixels((i + 1) as u32, px))
            .collect()
    }

    /// The region for one label.
    pub fn region_of(&self, label: u32) -> Result<InstanceRegion, RasterError> {
        if label == 0 || label as usize > self.count {
            return Err(RasterError::NoSuchInstance { label, count: self.count });
        }
        let px: Vec<(usize, usize)> = self
            .labels
            .indexed_iter()
            .filter(|(_, &l)| l == label)
            .map(|((r, c), _)| (r, c))
            .collect();
        Ok(InstanceRegion::from_pixels(label, px))
    }
}

/// One labeled instance: its pixel set, pixel count and barycenter.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRegion {
    pub label: u32,
    /// Pixels as `(row, col)`, in raster-scan order.
    pub pixels: Vec<(usize, usize)>,
    /// Arithmetic mean of the pixel coordinates, as `(x = mean col, y = mean row)`.
    pub barycenter: Point,
}

impl InstanceRegion {
    fn from_pixels(label: u32, pixels: Vec<(usize, usize)>) -> Self {
        debug_assert!(!pixels.is_empty(), "instance region must be nonempty");
        let n = pixels.len() as f64;
        let (sr, sc) = pixels
            .iter()
            .fold((0.0, 0.0), |(sr, sc), &(r, c)| (sr + r as f64, sc + c as f64));
        InstanceRegion { label, pixels, barycenter: Point::new(sc / n, sr / n) }
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    /// Inclusive bounding box as `(row_min, col_min, row_max, col_max)`.
    pub fn bounding_box(&self) -> (usize, usize, usize, usize) {
        let mut r0 = usize::MAX;
        let mut c0 = usize::MAX;
        let mut r1 = 0;
        let mut c1 = 0;
        for &(r, c) in &self.pixels {
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
        }
        (r0, c0, r1, c1)
    }

    /// A full-size probability mask holding just this instance.
    pub fn to_mask(&self, height: usize, width: usize) -> ProbabilityMask {
        let mut m = ProbabilityMask::zeros(height, width);
        for &(r, c) in &self.pixels {
            m.data_mut()[[r, c]] = 1.0;
        }
        m
    }
}

/// Label connected components under the default 8-connectivity.
pub fn label_instances(mask: &BinaryMask) -> InstanceMap {
    label_instances_with(mask, Connectivity::Eight)
}

/// Label connected components; labels are assigned `1..=M` in raster-scan
/// order of each component's first pixel, background stays 0.
pub fn label_instances_with(mask: &BinaryMask, connectivity: Connectivity) -> InstanceMap {
    let (h, w) = (mask.height(), mask.width());
    let mut labels: Array2<u32> = Array2::zeros((h, w));
    let mut count = 0u32;
    let offsets = connectivity.offsets();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 0 || labels[[r, c]] != 0 {
                continue;
            }
            count += 1;
            labels[[r, c]] = count;
            stack.push((r, c));
            while let Some((pr, pc)) = stack.pop() {
                for &(dr, dc) in offsets {
                    let nr = pr as i64 + dr;
                    let nc = pc as i64 + dc;
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask.get(nr, nc) == 1 && labels[[nr, nc]] == 0 {
                        labels[[nr, nc]] = count;
                        stack.push((nr, nc));
                    }
                }
            }
        }
    }
    InstanceMap { labels, count: count as usize }
}

/// Result of [`rasterize_polygons`]: the union mask plus the number of
/// degenerate rings (fewer than 3 distinct vertices) that were skipped.
#[derive(Debug, Clone)]
pub struct Rasterized {
    pub mask: BinaryMask,
    pub skipped_degenerate: usize,
}

/// Rasterize polygon rings onto a `height x width` grid. A pixel is set when
/// its center `(col + 0.5, row + 0.5)` lies inside a ring under the even-odd
/// rule; overlapping polygons union.
pub fn rasterize_polygons(polygons: &[Polygon], width: usize, height: usize) -> Rasterized {
    let mut mask = BinaryMask::zeros(height, width);
    let mut skipped = 0;
    for poly in polygons {
        if poly.distinct_vertex_count() < 3 {
            skipped += 1;
            continue;
        }
        fill_ring(&mut mask, poly);
    }
    Rasterized { mask, skipped_degenerate: skipped }
}

fn fill_ring(mask: &mut BinaryMask, poly: &Polygon) {
    let (h, w) = (mask.height(), mask.width());
    let n = poly.ring.len();
    let y_min = poly.ring.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let y_max = poly.ring.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let r_lo = (y_min - 0.5).ceil().max(0.0) as usize;
    let r_hi = ((y_max - 0.5).floor().min(h as f64 - 1.0).max(0.0)) as usize;
    if y_max < 0.5 || y_min > h as f64 - 0.5 {
        return;
    }
    let mut crossings: Vec<f64> = Vec::new();
    for r in r_lo..=r_hi {
        let yc = r as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let a = poly.ring[i];
            let b = poly.ring[(i + 1) % n];
            // Half-open rule: an edge contributes when yc is in [min_y, max_y).
            if (a.y <= yc && yc < b.y) || (b.y <= yc && yc < a.y) {
                crossings.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        crossings.sort_by(|p, q| p.partial_cmp(q).unwrap());
        for pair in crossings.chunks_exact(2) {
            // Pixel centers in [x0, x1).
            let c_lo = (pair[0] - 0.5).ceil().max(0.0) as i64;
            let c_hi = ((pair[1] - 0.5).ceil() - 1.0).min(w as f64 - 1.0) as i64;
            for c in c_lo..=c_hi {
                mask.set(r, c as usize, 1);
            }
        }
    }
}

/// Trace one outer ring per connected component (8-connectivity). Vertices lie
/// on the integer pixel-corner grid, so re-rasterizing reproduces the mask
/// exactly for hole-free components; interior holes are not preserved.
pub fn vectorize_mask(mask: &BinaryMask) -> Vec<Polygon> {
    let imap = label_instances(mask);
    let mut first_pixel: Vec<Option<(usize, usize)>> = vec![None; imap.instance_count()];
    for ((r, c), &l) in imap.labels().indexed_iter() {
        if l > 0 && first_pixel[(l - 1) as usize].is_none() {
            first_pixel[(l - 1) as usize] = Some((r, c));
        }
    }
    (1..=imap.instance_count() as u32)
        .map(|label| trace_outer_ring(&imap, label, first_pixel[(label - 1) as usize].unwrap()))
        .collect()
}

/// Outgoing boundary edges keyed by start vertex. Each inside pixel whose
/// 4-neighbor is outside the component contributes one directed edge, oriented
/// so the interior stays on the walker's right.
fn component_edges(
    imap: &InstanceMap,
    label: u32,
) -> std::collections::HashMap<(i64, i64), Vec<(i64, i64)>> {
    let (h, w) = (imap.height() as i64, imap.width() as i64);
    let inside = |r: i64, c: i64| -> bool {
        r >= 0 && c >= 0 && r < h && c < w && imap.label_at(r as usize, c as usize) == label
    };
    let mut edges: std::collections::HashMap<(i64, i64), Vec<(i64, i64)>> =
        std::collections::HashMap::new();
    for ((ru, cu), &l) in imap.labels().indexed_iter() {
        if l != label {
            continue;
        }
        let (r, c) = (ru as i64, cu as i64);
        let (x, y) = (c, r);
        if !inside(r - 1, c) {
            edges.entry((x, y)).or_default().push((x + 1, y));
        }
        if !inside(r, c + 1) {
            edges.entry((x + 1, y)).or_default().push((x + 1, y + 1));
        }
        if !inside(r + 1, c) {
            edges.entry((x + 1, y + 1)).or_default().push((x, y + 1));
        }
        if !inside(r, c - 1) {
            edges.entry((x, y + 1)).or_default().push((x, y));
        }
    }
    edges
}

fn trace_outer_ring(imap: &InstanceMap, label: u32, first: (usize, usize)) -> Polygon {
    let mut edges = component_edges(imap, label);
    // The first raster-scan pixel has no component pixel above it, so its top
    // edge is on the outer ring.
    let start = (first.1 as i64, first.0 as i64);
    let mut ring: Vec<Point> = Vec::new();
    let mut pos = start;
    let mut dir = (1i64, 0i64);
    loop {
        let next = (pos.0 + dir.0, pos.1 + dir.1);
        let outgoing = edges.get_mut(&next).map(std::mem::take).unwrap_or_default();
        let step = match outgoing.len() {
            0 => break, // closed the loop; the start edge was consumed first
            1 => outgoing[0],
            _ => {
                // Saddle vertex: two diagonal pixels of the component meet
                // here. Take the left turn so both stay inside one ring.
                let left = (dir.1, -dir.0);
                let want = (next.0 + left.0, next.1 + left.1);
                let chosen = *outgoing.iter().find(|&&e| e == want).unwrap_or(&outgoing[0]);
                for e in outgoing {
                    if e != chosen {
                        edges.entry(next).or_default().push(e);
                    }
                }
                chosen
            }
        };
        let new_dir = (step.0 - next.0, step.1 - next.1);
        if new_dir != dir {
            ring.push(Point::new(next.0 as f64, next.1 as f64));
            dir = new_dir;
        }
        pos = next;
        if pos == start && dir == (1, 0) {
            break;
        }
    }
    Polygon::new(ring)
}

fn check_dims(h_a: usize, w_a: usize, h_b: usize, w_b: usize) -> Result<(), RasterError> {
    if h_a != h_b || w_a != w_b {
        return Err(RasterError::DimensionMismatch(h_a, w_a, h_b, w_b));
    }
    Ok(())
}

/// Intersection over union of two binary masks. Both empty counts as a
/// perfect match (1.0).
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, RasterError> {
    check_dims(a.height(), a.width(), b.height(), b.width())?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&va, &vb) in a.data().iter().zip(b.data().iter()) {
        inter += (va & vb) as usize;
        union += (va | vb) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Fraction of pixels where the two masks agree.
pub fn pixel_accuracy(a: &BinaryMask, b: &BinaryMask) -> Result<f64, RasterError> {
    check_dims(a.height(), a.width(), b.height(), b.width())?;
    let total = a.height() * a.width();
    if total == 0 {
        return Ok(1.0);
    }
    let same = a.data().iter().zip(b.data().iter()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / total as f64)
}
