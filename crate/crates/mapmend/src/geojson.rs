//! Minimal RFC 7946 GeoJSON support: polygon outer rings in and out.
//! Accepts FeatureCollection, Feature, Polygon, MultiPolygon and
//! GeometryCollection inputs; interior rings (holes) are ignored.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeoJsonError {
    #[error("io {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("geojson parse error at line {line} column {column} (byte offset {offset}): {msg}")]
    Parse { line: usize, column: usize, offset: usize, msg: String },
    #[error("geojson structure: {0}")]
    Structure(String),
}

/// One polygon as its outer ring of `(x, y)` pairs — lon/lat for geographic
/// data, or pixel coordinates when used internally. The closing duplicate
/// vertex is not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoPolygon {
    pub exterior: Vec<(f64, f64)>,
}

pub fn read_geojson(path: &Path) -> Result<Vec<GeoPolygon>, GeoJsonError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GeoJsonError::Io { path: path.display().to_string(), source: e })?;
    parse_geojson(&text)
}

pub fn parse_geojson(text: &str) -> Result<Vec<GeoPolygon>, GeoJsonError> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        GeoJsonError::Parse {
            line,
            column,
            offset: byte_offset(text, line, column),
            msg: e.to_string(),
        }
    })?;
    let mut out = Vec::new();
    collect_polygons(&value, &mut out)?;
    Ok(out)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len();
    }
    offset
}

fn collect_polygons(value: &Value, out: &mut Vec<GeoPolygon>) -> Result<(), GeoJsonError> {
    let kind = value
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| GeoJsonError::Structure("object without a type".into()))?;
    match kind {
        "FeatureCollection" => {
            let features = value
                .get("features")
                .and_then(Value::as_array)
                .ok_or_else(|| GeoJsonError::Structure("FeatureCollection without features".into()))?;
            for f in features {
                collect_polygons(f, out)?;
            }
        }
        "Feature" => {
            if let Some(geom) = value.get("geometry").filter(|g| !g.is_null()) {
                collect_polygons(geom, out)?;
            }
        }
        "GeometryCollection" => {
            let geoms = value
                .get("geometries")
                .and_then(Value::as_array)
                .ok_or_else(|| GeoJsonError::Structure("GeometryCollection without geometries".into()))?;
            for g in geoms {
                collect_polygons(g, out)?;
            }
        }
        "Polygon" => {
            if let Some(poly) = polygon_from_rings(value.get("coordinates"))? {
                out.push(poly);
            }
        }
        "MultiPolygon" => {
            let coords = value
                .get("coordinates")
                .and_then(Value::as_array)
                .ok_or_else(|| GeoJsonError::Structure("MultiPolygon without coordinates".into()))?;
            for rings in coords {
                if let Some(poly) = polygon_from_rings(Some(rings))? {
                    out.push(poly);
                }
            }
        }
        // Other geometry kinds carry no footprints; skip them.
        _ => {}
    }
    Ok(())
}

fn polygon_from_rings(coords: Option<&Value>) -> Result<Option<GeoPolygon>, GeoJsonError> {
    let rings = coords
        .and_then(Value::as_array)
        .ok_or_else(|| GeoJsonError::Structure("Polygon without coordinates".into()))?;
    let Some(outer) = rings.first() else {
        return Ok(None);
    };
    let outer = outer
        .as_array()
        .ok_or_else(|| GeoJsonError::Structure("ring is not an array".into()))?;
    let mut exterior = Vec::with_capacity(outer.len());
    for pos in outer {
        let pair = pos
            .as_array()
            .ok_or_else(|| GeoJsonError::Structure("position is not an array".into()))?;
        if pair.len() < 2 {
            return Err(GeoJsonError::Structure("position with fewer than 2 numbers".into()));
        }
        let x = pair[0]
            .as_f64()
            .ok_or_else(|| GeoJsonError::Structure("non-numeric coordinate".into()))?;
        let y = pair[1]
            .as_f64()
            .ok_or_else(|| GeoJsonError::Structure("non-numeric coordinate".into()))?;
        exterior.push((x, y));
    }
    if exterior.len() >= 2 && exterior.first() == exterior.last() {
        exterior.pop();
    }
    Ok(Some(GeoPolygon { exterior }))
}

/// Serialize polygons as a FeatureCollection. Rings are closed and the
/// exterior is counterclockwise, per the RFC 7946 right-hand rule.
pub fn write_geojson_str(polygons: &[GeoPolygon]) -> String {
    let features: Vec<Value> = polygons
        .iter()
        .map(|p| {
            let mut ring = p.exterior.clone();
            if signed_area(&ring) < 0.0 {
                ring.reverse();
            }
            if let Some(&first) = ring.first() {
                ring.push(first);
            }
            let coords: Vec<Value> =
                ring.iter().map(|&(x, y)| serde_json::json!([x, y])).collect();
            serde_json::json!({
                "type": "Feature",
                "properties": {},
                "geometry": { "type": "Polygon", "coordinates": [coords] }
            })
        })
        .collect();
    let doc = serde_json::json!({ "type": "FeatureCollection", "features": features });
    serde_json::to_string_pretty(&doc).expect("geojson serializes")
}

pub fn write_geojson(polygons: &[GeoPolygon], path: &Path) -> Result<(), GeoJsonError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| GeoJsonError::Io { path: path.display().to_string(), source: e })?;
        }
    }
    std::fs::write(path, write_geojson_str(polygons))
        .map_err(|e| GeoJsonError::Io { path: path.display().to_string(), source: e })
}

fn signed_area(ring: &[(f64, f64)]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}
