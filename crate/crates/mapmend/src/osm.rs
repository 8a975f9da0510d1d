//! Overpass-style OSM building-footprint client with a disk cache and an
//! offline GeoJSON path, so nothing in the toolchain requires live network.
//!
//! The live query asks for closed ways and relations tagged `building` with
//! their geometry:
//!
//! ```text
//! [out:json][timeout:60];
//! (way["building"](S,W,N,E); relation["building"](S,W,N,E););
//! out geom;
//! ```
//!
//! Responses are converted to outer rings in lon/lat and cached on disk as
//! GeoJSON keyed by a hash of the bounding box; repeated queries are served
//! from the cache without touching the endpoint.

use crate::geojson::{write_geojson_str, GeoJsonError, GeoPolygon};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};
use thiserror::Error;

pub const DEFAULT_ENDPOINT: &str = "https://overpass-api.de/api/interpreter";
/// Environment variable that overrides the endpoint.
pub const ENDPOINT_ENV: &str = "MAPMEND_OSM_ENDPOINT";

#[derive(Debug, Error)]
pub enum OsmError {
    #[error("invalid bbox: {0}")]
    BadBbox(String),
    #[error("http request failed (retriable): {0}")]
    Http(String),
    #[error("overpass response parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error(transparent)]
    GeoJson(#[from] GeoJsonError),
    #[error("cache io {path}: {source}")]
    CacheIo { path: String, source: std::io::Error },
}

/// Geographic bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<(), OsmError> {
        if !(self.south < self.north) {
            return Err(OsmError::BadBbox(format!(
                "south {} must be < north {}",
                self.south, self.north
            )));
        }
        if !(self.west < self.east) {
            return Err(OsmError::BadBbox(format!(
                "west {} must be < east {}",
                self.west, self.east
            )));
        }
        Ok(())
    }

    fn cache_key(&self) -> String {
        let canonical = format!(
            "{:.7},{:.7},{:.7},{:.7}",
            self.south, self.west, self.north, self.east
        );
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// HTTP transport behind the client, swappable for tests.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<String, OsmError>;
}

/// Live transport with polite rate limiting (at least one second between
/// requests).
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    last_request: Mutex<Option<Instant>>,
    min_interval: Duration,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::builder()
                .user_agent("mapmend/0.1")
                .timeout(Duration::from_secs(90))
                .build()
                .expect("client builds"),
            last_request: Mutex::new(None),
            min_interval: Duration::from_secs(1),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn get(&self, url: &str) -> Result<String, OsmError> {
        {
            let mut last = self.last_request.lock().expect("transport lock");
            if let Some(t) = *last {
                let elapsed = t.elapsed();
                if elapsed < self.min_interval {
                    std::thread::sleep(self.min_interval - elapsed);
                }
            }
            *last = Some(Instant::now());
        }
        let response = self.client.get(url).send().map_err(|e| OsmError::Http(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(OsmError::Http(format!("endpoint returned status {status}")));
        }
        response.text().map_err(|e| OsmError::Http(e.to_string()))
    }
}

enum Mode {
    Live { endpoint: String, transport: Box<dyn Transport> },
    Offline { geojson_path: PathBuf },
}

/// Footprint source: a live Overpass-style endpoint with a disk cache, or a
/// local GeoJSON file.
pub struct OsmClient {
    mode: Mode,
    cache_dir: PathBuf,
    requests: AtomicUsize,
}

impl OsmClient {
    /// Live client. The endpoint resolves from the argument, then the
    /// `MAPMEND_OSM_ENDPOINT` environment variable, then the default.
    pub fn live(
        endpoint: Option<String>,
        cache_dir: PathBuf,
        transport: Box<dyn Transport>,
    ) -> Self {
        let endpoint = endpoint
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .unwrap_or_else(|| DEFAULT_ENDPOINT.to_string());
        OsmClient { mode: Mode::Live { endpoint, transport }, cache_dir, requests: AtomicUsize::new(0) }
    }

    /// Offline client reading footprints from a local GeoJSON file.
    pub fn offline(geojson_path: PathBuf, cache_dir: PathBuf) -> Self {
        OsmClient { mode: Mode::Offline { geojson_path }, cache_dir, requests: AtomicUsize::new(0) }
    }

    /// Network requests made so far (cache hits and offline reads count 0).
    pub fn requests_made(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn cache_path(&self, bbox: &BoundingBox) -> PathBuf {
        self.cache_dir.join("osm").join(format!("{}.geojson", bbox.cache_key()))
    }

    /// Fetch building footprints as outer rings in lon/lat.
    pub fn fetch_footprints(&self, bbox: &BoundingBox) -> Result<Vec<GeoPolygon>, OsmError> {
        bbox.validate()?;
        match &self.mode {
            Mode::Offline { geojson_path } => Ok(crate::geojson::read_geojson(geojson_path)?),
            Mode::Live { endpoint, transport } => {
                let cache_path = self.cache_path(bbox);
                if cache_path.exists() {
                    return Ok(crate::geojson::read_geojson(&cache_path)?);
                }
                let query = overpass_query(bbox);
                let url = format!("{endpoint}?data={}", url_encode(&query));
                self.requests.fetch_add(1, Ordering::SeqCst);
                let body = transport.get(&url)?;
                let polygons = parse_overpass(&body)?;
                if let Some(parent) = cache_path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| OsmError::CacheIo {
                        path: parent.display().to_string(),
                        source: e,
                    })?;
                }
                std::fs::write(&cache_path, write_geojson_str(&polygons)).map_err(|e| {
                    OsmError::CacheIo { path: cache_path.display().to_string(), source: e }
                })?;
                Ok(polygons)
            }
        }
    }
}

pub fn overpass_query(bbox: &BoundingBox) -> String {
    format!(
        "[out:json][timeout:60];(way[\"building\"]({s},{w},{n},{e});relation[\"building\"]({s},{w},{n},{e}););out geom;",
        s = bbox.south,
        w = bbox.west,
        n = bbox.north,
        e = bbox.east
    )
}

fn url_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len() * 3);
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(b as char)
            }
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// Parse an Overpass JSON response: closed ways become polygons directly;
/// relations contribute their `outer` members.
pub fn parse_overpass(body: &str) -> Result<Vec<GeoPolygon>, OsmError> {
    let value: Value = serde_json::from_str(body).map_err(|e| OsmError::Parse {
        offset: byte_offset(body, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    let elements = value
        .get("elements")
        .and_then(Value::as_array)
        .ok_or_else(|| OsmError::Parse { offset: 0, msg: "response has no elements".into() })?;
    let mut out = Vec::new();
    for el in elements {
        match el.get("type").and_then(Value::as_str) {
            Some("way") => {
                if let Some(ring) = ring_from_geometry(el.get("geometry")) {
                    out.push(GeoPolygon { exterior: ring });
                }
            }
            Some("relation") => {
                let Some(members) = el.get("members").and_then(Value::as_array) else { continue };
                for m in members {
                    if m.get("role").and_then(Value::as_str) == Some("outer") {
                        if let Some(ring) = ring_from_geometry(m.get("geometry")) {
                            out.push(GeoPolygon { exterior: ring });
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

fn ring_from_geometry(geometry: Option<&Value>) -> Option<Vec<(f64, f64)>> {
    let coords = geometry?.as_array()?;
    let mut ring: Vec<(f64, f64)> = coords
        .iter()
        .filter_map(|p| Some((p.get("lon")?.as_f64()?, p.get("lat")?.as_f64()?)))
        .collect();
    if ring.len() >= 2 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.len() < 3 {
        None
    } else {
        Some(ring)
    }
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

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize as Counter;

    const FIXTURE: &str = r#"{
        "version": 0.6,
        "elements": [
            {"type": "way", "id": 1, "geometry": [
                {"lat": 39.10, "lon": -86.50}, {"lat": 39.10, "lon": -86.49},
                {"lat": 39.11, "lon": -86.49}, {"lat": 39.10, "lon": -86.50}
            ]},
            {"type": "relation", "id": 2, "members": [
                {"role": "outer", "type": "way", "geometry": [
                    {"lat": 39.20, "lon": -86.40}, {"lat": 39.21, "lon": -86.40},
                    {"lat": 39.21, "lon": -86.39}, {"lat": 39.20, "lon": -86.39},
                    {"lat": 39.20, "lon": -86.40}
                ]},
                {"role": "inner", "type": "way", "geometry": [
                    {"lat": 39.205, "lon": -86.395}, {"lat": 39.206, "lon": -86.395},
                    {"lat": 39.206, "lon": -86.394}, {"lat": 39.205, "lon": -86.395}
                ]}
            ]},
            {"type": "node", "id": 3, "lat": 1.0, "lon": 2.0}
        ]
    }"#;

    struct FixtureTransport {
        calls: Counter,
    }

    impl Transport for FixtureTransport {
        fn get(&self, _url: &str) -> Result<String, OsmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(FIXTURE.to_string())
        }
    }

    fn bbox() -> BoundingBox {
        BoundingBox { south: 39.0, west: -86.6, north: 39.3, east: -86.3 }
    }

    #[test]
    fn recorded_fixture_parses_outer_rings_only() {
        let polys = parse_overpass(FIXTURE).unwrap();
        assert_eq!(polys.len(), 2);
        assert_eq!(polys[0].exterior.len(), 3);
        assert_eq!(polys[1].exterior.len(), 4);
    }

    #[test]
    fn cache_serves_repeat_queries_without_network() {
        let dir = tempfile::tempdir().unwrap();
        let client = OsmClient::live(
            Some("http://fixture.invalid".into()),
            dir.path().to_path_buf(),
            Box::new(FixtureTransport { calls: Counter::new(0) }),
        );
        let first = client.fetch_footprints(&bbox()).unwrap();
        assert_eq!(client.requests_made(), 1);
        let second = client.fetch_footprints(&bbox()).unwrap();
        assert_eq!(client.requests_made(), 1, "second query must hit the cache");
        assert_eq!(first, second);
        // The cache file itself is byte-stable GeoJSON.
        let cache_file = dir.path().join("osm").join(format!("{}.geojson", bbox().cache_key()));
        assert!(cache_file.exists());
    }

    #[test]
    fn offline_mode_reads_local_geojson() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("footprints.geojson");
        let polys = vec![
            GeoPolygon { exterior: vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)] },
            GeoPolygon { exterior: vec![(5.0, 5.0), (6.0, 5.0), (6.0, 6.0), (5.0, 6.0)] },
        ];
        crate::geojson::write_geojson(&polys, &path).unwrap();
        let client = OsmClient::offline(path, dir.path().to_path_buf());
        let loaded = client.fetch_footprints(&bbox()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(client.requests_made(), 0);
    }

    #[test]
    fn degenerate_bbox_fails_before_any_request() {
        let dir = tempfile::tempdir().unwrap();
        let client = OsmClient::live(
            Some("http://fixture.invalid".into()),
            dir.path().to_path_buf(),
            Box::new(FixtureTransport { calls: Counter::new(0) }),
        );
        let bad = BoundingBox { south: 1.0, west: 2.0, north: 2.0, east: 2.0 };
        assert!(matches!(client.fetch_footprints(&bad), Err(OsmError::BadBbox(_))));
        assert_eq!(client.requests_made(), 0);
    }

    #[test]
    fn malformed_response_reports_byte_offset() {
        let body = "{\"elements\": [oops]}";
        let err = parse_overpass(body).unwrap_err();
        match err {
            OsmError::Parse { offset, .. } => assert_eq!(offset, 14),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn query_string_is_documented_shape() {
        let q = overpass_query(&bbox());
        assert!(q.starts_with("[out:json]"));
        assert!(q.contains("way[\"building\"](39,-86.6,39.3,-86.3)"));
        assert!(q.ends_with("out geom;"));
    }
}
