//! Satellite tile geometry and WMS `GetMap` fetching with an on-disk cache.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Meters per degree of latitude (and of longitude at the equator).
pub const METERS_PER_DEGREE: f64 = 111_320.0;
/// Assumed ground sampling distance of the imagery, meters per pixel.
pub const GROUND_SAMPLING_M: f64 = 10.0;
pub const DEFAULT_SPAN_M: f64 = 2560.0;
pub const DEFAULT_PIXELS: u32 = 256;
pub const MAX_ABS_LATITUDE: f64 = 89.0;

pub const DEFAULT_WMS_ENDPOINT: &str = "https://tiles.maps.eox.at/wms";
pub const DEFAULT_WMS_LAYER: &str = "s2cloudless-2020";
pub const ENDPOINT_ENV: &str = "CROSSVIEW_WMS_ENDPOINT";
pub const LAYER_ENV: &str = "CROSSVIEW_WMS_LAYER";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub center_lat: f64,
    pub center_lon: f64,
    pub span_m: f64,
    pub pixels: u32,
    /// `(min_lon, min_lat, max_lon, max_lat)` in degrees.
    pub bbox: [f64; 4],
}

impl TileSpec {
    pub fn delta_lat(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn delta_lon(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    /// East-west and north-south extent in meters, recovered from the bbox.
    pub fn extent_m(&self) -> (f64, f64) {
        let w = self.delta_lon() * METERS_PER_DEGREE * self.center_lat.to_radians().cos();
        let h = self.delta_lat() * METERS_PER_DEGREE;
        (w, h)
    }

    /// Ground area covered at the nominal sampling distance.
    pub fn area_km2(&self) -> f64 {
        let side = f64::from(self.pixels) * GROUND_SAMPLING_M / 1000.0;
        side * side
    }
}

/// Square tile of `span_m` meters centered on `(lat, lon)` under the
/// equirectangular small-area approximation.
pub fn tile_bbox(lat: f64, lon: f64, span_m: f64) -> Result<TileSpec> {
    tile_spec(lat, lon, span_m, DEFAULT_PIXELS)
}

pub fn tile_spec(lat: f64, lon: f64, span_m: f64, pixels: u32) -> Result<TileSpec> {
    if !lat.is_finite() || lat.abs() >= MAX_ABS_LATITUDE {
        return Err(Error::UnsupportedLatitude(lat));
    }
    if !lon.is_finite() || lon.abs() > 180.0 {
        return Err(Error::range("longitude", lon));
    }
    if !(span_m > 0.0) || !span_m.is_finite() {
        return Err(Error::range("span_m", span_m));
    }
    if pixels == 0 {
        return Err(Error::range("pixels", 0.0));
    }
    let dlat = span_m / METERS_PER_DEGREE;
    let dlon = span_m / (METERS_PER_DEGREE * lat.to_radians().cos());
    Ok(TileSpec {
        center_lat: lat,
        center_lon: lon,
        span_m,
        pixels,
        bbox: [lon - dlon / 2.0, lat - dlat / 2.0, lon + dlon / 2.0, lat + dlat / 2.0],
    })
}

/// A fully specified GET request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WmsRequest {
    pub endpoint: String,
    pub params: Vec<(String, String)>,
}

impl WmsRequest {
    pub fn query_string(&self) -> String {
        self.params.iter().map(|(k, v)| format!("{k}={}", encode_component(v))).collect::<Vec<_>>().join("&")
    }

    pub fn url(&self) -> String {
        let sep = if self.endpoint.contains('?') { '&' } else { '?' };
        format!("{}{sep}{}", self.endpoint, self.query_string())
    }
}

fn encode_component(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' | b',' | b':' | b'/' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

/// WMS 1.3.0 `GetMap` for a tile. `CRS:84` keeps the bbox in lon-lat order.
pub fn build_wms_request(spec: &TileSpec, layer: &str, endpoint: &str) -> WmsRequest {
    let [a, b, c, d] = spec.bbox;
    let px = spec.pixels.to_string();
    let params = [
        ("SERVICE", "WMS".to_string()),
        ("VERSION", "1.3.0".to_string()),
        ("REQUEST", "GetMap".to_string()),
        ("LAYERS", layer.to_string()),
        ("STYLES", String::new()),
        ("CRS", "CRS:84".to_string()),
        ("BBOX", format!("{a:.8},{b:.8},{c:.8},{d:.8}")),
        ("WIDTH", px.clone()),
        ("HEIGHT", px),
        ("FORMAT", "image/jpeg".to_string()),
    ];
    WmsRequest { endpoint: endpoint.to_string(), params: params.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
}

/// Endpoint and layer from the environment, falling back to the defaults.
pub fn wms_source_from_env() -> (String, String) {
    let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| DEFAULT_WMS_ENDPOINT.to_string());
    let layer = std::env::var(LAYER_ENV).unwrap_or_else(|_| DEFAULT_WMS_LAYER.to_string());
    (endpoint, layer)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

/// Blocking HTTP GET. `Err` means a transport failure worth retrying.
pub trait HttpClient: Send + Sync {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, String>;
}

pub struct TileFetcher<'a> {
    pub client: &'a dyn HttpClient,
    pub cache_dir: PathBuf,
    pub endpoint: String,
    pub layer: String,
    pub retries: u32,
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl<'a> TileFetcher<'a> {
    pub fn new(client: &'a dyn HttpClient, cache_dir: impl Into<PathBuf>, endpoint: &str, layer: &str) -> Self {
        Self {
            client,
            cache_dir: cache_dir.into(),
            endpoint: endpoint.into(),
            layer: layer.into(),
            retries: 3,
            backoff: Duration::from_millis(500),
            max_in_flight: 4,
        }
    }

    /// Cache file for a tile; the key hashes the bbox rounded to 1e-6°.
    pub fn cache_path(&self, spec: &TileSpec) -> PathBuf {
        let [a, b, c, d] = spec.bbox;
        let key = format!("{}|{a:.6}|{b:.6}|{c:.6}|{d:.6}|{}", self.layer, spec.pixels);
        self.cache_dir.join(format!("{}.jpg", &crate::util::sha256_hex(key.as_bytes())[..32]))
    }

    /// Returns the cached tile path, downloading it first if needed.
    pub fn fetch(&self, id: &str, spec: &TileSpec) -> Result<PathBuf> {
        let path = self.cache_path(spec);
        if path.is_file() {
            return Ok(path);
        }
        let url = build_wms_request(spec, &self.layer, &self.endpoint).url();
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.client.get(&url) {
                Ok(resp) if resp.status == 200 => {
                    check_image(id, &resp)?;
                    crate::util::write_atomic(&path, &resp.body)?;
                    return Ok(path);
                }
                Ok(resp) if resp.status >= 500 || resp.status == 429 => last = format!("HTTP {}", resp.status),
                Ok(resp) => return Err(Error::Fetch { id: id.into(), reason: format!("HTTP {}", resp.status) }),
                Err(e) => last = e,
            }
        }
        Err(Error::Fetch { id: id.into(), reason: format!("gave up after {} attempts: {last}", self.retries + 1) })
    }

    /// Fetches many tiles with at most `max_in_flight` concurrent requests.
    /// Results are in input order.
    pub fn fetch_all(&self, jobs: &[(String, TileSpec)]) -> Vec<Result<PathBuf>> {
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.clamp(1, jobs.len().max(1));
        let mut results: Vec<Option<Result<PathBuf>>> = (0..jobs.len()).map(|_| None).collect();
        let collected: Vec<Vec<(usize, Result<PathBuf>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut out = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            let Some((id, spec)) = jobs.get(i) else { break };
                            out.push((i, self.fetch(id, spec)));
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fetch worker panicked")).collect()
        });
        for (i, r) in collected.into_iter().flatten() {
            results[i] = Some(r);
        }
        results.into_iter().map(|r| r.expect("every job visited")).collect()
    }
}

fn check_image(id: &str, resp: &HttpResponse) -> Result<()> {
    let declared = resp.content_type.as_deref().unwrap_or("");
    if !declared.is_empty() && !declared.starts_with("image/") {
        let snippet: String = String::from_utf8_lossy(&resp.body).chars().take(120).collect();
        return Err(Error::Protocol(format!("tile {id}: expected an image, got `{declared}`: {snippet}")));
    }
    image::load_from_memory(&resp.body).map_err(|e| Error::Protocol(format!("tile {id}: undecodable image: {e}")))?;
    Ok(())
}

/// Reads a tile image from the cache or from a directory of pre-fetched files.
pub fn read_tile<F: crate::Scalar>(path: &Path, size: usize) -> Result<crate::pixels::Image<F>> {
    Ok(crate::pixels::Image::<F>::load(path)?.resize(size, size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Mutex;

    #[test]
    fn equator_and_sixty_degrees() {
        let t = tile_bbox(0.0, 0.0, 2560.0).unwrap();
        let want = 2560.0 / 111_320.0;
        assert!((t.delta_lat() - want).abs() < 1e-12);
        assert!((t.delta_lon() - want).abs() < 1e-12);
        assert!((t.delta_lat() - 0.0230).abs() < 1e-4);
        let t60 = tile_bbox(60.0, 10.0, 2560.0).unwrap();
        assert!((t60.delta_lon() - 0.04599).abs() < 1e-5);
        assert!((t.area_km2() - 6.5536).abs() < 1e-12);
        assert_eq!(format!("{:.2}", t.area_km2()), "6.55");
    }

    #[test]
    fn polar_latitudes_rejected() {
        assert!(matches!(tile_bbox(89.0, 0.0, 2560.0), Err(Error::UnsupportedLatitude(_))));
        assert!(matches!(tile_bbox(-89.5, 0.0, 2560.0), Err(Error::UnsupportedLatitude(_))));
        assert!(tile_bbox(10.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn query_string_contract() {
        let t = tile_bbox(0.0, 0.0, 2560.0).unwrap();
        let req = build_wms_request(&t, "s2", "https://example.test/wms");
        let q = req.query_string();
        assert!(q.contains("WIDTH=256&HEIGHT=256"), "{q}");
        assert!(q.contains("CRS=CRS:84"));
        assert!(q.contains("VERSION=1.3.0") && q.contains("REQUEST=GetMap") && q.contains("FORMAT=image/jpeg"));
        assert!(q.contains("BBOX=-0.01149838,-0.01149838,0.01149838,0.01149838"), "{q}");
        assert!(req.url().starts_with("https://example.test/wms?SERVICE=WMS&"));
    }

    struct Mock {
        calls: AtomicUsize,
        failures_before_success: usize,
        body: Vec<u8>,
        content_type: &'static str,
        log: Mutex<Vec<String>>,
    }

    impl Mock {
        fn jpeg() -> Vec<u8> {
            let img = image::RgbImage::from_pixel(4, 4, image::Rgb([10, 200, 30]));
            let mut buf = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Jpeg).unwrap();
            buf
        }

        fn new(failures: usize) -> Self {
            Self { calls: AtomicUsize::new(0), failures_before_success: failures, body: Self::jpeg(), content_type: "image/jpeg", log: Mutex::new(Vec::new()) }
        }
    }

    impl HttpClient for Mock {
        fn get(&self, url: &str) -> std::result::Result<HttpResponse, String> {
            self.log.lock().unwrap().push(url.to_string());
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures_before_success {
                return Err("connection reset".into());
            }
            Ok(HttpResponse { status: 200, content_type: Some(self.content_type.into()), body: self.body.clone() })
        }
    }

    fn fetcher<'a>(m: &'a Mock, dir: &Path) -> TileFetcher<'a> {
        let mut f = TileFetcher::new(m, dir, "http://mock/wms", "layer");
        f.backoff = Duration::from_millis(1);
        f
    }

    #[test]
    fn cache_hit_makes_no_call() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mock::new(0);
        let f = fetcher(&m, dir.path());
        let t = tile_bbox(12.0, 34.0, 2560.0).unwrap();
        let p = f.fetch("r1", &t).unwrap();
        assert_eq!(m.calls.load(Ordering::SeqCst), 1);
        assert_eq!(f.fetch("r1", &t).unwrap(), p);
        assert_eq!(m.calls.load(Ordering::SeqCst), 1);
        let img = read_tile::<f64>(&p, 8).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
    }

    #[test]
    fn retries_then_gives_up_with_record_id() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mock::new(2);
        let t = tile_bbox(1.0, 2.0, 2560.0).unwrap();
        assert!(fetcher(&m, dir.path()).fetch("ok", &t).is_ok());
        let m = Mock::new(100);
        let err = fetcher(&m, dir.path()).fetch("obs-9", &tile_bbox(3.0, 2.0, 2560.0).unwrap()).unwrap_err();
        assert!(matches!(&err, Error::Fetch { id, .. } if id == "obs-9"), "{err}");
        assert_eq!(m.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn non_image_is_protocol_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mock::new(0);
        m.body = b"<ServiceExceptionReport/>".to_vec();
        m.content_type = "text/xml";
        let err = fetcher(&m, dir.path()).fetch("x", &tile_bbox(1.0, 2.0, 2560.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn concurrent_fetch_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mock::new(0);
        let f = fetcher(&m, dir.path());
        let jobs: Vec<_> = (0..9).map(|i| (format!("r{i}"), tile_bbox(f64::from(i), 5.0, 2560.0).unwrap())).collect();
        let out = f.fetch_all(&jobs);
        for ((_, spec), r) in jobs.iter().zip(&out) {
            assert_eq!(r.as_ref().unwrap(), &f.cache_path(spec));
        }
        assert_eq!(m.calls.load(Ordering::SeqCst), 9);
    }

    proptest! {
        #[test]
        fn bbox_inverse_recovers_span(lat in -88.9f64..88.9, lon in -179.0f64..179.0, span in 10.0f64..50_000.0) {
            let t = tile_bbox(lat, lon, span).unwrap();
            let (w, h) = t.extent_m();
            prop_assert!(((w - span) / span).abs() < 1e-9);
            prop_assert!(((h - span) / span).abs() < 1e-9);
            prop_assert!(t.bbox[0] < lon && lon < t.bbox[2] && t.bbox[1] < lat && lat < t.bbox[3]);
        }
    }
}
