use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

pub const DEFAULT_RESOLUTION: f64 = 0.01;

/// Regular lattice over `(min_lon, min_lat, max_lon, max_lat)`. Row 0 is the
/// southern edge; centers are row-major (latitude rows, longitude columns).
/// Edge cells are clipped to the bbox and centered on the clipped cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGrid {
    pub bbox: [f64; 4],
    pub step: f64,
    pub rows: usize,
    pub cols: usize,
    /// `(lat, lon)` per cell.
    pub centers: Vec<(f64, f64)>,
}

fn cells(extent: f64, step: f64) -> usize {
    ((extent / step) - 1e-9).ceil().max(1.0) as usize
}

fn axis_centers(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    (0..cells(hi - lo, step))
        .map(|i| {
            let a = lo + i as f64 * step;
            let b = (a + step).min(hi);
            if b - a == step {
                lo + (i as f64 + 0.5) * step
            } else {
                0.5 * (a + b)
            }
        })
        .collect()
}

pub fn make_grid(bbox: [f64; 4], step: f64) -> Result<GeoGrid> {
    let [min_lon, min_lat, max_lon, max_lat] = bbox;
    if !bbox.iter().all(|v| v.is_finite()) || !(min_lon < max_lon && min_lat < max_lat) {
        return Err(Error::range("bbox", format!("{bbox:?}")));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::range("step", step));
    }
    let lats = axis_centers(min_lat, max_lat, step);
    let lons = axis_centers(min_lon, max_lon, step);
    let centers = lats.iter().flat_map(|&la| lons.iter().map(move |&lo| (la, lo))).collect();
    Ok(GeoGrid { bbox, step, rows: lats.len(), cols: lons.len(), centers })
}

/// Cosine similarity of one unit query embedding against unit tile
/// embeddings (one row per grid cell), clamped at zero.
pub fn score_grid<F: Scalar>(query: &[F], tiles: &Matrix<F>) -> Result<Vec<f64>> {
    if query.len() != tiles.cols() {
        return Err(Error::Shape(format!("query width {} vs tile width {}", query.len(), tiles.cols())));
    }
    Ok(clamp_scores((0..tiles.rows()).map(|r| dot(query, tiles.row(r)).to_f64_lossy()).collect()))
}

pub fn clamp_scores(mut scores: Vec<f64>) -> Vec<f64> {
    for s in &mut scores {
        *s = s.max(0.0);
    }
    scores
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdwParams {
    pub power: f64,
    pub eps: f64,
}

impl Default for IdwParams {
    fn default() -> Self {
        Self { power: 2.0, eps: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRaster {
    pub grid: GeoGrid,
    /// Row-major over `grid.centers`.
    pub values: Vec<f64>,
}

impl ScoreRaster {
    pub fn resolution(&self) -> f64 {
        self.grid.step
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.cols + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["lat", "lon", "score"])?;
        for (&(lat, lon), v) in self.grid.centers.iter().zip(&self.values) {
            w.write_record([lat.to_string(), lon.to_string(), v.to_string()])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Rebuilds a raster from [`ScoreRaster::to_csv`] output for a known grid.
    pub fn from_csv(bytes: &[u8], grid: GeoGrid) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let mut values = Vec::with_capacity(grid.centers.len());
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| -> Result<f64> {
                rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Contract(format!("bad raster csv row {i}")))
            };
            let (lat, lon) = grid.centers.get(i).copied().ok_or_else(|| Error::Contract("raster csv has extra rows".into()))?;
            if field(0)? != lat || field(1)? != lon {
                return Err(Error::Contract(format!("raster csv row {i} does not match the grid")));
            }
            values.push(field(2)?);
        }
        if values.len() != grid.centers.len() {
            return Err(Error::Contract(format!("raster csv has {} rows, grid has {}", values.len(), grid.centers.len())));
        }
        Ok(Self { grid, values })
    }

    /// North-up rendering, linear from `[0, max]` through a fixed colormap.
    pub fn render(&self) -> RgbImage {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        let (rows, cols) = (self.grid.rows, self.grid.cols);
        let mut img = RgbImage::new(cols as u32, rows as u32);
        for r in 0..rows {
            for c in 0..cols {
                let t = if max > 0.0 { (self.get(r, c) / max).clamp(0.0, 1.0) } else { 0.0 };
                img.put_pixel(c as u32, (rows - 1 - r) as u32, Rgb(colormap(t)));
            }
        }
        img
    }
}

/// Dark purple → teal → yellow.
fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 3] = [[68.0, 1.0, 84.0], [33.0, 145.0, 140.0], [253.0, 231.0, 37.0]];
    let x = t * 2.0;
    let i = (x.floor() as usize).min(1);
    let f = x - i as f64;
    [0, 1, 2].map(|k| (STOPS[i][k] + (STOPS[i + 1][k] - STOPS[i][k]) * f).round() as u8)
}

/// Inverse-distance-weighted raster over all points, distances in degrees.
/// Cells within `eps` of a point take that point's value exactly.
pub fn idw_interpolate(points: &[(f64, f64, f64)], bbox: [f64; 4], resolution: f64, params: IdwParams) -> Result<ScoreRaster> {
    if points.is_empty() {
        return Err(Error::Contract("interpolation needs at least one point".into()));
    }
    let grid = make_grid(bbox, resolution)?;
    let values = grid.centers.iter().map(|&(lat, lon)| idw_at(points, lat, lon, params)).collect();
    Ok(ScoreRaster { grid, values })
}

pub(crate) fn idw_at(points: &[(f64, f64, f64)], lat: f64, lon: f64, p: IdwParams) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(plat, plon, v) in points {
        let d = ((plat - lat).powi(2) + (plon - lon).powi(2)).sqrt();
        if d < p.eps {
            return v;
        }
        let w = 1.0 / (d.powf(p.power) + p.eps);
        num += w * v;
        den += w;
    }
    num / den
}

/// Writes the CSV and the rendered PNG.
pub fn export_map(raster: &ScoreRaster, csv_path: &Path, png_path: &Path) -> Result<()> {
    crate::util::write_atomic(csv_path, &raster.to_csv()?)?;
    let mut buf = Vec::new();
    raster.render().write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)?;
    crate::util::write_atomic(png_path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn grid_examples() {
        let g = make_grid([0.0, 0.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(g.centers, vec![(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]);
        let g = make_grid([0.0, 0.0, 1.0, 1.0], 3.0).unwrap();
        assert_eq!(g.centers, vec![(0.5, 0.5)]);
        let g = make_grid([10.0, 20.0, 10.7, 20.3], 0.1).unwrap();
        assert_eq!((g.rows, g.cols), (3, 7));
        let g = make_grid([0.0, 0.0, 1.0, 0.25], 0.1).unwrap();
        assert_eq!((g.rows, g.cols), (3, 10));
        assert!((g.centers[2 * 10].0 - 0.225).abs() < 1e-12);
        assert!(make_grid([1.0, 0.0, 1.0, 1.0], 0.1).is_err());
        assert!(make_grid([0.0, 0.0, 1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn score_clamp() {
        let tiles = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let s = score_grid(&[1.0, 0.0], &tiles).unwrap();
        assert_eq!(s, vec![1.0, 0.0, 0.6]);
        assert!(score_grid(&[1.0], &tiles).is_err());
    }

    #[test]
    fn idw_examples() {
        let bbox = [0.0, 0.0, 1.0, 1.0];
        let r = idw_interpolate(&[(0.25, 0.25, 3.0), (0.75, 0.75, 7.0)], bbox, 0.5, IdwParams::default()).unwrap();
        assert_eq!(r.get(0, 0), 3.0);
        assert_eq!(r.get(1, 1), 7.0);
        assert!((r.get(0, 1) - 5.0).abs() < 1e-12);
        let r = idw_interpolate(&[(0.5, 0.0, 0.0), (0.5, 1.0, 1.0)], bbox, 1.0, IdwParams::default()).unwrap();
        assert!((r.values[0] - 0.5).abs() < 1e-12);
        assert!(matches!(idw_interpolate(&[], bbox, 0.1, IdwParams::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn idw_matches_direct_summation() {
        let mut r = stream(4, "idw");
        let pts: Vec<_> = (0..10).map(|_| (r.random_range(0.0..2.0), r.random_range(0.0..3.0), r.random_range(-1.0..5.0))).collect();
        let raster = idw_interpolate(&pts, [0.0, 0.0, 3.0, 2.0], 0.05, IdwParams::default()).unwrap();
        let (lo, hi) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.2), b.max(p.2)));
        assert!(raster.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        for _ in 0..20 {
            let i = r.random_range(0..raster.values.len());
            let (lat, lon) = raster.grid.centers[i];
            let mut num = 0.0;
            let mut den = 0.0;
            for &(a, b, v) in &pts {
                let w = 1.0 / (((a - lat) * (a - lat) + (b - lon) * (b - lon)) + 1e-12);
                num += w * v;
                den += w;
            }
            assert!((raster.values[i] - num / den).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_round_trip_and_render() {
        let mut r = stream(1, "csv");
        let grid = make_grid([5.0, 50.0, 5.3, 50.2], 0.1).unwrap();
        let values = (0..grid.centers.len()).map(|_| r.random::<f64>()).collect();
        let raster = ScoreRaster { grid: grid.clone(), values };
        let csv = raster.to_csv().unwrap();
        assert_eq!(String::from_utf8(csv.clone()).unwrap().lines().count(), raster.values.len() + 1);
        assert_eq!(ScoreRaster::from_csv(&csv, grid.clone()).unwrap(), raster);
        let zero = ScoreRaster { values: vec![0.0; grid.centers.len()], grid };
        let img = zero.render();
        assert!(img.pixels().all(|p| *p == *img.get_pixel(0, 0)));
        let dir = tempfile::tempdir().unwrap();
        export_map(&raster, &dir.path().join("m.csv"), &dir.path().join("m.png")).unwrap();
        assert!(dir.path().join("m.png").is_file());
    }

    #[test]
    fn render_is_north_up() {
        let grid = make_grid([0.0, 0.0, 1.0, 2.0], 1.0).unwrap();
        let raster = ScoreRaster { grid, values: vec![0.0, 1.0] };
        let img = raster.render();
        assert_eq!(img.get_pixel(0, 0).0, colormap(1.0));
        assert_eq!(img.get_pixel(0, 1).0, colormap(0.0));
    }

    proptest! {
        #[test]
        fn idw_is_bounded(pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, -3.0f64..3.0), 1..12)) {
            let r = idw_interpolate(&pts, [0.0, 0.0, 1.0, 1.0], 0.1, IdwParams::default()).unwrap();
            let lo = pts.iter().map(|p| p.2).fold(f64::MAX, f64::min);
            let hi = pts.iter().map(|p| p.2).fold(f64::MIN, f64::max);
            prop_assert!(r.values.iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        }

        #[test]
        fn grid_count_formula(w in 0.01f64..3.0, h in 0.01f64..3.0, step in 0.05f64..1.0) {
            let g = make_grid([0.0, 0.0, w, h], step).unwrap();
            prop_assert_eq!(g.centers.len(), ((h / step) - 1e-9).ceil().max(1.0) as usize * ((w / step) - 1e-9).ceil().max(1.0) as usize);
            prop_assert!(g.centers.iter().all(|&(la, lo)| (0.0..=h).contains(&la) && (0.0..=w).contains(&lo)));
        }

        #[test]
        fn scores_independent_of_cell_order(seed in 0u64..100) {
            let mut r = stream(seed, "perm");
            let q: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
            let a = score_grid(&q, &Matrix::from_rows(&rows).unwrap()).unwrap();
            let rev: Vec<_> = rows.iter().rev().cloned().collect();
            let mut b = score_grid(&q, &Matrix::from_rows(&rev).unwrap()).unwrap();
            b.reverse();
            prop_assert_eq!(a, b);
        }
    }
}
