use crate::error::{Error, Result};
use crate::metadata::RawMetadata;
use crate::models::{embed_ground, embed_satellite, CrossViewModel};
use crate::pixels::Image;
use crate::scalar::Scalar;

use super::raster::{idw_interpolate, score_grid, IdwParams, ScoreRaster};

/// A satellite tile centered at `(lat, lon)`.
#[derive(Clone, Debug)]
pub struct MapTile<F> {
    pub lat: f64,
    pub lon: f64,
    pub image: Image<F>,
    pub meta: Option<RawMetadata>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesMap {
    /// Clamped similarity per tile, in tile order.
    pub tile_scores: Vec<f64>,
    pub raster: ScoreRaster,
}

/// Scores every tile against a ground-level query with a dual-stream model,
/// clamps negatives and interpolates the scores onto a raster over `bbox`.
pub fn species_map<F: Scalar>(
    model: &CrossViewModel<F>,
    query: &Image<F>,
    tiles: &[MapTile<F>],
    bbox: [f64; 4],
    resolution: f64,
    idw: IdwParams,
) -> Result<SpeciesMap> {
    if tiles.is_empty() {
        return Err(Error::Contract("a map needs at least one tile".into()));
    }
    let q = embed_ground(model, std::slice::from_ref(query))?;
    let images: Vec<Image<F>> = tiles.iter().map(|t| t.image.clone()).collect();
    let metas: Vec<Option<RawMetadata>> = tiles.iter().map(|t| t.meta).collect();
    let emb = embed_satellite(model, &images, &metas)?;
    let tile_scores = score_grid(q.row(0), &emb)?;
    let points: Vec<(f64, f64, f64)> = tiles.iter().zip(&tile_scores).map(|(t, &s)| (t.lat, t.lon, s)).collect();
    let raster = idw_interpolate(&points, bbox, resolution, idw)?;
    Ok(SpeciesMap { tile_scores, raster })
}
