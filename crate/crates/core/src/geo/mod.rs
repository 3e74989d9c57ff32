//! Species-distribution maps from satellite similarity scores, and
//! geographic clustering.

mod kmeans;
mod map;
mod raster;

pub use kmeans::{geo_kmeans, GeoClusterModel, KMeansFit, DEFAULT_K};
pub use map::{species_map, MapTile, SpeciesMap};
pub use raster::{
    clamp_scores, export_map, idw_interpolate, make_grid, score_grid, GeoGrid, IdwParams, ScoreRaster,
    DEFAULT_RESOLUTION,
};
