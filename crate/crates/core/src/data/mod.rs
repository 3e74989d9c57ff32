//! Observation records, satellite-tile requests, manifests, the synthetic
//! cross-view generator and image augmentations.

pub mod augment;
pub mod manifest;
pub mod records;
pub mod synth;
pub mod tiles;

pub use augment::{AugmentPolicy, IMAGENET_MEAN, IMAGENET_STD};
pub use manifest::{Dataset, Manifest, ManifestRow, Split};
pub use records::{minimal_filter, DropReport, ObservationRecord};
pub use synth::{synth_dataset, SynthConfig, SynthWorld};
pub use tiles::{tile_bbox, HttpClient, HttpResponse, TileFetcher, TileSpec, WmsRequest};
