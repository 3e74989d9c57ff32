//! Deterministic synthetic cross-view corpus.
//!
//! Each species lives in one habitat. Satellite tiles are habitat-coded
//! stripe textures; ground images are species-coded glyphs over a background
//! weakly tinted by the habitat. Locations cluster around a per-habitat
//! center and months concentrate around a per-species peak.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::manifest::{Dataset, Manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::pixels::Image;
use crate::rng::stream;

const GROUND_NOISE: f64 = 0.15;
/// Weight of the habitat color in the ground background.
const GROUND_TINT: f64 = 0.4;
/// Half-width of the per-tile brightness jitter.
const SATELLITE_GAIN: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub n_species: usize,
    pub habitat_count: usize,
    pub ground_size: usize,
    pub satellite_size: usize,
    pub test_fraction: f64,
    /// `(min_lon, min_lat, max_lon, max_lat)` of the simulated region.
    pub region: [f64; 4],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 1000,
            n_species: 10,
            habitat_count: 10,
            ground_size: 32,
            satellite_size: 32,
            test_fraction: 0.2,
            region: [0.0, 40.0, 20.0, 50.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub seed: u64,
    pub n_species: usize,
    pub habitat_count: usize,
    pub region: [f64; 4],
    /// `(lat, lon)` per habitat.
    pub habitat_centers: Vec<(f64, f64)>,
    pub species_habitat: Vec<usize>,
    pub species_peak_month: Vec<u32>,
    /// Spread of observations around their habitat center, degrees.
    pub location_sigma: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl SynthWorld {
    pub fn new(seed: u64, n_species: usize, habitat_count: usize, region: [f64; 4]) -> Result<Self> {
        if n_species == 0 || habitat_count == 0 {
            return Err(Error::Config("synthetic world needs at least one species and one habitat".into()));
        }
        let [min_lon, min_lat, max_lon, max_lat] = region;
        if !(min_lon < max_lon && min_lat < max_lat) {
            return Err(Error::Config(format!("region {region:?} is not well-ordered")));
        }
        let mut r = stream(seed, "synth/world");
        let habitat_centers = (0..habitat_count)
            .map(|_| (r.random_range(min_lat..max_lat), r.random_range(min_lon..max_lon)))
            .collect();
        let species_peak_month = (0..n_species).map(|_| r.random_range(1..=12)).collect();
        Ok(Self {
            seed,
            n_species,
            habitat_count,
            region,
            habitat_centers,
            species_habitat: (0..n_species).map(|s| s % habitat_count).collect(),
            species_peak_month,
            location_sigma: 0.1 * (max_lat - min_lat).min(max_lon - min_lon),
        })
    }

    pub fn habitat_color(&self, h: usize) -> [f64; 3] {
        hsv(h as f64 / self.habitat_count as f64, 0.55, 0.65)
    }

    /// Habitat of the nearest center among `allowed` (all when empty).
    pub fn habitat_at(&self, lat: f64, lon: f64, allowed: &[usize]) -> usize {
        let all: Vec<usize>;
        let candidates = if allowed.is_empty() {
            all = (0..self.habitat_count).collect();
            &all
        } else {
            allowed
        };
        *candidates
            .iter()
            .min_by(|&&a, &&b| {
                let d = |h: usize| {
                    let (y, x) = self.habitat_centers[h];
                    (y - lat).powi(2) + (x - lon).powi(2)
                };
                d(a).total_cmp(&d(b)).then(a.cmp(&b))
            })
            .expect("non-empty candidate list")
    }

    /// Unit-amplitude stripes whose orientation and frequency code the habitat.
    fn habitat_wave(&self, habitat: usize, u: f64, v: f64, phase: f64) -> f64 {
        let theta = PI * habitat as f64 / self.habitat_count as f64;
        let freq = 2.0 + (habitat % 3) as f64;
        (2.0 * PI * freq * (u * theta.cos() + v * theta.sin()) + phase).sin()
    }

    /// Stripe texture coded by habitat: hue, orientation and frequency.
    pub fn render_satellite<R: Rng + ?Sized>(&self, habitat: usize, size: usize, rng: &mut R) -> Image<f64> {
        let base = self.habitat_color(habitat);
        let phase = rng.random_range(0.0..2.0 * PI);
        let gain = rng.random_range(1.0 - SATELLITE_GAIN..1.0 + SATELLITE_GAIN);
        let noise = Normal::new(0.0, 0.04).expect("valid sigma");
        let mut img = Image::zeros(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                let wave = self.habitat_wave(habitat, x as f64 / size as f64, y as f64 / size as f64, phase);
                for (c, &b) in base.iter().enumerate() {
                    let val = gain * b * (1.0 + 0.25 * wave) + noise.sample(rng);
                    img.set(y, x, c, val.clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    /// Species glyph (shape only, random color) at a random place and scale
    /// over a habitat-tinted noisy background.
    pub fn render_ground<R: Rng + ?Sized>(&self, species: usize, size: usize, rng: &mut R) -> Image<f64> {
        let habitat = self.species_habitat[species];
        let tint = self.habitat_color(habitat);
        let color = hsv(rng.random_range(0.0..1.0), 0.9, 0.95);
        let noise = Normal::new(0.0, GROUND_NOISE).expect("valid sigma");
        let radius = rng.random_range(0.22..0.32) * size as f64;
        let cy = rng.random_range(radius..size as f64 - radius);
        let cx = rng.random_range(radius..size as f64 - radius);
        let shape = species % 4;
        let mut img = Image::zeros(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / radius, (x as f64 + 0.5 - cx) / radius);
                let inside = match shape {
                    0 => dy * dy + dx * dx <= 1.0,
                    1 => dy.abs() <= 0.8 && dx.abs() <= 0.8,
                    2 => (0.45..=1.0).contains(&(dy * dy + dx * dx).sqrt()),
                    _ => (dy.abs() <= 0.3 && dx.abs() <= 1.0) || (dx.abs() <= 0.3 && dy.abs() <= 1.0),
                };
                for c in 0..3 {
                    let bg = (1.0 - GROUND_TINT) * 0.6 + GROUND_TINT * tint[c];
                    let v = if inside { color[c] } else { bg };
                    img.set(y, x, c, (v + noise.sample(rng)).clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    /// Location drawn around the species' habitat center, kept inside the region.
    pub fn sample_location<R: Rng + ?Sized>(&self, species: usize, rng: &mut R) -> (f64, f64) {
        let (lat0, lon0) = self.habitat_centers[self.species_habitat[species]];
        let n = Normal::new(0.0, self.location_sigma).expect("valid sigma");
        let [min_lon, min_lat, max_lon, max_lat] = self.region;
        ((lat0 + n.sample(rng)).clamp(min_lat, max_lat), (lon0 + n.sample(rng)).clamp(min_lon, max_lon))
    }

    pub fn sample_month<R: Rng + ?Sized>(&self, species: usize, rng: &mut R) -> u32 {
        let offset: f64 = Normal::new(0.0, 1.5).expect("valid sigma").sample(rng);
        let m = i64::from(self.species_peak_month[species]) - 1 + offset.round() as i64;
        m.rem_euclid(12) as u32 + 1
    }
}

fn save_image(img: &Image<f64>, root: &Path, rel: &str) -> Result<()> {
    img.save_png(&root.join(rel))
}

/// Generates `n_pairs` observations under `out_dir` (PNG images plus
/// `train.jsonl`, `test.jsonl` and `world.json`). Sample `i` has species
/// `i mod n_species`.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<(Dataset, SynthWorld)> {
    if cfg.n_species > cfg.n_pairs {
        return Err(Error::Config(format!("{} species need at least as many pairs, got {}", cfg.n_species, cfg.n_pairs)));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::range("test_fraction", cfg.test_fraction));
    }
    let world = SynthWorld::new(cfg.seed, cfg.n_species, cfg.habitat_count, cfg.region)?;
    let mut order: Vec<usize> = (0..cfg.n_pairs).collect();
    order.shuffle(&mut stream(cfg.seed, "synth/split"));
    let n_test = (cfg.test_fraction * cfg.n_pairs as f64).round() as usize;
    let mut is_test = vec![false; cfg.n_pairs];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..cfg.n_pairs {
        let mut r = stream(cfg.seed, &format!("synth/sample/{i}"));
        let species = i % cfg.n_species;
        let (lat, lon) = world.sample_location(species, &mut r);
        let month = world.sample_month(species, &mut r);
        let id = format!("obs-{i:06}");
        let row = ManifestRow {
            ground_path: format!("ground/{id}.png"),
            satellite_path: format!("satellite/{id}.png"),
            id,
            lat,
            lon,
            month,
            species_id: species as u32,
        };
        save_image(&world.render_ground(species, cfg.ground_size, &mut r), out_dir, &row.ground_path)?;
        let habitat = world.species_habitat[species];
        save_image(&world.render_satellite(habitat, cfg.satellite_size, &mut r), out_dir, &row.satellite_path)?;
        if is_test[i] {
            test.push(row);
        } else {
            train.push(row);
        }
    }
    let ds = Dataset {
        train: Manifest { split: Split::Train, root: out_dir.to_path_buf(), rows: train },
        test: Manifest { split: Split::Test, root: out_dir.to_path_buf(), rows: test },
    };
    ds.save(out_dir)?;
    crate::util::write_atomic(&out_dir.join("world.json"), &serde_json::to_vec_pretty(&world)?)?;
    Ok((ds, world))
}

pub fn load_world(path: &Path) -> Result<SynthWorld> {
    serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })
}

/// One rendered tile per cell of a region grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTile {
    pub cell: usize,
    pub lat: f64,
    pub lon: f64,
    pub habitat: usize,
    pub path: String,
}

pub const REGION_INDEX: &str = "tiles.jsonl";

/// Renders a satellite tile at every center of `grid`, with habitats limited
/// to `allowed` (all when empty). Writes PNGs plus a `tiles.jsonl` index.
pub fn synth_region_tiles(
    world: &SynthWorld,
    grid: &crate::geo::GeoGrid,
    allowed: &[usize],
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<RegionTile>> {
    let mut index = Vec::new();
    let mut text = Vec::new();
    for (cell, &(lat, lon)) in grid.centers.iter().enumerate() {
        let habitat = world.habitat_at(lat, lon, allowed);
        let mut r = stream(seed, &format!("synth/region/{cell}"));
        let rel = format!("cell-{cell:06}.png");
        save_image(&world.render_satellite(habitat, size, &mut r), out_dir, &rel)?;
        let t = RegionTile { cell, lat, lon, habitat, path: rel };
        serde_json::to_writer(&mut text, &t)?;
        text.push(b'\n');
        index.push(t);
    }
    crate::util::write_atomic(&out_dir.join(REGION_INDEX), &text)?;
    Ok(index)
}

pub fn load_region_index(dir: &Path) -> Result<Vec<RegionTile>> {
    let path = dir.join(REGION_INDEX);
    std::fs::read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() }))
        .collect()
}
