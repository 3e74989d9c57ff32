use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crossview::data::synth::load_region_index;
use crossview::data::tiles::{read_tile, tile_spec, wms_source_from_env, DEFAULT_PIXELS, DEFAULT_SPAN_M};
use crossview::data::TileFetcher;
use crossview::geo::{export_map, make_grid, species_map, GeoGrid, IdwParams, MapTile, DEFAULT_RESOLUTION};
use crossview::metadata::RawMetadata;
use crossview::models::CrossViewModel;
use crossview::pixels::Image;
use crossview::Scalar;
use serde_json::json;

use super::{checkpoint_precision, settings};
use crate::cli::{MapArgs, Precision};
use crate::http::UreqClient;
use crate::run::Run;
use crate::settings::{flag, parse_list};

/// Tolerance for matching pre-fetched tile centers to grid centers.
const CENTER_TOL_DEG: f64 = 1e-6;

enum TileSource {
    Dir(PathBuf),
    Wms { endpoint: String, layer: String, span_m: f64, pixels: u32 },
}

struct Plan {
    bbox: [f64; 4],
    step: f64,
    resolution: f64,
    idw: IdwParams,
    month: Option<u32>,
    out_csv: PathBuf,
    out_png: PathBuf,
    source: TileSource,
}

pub fn map(a: MapArgs, run: &mut Run) -> Result<()> {
    let flags = vec![
        ("bbox", Some(a.bbox.clone())),
        ("step", Some(a.step.to_string())),
        ("resolution", flag(&a.resolution)),
        ("power", flag(&a.power)),
        ("month", flag(&a.month)),
        ("out_csv", a.out_csv.as_ref().map(|p| p.display().to_string())),
        ("out_png", a.out_png.as_ref().map(|p| p.display().to_string())),
        ("span_m", flag(&a.span_m)),
        ("pixels", flag(&a.pixels)),
        ("endpoint", a.endpoint.clone()),
        ("layer", a.layer.clone()),
    ];
    let (mut s, precision) = settings(&a.common, flags, &[], run)?;
    let bbox: Vec<f64> = parse_list("bbox", &s.take_string("bbox").expect("required flag"))?;
    let Ok(bbox) = <[f64; 4]>::try_from(bbox) else {
        bail!("bbox needs four values: min_lon,min_lat,max_lon,max_lat");
    };
    let step: f64 = s.take_or("step", 0.0)?;
    let resolution: f64 = s.take_or("resolution", DEFAULT_RESOLUTION)?;
    let idw = IdwParams { power: s.take_or("power", IdwParams::default().power)?, ..IdwParams::default() };
    let month: Option<u32> = s.take("month")?;
    let out_csv = run.out(s.take_string("out_csv").unwrap_or_else(|| "map.csv".into()));
    let out_png = run.out(s.take_string("out_png").unwrap_or_else(|| "map.png".into()));
    let span_m: f64 = s.take_or("span_m", DEFAULT_SPAN_M)?;
    let pixels: u32 = s.take_or("pixels", DEFAULT_PIXELS)?;
    let (env_endpoint, env_layer) = wms_source_from_env();
    let endpoint = s.take_string("endpoint").unwrap_or(env_endpoint);
    let layer = s.take_string("layer").unwrap_or(env_layer);
    s.finish()?;
    if let Some(m) = month {
        if !(1..=12).contains(&m) {
            bail!("month must be in 1..=12, got {m}");
        }
    }
    let source = match &a.tiles {
        Some(dir) => TileSource::Dir(dir.clone()),
        None => TileSource::Wms { endpoint, layer, span_m, pixels },
    };
    run.config = json!({
        "bbox": bbox, "step": step, "resolution": resolution, "power": idw.power, "month": month,
        "tiles": match &source {
            TileSource::Dir(d) => json!({ "dir": d }),
            TileSource::Wms { endpoint, layer, span_m, pixels } => json!({ "endpoint": endpoint, "layer": layer, "span_m": span_m, "pixels": pixels }),
        },
    });
    let precision = precision.map_or_else(|| checkpoint_precision(&a.checkpoint), Ok)?;
    run.precision = Some(precision);
    let plan = Plan { bbox, step, resolution, idw, month, out_csv, out_png, source };
    match precision {
        Precision::F32 => map_impl::<f32>(&a, plan, run),
        Precision::F64 => map_impl::<f64>(&a, plan, run),
    }
}

/// Tile paths for every grid center, in grid order.
fn tile_paths(grid: &GeoGrid, source: &TileSource, run: &mut Run) -> Result<Vec<PathBuf>> {
    match source {
        TileSource::Dir(dir) => {
            run.input(&dir.join(crossview::data::synth::REGION_INDEX))?;
            let index = load_region_index(dir).with_context(|| format!("reading tile index in {}", dir.display()))?;
            grid.centers
                .iter()
                .map(|&(lat, lon)| {
                    index
                        .iter()
                        .find(|t| (t.lat - lat).abs() <= CENTER_TOL_DEG && (t.lon - lon).abs() <= CENTER_TOL_DEG)
                        .map(|t| dir.join(&t.path))
                        .with_context(|| format!("no tile in {} centered at ({lat}, {lon})", dir.display()))
                })
                .collect()
        }
        TileSource::Wms { endpoint, layer, span_m, pixels } => {
            let jobs = grid
                .centers
                .iter()
                .enumerate()
                .map(|(i, &(lat, lon))| Ok((format!("cell-{i}"), tile_spec(lat, lon, *span_m, *pixels)?)))
                .collect::<Result<Vec<_>>>()?;
            let client = UreqClient::new();
            let fetcher = TileFetcher::new(&client, run.out("tiles"), endpoint, layer);
            fetcher.fetch_all(&jobs).into_iter().map(|r| r.context("fetching map tiles")).collect()
        }
    }
}

fn map_impl<F: Scalar>(a: &MapArgs, plan: Plan, run: &mut Run) -> Result<()> {
    run.input(&a.checkpoint)?;
    let (model, _) = CrossViewModel::<F>::load(&a.checkpoint)?;
    if !model.config.arch.is_dual_stream() {
        bail!("maps need a dual-stream checkpoint, got {}", model.config.arch);
    }
    run.input(&a.query_image)?;
    let g = model.config.ground.image_size;
    let query = Image::<F>::load(&a.query_image)?.resize(g, g);
    let grid = make_grid(plan.bbox, plan.step)?;
    let paths = tile_paths(&grid, &plan.source, run)?;
    let size = model.config.satellite.image_size;
    let mut tiles = Vec::with_capacity(paths.len());
    for (&(lat, lon), path) in grid.centers.iter().zip(&paths) {
        let meta = plan.month.map(|m| RawMetadata::new(lat, lon, m)).transpose()?;
        tiles.push(MapTile { lat, lon, image: read_tile::<F>(path, size)?, meta });
    }
    let map = species_map(&model, &query, &tiles, plan.bbox, plan.resolution, plan.idw)?;
    export_map(&map.raster, &plan.out_csv, &plan.out_png)?;
    run.output(&plan.out_csv)?;
    run.output(&plan.out_png)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lat", "lon", "score", "tile"])?;
    let base = match &plan.source {
        TileSource::Dir(dir) => dir.as_path(),
        TileSource::Wms { .. } => run.out_dir.as_path(),
    };
    for ((t, sc), path) in tiles.iter().zip(&map.tile_scores).zip(&paths) {
        let shown = path.strip_prefix(base).unwrap_or(path);
        w.write_record([t.lat.to_string(), t.lon.to_string(), sc.to_string(), display(shown)])?;
    }
    run.write("tile_scores.csv", &w.into_inner()?)?;
    println!("scored {} tiles; raster {}x{} mean {:.4}", tiles.len(), map.raster.grid.rows, map.raster.grid.cols, map.raster.mean());
    Ok(())
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}
