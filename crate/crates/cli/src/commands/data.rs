use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crossview::data::records::{load_inat_json, load_records_jsonl};
use crossview::data::synth::{synth_region_tiles, REGION_INDEX};
use crossview::data::tiles::{tile_spec, wms_source_from_env, DEFAULT_PIXELS, DEFAULT_SPAN_M};
use crossview::data::{
    minimal_filter, synth_dataset, Dataset, DropReport, Manifest, ManifestRow, ObservationRecord, Split, SynthConfig, TileFetcher,
};
use crossview::geo::{geo_kmeans, make_grid, DEFAULT_K};
use rand::seq::SliceRandom;
use serde_json::json;

use super::{json_bytes, load_dataset, settings};
use crate::cli::{ClusterArgs, PrepareDataArgs, SynthArgs};
use crate::http::UreqClient;
use crate::run::Run;
use crate::settings::{flag, parse_list};

const MISSING_GROUND_IMAGE: &str = "missing ground image";

fn load_records(path: &Path) -> Result<Vec<ObservationRecord>> {
    let records = if path.extension().is_some_and(|e| e == "json") {
        load_inat_json(path)
    } else {
        load_records_jsonl(path)
    };
    records.with_context(|| format!("reading records {}", path.display()))
}

pub fn prepare_data(a: PrepareDataArgs, run: &mut Run) -> Result<()> {
    let flags = vec![
        ("test_fraction", flag(&a.test_fraction)),
        ("span_m", flag(&a.span_m)),
        ("pixels", flag(&a.pixels)),
        ("endpoint", a.endpoint.clone()),
        ("layer", a.layer.clone()),
        ("max_in_flight", flag(&a.max_in_flight)),
    ];
    let (mut s, _) = settings(&a.common, flags, &[], run)?;
    let test_fraction: f64 = s.take_or("test_fraction", 0.2)?;
    let span_m: f64 = s.take_or("span_m", DEFAULT_SPAN_M)?;
    let pixels: u32 = s.take_or("pixels", DEFAULT_PIXELS)?;
    let (env_endpoint, env_layer) = wms_source_from_env();
    let endpoint = s.take_string("endpoint").unwrap_or(env_endpoint);
    let layer = s.take_string("layer").unwrap_or(env_layer);
    let max_in_flight: usize = s.take_or("max_in_flight", 4)?;
    s.finish()?;
    if !(0.0..1.0).contains(&test_fraction) {
        bail!("test_fraction must be in [0, 1), got {test_fraction}");
    }
    let image_root = match &a.image_root {
        Some(r) => r.clone(),
        None => a.records.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    run.config = json!({
        "records": a.records, "test_records": a.test_records, "image_root": image_root,
        "test_fraction": test_fraction, "span_m": span_m, "pixels": pixels,
        "endpoint": endpoint, "layer": layer, "max_in_flight": max_in_flight,
    });

    run.input(&a.records)?;
    let (kept, mut report) = minimal_filter(load_records(&a.records)?);
    let (train, test) = match &a.test_records {
        Some(path) => {
            run.input(path)?;
            let (test, test_report) = minimal_filter(load_records(path)?);
            report.dropped.extend(test_report.dropped);
            (kept, test)
        }
        None => {
            let mut order: Vec<usize> = (0..kept.len()).collect();
            order.shuffle(&mut crossview::rng::stream(run.seed, "prepare/split"));
            let n_test = (test_fraction * kept.len() as f64).round() as usize;
            let test_set: std::collections::BTreeSet<usize> = order[..n_test].iter().copied().collect();
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (i, r) in kept.into_iter().enumerate() {
                if test_set.contains(&i) {
                    test.push(r);
                } else {
                    train.push(r);
                }
            }
            (train, test)
        }
    };

    let client = UreqClient::new();
    let mut fetcher = TileFetcher::new(&client, run.out("tiles"), &endpoint, &layer);
    fetcher.max_in_flight = max_in_flight;
    let image_root = std::path::absolute(&image_root)?;
    let build = |records: Vec<ObservationRecord>, split: Split, report: &mut DropReport| -> Result<Manifest> {
        let mut jobs = Vec::new();
        let mut keep = Vec::new();
        for r in records {
            if !image_root.join(&r.image_path).is_file() {
                report.dropped.push((r.id.clone(), MISSING_GROUND_IMAGE.into()));
                continue;
            }
            let (lat, lon) = (r.latitude.expect("filtered"), r.longitude.expect("filtered"));
            match tile_spec(lat, lon, span_m, pixels) {
                Ok(spec) => {
                    jobs.push((r.id.clone(), spec));
                    keep.push(r);
                }
                Err(e) => report.dropped.push((r.id.clone(), e.to_string())),
            }
        }
        let mut rows = Vec::new();
        for (r, fetched) in keep.into_iter().zip(fetcher.fetch_all(&jobs)) {
            let tile = match fetched {
                Ok(p) => p,
                Err(e) => {
                    report.dropped.push((r.id.clone(), format!("tile fetch failed: {e}")));
                    continue;
                }
            };
            let satellite_path = tile.strip_prefix(&run.out_dir).unwrap_or(&tile).to_string_lossy().into_owned();
            rows.push(ManifestRow {
                id: r.id.clone(),
                ground_path: image_root.join(&r.image_path).to_string_lossy().into_owned(),
                satellite_path,
                lat: r.latitude.expect("filtered"),
                lon: r.longitude.expect("filtered"),
                month: r.month().expect("filtered"),
                species_id: r.species_id,
            });
        }
        Ok(Manifest { split, root: run.out_dir.clone(), rows })
    };
    let train = build(train, Split::Train, &mut report)?;
    let test = build(test, Split::Test, &mut report)?;
    let ds = Dataset { train, test };
    ds.save(&run.out_dir)?;
    for split in [Split::Train, Split::Test] {
        run.output(&run.out(split.file_name()))?;
    }
    run.write("drops.csv", &report.to_csv()?)?;
    println!("kept {} train and {} test pairs, dropped {}", ds.train.len(), ds.test.len(), report.len());
    Ok(())
}

pub fn synth(a: SynthArgs, run: &mut Run) -> Result<()> {
    let flags = vec![
        ("pairs", flag(&a.pairs)),
        ("species", flag(&a.species)),
        ("habitats", flag(&a.habitats)),
        ("ground_size", flag(&a.ground_size)),
        ("satellite_size", flag(&a.satellite_size)),
        ("test_fraction", flag(&a.test_fraction)),
        ("region_step", flag(&a.region_step)),
        ("region_habitats", a.region_habitats.clone()),
    ];
    let (mut s, _) = settings(&a.common, flags, &[], run)?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: run.seed,
        n_pairs: s.take_or("pairs", d.n_pairs)?,
        n_species: s.take_or("species", d.n_species)?,
        habitat_count: s.take_or("habitats", d.habitat_count)?,
        ground_size: s.take_or("ground_size", d.ground_size)?,
        satellite_size: s.take_or("satellite_size", d.satellite_size)?,
        test_fraction: s.take_or("test_fraction", d.test_fraction)?,
        region: d.region,
    };
    let region_step: Option<f64> = s.take("region_step")?;
    let allowed: Vec<usize> = match s.take_string("region_habitats") {
        Some(t) => parse_list("region_habitats", &t)?,
        None => Vec::new(),
    };
    s.finish()?;
    if let Some(h) = allowed.iter().find(|&&h| h >= cfg.habitat_count) {
        bail!("region habitat {h} is out of range for {} habitats", cfg.habitat_count);
    }
    run.config = json!({ "synth": cfg, "region_step": region_step, "region_habitats": allowed });
    let (_, world) = synth_dataset(&cfg, &run.out_dir)?;
    for name in [Split::Train.file_name(), Split::Test.file_name(), "world.json".to_string()] {
        run.output(&run.out(name))?;
    }
    if let Some(step) = region_step {
        let grid = make_grid(world.region, step)?;
        let dir: PathBuf = run.out("region");
        synth_region_tiles(&world, &grid, &allowed, cfg.satellite_size, run.seed, &dir)?;
        run.output(&dir.join(REGION_INDEX))?;
        println!("region tiles: {} cells over bbox {:?} at step {step}", grid.centers.len(), world.region);
    }
    Ok(())
}

pub fn cluster(a: ClusterArgs, run: &mut Run) -> Result<()> {
    let flags = vec![("k", flag(&a.k)), ("max_iters", flag(&a.max_iters))];
    let (mut s, _) = settings(&a.common, flags, &[], run)?;
    let k: usize = s.take_or("k", DEFAULT_K)?;
    let max_iters: usize = s.take_or("max_iters", 100)?;
    s.finish()?;
    run.config = json!({ "k": k, "max_iters": max_iters });
    let ds = load_dataset(&a.data, run)?;
    let points: Vec<(f64, f64)> = ds.train.rows.iter().map(|r| (r.lat, r.lon)).collect();
    let fit = geo_kmeans(&points, k, max_iters, run.seed)?;
    let summary = json!({
        "k": k,
        "centroids": fit.model.centroids.iter().map(|c| [c.0, c.1]).collect::<Vec<_>>(),
        "iterations": fit.iterations,
        "objective": fit.objective(),
        "objective_trace": fit.objective_trace,
    });
    run.write("clusters.json", &json_bytes(&summary)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "split", "cluster"])?;
    for (r, l) in ds.train.rows.iter().zip(&fit.labels) {
        w.write_record([r.id.as_str(), "train", &l.to_string()])?;
    }
    for r in &ds.test.rows {
        w.write_record([r.id.as_str(), "test", &fit.model.predict(r.lat, r.lon).to_string()])?;
    }
    run.write("cluster_labels.csv", &w.into_inner()?)?;
    Ok(())
}
