use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn crossview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossview")).args(args).output().expect("spawn crossview")
}

fn run_ok(args: &[&str]) -> Output {
    let out = crossview(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn synth(dir: &Path, seed: &str) {
    run_ok(&["synth", "--out-dir", dir.to_str().unwrap(), "--seed", seed, "--pairs", "60", "--ground-size", "16", "--satellite-size", "16"]);
}

#[test]
fn usage_errors_exit_one_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out = crossview(&["pretrain", "--out-dir", out_dir.to_str().unwrap(), "--data", "x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
    assert_eq!(crossview(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(crossview(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two_and_record_the_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = crossview(&["pretrain", "--out-dir", tmp.path().to_str().unwrap(), "--data", "/definitely/missing"]);
    assert_eq!(out.status.code(), Some(2));
    let m = manifest(tmp.path());
    assert_eq!(m["status"], "error");
    assert!(m["error"].as_str().unwrap().contains("missing"));

    synth(&tmp.path().join("data"), "0");
    let data = tmp.path().join("data");
    let bad = tmp.path().join("bad");
    let out = crossview(&["pretrain", "--out-dir", bad.to_str().unwrap(), "--data", data.to_str().unwrap(), "--set", "not_a_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, "5");
    synth(&b, "5");
    synth(&c, "6");
    for f in ["train.jsonl", "test.jsonl", "world.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("train.jsonl")).unwrap(), std::fs::read(c.join("train.jsonl")).unwrap());
    let m = manifest(&a);
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn config_file_is_layered_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "1");
    let cfg = tmp.path().join("run.conf");
    std::fs::write(&cfg, "# pretraining overrides\nepochs = 1\nbase_lr = 0.5\nmodel.arch = cve\n").unwrap();
    let out_dir = tmp.path().join("pre");
    run_ok(&[
        "pretrain", "--out-dir", out_dir.to_str().unwrap(), "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--lr", "0.001", "--precision", "f32",
    ]);
    let m = manifest(&out_dir);
    assert_eq!(m["config"]["phase"]["epochs"], 1);
    assert_eq!(m["config"]["phase"]["base_lr"], 0.001);
    assert_eq!(m["config"]["model"]["arch"], "cve");
    assert_eq!(m["precision"], "f32");
    assert_eq!(std::fs::read_to_string(out_dir.join("loss.csv")).unwrap().lines().count(), 2);
    assert!(m["inputs"].as_array().unwrap().iter().any(|i| i["path"].as_str().unwrap().ends_with("run.conf")));
}

#[test]
fn train_eval_retrieve_and_map_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    run_ok(&["synth", "--out-dir", &p("data"), "--seed", "2", "--pairs", "60", "--region-step", "5", "--region-habitats", "0,1"]);
    run_ok(&["pretrain", "--out-dir", &p("pre"), "--data", &p("data"), "--arch", "cve-meta", "--epochs", "1", "--precision", "f32"]);
    let ckpt = p("pre/checkpoint.ckpt");
    // Precision follows the checkpoint when not given.
    run_ok(&["probe", "--out-dir", &p("probe"), "--data", &p("data"), "--checkpoint", &ckpt, "--epochs", "1"]);
    assert_eq!(manifest(&tmp.path().join("probe"))["precision"], "f32");
    run_ok(&["eval", "--out-dir", &p("eval"), "--data", &p("data"), "--checkpoint", &p("probe/checkpoint.ckpt")]);
    let probe: serde_json::Value = serde_json::from_slice(&std::fs::read(p("probe/metrics.json")).unwrap()).unwrap();
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(p("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(probe["accuracy"], eval["accuracy"]);
    // A pretraining checkpoint has no head to evaluate.
    assert_eq!(crossview(&["eval", "--out-dir", &p("eval2"), "--data", &p("data"), "--checkpoint", &ckpt]).status.code(), Some(2));

    run_ok(&["retrieve", "--out-dir", &p("ret"), "--data", &p("data"), "--checkpoint", &ckpt, "--k", "3"]);
    run_ok(&["retrieve", "--out-dir", &p("ret2"), "--data", &p("data"), "--checkpoint", &ckpt, "--k", "3", "--index", &p("ret/index.bin")]);
    let csv = std::fs::read_to_string(p("ret/retrieval.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(p("ret2/retrieval.csv")).unwrap());
    assert_eq!(csv.lines().next(), Some("query_id,rank,id,score"));
    assert!(!tmp.path().join("ret2/index.bin").exists());
    // An index from another checkpoint is refused.
    run_ok(&["pretrain", "--out-dir", &p("pre2"), "--data", &p("data"), "--arch", "cve-meta", "--epochs", "1", "--seed", "9"]);
    let out = crossview(&["retrieve", "--out-dir", &p("ret3"), "--data", &p("data"), "--checkpoint", &p("pre2/checkpoint.ckpt"), "--index", &p("ret/index.bin")]);
    assert_eq!(out.status.code(), Some(2));

    let data = tmp.path().join("data");
    let train = std::fs::read_to_string(data.join("train.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(train.lines().next().unwrap()).unwrap();
    let query = data.join(row["ground_path"].as_str().unwrap());
    run_ok(&[
        "map", "--out-dir", &p("map"), "--checkpoint", &ckpt, "--query-image", query.to_str().unwrap(), "--bbox", "0,40,20,50",
        "--step", "5", "--resolution", "1", "--tiles", &p("data/region"), "--month", "6", "--out-png", "sub/m.png",
    ]);
    let raster = std::fs::read_to_string(p("map/map.csv")).unwrap();
    assert_eq!(raster.lines().count(), 1 + 20 * 10);
    assert!(tmp.path().join("map/sub/m.png").is_file());
    assert_eq!(std::fs::read_to_string(p("map/tile_scores.csv")).unwrap().lines().count(), 1 + 8);
    // Grid centers without a pre-fetched tile are an error.
    let out = crossview(&[
        "map", "--out-dir", &p("map2"), "--checkpoint", &ckpt, "--query-image", query.to_str().unwrap(), "--bbox", "0,40,20,50",
        "--step", "2", "--tiles", &p("data/region"),
    ]);
    assert_eq!(out.status.code(), Some(2));

    run_ok(&["cluster", "--out-dir", &p("cl"), "--data", &p("data"), "--k", "4"]);
    assert_eq!(std::fs::read_to_string(p("cl/cluster_labels.csv")).unwrap().lines().count(), 61);
    run_ok(&["sweep-meta-dropout", "--out-dir", &p("sw"), "--data", &p("data"), "--checkpoint", &ckpt, "--rates", "0,1", "--epochs", "1"]);
    assert_eq!(std::fs::read_to_string(p("sw/sweep.csv")).unwrap().lines().count(), 3);
}

/// Serves one tile per request; requests whose URL contains `fail_marker` get a 404.
fn mock_wms(png: Vec<u8>, fail_marker: &'static str) -> (String, std::sync::Arc<std::sync::Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap() == 0 || h == "\r\n" {
                    break;
                }
            }
            log.lock().unwrap().push(line.clone());
            let (status, ctype, body): (&str, &str, &[u8]) =
                if line.contains(fail_marker) { ("404 Not Found", "text/plain", b"no tile") } else { ("200 OK", "image/png", &png) };
            let head = format!("HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(body);
        }
    });
    (format!("http://{addr}/wms"), seen)
}

#[test]
fn prepare_data_builds_a_manifest_from_a_wms_server() {
    let tmp = tempfile::tempdir().unwrap();
    let png_path = tmp.path().join("tile.png");
    crossview::Image64::zeros(8, 8, 3).map(|_| 0.5).save_png(&png_path).unwrap();
    let (endpoint, seen) = mock_wms(std::fs::read(&png_path).unwrap(), "99.98");

    let mut records = String::new();
    let rows = [
        ("a", Some(45.0), Some(5.0), Some("2020-05-01")),
        ("b", Some(45.5), Some(5.5), Some("2020-07-12 10:00:00")),
        ("c", Some(46.0), Some(6.0), None),
        ("d", None, Some(6.0), Some("2020-01-01")),
        ("e", Some(89.5), Some(6.0), Some("2020-01-01")),
        ("f", Some(10.0), Some(100.0), Some("2020-01-01")),
        ("g", Some(44.0), Some(4.0), Some("2020-03-03")),
        ("h", Some(43.0), Some(3.0), Some("2020-04-04")),
    ];
    for (id, lat, lon, date) in rows {
        let r = serde_json::json!({ "id": id, "image_path": format!("img/{id}.jpg"), "latitude": lat, "longitude": lon, "date": date, "species_id": 1 });
        records.push_str(&format!("{r}\n"));
    }
    std::fs::create_dir(tmp.path().join("img")).unwrap();
    for id in ["a", "b", "c", "d", "e", "f", "g"] {
        std::fs::copy(&png_path, tmp.path().join(format!("img/{id}.jpg"))).unwrap();
    }
    let rec = tmp.path().join("records.jsonl");
    std::fs::write(&rec, records).unwrap();
    let out = tmp.path().join("prepared");
    let status = Command::new(env!("CARGO_BIN_EXE_crossview"))
        .args(["prepare-data", "--out-dir", out.to_str().unwrap(), "--records", rec.to_str().unwrap(), "--test-fraction", "0.25", "--pixels", "64"])
        .env("CROSSVIEW_WMS_ENDPOINT", &endpoint)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let ds = crossview::data::Dataset::load(&out).unwrap();
    let mut ids: Vec<&str> = ds.train.rows.iter().chain(&ds.test.rows).map(|r| r.id.as_str()).collect();
    ids.sort();
    assert_eq!(ids, ["a", "b", "g"]);
    for r in ds.train.rows.iter().chain(&ds.test.rows) {
        assert!(Path::new(&r.ground_path).is_absolute());
        assert!(ds.train.resolve(&r.satellite_path).is_file());
    }
    let drops = std::fs::read_to_string(out.join("drops.csv")).unwrap();
    for id in ["c", "d", "e", "f", "h"] {
        assert!(drops.lines().any(|l| l.starts_with(&format!("{id},"))), "{id} missing from {drops}");
    }
    let requests = seen.lock().unwrap().clone();
    assert!(requests.iter().all(|l| l.contains("REQUEST=GetMap") && l.contains("WIDTH=64")), "{requests:?}");

    // A second run is served from the tile cache.
    let before = seen.lock().unwrap().len();
    let again = Command::new(env!("CARGO_BIN_EXE_crossview"))
        .args(["prepare-data", "--out-dir", out.to_str().unwrap(), "--records", rec.to_str().unwrap(), "--test-fraction", "0.25", "--pixels", "64"])
        .env("CROSSVIEW_WMS_ENDPOINT", &endpoint)
        .output()
        .unwrap();
    assert!(again.status.success());
    // Only the failing tile is requested again (with retries).
    let after = seen.lock().unwrap()[before..].to_vec();
    assert!(after.iter().all(|l| l.contains("99.98")), "{after:?}");
}
