mod data;
mod map;
mod retrieve;
mod train;

use std::path::Path;

use anyhow::{bail, Context, Result};
use crossview::data::Dataset;
use crossview::train::EpochRecord;

use crate::cli::{Command, Common, Precision};
use crate::run::Run;
use crate::settings::{flag, Settings};

pub fn dispatch(command: Command, run: &mut Run) -> Result<()> {
    match command {
        Command::PrepareData(a) => data::prepare_data(a, run),
        Command::Synth(a) => data::synth(a, run),
        Command::Cluster(a) => data::cluster(a, run),
        Command::Pretrain(a) => train::pretrain(a, run),
        Command::Probe(a) => train::supervised(a, crossview::train::Phase::Probe, run),
        Command::Finetune(a) => train::supervised(a, crossview::train::Phase::Finetune, run),
        Command::SweepMetaDropout(a) => train::sweep(a, run),
        Command::Eval(a) => train::eval(a, run),
        Command::Retrieve(a) => retrieve::retrieve(a, run),
        Command::Map(a) => map::map(a, run),
    }
}

/// Layers config and flags, then settles the seed and requested precision.
fn settings(common: &Common, mut flags: Vec<(&str, Option<String>)>, extra: &[(String, String)], run: &mut Run) -> Result<(Settings, Option<Precision>)> {
    flags.push(("seed", flag(&common.seed)));
    flags.push(("precision", common.precision.map(|p| p.name().to_string())));
    if let Some(cfg) = &common.config {
        run.input(cfg)?;
    }
    let mut s = Settings::layered(common.config.as_deref(), flags, extra)?;
    run.seed = s.take_or("seed", 0u64)?;
    let precision = match s.take_string("precision") {
        None => None,
        Some(p) => Some(Precision::parse(&p).with_context(|| format!("precision must be f32 or f64, got `{p}`"))?),
    };
    Ok((s, precision))
}

/// Scalar type a checkpoint was trained with.
fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let (header, _) = crossview::params::ParamStore::<f64>::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    match header.get("scalar").and_then(|v| v.as_str()) {
        Some("f32") => Ok(Precision::F32),
        Some("f64") => Ok(Precision::F64),
        other => bail!("checkpoint {} has unknown scalar {other:?}", path.display()),
    }
}

fn load_dataset(dir: &Path, run: &mut Run) -> Result<Dataset> {
    let ds = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    for split in [crossview::data::Split::Train, crossview::data::Split::Test] {
        run.input(&dir.join(split.file_name()))?;
    }
    Ok(ds)
}

fn loss_csv(history: &[EpochRecord]) -> Result<Vec<u8>> {
    let keys: Vec<String> = history.first().map(|h| h.components.keys().cloned().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string(), "lr".to_string()];
    header.extend(keys.iter().cloned());
    w.write_record(&header)?;
    for h in history {
        let mut rec = vec![h.epoch.to_string(), h.lr.to_string()];
        rec.extend(keys.iter().map(|k| h.components.get(k).map_or(String::new(), f64::to_string)));
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}
