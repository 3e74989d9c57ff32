use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Cross-view masked-autoencoder workflows: data preparation, pre-training,
/// downstream classification, retrieval and species-distribution maps.
///
/// Every subcommand accepts `--config FILE` with `key = value` lines. Flags
/// override config keys, which override built-in defaults. Each run writes
/// `run_manifest.json` into `--out-dir`.
#[derive(Parser, Debug)]
#[command(name = "crossview", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter observation records, fetch satellite tiles over WMS and write train/test manifests
    PrepareData(PrepareDataArgs),
    /// Generate a synthetic cross-view dataset (and optionally a grid of region tiles)
    Synth(SynthArgs),
    /// Self-supervised pre-training of a cross-view model
    Pretrain(PretrainArgs),
    /// Linear probe on a frozen backbone
    Probe(SupervisedArgs),
    /// Fine-tune the whole model with a classification head
    Finetune(SupervisedArgs),
    /// Repeat probe or fine-tune over several meta-dropout rates
    SweepMetaDropout(SweepArgs),
    /// Satellite-to-ground retrieval with optional matching-head re-ranking
    Retrieve(RetrieveArgs),
    /// Species-distribution map for a ground-level query image
    Map(MapArgs),
    /// KMeans over observation coordinates (geo-classification labels)
    Cluster(ClusterArgs),
    /// Test-split metrics of a checkpoint with a classification head
    Eval(EvalArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PrepareData(_) => "prepare-data",
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::Probe(_) => "probe",
            Command::Finetune(_) => "finetune",
            Command::SweepMetaDropout(_) => "sweep-meta-dropout",
            Command::Retrieve(_) => "retrieve",
            Command::Map(_) => "map",
            Command::Cluster(_) => "cluster",
            Command::Eval(_) => "eval",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::PrepareData(a) => &a.common,
            Command::Synth(a) => &a.common,
            Command::Pretrain(a) => &a.common,
            Command::Probe(a) | Command::Finetune(a) => &a.common,
            Command::SweepMetaDropout(a) => &a.common,
            Command::Retrieve(a) => &a.common,
            Command::Map(a) => &a.common,
            Command::Cluster(a) => &a.common,
            Command::Eval(a) => &a.common,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Directory receiving every output of the run
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Master seed [key: seed, default 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Numeric precision [key: precision; default f64, or the checkpoint's]
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// `key = value` config file, overridden by flags
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

fn parse_key_val(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Hyperparameter flags shared by the training commands.
#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// [key: epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Base learning rate [key: base_lr]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [key: batch_size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [key: weight_decay]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [key: warmup_epochs]
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// [key: mask_ratio]
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Metadata dropout probability [key: meta_dropout_p]
    #[arg(long)]
    pub meta_dropout: Option<f64>,
    /// Data-parallel shards per batch [key: workers]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Any other phase key or `model.*` key, e.g. `--set model.depth=2`
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_val)]
    pub set: Vec<(String, String)>,
}

#[derive(Args, Debug)]
pub struct PrepareDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training observations: iNat-style COCO `.json` or one record per line `.jsonl`
    #[arg(long, value_name = "FILE")]
    pub records: PathBuf,
    /// Held-out observations; without it the records are split by --test-fraction
    #[arg(long, value_name = "FILE")]
    pub test_records: Option<PathBuf>,
    /// Directory that record image paths are relative to [default: the records file's directory]
    #[arg(long, value_name = "DIR")]
    pub image_root: Option<PathBuf>,
    /// [key: test_fraction, default 0.2]
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Tile side in meters [key: span_m, default 2560]
    #[arg(long)]
    pub span_m: Option<f64>,
    /// Tile side in pixels [key: pixels, default 256]
    #[arg(long)]
    pub pixels: Option<u32>,
    /// WMS endpoint [key: endpoint; env CROSSVIEW_WMS_ENDPOINT]
    #[arg(long)]
    pub endpoint: Option<String>,
    /// WMS layer [key: layer; env CROSSVIEW_WMS_LAYER]
    #[arg(long)]
    pub layer: Option<String>,
    /// Concurrent tile requests [key: max_in_flight, default 4]
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// [key: pairs, default 1000]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// [key: species, default 10]
    #[arg(long)]
    pub species: Option<usize>,
    /// [key: habitats, default 10]
    #[arg(long)]
    pub habitats: Option<usize>,
    /// [key: ground_size, default 32]
    #[arg(long)]
    pub ground_size: Option<usize>,
    /// [key: satellite_size, default 32]
    #[arg(long)]
    pub satellite_size: Option<usize>,
    /// [key: test_fraction, default 0.2]
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Also render region tiles on a grid with this step in degrees [key: region_step]
    #[arg(long)]
    pub region_step: Option<f64>,
    /// Habitats allowed in the region tiles, e.g. `0,1,2` [key: region_habitats, default all]
    #[arg(long)]
    pub region_habitats: Option<String>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory holding train.jsonl and test.jsonl
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// cve, cve-meta, cvm or cvm-meta [key: model.arch, default cvm-meta]
    #[arg(long)]
    pub arch: Option<String>,
    /// Model size preset, toy or desk [key: model.preset, default toy]
    #[arg(long)]
    pub preset: Option<String>,
    /// Continue from this checkpoint instead of a fresh model
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct SupervisedArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory holding train.jsonl and test.jsonl
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Pre-trained checkpoint
    #[arg(long, value_name = "FILE", required_unless_present = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Start from a randomly initialized backbone (baseline) instead of a checkpoint
    #[arg(long, conflicts_with = "checkpoint")]
    pub random_init: bool,
    /// Architecture for --random-init [key: model.arch]
    #[arg(long)]
    pub arch: Option<String>,
    /// Model preset for --random-init [key: model.preset]
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory holding train.jsonl and test.jsonl
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// probe or finetune [key: phase, default probe]
    #[arg(long)]
    pub phase: Option<String>,
    /// Comma-separated rates [key: rates, default 0,0.25,0.5,0.75,1]
    #[arg(long)]
    pub rates: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory holding train.jsonl and test.jsonl
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Dual-stream checkpoint used for embeddings
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Single-stream checkpoint whose matching head re-ranks the candidates
    #[arg(long, value_name = "FILE")]
    pub matcher: Option<PathBuf>,
    /// Reuse a ground index built from the same checkpoint
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
    /// train or test [key: split, default test]
    #[arg(long)]
    pub split: Option<String>,
    /// Results per query [key: k, default 10]
    #[arg(long)]
    pub k: Option<usize>,
    /// Stage-one candidates for re-ranking [key: candidates, default 100]
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dual-stream checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Ground-level query image
    #[arg(long, value_name = "FILE")]
    pub query_image: PathBuf,
    /// `min_lon,min_lat,max_lon,max_lat`
    #[arg(long, allow_hyphen_values = true)]
    pub bbox: String,
    /// Tile grid step in degrees
    #[arg(long)]
    pub step: f64,
    /// Raster cell size in degrees [key: resolution, default 0.01]
    #[arg(long)]
    pub resolution: Option<f64>,
    /// IDW power [key: power, default 2]
    #[arg(long)]
    pub power: Option<f64>,
    /// Pre-fetched tiles (directory with tiles.jsonl); otherwise tiles come from WMS
    #[arg(long, value_name = "DIR")]
    pub tiles: Option<PathBuf>,
    /// Month fused as metadata for -meta models [key: month]
    #[arg(long)]
    pub month: Option<u32>,
    /// [key: out_csv, default map.csv, relative to --out-dir]
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// [key: out_png, default map.png, relative to --out-dir]
    #[arg(long)]
    pub out_png: Option<PathBuf>,
    /// WMS tile side in meters [key: span_m, default 2560]
    #[arg(long)]
    pub span_m: Option<f64>,
    /// WMS tile side in pixels [key: pixels, default 256]
    #[arg(long)]
    pub pixels: Option<u32>,
    /// [key: endpoint; env CROSSVIEW_WMS_ENDPOINT]
    #[arg(long)]
    pub endpoint: Option<String>,
    /// [key: layer; env CROSSVIEW_WMS_LAYER]
    #[arg(long)]
    pub layer: Option<String>,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory holding train.jsonl and test.jsonl
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// [key: k, default 20]
    #[arg(long)]
    pub k: Option<usize>,
    /// [key: max_iters, default 100]
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory holding train.jsonl and test.jsonl
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// train or test [key: split, default test]
    #[arg(long)]
    pub split: Option<String>,
}
