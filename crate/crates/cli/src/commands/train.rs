use anyhow::{bail, Context, Result};
use crossview::data::Split;
use crossview::models::{Architecture, CrossViewModel, ModelConfig};
use crossview::train::{evaluate, meta_dropout_sweep, run_phase, set_model_key, Phase, PhaseConfig, DEFAULT_RATES};
use crossview::Scalar;
use serde_json::json;

use super::{checkpoint_precision, json_bytes, load_dataset, loss_csv, settings};
use crate::cli::{EvalArgs, Precision, PretrainArgs, SupervisedArgs, SweepArgs, TrainFlags};
use crate::run::Run;
use crate::settings::{flag, parse_list, Settings};

pub const CHECKPOINT: &str = "checkpoint.ckpt";

fn train_flags(t: &TrainFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("epochs", flag(&t.epochs)),
        ("base_lr", flag(&t.lr)),
        ("batch_size", flag(&t.batch_size)),
        ("weight_decay", flag(&t.weight_decay)),
        ("warmup_epochs", flag(&t.warmup_epochs)),
        ("mask_ratio", flag(&t.mask_ratio)),
        ("meta_dropout_p", flag(&t.meta_dropout)),
        ("workers", flag(&t.workers)),
    ]
}

/// Fresh model config from `model.preset` plus the `model.*` keys.
fn model_config(s: &mut Settings) -> Result<ModelConfig> {
    let arch = Architecture::CvmMeta;
    let mut mc = match s.take_string("model.preset").as_deref() {
        None | Some("toy") => ModelConfig::toy(arch),
        Some("desk") => ModelConfig::desk(arch),
        Some(other) => bail!("unknown model preset `{other}` (expected toy or desk)"),
    };
    if let Some(a) = s.take_string("model.arch") {
        mc.arch = Architecture::parse(&a)?;
    }
    Ok(mc)
}

/// Phase config from the remaining keys. `model.*` keys go to `model`, or are
/// rejected when the model comes from a checkpoint.
fn phase_config(s: &mut Settings, phase: Phase, seed: u64, mut model: Option<&mut ModelConfig>) -> Result<PhaseConfig> {
    let mut pc = PhaseConfig::defaults(phase);
    pc.seed = seed;
    for (k, v) in s.drain() {
        if let Some(mk) = k.strip_prefix("model.") {
            match model.as_deref_mut() {
                Some(m) => set_model_key(m, mk, &v)?,
                None => bail!("`{k}` is fixed by the checkpoint"),
            }
        } else if !pc.set(&k, &v)? {
            bail!("unknown setting `{k}` for {}", phase.name());
        }
    }
    if let Some(m) = model {
        m.validate()?;
    }
    pc.validate()?;
    Ok(pc)
}

pub fn pretrain(a: PretrainArgs, run: &mut Run) -> Result<()> {
    let mut flags = train_flags(&a.train);
    flags.push(("model.arch", a.arch.clone()));
    flags.push(("model.preset", a.preset.clone()));
    let (mut s, precision) = settings(&a.common, flags, &a.train.set, run)?;
    let (mut mc, precision) = match &a.init {
        Some(p) => {
            if s.take_string("model.preset").is_some() || s.take_string("model.arch").is_some() {
                bail!("--arch and --preset cannot be combined with --init");
            }
            (None, precision.map_or_else(|| checkpoint_precision(p), Ok)?)
        }
        None => (Some(model_config(&mut s)?), precision.unwrap_or(Precision::F64)),
    };
    let pc = phase_config(&mut s, Phase::Pretrain, run.seed, mc.as_mut())?;
    run.precision = Some(precision);
    match precision {
        Precision::F32 => pretrain_impl::<f32>(&a, pc, mc, run),
        Precision::F64 => pretrain_impl::<f64>(&a, pc, mc, run),
    }
}

fn pretrain_impl<F: Scalar>(a: &PretrainArgs, pc: PhaseConfig, mc: Option<ModelConfig>, run: &mut Run) -> Result<()> {
    let model = match (&a.init, mc) {
        (Some(path), _) => {
            run.input(path)?;
            CrossViewModel::<F>::load(path)?.0
        }
        (None, Some(mc)) => CrossViewModel::<F>::init(mc, pc.seed)?,
        (None, None) => unreachable!("fresh runs always carry a model config"),
    };
    run.config = json!({ "phase": pc, "model": model.config });
    let ds = load_dataset(&a.data, run)?;
    let train = ds.train.load_pairs::<F>(model.config.ground.image_size, model.config.satellite.image_size)?;
    let n_classes = ds.num_species();
    let out = run_phase(&pc, model, &train, &[], n_classes)?;
    run.write(CHECKPOINT, &out.model.to_bytes(Phase::Pretrain.name(), pc.seed)?)?;
    run.write("loss.csv", &loss_csv(&out.history)?)?;
    Ok(())
}

pub fn supervised(a: SupervisedArgs, phase: Phase, run: &mut Run) -> Result<()> {
    let mut flags = train_flags(&a.train);
    flags.push(("model.arch", a.arch.clone()));
    flags.push(("model.preset", a.preset.clone()));
    let (mut s, precision) = settings(&a.common, flags, &a.train.set, run)?;
    let (mut mc, precision) = match &a.checkpoint {
        Some(p) => {
            if s.take_string("model.preset").is_some() || s.take_string("model.arch").is_some() {
                bail!("--arch and --preset only apply with --random-init");
            }
            (None, precision.map_or_else(|| checkpoint_precision(p), Ok)?)
        }
        None => (Some(model_config(&mut s)?), precision.unwrap_or(Precision::F64)),
    };
    let pc = phase_config(&mut s, phase, run.seed, mc.as_mut())?;
    run.precision = Some(precision);
    match precision {
        Precision::F32 => supervised_impl::<f32>(&a, pc, mc, run),
        Precision::F64 => supervised_impl::<f64>(&a, pc, mc, run),
    }
}

fn supervised_impl<F: Scalar>(a: &SupervisedArgs, pc: PhaseConfig, mc: Option<ModelConfig>, run: &mut Run) -> Result<()> {
    let model = match (&a.checkpoint, mc) {
        (Some(path), _) => {
            run.input(path)?;
            CrossViewModel::<F>::load(path)?.0
        }
        (None, Some(mc)) => CrossViewModel::<F>::init(mc, pc.seed)?,
        (None, None) => unreachable!("random-init runs always carry a model config"),
    };
    run.config = json!({ "phase": pc, "model": model.config });
    let ds = load_dataset(&a.data, run)?;
    let (g, s) = (model.config.ground.image_size, model.config.satellite.image_size);
    let train = ds.train.load_pairs::<F>(g, s)?;
    let test = ds.test.load_pairs::<F>(g, s)?;
    let out = run_phase(&pc, model, &train, &test, ds.num_species())?;
    run.write(CHECKPOINT, &out.model.to_bytes(pc.phase.name(), pc.seed)?)?;
    run.write("loss.csv", &loss_csv(&out.history)?)?;
    let metrics = out.metrics.context("supervised phases report metrics")?;
    run.write("metrics.json", &json_bytes(&metrics)?)?;
    println!("{} accuracy {:.4} macro-F1 {:.4}", pc.phase.name(), metrics.accuracy, metrics.macro_f1);
    Ok(())
}

pub fn sweep(a: SweepArgs, run: &mut Run) -> Result<()> {
    let mut flags = train_flags(&a.train);
    flags.push(("phase", a.phase.clone()));
    flags.push(("rates", a.rates.clone()));
    let (mut s, precision) = settings(&a.common, flags, &a.train.set, run)?;
    let phase = Phase::parse(&s.take_string("phase").unwrap_or_else(|| "probe".into()))?;
    if !phase.is_supervised() {
        bail!("the sweep runs probe or finetune, not {}", phase.name());
    }
    let rates = match s.take_string("rates") {
        Some(text) => parse_list::<f64>("rates", &text)?,
        None => DEFAULT_RATES.to_vec(),
    };
    let pc = phase_config(&mut s, phase, run.seed, None)?;
    let precision = precision.map_or_else(|| checkpoint_precision(&a.checkpoint), Ok)?;
    run.precision = Some(precision);
    match precision {
        Precision::F32 => sweep_impl::<f32>(&a, pc, &rates, run),
        Precision::F64 => sweep_impl::<f64>(&a, pc, &rates, run),
    }
}

fn sweep_impl<F: Scalar>(a: &SweepArgs, pc: PhaseConfig, rates: &[f64], run: &mut Run) -> Result<()> {
    run.input(&a.checkpoint)?;
    let (model, _) = CrossViewModel::<F>::load(&a.checkpoint)?;
    run.config = json!({ "phase": pc, "rates": rates, "model": model.config });
    let ds = load_dataset(&a.data, run)?;
    let (g, s) = (model.config.ground.image_size, model.config.satellite.image_size);
    let train = ds.train.load_pairs::<F>(g, s)?;
    let test = ds.test.load_pairs::<F>(g, s)?;
    let table = meta_dropout_sweep(&pc, rates, &model, &train, &test, ds.num_species())?;
    run.write("sweep.csv", &table.to_csv()?)?;
    Ok(())
}

pub fn eval(a: EvalArgs, run: &mut Run) -> Result<()> {
    let (mut s, precision) = settings(&a.common, vec![("split", a.split.clone())], &[], run)?;
    let split = parse_split(&s.take_string("split").unwrap_or_else(|| "test".into()))?;
    s.finish()?;
    let precision = precision.map_or_else(|| checkpoint_precision(&a.checkpoint), Ok)?;
    run.precision = Some(precision);
    match precision {
        Precision::F32 => eval_impl::<f32>(&a, split, run),
        Precision::F64 => eval_impl::<f64>(&a, split, run),
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => bail!("split must be train or test, got `{s}`"),
    }
}

fn eval_impl<F: Scalar>(a: &EvalArgs, split: Split, run: &mut Run) -> Result<()> {
    run.input(&a.checkpoint)?;
    let (model, header) = CrossViewModel::<F>::load(&a.checkpoint)?;
    let phase = Phase::parse(&header.phase)?;
    let Some(n_classes) = model.num_classes().filter(|_| phase.is_supervised()) else {
        bail!("checkpoint {} has no classification head; run probe or finetune first", a.checkpoint.display());
    };
    run.config = json!({ "split": split.name(), "phase": phase, "model": model.config });
    let ds = load_dataset(&a.data, run)?;
    let manifest = match split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    let pairs = manifest.load_pairs::<F>(model.config.ground.image_size, model.config.satellite.image_size)?;
    let metrics = evaluate(&model, &pairs, phase, n_classes)?;
    run.write("metrics.json", &json_bytes(&metrics)?)?;
    println!("{} accuracy {:.4} macro-F1 {:.4}", split.name(), metrics.accuracy, metrics.macro_f1);
    Ok(())
}
