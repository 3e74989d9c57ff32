use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::data::augment::{mix_batch, smoothed_targets, AugmentPolicy};
use crate::error::{Error, Result};
use crate::models::{classify, pretrain_forward, ClassifyPhase, CrossViewModel, CrossViewPair, ForwardOptions};
use crate::rng::{stream, ForwardRngs, StreamRng, AUGMENT, MASK, META_DROPOUT, SHUFFLE};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::train::config::{Phase, PhaseConfig};
use crate::train::metrics::{compute_metrics, MetricReport};
use crate::train::optim::{adamw_step, AdamWState};
use crate::train::schedule::lr_at;

pub const L_CLS: &str = "L_cls";
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of each loss component over the epoch's batches.
    pub components: BTreeMap<String, f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome<F> {
    pub model: CrossViewModel<F>,
    pub history: Vec<EpochRecord>,
    /// Test-split metrics for supervised phases.
    pub metrics: Option<MetricReport>,
}

fn classify_phase(p: Phase) -> ClassifyPhase {
    if p == Phase::Probe {
        ClassifyPhase::Probe
    } else {
        ClassifyPhase::Finetune
    }
}

/// Consecutive chunks of `order`, dropping a final chunk smaller than `min_size`.
fn batches(batch_size: usize, min_size: usize, order: &[usize]) -> Vec<Vec<usize>> {
    order.chunks(batch_size).filter(|c| c.len() >= min_size).map(<[usize]>::to_vec).collect()
}

fn augment_batch<F: Scalar>(src: &[&CrossViewPair<F>], cfg: &PhaseConfig, rng: &mut StreamRng) -> Vec<CrossViewPair<F>> {
    src.iter()
        .map(|p| CrossViewPair {
            ground: cfg.ground_policy.apply(&p.ground, rng),
            satellite: cfg.satellite_policy.apply(&p.satellite, rng),
            meta: p.meta,
            species: p.species,
        })
        .collect()
}

fn labels_of<F>(pairs: &[CrossViewPair<F>], n_classes: usize) -> Result<Vec<usize>> {
    pairs
        .iter()
        .map(|p| match p.species {
            Some(s) if s < n_classes => Ok(s),
            Some(s) => Err(Error::Contract(format!("species {s} outside {n_classes} classes"))),
            None => Err(Error::Contract("supervised phase needs species labels".into())),
        })
        .collect()
}

struct StepResult<F> {
    grads: Gradients<F>,
    components: BTreeMap<String, f64>,
}

/// Forward and backward over one (already augmented) batch.
fn step<F: Scalar>(
    cfg: &PhaseConfig,
    model: &CrossViewModel<F>,
    batch: &[CrossViewPair<F>],
    n_classes: usize,
    fwd: &mut ForwardRngs,
    aug: &mut StreamRng,
) -> Result<StepResult<F>> {
    match cfg.phase {
        Phase::Pretrain => {
            let opts = ForwardOptions { mask_ratio: cfg.mask_ratio, meta_dropout_p: cfg.meta_dropout_p, training: true, with_grads: true };
            let (out, grads) = pretrain_forward(model, batch, &opts, fwd)?;
            let components = out.loss_components.iter().map(|(k, v)| (k.clone(), v.to_f64_lossy())).collect();
            Ok(StepResult { grads, components })
        }
        Phase::Probe | Phase::Finetune => {
            let labels = labels_of(batch, n_classes)?;
            let mut targets = smoothed_targets::<F>(&labels, n_classes, cfg.label_smoothing)?;
            let mut batch = batch.to_vec();
            if cfg.mixing && cfg.ground_policy.mixes_batches() && batch.len() > 1 {
                let mut grounds: Vec<_> = batch.iter().map(|p| p.ground.clone()).collect();
                mix_batch(&mut grounds, &mut targets, aug)?;
                for (p, g) in batch.iter_mut().zip(grounds) {
                    p.ground = g;
                }
            }
            let out = classify(model, &batch, classify_phase(cfg.phase), cfg.meta_dropout_p, true, Some(&targets), &mut fwd.meta_dropout)?;
            let loss = out.loss.expect("targets given").to_f64_lossy();
            Ok(StepResult { grads: out.grads, components: BTreeMap::from([(L_CLS.to_string(), loss)]) })
        }
    }
}

fn accumulate<F: Scalar>(acc: &mut Gradients<F>, grads: Gradients<F>, weight: F) {
    for (name, mut g) in grads {
        g.scale(weight);
        match acc.get_mut(&name) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Data-parallel step: contiguous shards on worker threads, each with its own
/// derived rng streams; gradients and losses averaged by shard size.
fn parallel_step<F: Scalar>(
    cfg: &PhaseConfig,
    model: &CrossViewModel<F>,
    batch: &[CrossViewPair<F>],
    n_classes: usize,
    update: usize,
) -> Result<StepResult<F>> {
    let min = if cfg.phase == Phase::Pretrain { 2 } else { 1 };
    let shards = cfg.workers.min(batch.len() / min).max(1);
    let size = batch.len().div_ceil(shards);
    let results: Vec<Result<(usize, StepResult<F>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(size)
            .enumerate()
            .map(|(k, shard)| {
                s.spawn(move || {
                    let tag = format!("u{update}/w{k}");
                    let mut fwd = ForwardRngs { mask: stream(cfg.seed, &format!("{MASK}/{tag}")), meta_dropout: stream(cfg.seed, &format!("{META_DROPOUT}/{tag}")) };
                    let mut aug = stream(cfg.seed, &format!("{AUGMENT}/{tag}"));
                    step(cfg, model, shard, n_classes, &mut fwd, &mut aug).map(|r| (shard.len(), r))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut grads = Gradients::new();
    let mut components = BTreeMap::new();
    for r in results {
        let (n, r) = r?;
        let w = n as f64 / batch.len() as f64;
        accumulate(&mut grads, r.grads, F::of(w));
        for (k, v) in r.components {
            *components.entry(k).or_insert(0.0) += w * v;
        }
    }
    Ok(StepResult { grads, components })
}

/// Trains one phase. Supervised phases attach a fresh head unless the model
/// already has one of the right width, then report metrics on `test`.
///
/// With `workers == 1` the run is a pure function of the config, the initial
/// model and the data.
pub fn run_phase<F: Scalar>(
    cfg: &PhaseConfig,
    mut model: CrossViewModel<F>,
    train: &[CrossViewPair<F>],
    test: &[CrossViewPair<F>],
    n_classes: usize,
) -> Result<PhaseOutcome<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let supervised = cfg.phase.is_supervised();
    if supervised && model.num_classes() != Some(n_classes) {
        model.add_head(n_classes, cfg.seed);
    }
    let min_batch = if supervised { 1 } else { 2 };
    if train.len() < min_batch {
        return Err(Error::DegenerateBatch { needed: min_batch, got: train.len() });
    }
    let per_epoch = batches(cfg.batch_size, min_batch, &(0..train.len()).collect::<Vec<_>>()).len();
    let updates_per_epoch = per_epoch.div_ceil(cfg.steps_per_update);
    let total_updates = updates_per_epoch * cfg.epochs;

    let mut shuffle = stream(cfg.seed, SHUFFLE);
    let mut aug = stream(cfg.seed, AUGMENT);
    let mut fwd = ForwardRngs::new(cfg.seed);
    let mut opt = AdamWState::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut update = 0usize;
    let mut lr = cfg.base_lr;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle);
        let epoch_batches = batches(cfg.batch_size, min_batch, &order);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut acc = Gradients::new();
        let mut pending = 0usize;
        for (b, idx) in epoch_batches.iter().enumerate() {
            let ctx = || format!("{} epoch {epoch} step {b}", cfg.phase.name());
            let src: Vec<&CrossViewPair<F>> = idx.iter().map(|&i| &train[i]).collect();
            let result = if cfg.workers > 1 {
                let batch: Vec<CrossViewPair<F>> = src.iter().map(|&p| p.clone()).collect();
                let batch = augment_batch(&batch.iter().collect::<Vec<_>>(), cfg, &mut aug);
                parallel_step(cfg, &model, &batch, n_classes, update * cfg.steps_per_update + pending)
            } else {
                let batch = augment_batch(&src, cfg, &mut aug);
                step(cfg, &model, &batch, n_classes, &mut fwd, &mut aug)
            }
            .map_err(|e| e.context(ctx()))?;
            for (k, v) in &result.components {
                *sums.entry(k.clone()).or_insert(0.0) += v;
            }
            accumulate(&mut acc, result.grads, F::one());
            pending += 1;
            if pending == cfg.steps_per_update || b + 1 == epoch_batches.len() {
                if pending > 1 {
                    let w = F::one() / F::of_usize(pending);
                    for g in acc.values_mut() {
                        g.scale(w);
                    }
                }
                lr = lr_at(cfg, update, total_updates, updates_per_epoch)?;
                adamw_step(&mut model.params, &acc, &mut opt, lr, (cfg.beta1, cfg.beta2), cfg.weight_decay).map_err(|e| e.context(ctx()))?;
                acc = Gradients::new();
                pending = 0;
                update += 1;
            }
        }
        let n = epoch_batches.len().max(1) as f64;
        history.push(EpochRecord { epoch, components: sums.into_iter().map(|(k, v)| (k, v / n)).collect(), lr });
    }

    let metrics = if supervised {
        let mut m = evaluate(&model, test, cfg.phase, n_classes)?;
        m.loss_curves = history.iter().map(|h| h.components.clone()).collect();
        Some(m)
    } else {
        None
    };
    Ok(PhaseOutcome { model, history, metrics })
}

/// Predicted classes for `pairs` under evaluation transforms (normalization
/// only, metadata used when present, no dropout).
pub fn predict<F: Scalar>(model: &CrossViewModel<F>, pairs: &[CrossViewPair<F>], phase: Phase) -> Result<Vec<usize>> {
    let mut unused = stream(0, META_DROPOUT);
    let mut preds = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let batch: Vec<CrossViewPair<F>> = chunk
            .iter()
            .map(|p| CrossViewPair {
                ground: AugmentPolicy::Eval.apply(&p.ground, &mut unused),
                satellite: AugmentPolicy::Eval.apply(&p.satellite, &mut unused),
                meta: p.meta,
                species: p.species,
            })
            .collect();
        let out = classify(model, &batch, classify_phase(phase), 0.0, false, None, &mut unused)?;
        preds.extend((0..out.logits.rows()).map(|r| argmax(&out.logits, r)));
    }
    Ok(preds)
}

fn argmax<F: Scalar>(m: &Matrix<F>, r: usize) -> usize {
    let row = m.row(r);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Test-split metrics for a model with a classification head.
pub fn evaluate<F: Scalar>(model: &CrossViewModel<F>, pairs: &[CrossViewPair<F>], phase: Phase, n_classes: usize) -> Result<MetricReport> {
    let labels = labels_of(pairs, n_classes)?;
    let preds = predict(model, pairs, phase)?;
    compute_metrics(&preds, &labels, n_classes)
}
