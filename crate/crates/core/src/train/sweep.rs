use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CrossViewModel, CrossViewPair};
use crate::scalar::Scalar;
use crate::train::config::PhaseConfig;
use crate::train::phase::run_phase;

pub const DEFAULT_RATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const HEADER: [&'static str; 5] = ["meta_dropout", "accuracy", "macro_f1", "macro_precision", "macro_recall"];

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record([r.rate, r.accuracy, r.macro_f1, r.macro_precision, r.macro_recall].map(|v| v.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Rate with the best accuracy; the first such rate on ties.
    pub fn best_rate(&self) -> Option<f64> {
        self.rows.iter().fold(None::<&SweepRow>, |b, r| match b {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        }).map(|r| r.rate)
    }
}

/// Runs the supervised phase in `base` once per meta-dropout rate, each from
/// the same starting model, and tabulates test metrics in input order.
pub fn meta_dropout_sweep<F: Scalar>(
    base: &PhaseConfig,
    rates: &[f64],
    model: &CrossViewModel<F>,
    train: &[CrossViewPair<F>],
    test: &[CrossViewPair<F>],
    n_classes: usize,
) -> Result<SweepTable> {
    if !base.phase.is_supervised() {
        return Err(Error::Config("the meta-dropout sweep needs a probe or finetune phase".into()));
    }
    if !model.arch().uses_meta() {
        return Err(Error::UnsupportedArchitecture(format!("{} has no metadata branch to drop", model.arch())));
    }
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let cfg = PhaseConfig { meta_dropout_p: rate, ..base.clone() };
        let out = run_phase(&cfg, model.clone(), train, test, n_classes).map_err(|e| e.context(format!("meta-dropout rate {rate}")))?;
        let m = out.metrics.expect("supervised phases report metrics");
        rows.push(SweepRow { rate, accuracy: m.accuracy, macro_f1: m.macro_f1, macro_precision: m.macro_precision, macro_recall: m.macro_recall });
    }
    Ok(SweepTable { rows })
}
