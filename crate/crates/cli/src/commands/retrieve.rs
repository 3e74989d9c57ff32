use anyhow::{bail, Result};
use crossview::data::Split;
use crossview::models::{embed_satellite, CrossViewModel};
use crossview::retrieval::{
    build_index, hierarchical_retrieve, recall_at_k, results_to_csv, unimodal_retrieve, CorpusItem, EmbeddingIndex, IndexItem, Modality,
    DEFAULT_CANDIDATES,
};
use crossview::util::sha256_file;
use crossview::Scalar;
use serde_json::json;

use super::train::parse_split;
use super::{checkpoint_precision, json_bytes, load_dataset, settings};
use crate::cli::{Precision, RetrieveArgs};
use crate::run::Run;
use crate::settings::flag;

pub const INDEX: &str = "index.bin";
const RECALL_KS: [usize; 4] = [1, 5, 10, 20];

struct Plan {
    split: Split,
    k: usize,
    candidates: usize,
}

pub fn retrieve(a: RetrieveArgs, run: &mut Run) -> Result<()> {
    let flags = vec![("split", a.split.clone()), ("k", flag(&a.k)), ("candidates", flag(&a.candidates))];
    let (mut s, precision) = settings(&a.common, flags, &[], run)?;
    let split = parse_split(&s.take_string("split").unwrap_or_else(|| "test".into()))?;
    let k: usize = s.take_or("k", 10)?;
    let candidates: usize = s.take_or("candidates", DEFAULT_CANDIDATES)?;
    s.finish()?;
    if k == 0 {
        bail!("k must be at least 1");
    }
    let precision = precision.map_or_else(|| checkpoint_precision(&a.checkpoint), Ok)?;
    run.precision = Some(precision);
    let plan = Plan { split, k, candidates };
    match precision {
        Precision::F32 => retrieve_impl::<f32>(&a, plan, run),
        Precision::F64 => retrieve_impl::<f64>(&a, plan, run),
    }
}

/// Satellite views of `split` query the ground images of the train split.
fn retrieve_impl<F: Scalar>(a: &RetrieveArgs, plan: Plan, run: &mut Run) -> Result<()> {
    run.input(&a.checkpoint)?;
    let hash = sha256_file(&a.checkpoint)?;
    let (model, _) = CrossViewModel::<F>::load(&a.checkpoint)?;
    let matcher = match &a.matcher {
        Some(p) => {
            run.input(p)?;
            Some(CrossViewModel::<F>::load(p)?.0)
        }
        None => None,
    };
    let ds = load_dataset(&a.data, run)?;
    let (g, s) = (model.config.ground.image_size, model.config.satellite.image_size);
    let corpus_pairs = ds.train.load_pairs::<F>(g, s)?;
    let query_manifest = match plan.split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    let queries = query_manifest.load_pairs::<F>(g, s)?;

    let index = match &a.index {
        Some(path) => {
            run.input(path)?;
            let index = EmbeddingIndex::load(path)?;
            if index.checkpoint_hash != hash {
                bail!("index {} was built from a different checkpoint", path.display());
            }
            if index.modality != Modality::Ground || index.len() != corpus_pairs.len() {
                bail!("index {} does not cover the ground images of the train split", path.display());
            }
            index
        }
        None => {
            let items: Vec<IndexItem<'_, F>> = ds
                .train
                .rows
                .iter()
                .zip(&corpus_pairs)
                .map(|(r, p)| IndexItem { id: &r.id, species: r.species_id, image: &p.ground, meta: p.meta })
                .collect();
            let index = build_index(&model, &items, Modality::Ground, &hash)?;
            run.write(INDEX, &index.to_bytes())?;
            index
        }
    };
    let k = plan.k.min(index.len());
    let m = plan.candidates.clamp(k, index.len());
    run.config = json!({
        "split": plan.split.name(), "k": k, "candidates": m,
        "mode": if matcher.is_some() { "hierarchical" } else { "unimodal" },
        "model": model.config,
    });

    let mut results = Vec::with_capacity(queries.len());
    match &matcher {
        None => {
            let sats: Vec<_> = queries.iter().map(|q| q.satellite.clone()).collect();
            let metas: Vec<_> = queries.iter().map(|q| q.meta).collect();
            let emb = embed_satellite(&model, &sats, &metas)?;
            for (i, row) in query_manifest.rows.iter().enumerate() {
                let q: Vec<f32> = emb.row(i).iter().map(|v| v.to_f32().expect("finite embedding")).collect();
                results.push(unimodal_retrieve(&row.id, &q, &index, k)?);
            }
        }
        Some(matcher) => {
            let corpus: Vec<CorpusItem<'_, F>> = corpus_pairs.iter().map(|p| CorpusItem { image: &p.ground, meta: p.meta }).collect();
            for (row, q) in query_manifest.rows.iter().zip(&queries) {
                results.push(hierarchical_retrieve(&row.id, &q.satellite, q.meta, &corpus, &index, &model, matcher, m, k)?);
            }
        }
    }
    run.write("retrieval.csv", &results_to_csv(&results)?)?;
    let species: Vec<u32> = query_manifest.rows.iter().map(|r| r.species_id).collect();
    let mut recall = serde_json::Map::new();
    for rk in RECALL_KS.into_iter().filter(|&rk| rk <= k).chain((!RECALL_KS.contains(&k)).then_some(k)) {
        let v = recall_at_k(&results, &species, &index, rk)?;
        println!("recall@{rk} {v:.4}");
        recall.insert(format!("recall@{rk}"), json!(v));
    }
    run.write("recall.json", &json_bytes(&json!({ "queries": results.len(), "recall": recall }))?)?;
    Ok(())
}
