//! Embedding indexes, exact top-k retrieval, two-stage re-ranking and
//! species-level recall.

use std::cmp::Ordering;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::RawMetadata;
use crate::models::{embed_ground, embed_satellite, match_probability, CrossViewModel};
use crate::pixels::Image;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CVINDEX1";
/// Images embedded per forward graph when building an index.
const BUILD_BATCH: usize = 64;
pub const DEFAULT_CANDIDATES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ground,
    Satellite,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Ground => "ground",
            Modality::Satellite => "satellite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ground" => Ok(Modality::Ground),
            "satellite" => Ok(Modality::Satellite),
            _ => Err(Error::Config(format!("unknown modality `{s}`"))),
        }
    }

    fn code(self) -> u8 {
        match self {
            Modality::Ground => 0,
            Modality::Satellite => 1,
        }
    }
}

/// Unit-norm embeddings stored row-major in single precision, with parallel
/// id and species tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    species: Vec<u32>,
    pub modality: Modality,
    /// Hash of the checkpoint the embeddings came from.
    pub checkpoint_hash: String,
}

impl EmbeddingIndex {
    /// Rows are normalized here; zero rows are rejected.
    pub fn from_rows(rows: Vec<Vec<f32>>, ids: Vec<String>, species: Vec<u32>, modality: Modality, checkpoint_hash: String) -> Result<Self> {
        if rows.len() != ids.len() || ids.len() != species.len() {
            return Err(Error::Shape(format!("{} rows, {} ids, {} species", rows.len(), ids.len(), species.len())));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (row, id) in rows.iter().zip(&ids) {
            if row.len() != dim {
                return Err(Error::Shape(format!("row `{id}` has {} values, expected {dim}", row.len())));
            }
            let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Numeric(format!("embedding `{id}` has norm {norm}")));
            }
            data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        let mut sorted: Vec<&String> = ids.iter().collect();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!("duplicate index id `{}`", w[0])));
        }
        Ok(Self { dim, data, ids, species, modality, checkpoint_hash })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn species(&self) -> &[u32] {
        &self.species
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.write_u64::<LittleEndian>(self.len() as u64).expect("vec write");
        out.write_u32::<LittleEndian>(self.dim as u32).expect("vec write");
        out.push(self.modality.code());
        write_str(&mut out, &self.checkpoint_hash);
        for &v in &self.data {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
        for (id, &s) in self.ids.iter().zip(&self.species) {
            write_str(&mut out, id);
            out.write_u32::<LittleEndian>(s).expect("vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.into(), reason };
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad("not an embedding index".into()));
        }
        let parse = |r: &mut Cursor<&[u8]>| -> std::io::Result<Self> {
            let count = r.read_u64::<LittleEndian>()? as usize;
            let dim = r.read_u32::<LittleEndian>()? as usize;
            let modality = match r.read_u8()? {
                0 => Modality::Ground,
                1 => Modality::Satellite,
                m => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, format!("modality code {m}"))),
            };
            let checkpoint_hash = read_str(r)?;
            let remaining = r.get_ref().len() as u64 - r.position();
            if (count as u64).saturating_mul(dim as u64).saturating_mul(4) > remaining {
                return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "matrix truncated"));
            }
            let mut data = vec![0f32; count * dim];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            let mut ids = Vec::with_capacity(count);
            let mut species = Vec::with_capacity(count);
            for _ in 0..count {
                ids.push(read_str(r)?);
                species.push(r.read_u32::<LittleEndian>()?);
            }
            Ok(Self { dim, data, ids, species, modality, checkpoint_hash })
        };
        let index = parse(&mut r).map_err(|e| bad(e.to_string()))?;
        if r.position() != bytes.len() as u64 {
            return Err(bad("trailing bytes".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(format!("reading index {}", path.display())))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Cursor<&[u8]>) -> std::io::Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n as u64 > r.get_ref().len() as u64 - r.position() {
        return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "string truncated"));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// One image to embed.
#[derive(Clone, Debug)]
pub struct IndexItem<'a, F> {
    pub id: &'a str,
    pub species: u32,
    pub image: &'a Image<F>,
    /// Fused for satellite embeddings of `-meta` models.
    pub meta: Option<RawMetadata>,
}

/// Embeds `items` with a dual-stream model. Batches run on scoped threads;
/// row order follows `items`.
pub fn build_index<F: Scalar>(
    model: &CrossViewModel<F>,
    items: &[IndexItem<'_, F>],
    modality: Modality,
    checkpoint_hash: &str,
) -> Result<EmbeddingIndex> {
    if !model.config.arch.is_dual_stream() {
        return Err(Error::UnsupportedArchitecture(format!(
            "{} checkpoints have no uni-modal embeddings",
            model.config.arch
        )));
    }
    let embed = |chunk: &[IndexItem<'_, F>]| -> Result<Vec<Vec<f32>>> {
        let images: Vec<Image<F>> = chunk.iter().map(|it| it.image.clone()).collect();
        let m = match modality {
            Modality::Ground => embed_ground(model, &images)?,
            Modality::Satellite => {
                let metas: Vec<Option<RawMetadata>> = chunk.iter().map(|it| it.meta).collect();
                embed_satellite(model, &images, &metas)?
            }
        };
        Ok((0..m.rows()).map(|i| m.row(i).iter().map(|v| v.to_f32().expect("finite embedding")).collect()).collect())
    };
    let chunks: Vec<&[IndexItem<'_, F>]> = items.chunks(BUILD_BATCH).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len()).max(1);
    let mut parts: Vec<Option<Result<Vec<Vec<f32>>>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let chunks = &chunks;
                let embed = &embed;
                s.spawn(move || (t..chunks.len()).step_by(threads).map(|c| (c, embed(chunks[c]))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (c, part) in h.join().expect("index worker panicked") {
                parts[c] = Some(part);
            }
        }
    });
    let mut rows = Vec::with_capacity(items.len());
    for part in parts {
        rows.extend(part.expect("every chunk embedded")?);
    }
    EmbeddingIndex::from_rows(
        rows,
        items.iter().map(|it| it.id.to_string()).collect(),
        items.iter().map(|it| it.species).collect(),
        modality,
        checkpoint_hash.to_string(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ids: Vec<String>,
    /// Descending.
    pub scores: Vec<f64>,
}

pub fn score(query: &[f32], row: &[f32]) -> f64 {
    query.iter().zip(row).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact top-k by dot product; ties go to the smaller id.
pub fn unimodal_retrieve(query_id: &str, query: &[f32], index: &EmbeddingIndex, k: usize) -> Result<RetrievalResult> {
    if k > index.len() {
        return Err(Error::range("k", format!("{k} exceeds the {} indexed items", index.len())));
    }
    if query.len() != index.dim() {
        return Err(Error::Shape(format!("query has {} dims, index has {}", query.len(), index.dim())));
    }
    let mut scored: Vec<(f64, usize)> = (0..index.len()).map(|i| (score(query, index.row(i)), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| rank_order((a.0, &index.ids[a.1]), (b.0, &index.ids[b.1]));
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, cmp);
    }
    scored.truncate(k);
    scored.sort_by(cmp);
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        ids: scored.iter().map(|&(_, i)| index.ids[i].clone()).collect(),
        scores: scored.iter().map(|&(s, _)| s).collect(),
    })
}

/// A ground observation available for re-ranking, parallel to the index rows.
#[derive(Clone, Debug)]
pub struct CorpusItem<'a, F> {
    pub image: &'a Image<F>,
    pub meta: Option<RawMetadata>,
}

/// Satellite query against a ground corpus: top-`m` by embedding similarity,
/// then the `k` best by matching probability (ties by stage-one score, then id).
#[allow(clippy::too_many_arguments)]
pub fn hierarchical_retrieve<F: Scalar>(
    query_id: &str,
    query_satellite: &Image<F>,
    query_meta: Option<RawMetadata>,
    corpus: &[CorpusItem<'_, F>],
    index: &EmbeddingIndex,
    embedder: &CrossViewModel<F>,
    matcher: &CrossViewModel<F>,
    m: usize,
    k: usize,
) -> Result<RetrievalResult> {
    if k > m {
        return Err(Error::range("k", format!("{k} exceeds the {m} stage-one candidates")));
    }
    if corpus.len() != index.len() {
        return Err(Error::Shape(format!("corpus has {} items, index has {}", corpus.len(), index.len())));
    }
    if index.modality != Modality::Ground {
        return Err(Error::Contract("hierarchical retrieval needs a ground-image index".into()));
    }
    if matcher.config.arch.is_dual_stream() {
        return Err(Error::UnsupportedArchitecture(format!("{} has no matching head", matcher.config.arch)));
    }
    let q = embed_satellite(embedder, std::slice::from_ref(query_satellite), &[query_meta])?;
    let q: Vec<f32> = q.row(0).iter().map(|v| v.to_f32().expect("finite embedding")).collect();
    let stage1 = unimodal_retrieve(query_id, &q, index, m)?;
    let mut reranked = Vec::with_capacity(m);
    for (id, &s1) in stage1.ids.iter().zip(&stage1.scores) {
        let pos = index.position(id).expect("stage-one ids come from the index");
        let item = &corpus[pos];
        let p = match_probability(matcher, item.image, query_satellite, item.meta.as_ref())?;
        reranked.push((p.to_f64().expect("finite probability"), s1, id.clone()));
    }
    reranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| b.1.total_cmp(&a.1)).then_with(|| a.2.cmp(&b.2)));
    reranked.truncate(k);
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        ids: reranked.iter().map(|r| r.2.clone()).collect(),
        scores: reranked.iter().map(|r| r.0).collect(),
    })
}

/// Fraction of queries whose top `k` contains an item of the query species.
pub fn recall_at_k(results: &[RetrievalResult], query_species: &[u32], index: &EmbeddingIndex, k: usize) -> Result<f64> {
    if results.len() != query_species.len() {
        return Err(Error::Shape(format!("{} results vs {} query species", results.len(), query_species.len())));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (res, &s) in results.iter().zip(query_species) {
        if k > res.ids.len() {
            return Err(Error::range("k", format!("{k} exceeds the {} ranked ids of `{}`", res.ids.len(), res.query_id)));
        }
        let mut hit = false;
        for id in &res.ids[..k] {
            let pos = index.position(id).ok_or_else(|| Error::Contract(format!("result id `{id}` is not in the index")))?;
            if index.species[pos] == s {
                hit = true;
                break;
            }
        }
        hits += usize::from(hit);
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Retrieval results as `query_id,rank,id,score` CSV, ranks starting at 1.
pub fn results_to_csv(results: &[RetrievalResult]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["query_id", "rank", "id", "score"])?;
    for r in results {
        for (rank, (id, s)) in r.ids.iter().zip(&r.scores).enumerate() {
            w.write_record([r.query_id.as_str(), &(rank + 1).to_string(), id, &format!("{s:.9}")])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
