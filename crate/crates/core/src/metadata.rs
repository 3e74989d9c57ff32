//! Acquisition metadata: periodic encoding, linear embedding, meta-dropout and
//! fusion into class-token embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Number of periodic features: `[sin_lon, cos_lon, sin_lat, cos_lat, sin_month, cos_month]`.
pub const META_FEATURES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMetadata {
    pub latitude: f64,
    pub longitude: f64,
    /// 1 = January.
    pub month: u32,
}

impl RawMetadata {
    pub fn new(latitude: f64, longitude: f64, month: u32) -> Result<Self> {
        let m = Self { latitude, longitude, month };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::range("latitude", self.latitude));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::range("longitude", self.longitude));
        }
        if !(1..=12).contains(&self.month) {
            return Err(Error::range("month", self.month));
        }
        Ok(())
    }
}

/// Sin-cos features in fixed `[lon, lat, month]` pair order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaFeature<F> {
    pub values: [F; META_FEATURES],
}

impl<F: Scalar> MetaFeature<F> {
    pub fn as_matrix(&self) -> Matrix<F> {
        Matrix::row_vector(self.values.to_vec())
    }
}

/// Linear `6 → d` embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaEmbedderParams<F> {
    /// `6 × d`.
    pub weight: Matrix<F>,
    /// `1 × d`.
    pub bias: Matrix<F>,
}

impl<F: Scalar> MetaEmbedderParams<F> {
    pub fn from_store(store: &ParamStore<F>, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .get(&format!("{prefix}.{n}"))
                .cloned()
                .ok_or_else(|| Error::Shape(format!("missing parameter `{prefix}.{n}`")))
        };
        Ok(Self { weight: get("weight")?, bias: get("bias")? })
    }

    pub fn dim(&self) -> usize {
        self.bias.cols()
    }
}

pub fn init_meta_embedder<F: Scalar>(store: &mut ParamStore<F>, seed: u64, prefix: &str, dim: usize) {
    store.init_trunc_normal(seed, &format!("{prefix}.weight"), META_FEATURES, dim);
    store.init_zeros(&format!("{prefix}.bias"), 1, dim);
}

pub fn encode_metadata<F: Scalar>(meta: &RawMetadata) -> Result<MetaFeature<F>> {
    meta.validate()?;
    let pi = std::f64::consts::PI;
    let lon = pi * meta.longitude / 180.0;
    let lat = pi * meta.latitude / 90.0;
    let month = pi * f64::from(meta.month) / 12.0;
    Ok(MetaFeature {
        values: [lon.sin(), lon.cos(), lat.sin(), lat.cos(), month.sin(), month.cos()].map(F::of),
    })
}

/// `weightᵀ · feat + bias`.
pub fn embed_metadata<F: Scalar>(feat: &MetaFeature<F>, params: &MetaEmbedderParams<F>) -> Result<Vec<F>> {
    if params.weight.rows() != META_FEATURES || params.bias.shape() != (1, params.weight.cols()) {
        return Err(Error::Shape(format!(
            "meta embedder weight {:?} bias {:?}",
            params.weight.shape(),
            params.bias.shape()
        )));
    }
    Ok(feat.as_matrix().matmul(&params.weight).as_slice().iter().zip(params.bias.as_slice()).map(|(&a, &b)| a + b).collect())
}

/// Decides whether a sample keeps its metadata. Training mode consumes exactly
/// one draw per call regardless of `p`; eval mode consumes none.
pub fn meta_dropout_keep<R: Rng + ?Sized>(p: f64, training: bool, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::range("meta_dropout_p", p));
    }
    if !training {
        return Ok(true);
    }
    let u: f64 = rng.random();
    Ok(u >= p)
}

/// Zeroes the embedding with probability `p` in training. Absent metadata
/// (`None`) always yields the zero vector.
pub fn apply_meta_dropout<F: Scalar, R: Rng + ?Sized>(
    embedding: Option<&[F]>,
    dim: usize,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Vec<F>> {
    let keep = meta_dropout_keep(p, training, rng)?;
    match embedding {
        Some(e) if keep => Ok(e.to_vec()),
        Some(e) => Ok(vec![F::zero(); e.len()]),
        None => Ok(vec![F::zero(); dim]),
    }
}

/// Elementwise sum of a class-token embedding and a metadata embedding.
pub fn fuse_metadata<F: Scalar>(cls: &[F], meta: &[F]) -> Result<Vec<F>> {
    if cls.len() != meta.len() {
        return Err(Error::Shape(format!("fuse {} vs {}", cls.len(), meta.len())));
    }
    Ok(cls.iter().zip(meta).map(|(&a, &b)| a + b).collect())
}

/// Graph form of `embed ∘ encode`: a `1 × d` node.
pub fn meta_embedding_var<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    meta: &RawMetadata,
) -> Result<Var> {
    let feat = g.input(encode_metadata::<F>(meta)?.as_matrix());
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.linear(feat, w, b)
}

/// Adds the metadata embedding to a `1 × d` class-token node when metadata is
/// present and survives dropout; otherwise returns the class token untouched.
pub fn fuse_metadata_var<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    cls: Var,
    meta: Option<&RawMetadata>,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let Some(meta) = meta else { return Ok(cls) };
    if !meta_dropout_keep(p, training, rng)? {
        return Ok(cls);
    }
    let e = meta_embedding_var(g, store, prefix, meta)?;
    g.add(cls, e)
}
