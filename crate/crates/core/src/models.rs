//! The two trainable cross-view architectures and their classification heads.
//!
//! * Dual-stream (`cve`, `cve-meta`): separate ground and satellite encoders
//!   trained with symmetric InfoNCE on class tokens, plus masked
//!   reconstruction of the ground image.
//! * Single-stream (`cvm`, `cvm-meta`): one joint encoder over concatenated
//!   ground and satellite tokens, trained with a ground–satellite matching
//!   head on batch-rolled negatives, plus masked reconstruction of both
//!   modalities through modality-specific decoders.
//!
//! `-meta` variants add an embedding of (lat, lon, month) to the class token:
//! the satellite class token for the dual-stream model, the joint class token
//! for the single-stream model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::metadata::{fuse_metadata_var, init_meta_embedder, RawMetadata};
use crate::objectives::{match_pairs, ReconScope, MATCH_EPS};
use crate::params::ParamStore;
use crate::pixels::Image;
use crate::rng::ForwardRngs;
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::vit::{
    decode_var, embed_patches, encode_var, init_blocks, init_decoder, init_encoder, init_linear, linear_var, patchify,
    random_mask, transformer, DecoderConfig, Encoded, EncoderConfig, MaskPlan, TokenSequence,
};

pub const L_C: &str = "L_c";
pub const L_R: &str = "L_r";
pub const L_M: &str = "L_m";
pub const L_TOTAL: &str = "L_total";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "cve")]
    Cve,
    #[serde(rename = "cve-meta")]
    CveMeta,
    #[serde(rename = "cvm")]
    Cvm,
    #[serde(rename = "cvm-meta")]
    CvmMeta,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Self::Cve, Self::CveMeta, Self::Cvm, Self::CvmMeta];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Cve => "cve",
            Self::CveMeta => "cve-meta",
            Self::Cvm => "cvm",
            Self::CvmMeta => "cvm-meta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == s).ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }

    pub fn uses_meta(self) -> bool {
        matches!(self, Self::CveMeta | Self::CvmMeta)
    }

    pub fn is_dual_stream(self) -> bool {
        matches!(self, Self::Cve | Self::CveMeta)
    }

    /// Same architecture with or without the metadata branch.
    pub fn with_meta(self, meta: bool) -> Self {
        match (self.is_dual_stream(), meta) {
            (true, true) => Self::CveMeta,
            (true, false) => Self::Cve,
            (false, true) => Self::CvmMeta,
            (false, false) => Self::Cvm,
        }
    }

    /// Parameter-name prefixes that make up the pre-trained backbone.
    pub fn backbone_prefixes(self) -> &'static [&'static str] {
        if self.is_dual_stream() {
            &["ground.", "satellite.", "decoder."]
        } else {
            &["joint.", "match_head.", "decoder_ground.", "decoder_satellite."]
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Full model description. In the single-stream model the joint encoder takes
/// its width, depth, heads and MLP ratio from `ground`; `satellite` only
/// contributes image and patch geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub ground: EncoderConfig,
    pub satellite: EncoderConfig,
    pub decoder: DecoderConfig,
    pub freeze_satellite: bool,
    pub temperature: f64,
    pub recon_scope: ReconScope,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn toy(arch: Architecture) -> Self {
        Self {
            arch,
            ground: EncoderConfig::toy_ground(),
            satellite: EncoderConfig::toy_satellite(),
            decoder: DecoderConfig::toy(),
            freeze_satellite: true,
            temperature: 1.0,
            recon_scope: ReconScope::MaskedOnly,
        }
    }

    /// Small CPU-friendly model for 32 px synthetic data, satellite unfrozen.
    pub fn desk(arch: Architecture) -> Self {
        let enc = EncoderConfig { image_size: 32, patch_size: 8, channels: 3, embed_dim: 32, depth: 2, heads: 4, mlp_ratio: 2.0, has_cls: true };
        Self {
            arch,
            ground: enc,
            satellite: enc,
            decoder: DecoderConfig { embed_dim: 16, depth: 1, heads: 2, mlp_ratio: 2.0 },
            freeze_satellite: false,
            temperature: 1.0,
            recon_scope: ReconScope::MaskedOnly,
        }
    }

    /// Width of the class token the heads and metadata embedder see.
    pub fn embed_dim(&self) -> usize {
        self.ground.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.ground.validate()?;
        self.satellite.validate()?;
        self.decoder.validate()?;
        if !self.ground.has_cls || !self.satellite.has_cls {
            return Err(Error::Config("encoders must carry a class token".into()));
        }
        if self.ground.embed_dim != self.satellite.embed_dim {
            return Err(Error::Config(format!(
                "ground width {} and satellite width {} must match",
                self.ground.embed_dim, self.satellite.embed_dim
            )));
        }
        if self.ground.channels != self.satellite.channels {
            return Err(Error::Config("ground and satellite channel counts differ".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::range("temperature", self.temperature));
        }
        Ok(())
    }
}

/// One ground-level image, its co-located satellite tile and optional metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossViewPair<F> {
    pub ground: Image<F>,
    pub satellite: Image<F>,
    pub meta: Option<RawMetadata>,
    pub species: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mask_ratio: f64,
    pub meta_dropout_p: f64,
    pub training: bool,
    /// Record a differentiable tape and return gradients.
    pub with_grads: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { mask_ratio: 0.75, meta_dropout_p: 0.25, training: true, with_grads: true }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOutput<F> {
    /// Normalized class tokens used by the contrastive term, `N × d`.
    pub cls_ground: Option<Matrix<F>>,
    pub cls_satellite: Option<Matrix<F>>,
    /// Joint class tokens of the positive pairs, `N × d`.
    pub cls_joint: Option<Matrix<F>>,
    pub match_logits: Option<Vec<F>>,
    pub loss_components: BTreeMap<String, F>,
    /// Per-sample predicted patches keyed by modality.
    pub reconstructions: BTreeMap<String, Vec<Matrix<F>>>,
    pub mask_plans: BTreeMap<String, Vec<MaskPlan>>,
}

impl<F: Scalar> ForwardOutput<F> {
    pub fn loss(&self, name: &str) -> Option<F> {
        self.loss_components.get(name).copied()
    }

    pub fn total(&self) -> F {
        self.loss_components[L_TOTAL]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossViewModel<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub arch: Architecture,
    pub scalar: String,
    pub model: ModelConfig,
    pub num_classes: Option<usize>,
    pub phase: String,
    pub seed: u64,
}

pub const CHECKPOINT_FORMAT: &str = "crossview-checkpoint";

impl<F: Scalar> CrossViewModel<F> {
    /// Freshly initialized backbone (no classification head).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let d = config.embed_dim();
        if config.arch.is_dual_stream() {
            init_encoder(&mut p, seed, "ground", &config.ground);
            init_encoder(&mut p, seed, "satellite", &config.satellite);
            init_decoder(&mut p, seed, "decoder", &config.decoder, d, config.ground.patch_dim());
        } else {
            let g = &config.ground;
            init_linear(&mut p, seed, "joint.ground_embed", g.patch_dim(), d);
            init_linear(&mut p, seed, "joint.satellite_embed", config.satellite.patch_dim(), d);
            p.init_trunc_normal(seed, "joint.type_ground", 1, d);
            p.init_trunc_normal(seed, "joint.type_satellite", 1, d);
            p.init_trunc_normal(seed, "joint.cls_token", 1, d);
            init_blocks(&mut p, seed, "joint", d, g.depth, g.mlp_ratio);
            init_linear(&mut p, seed, "match_head", d, 1);
            init_decoder(&mut p, seed, "decoder_ground", &config.decoder, d, g.patch_dim());
            init_decoder(&mut p, seed, "decoder_satellite", &config.decoder, d, config.satellite.patch_dim());
        }
        if config.arch.uses_meta() {
            init_meta_embedder(&mut p, seed, "meta", d);
        }
        Ok(Self { config, params: p })
    }

    pub fn arch(&self) -> Architecture {
        self.config.arch
    }

    /// Adds (or replaces) a linear classification head.
    pub fn add_head(&mut self, num_classes: usize, seed: u64) {
        init_linear(&mut self.params, seed, "head", self.config.embed_dim(), num_classes);
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.params.get("head.weight").map(Matrix::cols)
    }

    pub fn header(&self, phase: &str, seed: u64) -> CheckpointHeader {
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            arch: self.config.arch,
            scalar: F::NAME.into(),
            model: self.config.clone(),
            num_classes: self.num_classes(),
            phase: phase.into(),
            seed,
        }
    }

    pub fn to_bytes(&self, phase: &str, seed: u64) -> Result<Vec<u8>> {
        self.params.to_bytes(&serde_json::to_value(self.header(phase, seed))?)
    }

    pub fn save(&self, path: &Path, phase: &str, seed: u64) -> Result<()> {
        crate::util::write_atomic(path, &self.to_bytes(phase, seed)?)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (header, params) = ParamStore::<F>::load(path)?;
        let header: CheckpointHeader = serde_json::from_value(header)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format { path: path.into(), reason: format!("unexpected format `{}`", header.format) });
        }
        header.model.validate()?;
        Ok((Self { config: header.model.clone(), params }, header))
    }

    /// Tape with the configured freezes applied.
    fn graph(&self, with_grads: bool) -> Graph<F> {
        let mut g = if with_grads { Graph::new() } else { Graph::inference() };
        if self.config.arch.is_dual_stream() && self.config.freeze_satellite {
            g.freeze_prefix("satellite.");
        }
        g
    }
}

fn check_batch<F>(batch: &[CrossViewPair<F>]) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::DegenerateBatch { needed: 2, got: batch.len() });
    }
    Ok(())
}

fn mean_scalar<F: Scalar>(g: &mut Graph<F>, parts: &[Var]) -> Var {
    let s = g.sum_scalars(parts);
    g.scale(s, F::one() / F::of_usize(parts.len()))
}

fn grads_of<F: Scalar>(g: &Graph<F>, loss: Var, with: bool) -> Gradients<F> {
    if with {
        g.backward(loss)
    } else {
        Gradients::new()
    }
}

/// Class-token row of a single-modality encoder over the full image.
fn encoder_cls<F: Scalar>(g: &mut Graph<F>, p: &ParamStore<F>, prefix: &str, cfg: &EncoderConfig, img: &Image<F>) -> Result<Var> {
    let seq = patchify(img, cfg.patch_size)?;
    let enc = encode_var(g, p, prefix, cfg, &seq)?;
    g.rows(enc.tokens, 0..1)
}

/// Dual-stream forward: an unmasked pass for the contrastive term and a
/// masked pass of the ground encoder for reconstruction.
pub fn cve_forward<F: Scalar>(
    model: &CrossViewModel<F>,
    batch: &[CrossViewPair<F>],
    opts: &ForwardOptions,
    rngs: &mut ForwardRngs,
) -> Result<(ForwardOutput<F>, Gradients<F>)> {
    let cfg = &model.config;
    if !cfg.arch.is_dual_stream() {
        return Err(Error::UnsupportedArchitecture(format!("{} is not dual-stream", cfg.arch)));
    }
    check_batch(batch)?;
    let p = &model.params;
    let mut g = model.graph(opts.with_grads);

    let mut g_cls = Vec::with_capacity(batch.len());
    let mut s_cls = Vec::with_capacity(batch.len());
    for pair in batch {
        g_cls.push(encoder_cls(&mut g, p, "ground", &cfg.ground, &pair.ground)?);
        let s = encoder_cls(&mut g, p, "satellite", &cfg.satellite, &pair.satellite)?;
        let s = if cfg.arch.uses_meta() {
            fuse_metadata_var(&mut g, p, "meta", s, pair.meta.as_ref(), opts.meta_dropout_p, opts.training, &mut rngs.meta_dropout)?
        } else {
            s
        };
        s_cls.push(s);
    }
    let gm = g.concat_rows(&g_cls)?;
    let sm = g.concat_rows(&s_cls)?;
    let gn = g.l2_normalize_rows(gm);
    let sn = g.l2_normalize_rows(sm);
    let l_c = g.info_nce(gn, sn, F::of(cfg.temperature))?;

    let mut recon = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    let mut plans = Vec::with_capacity(batch.len());
    for pair in batch {
        let seq = patchify(&pair.ground, cfg.ground.patch_size)?;
        let plan = random_mask(seq.tokens.rows(), opts.mask_ratio, &mut rngs.mask)?;
        let enc = encode_var(&mut g, p, "ground", &cfg.ground, &seq.select(&plan.visible_idx))?;
        let pred = decode_var(&mut g, p, "decoder", &cfg.decoder, &enc, &plan, cfg.ground.grid())?;
        recon.push(g.masked_mse(pred, seq.tokens, cfg.recon_scope.rows(&plan))?);
        preds.push(pred);
        plans.push(plan);
    }
    let l_r = mean_scalar(&mut g, &recon);
    let total = g.sum_scalars(&[l_c, l_r]);

    let (vc, vr, vt) = (g.scalar(l_c), g.scalar(l_r), g.scalar(total));
    crate::objectives::total_loss_cve(vc, vr)?;
    let mut out = ForwardOutput {
        cls_ground: Some(g.value(gn).clone()),
        cls_satellite: Some(g.value(sn).clone()),
        ..Default::default()
    };
    out.loss_components.insert(L_C.into(), vc);
    out.loss_components.insert(L_R.into(), vr);
    out.loss_components.insert(L_TOTAL.into(), vt);
    out.reconstructions.insert("ground".into(), preds.iter().map(|&v| g.value(v).clone()).collect());
    out.mask_plans.insert("ground".into(), plans);
    let grads = grads_of(&g, total, opts.with_grads);
    Ok((out, grads))
}

/// Projected, position- and type-tagged tokens of each modality for the joint encoder.
fn joint_embed<F: Scalar>(
    g: &mut Graph<F>,
    p: &ParamStore<F>,
    cfg: &ModelConfig,
    ground: &TokenSequence<F>,
    satellite: &TokenSequence<F>,
) -> Result<(Var, Var)> {
    let d = cfg.embed_dim();
    let ge = embed_patches(g, p, "joint.ground_embed", ground, d, cfg.ground.grid())?;
    let gt = g.param(p, "joint.type_ground")?;
    let ge = g.add_row(ge, gt)?;
    let se = embed_patches(g, p, "joint.satellite_embed", satellite, d, cfg.satellite.grid())?;
    let st = g.param(p, "joint.type_satellite")?;
    let se = g.add_row(se, st)?;
    Ok((ge, se))
}

/// Runs the joint encoder over `[cls; ground; satellite]`.
fn joint_encode<F: Scalar>(g: &mut Graph<F>, p: &ParamStore<F>, cfg: &ModelConfig, ge: Var, se: Var) -> Result<Var> {
    let cls = g.param(p, "joint.cls_token")?;
    let x = g.concat_rows(&[cls, ge, se])?;
    transformer(g, p, "joint", x, cfg.ground.depth, cfg.ground.heads)
}

fn joint_cls<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    model: &CrossViewModel<F>,
    ge: Var,
    se: Var,
    meta: Option<&RawMetadata>,
    meta_p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let p = &model.params;
    let tokens = joint_encode(g, p, &model.config, ge, se)?;
    let cls = g.rows(tokens, 0..1)?;
    if model.config.arch.uses_meta() {
        fuse_metadata_var(g, p, "meta", cls, meta, meta_p, training, rng)
    } else {
        Ok(cls)
    }
}

/// Single-stream forward: a matching pass over `N` positives and `N`
/// batch-rolled negatives, then a masked pass reconstructing both modalities.
///
/// Negative pairs carry the metadata of their ground observation.
pub fn cvm_forward<F: Scalar>(
    model: &CrossViewModel<F>,
    batch: &[CrossViewPair<F>],
    opts: &ForwardOptions,
    rngs: &mut ForwardRngs,
) -> Result<(ForwardOutput<F>, Gradients<F>)> {
    let cfg = &model.config;
    if cfg.arch.is_dual_stream() {
        return Err(Error::UnsupportedArchitecture(format!("{} is not single-stream", cfg.arch)));
    }
    check_batch(batch)?;
    let p = &model.params;
    let mut g = model.graph(opts.with_grads);

    let g_seqs = batch.iter().map(|b| patchify(&b.ground, cfg.ground.patch_size)).collect::<Result<Vec<_>>>()?;
    let s_seqs = batch.iter().map(|b| patchify(&b.satellite, cfg.satellite.patch_size)).collect::<Result<Vec<_>>>()?;
    let mut g_emb = Vec::with_capacity(batch.len());
    let mut s_emb = Vec::with_capacity(batch.len());
    for (gs, ss) in g_seqs.iter().zip(&s_seqs) {
        let (ge, se) = joint_embed(&mut g, p, cfg, gs, ss)?;
        g_emb.push(ge);
        s_emb.push(se);
    }

    let pairs = match_pairs(batch.len())?;
    let mut logits = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    let mut joint_pos = Vec::with_capacity(batch.len());
    for mp in &pairs {
        let meta = batch[mp.ground].meta.as_ref();
        let cls = joint_cls(&mut g, model, g_emb[mp.ground], s_emb[mp.satellite], meta, opts.meta_dropout_p, opts.training, &mut rngs.meta_dropout)?;
        if mp.label == 1 {
            joint_pos.push(cls);
        }
        logits.push(linear_var(&mut g, p, "match_head", cls)?);
        labels.push(F::of(f64::from(mp.label)));
    }
    let logit_col = g.concat_rows(&logits)?;
    let l_m = g.bce_with_logits(logit_col, &labels, F::of(MATCH_EPS))?;

    let mut recon_g = Vec::with_capacity(batch.len());
    let mut recon_s = Vec::with_capacity(batch.len());
    let mut preds_g = Vec::with_capacity(batch.len());
    let mut preds_s = Vec::with_capacity(batch.len());
    let mut plans_g = Vec::with_capacity(batch.len());
    let mut plans_s = Vec::with_capacity(batch.len());
    for (gs, ss) in g_seqs.iter().zip(&s_seqs) {
        let pg = random_mask(gs.tokens.rows(), opts.mask_ratio, &mut rngs.mask)?;
        let ps = random_mask(ss.tokens.rows(), opts.mask_ratio, &mut rngs.mask)?;
        let (ge, se) = joint_embed(&mut g, p, cfg, &gs.select(&pg.visible_idx), &ss.select(&ps.visible_idx))?;
        let tokens = joint_encode(&mut g, p, cfg, ge, se)?;
        let (vg, vs) = (pg.visible_idx.len(), ps.visible_idx.len());
        let ground_part = g.gather(std::iter::once((tokens, 0)).chain((1..1 + vg).map(|r| (tokens, r))).collect())?;
        let sat_part = g.gather(std::iter::once((tokens, 0)).chain((1 + vg..1 + vg + vs).map(|r| (tokens, r))).collect())?;
        let enc_g = Encoded { tokens: ground_part, positions: pg.visible_idx.clone(), has_cls: true };
        let enc_s = Encoded { tokens: sat_part, positions: ps.visible_idx.clone(), has_cls: true };
        let yg = decode_var(&mut g, p, "decoder_ground", &cfg.decoder, &enc_g, &pg, cfg.ground.grid())?;
        let ys = decode_var(&mut g, p, "decoder_satellite", &cfg.decoder, &enc_s, &ps, cfg.satellite.grid())?;
        recon_g.push(g.masked_mse(yg, gs.tokens.clone(), cfg.recon_scope.rows(&pg))?);
        recon_s.push(g.masked_mse(ys, ss.tokens.clone(), cfg.recon_scope.rows(&ps))?);
        preds_g.push(yg);
        preds_s.push(ys);
        plans_g.push(pg);
        plans_s.push(ps);
    }
    let lg = mean_scalar(&mut g, &recon_g);
    let ls = mean_scalar(&mut g, &recon_s);
    let l_r = g.sum_scalars(&[lg, ls]);
    let total = g.sum_scalars(&[l_m, l_r]);

    let (vm, vr, vt) = (g.scalar(l_m), g.scalar(l_r), g.scalar(total));
    crate::objectives::total_loss_cvm(vm, vr)?;
    let joint = g.concat_rows(&joint_pos)?;
    let mut out = ForwardOutput {
        cls_joint: Some(g.value(joint).clone()),
        match_logits: Some(g.value(logit_col).as_slice().to_vec()),
        ..Default::default()
    };
    out.loss_components.insert(L_M.into(), vm);
    out.loss_components.insert(L_R.into(), vr);
    out.loss_components.insert(L_TOTAL.into(), vt);
    out.reconstructions.insert("ground".into(), preds_g.iter().map(|&v| g.value(v).clone()).collect());
    out.reconstructions.insert("satellite".into(), preds_s.iter().map(|&v| g.value(v).clone()).collect());
    out.mask_plans.insert("ground".into(), plans_g);
    out.mask_plans.insert("satellite".into(), plans_s);
    let grads = grads_of(&g, total, opts.with_grads);
    Ok((out, grads))
}

/// Dispatches to the architecture's pre-training forward.
pub fn pretrain_forward<F: Scalar>(
    model: &CrossViewModel<F>,
    batch: &[CrossViewPair<F>],
    opts: &ForwardOptions,
    rngs: &mut ForwardRngs,
) -> Result<(ForwardOutput<F>, Gradients<F>)> {
    if model.config.arch.is_dual_stream() {
        cve_forward(model, batch, opts, rngs)
    } else {
        cvm_forward(model, batch, opts, rngs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifyPhase {
    /// Frozen backbone, normalized embedding, linear head.
    Probe,
    /// Everything trainable, raw embedding.
    Finetune,
}

/// Class-token features a classification head consumes, one row per sample.
/// The dual-stream model classifies from the ground image; the single-stream
/// model from the (ground, satellite) pair.
fn classify_features<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    model: &CrossViewModel<F>,
    batch: &[CrossViewPair<F>],
    meta_p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let cfg = &model.config;
    let p = &model.params;
    let mut rows = Vec::with_capacity(batch.len());
    for pair in batch {
        let cls = if cfg.arch.is_dual_stream() {
            let cls = encoder_cls(g, p, "ground", &cfg.ground, &pair.ground)?;
            if cfg.arch.uses_meta() {
                fuse_metadata_var(g, p, "meta", cls, pair.meta.as_ref(), meta_p, training, rng)?
            } else {
                cls
            }
        } else {
            let gs = patchify(&pair.ground, cfg.ground.patch_size)?;
            let ss = patchify(&pair.satellite, cfg.satellite.patch_size)?;
            let (ge, se) = joint_embed(g, p, cfg, &gs, &ss)?;
            joint_cls(g, model, ge, se, pair.meta.as_ref(), meta_p, training, rng)?
        };
        rows.push(cls);
    }
    g.concat_rows(&rows)
}

/// Output of a classification pass.
pub struct ClassifyOutput<F> {
    pub logits: Matrix<F>,
    pub loss: Option<F>,
    pub grads: Gradients<F>,
}

/// Class logits, optionally with a soft-target cross-entropy loss and its gradients.
///
/// In probe phase the backbone (every prefix of
/// [`Architecture::backbone_prefixes`]) is frozen and features are
/// L2-normalized; the metadata embedder and head stay trainable.
pub fn classify<F: Scalar, R: Rng + ?Sized>(
    model: &CrossViewModel<F>,
    batch: &[CrossViewPair<F>],
    phase: ClassifyPhase,
    meta_p: f64,
    training: bool,
    targets: Option<&Matrix<F>>,
    rng: &mut R,
) -> Result<ClassifyOutput<F>> {
    let classes = model.num_classes().ok_or_else(|| Error::Shape("model has no classification head".into()))?;
    if let Some(t) = targets {
        if t.shape() != (batch.len(), classes) {
            return Err(Error::Shape(format!("targets {:?} for {} samples x {classes} classes", t.shape(), batch.len())));
        }
    }
    let with_grads = targets.is_some();
    let mut g = if with_grads { Graph::new() } else { Graph::inference() };
    if phase == ClassifyPhase::Probe {
        for prefix in model.config.arch.backbone_prefixes() {
            g.freeze_prefix(*prefix);
        }
    }
    let feats = classify_features(&mut g, model, batch, meta_p, training, rng)?;
    let feats = match phase {
        ClassifyPhase::Probe => g.l2_normalize_rows(feats),
        ClassifyPhase::Finetune => feats,
    };
    let logits = linear_var(&mut g, &model.params, "head", feats)?;
    let mut out = ClassifyOutput { logits: g.value(logits).clone(), loss: None, grads: Gradients::new() };
    if let Some(t) = targets {
        let loss = g.soft_cross_entropy(logits, t)?;
        out.loss = Some(g.scalar(loss));
        out.grads = g.backward(loss);
    }
    Ok(out)
}

/// Normalized ground class-token embeddings from a dual-stream model, `N × d`.
pub fn embed_ground<F: Scalar>(model: &CrossViewModel<F>, images: &[Image<F>]) -> Result<Matrix<F>> {
    require_dual(model)?;
    let mut g = Graph::inference();
    let rows = images
        .iter()
        .map(|img| encoder_cls(&mut g, &model.params, "ground", &model.config.ground, img))
        .collect::<Result<Vec<_>>>()?;
    let m = g.concat_rows(&rows)?;
    let n = g.l2_normalize_rows(m);
    Ok(g.value(n).clone())
}

/// Normalized satellite class-token embeddings, with metadata fused for
/// `-meta` models when supplied.
pub fn embed_satellite<F: Scalar>(model: &CrossViewModel<F>, images: &[Image<F>], metas: &[Option<RawMetadata>]) -> Result<Matrix<F>> {
    require_dual(model)?;
    if metas.len() != images.len() {
        return Err(Error::Shape(format!("{} images vs {} metadata entries", images.len(), metas.len())));
    }
    let mut g = Graph::inference();
    let mut unused = crate::rng::stream(0, crate::rng::META_DROPOUT);
    let mut rows = Vec::with_capacity(images.len());
    for (img, meta) in images.iter().zip(metas) {
        let cls = encoder_cls(&mut g, &model.params, "satellite", &model.config.satellite, img)?;
        let cls = if model.config.arch.uses_meta() {
            fuse_metadata_var(&mut g, &model.params, "meta", cls, meta.as_ref(), 0.0, false, &mut unused)?
        } else {
            cls
        };
        rows.push(cls);
    }
    let m = g.concat_rows(&rows)?;
    let n = g.l2_normalize_rows(m);
    Ok(g.value(n).clone())
}

/// Matching probability of a (ground, satellite) pair under a single-stream model.
pub fn match_probability<F: Scalar>(
    model: &CrossViewModel<F>,
    ground: &Image<F>,
    satellite: &Image<F>,
    meta: Option<&RawMetadata>,
) -> Result<F> {
    if model.config.arch.is_dual_stream() {
        return Err(Error::UnsupportedArchitecture(format!("{} has no matching head", model.config.arch)));
    }
    let cfg = &model.config;
    let mut g = Graph::inference();
    let gs = patchify(ground, cfg.ground.patch_size)?;
    let ss = patchify(satellite, cfg.satellite.patch_size)?;
    let (ge, se) = joint_embed(&mut g, &model.params, cfg, &gs, &ss)?;
    let mut unused = crate::rng::stream(0, crate::rng::META_DROPOUT);
    let cls = joint_cls(&mut g, model, ge, se, meta, 0.0, false, &mut unused)?;
    let logit = linear_var(&mut g, &model.params, "match_head", cls)?;
    Ok(sigmoid(g.scalar(logit)))
}

fn require_dual<F: Scalar>(model: &CrossViewModel<F>) -> Result<()> {
    if model.config.arch.is_dual_stream() {
        Ok(())
    } else {
        Err(Error::UnsupportedArchitecture(format!(
            "{} is cross-modal; uni-modal embeddings need a dual-stream model",
            model.config.arch
        )))
    }
}
