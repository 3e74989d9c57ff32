//! Vision-transformer building blocks: patch flattening, random masking,
//! pre-norm transformer encoders and the masked-patch decoder.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pixels::Image;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub has_cls: bool,
}

impl EncoderConfig {
    /// Ground-level toy default: 64 px images, 16 px patches.
    pub fn toy_ground() -> Self {
        Self { image_size: 64, patch_size: 16, channels: 3, embed_dim: 64, depth: 4, heads: 4, mlp_ratio: 4.0, has_cls: true }
    }

    /// Satellite toy default: 32 px tiles, 8 px patches.
    pub fn toy_satellite() -> Self {
        Self { image_size: 32, patch_size: 8, ..Self::toy_ground() }
    }

    /// ViT-B/16 at 224 px.
    pub fn vit_b16() -> Self {
        Self { image_size: 224, patch_size: 16, channels: 3, embed_dim: 768, depth: 12, heads: 12, mlp_ratio: 4.0, has_cls: true }
    }

    /// ViT-B/32 at 384 px.
    pub fn vit_b32() -> Self {
        Self { image_size: 384, patch_size: 32, ..Self::vit_b16() }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_dim(&self) -> usize {
        mlp_dim(self.embed_dim, self.mlp_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        validate_width(self.embed_dim, self.heads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl DecoderConfig {
    pub fn toy() -> Self {
        Self { embed_dim: 32, depth: 2, heads: 4, mlp_ratio: 4.0 }
    }

    pub fn validate(&self) -> Result<()> {
        validate_width(self.embed_dim, self.heads)
    }
}

fn validate_width(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("embed dim {dim} not divisible by {heads} heads")));
    }
    if dim % 4 != 0 {
        return Err(Error::Config(format!("embed dim {dim} must be a multiple of 4 for 2-D sin-cos positions")));
    }
    Ok(())
}

fn mlp_dim(dim: usize, ratio: f64) -> usize {
    ((dim as f64) * ratio).round().max(1.0) as usize
}

/// Token rows plus the source patch index of each non-class row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<F> {
    pub tokens: Matrix<F>,
    pub positions: Vec<usize>,
    pub has_cls: bool,
}

impl<F: Scalar> TokenSequence<F> {
    pub fn select(&self, idx: &[usize]) -> Self {
        debug_assert!(!self.has_cls);
        Self { tokens: self.tokens.select_rows(idx), positions: idx.iter().map(|&i| self.positions[i]).collect(), has_cls: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Plan that keeps every patch visible.
    pub fn none(num_patches: usize) -> Self {
        Self { visible_idx: (0..num_patches).collect(), masked_idx: Vec::new(), ratio: 0.0 }
    }
}

/// Flattens an image into row-major patches, each laid out `(py, px, c)`.
pub fn patchify<F: Scalar>(image: &Image<F>, patch_size: usize) -> Result<TokenSequence<F>> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!("{h}x{w} image not divisible into {patch_size}px patches")));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut tokens = Matrix::zeros(gh * gw, dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = tokens.row_mut(gy * gw + gx);
            for py in 0..patch_size {
                let y = gy * patch_size + py;
                let start = (y * w + gx * patch_size) * c;
                row[py * patch_size * c..(py + 1) * patch_size * c]
                    .copy_from_slice(&image.as_slice()[start..start + patch_size * c]);
            }
        }
    }
    Ok(TokenSequence { tokens, positions: (0..gh * gw).collect(), has_cls: false })
}

/// Inverse of [`patchify`] for a full, class-free sequence of a square image.
pub fn unpatchify<F: Scalar>(seq: &TokenSequence<F>, image_size: usize, patch_size: usize) -> Result<Image<F>> {
    if seq.has_cls || patch_size == 0 || image_size % patch_size != 0 {
        return Err(Error::Shape("unpatchify needs a class-free sequence and divisible sizes".into()));
    }
    let grid = image_size / patch_size;
    let p = grid * grid;
    let dim = seq.tokens.cols();
    if seq.tokens.rows() != p || dim % (patch_size * patch_size) != 0 {
        return Err(Error::Shape(format!("{} tokens of width {dim} for a {grid}x{grid} grid", seq.tokens.rows())));
    }
    let c = dim / (patch_size * patch_size);
    let mut seen = vec![false; p];
    let mut img = Image::zeros(image_size, image_size, c);
    for (r, &pos) in seq.positions.iter().enumerate() {
        if pos >= p || seen[pos] {
            return Err(Error::Shape(format!("bad or repeated patch position {pos}")));
        }
        seen[pos] = true;
        let (gy, gx) = (pos / grid, pos % grid);
        let row = seq.tokens.row(r);
        for py in 0..patch_size {
            let y = gy * patch_size + py;
            let start = (y * image_size + gx * patch_size) * c;
            img.as_mut_slice()[start..start + patch_size * c]
                .copy_from_slice(&row[py * patch_size * c..(py + 1) * patch_size * c]);
        }
    }
    Ok(img)
}

/// Uniformly random subset of `round(ratio · P)` masked patches. Both index
/// lists are returned sorted.
pub fn random_mask<R: Rng + ?Sized>(num_patches: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::range("mask_ratio", ratio));
    }
    if num_patches == 0 {
        return Err(Error::range("num_patches", 0));
    }
    let n_mask = (ratio * num_patches as f64).round() as usize;
    let mut perm: Vec<usize> = (0..num_patches).collect();
    perm.shuffle(rng);
    let mut masked_idx = perm[..n_mask].to_vec();
    let mut visible_idx = perm[n_mask..].to_vec();
    masked_idx.sort_unstable();
    visible_idx.sort_unstable();
    Ok(MaskPlan { visible_idx, masked_idx, ratio })
}

/// Fixed 2-D sin-cos embeddings, `grid² × dim`; first half encodes rows, second columns.
pub fn sincos_2d<F: Scalar>(dim: usize, grid: usize) -> Matrix<F> {
    let quarter = dim / 4;
    let mut out = Matrix::zeros(grid * grid, dim);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            for (half, pos) in [(0, gy), (1, gx)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let a = pos as f64 * omega;
                    row[half * dim / 2 + i] = F::of(a.sin());
                    row[half * dim / 2 + quarter + i] = F::of(a.cos());
                }
            }
        }
    }
    out
}

pub(crate) fn init_linear<F: Scalar>(store: &mut ParamStore<F>, seed: u64, prefix: &str, inp: usize, out: usize) {
    store.init_trunc_normal(seed, &format!("{prefix}.weight"), inp, out);
    store.init_zeros(&format!("{prefix}.bias"), 1, out);
}

pub(crate) fn init_norm<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, dim: usize) {
    store.init_ones(&format!("{prefix}.weight"), 1, dim);
    store.init_zeros(&format!("{prefix}.bias"), 1, dim);
}

pub(crate) fn init_blocks<F: Scalar>(store: &mut ParamStore<F>, seed: u64, prefix: &str, dim: usize, depth: usize, mlp_ratio: f64) {
    let hidden = mlp_dim(dim, mlp_ratio);
    for i in 0..depth {
        let b = format!("{prefix}.blocks.{i}");
        init_norm(store, &format!("{b}.norm1"), dim);
        init_linear(store, seed, &format!("{b}.attn.qkv"), dim, 3 * dim);
        init_linear(store, seed, &format!("{b}.attn.proj"), dim, dim);
        init_norm(store, &format!("{b}.norm2"), dim);
        init_linear(store, seed, &format!("{b}.mlp.fc1"), dim, hidden);
        init_linear(store, seed, &format!("{b}.mlp.fc2"), hidden, dim);
    }
    init_norm(store, &format!("{prefix}.norm"), dim);
}

/// Registers every parameter of a single-modality encoder under `prefix`.
pub fn init_encoder<F: Scalar>(store: &mut ParamStore<F>, seed: u64, prefix: &str, cfg: &EncoderConfig) {
    init_linear(store, seed, &format!("{prefix}.patch_embed"), cfg.patch_dim(), cfg.embed_dim);
    if cfg.has_cls {
        store.init_trunc_normal(seed, &format!("{prefix}.cls_token"), 1, cfg.embed_dim);
    }
    init_blocks(store, seed, prefix, cfg.embed_dim, cfg.depth, cfg.mlp_ratio);
}

/// Registers a decoder that maps `enc_dim` tokens back to `patch_dim` pixels.
pub fn init_decoder<F: Scalar>(store: &mut ParamStore<F>, seed: u64, prefix: &str, cfg: &DecoderConfig, enc_dim: usize, patch_dim: usize) {
    init_linear(store, seed, &format!("{prefix}.embed"), enc_dim, cfg.embed_dim);
    store.init_trunc_normal(seed, &format!("{prefix}.mask_token"), 1, cfg.embed_dim);
    init_blocks(store, seed, prefix, cfg.embed_dim, cfg.depth, cfg.mlp_ratio);
    init_linear(store, seed, &format!("{prefix}.pred"), cfg.embed_dim, patch_dim);
}

pub(crate) fn linear_var<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

pub(crate) fn norm_var<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, w, b)
}

/// Pre-norm transformer stack followed by the final layer norm.
pub fn transformer<F: Scalar>(g: &mut Graph<F>, store: &ParamStore<F>, prefix: &str, mut x: Var, depth: usize, heads: usize) -> Result<Var> {
    for i in 0..depth {
        let b = format!("{prefix}.blocks.{i}");
        let h = norm_var(g, store, &format!("{b}.norm1"), x)?;
        let qkv = linear_var(g, store, &format!("{b}.attn.qkv"), h)?;
        let a = g.attention(qkv, heads)?;
        let a = linear_var(g, store, &format!("{b}.attn.proj"), a)?;
        x = g.add(x, a)?;
        let h = norm_var(g, store, &format!("{b}.norm2"), x)?;
        let h = linear_var(g, store, &format!("{b}.mlp.fc1"), h)?;
        let h = g.gelu(h);
        let h = linear_var(g, store, &format!("{b}.mlp.fc2"), h)?;
        x = g.add(x, h)?;
    }
    norm_var(g, store, &format!("{prefix}.norm"), x)
}

/// Learned projection of raw patches plus fixed positional embeddings.
pub fn embed_patches<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    proj_prefix: &str,
    seq: &TokenSequence<F>,
    dim: usize,
    grid: usize,
) -> Result<Var> {
    let expected = store
        .get(&format!("{proj_prefix}.weight"))
        .map(Matrix::rows)
        .ok_or_else(|| Error::Shape(format!("missing parameter `{proj_prefix}.weight`")))?;
    if seq.tokens.cols() != expected {
        return Err(Error::Shape(format!("token width {} but projection expects {expected}", seq.tokens.cols())));
    }
    if let Some(&bad) = seq.positions.iter().find(|&&p| p >= grid * grid) {
        return Err(Error::Shape(format!("position {bad} outside a {grid}x{grid} grid")));
    }
    let x = g.input(seq.tokens.clone());
    let x = linear_var(g, store, proj_prefix, x)?;
    let pos = sincos_2d::<F>(dim, grid).select_rows(&seq.positions);
    let pos = g.input(pos);
    g.add(x, pos)
}

/// Encoder output on a graph.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: Var,
    pub positions: Vec<usize>,
    pub has_cls: bool,
}

/// Runs a single-modality encoder over patch tokens.
pub fn encode_var<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    seq: &TokenSequence<F>,
) -> Result<Encoded> {
    if seq.has_cls {
        return Err(Error::Shape("encoder input must not already carry a class token".into()));
    }
    let x = embed_patches(g, store, &format!("{prefix}.patch_embed"), seq, cfg.embed_dim, cfg.grid())?;
    let x = if cfg.has_cls {
        let cls = g.param(store, &format!("{prefix}.cls_token"))?;
        g.concat_rows(&[cls, x])?
    } else {
        x
    };
    let tokens = transformer(g, store, prefix, x, cfg.depth, cfg.heads)?;
    Ok(Encoded { tokens, positions: seq.positions.clone(), has_cls: cfg.has_cls })
}

/// Inference-only encoder returning concrete token values.
pub fn encode<F: Scalar>(seq: &TokenSequence<F>, store: &ParamStore<F>, prefix: &str, cfg: &EncoderConfig) -> Result<TokenSequence<F>> {
    let mut g = Graph::inference();
    let out = encode_var(&mut g, store, prefix, cfg, seq)?;
    Ok(TokenSequence { tokens: g.value(out.tokens).clone(), positions: out.positions, has_cls: out.has_cls })
}

/// Decodes visible encoder tokens into pixel predictions for every patch.
///
/// `visible` rows are `[cls?] + tokens at plan.visible_idx` in plan order. A
/// shared learned mask token fills masked positions; the class row, when
/// present, passes through the decoder and is dropped from the output.
pub fn decode_var<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    cfg: &DecoderConfig,
    visible: &Encoded,
    plan: &MaskPlan,
    grid: usize,
) -> Result<Var> {
    let p = grid * grid;
    if plan.num_patches() != p {
        return Err(Error::Shape(format!("mask plan covers {} patches, grid has {p}", plan.num_patches())));
    }
    if visible.positions != plan.visible_idx {
        return Err(Error::Shape("visible tokens do not match the mask plan".into()));
    }
    let offset = usize::from(visible.has_cls);
    let e = linear_var(g, store, &format!("{prefix}.embed"), visible.tokens)?;
    let mask = g.param(store, &format!("{prefix}.mask_token"))?;
    let mut slot = vec![None; p];
    for (i, &pos) in plan.visible_idx.iter().enumerate() {
        slot[pos] = Some(offset + i);
    }
    let mut parts = Vec::with_capacity(p + offset);
    if visible.has_cls {
        parts.push((e, 0));
    }
    parts.extend(slot.iter().map(|s| s.map_or((mask, 0), |r| (e, r))));
    let x = g.gather(parts)?;
    let mut pos = sincos_2d::<F>(cfg.embed_dim, grid);
    if visible.has_cls {
        let mut with_cls = Matrix::zeros(p + 1, cfg.embed_dim);
        for r in 0..p {
            with_cls.row_mut(r + 1).copy_from_slice(pos.row(r));
        }
        pos = with_cls;
    }
    let pos = g.input(pos);
    let x = g.add(x, pos)?;
    let x = transformer(g, store, prefix, x, cfg.depth, cfg.heads)?;
    let y = linear_var(g, store, &format!("{prefix}.pred"), x)?;
    if visible.has_cls {
        g.rows(y, 1..p + 1)
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn random_image(h: usize, w: usize, seed: u64) -> Image<f64> {
        let mut r = stream(seed, "img");
        Image::from_vec(h, w, 3, (0..h * w * 3).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn patchify_shapes() {
        let s = patchify(&Image::<f64>::zeros(224, 224, 3), 16).unwrap();
        assert_eq!(s.tokens.shape(), (196, 768));
        let s = patchify(&Image::<f32>::zeros(384, 384, 3), 32).unwrap();
        assert_eq!(s.tokens.shape(), (144, 3072));
        assert!(matches!(patchify(&Image::<f64>::zeros(30, 32, 3), 8), Err(Error::Shape(_))));
    }

    #[test]
    fn unpatchify_cases() {
        let img = random_image(16, 16, 1);
        let single = patchify(&img, 16).unwrap();
        assert_eq!(single.tokens.as_slice(), img.as_slice());
        let constant = TokenSequence { tokens: Matrix::filled(4, 48, 0.25), positions: (0..4).collect(), has_cls: false };
        let back = unpatchify(&constant, 8, 4).unwrap();
        assert!(back.as_slice().iter().all(|&v| v == 0.25));
        let partial = TokenSequence { tokens: Matrix::filled(3, 48, 0.25), positions: (0..3).collect(), has_cls: false };
        assert!(matches!(unpatchify(&partial, 8, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_examples() {
        let mut r = stream(3, "m");
        let plan = random_mask(196, 0.75, &mut r).unwrap();
        assert_eq!((plan.masked_idx.len(), plan.visible_idx.len()), (147, 49));
        let plan = random_mask(16, 0.0, &mut r).unwrap();
        assert_eq!(plan.visible_idx, (0..16).collect::<Vec<_>>());
        let a = random_mask(50, 0.5, &mut stream(8, "m")).unwrap();
        let b = random_mask(50, 0.5, &mut stream(8, "m")).unwrap();
        assert_eq!(a, b);
        assert!(random_mask(10, 1.0, &mut r).is_err());
        assert!(random_mask(10, -0.1, &mut r).is_err());
    }

    fn toy() -> (EncoderConfig, DecoderConfig) {
        let enc = EncoderConfig { image_size: 32, patch_size: 8, channels: 3, embed_dim: 16, depth: 1, heads: 2, mlp_ratio: 2.0, has_cls: true };
        let dec = DecoderConfig { embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2.0 };
        (enc, dec)
    }

    #[test]
    fn encode_and_decode_shapes() {
        let (enc, dec) = toy();
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, 1, "e", &enc);
        init_decoder(&mut store, 1, "d", &dec, enc.embed_dim, enc.patch_dim());
        let seq = patchify(&random_image(32, 32, 2), 8).unwrap();
        let out = encode(&seq, &store, "e", &enc).unwrap();
        assert_eq!(out.tokens.shape(), (17, 16));

        for ratio in [0.0, 0.75] {
            let plan = random_mask(16, ratio, &mut stream(4, "m")).unwrap();
            let mut g = Graph::inference();
            let visible = seq.select(&plan.visible_idx);
            let e = encode_var(&mut g, &store, "e", &enc, &visible).unwrap();
            let y = decode_var(&mut g, &store, "d", &dec, &e, &plan, enc.grid()).unwrap();
            assert_eq!(g.value(y).shape(), (16, 192));
        }
    }

    #[test]
    fn zero_depth_encoder_is_normalized_embedding() {
        let (mut enc, _) = toy();
        enc.depth = 0;
        enc.has_cls = false;
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, 5, "e", &enc);
        let seq = patchify(&random_image(32, 32, 3), 8).unwrap();
        let out = encode(&seq, &store, "e", &enc).unwrap();
        // With no blocks only the final norm (unit scale, zero shift) remains.
        let mut expected = seq.tokens.matmul(store.get("e.patch_embed.weight").unwrap());
        expected.add_assign(&sincos_2d(16, 4));
        for r in 0..16 {
            let row = expected.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for c in 0..16 {
                let want = (row[c] - mean) / (var + 1e-6).sqrt();
                assert!((out.tokens.get(r, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn decode_rejects_mismatched_plan() {
        let (enc, dec) = toy();
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, 1, "e", &enc);
        init_decoder(&mut store, 1, "d", &dec, enc.embed_dim, enc.patch_dim());
        let seq = patchify(&random_image(32, 32, 2), 8).unwrap();
        let plan = random_mask(16, 0.5, &mut stream(1, "m")).unwrap();
        let other = random_mask(16, 0.5, &mut stream(2, "m")).unwrap();
        let mut g = Graph::inference();
        let e = encode_var(&mut g, &store, "e", &enc, &seq.select(&plan.visible_idx)).unwrap();
        assert!(matches!(decode_var(&mut g, &store, "d", &dec, &e, &other, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_decoder_gradients_match_finite_differences() {
        let (enc, dec) = toy();
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, 1, "e", &enc);
        init_decoder(&mut store, 1, "d", &dec, enc.embed_dim, enc.patch_dim());
        // Larger weights than the default init so every path carries signal.
        for (_, m) in store.iter_mut() {
            for v in m.as_mut_slice() {
                *v *= 10.0;
            }
        }
        let img = random_image(32, 32, 9);
        let seq = patchify(&img, 8).unwrap();
        let plan = random_mask(16, 0.75, &mut stream(2, "m")).unwrap();
        let loss = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let e = encode_var(&mut g, s, "e", &enc, &seq.select(&plan.visible_idx)).unwrap();
            let y = decode_var(&mut g, s, "d", &dec, &e, &plan, 4).unwrap();
            let l = g.masked_mse(y, seq.tokens.clone(), plan.masked_idx.clone()).unwrap();
            (g.scalar(l), g.backward(l))
        };
        let (_, grads) = loss(&store);
        let names: Vec<String> = store.names().map(String::from).collect();
        let mut r = stream(0, "pick");
        let mut checked = 0;
        for name in &names {
            let n = store.get(name).unwrap().len();
            for _ in 0..3 {
                let i = r.random_range(0..n);
                let h = 1e-5;
                let orig = store.get(name).unwrap().as_slice()[i];
                store.get_mut(name).unwrap().as_mut_slice()[i] = orig + h;
                let up = loss(&store).0;
                store.get_mut(name).unwrap().as_mut_slice()[i] = orig - h;
                let down = loss(&store).0;
                store.get_mut(name).unwrap().as_mut_slice()[i] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads.get(name).map_or(0.0, |m| m.as_slice()[i]);
                // Key biases have an exactly zero gradient; allow for difference noise there.
                let tol = 1e-3 * num.abs().max(ana.abs()) + 1e-8;
                assert!((num - ana).abs() < tol, "{name}[{i}] analytic {ana} numeric {num}");
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(grid in 1usize..5, patch in 1usize..6, seed in 0u64..1000) {
            let size = grid * patch;
            let img = random_image(size, size, seed);
            let back = unpatchify(&patchify(&img, patch).unwrap(), size, patch).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn mask_plan_partitions(p in 1usize..400, ratio in 0.0f64..0.999, seed in 0u64..100) {
            let plan = random_mask(p, ratio, &mut stream(seed, "m")).unwrap();
            prop_assert_eq!(plan.masked_idx.len(), (ratio * p as f64).round() as usize);
            let mut all: Vec<usize> = plan.visible_idx.iter().chain(&plan.masked_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..p).collect::<Vec<_>>());
        }
    }
}
