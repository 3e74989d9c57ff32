//! Named augmentation policies and batch-level mixing.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixels::Image;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
pub const RRC_SCALE: (f64, f64) = (0.2, 1.0);
pub const RRC_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
pub const FLIP_P: f64 = 0.5;
pub const JITTER: f64 = 0.5;
pub const MIXUP_ALPHA: f64 = 0.8;
pub const CUTMIX_ALPHA: f64 = 1.0;
pub const LABEL_SMOOTHING: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    /// Leaves the image untouched (no normalization either).
    Identity,
    /// Channel normalization only; used for evaluation.
    Eval,
    PretrainGround,
    PretrainSat,
    Probe,
    FinetuneGround,
    FinetuneSat,
}

impl AugmentPolicy {
    pub const ALL: [AugmentPolicy; 7] = [
        Self::Identity,
        Self::Eval,
        Self::PretrainGround,
        Self::PretrainSat,
        Self::Probe,
        Self::FinetuneGround,
        Self::FinetuneSat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Eval => "eval",
            Self::PretrainGround => "pretrain_ground",
            Self::PretrainSat => "pretrain_sat",
            Self::Probe => "probe",
            Self::FinetuneGround => "finetune_ground",
            Self::FinetuneSat => "finetune_sat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Config(format!("unknown augmentation policy `{s}`")))
    }

    fn crops(self) -> bool {
        !matches!(self, Self::Identity | Self::Eval)
    }

    fn jitters(self) -> bool {
        matches!(self, Self::PretrainSat | Self::FinetuneGround | Self::FinetuneSat)
    }

    /// Whether the policy asks for batch mixup/cutmix and label smoothing.
    pub fn mixes_batches(self) -> bool {
        self == Self::FinetuneGround
    }

    /// Applies the per-image part of the policy.
    pub fn apply<F: Scalar, R: Rng + ?Sized>(self, img: &Image<F>, rng: &mut R) -> Image<F> {
        if self == Self::Identity {
            return img.clone();
        }
        let mut out = img.clone();
        if self.crops() {
            out = random_resized_crop(&out, RRC_SCALE, RRC_RATIO, rng);
            if rng.random_bool(FLIP_P) {
                out = out.flip_horizontal();
            }
        }
        if self.jitters() {
            out = color_jitter(&out, JITTER, JITTER, JITTER, rng);
        }
        normalize(&out)
    }
}

/// `(x − μ) / σ` per channel.
pub fn normalize<F: Scalar>(img: &Image<F>) -> Image<F> {
    let c = img.channels();
    let mut out = img.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let ch = i % c;
        if ch < 3 {
            *v = (*v - F::of(IMAGENET_MEAN[ch])) / F::of(IMAGENET_STD[ch]);
        }
    }
    out
}

/// Crop covering a random area fraction and aspect ratio, resized back to the
/// input size. Falls back to the full image after ten failed draws.
pub fn random_resized_crop<F: Scalar, R: Rng + ?Sized>(img: &Image<F>, scale: (f64, f64), ratio: (f64, f64), rng: &mut R) -> Image<F> {
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let log_r = rng.random_range(ratio.0.ln()..=ratio.1.ln());
        let ar = log_r.exp();
        let cw = (target * ar).sqrt().round() as usize;
        let ch = (target / ar).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y = rng.random_range(0..=h - ch);
            let x = rng.random_range(0..=w - cw);
            return img.crop(y, x, ch, cw).expect("crop inside bounds").resize(h, w);
        }
    }
    img.clone()
}

/// Brightness, contrast and saturation factors drawn from `[1 − s, 1 + s]`.
pub fn color_jitter<F: Scalar, R: Rng + ?Sized>(img: &Image<F>, brightness: f64, contrast: f64, saturation: f64, rng: &mut R) -> Image<F> {
    let b = rng.random_range(1.0 - brightness..=1.0 + brightness);
    let c = rng.random_range(1.0 - contrast..=1.0 + contrast);
    let s = rng.random_range(1.0 - saturation..=1.0 + saturation);
    let px: Vec<[f64; 3]> = img
        .as_slice()
        .chunks(img.channels())
        .map(|p| [0, 1, 2].map(|k| (p[k].to_f64_lossy() * b).clamp(0.0, 1.0)))
        .collect();
    let gray = |p: &[f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let mean = px.iter().map(gray).sum::<f64>() / px.len().max(1) as f64;
    let mut out = img.clone();
    for (dst, p) in out.as_mut_slice().chunks_mut(img.channels()).zip(&px) {
        let q = p.map(|v| ((v - mean) * c + mean).clamp(0.0, 1.0));
        let g = gray(&q);
        for k in 0..3 {
            dst[k] = F::of(((q[k] - g) * s + g).clamp(0.0, 1.0));
        }
    }
    out
}

/// Smoothed one-hot targets, `N × classes`.
pub fn smoothed_targets<F: Scalar>(labels: &[usize], classes: usize, smoothing: f64) -> Result<Matrix<F>> {
    let mut m = Matrix::filled(labels.len(), classes, F::of(smoothing / classes as f64));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Contract(format!("label {l} outside {classes} classes")));
        }
        m.set(i, l, F::of(1.0 - smoothing + smoothing / classes as f64));
    }
    Ok(m)
}

/// `λ·a + (1 − λ)·b` for images and targets.
pub fn mixup_pair<F: Scalar>(a: &Image<F>, b: &Image<F>, ya: &[F], yb: &[F], lambda: f64) -> (Image<F>, Vec<F>) {
    let l = F::of(lambda);
    let m = F::of(1.0 - lambda);
    let data: Vec<F> = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| l * x + m * y).collect();
    let img = Image::from_vec(a.height(), a.width(), a.channels(), data).expect("same shape");
    (img, ya.iter().zip(yb).map(|(&x, &y)| l * x + m * y).collect())
}

/// Pastes a box of `b` covering about `1 − λ` of the area into `a`. Returns the
/// mixed image and the λ implied by the actual box area.
pub fn cutmix_pair<F: Scalar, R: Rng + ?Sized>(a: &Image<F>, b: &Image<F>, lambda: f64, rng: &mut R) -> (Image<F>, f64) {
    let (h, w) = (a.height(), a.width());
    let cut = (1.0 - lambda).sqrt();
    let (ch, cw) = ((h as f64 * cut).round() as usize, (w as f64 * cut).round() as usize);
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let (y0, y1) = (cy.saturating_sub(ch / 2), (cy + ch - ch / 2).min(h));
    let (x0, x1) = (cx.saturating_sub(cw / 2), (cx + cw - cw / 2).min(w));
    let mut out = a.clone();
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..a.channels() {
                out.set(y, x, c, b.get(y, x, c));
            }
        }
    }
    let lam = 1.0 - ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64;
    (out, lam)
}

/// Batch mixing against the reversed batch: mixup or cutmix with equal
/// probability, λ drawn from the corresponding Beta distribution.
pub fn mix_batch<F: Scalar, R: Rng + ?Sized>(images: &mut [Image<F>], targets: &mut Matrix<F>, rng: &mut R) -> Result<f64> {
    let n = images.len();
    if targets.rows() != n {
        return Err(Error::Shape(format!("{n} images vs {} target rows", targets.rows())));
    }
    let use_cutmix = rng.random_bool(0.5);
    let alpha = if use_cutmix { CUTMIX_ALPHA } else { MIXUP_ALPHA };
    let lambda: f64 = Beta::new(alpha, alpha).map_err(|e| Error::Config(e.to_string()))?.sample(rng);
    let src_imgs = images.to_vec();
    let src_t = targets.clone();
    let mut lam = lambda;
    for i in 0..n {
        let j = n - 1 - i;
        let (img, l) = if use_cutmix {
            cutmix_pair(&src_imgs[i], &src_imgs[j], lambda, rng)
        } else {
            (mixup_pair(&src_imgs[i], &src_imgs[j], &[], &[], lambda).0, lambda)
        };
        images[i] = img;
        lam = l;
        let lf = F::of(l);
        for c in 0..targets.cols() {
            targets.set(i, c, lf * src_t.get(i, c) + (F::one() - lf) * src_t.get(j, c));
        }
    }
    Ok(lam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn img(seed: u64) -> Image<f64> {
        let mut r = stream(seed, "aug");
        Image::from_vec(8, 8, 3, (0..192).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identity_is_noop_and_names_parse() {
        let x = img(1);
        assert_eq!(AugmentPolicy::Identity.apply(&x, &mut stream(0, "a")), x);
        for p in AugmentPolicy::ALL {
            assert_eq!(AugmentPolicy::parse(p.name()).unwrap(), p);
        }
        assert!(matches!(AugmentPolicy::parse("trivial_augment"), Err(Error::Config(_))));
    }

    #[test]
    fn normalizing_the_mean_gives_zero() {
        let mut x = Image::<f64>::zeros(4, 4, 3);
        for (i, v) in x.as_mut_slice().iter_mut().enumerate() {
            *v = IMAGENET_MEAN[i % 3];
        }
        assert!(normalize(&x).as_slice().iter().all(|&v| v == 0.0));
        let y = AugmentPolicy::Eval.apply(&x, &mut stream(0, "a"));
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixup_with_unit_lambda_keeps_first() {
        let (a, b) = (img(1), img(2));
        let (m, y) = mixup_pair(&a, &b, &[1.0, 0.0], &[0.0, 1.0], 1.0);
        assert_eq!(m, a);
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn cutmix_area_matches_lambda() {
        let (a, b) = (img(1), img(2));
        let (m, lam) = cutmix_pair(&a, &b, 1.0, &mut stream(0, "c"));
        assert_eq!((m, lam), (a.clone(), 1.0));
        let (m, lam) = cutmix_pair(&a, &b, 0.75, &mut stream(0, "c"));
        let from_b = (0..64).filter(|&p| m.as_slice()[p * 3] != a.as_slice()[p * 3]).count();
        assert!((1.0 - lam - from_b as f64 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_targets_stay_distributions() {
        let mut imgs: Vec<_> = (0..4).map(img).collect();
        let mut t = smoothed_targets::<f64>(&[0, 1, 2, 1], 3, LABEL_SMOOTHING).unwrap();
        for r in 0..4 {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((t.get(0, 0) - (0.9 + 0.1 / 3.0)).abs() < 1e-12);
        mix_batch(&mut imgs, &mut t, &mut stream(3, "m")).unwrap();
        for r in 0..4 {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(smoothed_targets::<f64>(&[3], 3, 0.0).is_err());
    }

    #[test]
    fn augmentations_preserve_shape_and_are_seeded() {
        let x = img(4);
        for p in AugmentPolicy::ALL {
            let a = p.apply(&x, &mut stream(1, "a"));
            assert_eq!((a.height(), a.width(), a.channels()), (8, 8, 3));
            assert_eq!(a, p.apply(&x, &mut stream(1, "a")));
        }
    }
}
