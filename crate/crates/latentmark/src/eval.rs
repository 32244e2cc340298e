//! Detection metrics, image-quality metrics, the distortion suite, and the
//! scheme-by-attack evaluation matrix.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackKind};
use crate::backend::{Latent, PromptContext};
use crate::codec::Image;
use crate::error::{arg_err, LabError, Result};
use crate::pipeline::{Pipeline, SchemeConfig};
use crate::rng;
use crate::selector::SelectorModel;

/// Detection scores for the two classes; lower scores are more
/// watermark-like.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

impl ScoreSet {
    pub fn new(positives: Vec<f64>, negatives: Vec<f64>) -> Self {
        Self {
            positives,
            negatives,
        }
    }

    fn check(&self) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(arg_err("both score classes must be non-empty"));
        }
        if self
            .positives
            .iter()
            .chain(self.negatives.iter())
            .any(|v| !v.is_finite())
        {
            return Err(arg_err("scores must be finite"));
        }
        Ok(())
    }
}

/// Rank-based (Mann-Whitney) AUC with half credit for ties, oriented so
/// that watermarked-lower scores drive the value toward 1.
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    let np = scores.positives.len();
    let nn = scores.negatives.len();
    // Combined mid-rank assignment.
    let mut all: Vec<(f64, bool)> = scores
        .positives
        .iter()
        .map(|&v| (v, true))
        .chain(scores.negatives.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Mid-rank of the tie group [i, j), 1-based ranks.
        let mid = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += mid;
            }
        }
        i = j;
    }
    // U counts negative scores below positives (plus half the ties); the
    // oriented AUC is its complement. Both numerators are exact
    // half-integers, so a single division keeps the value identical to
    // exhaustive pair counting.
    let u_pos = rank_sum_pos - (np * (np + 1)) as f64 / 2.0;
    let pairs = (np * nn) as f64;
    Ok((pairs - u_pos) / pairs)
}

/// Rank threshold: the largest benign data value whose strict-< decision
/// rule keeps the empirical FPR at or below the target. Being a data point
/// (rather than a midpoint) makes the resulting TPR exactly invariant under
/// strictly monotone transforms of all scores.
pub fn rank_threshold_at_fpr(negatives: &[f64], fpr: f64) -> f64 {
    assert!(!negatives.is_empty());
    let mut sorted = negatives.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let k = ((fpr * n as f64) + 1e-9).floor() as usize;
    if k >= n {
        f64::INFINITY
    } else {
        sorted[k]
    }
}

/// True-positive rate at the rank threshold for the target FPR on the
/// negative class (decisions are strict `score < threshold`).
pub fn tpr_at_fpr(scores: &ScoreSet, fpr: f64) -> Result<f64> {
    scores.check()?;
    if !(fpr > 0.0 && fpr <= 1.0) {
        return Err(arg_err("target FPR must lie in (0, 1]"));
    }
    let tau = rank_threshold_at_fpr(&scores.negatives, fpr);
    let hits = scores.positives.iter().filter(|&&p| p < tau).count();
    Ok(hits as f64 / scores.positives.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1.0; identical inputs report
/// the infinity sentinel.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.raw_dim() != b.raw_dim() {
        return Err(arg_err("image shapes differ"));
    }
    let n = a.len() as f64;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn gauss_filter_plane(plane: &Array2<f64>, kernel: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let r = SSIM_WINDOW / 2;
    let mut rows = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let jj = (j + k).saturating_sub(r).min(w - 1);
                acc += kv * plane[(i, jj)];
            }
            rows[(i, j)] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let ii = (i + k).saturating_sub(r).min(h - 1);
                acc += kv * rows[(ii, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) and the
/// standard stabilizers, averaged over the interior region and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.raw_dim() != b.raw_dim() {
        return Err(arg_err("image shapes differ"));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(arg_err("image smaller than the SSIM window"));
    }
    let kernel = ssim_kernel();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = a.index_axis(ndarray::Axis(0), ch).to_owned();
        let pb = b.index_axis(ndarray::Axis(0), ch).to_owned();
        let mu_a = gauss_filter_plane(&pa, &kernel);
        let mu_b = gauss_filter_plane(&pb, &kernel);
        let aa = gauss_filter_plane(&pa.mapv(|v| v * v), &kernel);
        let bb = gauss_filter_plane(&pb.mapv(|v| v * v), &kernel);
        let ab = gauss_filter_plane(&(&pa * &pb), &kernel);
        for i in r..h - r {
            for j in r..w - r {
                let (ma, mb) = (mu_a[(i, j)], mu_b[(i, j)]);
                let va = aa[(i, j)] - ma * ma;
                let vb = bb[(i, j)] - mb * mb;
                let cab = ab[(i, j)] - ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Distortion families: rotation, additive noise, Gaussian blur,
/// crop-and-rescale, JPEG recompression, plus externally registered kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    Rotation,
    Noise,
    Blur,
    Crop,
    Jpeg,
    /// Adapter-backed distortion (for example diffusion purification);
    /// unavailable unless the hosting application registers one.
    External(String),
}

/// One distortion with its per-kind magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub magnitude: f64,
    /// Interpret the crop magnitude as a side fraction rather than an area
    /// fraction.
    #[serde(default)]
    pub crop_side_fraction: bool,
}

impl DistortionSpec {
    pub fn rotation(degrees: f64) -> Self {
        Self {
            kind: DistortionKind::Rotation,
            magnitude: degrees,
            crop_side_fraction: false,
        }
    }

    pub fn noise(sigma: f64) -> Self {
        Self {
            kind: DistortionKind::Noise,
            magnitude: sigma,
            crop_side_fraction: false,
        }
    }

    pub fn blur(support: f64) -> Self {
        Self {
            kind: DistortionKind::Blur,
            magnitude: support,
            crop_side_fraction: false,
        }
    }

    pub fn crop(area_fraction: f64) -> Self {
        Self {
            kind: DistortionKind::Crop,
            magnitude: area_fraction,
            crop_side_fraction: false,
        }
    }

    pub fn jpeg(quality: f64) -> Self {
        Self {
            kind: DistortionKind::Jpeg,
            magnitude: quality,
            crop_side_fraction: false,
        }
    }

    /// The published suite: 75 degree rotation, sigma 0.1 noise, 8x8 blur,
    /// 75% crop-and-rescale, JPEG quality 25.
    pub fn standard_suite() -> Vec<Self> {
        vec![
            Self::rotation(75.0),
            Self::noise(0.1),
            Self::blur(8.0),
            Self::crop(0.75),
            Self::jpeg(25.0),
        ]
    }

    pub fn label(&self) -> String {
        match &self.kind {
            DistortionKind::Rotation => format!("rotation-{}", self.magnitude),
            DistortionKind::Noise => format!("noise-{}", self.magnitude),
            DistortionKind::Blur => format!("blur-{}", self.magnitude),
            DistortionKind::Crop => format!("crop-{}", self.magnitude),
            DistortionKind::Jpeg => format!("jpeg-{}", self.magnitude),
            DistortionKind::External(name) => format!("external-{name}"),
        }
    }
}

fn bilinear_sample(plane: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = plane.dim();
    if y < -1.0 || x < -1.0 || y > h as f64 || x > w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let mut acc = 0.0;
    for (oy, wy) in [(0isize, 1.0 - dy), (1, dy)] {
        for (ox, wx) in [(0isize, 1.0 - dx), (1, dx)] {
            let yy = y0 as isize + oy;
            let xx = x0 as isize + ox;
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                acc += wy * wx * plane[(yy as usize, xx as usize)];
            }
        }
    }
    acc
}

fn rotate_image(img: &Image, degrees: f64) -> Image {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), ch).to_owned();
        for i in 0..h {
            for j in 0..w {
                // Inverse map: rotate the output grid backwards.
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                let sy = cy + cos * dy + sin * dx;
                let sx = cx - sin * dy + cos * dx;
                out[(ch, i, j)] = bilinear_sample(&plane, sy, sx).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn blur_image(img: &Image, support: f64) -> Result<Image> {
    let taps = support.round() as usize;
    if taps < 1 {
        return Err(arg_err("blur support must be at least 1"));
    }
    // Gaussian sampled on the (possibly even) tap grid, sigma = support / 6.
    let sigma = support / 6.0;
    let mut kernel = vec![0.0f64; taps];
    let center = (taps as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for (i, v) in kernel.iter_mut().enumerate() {
        let d = i as f64 - center;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let r = center;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), ch).to_owned();
        let mut rows = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let jj = (j as f64 + k as f64 - r).round().clamp(0.0, w as f64 - 1.0);
                    acc += kv * plane[(i, jj as usize)];
                }
                rows[(i, j)] = acc;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let ii = (i as f64 + k as f64 - r).round().clamp(0.0, h as f64 - 1.0);
                    acc += kv * rows[(ii as usize, j)];
                }
                out[(ch, i, j)] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn crop_rescale(img: &Image, fraction: f64, side_fraction: bool, seed: u64) -> Result<Image> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(arg_err("crop fraction must lie in (0, 1]"));
    }
    let side_frac = if side_fraction {
        fraction
    } else {
        fraction.sqrt()
    };
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let ch_ = ((h as f64) * side_frac).round().max(1.0) as usize;
    let cw = ((w as f64) * side_frac).round().max(1.0) as usize;
    let mut rng = rng::rng_for(seed, "crop", 0);
    let top = if h > ch_ { rng.gen_range(0..=h - ch_) } else { 0 };
    let left = if w > cw { rng.gen_range(0..=w - cw) } else { 0 };
    let mut out = Array3::zeros((c, h, w));
    for chan in 0..c {
        let plane = img.index_axis(ndarray::Axis(0), chan).to_owned();
        for i in 0..h {
            for j in 0..w {
                // Sample the crop window back up to the full size.
                let sy = top as f64 + (i as f64 + 0.5) * ch_ as f64 / h as f64 - 0.5;
                let sx = left as f64 + (j as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
                out[(chan, i, j)] = bilinear_sample(&plane, sy, sx).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn jpeg_recompress(img: &Image, quality: f64) -> Result<Image> {
    if !(1.0..=100.0).contains(&quality) {
        return Err(arg_err("JPEG quality must lie in [1, 100]"));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        // Channels are compressed independently as 8-bit grayscale planes.
        let mut gray = image::GrayImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let v = (img[(ch, i, j)].clamp(0.0, 1.0) * 255.0).round() as u8;
                gray.put_pixel(j as u32, i as u32, image::Luma([v]));
            }
        }
        let mut buf = Vec::new();
        {
            let mut encoder =
                image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality as u8);
            encoder
                .encode_image(&gray)
                .map_err(|e| LabError::Format(format!("jpeg encode: {e}")))?;
        }
        let decoded = image::load_from_memory(&buf)
            .map_err(|e| LabError::Format(format!("jpeg decode: {e}")))?
            .to_luma8();
        for i in 0..h {
            for j in 0..w {
                out[(ch, i, j)] = decoded.get_pixel(j as u32, i as u32)[0] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Apply one distortion to an image. The seed drives the random parts
/// (noise draw, crop placement).
pub fn distort(img: &Image, spec: &DistortionSpec, seed: u64) -> Result<Image> {
    match &spec.kind {
        DistortionKind::Rotation => Ok(rotate_image(img, spec.magnitude)),
        DistortionKind::Noise => {
            if spec.magnitude == 0.0 {
                return Ok(img.clone());
            }
            let mut rng = rng::rng_for(seed, "noise", 0);
            Ok(img.mapv(|v| {
                (v + spec.magnitude * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)
            }))
        }
        DistortionKind::Blur => blur_image(img, spec.magnitude),
        DistortionKind::Crop => {
            crop_rescale(img, spec.magnitude, spec.crop_side_fraction, seed)
        }
        DistortionKind::Jpeg => jpeg_recompress(img, spec.magnitude),
        DistortionKind::External(name) => Err(arg_err(format!(
            "distortion kind `{name}` requires an external adapter"
        ))),
    }
}

/// Attack calibration for the evaluation matrix. Published step counts are
/// kept; learning rates are derived from the surrogate's operator norms so
/// the descent reaches a stated residual level on toy backends (the
/// published 0.01 rate is tuned to diffusion-scale operators).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixTuning {
    pub attack_steps: usize,
    /// Fraction of the optimality gap closed by imprint removal.
    pub imp_removal_progress: f64,
    /// Fraction closed by imprint forgery; partial progress keeps the forged
    /// image perceptually close to its clean base, matching the threat
    /// model's budget.
    pub imp_forgery_progress: f64,
    /// Encoder-attack regularization relative to the squared encoder norm.
    pub vae_lambda_rel: f64,
}

impl Default for MatrixTuning {
    fn default() -> Self {
        Self {
            attack_steps: 150,
            imp_removal_progress: 0.75,
            imp_forgery_progress: 0.5,
            vae_lambda_rel: 0.01,
        }
    }
}

/// Learning rate reaching the requested progress fraction after `steps`
/// uniform contractions of the residual.
fn lr_for_progress(sigma: f64, steps: usize, progress: f64) -> f64 {
    let residual = (1.0 - progress).clamp(1e-12, 1.0);
    // Residual NORM shrinks by (1 - lr sigma^2) per step; the recorded loss
    // is its square.
    (1.0 - residual.powf(1.0 / steps as f64)) / (sigma * sigma)
}

/// One evaluation cell: a scheme, an optional attack, an optional
/// distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub scheme_name: String,
    pub scheme: SchemeConfig,
    pub attack: Option<AttackKind>,
    pub distortion: Option<DistortionSpec>,
}

/// Scores and quality metrics of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub scheme: String,
    pub attack: String,
    pub distortion: String,
    pub n: usize,
    pub auc: f64,
    pub tpr_at_1fpr: f64,
    pub psnr_median: f64,
    pub ssim_median: f64,
    pub seed: u64,
    /// Set when the cell failed; metrics are NaN in that case.
    #[serde(default)]
    pub error: Option<String>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn detection_ctx() -> PromptContext {
    // The detector never sees the generation prompt; toy backends are
    // prompt-free, and adapter backends receive this fixed context.
    PromptContext::new("", 0)
}

struct OperatorNorms {
    inversion: f64,
    encoder: f64,
}

fn operator_norms(pipeline: &Pipeline) -> OperatorNorms {
    let cfg = pipeline.backend().config();
    let shape = (cfg.channels, cfg.height, cfg.width);
    let ctx = detection_ctx();
    let t = pipeline.backend().total_steps();
    let inversion = attacks::operator_norm_estimate(
        |d| {
            pipeline
                .backend()
                .invert(&ctx, &Latent::new(d.clone(), 0), t)
                .expect("toy inversion")
                .data
        },
        |v| {
            pipeline
                .backend()
                .invert_adjoint(&ctx, v, t)
                .expect("toy adjoint")
        },
        shape,
        40,
        1,
    );
    let img_shape = pipeline.codec().image_shape((cfg.height, cfg.width));
    let encoder = attacks::operator_norm_estimate(
        |d| pipeline.codec().encode_linear(d),
        |v| pipeline.codec().encode_adjoint(v),
        img_shape,
        40,
        2,
    );
    OperatorNorms { inversion, encoder }
}

/// Generate the image pairs, run the attack and distortion, score both
/// classes, and compute the cell metrics. Fully deterministic in
/// `(pipeline, selector, spec, n_pairs, seed)`.
pub fn run_cell(
    pipeline: &Pipeline,
    selector: Option<&SelectorModel>,
    spec: &CellSpec,
    n_pairs: usize,
    seed: u64,
    tuning: &MatrixTuning,
) -> Result<CellOutcome> {
    if n_pairs < 2 {
        return Err(arg_err("a cell needs at least two image pairs"));
    }
    let det_ctx = detection_ctx();
    let contexts: Vec<PromptContext> = (0..n_pairs)
        .map(|i| {
            let s = u64::from_le_bytes(
                rng::derive_seed(seed, "pair-seed", i as u64)[..8]
                    .try_into()
                    .unwrap(),
            );
            PromptContext::new(format!("toy-prompt-{i:04}"), s)
        })
        .collect();

    let pairs: Result<Vec<(Image, Image)>> = contexts
        .par_iter()
        .map(|ctx| {
            let plain = pipeline.generate_plain(ctx)?;
            let (marked, _) = pipeline.generate_watermarked(ctx, selector, &spec.scheme)?;
            Ok((plain, marked))
        })
        .collect();
    let pairs = pairs?;
    let plains: Vec<Image> = pairs.iter().map(|(p, _)| p.clone()).collect();
    let marked: Vec<Image> = pairs.iter().map(|(_, m)| m.clone()).collect();

    let norms = operator_norms(pipeline);
    // Positive class and the base images quality is measured against.
    let (positives, bases): (Vec<Image>, Vec<Image>) = match spec.attack {
        None => (marked.clone(), plains.clone()),
        Some(AttackKind::ImpRemoval) => {
            let cfg = AttackConfig {
                kind: AttackKind::ImpRemoval,
                steps: tuning.attack_steps,
                lr: lr_for_progress(norms.inversion, tuning.attack_steps, tuning.imp_removal_progress),
                lambda: 0.0,
                n_pairs,
            };
            let out: Result<Vec<Image>> = marked
                .par_iter()
                .zip(contexts.par_iter())
                .map(|(img, ctx)| Ok(attacks::imp_removal(pipeline, ctx, img, &cfg)?.attacked_image))
                .collect();
            (out?, marked.clone())
        }
        Some(AttackKind::ImpForgery) => {
            let cfg = AttackConfig {
                kind: AttackKind::ImpForgery,
                steps: tuning.attack_steps,
                lr: lr_for_progress(norms.inversion, tuning.attack_steps, tuning.imp_forgery_progress),
                lambda: 0.0,
                n_pairs,
            };
            let reference = &marked[0];
            let out: Result<Vec<Image>> = plains
                .par_iter()
                .zip(contexts.par_iter())
                .map(|(img, ctx)| {
                    Ok(attacks::imp_forgery(pipeline, ctx, img, reference, &cfg)?.attacked_image)
                })
                .collect();
            (out?, plains.clone())
        }
        Some(AttackKind::AvgRemoval) => {
            let residual = attacks::avg_residual(&marked, &plains)?;
            let out: Result<Vec<Image>> = marked
                .iter()
                .map(|img| attacks::avg_removal(img, &residual))
                .collect();
            (out?, marked.clone())
        }
        Some(AttackKind::AvgForgery) => {
            let residual = attacks::avg_residual(&marked, &plains)?;
            let out: Result<Vec<Image>> = plains
                .iter()
                .map(|img| attacks::avg_forgery(img, &residual))
                .collect();
            (out?, plains.clone())
        }
        Some(AttackKind::VaeRemoval) => {
            let lambda = tuning.vae_lambda_rel * norms.encoder * norms.encoder;
            let cfg = AttackConfig {
                kind: AttackKind::VaeRemoval,
                steps: tuning.attack_steps,
                lr: attacks::convergent_lr(norms.encoder, lambda),
                lambda,
                n_pairs,
            };
            let out: Result<Vec<Image>> = marked
                .par_iter()
                .map(|img| Ok(attacks::vae_removal(pipeline, img, &cfg)?.attacked_image))
                .collect();
            (out?, marked.clone())
        }
        Some(AttackKind::VaeForgery) => {
            let lambda = tuning.vae_lambda_rel * norms.encoder * norms.encoder;
            let cfg = AttackConfig {
                kind: AttackKind::VaeForgery,
                steps: tuning.attack_steps,
                lr: attacks::convergent_lr(norms.encoder, lambda),
                lambda,
                n_pairs,
            };
            let reference = &marked[0];
            let out: Result<Vec<Image>> = plains
                .par_iter()
                .map(|img| Ok(attacks::vae_forgery(pipeline, img, reference, &cfg)?.attacked_image))
                .collect();
            (out?, plains.clone())
        }
    };

    // Distortion applies to both classes before detection.
    let (positives, negatives): (Vec<Image>, Vec<Image>) = match &spec.distortion {
        None => (positives, plains.clone()),
        Some(d) => {
            let pos: Result<Vec<Image>> = positives
                .par_iter()
                .enumerate()
                .map(|(i, img)| {
                    distort(
                        img,
                        d,
                        u64::from_le_bytes(
                            rng::derive_seed(seed, "distort-pos", i as u64)[..8]
                                .try_into()
                                .unwrap(),
                        ),
                    )
                })
                .collect();
            let neg: Result<Vec<Image>> = plains
                .par_iter()
                .enumerate()
                .map(|(i, img)| {
                    distort(
                        img,
                        d,
                        u64::from_le_bytes(
                            rng::derive_seed(seed, "distort-neg", i as u64)[..8]
                                .try_into()
                                .unwrap(),
                        ),
                    )
                })
                .collect();
            (pos?, neg?)
        }
    };

    let score_all = |imgs: &[Image]| -> Result<Vec<f64>> {
        imgs.par_iter()
            .map(|img| Ok(pipeline.score(&det_ctx, img, selector, &spec.scheme)?.0))
            .collect()
    };
    let pos_scores = score_all(&positives)?;
    let neg_scores = score_all(&negatives)?;
    let scores = ScoreSet::new(pos_scores, neg_scores);

    let mut psnrs = Vec::with_capacity(n_pairs);
    let mut ssims = Vec::with_capacity(n_pairs);
    for (img, base) in positives.iter().zip(bases.iter()) {
        psnrs.push(psnr(img, base)?);
        ssims.push(ssim(img, base)?);
    }

    Ok(CellOutcome {
        scheme: spec.scheme_name.clone(),
        attack: spec
            .attack
            .map(|a| a.label().to_string())
            .unwrap_or_else(|| "original".into()),
        distortion: spec
            .distortion
            .as_ref()
            .map(|d| d.label())
            .unwrap_or_else(|| "none".into()),
        n: n_pairs,
        auc: auc(&scores)?,
        tpr_at_1fpr: tpr_at_fpr(&scores, 0.01)?,
        psnr_median: median(psnrs),
        ssim_median: median(ssims),
        seed,
        error: None,
    })
}

/// Per-scheme aggregate columns: mean and minimum over the three removal
/// attacks, and over the three forgery attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeAggregate {
    pub scheme: String,
    pub removal_average_auc: f64,
    pub removal_worst_auc: f64,
    pub removal_average_tpr: f64,
    pub removal_worst_tpr: f64,
    pub forgery_average_auc: f64,
    pub forgery_worst_auc: f64,
    pub forgery_average_tpr: f64,
    pub forgery_worst_tpr: f64,
}

/// Full matrix result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub cells: Vec<CellOutcome>,
    pub aggregates: Vec<SchemeAggregate>,
}

/// The four ablation rows: full scheme, fixed pattern position, fixed
/// injection step, one-sided detection.
pub fn ablation_schemes(t_mid: usize) -> Vec<(String, SchemeConfig)> {
    vec![
        ("ists".into(), SchemeConfig::ists()),
        (
            "no-dyn-pattern".into(),
            SchemeConfig::without_dynamic_pattern(),
        ),
        (
            "no-dyn-injection".into(),
            SchemeConfig::without_dynamic_injection(t_mid),
        ),
        ("one-sided".into(), SchemeConfig::one_sided()),
    ]
}

/// Run every scheme against every attack column (plus the no-attack
/// column) and the requested distortions, then derive the aggregate
/// columns. Cell failures are recorded as error markers, not propagated.
pub fn run_matrix(
    pipeline: &Pipeline,
    selector: Option<&SelectorModel>,
    schemes: &[(String, SchemeConfig)],
    attacks_list: &[Option<AttackKind>],
    distortions: &[Option<DistortionSpec>],
    n_pairs: usize,
    seed: u64,
    tuning: &MatrixTuning,
) -> MatrixResult {
    let mut cells = Vec::new();
    for (name, scheme) in schemes {
        for attack in attacks_list {
            for distortion in distortions {
                let spec = CellSpec {
                    scheme_name: name.clone(),
                    scheme: *scheme,
                    attack: *attack,
                    distortion: distortion.clone(),
                };
                match run_cell(pipeline, selector, &spec, n_pairs, seed, tuning) {
                    Ok(cell) => cells.push(cell),
                    Err(err) => cells.push(CellOutcome {
                        scheme: name.clone(),
                        attack: attack
                            .map(|a| a.label().to_string())
                            .unwrap_or_else(|| "original".into()),
                        distortion: distortion
                            .as_ref()
                            .map(|d| d.label())
                            .unwrap_or_else(|| "none".into()),
                        n: n_pairs,
                        auc: f64::NAN,
                        tpr_at_1fpr: f64::NAN,
                        psnr_median: f64::NAN,
                        ssim_median: f64::NAN,
                        seed,
                        error: Some(err.to_string()),
                    }),
                }
            }
        }
    }
    let aggregates = aggregate(&cells);
    MatrixResult { cells, aggregates }
}

/// Mean/min aggregates across the per-attack cells (undistorted columns).
pub fn aggregate(cells: &[CellOutcome]) -> Vec<SchemeAggregate> {
    let mut schemes: Vec<String> = Vec::new();
    for c in cells {
        if !schemes.contains(&c.scheme) {
            schemes.push(c.scheme.clone());
        }
    }
    let mut out = Vec::new();
    for scheme in schemes {
        let grab = |kind: AttackKind| -> Option<(f64, f64)> {
            cells
                .iter()
                .find(|c| {
                    c.scheme == scheme
                        && c.attack == kind.label()
                        && c.distortion == "none"
                        && c.error.is_none()
                })
                .map(|c| (c.auc, c.tpr_at_1fpr))
        };
        let removal: Vec<(f64, f64)> = [
            AttackKind::ImpRemoval,
            AttackKind::AvgRemoval,
            AttackKind::VaeRemoval,
        ]
        .into_iter()
        .filter_map(grab)
        .collect();
        let forgery: Vec<(f64, f64)> = [
            AttackKind::ImpForgery,
            AttackKind::AvgForgery,
            AttackKind::VaeForgery,
        ]
        .into_iter()
        .filter_map(grab)
        .collect();
        if removal.len() != 3 || forgery.len() != 3 {
            continue;
        }
        let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| {
            v.iter().map(f).sum::<f64>() / v.len() as f64
        };
        let min = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| {
            v.iter().map(f).fold(f64::INFINITY, f64::min)
        };
        out.push(SchemeAggregate {
            scheme,
            removal_average_auc: mean(&removal, |x| x.0),
            removal_worst_auc: min(&removal, |x| x.0),
            removal_average_tpr: mean(&removal, |x| x.1),
            removal_worst_tpr: min(&removal, |x| x.1),
            forgery_average_auc: mean(&forgery, |x| x.0),
            forgery_worst_auc: min(&forgery, |x| x.0),
            forgery_average_tpr: mean(&forgery, |x| x.1),
            forgery_worst_tpr: min(&forgery, |x| x.1),
        });
    }
    out
}

/// One row of the injection-step sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t_lo: usize,
    pub t_hi: usize,
    pub original_auc: f64,
    pub imp_removal_auc: f64,
    pub imp_forgery_auc: f64,
}

/// Sweep result plus the reported (not asserted) monotone-trend statistic:
/// the fraction of adjacent range pairs where the attacked AUC worsens as
/// the injection steps grow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub removal_decreasing_fraction: f64,
    pub forgery_decreasing_fraction: f64,
}

/// Evaluate the full dynamic scheme over several injection-step ranges
/// against the imprint attacks. The selector's clustering is reused; only
/// the parameter mapping's timestep range changes per row.
pub fn step_sweep(
    pipeline: &Pipeline,
    selector: &SelectorModel,
    ranges: &[(usize, usize)],
    n_pairs: usize,
    seed: u64,
    tuning: &MatrixTuning,
) -> Result<SweepResult> {
    let t_total = pipeline.backend().total_steps();
    let mut rows = Vec::new();
    for &(t_lo, t_hi) in ranges {
        if t_lo == 0 || t_hi <= t_lo || t_hi > t_total {
            return Err(arg_err(format!(
                "sweep range [{t_lo}, {t_hi}] outside [1, {t_total}]"
            )));
        }
        let mut model = selector.clone();
        model.mapping.t_lo = t_lo;
        model.mapping.t_hi = t_hi;
        let run = |attack: Option<AttackKind>| -> Result<f64> {
            let spec = CellSpec {
                scheme_name: format!("ists-t{t_lo}-{t_hi}"),
                scheme: SchemeConfig::ists(),
                attack,
                distortion: None,
            };
            Ok(run_cell(pipeline, Some(&model), &spec, n_pairs, seed, tuning)?.auc)
        };
        rows.push(SweepRow {
            t_lo,
            t_hi,
            original_auc: run(None)?,
            imp_removal_auc: run(Some(AttackKind::ImpRemoval))?,
            imp_forgery_auc: run(Some(AttackKind::ImpForgery))?,
        });
    }
    let frac_decreasing = |get: fn(&SweepRow) -> f64, toward_attack: bool| -> f64 {
        if rows.len() < 2 {
            return f64::NAN;
        }
        let mut hits = 0usize;
        for pair in rows.windows(2) {
            let (a, b) = (get(&pair[0]), get(&pair[1]));
            // For removal, lower AUC means the attack got stronger; for
            // forgery, higher AUC does.
            if (toward_attack && b <= a) || (!toward_attack && b >= a) {
                hits += 1;
            }
        }
        hits as f64 / (rows.len() - 1) as f64
    };
    Ok(SweepResult {
        removal_decreasing_fraction: frac_decreasing(|r| r.imp_removal_auc, true),
        forgery_decreasing_fraction: frac_decreasing(|r| r.imp_forgery_auc, false),
        rows,
    })
}
