//! Removal and forgery attacks against content watermarking, driven
//! through surrogate access only.
//!
//! Gradient attacks (`imp-*` through the sampler inversion, `vae-*` through
//! the image encoder) run plain gradient descent on a least-squares
//! objective; toy surrogates expose exact Jacobian-transpose products, so
//! the descent is verifiable against closed-form optima. Averaging attacks
//! (`avg-*`) need only image pairs.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::backend::{Latent, PromptContext};
use crate::codec::Image;
use crate::error::{arg_err, LabError, Result};
use crate::pipeline::Pipeline;

/// The six attack procedures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    ImpRemoval,
    ImpForgery,
    AvgRemoval,
    AvgForgery,
    VaeRemoval,
    VaeForgery,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::ImpRemoval,
        AttackKind::ImpForgery,
        AttackKind::AvgRemoval,
        AttackKind::AvgForgery,
        AttackKind::VaeRemoval,
        AttackKind::VaeForgery,
    ];

    pub fn is_removal(self) -> bool {
        matches!(
            self,
            AttackKind::ImpRemoval | AttackKind::AvgRemoval | AttackKind::VaeRemoval
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            AttackKind::ImpRemoval => "imp-removal",
            AttackKind::ImpForgery => "imp-forgery",
            AttackKind::AvgRemoval => "avg-removal",
            AttackKind::AvgForgery => "avg-forgery",
            AttackKind::VaeRemoval => "vae-removal",
            AttackKind::VaeForgery => "vae-forgery",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| arg_err(format!("unknown attack kind `{s}`")))
    }
}

/// Attack hyperparameters. Defaults follow the published settings: 150
/// optimization steps at learning rate 0.01, regularization weight 5e4,
/// and 100 image pairs for the averaging attacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub n_pairs: usize,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            steps: 150,
            lr: 0.01,
            lambda: 5e4,
            n_pairs: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(arg_err("attack steps must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(arg_err("attack learning rate must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(arg_err("attack lambda must be nonnegative"));
        }
        if self.n_pairs < 1 {
            return Err(arg_err("attack n_pairs must be at least 1"));
        }
        Ok(())
    }
}

/// Attack output: the attacked image, the L2 norm of the perturbation in
/// the space it was optimized in, and the per-step objective values.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub attacked_image: Image,
    pub perturbation_norm: f64,
    /// Least-squares objective `0.5 * (|r|^2 + lambda * |delta|^2)` recorded
    /// before every update; length equals the configured step count.
    pub loss_trace: Vec<f64>,
}

fn l2_norm(v: &Array3<f64>) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Plain gradient descent on `0.5 |A d + c|^2 + 0.5 lambda |d|^2` from
/// `d = 0`, with `A` and its adjoint supplied as closures.
fn descend<A, At>(
    apply: A,
    adjoint: At,
    c: &Array3<f64>,
    delta_shape: (usize, usize, usize),
    steps: usize,
    lr: f64,
    lambda: f64,
) -> (Array3<f64>, Vec<f64>)
where
    A: Fn(&Array3<f64>) -> Array3<f64>,
    At: Fn(&Array3<f64>) -> Array3<f64>,
{
    let mut delta = Array3::zeros(delta_shape);
    let mut a_delta: Array3<f64> = Array3::zeros(c.raw_dim());
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let residual = &a_delta + c;
        let loss = 0.5
            * (residual.iter().map(|&x| x * x).sum::<f64>()
                + lambda * delta.iter().map(|&x| x * x).sum::<f64>());
        trace.push(loss);
        let mut grad = adjoint(&residual);
        if lambda > 0.0 {
            grad = grad + delta.mapv(|x| lambda * x);
        }
        if lr != 0.0 {
            delta = delta - grad.mapv(|x| lr * x);
            a_delta = apply(&delta);
        }
    }
    (delta, trace)
}

fn require_gradients(surrogate: &Pipeline) -> Result<()> {
    if !surrogate.backend().supports_gradients() {
        return Err(LabError::AttackUnsupported(
            "surrogate backend does not expose gradients".into(),
        ));
    }
    Ok(())
}

/// Imprinting removal: perturb the image latent so its full inversion moves
/// toward the negated inverted latent of the watermarked image, then decode.
pub fn imp_removal(
    surrogate: &Pipeline,
    ctx: &PromptContext,
    watermarked: &Image,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    imp_attack(surrogate, ctx, watermarked, None, cfg)
}

/// Imprinting forgery: perturb a clean image latent so its full inversion
/// approaches the inverted latent of a single leaked watermarked reference.
pub fn imp_forgery(
    surrogate: &Pipeline,
    ctx: &PromptContext,
    clean: &Image,
    reference_watermarked: &Image,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    imp_attack(surrogate, ctx, clean, Some(reference_watermarked), cfg)
}

fn imp_attack(
    surrogate: &Pipeline,
    ctx: &PromptContext,
    base: &Image,
    reference: Option<&Image>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if cfg.steps < 1 {
        return Err(arg_err("attack steps must be at least 1"));
    }
    require_gradients(surrogate)?;
    let backend = surrogate.backend();
    let codec = surrogate.codec();
    let t_total = backend.total_steps();

    let z0 = codec.encode(base)?;
    let base_inverted = backend.invert(ctx, &z0, t_total)?.data;
    // Removal pushes toward the negated inverted latent of the input
    // itself; forgery pulls toward the reference's inverted latent.
    let c = match reference {
        None => {
            let z_top_w = &base_inverted;
            &base_inverted + z_top_w
        }
        Some(img) => {
            let zr = codec.encode(img)?;
            let z_top_w = backend.invert(ctx, &zr, t_total)?.data;
            &base_inverted - &z_top_w
        }
    };
    let apply = |d: &Array3<f64>| {
        backend
            .invert(ctx, &Latent::new(d.clone(), 0), t_total)
            .expect("linear inversion apply")
            .data
    };
    let adjoint = |v: &Array3<f64>| {
        backend
            .invert_adjoint(ctx, v, t_total)
            .expect("linear inversion adjoint")
    };
    let (delta, trace) = descend(
        apply,
        adjoint,
        &c,
        z0.shape(),
        cfg.steps,
        cfg.lr,
        0.0,
    );
    let perturbation_norm = l2_norm(&delta);
    let attacked_latent = Latent::new(&z0.data + &delta, 0);
    Ok(AttackResult {
        attacked_image: codec.decode(&attacked_latent)?,
        perturbation_norm,
        loss_trace: trace,
    })
}

/// Mean residual between equal-sized sets of watermarked and clean images.
pub fn avg_residual(watermarked: &[Image], clean: &[Image]) -> Result<Array3<f64>> {
    if watermarked.is_empty() || watermarked.len() != clean.len() {
        return Err(arg_err(format!(
            "averaging needs equal nonempty sets (got {} and {})",
            watermarked.len(),
            clean.len()
        )));
    }
    let shape = watermarked[0].raw_dim();
    if watermarked
        .iter()
        .chain(clean.iter())
        .any(|img| img.raw_dim() != shape)
    {
        return Err(arg_err("image shapes differ across the averaging sets"));
    }
    let n = watermarked.len() as f64;
    let mut acc = Array3::<f64>::zeros(shape);
    for img in watermarked {
        acc = acc + img;
    }
    for img in clean {
        acc = acc - img;
    }
    Ok(acc.mapv(|v| v / n))
}

/// Subtract the averaged residual from a watermarked image.
pub fn avg_removal(watermarked: &Image, residual: &Array3<f64>) -> Result<Image> {
    if watermarked.raw_dim() != residual.raw_dim() {
        return Err(arg_err("residual shape does not match the image"));
    }
    Ok((watermarked - residual).mapv(|v| v.clamp(0.0, 1.0)))
}

/// Add the averaged residual to a clean image.
pub fn avg_forgery(clean: &Image, residual: &Array3<f64>) -> Result<Image> {
    if clean.raw_dim() != residual.raw_dim() {
        return Err(arg_err("residual shape does not match the image"));
    }
    Ok((clean + residual).mapv(|v| v.clamp(0.0, 1.0)))
}

/// Encoder-space removal: drive the encoded attacked image toward the
/// encoding of a flat image at the watermarked image's mean value, with an
/// L2 penalty keeping the perturbation small.
pub fn vae_removal(
    surrogate: &Pipeline,
    watermarked: &Image,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let mean = watermarked.sum() / watermarked.len() as f64;
    let target = Array3::from_elem(watermarked.raw_dim(), mean);
    vae_attack(surrogate, watermarked, &target, cfg)
}

/// Encoder-space forgery: drive the encoded attacked image toward the
/// encoding of a single leaked watermarked reference.
pub fn vae_forgery(
    surrogate: &Pipeline,
    clean: &Image,
    reference_watermarked: &Image,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if clean.raw_dim() != reference_watermarked.raw_dim() {
        return Err(arg_err("clean and reference image shapes differ"));
    }
    vae_attack(surrogate, clean, reference_watermarked, cfg)
}

fn vae_attack(
    surrogate: &Pipeline,
    base: &Image,
    target: &Image,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if cfg.steps < 1 {
        return Err(arg_err("attack steps must be at least 1"));
    }
    let codec = surrogate.codec();
    let diff = base - target;
    let c = codec.encode_linear(&diff);
    let apply = |d: &Array3<f64>| codec.encode_linear(d);
    let adjoint = |v: &Array3<f64>| codec.encode_adjoint(v);
    let shape = (base.shape()[0], base.shape()[1], base.shape()[2]);
    let (delta, trace) = descend(apply, adjoint, &c, shape, cfg.steps, cfg.lr, cfg.lambda);
    let perturbation_norm = l2_norm(&delta);
    let attacked = (base + &delta).mapv(|v| v.clamp(0.0, 1.0));
    Ok(AttackResult {
        attacked_image: attacked,
        perturbation_norm,
        loss_trace: trace,
    })
}

/// Idealized removal oracle: negate the encoded latent and decode. A fully
/// converged imprinting removal against an invertible surrogate lands here;
/// one-sided detection collapses on it while two-sided detection does not.
pub fn latent_sign_flip(surrogate: &Pipeline, image: &Image) -> Result<Image> {
    let z = surrogate.codec().encode(image)?;
    surrogate
        .codec()
        .decode(&Latent::new(z.data.mapv(|v| -v), 0))
}

/// Largest singular value of a linear operator, estimated by power
/// iteration on `A^T A`. Used to pick convergent step sizes for the
/// gradient attacks on toy surrogates.
pub fn operator_norm_estimate<A, At>(
    apply: A,
    adjoint: At,
    shape: (usize, usize, usize),
    iterations: usize,
    seed: u64,
) -> f64
where
    A: Fn(&Array3<f64>) -> Array3<f64>,
    At: Fn(&Array3<f64>) -> Array3<f64>,
{
    use rand::Rng;
    let mut rng = crate::rng::rng_for(seed, "power-iteration", 0);
    let mut v = Array3::from_shape_simple_fn(shape, || rng.gen::<f64>() - 0.5);
    let mut sigma2 = 0.0;
    for _ in 0..iterations {
        let norm = l2_norm(&v);
        if norm == 0.0 {
            break;
        }
        v.mapv_inplace(|x| x / norm);
        let w = adjoint(&apply(&v));
        sigma2 = v.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
        v = w;
    }
    sigma2.max(0.0).sqrt()
}

/// Learning rate that makes the least-squares descent converge:
/// `0.9 / (sigma_max^2 + lambda)`.
pub fn convergent_lr(sigma_max: f64, lambda: f64) -> f64 {
    0.9 / (sigma_max * sigma_max + lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, BackendConfig, BackendKind};
    use crate::codec::{CodecConfig, ToyCodec};
    use crate::freq::make_ring_pattern;
    use crate::pipeline::SchemeConfig;
    use crate::rng;
    use rand::Rng;

    fn toy_pipeline(kind: BackendKind) -> Pipeline {
        let backend = Backend::new(BackendConfig::toy_small(kind)).unwrap();
        // Extra gain headroom and an amplitude matched to the initial-noise
        // spectrum keep every latent excursion inside the pixel range, so
        // the clamp never interferes with the exact-identity assertions.
        let codec = ToyCodec::new(
            CodecConfig {
                seed: 5,
                gain: 0.1 / 9.0,
                upsample: 2,
            },
            4,
            (16, 16),
        )
        .unwrap();
        let (pattern, mask) = make_ring_pattern(42, 4, (16, 16), 0, 16.0, false).unwrap();
        Pipeline::new(backend, codec, pattern, mask).unwrap()
    }

    fn ctx() -> PromptContext {
        PromptContext::new("attack prompt", 3)
    }

    fn watermarked_image(p: &Pipeline, ctx: &PromptContext) -> Image {
        p.generate_watermarked(ctx, None, &SchemeConfig::tree_ring())
            .unwrap()
            .0
    }

    fn inversion_lr(p: &Pipeline, ctx: &PromptContext) -> f64 {
        let backend = p.backend();
        let t = backend.total_steps();
        let sigma = operator_norm_estimate(
            |d| {
                backend
                    .invert(ctx, &Latent::new(d.clone(), 0), t)
                    .unwrap()
                    .data
            },
            |v| backend.invert_adjoint(ctx, v, t).unwrap(),
            (4, 16, 16),
            40,
            7,
        );
        convergent_lr(sigma, 0.0)
    }

    #[test]
    fn no_op_descent_returns_the_decoded_base_latent() {
        let p = toy_pipeline(BackendKind::ToyScale);
        let ctx = ctx();
        let img = watermarked_image(&p, &ctx);
        let cfg = AttackConfig {
            lr: 0.0,
            steps: 1,
            ..AttackConfig::new(AttackKind::ImpRemoval)
        };
        let out = imp_removal(&p, &ctx, &img, &cfg).unwrap();
        assert_eq!(out.loss_trace.len(), 1);
        assert_eq!(out.perturbation_norm, 0.0);
        let base = p.codec().decode(&p.codec().encode(&img).unwrap()).unwrap();
        assert_eq!(out.attacked_image, base);
    }

    #[test]
    fn zero_steps_is_rejected() {
        let p = toy_pipeline(BackendKind::ToyScale);
        let img = watermarked_image(&p, &ctx());
        let cfg = AttackConfig {
            steps: 0,
            ..AttackConfig::new(AttackKind::ImpRemoval)
        };
        assert!(imp_removal(&p, &ctx(), &img, &cfg).is_err());
        assert!(cfg.validate().is_err());
        assert!(AttackConfig::new(AttackKind::ImpRemoval).validate().is_ok());
    }

    #[test]
    fn converged_removal_negates_the_inverted_latent() {
        // The closed-form optimum of the removal objective against a linear
        // surrogate sends the inverted latent to its negation; the converged
        // perturbation is -2 z_0.
        let p = toy_pipeline(BackendKind::ToyScale);
        let ctx = ctx();
        let img = watermarked_image(&p, &ctx);
        let cfg = AttackConfig {
            lr: inversion_lr(&p, &ctx),
            steps: 150,
            ..AttackConfig::new(AttackKind::ImpRemoval)
        };
        let out = imp_removal(&p, &ctx, &img, &cfg).unwrap();
        assert!(out.loss_trace[149] < 0.1 * out.loss_trace[0]);

        let z0 = p.codec().encode(&img).unwrap();
        let attacked_z0 = p.codec().encode(&out.attacked_image).unwrap();
        // decode clamps, so compare through the sign-flip oracle image.
        let oracle = latent_sign_flip(&p, &img).unwrap();
        let err = out
            .attacked_image
            .iter()
            .zip(oracle.iter())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(err < 1e-6, "converged removal differs from sign flip: {err}");
        let z_norm = z0.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((out.perturbation_norm - 2.0 * z_norm).abs() < 1e-3 * z_norm.max(1.0));
        let t = p.backend().total_steps();
        let inv_base = p.backend().invert(&ctx, &z0, t).unwrap().data;
        let inv_attacked = p.backend().invert(&ctx, &attacked_z0, t).unwrap().data;
        let flip_err = inv_attacked
            .iter()
            .zip(inv_base.iter())
            .fold(0.0f64, |a, (x, y)| a.max((x + y).abs()));
        assert!(flip_err < 1e-5, "inverted latent not negated: {flip_err}");
    }

    #[test]
    fn loss_trace_is_non_increasing_on_linear_surrogates() {
        let p = toy_pipeline(BackendKind::ToyLinear);
        let ctx = ctx();
        let img = watermarked_image(&p, &ctx);
        let cfg = AttackConfig {
            lr: inversion_lr(&p, &ctx),
            steps: 60,
            ..AttackConfig::new(AttackKind::ImpRemoval)
        };
        let out = imp_removal(&p, &ctx, &img, &cfg).unwrap();
        for pair in out.loss_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-6, "loss increased: {pair:?}");
        }
    }

    #[test]
    fn forging_an_already_watermarked_reference_is_a_fixed_point() {
        // When the "clean" input already carries the reference watermark the
        // forgery objective starts at its optimum and descent stays there.
        let p = toy_pipeline(BackendKind::ToyScale);
        let ctx = ctx();
        let img = watermarked_image(&p, &ctx);
        let cfg = AttackConfig {
            lr: inversion_lr(&p, &ctx),
            steps: 50,
            ..AttackConfig::new(AttackKind::ImpForgery)
        };
        let out = imp_forgery(&p, &ctx, &img, &img, &cfg).unwrap();
        assert!(out.perturbation_norm < 1e-9);
        assert!(out.loss_trace.iter().all(|&l| l < 1e-12));
        // Detection agrees with the reference's own detection outcome.
        let scheme = SchemeConfig::tree_ring();
        let (d_ref, _, _) = p.score(&ctx, &img, None, &scheme).unwrap();
        let (d_forged, _, _) = p.score(&ctx, &out.attacked_image, None, &scheme).unwrap();
        assert!((d_ref - d_forged).abs() < 1e-6);
    }

    #[test]
    fn averaging_identities() {
        let p = toy_pipeline(BackendKind::ToyScale);
        let ctx = ctx();
        let img = watermarked_image(&p, &ctx);
        let imgs = vec![img.clone(), img.clone()];
        // Identical lists give a zero residual.
        let residual = avg_residual(&imgs, &imgs).unwrap();
        assert!(residual.iter().all(|&v| v.abs() < 1e-15));
        // N = 1 is a plain difference.
        let other = p.generate_plain(&ctx).unwrap();
        let diff = avg_residual(&[img.clone()], &[other.clone()]).unwrap();
        let expect = &img - &other;
        assert!(diff
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-15));
        // Count mismatch rejected.
        assert!(avg_residual(&imgs, &[other.clone()]).is_err());
        // Zero residual is the identity for both directions.
        let zero = Array3::zeros(img.raw_dim());
        assert_eq!(avg_removal(&img, &zero).unwrap(), img);
        assert_eq!(avg_forgery(&img, &zero).unwrap(), img);
    }

    #[test]
    fn avg_forgery_inverts_avg_removal_without_clamping() {
        let p = toy_pipeline(BackendKind::ToyScale);
        let ctx = ctx();
        let img = watermarked_image(&p, &ctx);
        let mut rng = rng::rng_for(5, "attack-test", 0);
        let residual = Array3::from_shape_simple_fn(img.raw_dim(), || {
            0.001 * (rng.gen::<f64>() - 0.5)
        });
        let removed = avg_removal(&img, &residual).unwrap();
        let restored = avg_forgery(&removed, &residual).unwrap();
        let interior_ok = img
            .iter()
            .zip(restored.iter())
            .filter(|(&orig, _)| orig > 0.01 && orig < 0.99)
            .all(|(a, b)| (a - b).abs() < 1e-12);
        assert!(interior_ok);
    }

    #[test]
    fn huge_lambda_suppresses_the_vae_perturbation() {
        let p = toy_pipeline(BackendKind::ToyScale);
        let img = watermarked_image(&p, &ctx());
        let cfg = AttackConfig {
            lambda: 1e12,
            lr: 1e-13,
            steps: 50,
            ..AttackConfig::new(AttackKind::VaeRemoval)
        };
        let out = vae_removal(&p, &img, &cfg).unwrap();
        assert!(out.perturbation_norm < 1e-6);
        let err = out
            .attacked_image
            .iter()
            .zip(img.iter())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(err < 1e-6);
    }

    #[test]
    fn vae_forgery_of_the_reference_itself_is_a_no_op() {
        let p = toy_pipeline(BackendKind::ToyScale);
        let img = watermarked_image(&p, &ctx());
        let cfg = AttackConfig {
            steps: 30,
            ..AttackConfig::new(AttackKind::VaeForgery)
        };
        let out = vae_forgery(&p, &img, &img, &cfg).unwrap();
        assert_eq!(out.perturbation_norm, 0.0);
        assert_eq!(out.attacked_image, img);
    }

    #[test]
    fn vae_perturbation_grows_as_lambda_shrinks() {
        let p = toy_pipeline(BackendKind::ToyScale);
        let img = watermarked_image(&p, &ctx());
        let codec = p.codec();
        let sigma = operator_norm_estimate(
            |d| codec.encode_linear(d),
            |v| codec.encode_adjoint(v),
            (4, 32, 32),
            40,
            11,
        );
        let mut norms = Vec::new();
        for &lambda in &[5e3, 5e4, 5e5] {
            let cfg = AttackConfig {
                lambda,
                lr: convergent_lr(sigma, lambda),
                steps: 200,
                ..AttackConfig::new(AttackKind::VaeRemoval)
            };
            norms.push(vae_removal(&p, &img, &cfg).unwrap().perturbation_norm);
        }
        assert!(
            norms[0] > norms[1] && norms[1] > norms[2],
            "perturbation norms not monotone in 1/lambda: {norms:?}"
        );
    }

    #[test]
    fn sign_flip_oracle_defeats_one_sided_detection_only() {
        // Conjugate-symmetric rings make centered replacement lossless, so
        // the marked score sits at numerical zero and the flipped score at
        // exactly twice the mean pattern magnitude.
        let backend = Backend::new(BackendConfig::toy_small(BackendKind::ToyScale)).unwrap();
        let codec = ToyCodec::new(
            CodecConfig {
                seed: 5,
                gain: 0.1 / 9.0,
                upsample: 2,
            },
            4,
            (16, 16),
        )
        .unwrap();
        let (pattern, mask) = make_ring_pattern(42, 4, (16, 16), 0, 16.0, true).unwrap();
        let p = Pipeline::new(backend, codec, pattern, mask).unwrap();
        let ctx = ctx();
        let img = watermarked_image(&p, &ctx);
        let flipped = latent_sign_flip(&p, &img).unwrap();
        let one = SchemeConfig::tree_ring();
        let two = SchemeConfig {
            two_sided: true,
            ..SchemeConfig::tree_ring()
        };
        let (d_marked_one, _, _) = p.score(&ctx, &img, None, &one).unwrap();
        let (d_flip_one, _, _) = p.score(&ctx, &flipped, None, &one).unwrap();
        let (d_flip_two, side, _) = p.score(&ctx, &flipped, None, &two).unwrap();
        assert!(d_flip_one > 100.0 * d_marked_one.max(1e-9));
        assert!(d_flip_two < 1e-3 * d_flip_one);
        assert_eq!(side, crate::pipeline::Side::Minus);
    }
}
