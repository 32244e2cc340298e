//! End-to-end watermark injection and two-sided detection, plus the static
//! one-sided baseline and the ablation variants.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, PromptContext};
use crate::codec::{Image, ToyCodec};
use crate::error::{arg_err, Result};
use crate::freq::{self, FreqMask, Offset, PatternSpec};
use crate::selector::{self, SelectorModel};

/// Instance-specific injection parameters: timestep and pattern offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InjectionParams {
    pub t: usize,
    pub offset: Offset,
}

/// Which branch of the two-sided minimum matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Plus,
    Minus,
}

/// Outcome of a detection run.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Nonnegative statistic; lower is more watermark-like.
    pub d: f64,
    pub side: Side,
    pub threshold: f64,
    /// `d < threshold`.
    pub decision: bool,
    pub params_used: InjectionParams,
}

/// Scheme switches: the full dynamic two-sided scheme has all three enabled;
/// disabling all three with injection at the initial noise step reproduces
/// the static one-sided ring baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub dynamic_pattern: bool,
    pub dynamic_injection: bool,
    pub two_sided: bool,
    /// Timestep used when `dynamic_injection` is off; `None` injects into
    /// the initial noise latent at `T`.
    pub fixed_t: Option<usize>,
    /// Offset used when `dynamic_pattern` is off.
    pub fixed_offset: Offset,
    /// Compare spectra by per-component absolute value instead of complex
    /// modulus.
    pub per_component_abs: bool,
}

impl SchemeConfig {
    /// Instance-specific two-sided scheme.
    pub fn ists() -> Self {
        Self {
            dynamic_pattern: true,
            dynamic_injection: true,
            two_sided: true,
            fixed_t: None,
            fixed_offset: Offset::ZERO,
            per_component_abs: false,
        }
    }

    /// Static one-sided baseline: fixed centered pattern injected into the
    /// initial noise.
    pub fn tree_ring() -> Self {
        Self {
            dynamic_pattern: false,
            dynamic_injection: false,
            two_sided: false,
            fixed_t: None,
            fixed_offset: Offset::ZERO,
            per_component_abs: false,
        }
    }

    /// Ablation: fixed centered offset, dynamic timestep, two-sided.
    pub fn without_dynamic_pattern() -> Self {
        Self {
            dynamic_pattern: false,
            ..Self::ists()
        }
    }

    /// Ablation: dynamic offset, fixed mid-range timestep, two-sided.
    pub fn without_dynamic_injection(fixed_t: usize) -> Self {
        Self {
            dynamic_injection: false,
            fixed_t: Some(fixed_t),
            ..Self::ists()
        }
    }

    /// Ablation: fully dynamic but one-sided detection.
    pub fn one_sided() -> Self {
        Self {
            two_sided: false,
            ..Self::ists()
        }
    }

    fn needs_selector(&self) -> bool {
        self.dynamic_pattern || self.dynamic_injection
    }
}

fn deviation(a: Complex64, b: Complex64, per_component: bool) -> f64 {
    if per_component {
        (a.re - b.re).abs() + (a.im - b.im).abs()
    } else {
        (a - b).norm()
    }
}

/// One-sided statistic: mean deviation between the pattern and the spectrum.
pub fn one_sided_statistic(
    pattern: &[Complex64],
    spectrum: &[Complex64],
    per_component: bool,
) -> f64 {
    assert_eq!(pattern.len(), spectrum.len());
    let n = pattern.len().max(1) as f64;
    pattern
        .iter()
        .zip(spectrum.iter())
        .map(|(&w, &s)| deviation(w, s, per_component))
        .sum::<f64>()
        / n
}

/// Two-sided statistic: minimum deviation to the pattern and its negation,
/// with the matched side.
pub fn two_sided_statistic(
    pattern: &[Complex64],
    spectrum: &[Complex64],
    per_component: bool,
) -> (f64, Side) {
    let plus = one_sided_statistic(pattern, spectrum, per_component);
    let minus = {
        let negated: Vec<Complex64> = spectrum.iter().map(|&s| -s).collect();
        one_sided_statistic(pattern, &negated, per_component)
    };
    if plus <= minus {
        (plus, Side::Plus)
    } else {
        (minus, Side::Minus)
    }
}

/// Generation/detection engine bundling a backend, a codec and the base
/// pattern.
pub struct Pipeline {
    backend: Backend,
    codec: ToyCodec,
    pattern: PatternSpec,
    mask: FreqMask,
}

impl Pipeline {
    pub fn new(backend: Backend, codec: ToyCodec, pattern: PatternSpec, mask: FreqMask) -> Result<Self> {
        let cfg = backend.config();
        if pattern.plane_shape != (cfg.height, cfg.width) {
            return Err(arg_err("pattern plane does not match the backend latent"));
        }
        if pattern.channel >= cfg.channels {
            return Err(arg_err("pattern channel out of range"));
        }
        Ok(Self {
            backend,
            codec,
            pattern,
            mask,
        })
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn codec(&self) -> &ToyCodec {
        &self.codec
    }

    pub fn base_pattern(&self) -> (&PatternSpec, &FreqMask) {
        (&self.pattern, &self.mask)
    }

    fn resolve_params(
        &self,
        scheme: &SchemeConfig,
        selector: Option<&SelectorModel>,
        image: &Image,
    ) -> Result<InjectionParams> {
        let selected = if scheme.needs_selector() {
            let model = selector.ok_or_else(|| {
                arg_err("scheme with dynamic parameters requires a selector model")
            })?;
            Some(selector::select(model, image))
        } else {
            None
        };
        let t = if scheme.dynamic_injection {
            selected.expect("selector ran").t
        } else {
            scheme.fixed_t.unwrap_or_else(|| self.backend.total_steps())
        };
        let offset = if scheme.dynamic_pattern {
            selected.expect("selector ran").offset
        } else {
            scheme.fixed_offset
        };
        if t == 0 || t > self.backend.total_steps() {
            return Err(arg_err(format!("injection timestep {t} out of range")));
        }
        Ok(InjectionParams { t, offset })
    }

    /// Deterministic non-watermarked generation: full denoise then decode.
    pub fn generate_plain(&self, ctx: &PromptContext) -> Result<Image> {
        let z_t = self.backend.sample_initial_noise(ctx)?;
        let z_0 = self.backend.denoise(ctx, &z_t, 0)?;
        self.codec.decode(&z_0)
    }

    /// Watermarked generation: selects parameters from the non-watermarked
    /// image, re-runs the sampler from the same initial noise, injects the
    /// offset pattern at the selected step and denoises to an image.
    pub fn generate_watermarked(
        &self,
        ctx: &PromptContext,
        selector: Option<&SelectorModel>,
        scheme: &SchemeConfig,
    ) -> Result<(Image, InjectionParams)> {
        let plain = self.generate_plain(ctx)?;
        let params = self.resolve_params(scheme, selector, &plain)?;
        let (pattern, mask) = freq::offset_pattern(&self.pattern, &self.mask, params.offset)?;

        let z_top = self.backend.sample_initial_noise(ctx)?;
        let t_total = self.backend.total_steps();
        let z_t = if params.t == t_total {
            z_top
        } else {
            self.backend.denoise(ctx, &z_top, params.t)?
        };
        let marked = freq::inject(&z_t, &pattern, &mask)?;
        let z_0 = self.backend.denoise(ctx, &marked, 0)?;
        Ok((self.codec.decode(&z_0)?, params))
    }

    /// Watermarked generation with the injection parameters pinned by the
    /// caller (bypasses the selector).
    pub fn generate_watermarked_at(
        &self,
        ctx: &PromptContext,
        _scheme: &SchemeConfig,
        params: InjectionParams,
    ) -> Result<(Image, InjectionParams)> {
        if params.t == 0 || params.t > self.backend.total_steps() {
            return Err(arg_err(format!(
                "injection timestep {} out of range",
                params.t
            )));
        }
        let (pattern, mask) = freq::offset_pattern(&self.pattern, &self.mask, params.offset)?;
        let z_top = self.backend.sample_initial_noise(ctx)?;
        let t_total = self.backend.total_steps();
        let z_t = if params.t == t_total {
            z_top
        } else {
            self.backend.denoise(ctx, &z_top, params.t)?
        };
        let marked = freq::inject(&z_t, &pattern, &mask)?;
        let z_0 = self.backend.denoise(ctx, &marked, 0)?;
        Ok((self.codec.decode(&z_0)?, params))
    }

    /// Detection statistic for a suspicious image: encode, select, invert to
    /// the selected step, extract the offset band and compare against the
    /// pattern.
    pub fn score(
        &self,
        ctx: &PromptContext,
        image: &Image,
        selector: Option<&SelectorModel>,
        scheme: &SchemeConfig,
    ) -> Result<(f64, Side, InjectionParams)> {
        let params = self.resolve_params(scheme, selector, image)?;
        let (pattern, mask) = freq::offset_pattern(&self.pattern, &self.mask, params.offset)?;
        let z_0 = self.codec.encode(image)?;
        let z_t = self.backend.invert(ctx, &z_0, params.t)?;
        let spectrum = freq::extract(&z_t, &mask)?;
        let expected = pattern.values(&mask);
        let (d, side) = if scheme.two_sided {
            two_sided_statistic(&expected, &spectrum, scheme.per_component_abs)
        } else {
            (
                one_sided_statistic(&expected, &spectrum, scheme.per_component_abs),
                Side::Plus,
            )
        };
        Ok((d, side, params))
    }

    /// Full detection with a decision threshold.
    pub fn detect(
        &self,
        ctx: &PromptContext,
        image: &Image,
        selector: Option<&SelectorModel>,
        scheme: &SchemeConfig,
        threshold: f64,
    ) -> Result<DetectionResult> {
        let (d, side, params_used) = self.score(ctx, image, selector, scheme)?;
        Ok(DetectionResult {
            d,
            side,
            threshold,
            decision: d < threshold,
            params_used,
        })
    }

    /// Empirical threshold at a target false-positive rate over benign
    /// detection scores.
    pub fn calibrate_threshold(
        &self,
        ctx: &PromptContext,
        benign: &[Image],
        selector: Option<&SelectorModel>,
        scheme: &SchemeConfig,
        target_fpr: f64,
    ) -> Result<f64> {
        if !(target_fpr > 0.0 && target_fpr <= 1.0) {
            return Err(arg_err("target FPR must lie in (0, 1]"));
        }
        let needed = (1.0 / target_fpr).ceil() as usize;
        if benign.len() < needed {
            return Err(arg_err(format!(
                "{} benign images are too few for FPR {target_fpr} (need >= {needed})",
                benign.len()
            )));
        }
        let mut scores = Vec::with_capacity(benign.len());
        for img in benign {
            scores.push(self.score(ctx, img, selector, scheme)?.0);
        }
        Ok(threshold_at_fpr(&scores, target_fpr))
    }
}

/// Largest practical threshold whose empirical FPR stays at or below the
/// target, with decisions made by strict `d < tau`.
///
/// With `k = floor(fpr * n)` benign scores allowed below the threshold, the
/// threshold is the midpoint between the k-th and (k+1)-th smallest benign
/// scores (`k = 0` pins it to the minimum, which the strict comparison
/// already excludes).
pub fn threshold_at_fpr(benign_scores: &[f64], fpr: f64) -> f64 {
    assert!(!benign_scores.is_empty());
    let mut sorted = benign_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let k = ((fpr * n as f64) + 1e-9).floor() as usize;
    if k == 0 {
        sorted[0]
    } else if k >= n {
        f64::INFINITY
    } else {
        0.5 * (sorted[k - 1] + sorted[k])
    }
}
