//! Deterministic DDIM denoising and exact inversion.
//!
//! Two toy backends make the sampler update exactly invertible so that
//! watermark arithmetic can be tested without inversion error:
//!
//! * `toy-scale` — the noise predictor returns zero, so each sampler step is
//!   a pure rescale by `sqrt(alpha_prev / alpha)`.
//! * `toy-linear` — the noise predictor is a fixed seeded 3x3 circular
//!   convolution, so each step is an invertible linear map solved exactly in
//!   the Fourier domain.
//!
//! External latent-diffusion models plug in through [`LatentDiffusion`].

use std::sync::Arc;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, LabError, Result};
use crate::fft;
use crate::rng;

/// Cumulative noise coefficients `alpha_t` for `t = 0..=T`.
///
/// `alpha_0 = 1` by convention; values are strictly decreasing and lie in
/// `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(arg_err("schedule needs at least two entries"));
        }
        if alphas[0] != 1.0 {
            return Err(arg_err("schedule must start at alpha_0 = 1"));
        }
        for pair in alphas.windows(2) {
            if !(pair[1] < pair[0]) {
                return Err(arg_err("schedule must be strictly decreasing"));
            }
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0) || !a.is_finite()) {
            return Err(arg_err("schedule values must lie in (0, 1]"));
        }
        Ok(Self { alphas })
    }

    /// Linear decay from 1.0 down to `alpha_end` over `t_total` steps.
    pub fn linear(t_total: usize, alpha_end: f64) -> Result<Self> {
        if t_total == 0 {
            return Err(arg_err("t_total must be positive"));
        }
        let alphas = (0..=t_total)
            .map(|t| 1.0 - (1.0 - alpha_end) * t as f64 / t_total as f64)
            .collect();
        Self::new(alphas)
    }

    pub fn total_steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// Rescale factor of one noise-free sampler step `t -> t-1`.
    pub fn step_scale(&self, t: usize) -> f64 {
        (self.alpha(t - 1) / self.alpha(t)).sqrt()
    }

    /// Coefficient multiplying the predicted noise in one step `t -> t-1`.
    pub fn step_noise_coeff(&self, t: usize) -> f64 {
        (1.0 - self.alpha(t - 1)).sqrt() - self.step_scale(t) * (1.0 - self.alpha(t)).sqrt()
    }
}

/// Diffusion state: a real tensor of shape `(channels, h, w)` at a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Array3<f64>,
    pub timestep: usize,
}

impl Latent {
    pub fn new(data: Array3<f64>, timestep: usize) -> Self {
        Self { data, timestep }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// Prompt plus run seed; identical contexts drive identical toy behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub prompt: String,
    pub seed: u64,
    /// Classifier-free guidance scale, passed through to external adapters.
    /// Toy backends ignore it.
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
}

fn default_guidance() -> f64 {
    1.0
}

impl PromptContext {
    pub fn new(prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            seed,
            guidance_scale: 1.0,
        }
    }

    fn noise_seed(&self) -> [u8; 32] {
        rng::prompt_seed(&self.prompt, self.seed)
    }
}

/// Which denoiser implementation backs the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    ToyScale,
    ToyLinear,
    ExternalAdapter,
}

/// Backend configuration; serializable into run-config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub schedule: NoiseSchedule,
    /// Seed of the fixed linear noise predictor (toy-linear only).
    #[serde(default)]
    pub linear_op_seed: u64,
    /// Registry name of the external adapter (external-adapter only).
    #[serde(default)]
    pub adapter: Option<String>,
}

impl BackendConfig {
    /// Small profile used by fast unit tests.
    pub fn toy_small(kind: BackendKind) -> Self {
        Self {
            kind,
            channels: 4,
            height: 16,
            width: 16,
            schedule: NoiseSchedule::linear(50, 0.01).expect("valid default schedule"),
            linear_op_seed: 17,
            adapter: None,
        }
    }

    /// Ring-geometry profile: large enough to host a radius-20 mask at every
    /// offset in `[-12, 12]^2`.
    pub fn toy_ring(kind: BackendKind) -> Self {
        Self {
            kind,
            channels: 4,
            height: 72,
            width: 72,
            schedule: NoiseSchedule::linear(50, 0.01).expect("valid default schedule"),
            linear_op_seed: 17,
            adapter: None,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps()
    }
}

/// Contract for external latent-diffusion adapters.
///
/// Adapters own their inversion method and may optionally expose adjoint
/// products for gradient-based attacks.
pub trait LatentDiffusion: Send + Sync {
    fn name(&self) -> &str;
    fn sample_initial_noise(&self, ctx: &PromptContext) -> Result<Latent>;
    fn predict_noise(&self, ctx: &PromptContext, z: &Latent, t: usize) -> Result<Array3<f64>>;
    fn denoise(&self, ctx: &PromptContext, z: &Latent, t_to: usize) -> Result<Latent>;
    fn invert(&self, ctx: &PromptContext, z: &Latent, t_to: usize) -> Result<Latent>;
    /// Adjoint of the (linearized) inversion map, for gradient attacks.
    /// Returns `AttackUnsupported` when the adapter cannot differentiate.
    fn invert_adjoint(&self, _ctx: &PromptContext, _v: &Array3<f64>) -> Result<Array3<f64>> {
        Err(LabError::AttackUnsupported(
            "adapter does not expose gradients".into(),
        ))
    }
}

/// A constructed denoising backend.
#[derive(Clone)]
pub struct Backend {
    cfg: BackendConfig,
    kernel: Option<ConvKernel>,
    adapter: Option<Arc<dyn LatentDiffusion>>,
}

/// Fixed 3x3 circular-convolution noise predictor with precomputed
/// Fourier eigenvalues for the configured plane.
#[derive(Debug, Clone)]
struct ConvKernel {
    taps: [[f64; 3]; 3],
    /// Uncentered DFT of the kernel over the configured plane.
    eigen: Array2<Complex64>,
}

impl ConvKernel {
    fn new(seed: u64, h: usize, w: usize, schedule: &NoiseSchedule) -> Result<Self> {
        let mut rng = rng::rng_for(seed, "toy-linear-kernel", 0);
        let mut taps = [[0.0f64; 3]; 3];
        let mut l1 = 0.0;
        for row in taps.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
                l1 += v.abs();
            }
        }
        // Keep the operator a mild perturbation: with L1 norm 0.8 every
        // Fourier eigenvalue of the kernel has modulus <= 0.8, which keeps
        // all sampler steps well away from singular.
        for row in taps.iter_mut() {
            for v in row.iter_mut() {
                *v *= 0.8 / l1;
            }
        }
        let eigen = Array2::from_shape_fn((h, w), |(u, v)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (pi, row) in taps.iter().enumerate() {
                let p = pi as isize - 1;
                for (qi, &k) in row.iter().enumerate() {
                    let q = qi as isize - 1;
                    // `apply` gathers data[(i+p, j+q)], so the Fourier
                    // eigenvalue carries a positive phase.
                    let phase = 2.0
                        * std::f64::consts::PI
                        * (p as f64 * u as f64 / h as f64 + q as f64 * v as f64 / w as f64);
                    acc += k * Complex64::from_polar(1.0, phase);
                }
            }
            acc
        });
        let kernel = Self { taps, eigen };
        kernel.check_invertible(schedule)?;
        Ok(kernel)
    }

    /// Every per-step operator `a_t I + b_t L` must be invertible.
    fn check_invertible(&self, schedule: &NoiseSchedule) -> Result<()> {
        for t in 1..=schedule.total_steps() {
            let a = schedule.step_scale(t);
            let b = schedule.step_noise_coeff(t);
            let mut min_mod = f64::INFINITY;
            let mut max_mod: f64 = 0.0;
            for &lam in self.eigen.iter() {
                let m = (Complex64::new(a, 0.0) + b * lam).norm();
                min_mod = min_mod.min(m);
                max_mod = max_mod.max(m);
            }
            if min_mod < 1e-9 || !(max_mod / min_mod).is_finite() {
                return Err(LabError::Backend(format!(
                    "toy-linear step {t} is numerically singular (min eigen {min_mod:.3e})"
                )));
            }
        }
        Ok(())
    }

    /// Spatial circular convolution with the 3x3 taps, per channel.
    fn apply(&self, data: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = (data.shape()[0], data.shape()[1], data.shape()[2]);
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (pi, row) in self.taps.iter().enumerate() {
                        let p = pi as isize - 1;
                        let si = (i as isize + p).rem_euclid(h as isize) as usize;
                        for (qi, &k) in row.iter().enumerate() {
                            let q = qi as isize - 1;
                            let sj = (j as isize + q).rem_euclid(w as isize) as usize;
                            acc += k * data[(ch, si, sj)];
                        }
                    }
                    out[(ch, i, j)] = acc;
                }
            }
        }
        out
    }

    /// Solve `(a I + b L) x = rhs` exactly in the Fourier domain.
    /// With `conjugate = true` the eigenvalues are conjugated, which applies
    /// the inverse of the adjoint step instead.
    fn solve(&self, rhs: &Array3<f64>, a: f64, b: f64, conjugate: bool) -> Array3<f64> {
        let (c, h, w) = (rhs.shape()[0], rhs.shape()[1], rhs.shape()[2]);
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let plane = rhs
                .index_axis(ndarray::Axis(0), ch)
                .to_owned()
                .mapv(|v| Complex64::new(v, 0.0));
            let mut spec = fft::fft2(&plane);
            for ((u, v), cell) in spec.indexed_iter_mut() {
                let mut lam = self.eigen[(u, v)];
                if conjugate {
                    lam = lam.conj();
                }
                *cell /= Complex64::new(a, 0.0) + b * lam;
            }
            let spatial = fft::ifft2(&spec);
            for i in 0..h {
                for j in 0..w {
                    out[(ch, i, j)] = spatial[(i, j)].re;
                }
            }
        }
        out
    }

    /// Adjoint of the spatial convolution (taps flipped in both axes).
    fn apply_adjoint(&self, data: &Array3<f64>) -> Array3<f64> {
        let flipped = ConvKernel {
            taps: {
                let mut t = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        t[i][j] = self.taps[2 - i][2 - j];
                    }
                }
                t
            },
            eigen: self.eigen.clone(),
        };
        flipped.apply(data)
    }
}

impl Backend {
    pub fn new(cfg: BackendConfig) -> Result<Self> {
        Self::with_adapter(cfg, None)
    }

    pub fn with_adapter(
        cfg: BackendConfig,
        adapter: Option<Arc<dyn LatentDiffusion>>,
    ) -> Result<Self> {
        if cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 {
            return Err(arg_err("latent dimensions must be positive"));
        }
        if cfg.height % 2 != 0 || cfg.width % 2 != 0 {
            return Err(arg_err("latent plane dimensions must be even"));
        }
        let kernel = match cfg.kind {
            BackendKind::ToyLinear => Some(ConvKernel::new(
                cfg.linear_op_seed,
                cfg.height,
                cfg.width,
                &cfg.schedule,
            )?),
            _ => None,
        };
        if cfg.kind == BackendKind::ExternalAdapter && adapter.is_none() {
            return Err(LabError::Backend(format!(
                "external adapter {:?} is not registered",
                cfg.adapter
            )));
        }
        Ok(Self {
            cfg,
            kernel,
            adapter,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.total_steps()
    }

    fn check_shape(&self, z: &Latent) -> Result<()> {
        let (c, h, w) = z.shape();
        if (c, h, w) != (self.cfg.channels, self.cfg.height, self.cfg.width) {
            return Err(arg_err(format!(
                "latent shape ({c},{h},{w}) does not match backend ({},{},{})",
                self.cfg.channels, self.cfg.height, self.cfg.width
            )));
        }
        Ok(())
    }

    /// Draw the initial noise latent at timestep `T` from the context-seeded
    /// generator; entries are i.i.d. standard normal.
    pub fn sample_initial_noise(&self, ctx: &PromptContext) -> Result<Latent> {
        if let Some(adapter) = &self.adapter {
            return adapter.sample_initial_noise(ctx);
        }
        let mut rng = rng::rng_from_bytes(&ctx.noise_seed(), "init-noise");
        let data = Array3::from_shape_simple_fn(
            (self.cfg.channels, self.cfg.height, self.cfg.width),
            || rng.sample::<f64, _>(StandardNormal),
        );
        Ok(Latent::new(data, self.total_steps()))
    }

    /// The trained noise predictor's output at step `t`.
    pub fn predict_noise(&self, ctx: &PromptContext, z: &Latent, t: usize) -> Result<Array3<f64>> {
        if t == 0 || t > self.total_steps() {
            return Err(arg_err(format!("timestep {t} out of range")));
        }
        match self.cfg.kind {
            BackendKind::ToyScale => {
                self.check_shape(z)?;
                Ok(Array3::zeros(z.data.raw_dim()))
            }
            BackendKind::ToyLinear => {
                self.check_shape(z)?;
                Ok(self.kernel.as_ref().expect("kernel").apply(&z.data))
            }
            BackendKind::ExternalAdapter => self
                .adapter
                .as_ref()
                .ok_or_else(|| LabError::Backend("adapter unavailable".into()))?
                .predict_noise(ctx, z, t),
        }
    }

    fn step_down(&self, z: &Array3<f64>, t: usize) -> Array3<f64> {
        let a = self.cfg.schedule.step_scale(t);
        let b = self.cfg.schedule.step_noise_coeff(t);
        match self.cfg.kind {
            BackendKind::ToyScale => z.mapv(|v| a * v),
            BackendKind::ToyLinear => {
                let eps = self.kernel.as_ref().expect("kernel").apply(z);
                z.mapv(|v| a * v) + eps.mapv(|v| b * v)
            }
            BackendKind::ExternalAdapter => unreachable!("adapter handles its own stepping"),
        }
    }

    fn step_up(&self, z: &Array3<f64>, t: usize) -> Array3<f64> {
        let a = self.cfg.schedule.step_scale(t);
        let b = self.cfg.schedule.step_noise_coeff(t);
        match self.cfg.kind {
            BackendKind::ToyScale => z.mapv(|v| v / a),
            BackendKind::ToyLinear => self.kernel.as_ref().expect("kernel").solve(z, a, b, false),
            BackendKind::ExternalAdapter => unreachable!("adapter handles its own stepping"),
        }
    }

    /// Run the deterministic sampler update from `z.timestep` down to `t_to`.
    pub fn denoise(&self, ctx: &PromptContext, z: &Latent, t_to: usize) -> Result<Latent> {
        if t_to >= z.timestep {
            return Err(arg_err(format!(
                "denoise requires target step {t_to} < current step {}",
                z.timestep
            )));
        }
        if let Some(adapter) = &self.adapter {
            return adapter.denoise(ctx, z, t_to);
        }
        self.check_shape(z)?;
        let mut data = z.data.clone();
        for t in (t_to + 1..=z.timestep).rev() {
            data = self.step_down(&data, t);
        }
        Ok(Latent::new(data, t_to))
    }

    /// Exact algebraic inverse of [`Backend::denoise`] from `z.timestep` up
    /// to `t_to`.
    pub fn invert(&self, ctx: &PromptContext, z: &Latent, t_to: usize) -> Result<Latent> {
        if t_to <= z.timestep {
            return Err(arg_err(format!(
                "invert requires target step {t_to} > current step {}",
                z.timestep
            )));
        }
        if t_to > self.total_steps() {
            return Err(arg_err(format!("timestep {t_to} out of range")));
        }
        if let Some(adapter) = &self.adapter {
            return adapter.invert(ctx, z, t_to);
        }
        self.check_shape(z)?;
        let mut data = z.data.clone();
        for t in z.timestep + 1..=t_to {
            data = self.step_up(&data, t);
        }
        Ok(Latent::new(data, t_to))
    }

    /// Whether gradient attacks can run against this backend.
    pub fn supports_gradients(&self) -> bool {
        match self.cfg.kind {
            BackendKind::ToyScale | BackendKind::ToyLinear => true,
            BackendKind::ExternalAdapter => false,
        }
    }

    /// Adjoint of the full inversion map `0 -> t_to` applied to `v`.
    ///
    /// Toy samplers are linear in the latent, so this is an exact
    /// Jacobian-transpose product.
    pub fn invert_adjoint(&self, ctx: &PromptContext, v: &Array3<f64>, t_to: usize) -> Result<Array3<f64>> {
        if let Some(adapter) = &self.adapter {
            return adapter.invert_adjoint(ctx, v);
        }
        if t_to == 0 || t_to > self.total_steps() {
            return Err(arg_err(format!("timestep {t_to} out of range")));
        }
        let mut data = v.clone();
        // Inversion applies step solvers for t = 1..=t_to in order; the
        // adjoint applies adjoint solvers in reverse order.
        for t in (1..=t_to).rev() {
            let a = self.cfg.schedule.step_scale(t);
            let b = self.cfg.schedule.step_noise_coeff(t);
            data = match self.cfg.kind {
                BackendKind::ToyScale => data.mapv(|x| x / a),
                BackendKind::ToyLinear => {
                    self.kernel.as_ref().expect("kernel").solve(&data, a, b, true)
                }
                BackendKind::ExternalAdapter => unreachable!(),
            };
        }
        Ok(data)
    }

    /// Materialize the noise predictor's linear operator column by column.
    /// Test and oracle helper; only meaningful for toy-linear.
    pub fn linear_operator_apply(&self, data: &Array3<f64>) -> Result<Array3<f64>> {
        match self.cfg.kind {
            BackendKind::ToyLinear => Ok(self.kernel.as_ref().expect("kernel").apply(data)),
            _ => Err(arg_err("linear operator only defined for toy-linear")),
        }
    }

    /// Adjoint of the noise predictor operator (toy-linear only).
    pub fn linear_operator_adjoint(&self, data: &Array3<f64>) -> Result<Array3<f64>> {
        match self.cfg.kind {
            BackendKind::ToyLinear => Ok(self.kernel.as_ref().expect("kernel").apply_adjoint(data)),
            _ => Err(arg_err("linear operator only defined for toy-linear")),
        }
    }
}
