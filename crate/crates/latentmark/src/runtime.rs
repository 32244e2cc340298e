//! Run configuration, key management, manifests, artifact persistence and
//! the command implementations behind the CLI.
//!
//! Every run resolves its configuration up front, derives all stage seeds
//! from one root seed, and writes a manifest describing inputs, outputs and
//! the resolved configuration. Re-running a manifest's command on toy
//! backends reproduces every artifact bit-for-bit (manifest timing aside).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackConfig, AttackKind};
use crate::backend::{Backend, BackendConfig, BackendKind, PromptContext};
use crate::codec::{CodecConfig, Image, ToyCodec};
use crate::error::{arg_err, LabError, Result};
use crate::eval::{self, DistortionSpec, MatrixTuning};
use crate::freq;
use crate::pipeline::{Pipeline, SchemeConfig};
use crate::rng;
use crate::selector::{
    self, Classifier, ClassifierMode, FeatureVector, MappingConfig, Permutation, SecretKey,
    SelectorModel,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const KEY_MAGIC: &str = "latentmark-key";
const SELECTOR_MAGIC: &str = "latentmark-selector";
const FORMAT_VERSION: u32 = 1;

/// Environment variable overriding the root seed.
pub const ENV_SEED: &str = "LATENTMARK_SEED";
/// Environment variable overriding the worker count.
pub const ENV_WORKERS: &str = "LATENTMARK_WORKERS";

/// Pattern geometry. The pattern seed is part of the key file, never of the
/// run configuration, so manifests and logs stay free of secrets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSettings {
    pub radius: u32,
    pub channel: usize,
    /// Ring-value scale; `None` derives the injection-band match
    /// `sqrt(h*w * alpha_mid / alpha_T)` from the schedule and mapping.
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub conjugate_symmetric: bool,
}

/// Everything a run needs, resolved and serializable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub codec: CodecConfig,
    pub mapping: MappingConfig,
    pub scheme: SchemeConfig,
    pub pattern: PatternSettings,
    pub attack: AttackDefaults,
    pub evaluation: EvalDefaults,
    pub classifier: ClassifierMode,
    pub seed: u64,
}

/// Attack hyperparameter defaults carried by the config file (published
/// values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackDefaults {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub n_pairs: usize,
}

impl Default for AttackDefaults {
    fn default() -> Self {
        Self {
            steps: 150,
            lr: 0.01,
            lambda: 5e4,
            n_pairs: 100,
        }
    }
}

/// Evaluation defaults: pair count, calibration FPR and matrix tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalDefaults {
    pub n_pairs: usize,
    pub target_fpr: f64,
    pub tuning: MatrixTuning,
}

impl Default for EvalDefaults {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            target_fpr: 0.01,
            tuning: MatrixTuning::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale defaults: the 4x72x72 ring profile, 64 clusters, dynamic
    /// two-sided scheme. Published constants (radius 20, channel 0,
    /// t in [10, 20], offsets [-12, 12]^2, attack 150/0.01/5e4/100) are kept
    /// where they are scale-free; the cluster count drops from 1024 to 64
    /// so 64 toy prompts can populate the clustering.
    pub fn toy_defaults() -> Self {
        let backend = BackendConfig::toy_ring(BackendKind::ToyScale);
        let alpha_end = backend.schedule.alpha(backend.schedule.total_steps());
        Self {
            codec: CodecConfig::for_alpha_end(11, alpha_end, 4),
            backend,
            mapping: MappingConfig::toy_defaults(),
            scheme: SchemeConfig::ists(),
            pattern: PatternSettings {
                radius: 20,
                channel: 0,
                amplitude: None,
                conjugate_symmetric: false,
            },
            attack: AttackDefaults::default(),
            evaluation: EvalDefaults::default(),
            classifier: ClassifierMode::NearestCentroid,
            seed: 20_240_001,
        }
    }

    /// Published-scale reference constants (cluster count 1024); needs an
    /// external diffusion adapter and a correspondingly large corpus.
    pub fn paper_reference() -> Self {
        Self {
            mapping: MappingConfig::paper_defaults(),
            ..Self::toy_defaults()
        }
    }

    /// Resolved pattern amplitude (see [`PatternSettings::amplitude`]).
    pub fn resolved_amplitude(&self) -> f64 {
        match self.pattern.amplitude {
            Some(a) => a,
            None => {
                let schedule = &self.backend.schedule;
                let t_total = schedule.total_steps();
                let mid = (self.mapping.t_lo + self.mapping.t_hi) / 2;
                let plane = (self.backend.height * self.backend.width) as f64;
                (plane * schedule.alpha(mid) / schedule.alpha(t_total)).sqrt()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t_total = self.backend.schedule.total_steps();
        self.mapping
            .validate(t_total)
            .map_err(|e| LabError::Config(e.to_string()))?;
        if self.pattern.channel >= self.backend.channels {
            return Err(LabError::Config(format!(
                "pattern channel {} out of range",
                self.pattern.channel
            )));
        }
        let half = self.backend.height.min(self.backend.width) as i64 / 2;
        let reach = self.pattern.radius as i64;
        for l in [
            self.mapping.l_x_lo as i64,
            self.mapping.l_x_hi as i64 - 1,
            self.mapping.l_y_lo as i64,
            self.mapping.l_y_hi as i64 - 1,
        ] {
            if l.abs() + reach >= half {
                return Err(LabError::Config(format!(
                    "offset {l} with radius {} does not fit a {}x{} plane",
                    self.pattern.radius, self.backend.height, self.backend.width
                )));
            }
        }
        if let Some(t) = self.scheme.fixed_t {
            if t == 0 || t > t_total {
                return Err(LabError::Config(format!("fixed timestep {t} out of range")));
            }
        }
        if !(self.evaluation.target_fpr > 0.0 && self.evaluation.target_fpr <= 1.0) {
            return Err(LabError::Config("target FPR must lie in (0, 1]".into()));
        }
        AttackConfig {
            kind: AttackKind::ImpRemoval,
            steps: self.attack.steps,
            lr: self.attack.lr,
            lambda: self.attack.lambda,
            n_pairs: self.attack.n_pairs,
        }
        .validate()
        .map_err(|e| LabError::Config(e.to_string()))?;
        Ok(())
    }

    /// Apply `LATENTMARK_SEED` if present.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(ENV_SEED) {
            self.seed = s
                .parse()
                .map_err(|_| LabError::Config(format!("{ENV_SEED} must be a u64")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| LabError::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| LabError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Secret container: pattern seed, permutation key, mapping, and the public
/// fingerprint binding selector files to this key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFile {
    pub magic: String,
    pub version: u32,
    pub created_unix: u64,
    pub pattern_seed: u64,
    pub permutation_key: String,
    pub mapping: MappingConfig,
    pub fingerprint: String,
}

impl KeyFile {
    /// Derive a fresh key deterministically from a root seed. Reproducible
    /// experiments regenerate identical keys; production deployments should
    /// bring externally generated entropy instead.
    pub fn derive(root_seed: u64, mapping: &MappingConfig) -> Self {
        let mut rng = rng::rng_for(root_seed, "secret-key", 0);
        let secret = SecretKey::generate(&mut rng);
        let pattern_seed: u64 = rng.gen();
        Self::assemble(pattern_seed, &secret, mapping)
    }

    fn assemble(pattern_seed: u64, secret: &SecretKey, mapping: &MappingConfig) -> Self {
        Self {
            magic: KEY_MAGIC.into(),
            version: FORMAT_VERSION,
            created_unix: now_unix(),
            pattern_seed,
            permutation_key: secret.to_hex(),
            mapping: mapping.clone(),
            fingerprint: Self::fingerprint_of(pattern_seed, secret),
        }
    }

    /// Fingerprint over the pattern seed and permutation key; stable across
    /// serializations and safe to log.
    pub fn fingerprint_of(pattern_seed: u64, secret: &SecretKey) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"latentmark-key-fingerprint-v1");
        hasher.update(pattern_seed.to_le_bytes());
        hasher.update(secret.0);
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn secret(&self) -> Result<SecretKey> {
        SecretKey::from_hex(&self.permutation_key)
            .map_err(|e| LabError::Key(format!("bad permutation key: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let key: KeyFile =
            serde_json::from_str(&text).map_err(|e| LabError::Key(format!("{path:?}: {e}")))?;
        if key.magic != KEY_MAGIC {
            return Err(LabError::Key(format!("{path:?} is not a key file")));
        }
        if key.version != FORMAT_VERSION {
            return Err(LabError::Key(format!(
                "unsupported key version {}",
                key.version
            )));
        }
        let expect = Self::fingerprint_of(key.pattern_seed, &key.secret()?);
        if expect != key.fingerprint {
            return Err(LabError::Key("key fingerprint mismatch".into()));
        }
        Ok(key)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| LabError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Serialized selector: centroids, classifier weights, mapping and the key
/// fingerprint — never the key itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectorFile {
    pub magic: String,
    pub version: u32,
    pub dim: usize,
    pub clusters: usize,
    pub centroids: Vec<f64>,
    pub classifier: Classifier,
    pub mapping: MappingConfig,
    pub key_fingerprint: String,
}

impl SelectorFile {
    pub fn from_model(model: &SelectorModel) -> Self {
        Self {
            magic: SELECTOR_MAGIC.into(),
            version: FORMAT_VERSION,
            dim: model.centroids.ncols(),
            clusters: model.centroids.nrows(),
            centroids: model.centroids.iter().copied().collect(),
            classifier: model.classifier.clone(),
            mapping: model.mapping.clone(),
            key_fingerprint: model.key_fingerprint.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string(self).map_err(|e| LabError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: SelectorFile = serde_json::from_str(&text)
            .map_err(|e| LabError::Format(format!("{path:?}: {e}")))?;
        if file.magic != SELECTOR_MAGIC {
            return Err(LabError::Format(format!("{path:?} is not a selector file")));
        }
        if file.version != FORMAT_VERSION {
            return Err(LabError::Format(format!(
                "unsupported selector version {}",
                file.version
            )));
        }
        Ok(file)
    }

    /// Rebuild the runnable model; the key must match the stored
    /// fingerprint.
    pub fn into_model(self, key: &KeyFile) -> Result<SelectorModel> {
        let secret = key.secret()?;
        if KeyFile::fingerprint_of(key.pattern_seed, &secret) != self.key_fingerprint {
            return Err(LabError::Key(
                "selector was trained under a different key".into(),
            ));
        }
        let centroids = Array2::from_shape_vec((self.clusters, self.dim), self.centroids)
            .map_err(|e| LabError::Format(e.to_string()))?;
        Ok(SelectorModel {
            centroids,
            classifier: self.classifier,
            mapping: self.mapping.clone(),
            permutation: Permutation::from_key(&secret, self.clusters),
            key_fingerprint: self.key_fingerprint,
        })
    }
}

/// Record of one run: resolved config, artifacts and stage seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub key_fingerprint: Option<String>,
    pub resolved_config: RunConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub stage_seeds: BTreeMap<String, u64>,
    pub timing_ms: u64,
    /// Command-specific payload, for example per-image injection
    /// parameters.
    pub extra: serde_json::Value,
}

impl RunManifest {
    fn new(command: &str, cfg: &RunConfig, key_fingerprint: Option<String>) -> Self {
        let run_id = run_id(command, cfg);
        Self {
            run_id,
            command: command.into(),
            tool_version: TOOL_VERSION.into(),
            created_unix: now_unix(),
            key_fingerprint,
            resolved_config: cfg.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            stage_seeds: BTreeMap::new(),
            timing_ms: 0,
            extra: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| LabError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| LabError::Format(format!("{path:?}: {e}")))
    }
}

/// Deterministic run identifier over the command and resolved config.
pub fn run_id(command: &str, cfg: &RunConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update(serde_json::to_vec(cfg).expect("config serializes"));
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Build the generation/detection engine from a config and key.
pub fn build_pipeline(cfg: &RunConfig, key: &KeyFile) -> Result<Pipeline> {
    let backend = Backend::new(cfg.backend.clone())?;
    let codec = ToyCodec::new(
        cfg.codec.clone(),
        cfg.backend.channels,
        (cfg.backend.height, cfg.backend.width),
    )?;
    let (pattern, mask) = freq::make_ring_pattern(
        key.pattern_seed,
        cfg.pattern.radius,
        (cfg.backend.height, cfg.backend.width),
        cfg.pattern.channel,
        cfg.resolved_amplitude(),
        cfg.pattern.conjugate_symmetric,
    )?;
    Pipeline::new(backend, codec, pattern, mask)
}

// ---------------------------------------------------------------------------
// Image persistence
// ---------------------------------------------------------------------------

/// Save an image tensor as an 8-bit PNG (1 = gray, 3 = RGB, 4 = RGBA).
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let dynimg = match c {
        1 => {
            let mut out = image::GrayImage::new(w as u32, h as u32);
            for i in 0..h {
                for j in 0..w {
                    out.put_pixel(j as u32, i as u32, image::Luma([quant(img[(0, i, j)])]));
                }
            }
            image::DynamicImage::ImageLuma8(out)
        }
        3 => {
            let mut out = image::RgbImage::new(w as u32, h as u32);
            for i in 0..h {
                for j in 0..w {
                    let px = [
                        quant(img[(0, i, j)]),
                        quant(img[(1, i, j)]),
                        quant(img[(2, i, j)]),
                    ];
                    out.put_pixel(j as u32, i as u32, image::Rgb(px));
                }
            }
            image::DynamicImage::ImageRgb8(out)
        }
        4 => {
            let mut out = image::RgbaImage::new(w as u32, h as u32);
            for i in 0..h {
                for j in 0..w {
                    let px = [
                        quant(img[(0, i, j)]),
                        quant(img[(1, i, j)]),
                        quant(img[(2, i, j)]),
                        quant(img[(3, i, j)]),
                    ];
                    out.put_pixel(j as u32, i as u32, image::Rgba(px));
                }
            }
            image::DynamicImage::ImageRgba8(out)
        }
        _ => return Err(arg_err(format!("cannot save {c}-channel image as PNG"))),
    };
    dynimg
        .save(path)
        .map_err(|e| LabError::Format(format!("{path:?}: {e}")))
}

/// Load a PNG back into an image tensor with the requested channel count.
pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
    let dynimg =
        image::open(path).map_err(|e| LabError::Format(format!("{path:?}: {e}")))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let mut out = Array3::zeros((channels, h, w));
    match channels {
        1 => {
            let gray = dynimg.to_luma8();
            for i in 0..h {
                for j in 0..w {
                    out[(0, i, j)] = gray.get_pixel(j as u32, i as u32)[0] as f64 / 255.0;
                }
            }
        }
        3 => {
            let rgb = dynimg.to_rgb8();
            for i in 0..h {
                for j in 0..w {
                    let px = rgb.get_pixel(j as u32, i as u32);
                    for c in 0..3 {
                        out[(c, i, j)] = px[c] as f64 / 255.0;
                    }
                }
            }
        }
        4 => {
            let rgba = dynimg.to_rgba8();
            for i in 0..h {
                for j in 0..w {
                    let px = rgba.get_pixel(j as u32, i as u32);
                    for c in 0..4 {
                        out[(c, i, j)] = px[c] as f64 / 255.0;
                    }
                }
            }
        }
        _ => return Err(arg_err(format!("unsupported channel count {channels}"))),
    }
    Ok(out)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(arg_err(format!("no PNG images found in {dir:?}")));
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Where training images come from.
pub enum CorpusSource {
    /// Load PNGs from a directory.
    Directory(PathBuf),
    /// Generate this many non-watermarked toy images.
    Generated(usize),
}

/// Deterministic prompt contexts for generated corpora and image batches.
pub fn batch_contexts(seed: u64, count: usize) -> Vec<PromptContext> {
    (0..count)
        .map(|i| {
            let s = u64::from_le_bytes(
                rng::derive_seed(seed, "pair-seed", i as u64)[..8]
                    .try_into()
                    .unwrap(),
            );
            PromptContext::new(format!("toy-prompt-{i:04}"), s)
        })
        .collect()
}

/// Outcome of selector training.
pub struct TrainOutcome {
    pub selector_path: PathBuf,
    pub key_path: PathBuf,
    pub manifest_path: PathBuf,
    /// Cluster sizes over the training corpus.
    pub histogram: Vec<usize>,
    pub empty_clusters: usize,
}

/// Train the parameter selector on non-watermarked images and persist it.
pub fn cmd_train_selector(
    cfg: &RunConfig,
    corpus: CorpusSource,
    key_path: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let started = std::time::Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let key = match key_path {
        Some(p) => KeyFile::load(p)?,
        None => KeyFile::derive(cfg.seed, &cfg.mapping),
    };
    let pipeline = build_pipeline(cfg, &key)?;

    let mut manifest = RunManifest::new("train-selector", cfg, Some(key.fingerprint.clone()));
    let images: Vec<Image> = match corpus {
        CorpusSource::Directory(dir) => {
            let paths = list_pngs(&dir)?;
            manifest.inputs = paths.iter().map(|p| p.display().to_string()).collect();
            paths
                .iter()
                .map(|p| load_png(p, cfg.backend.channels))
                .collect::<Result<Vec<_>>>()?
        }
        CorpusSource::Generated(n) => {
            use rayon::prelude::*;
            manifest
                .stage_seeds
                .insert("corpus".into(), cfg.seed);
            batch_contexts(cfg.seed, n)
                .par_iter()
                .map(|ctx| pipeline.generate_plain(ctx))
                .collect::<Result<Vec<_>>>()?
        }
    };
    if images.len() < cfg.mapping.clusters {
        return Err(arg_err(format!(
            "{} training images cannot populate {} clusters; lower `mapping.clusters` or provide more images",
            images.len(),
            cfg.mapping.clusters
        )));
    }
    let features: Vec<FeatureVector> = images.iter().map(selector::encode_features).collect();
    let mut model = selector::train_selector(
        &features,
        &cfg.mapping,
        &key.secret()?,
        cfg.classifier,
        cfg.seed,
    )?;
    // Selector files bind to the key-file fingerprint (pattern seed plus
    // permutation key), not the bare secret's.
    model.key_fingerprint = key.fingerprint.clone();

    // Cluster-size histogram over the training set.
    let mut histogram = vec![0usize; cfg.mapping.clusters];
    for f in &features {
        histogram[selector::raw_label(&model, f)] += 1;
    }
    let empty_clusters = histogram.iter().filter(|&&c| c == 0).count();

    let selector_path = out_dir.join("selector.json");
    let key_out = out_dir.join("key.json");
    let manifest_path = out_dir.join("manifest.json");
    SelectorFile::from_model(&model).save(&selector_path)?;
    key.save(&key_out)?;
    manifest.outputs = vec![
        selector_path.display().to_string(),
        key_out.display().to_string(),
    ];
    manifest.timing_ms = started.elapsed().as_millis() as u64;
    manifest.save(&manifest_path)?;
    Ok(TrainOutcome {
        selector_path,
        key_path: key_out,
        manifest_path,
        histogram,
        empty_clusters,
    })
}

/// Load selector + key into a runnable model.
pub fn load_model(selector_path: &Path, key_path: &Path) -> Result<(SelectorModel, KeyFile)> {
    let key = KeyFile::load(key_path)?;
    let model = SelectorFile::load(selector_path)?.into_model(&key)?;
    Ok((model, key))
}

/// Per-image generation record stored in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub file: String,
    pub prompt: String,
    pub seed: u64,
    pub t: Option<usize>,
    pub l_x: Option<i32>,
    pub l_y: Option<i32>,
}

/// Generate a batch of plain or watermarked images as PNGs.
///
/// Injection parameters are recorded in the manifest, never inside the
/// image files. Parameter selection runs on the PNG-quantized plain image
/// (the same representation detection will see).
pub fn cmd_generate(
    cfg: &RunConfig,
    selector_path: Option<&Path>,
    key_path: &Path,
    count: usize,
    watermark: bool,
    out_dir: &Path,
) -> Result<PathBuf> {
    use rayon::prelude::*;
    let started = std::time::Instant::now();
    cfg.validate()?;
    let key = KeyFile::load(key_path)?;
    let model = match selector_path {
        Some(p) => Some(SelectorFile::load(p)?.into_model(&key)?),
        None => None,
    };
    let pipeline = build_pipeline(cfg, &key)?;
    let sub = if watermark { "watermarked" } else { "plain" };
    let dir = out_dir.join(sub);
    std::fs::create_dir_all(&dir)?;

    let contexts = batch_contexts(cfg.seed, count);
    let records: Result<Vec<GenerationRecord>> = contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| {
            let file = dir.join(format!("img-{i:04}.png"));
            let record = if watermark {
                // Select on the quantized plain image, as detection will.
                let plain = pipeline.generate_plain(ctx)?;
                let tmp = file.with_extension("plain.tmp.png");
                save_png(&plain, &tmp)?;
                let plain_quantized = load_png(&tmp, cfg.backend.channels)?;
                std::fs::remove_file(&tmp)?;
                let params = {
                    let scheme = &cfg.scheme;
                    if scheme.dynamic_pattern || scheme.dynamic_injection {
                        let m = model.as_ref().ok_or_else(|| {
                            arg_err("dynamic scheme requires --selector")
                        })?;
                        Some(selector::select(m, &plain_quantized))
                    } else {
                        None
                    }
                };
                let (img, used) = pipeline.generate_watermarked_with(
                    ctx,
                    model.as_ref(),
                    &cfg.scheme,
                    params,
                )?;
                save_png(&img, &file)?;
                GenerationRecord {
                    file: file.display().to_string(),
                    prompt: ctx.prompt.clone(),
                    seed: ctx.seed,
                    t: Some(used.t),
                    l_x: Some(used.offset.l_x),
                    l_y: Some(used.offset.l_y),
                }
            } else {
                let img = pipeline.generate_plain(ctx)?;
                save_png(&img, &file)?;
                GenerationRecord {
                    file: file.display().to_string(),
                    prompt: ctx.prompt.clone(),
                    seed: ctx.seed,
                    t: None,
                    l_x: None,
                    l_y: None,
                }
            };
            Ok(record)
        })
        .collect();
    let records = records?;

    let mut manifest = RunManifest::new(
        if watermark { "generate-watermarked" } else { "generate-plain" },
        cfg,
        Some(key.fingerprint.clone()),
    );
    manifest.outputs = records.iter().map(|r| r.file.clone()).collect();
    manifest
        .stage_seeds
        .insert("batch".into(), cfg.seed);
    manifest.extra =
        serde_json::to_value(&records).map_err(|e| LabError::Format(e.to_string()))?;
    manifest.timing_ms = started.elapsed().as_millis() as u64;
    let manifest_path = out_dir.join(format!("manifest-{sub}.json"));
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}

/// One CSV row of detection output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRow {
    pub image: String,
    pub d: f64,
    pub side: String,
    pub threshold: f64,
    pub decision: bool,
    pub t: usize,
    pub l_x: i32,
    pub l_y: i32,
}

/// Detect watermarks in a batch of images, writing one CSV row per image.
/// The threshold comes either from the caller or from calibration over a
/// benign directory.
pub fn cmd_detect(
    cfg: &RunConfig,
    selector_path: Option<&Path>,
    key_path: &Path,
    images_dir: &Path,
    tau: Option<f64>,
    calibrate_dir: Option<&Path>,
    out_csv: &Path,
) -> Result<Vec<DetectionRow>> {
    use rayon::prelude::*;
    let started = std::time::Instant::now();
    cfg.validate()?;
    let key = KeyFile::load(key_path)?;
    let model = match selector_path {
        Some(p) => Some(SelectorFile::load(p)?.into_model(&key)?),
        None => None,
    };
    let pipeline = build_pipeline(cfg, &key)?;
    let det_ctx = PromptContext::new("", 0);

    let threshold = match (tau, calibrate_dir) {
        (Some(t), _) => t,
        (None, Some(dir)) => {
            let benign: Result<Vec<Image>> = list_pngs(dir)?
                .iter()
                .map(|p| load_png(p, cfg.backend.channels))
                .collect();
            pipeline.calibrate_threshold(
                &det_ctx,
                &benign?,
                model.as_ref(),
                &cfg.scheme,
                cfg.evaluation.target_fpr,
            )?
        }
        (None, None) => {
            return Err(arg_err("provide either --tau or --calibrate-dir"));
        }
    };

    let paths = list_pngs(images_dir)?;
    let rows: Result<Vec<DetectionRow>> = paths
        .par_iter()
        .map(|p| {
            let img = load_png(p, cfg.backend.channels)?;
            let result =
                pipeline.detect(&det_ctx, &img, model.as_ref(), &cfg.scheme, threshold)?;
            Ok(DetectionRow {
                image: p.display().to_string(),
                d: result.d,
                side: match result.side {
                    crate::pipeline::Side::Plus => "plus".into(),
                    crate::pipeline::Side::Minus => "minus".into(),
                },
                threshold,
                decision: result.decision,
                t: result.params_used.t,
                l_x: result.params_used.offset.l_x,
                l_y: result.params_used.offset.l_y,
            })
        })
        .collect();
    let rows = rows?;

    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = csv::Writer::from_path(out_csv)?;
    for row in &rows {
        writer
            .serialize(row)
            .map_err(|e| LabError::Format(e.to_string()))?;
    }
    writer.flush()?;

    let mut manifest = RunManifest::new("detect", cfg, Some(key.fingerprint.clone()));
    manifest.inputs = paths.iter().map(|p| p.display().to_string()).collect();
    manifest.outputs = vec![out_csv.display().to_string()];
    manifest.timing_ms = started.elapsed().as_millis() as u64;
    manifest.save(&out_csv.with_extension("manifest.json"))?;
    Ok(rows)
}

/// One CSV row of attack output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRow {
    pub image: String,
    pub kind: String,
    pub perturbation_norm: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Run one attack kind over a directory of images.
///
/// `reference` is required for the forgery attacks that use a leaked
/// watermarked image; `pairs` (plain dir, watermarked dir) is required for
/// the averaging attacks.
#[allow(clippy::too_many_arguments)]
pub fn cmd_attack(
    cfg: &RunConfig,
    key_path: &Path,
    kind: AttackKind,
    inputs_dir: &Path,
    reference: Option<&Path>,
    pairs: Option<(&Path, &Path)>,
    out_dir: &Path,
) -> Result<Vec<AttackRow>> {
    use rayon::prelude::*;
    let started = std::time::Instant::now();
    cfg.validate()?;
    let key = KeyFile::load(key_path)?;
    let pipeline = build_pipeline(cfg, &key)?;
    std::fs::create_dir_all(out_dir)?;
    let attack_cfg = AttackConfig {
        kind,
        steps: cfg.attack.steps,
        lr: cfg.attack.lr,
        lambda: cfg.attack.lambda,
        n_pairs: cfg.attack.n_pairs,
    };
    attack_cfg.validate()?;

    let paths = list_pngs(inputs_dir)?;
    let load = |p: &Path| load_png(p, cfg.backend.channels);

    let reference_img = match (kind, reference) {
        (AttackKind::ImpForgery | AttackKind::VaeForgery, Some(p)) => Some(load(p)?),
        (AttackKind::ImpForgery | AttackKind::VaeForgery, None) => {
            return Err(arg_err(format!(
                "{} requires --reference with a leaked watermarked image",
                kind.label()
            )));
        }
        _ => None,
    };
    let residual = match kind {
        AttackKind::AvgRemoval | AttackKind::AvgForgery => {
            let (plain_dir, marked_dir) = pairs.ok_or_else(|| {
                arg_err(format!(
                    "{} requires --pairs-plain and --pairs-marked directories with {} images each",
                    kind.label(),
                    cfg.attack.n_pairs
                ))
            })?;
            let plains: Result<Vec<Image>> =
                list_pngs(plain_dir)?.iter().map(|p| load(p)).collect();
            let marked: Result<Vec<Image>> =
                list_pngs(marked_dir)?.iter().map(|p| load(p)).collect();
            let (plains, marked) = (plains?, marked?);
            if plains.len() < cfg.attack.n_pairs || marked.len() < cfg.attack.n_pairs {
                return Err(arg_err(format!(
                    "averaging needs at least {} images per class",
                    cfg.attack.n_pairs
                )));
            }
            Some(attacks::avg_residual(
                &marked[..cfg.attack.n_pairs],
                &plains[..cfg.attack.n_pairs],
            )?)
        }
        _ => None,
    };

    let contexts = batch_contexts(cfg.seed, paths.len());
    let rows: Result<Vec<AttackRow>> = paths
        .par_iter()
        .zip(contexts.par_iter())
        .map(|(path, ctx)| {
            let img = load(path)?;
            let (attacked, norm, trace): (Image, f64, Vec<f64>) = match kind {
                AttackKind::ImpRemoval => {
                    let r = attacks::imp_removal(&pipeline, ctx, &img, &attack_cfg)?;
                    (r.attacked_image, r.perturbation_norm, r.loss_trace)
                }
                AttackKind::ImpForgery => {
                    let r = attacks::imp_forgery(
                        &pipeline,
                        ctx,
                        &img,
                        reference_img.as_ref().expect("checked"),
                        &attack_cfg,
                    )?;
                    (r.attacked_image, r.perturbation_norm, r.loss_trace)
                }
                AttackKind::AvgRemoval => {
                    let out = attacks::avg_removal(&img, residual.as_ref().expect("checked"))?;
                    (out, 0.0, vec![])
                }
                AttackKind::AvgForgery => {
                    let out = attacks::avg_forgery(&img, residual.as_ref().expect("checked"))?;
                    (out, 0.0, vec![])
                }
                AttackKind::VaeRemoval => {
                    let r = attacks::vae_removal(&pipeline, &img, &attack_cfg)?;
                    (r.attacked_image, r.perturbation_norm, r.loss_trace)
                }
                AttackKind::VaeForgery => {
                    let r = attacks::vae_forgery(
                        &pipeline,
                        &img,
                        reference_img.as_ref().expect("checked"),
                        &attack_cfg,
                    )?;
                    (r.attacked_image, r.perturbation_norm, r.loss_trace)
                }
            };
            let out_path = out_dir.join(path.file_name().expect("file name"));
            save_png(&attacked, &out_path)?;
            Ok(AttackRow {
                image: out_path.display().to_string(),
                kind: kind.label().into(),
                perturbation_norm: norm,
                initial_loss: trace.first().copied().unwrap_or(f64::NAN),
                final_loss: trace.last().copied().unwrap_or(f64::NAN),
            })
        })
        .collect();
    let rows = rows?;

    let csv_path = out_dir.join("attack.csv");
    let mut writer = csv::Writer::from_path(&csv_path)?;
    for row in &rows {
        writer
            .serialize(row)
            .map_err(|e| LabError::Format(e.to_string()))?;
    }
    writer.flush()?;

    let mut manifest = RunManifest::new("attack", cfg, Some(key.fingerprint.clone()));
    manifest.inputs = paths.iter().map(|p| p.display().to_string()).collect();
    manifest.outputs = rows.iter().map(|r| r.image.clone()).collect();
    manifest.timing_ms = started.elapsed().as_millis() as u64;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(rows)
}

/// Apply one distortion to every image in a directory.
pub fn cmd_distort(
    spec: &DistortionSpec,
    channels: usize,
    inputs_dir: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<usize> {
    std::fs::create_dir_all(out_dir)?;
    let paths = list_pngs(inputs_dir)?;
    for (i, path) in paths.iter().enumerate() {
        let img = load_png(path, channels)?;
        let out = eval::distort(
            &img,
            spec,
            u64::from_le_bytes(
                rng::derive_seed(seed, "distort-cli", i as u64)[..8]
                    .try_into()
                    .unwrap(),
            ),
        )?;
        save_png(&out, &out_dir.join(path.file_name().expect("file name")))?;
    }
    Ok(paths.len())
}

/// Evaluation mode of [`cmd_evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvaluateMode {
    /// Dynamic scheme and static baseline against all attacks, plus the
    /// distortion suite on the no-attack column.
    Matrix,
    /// The four ablation rows against all attacks.
    Ablation,
    /// Injection-step ranges against the imprint attacks.
    Sweep,
}

/// Outputs of an evaluation run.
pub struct EvaluateOutcome {
    pub cells_csv: PathBuf,
    pub aggregates_csv: Option<PathBuf>,
    pub sweep_csv: Option<PathBuf>,
    pub plot: PathBuf,
    pub matrix: Option<eval::MatrixResult>,
    pub sweep: Option<eval::SweepResult>,
}

/// Drive the evaluation matrix or the step sweep and persist CSVs and a
/// plot image.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    selector_path: &Path,
    key_path: &Path,
    mode: EvaluateMode,
    out_dir: &Path,
) -> Result<EvaluateOutcome> {
    let started = std::time::Instant::now();
    cfg.validate()?;
    let (model, key) = load_model(selector_path, key_path)?;
    let pipeline = build_pipeline(cfg, &key)?;
    std::fs::create_dir_all(out_dir)?;
    let n = cfg.evaluation.n_pairs;
    let tuning = cfg.evaluation.tuning;
    let attacks_cols: Vec<Option<AttackKind>> = std::iter::once(None)
        .chain(AttackKind::ALL.into_iter().map(Some))
        .collect();

    let mut manifest = RunManifest::new("evaluate", cfg, Some(key.fingerprint.clone()));
    let mut outcome = EvaluateOutcome {
        cells_csv: out_dir.join("cells.csv"),
        aggregates_csv: None,
        sweep_csv: None,
        plot: out_dir.join("auc.png"),
        matrix: None,
        sweep: None,
    };

    match mode {
        EvaluateMode::Matrix | EvaluateMode::Ablation => {
            let t_mid = (cfg.mapping.t_lo + cfg.mapping.t_hi) / 2;
            let schemes: Vec<(String, SchemeConfig)> = match mode {
                EvaluateMode::Matrix => vec![
                    ("ists".into(), SchemeConfig::ists()),
                    ("tree-ring".into(), SchemeConfig::tree_ring()),
                ],
                EvaluateMode::Ablation => eval::ablation_schemes(t_mid),
                EvaluateMode::Sweep => unreachable!(),
            };
            let mut result = eval::run_matrix(
                &pipeline,
                Some(&model),
                &schemes,
                &attacks_cols,
                &[None],
                n,
                cfg.seed,
                &tuning,
            );
            if mode == EvaluateMode::Matrix {
                // Distortion suite on the undistorted dynamic scheme.
                let distortions: Vec<Option<DistortionSpec>> = DistortionSpec::standard_suite()
                    .into_iter()
                    .map(Some)
                    .collect();
                let extra = eval::run_matrix(
                    &pipeline,
                    Some(&model),
                    &[("ists".into(), SchemeConfig::ists())],
                    &[None],
                    &distortions,
                    n,
                    cfg.seed,
                    &tuning,
                );
                result.cells.extend(extra.cells);
            }
            write_cells_csv(&outcome.cells_csv, &result.cells, &manifest.run_id)?;
            let agg_path = out_dir.join("aggregates.csv");
            write_aggregates_csv(&agg_path, &result.aggregates)?;
            crate::plot::auc_bars(
                &outcome.plot,
                &result
                    .cells
                    .iter()
                    .filter(|c| c.distortion == "none" && c.error.is_none())
                    .map(|c| (format!("{} {}", c.scheme, c.attack), c.auc))
                    .collect::<Vec<_>>(),
            )?;
            outcome.aggregates_csv = Some(agg_path);
            outcome.matrix = Some(result);
        }
        EvaluateMode::Sweep => {
            let ranges: Vec<(usize, usize)> =
                (0..7).map(|i| (5 + 5 * i, 15 + 5 * i)).collect();
            let sweep = eval::step_sweep(&pipeline, &model, &ranges, n, cfg.seed, &tuning)?;
            let sweep_path = out_dir.join("sweep.csv");
            let mut writer = csv::Writer::from_path(&sweep_path)?;
            for row in &sweep.rows {
                writer
                    .serialize(row)
                    .map_err(|e| LabError::Format(e.to_string()))?;
            }
            writer.flush()?;
            crate::plot::sweep_curves(&outcome.plot, &sweep.rows)?;
            // The cells CSV mirrors the sweep rows for the common schema.
            let cells: Vec<eval::CellOutcome> = sweep
                .rows
                .iter()
                .flat_map(|r| {
                    let mk = |attack: &str, auc: f64| eval::CellOutcome {
                        scheme: format!("ists-t{}-{}", r.t_lo, r.t_hi),
                        attack: attack.into(),
                        distortion: "none".into(),
                        n,
                        auc,
                        tpr_at_1fpr: f64::NAN,
                        psnr_median: f64::NAN,
                        ssim_median: f64::NAN,
                        seed: cfg.seed,
                        error: None,
                    };
                    [
                        mk("original", r.original_auc),
                        mk("imp-removal", r.imp_removal_auc),
                        mk("imp-forgery", r.imp_forgery_auc),
                    ]
                })
                .collect();
            write_cells_csv(&outcome.cells_csv, &cells, &manifest.run_id)?;
            outcome.sweep_csv = Some(sweep_path);
            outcome.sweep = Some(sweep);
        }
    }

    manifest.outputs = vec![
        outcome.cells_csv.display().to_string(),
        outcome.plot.display().to_string(),
    ];
    manifest.timing_ms = started.elapsed().as_millis() as u64;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(outcome)
}

fn write_cells_csv(path: &Path, cells: &[eval::CellOutcome], run_id: &str) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer
        .write_record([
            "run_id",
            "scheme",
            "attack",
            "distortion",
            "n",
            "auc",
            "tpr_at_1fpr",
            "psnr_median",
            "ssim_median",
            "seed",
            "error",
        ])
        .map_err(|e| LabError::Format(e.to_string()))?;
    for c in cells {
        writer
            .write_record([
                run_id.to_string(),
                c.scheme.clone(),
                c.attack.clone(),
                c.distortion.clone(),
                c.n.to_string(),
                c.auc.to_string(),
                c.tpr_at_1fpr.to_string(),
                c.psnr_median.to_string(),
                c.ssim_median.to_string(),
                c.seed.to_string(),
                c.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| LabError::Format(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

fn write_aggregates_csv(path: &Path, aggregates: &[eval::SchemeAggregate]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for a in aggregates {
        writer
            .serialize(a)
            .map_err(|e| LabError::Format(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Render a markdown summary and a bar chart from an evaluation cells CSV.
pub fn cmd_report(cells_csv: &Path, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let mut reader = csv::Reader::from_path(cells_csv)?;
    let headers = reader
        .headers()
        .map_err(|e| LabError::Format(e.to_string()))?
        .clone();
    let idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LabError::Format(format!("missing CSV column `{name}`")))
    };
    let (i_scheme, i_attack, i_dist, i_auc, i_tpr) = (
        idx("scheme")?,
        idx("attack")?,
        idx("distortion")?,
        idx("auc")?,
        idx("tpr_at_1fpr")?,
    );
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| LabError::Format(e.to_string()))?;
        rows.push((
            record[i_scheme].to_string(),
            record[i_attack].to_string(),
            record[i_dist].to_string(),
            record[i_auc].parse::<f64>().unwrap_or(f64::NAN),
            record[i_tpr].parse::<f64>().unwrap_or(f64::NAN),
        ));
    }
    let mut md = String::from("# Evaluation report\n\n| scheme | attack | distortion | AUC | TPR@1%FPR |\n|---|---|---|---|---|\n");
    for (scheme, attack, dist, auc_v, tpr) in &rows {
        md.push_str(&format!(
            "| {scheme} | {attack} | {dist} | {auc_v:.4} | {tpr:.4} |\n"
        ));
    }
    let md_path = out_dir.join("report.md");
    std::fs::write(&md_path, md)?;
    let bars: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r.2 == "none" && r.3.is_finite())
        .map(|r| (format!("{} {}", r.0, r.1), r.3))
        .collect();
    if !bars.is_empty() {
        crate::plot::auc_bars(&out_dir.join("report-auc.png"), &bars)?;
    }
    Ok(md_path)
}

// Internal hook so cmd_generate can force pre-selected parameters through
// the pipeline (used to pin selection to the PNG-quantized image).
impl Pipeline {
    pub(crate) fn generate_watermarked_with(
        &self,
        ctx: &PromptContext,
        selector: Option<&SelectorModel>,
        scheme: &SchemeConfig,
        params: Option<crate::pipeline::InjectionParams>,
    ) -> Result<(Image, crate::pipeline::InjectionParams)> {
        match params {
            None => self.generate_watermarked(ctx, selector, scheme),
            Some(p) => self.generate_watermarked_at(ctx, scheme, p),
        }
    }
}
