//! Semantics-keyed parameter selector.
//!
//! Maps an image to instance-specific injection parameters `(t, l)`:
//! feature extraction, K-Means labeling, a trained classifier (or plain
//! nearest-centroid assignment), a secret-key label permutation, and a
//! modulo parameter mapping.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::Image;
use crate::error::{arg_err, Result};
use crate::freq::Offset;
use crate::pipeline::InjectionParams;
use crate::rng;

/// Block grid used by the toy feature encoder (8x8 blocks per channel).
const FEATURE_GRID: usize = 8;

/// L2-normalized feature vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Array1<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Toy semantic encoder: per-channel block-mean grid, flattened and
/// L2-normalized.
pub fn encode_features(image: &Image) -> FeatureVector {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut values = Vec::with_capacity(c * FEATURE_GRID * FEATURE_GRID);
    for ch in 0..c {
        for bi in 0..FEATURE_GRID {
            let r0 = bi * h / FEATURE_GRID;
            let r1 = ((bi + 1) * h / FEATURE_GRID).max(r0 + 1).min(h);
            for bj in 0..FEATURE_GRID {
                let c0 = bj * w / FEATURE_GRID;
                let c1 = ((bj + 1) * w / FEATURE_GRID).max(c0 + 1).min(w);
                let mut sum = 0.0;
                for i in r0..r1 {
                    for j in c0..c1 {
                        sum += image[(ch, i, j)];
                    }
                }
                values.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    let mut v = Array1::from(values);
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v /= norm;
    }
    FeatureVector(v)
}

/// External semantic encoder hook; the paper-faithful path plugs a CLIP-like
/// model in through this trait.
pub trait SemanticEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, image: &Image) -> Result<FeatureVector>;
}

/// Cluster count, timestep range and offset ranges for the parameter map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    /// Number of clusters `C`.
    pub clusters: usize,
    /// Injection timestep range `[t_lo, t_hi]`; the map produces
    /// `t in [t_lo, t_hi - 1]`.
    pub t_lo: usize,
    pub t_hi: usize,
    pub l_x_lo: i32,
    pub l_x_hi: i32,
    pub l_y_lo: i32,
    pub l_y_hi: i32,
    /// The published formula divides the label by the `l_y` range width when
    /// unfolding the second offset coordinate. Setting this flag divides by
    /// the `l_x` width instead (a row-major unfolding), for experiments.
    #[serde(default)]
    pub row_major_unfold: bool,
}

impl MappingConfig {
    /// Published defaults: 1024 clusters, `t in [10, 20]`, offsets in
    /// `[-12, 12]^2`.
    pub fn paper_defaults() -> Self {
        Self {
            clusters: 1024,
            t_lo: 10,
            t_hi: 20,
            l_x_lo: -12,
            l_x_hi: 12,
            l_y_lo: -12,
            l_y_hi: 12,
            row_major_unfold: false,
        }
    }

    /// Desk-scale defaults: 64 clusters populate comfortably from 64 toy
    /// prompts; ranges match the published defaults.
    pub fn toy_defaults() -> Self {
        Self {
            clusters: 64,
            ..Self::paper_defaults()
        }
    }

    pub fn validate(&self, t_total: usize) -> Result<()> {
        if self.clusters == 0 {
            return Err(arg_err("cluster count must be at least 1"));
        }
        if !(self.t_lo < self.t_hi && self.t_hi <= t_total) {
            return Err(arg_err(format!(
                "timestep range [{}, {}] invalid for T={t_total}",
                self.t_lo, self.t_hi
            )));
        }
        if self.l_x_lo > self.l_x_hi || self.l_y_lo > self.l_y_hi {
            return Err(arg_err("offset ranges must be non-empty"));
        }
        Ok(())
    }
}

/// Secret key controlling the label permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretKey(pub [u8; 32]);

impl SecretKey {
    pub fn generate(rng: &mut impl Rng) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill(&mut bytes);
        Self(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(arg_err("secret key must be 64 hex characters"));
        }
        let mut bytes = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            bytes[i] = u8::from_str_radix(std::str::from_utf8(chunk).unwrap(), 16).unwrap();
        }
        Ok(Self(bytes))
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Public fingerprint; safe to log and embed in artifacts.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"latentmark-fingerprint-v1");
        hasher.update(self.0);
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Key-seeded bijection on `[0, C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Permutation {
    forward: Vec<u32>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            forward: (0..n as u32).collect(),
        }
    }

    pub fn from_key(key: &SecretKey, n: usize) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(key.0);
        hasher.update(b"label-permutation");
        let mut rng = rng::rng_from_bytes(&hasher.finalize().into(), "perm");
        let mut forward: Vec<u32> = (0..n as u32).collect();
        forward.shuffle(&mut rng);
        Self { forward }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn apply(&self, label: usize) -> usize {
        self.forward[label] as usize
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0u32; self.forward.len()];
        for (i, &v) in self.forward.iter().enumerate() {
            inv[v as usize] = i as u32;
        }
        Self { forward: inv }
    }
}

/// Two-layer classifier: affine, ReLU, batch normalization, dropout at
/// train time, affine to class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerNet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
}

const BN_EPS: f64 = 1e-5;
const DROPOUT_P: f64 = 0.5;

/// Training recipe: cross-entropy, full-batch gradient descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            seed: 0,
        }
    }
}

impl TwoLayerNet {
    fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng::rng_for(seed, "net-init", 0);
        let scale1 = (2.0 / dim as f64).sqrt();
        let scale2 = (2.0 / dim as f64).sqrt();
        let w1 = (0..dim * dim)
            .map(|_| scale1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w2 = (0..dim * classes)
            .map(|_| scale2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            w1,
            b1: vec![0.0; dim],
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            bn_mean: vec![0.0; dim],
            bn_var: vec![1.0; dim],
            w2,
            b2: vec![0.0; classes],
            dim,
            classes,
        }
    }

    fn hidden_pre_bn(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut h = vec![0.0; d];
        for j in 0..d {
            let mut acc = self.b1[j];
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * self.w1[i * d + j];
            }
            h[j] = acc.max(0.0);
        }
        h
    }

    /// Class logits at inference time (stored batch-norm statistics, no
    /// dropout).
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let h = self.hidden_pre_bn(x);
        let mut normed = vec![0.0; d];
        for j in 0..d {
            let xhat = (h[j] - self.bn_mean[j]) / (self.bn_var[j] + BN_EPS).sqrt();
            normed[j] = self.gamma[j] * xhat + self.beta[j];
        }
        let mut out = self.b2.clone();
        for (j, &nj) in normed.iter().enumerate() {
            for k in 0..self.classes {
                out[k] += nj * self.w2[j * self.classes + k];
            }
        }
        out
    }

    /// Full-batch gradient-descent training with cross-entropy loss.
    fn train(features: &Array2<f64>, labels: &[usize], classes: usize, cfg: NetTrainConfig) -> Self {
        let n = features.nrows();
        let d = features.ncols();
        let mut net = Self::new(d, classes, cfg.seed);
        let mut drop_rng = rng::rng_for(cfg.seed, "net-dropout", 1);
        let inv_keep = 1.0 / (1.0 - DROPOUT_P);

        for _epoch in 0..cfg.epochs {
            // Forward pass.
            let mut h1 = vec![0.0; n * d]; // pre-activation
            let mut r = vec![0.0; n * d]; // post-ReLU
            for s in 0..n {
                for j in 0..d {
                    let mut acc = net.b1[j];
                    for i in 0..d {
                        acc += features[(s, i)] * net.w1[i * d + j];
                    }
                    h1[s * d + j] = acc;
                    r[s * d + j] = acc.max(0.0);
                }
            }
            // Batch statistics.
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for j in 0..d {
                let mut m = 0.0;
                for s in 0..n {
                    m += r[s * d + j];
                }
                m /= n as f64;
                let mut v = 0.0;
                for s in 0..n {
                    let dlt = r[s * d + j] - m;
                    v += dlt * dlt;
                }
                mean[j] = m;
                var[j] = v / n as f64;
            }
            let mut xhat = vec![0.0; n * d];
            let mut bn_out = vec![0.0; n * d];
            for s in 0..n {
                for j in 0..d {
                    let xh = (r[s * d + j] - mean[j]) / (var[j] + BN_EPS).sqrt();
                    xhat[s * d + j] = xh;
                    bn_out[s * d + j] = net.gamma[j] * xh + net.beta[j];
                }
            }
            // Dropout (train time only).
            let mut mask = vec![0.0; n * d];
            let mut dropped = vec![0.0; n * d];
            for (m, (dst, src)) in mask
                .iter_mut()
                .zip(dropped.iter_mut().zip(bn_out.iter()))
            {
                if drop_rng.gen::<f64>() >= DROPOUT_P {
                    *m = inv_keep;
                    *dst = src * inv_keep;
                }
            }
            // Logits and softmax gradient.
            let c = classes;
            let mut dlogits = vec![0.0; n * c];
            for s in 0..n {
                let mut logits = net.b2.clone();
                for j in 0..d {
                    let v = dropped[s * d + j];
                    if v != 0.0 {
                        for k in 0..c {
                            logits[k] += v * net.w2[j * c + k];
                        }
                    }
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    denom += *l;
                }
                for k in 0..c {
                    let p = logits[k] / denom;
                    dlogits[s * c + k] = (p - if labels[s] == k { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            // Backward pass.
            let mut gw2 = vec![0.0; d * c];
            let mut gb2 = vec![0.0; c];
            let mut d_drop = vec![0.0; n * d];
            for s in 0..n {
                for k in 0..c {
                    gb2[k] += dlogits[s * c + k];
                }
                for j in 0..d {
                    let v = dropped[s * d + j];
                    let mut acc = 0.0;
                    for k in 0..c {
                        let g = dlogits[s * c + k];
                        gw2[j * c + k] += v * g;
                        acc += g * net.w2[j * c + k];
                    }
                    d_drop[s * d + j] = acc;
                }
            }
            let mut d_bn = vec![0.0; n * d];
            for idx in 0..n * d {
                d_bn[idx] = d_drop[idx] * mask[idx];
            }
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            let mut d_xhat = vec![0.0; n * d];
            for s in 0..n {
                for j in 0..d {
                    let g = d_bn[s * d + j];
                    ggamma[j] += g * xhat[s * d + j];
                    gbeta[j] += g;
                    d_xhat[s * d + j] = g * net.gamma[j];
                }
            }
            // Batch-norm backward per feature.
            let mut d_r = vec![0.0; n * d];
            for j in 0..d {
                let inv_std = 1.0 / (var[j] + BN_EPS).sqrt();
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for s in 0..n {
                    sum_dxhat += d_xhat[s * d + j];
                    sum_dxhat_xhat += d_xhat[s * d + j] * xhat[s * d + j];
                }
                for s in 0..n {
                    d_r[s * d + j] = inv_std
                        * (d_xhat[s * d + j]
                            - sum_dxhat / n as f64
                            - xhat[s * d + j] * sum_dxhat_xhat / n as f64);
                }
            }
            let mut gw1 = vec![0.0; d * d];
            let mut gb1 = vec![0.0; d];
            for s in 0..n {
                for j in 0..d {
                    if h1[s * d + j] <= 0.0 {
                        continue;
                    }
                    let g = d_r[s * d + j];
                    gb1[j] += g;
                    for i in 0..d {
                        gw1[i * d + j] += features[(s, i)] * g;
                    }
                }
            }
            // Plain gradient-descent updates.
            for (w, g) in net.w2.iter_mut().zip(gw2.iter()) {
                *w -= cfg.lr * g;
            }
            for (b, g) in net.b2.iter_mut().zip(gb2.iter()) {
                *b -= cfg.lr * g;
            }
            for (g0, g) in net.gamma.iter_mut().zip(ggamma.iter()) {
                *g0 -= cfg.lr * g;
            }
            for (b0, g) in net.beta.iter_mut().zip(gbeta.iter()) {
                *b0 -= cfg.lr * g;
            }
            for (w, g) in net.w1.iter_mut().zip(gw1.iter()) {
                *w -= cfg.lr * g;
            }
            for (b, g) in net.b1.iter_mut().zip(gb1.iter()) {
                *b -= cfg.lr * g;
            }
            net.bn_mean = mean;
            net.bn_var = var;
        }
        net
    }
}

/// Which classifier produces raw labels at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Classifier {
    /// Deterministic default: nearest centroid, ties to the lowest index.
    NearestCentroid,
    /// The trained two-layer network.
    Network(TwoLayerNet),
}

/// Trained selector: centroids, classifier, mapping and the secret label
/// permutation.
#[derive(Debug, Clone)]
pub struct SelectorModel {
    pub centroids: Array2<f64>,
    pub classifier: Classifier,
    pub mapping: MappingConfig,
    pub permutation: Permutation,
    pub key_fingerprint: String,
}

/// K-Means with k-means++ initialization and Lloyd iterations.
///
/// Runs at most 300 iterations or until the relative centroid shift drops
/// below 1e-4; the clustering objective is asserted non-increasing.
pub fn kmeans(
    features: &Array2<f64>,
    k: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let n = features.nrows();
    let d = features.ncols();
    if n < k {
        return Err(arg_err(format!("{n} samples cannot populate {k} clusters")));
    }
    let mut rng = rng::rng_for(seed, "kmeans", 0);

    // k-means++ seeding.
    let mut centroids = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&features.row(first));
    let mut d2 = vec![f64::INFINITY; n];
    for c in 1..k {
        for (s, slot) in d2.iter_mut().enumerate() {
            let prev = centroids.row(c - 1);
            let dist: f64 = features
                .row(s)
                .iter()
                .zip(prev.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            *slot = slot.min(dist);
        }
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (s, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = s;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.row_mut(c).assign(&features.row(pick));
    }

    let assign = |centroids: &Array2<f64>| -> Vec<usize> {
        (0..n)
            .map(|s| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for c in 0..k {
                    let dist: f64 = features
                        .row(s)
                        .iter()
                        .zip(centroids.row(c).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if dist < best_d {
                        best_d = dist;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };
    let objective = |centroids: &Array2<f64>, labels: &[usize]| -> f64 {
        (0..n)
            .map(|s| {
                features
                    .row(s)
                    .iter()
                    .zip(centroids.row(labels[s]).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    };

    let mut labels = assign(&centroids);
    let mut prev_obj = objective(&centroids, &labels);
    for _iter in 0..300 {
        // Update step.
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (s, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            let row = features.row(s);
            for (j, &v) in row.iter().enumerate() {
                sums[(c, j)] += v;
            }
        }
        let mut shift: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // keep the previous centroid
            }
            for j in 0..d {
                let new = sums[(c, j)] / counts[c] as f64;
                shift += (new - centroids[(c, j)]).powi(2);
                scale += new * new;
                centroids[(c, j)] = new;
            }
        }
        labels = assign(&centroids);
        let obj = objective(&centroids, &labels);
        assert!(
            obj <= prev_obj + 1e-9 * prev_obj.abs().max(1.0),
            "k-means objective increased: {prev_obj} -> {obj}"
        );
        prev_obj = obj;
        if scale > 0.0 && (shift / scale).sqrt() < 1e-4 {
            break;
        }
    }
    Ok((centroids, labels))
}

/// How the raw label is produced at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierMode {
    NearestCentroid,
    Network,
}

/// Fit the selector: cluster the features, optionally train the classifier
/// network on the cluster labels, and install the key-seeded permutation.
pub fn train_selector(
    features: &[FeatureVector],
    cfg: &MappingConfig,
    key: &SecretKey,
    mode: ClassifierMode,
    seed: u64,
) -> Result<SelectorModel> {
    if features.len() < cfg.clusters {
        return Err(arg_err(format!(
            "{} feature vectors cannot populate {} clusters",
            features.len(),
            cfg.clusters
        )));
    }
    let d = features[0].dim();
    if features.iter().any(|f| f.dim() != d) {
        return Err(arg_err("feature dimensions are inconsistent"));
    }
    let mut matrix = Array2::zeros((features.len(), d));
    for (i, f) in features.iter().enumerate() {
        matrix.row_mut(i).assign(&f.0);
    }
    let (centroids, labels) = kmeans(&matrix, cfg.clusters, seed)?;
    let classifier = match mode {
        ClassifierMode::NearestCentroid => Classifier::NearestCentroid,
        ClassifierMode::Network => Classifier::Network(TwoLayerNet::train(
            &matrix,
            &labels,
            cfg.clusters,
            NetTrainConfig {
                seed,
                ..NetTrainConfig::default()
            },
        )),
    };
    Ok(SelectorModel {
        centroids,
        classifier,
        mapping: cfg.clone(),
        permutation: Permutation::from_key(key, cfg.clusters),
        key_fingerprint: key.fingerprint(),
    })
}

/// Raw cluster label before the permutation (ties to the lowest index).
pub fn raw_label(model: &SelectorModel, feat: &FeatureVector) -> usize {
    match &model.classifier {
        Classifier::NearestCentroid => {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..model.centroids.nrows() {
                let dist: f64 = feat
                    .0
                    .iter()
                    .zip(model.centroids.row(c).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            best
        }
        Classifier::Network(net) => {
            let logits = net.logits(feat.0.as_slice().expect("contiguous"));
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (k, &v) in logits.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best
        }
    }
}

/// Classifier label with the secret permutation applied.
pub fn assign_label(model: &SelectorModel, feat: &FeatureVector) -> usize {
    model.permutation.apply(raw_label(model, feat))
}

/// The modulo parameter map from a label to injection parameters.
///
/// `t = t_lo + (y mod (t_hi - t_lo))`,
/// `l_x = l_x_lo + (y mod (l_x_hi - l_x_lo))`,
/// `l_y = l_y_lo + ((y / w) mod w)` with `w = l_y_hi - l_y_lo` (the
/// published unfolding; see `row_major_unfold` for the alternative).
/// All arithmetic uses non-negative modulo and integer floor division, and
/// the upper endpoints are never produced.
pub fn map_params(y: usize, cfg: &MappingConfig) -> InjectionParams {
    let y = y as i64;
    let t_width = (cfg.t_hi - cfg.t_lo).max(1) as i64;
    let x_width = ((cfg.l_x_hi - cfg.l_x_lo).max(1)) as i64;
    let y_width = ((cfg.l_y_hi - cfg.l_y_lo).max(1)) as i64;
    let div_width = if cfg.row_major_unfold { x_width } else { y_width };
    let t = cfg.t_lo as i64 + y.rem_euclid(t_width);
    let l_x = cfg.l_x_lo as i64 + y.rem_euclid(x_width);
    let l_y = cfg.l_y_lo as i64 + y.div_euclid(div_width).rem_euclid(y_width);
    InjectionParams {
        t: t as usize,
        offset: Offset::new(l_x as i32, l_y as i32),
    }
}

/// Full selector: feature extraction, label assignment, parameter mapping.
pub fn select(model: &SelectorModel, image: &Image) -> InjectionParams {
    let feat = encode_features(image);
    map_params(assign_label(model, &feat), &model.mapping)
}
