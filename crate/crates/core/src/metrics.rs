//! Quantitative evaluation: SSIM, Inception Score, KID, a perceptual
//! distance over a pinned feature extractor, embedding similarity, and the
//! Wilcoxon signed-rank test, plus directory-level report generation.

use crate::codec::batch_from_images;
use crate::nn::{
    load_params, params_hash, save_params, AdamW, AdamWConfig, Conv2d, Fwd, Linear, ParamStore,
};
use crate::scene::{load_png, SceneError};
use crate::semantic::SemanticEncoder;
use crate::tensor::Var;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] crate::nn::IoError),
    #[error(transparent)]
    File(#[from] std::io::Error),
    #[error(transparent)]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] SceneError),
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Rec. 601 luma of an `[h, w, 3]` image in `[0, 1]`.
fn luma(img: &Array3<f32>) -> Array2<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * img[[i, j, 0]] as f64 + 0.587 * img[[i, j, 1]] as f64 + 0.114 * img[[i, j, 2]] as f64
    })
}

/// Separable Gaussian filter, valid region only.
fn gauss_filter(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let mut rows = Array2::<f64>::zeros((h, w - n + 1));
    for i in 0..h {
        for j in 0..w - n + 1 {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * x[[i, j + t]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - n + 1, w - n + 1));
    for i in 0..h - n + 1 {
        for j in 0..w - n + 1 {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * rows[[i + t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean local structural similarity over the luminance channel with an
/// 11x11 Gaussian window (sigma 1.5) and a dynamic range of 1.0.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(format!(
            "images {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape()[0] < SSIM_WINDOW || a.shape()[1] < SSIM_WINDOW {
        return Err(MetricError::Shape(format!(
            "image {:?} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.shape()
        )));
    }
    let (x, y) = (luma(a), luma(b));
    let k = gaussian_window();
    let mu_x = gauss_filter(&x, &k);
    let mu_y = gauss_filter(&y, &k);
    let xx = gauss_filter(&(&x * &x), &k);
    let yy = gauss_filter(&(&y * &y), &k);
    let xy = gauss_filter(&(&x * &y), &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ((((&mx, &my), &sxx), &syy), &sxy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter())
        .zip(yy.iter())
        .zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

// ---------------------------------------------------------------------------
// KID
// ---------------------------------------------------------------------------

const KID_SUBSETS: usize = 10;
const KID_SUBSET_CAP: usize = 100;

fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let d = u.len() as f64;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += poly_kernel(x[i], x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += poly_kernel(y[i], y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for xi in x {
        for yj in y {
            kxy += poly_kernel(xi, yj);
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}

/// Kernel inception distance: unbiased squared MMD with the cubic polynomial
/// kernel `k(u, v) = (u.v/d + 1)^3`, averaged over seed-pinned subsets.
pub fn kid(
    features_gen: &Array2<f64>,
    features_real: &Array2<f64>,
    seed: u64,
) -> Result<f64, MetricError> {
    let (n, m) = (features_gen.nrows(), features_real.nrows());
    if n < 2 || m < 2 {
        return Err(MetricError::Data(format!(
            "kid needs at least 2 samples per side, got {n} and {m}"
        )));
    }
    if features_gen.ncols() != features_real.ncols() {
        return Err(MetricError::Shape(format!(
            "feature dims {} vs {}",
            features_gen.ncols(),
            features_real.ncols()
        )));
    }
    let size = n.min(m).min(KID_SUBSET_CAP);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..KID_SUBSETS {
        let mut gi: Vec<usize> = (0..n).collect();
        let mut ri: Vec<usize> = (0..m).collect();
        gi.shuffle(&mut rng);
        ri.shuffle(&mut rng);
        let xs: Vec<&[f64]> = gi[..size]
            .iter()
            .map(|&i| features_gen.row(i).to_slice().unwrap())
            .collect();
        let ys: Vec<&[f64]> = ri[..size]
            .iter()
            .map(|&i| features_real.row(i).to_slice().unwrap())
            .collect();
        total += mmd2_unbiased(&xs, &ys);
    }
    Ok(total / KID_SUBSETS as f64)
}

// ---------------------------------------------------------------------------
// Inception score
// ---------------------------------------------------------------------------

/// Exp of the mean KL divergence between per-image class posteriors and the
/// split marginal, averaged over splits.
pub fn inception_score(probs: &Array2<f64>, splits: usize) -> Result<f64, MetricError> {
    let n = probs.nrows();
    if n == 0 {
        return Err(MetricError::Data("inception score of an empty set".into()));
    }
    if splits == 0 {
        return Err(MetricError::Data("splits must be positive".into()));
    }
    let splits = splits.min(n);
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let lo = s * n / splits;
        let hi = (s + 1) * n / splits;
        let chunk = probs.slice(ndarray::s![lo..hi, ..]);
        let count = (hi - lo) as f64;
        let marginal: Vec<f64> = (0..chunk.ncols())
            .map(|j| chunk.column(j).sum() / count)
            .collect();
        let mut mean_kl = 0.0;
        for row in chunk.rows() {
            let mut kl = 0.0;
            for (&p, &q) in row.iter().zip(&marginal) {
                if p > 0.0 {
                    kl += p * (p / q).ln();
                }
            }
            mean_kl += kl;
        }
        scores.push((mean_kl / count).exp());
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

const WILCOXON_EXACT_LIMIT: usize = 12;

/// Average ranks of |deltas|, doubled so ties stay integral.
fn double_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].partial_cmp(&abs[j]).unwrap());
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // average of ranks i+1 ..= j+1, doubled: (i + j + 2)
        let dr = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            ranks[idx] = dr;
        }
        i = j + 1;
    }
    ranks
}

/// Exact null distribution of 2*W+ as counts indexed by the doubled statistic.
fn exact_counts(dranks: &[u64]) -> Vec<f64> {
    let total: u64 = dranks.iter().sum();
    let mut counts = vec![0.0; total as usize + 1];
    counts[0] = 1.0;
    for &r in dranks {
        for w in (r as usize..counts.len()).rev() {
            counts[w] += counts[w - r as usize];
        }
    }
    counts
}

fn normal_sf(z: f64) -> f64 {
    // upper tail of the standard normal via an erfc rational approximation
    let x = z / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erfc = poly * (-x * x).exp();
    if x >= 0.0 {
        0.5 * erfc
    } else {
        1.0 - 0.5 * erfc
    }
}

/// Two-sided Wilcoxon signed-rank test on paired differences. Zeros are
/// dropped and ties receive average ranks. Returns `(w_plus, p_value)`;
/// the null distribution is enumerated exactly for n <= 12 and approximated
/// normally (with continuity correction) above.
pub fn wilcoxon_signed_rank(deltas: &[f64]) -> Result<(f64, f64), MetricError> {
    let nonzero: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(MetricError::Data("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let dranks = double_ranks(&abs);
    let dw_plus: u64 = nonzero
        .iter()
        .zip(&dranks)
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let n = nonzero.len();
    let w_plus = dw_plus as f64 / 2.0;

    let p = if n <= WILCOXON_EXACT_LIMIT {
        let counts = exact_counts(&dranks);
        let total: f64 = counts.iter().sum();
        let lower: f64 = counts[..=dw_plus as usize].iter().sum();
        let upper: f64 = counts[dw_plus as usize..].iter().sum();
        (2.0 * (lower / total).min(upper / total)).min(1.0)
    } else {
        let mean = n as f64 * (n as f64 + 1.0) / 4.0;
        let mut var = n as f64 * (n as f64 + 1.0) * (2.0 * n as f64 + 1.0) / 24.0;
        // tie correction: subtract sum(t^3 - t)/48 per tied group
        let mut sorted = abs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            var -= (t * t * t - t) / 48.0;
            i = j + 1;
        }
        let diff = w_plus - mean;
        let z = (diff.abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * normal_sf(z)).min(1.0)
    };
    Ok((w_plus, p))
}

// ---------------------------------------------------------------------------
// Pinned feature extractor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExtractorConfig {
    pub base_channels: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            base_channels: 8,
            feature_dim: 32,
            num_classes: 3,
            init_seed: 0,
        }
    }
}

/// Small scene-category classifier whose hidden activations provide the
/// feature space for KID, the inception score, and the perceptual distance.
/// Pinned by weight hash once trained; absolute values live in this space,
/// not the original large-network one.
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    store: ParamStore<f32>,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    head_feat: Linear,
    head_cls: Linear,
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(config.init_seed);
        let b = config.base_channels;
        let conv1 = Conv2d::new(&mut store, "ex.conv1", 3, b, 3, 2, &mut rng);
        let conv2 = Conv2d::new(&mut store, "ex.conv2", b, 2 * b, 3, 2, &mut rng);
        let conv3 = Conv2d::new(&mut store, "ex.conv3", 2 * b, 4 * b, 3, 2, &mut rng);
        let head_feat = Linear::new(&mut store, "ex.feat", 4 * b, config.feature_dim, &mut rng);
        let head_cls = Linear::new(
            &mut store,
            "ex.cls",
            config.feature_dim,
            config.num_classes,
            &mut rng,
        );
        FeatureExtractor {
            config,
            store,
            conv1,
            conv2,
            conv3,
            head_feat,
            head_cls,
        }
    }

    /// Taps (post-activation maps at each scale), pooled features and class
    /// logits for a `[n, 3, h, w]` input.
    fn forward(&self, f: &mut Fwd<'_, f32>, x: Var) -> (Vec<Var>, Var, Var) {
        let h1 = self.conv1.apply(f, x);
        let h1 = f.tape.silu(h1);
        let h2 = self.conv2.apply(f, h1);
        let h2 = f.tape.silu(h2);
        let h3 = self.conv3.apply(f, h2);
        let h3 = f.tape.silu(h3);
        let pooled = f.tape.spatial_mean(h3);
        let feat = self.head_feat.apply(f, pooled);
        let logits = self.head_cls.apply(f, feat);
        (vec![h1, h2, h3], feat, logits)
    }

    fn run(&self, images: &[Array3<f32>]) -> Result<(Array2<f64>, Array2<f64>), MetricError> {
        if images.is_empty() {
            return Err(MetricError::Data("no images to extract from".into()));
        }
        let mut feats = Array2::<f64>::zeros((images.len(), self.config.feature_dim));
        let mut probs = Array2::<f64>::zeros((images.len(), self.config.num_classes));
        for (chunk_idx, chunk) in images.chunks(32).enumerate() {
            let batch = batch_from_images(chunk);
            let mut f = Fwd::new(&self.store, false);
            let x = f.tape.constant(batch.into_dyn());
            let (_, feat, logits) = self.forward(&mut f, x);
            let p = f.tape.softmax_lastdim(logits);
            let fv = f.tape.value(feat).clone();
            let pv = f.tape.value(p).clone();
            for i in 0..chunk.len() {
                let row = chunk_idx * 32 + i;
                for j in 0..self.config.feature_dim {
                    feats[[row, j]] = fv[[i, j]] as f64;
                }
                for j in 0..self.config.num_classes {
                    probs[[row, j]] = pv[[i, j]] as f64;
                }
            }
        }
        Ok((feats, probs))
    }

    /// Pooled feature vectors (rows) for a set of `[h, w, 3]` images.
    pub fn features(&self, images: &[Array3<f32>]) -> Result<Array2<f64>, MetricError> {
        Ok(self.run(images)?.0)
    }

    /// Per-image class probability rows for a set of `[h, w, 3]` images.
    pub fn class_probs(&self, images: &[Array3<f32>]) -> Result<Array2<f64>, MetricError> {
        Ok(self.run(images)?.1)
    }

    /// Perceptual distance: sum over layer taps of the mean squared
    /// difference between unit-normalized channel features.
    pub fn perceptual_distance(
        &self,
        a: &Array3<f32>,
        b: &Array3<f32>,
    ) -> Result<f64, MetricError> {
        if a.shape() != b.shape() {
            return Err(MetricError::Shape(format!(
                "images {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let batch = batch_from_images([a, b]);
        let mut f = Fwd::new(&self.store, false);
        let x = f.tape.constant(batch.into_dyn());
        let (taps, _, _) = self.forward(&mut f, x);
        let mut total = 0.0;
        for tap in taps {
            let v = f.tape.value(tap);
            let (c, h, w) = (v.shape()[1], v.shape()[2], v.shape()[3]);
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let mut na = 0.0f64;
                    let mut nb = 0.0f64;
                    for k in 0..c {
                        na += (v[[0, k, i, j]] as f64).powi(2);
                        nb += (v[[1, k, i, j]] as f64).powi(2);
                    }
                    let (na, nb) = (na.sqrt().max(1e-10), nb.sqrt().max(1e-10));
                    for k in 0..c {
                        let d = v[[0, k, i, j]] as f64 / na - v[[1, k, i, j]] as f64 / nb;
                        acc += d * d;
                    }
                }
            }
            total += acc / (c * h * w) as f64;
        }
        Ok(total)
    }

    pub fn weight_hash(&self) -> String {
        params_hash(&self.store)
    }

    pub fn save(&self, dir: &Path, data_hash: &str) -> Result<(), MetricError> {
        std::fs::create_dir_all(dir)?;
        save_params(&self.store, &dir.join("extractor.weights"))?;
        let manifest = ExtractorManifest {
            config: self.config.clone(),
            weight_hash: self.weight_hash(),
            data_hash: data_hash.to_string(),
        };
        std::fs::write(
            dir.join("extractor.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, MetricError> {
        let manifest: ExtractorManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("extractor.json"))?)?;
        let mut ex = FeatureExtractor::new(manifest.config);
        load_params(&mut ex.store, &dir.join("extractor.weights"))?;
        if ex.weight_hash() != manifest.weight_hash {
            return Err(MetricError::Data(
                "extractor weight hash does not match its manifest".into(),
            ));
        }
        Ok(ex)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtractorManifest {
    config: ExtractorConfig,
    weight_hash: String,
    data_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        ExtractorTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Cross-entropy training of the extractor on (image, scene-category) pairs.
/// Returns the per-epoch mean loss history.
pub fn train_extractor(
    ex: &mut FeatureExtractor,
    images: &[Array3<f32>],
    labels: &[usize],
    cfg: &ExtractorTrainConfig,
) -> Result<Vec<f64>, MetricError> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(MetricError::Data(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= ex.config.num_classes) {
        return Err(MetricError::Data(format!(
            "label {bad} outside {} classes",
            ex.config.num_classes
        )));
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &ex.store,
    );
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Array3<f32>> = chunk.iter().map(|&i| &images[i]).collect();
            let x = batch_from_images(batch);
            let mut onehot = ArrayD::<f32>::zeros(IxDyn(&[chunk.len(), ex.config.num_classes]));
            for (r, &i) in chunk.iter().enumerate() {
                onehot[[r, labels[i]]] = 1.0;
            }
            let mut f = Fwd::new(&ex.store, true);
            let xin = f.tape.constant(x.into_dyn());
            let (_, _, logits) = ex.forward(&mut f, xin);
            let lsm = f.tape.log_softmax_lastdim(logits);
            let mask = f.tape.constant(onehot);
            let picked = f.tape.mul(lsm, mask);
            let total = f.tape.sum_all(picked);
            let loss = f.tape.scale(total, -1.0 / chunk.len() as f64);
            let loss_v = f.tape.value(loss)[[]] as f64;
            let mut grads = f.tape.backward(loss);
            let bindings = f.bindings();
            drop(f);
            opt.step(&mut ex.store, &mut grads, &bindings);
            if !loss_v.is_finite() {
                return Err(MetricError::Data("non-finite extractor loss".into()));
            }
            epoch_loss += loss_v;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Embedding similarity
// ---------------------------------------------------------------------------

/// Cosine similarity of the pooled contrastive embeddings of two images.
pub fn embedding_similarity(
    sem: &SemanticEncoder,
    gen: &Array3<f32>,
    gt: &Array3<f32>,
) -> Result<f64, MetricError> {
    let a = sem
        .embed_ground(gen)
        .map_err(|e| MetricError::Data(e.to_string()))?;
    let b = sem
        .embed_ground(gt)
        .map_err(|e| MetricError::Data(e.to_string()))?;
    Ok(a.pooled
        .iter()
        .zip(b.pooled.iter())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum())
}

// ---------------------------------------------------------------------------
// Per-pair metric registry and report generation
// ---------------------------------------------------------------------------

/// Shared frozen models handed to per-pair metrics.
pub struct EvalContext<'a> {
    pub extractor: &'a FeatureExtractor,
    pub semantic: &'a SemanticEncoder,
}

/// A per-pair image metric; set-level metrics (IS, KID) are computed
/// separately over the whole run.
pub trait PairMetric: Sync {
    fn name(&self) -> &'static str;
    fn compute(
        &self,
        ctx: &EvalContext<'_>,
        gen: &Array3<f32>,
        gt: &Array3<f32>,
    ) -> Result<f64, MetricError>;
}

struct SsimMetric;
impl PairMetric for SsimMetric {
    fn name(&self) -> &'static str {
        "ssim"
    }
    fn compute(
        &self,
        _ctx: &EvalContext<'_>,
        gen: &Array3<f32>,
        gt: &Array3<f32>,
    ) -> Result<f64, MetricError> {
        ssim(gen, gt)
    }
}

struct LpipsMetric;
impl PairMetric for LpipsMetric {
    fn name(&self) -> &'static str {
        "lpips"
    }
    fn compute(
        &self,
        ctx: &EvalContext<'_>,
        gen: &Array3<f32>,
        gt: &Array3<f32>,
    ) -> Result<f64, MetricError> {
        ctx.extractor.perceptual_distance(gen, gt)
    }
}

struct ClipSimMetric;
impl PairMetric for ClipSimMetric {
    fn name(&self) -> &'static str {
        "clip_sim"
    }
    fn compute(
        &self,
        ctx: &EvalContext<'_>,
        gen: &Array3<f32>,
        gt: &Array3<f32>,
    ) -> Result<f64, MetricError> {
        embedding_similarity(ctx.semantic, gen, gt)
    }
}

pub fn pair_metric_registry() -> &'static [&'static dyn PairMetric] {
    &[&SsimMetric, &LpipsMetric, &ClipSimMetric]
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricValues {
    pub ssim: f64,
    pub is: f64,
    pub kid: f64,
    pub lpips: f64,
    pub clip_sim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub metrics: MetricValues,
    /// File name of the per-sample CSV next to the report.
    pub per_sample: String,
    pub n: usize,
    pub extractor_hash: String,
    pub seed: u64,
    #[serde(skip)]
    pub rows: Vec<PerPairRow>,
}

#[derive(Debug, Clone)]
pub struct PerPairRow {
    pub id: String,
    pub ssim: f64,
    pub lpips: f64,
    pub clip_sim: f64,
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>, MetricError> {
    let mut ids = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

fn render_table(values: &MetricValues, n: usize) -> String {
    let rows = [
        ("ssim", values.ssim),
        ("is", values.is),
        ("kid", values.kid),
        ("lpips", values.lpips),
        ("clip_sim", values.clip_sim),
    ];
    let mut out = format!("{:<10} {:>12}\n", "metric", "value");
    for (name, v) in rows {
        out.push_str(&format!("{name:<10} {v:>12.6}\n"));
    }
    out.push_str(&format!("{:<10} {n:>12}\n", "n"));
    out
}

/// Evaluate a generated directory against a ground-truth directory of
/// id-aligned PNGs. Writes `report.json`, `per_sample.csv` and `table.txt`
/// into `out_dir` and returns the report.
pub fn evaluate_run(
    gen_dir: &Path,
    gt_dir: &Path,
    ctx: &EvalContext<'_>,
    seed: u64,
    out_dir: &Path,
) -> Result<MetricReport, MetricError> {
    let gen_ids = png_ids(gen_dir)?;
    let gt_ids = png_ids(gt_dir)?;
    if gen_ids.is_empty() || gt_ids.is_empty() {
        return Err(MetricError::Format(
            "no id-aligned images found in one of the directories".into(),
        ));
    }
    if gen_ids != gt_ids {
        let only_gen: Vec<_> = gen_ids.difference(&gt_ids).take(3).cloned().collect();
        let only_gt: Vec<_> = gt_ids.difference(&gen_ids).take(3).cloned().collect();
        return Err(MetricError::Format(format!(
            "id mismatch between directories (only generated: {only_gen:?}, only reference: {only_gt:?})"
        )));
    }

    let ids: Vec<String> = gen_ids.into_iter().collect();
    let mut gen_images = Vec::with_capacity(ids.len());
    let mut gt_images = Vec::with_capacity(ids.len());
    for id in &ids {
        gen_images.push(load_png(&gen_dir.join(format!("{id}.png")))?);
        gt_images.push(load_png(&gt_dir.join(format!("{id}.png")))?);
    }

    let mut rows = Vec::with_capacity(ids.len());
    for ((id, g), t) in ids.iter().zip(&gen_images).zip(&gt_images) {
        let mut values = [0.0f64; 3];
        for (slot, metric) in values.iter_mut().zip(pair_metric_registry()) {
            *slot = metric.compute(ctx, g, t)?;
        }
        rows.push(PerPairRow {
            id: id.clone(),
            ssim: values[0],
            lpips: values[1],
            clip_sim: values[2],
        });
    }

    let gen_feats = ctx.extractor.features(&gen_images)?;
    let gt_feats = ctx.extractor.features(&gt_images)?;
    let gen_probs = ctx.extractor.class_probs(&gen_images)?;
    let n = ids.len();
    let metrics = MetricValues {
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n as f64,
        is: inception_score(&gen_probs, 10)?,
        kid: kid(&gen_feats, &gt_feats, seed)?,
        lpips: rows.iter().map(|r| r.lpips).sum::<f64>() / n as f64,
        clip_sim: rows.iter().map(|r| r.clip_sim).sum::<f64>() / n as f64,
    };

    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("id,ssim,lpips,clip_sim\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.id, r.ssim, r.lpips, r.clip_sim));
    }
    std::fs::write(out_dir.join("per_sample.csv"), &csv)?;
    std::fs::write(out_dir.join("table.txt"), render_table(&metrics, n))?;

    let report = MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metrics,
        per_sample: "per_sample.csv".into(),
        n,
        extractor_hash: ctx.extractor.weight_hash(),
        seed,
        rows,
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
