//! Two-tower contrastive image encoder. The aerial tower defines the token
//! sequence injected into the denoiser via cross-attention; the ground tower
//! exists for contrastive pretraining and for the embedding-similarity
//! metric. Both are frozen after pretraining.

use crate::codec::image_to_input;
use crate::nn::{load_params, params_hash, save_params, AdamW, AdamWConfig, Conv2d, Fwd, Linear, ParamStore};
use crate::tensor::Var;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Io(#[from] crate::nn::IoError),
    #[error("i/o failure: {0}")]
    File(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SemanticConfig {
    /// Embedding width of every token.
    pub token_dim: usize,
    /// Stem width; doubles once.
    pub base_channels: usize,
    /// Softmax temperature of the contrastive loss.
    pub temperature: f64,
    pub init_seed: u64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig {
            token_dim: 128,
            base_channels: 16,
            temperature: 0.07,
            init_seed: 0,
        }
    }
}

/// 16 patch tokens plus one leading global token.
pub const NUM_PATCH_TOKENS: usize = 16;
pub const NUM_TOKENS: usize = NUM_PATCH_TOKENS + 1;

/// Token sequence for one image: `tokens` is `[L, d]` with the unit-norm
/// global embedding at row 0, duplicated in `pooled`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f32>,
    pub pooled: Array1<f32>,
}

struct Tower {
    stem1: Conv2d,
    stem2: Conv2d,
    patch: Conv2d,
    global: Linear,
}

impl Tower {
    fn new(store: &mut ParamStore<f32>, name: &str, cfg: &SemanticConfig, rng: &mut ChaCha12Rng) -> Self {
        let b = cfg.base_channels;
        Tower {
            stem1: Conv2d::new(store, &format!("{name}.stem1"), 3, b, 3, 2, rng),
            stem2: Conv2d::new(store, &format!("{name}.stem2"), b, 2 * b, 3, 2, rng),
            patch: Conv2d::new(store, &format!("{name}.patch"), 2 * b, cfg.token_dim, 3, 4, rng),
            global: Linear::new(store, &format!("{name}.global"), cfg.token_dim, cfg.token_dim, rng),
        }
    }

    /// Forward a `[n, 3, h, w]` batch to `(tokens [n, L, d], pooled [n, d])`.
    fn forward(&self, f: &mut Fwd<f32>, x: Var, d: usize) -> (Var, Var) {
        let mut h = self.stem1.apply(f, x);
        h = f.tape.silu(h);
        h = self.stem2.apply(f, h);
        h = f.tape.silu(h);
        let feats = self.patch.apply(f, h); // [n, d, ph, pw]
        let shape = f.tape.shape(feats).to_vec();
        let (n, ph, pw) = (shape[0], shape[2], shape[3]);
        let flat = f.tape.reshape(feats, &[n, d, ph * pw]);
        let patches = f.tape.transpose_last2(flat); // [n, p, d]
        let avg = f.tape.spatial_mean(feats); // [n, d]
        let proj = self.global.apply(f, avg);
        let pooled = f.tape.l2_normalize_rows(proj);
        let lead = f.tape.reshape(pooled, &[n, 1, d]);
        let tokens = f.tape.concat_axis1(&[lead, patches]);
        (tokens, pooled)
    }
}

pub struct SemanticEncoder {
    pub config: SemanticConfig,
    store: ParamStore<f32>,
    aerial: Tower,
    ground: Tower,
}

impl SemanticEncoder {
    pub fn new(config: SemanticConfig) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let aerial = Tower::new(&mut store, "aerial", &config, &mut rng);
        let ground = Tower::new(&mut store, "ground", &config, &mut rng);
        SemanticEncoder {
            config,
            store,
            aerial,
            ground,
        }
    }

    fn check_batch(&self, x: &Array4<f32>) -> Result<(), SemanticError> {
        if x.shape()[1] != 3 {
            return Err(SemanticError::Shape(format!(
                "expected 3 channels, got {}",
                x.shape()[1]
            )));
        }
        // two stride-2 stems then one stride-4 patchify; the patch grid must
        // hold exactly 16 positions
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (ph, pw) = (patch_side(h), patch_side(w));
        if ph * pw != NUM_PATCH_TOKENS {
            return Err(SemanticError::Shape(format!(
                "image {h}x{w} yields a {ph}x{pw} patch grid; need {NUM_PATCH_TOKENS} patches"
            )));
        }
        Ok(())
    }

    fn embed_tower(
        &self,
        tower: &Tower,
        batch: &Array4<f32>,
    ) -> Result<(Array3<f32>, Array2<f32>), SemanticError> {
        self.check_batch(batch)?;
        let mut f = Fwd::new(&self.store, false);
        let x = f.tape.constant(batch.clone().into_dyn());
        let (tokens, pooled) = tower.forward(&mut f, x, self.config.token_dim);
        Ok((
            f.tape.value(tokens).clone().into_dimensionality().unwrap(),
            f.tape.value(pooled).clone().into_dimensionality().unwrap(),
        ))
    }

    /// Token sequences for a `[n, 3, h, w]` batch of aerial images in
    /// `[-1, 1]`.
    pub fn embed_aerial_batch(
        &self,
        batch: &Array4<f32>,
    ) -> Result<(Array3<f32>, Array2<f32>), SemanticError> {
        self.embed_tower(&self.aerial, batch)
    }

    pub fn embed_ground_batch(
        &self,
        batch: &Array4<f32>,
    ) -> Result<(Array3<f32>, Array2<f32>), SemanticError> {
        self.embed_tower(&self.ground, batch)
    }

    /// Embed one aerial image given as `[h, w, 3]` in `[0, 1]`.
    pub fn embed(&self, image: &Array3<f32>) -> Result<TokenSequence, SemanticError> {
        let batch = image_to_input(image).insert_axis(Axis(0));
        let (tokens, pooled) = self.embed_aerial_batch(&batch)?;
        Ok(TokenSequence {
            tokens: tokens.index_axis(Axis(0), 0).to_owned(),
            pooled: pooled.index_axis(Axis(0), 0).to_owned(),
        })
    }

    /// Embed one ground image given as `[h, w, 3]` in `[0, 1]`.
    pub fn embed_ground(&self, image: &Array3<f32>) -> Result<TokenSequence, SemanticError> {
        let batch = image_to_input(image).insert_axis(Axis(0));
        let (tokens, pooled) = self.embed_ground_batch(&batch)?;
        Ok(TokenSequence {
            tokens: tokens.index_axis(Axis(0), 0).to_owned(),
            pooled: pooled.index_axis(Axis(0), 0).to_owned(),
        })
    }

    pub fn weight_hash(&self) -> String {
        params_hash(&self.store)
    }

    pub fn save(&self, dir: &Path, data_hash: &str) -> Result<(), SemanticError> {
        std::fs::create_dir_all(dir)?;
        save_params(&self.store, &dir.join("semantic.weights"))?;
        let manifest = SemanticManifest {
            config: self.config.clone(),
            num_tokens: NUM_TOKENS,
            weight_hash: self.weight_hash(),
            data_hash: data_hash.to_string(),
        };
        std::fs::write(
            dir.join("semantic.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SemanticError> {
        let raw = std::fs::read_to_string(dir.join("semantic.json"))?;
        let manifest: SemanticManifest = serde_json::from_str(&raw)?;
        let mut enc = SemanticEncoder::new(manifest.config);
        load_params(&mut enc.store, &dir.join("semantic.weights"))?;
        if enc.weight_hash() != manifest.weight_hash {
            return Err(SemanticError::Data("checkpoint weight hash mismatch".into()));
        }
        Ok(enc)
    }
}

fn patch_side(pixels: usize) -> usize {
    // stem1 (s2), stem2 (s2), patchify (k3 s4 p1)
    let s = pixels / 2 / 2;
    (s + 2 - 3) / 4 + 1
}

#[derive(Debug, Serialize, Deserialize)]
struct SemanticManifest {
    config: SemanticConfig,
    num_tokens: usize,
    weight_hash: String,
    data_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SemanticTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SemanticTrainConfig {
    fn default() -> Self {
        SemanticTrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 3e-4,
            seed: 0,
        }
    }
}

/// Symmetric InfoNCE over paired `(aerial, ground)` batches, `[n, 3, h, w]`
/// in `[-1, 1]`. Returns per-epoch mean losses.
pub fn train_semantic(
    encoder: &mut SemanticEncoder,
    aerials: &Array4<f32>,
    grounds: &Array4<f32>,
    cfg: &SemanticTrainConfig,
) -> Result<Vec<f64>, SemanticError> {
    let n = aerials.shape()[0];
    if n == 0 {
        return Err(SemanticError::Data("empty training set".into()));
    }
    if grounds.shape()[0] != n {
        return Err(SemanticError::Data(format!(
            "pair count mismatch: {} aerial vs {} ground",
            n,
            grounds.shape()[0]
        )));
    }
    encoder.check_batch(aerials)?;
    encoder.check_batch(grounds)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &encoder.store,
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let a = crate::codec::select_batch(aerials, chunk);
            let g = crate::codec::select_batch(grounds, chunk);
            let loss = contrastive_step(encoder, &a, &g, Some(&mut opt))?;
            epoch_loss += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(SemanticError::Data("batch size exceeds dataset".into()));
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}

/// Symmetric InfoNCE on one batch; updates weights when an optimizer is
/// given, otherwise just reports the loss.
pub fn contrastive_step(
    encoder: &mut SemanticEncoder,
    aerials: &Array4<f32>,
    grounds: &Array4<f32>,
    opt: Option<&mut AdamW<f32>>,
) -> Result<f64, SemanticError> {
    let n = aerials.shape()[0];
    let d = encoder.config.token_dim;
    let trainable = opt.is_some();
    let mut f = Fwd::new(&encoder.store, trainable);
    let xa = f.tape.constant(aerials.clone().into_dyn());
    let xg = f.tape.constant(grounds.clone().into_dyn());
    let (_, pa) = encoder.aerial.forward(&mut f, xa, d);
    let (_, pg) = encoder.ground.forward(&mut f, xg, d);
    let pgt = f.tape.transpose_last2(pg);
    let sims = f.tape.matmul(pa, pgt);
    let logits = f.tape.scale(sims, 1.0 / encoder.config.temperature);

    let eye = f.tape.constant(ndarray::Array2::<f32>::eye(n).into_dyn());
    let fwd_lsm = f.tape.log_softmax_lastdim(logits);
    let logits_t = f.tape.transpose_last2(logits);
    let bwd_lsm = f.tape.log_softmax_lastdim(logits_t);
    let fwd_diag = f.tape.mul(fwd_lsm, eye);
    let bwd_diag = f.tape.mul(bwd_lsm, eye);
    let fwd_sum = f.tape.sum_all(fwd_diag);
    let bwd_sum = f.tape.sum_all(bwd_diag);
    let total = f.tape.add(fwd_sum, bwd_sum);
    let loss = f.tape.scale(total, -0.5 / n as f64);
    let loss_val = f.tape.value(loss)[[]] as f64;
    if let Some(opt) = opt {
        let mut grads = f.tape.backward(loss);
        let bindings = f.bindings();
        drop(f);
        opt.step(&mut encoder.store, &mut grads, &bindings);
    }
    if !loss_val.is_finite() {
        return Err(SemanticError::Data("non-finite contrastive loss".into()));
    }
    Ok(loss_val)
}
