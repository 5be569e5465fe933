//! Small trainable variational autoencoder. Its encoder defines the spatial
//! embedding used both as conditioning and as the diffusion target latent;
//! height maps pass through the same weights after 3-channel replication.

use crate::nn::{load_params, params_hash, save_params, AdamW, AdamWConfig, Conv2d, Fwd, ParamStore};
use crate::scene::{HeightMap, Normalization};
use crate::tensor::Var;
use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
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
pub struct CodecConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    /// Image-to-latent spatial downsampling; must be a power of two.
    pub scale_factor: usize,
    /// Width of the first encoder stage; doubles per downsampling.
    pub base_channels: usize,
    pub init_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            image_size: 64,
            latent_channels: 4,
            scale_factor: 4,
            base_channels: 32,
            init_seed: 0,
        }
    }
}

/// `[c, h, w]` latent tensor tagged with its downsampling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub values: Array3<f32>,
    pub scale_factor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mean: LatentGrid,
    pub log_variance: LatentGrid,
}

const LOGVAR_MIN: f64 = -30.0;
const LOGVAR_MAX: f64 = 20.0;

pub struct Codec {
    pub config: CodecConfig,
    store: ParamStore<f32>,
    downs: Vec<Conv2d>,
    enc_mid: Conv2d,
    enc_head: Conv2d,
    dec_in: Conv2d,
    ups: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl Codec {
    pub fn new(config: CodecConfig) -> Self {
        assert!(
            config.scale_factor.is_power_of_two() && config.scale_factor >= 2,
            "scale_factor must be a power of two >= 2"
        );
        let n_down = config.scale_factor.trailing_zeros() as usize;
        let mut rng = ChaCha12Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let b = config.base_channels;

        let mut downs = Vec::new();
        let mut cin = 3;
        let mut width = b;
        for i in 0..n_down {
            downs.push(Conv2d::new(&mut store, &format!("enc.down{i}"), cin, width, 3, 2, &mut rng));
            cin = width;
            width *= 2;
        }
        let top = cin;
        let enc_mid = Conv2d::new(&mut store, "enc.mid", top, top, 3, 1, &mut rng);
        let enc_head = Conv2d::new(
            &mut store,
            "enc.head",
            top,
            2 * config.latent_channels,
            3,
            1,
            &mut rng,
        );

        let dec_in = Conv2d::new(&mut store, "dec.in", config.latent_channels, top, 3, 1, &mut rng);
        let mut ups = Vec::new();
        let mut c = top;
        for i in 0..n_down {
            let cout = (c / 2).max(b);
            ups.push(Conv2d::new(&mut store, &format!("dec.up{i}"), c, cout, 3, 1, &mut rng));
            c = cout;
        }
        let dec_out = Conv2d::new(&mut store, "dec.out", c, 3, 3, 1, &mut rng);

        Codec {
            config,
            store,
            downs,
            enc_mid,
            enc_head,
            dec_in,
            ups,
            dec_out,
        }
    }

    fn encode_vars(&self, f: &mut Fwd<f32>, x: Var) -> (Var, Var) {
        let mut h = x;
        for conv in &self.downs {
            h = conv.apply(f, h);
            h = f.tape.silu(h);
        }
        h = self.enc_mid.apply(f, h);
        h = f.tape.silu(h);
        let head = self.enc_head.apply(f, h);
        let c = self.config.latent_channels;
        let mean = f.tape.slice_axis1(head, 0, c);
        let logvar_raw = f.tape.slice_axis1(head, c, 2 * c);
        let logvar = f.tape.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        (mean, logvar)
    }

    fn decode_vars(&self, f: &mut Fwd<f32>, z: Var) -> Var {
        let mut h = self.dec_in.apply(f, z);
        h = f.tape.silu(h);
        for conv in &self.ups {
            h = f.tape.upsample2(h);
            h = conv.apply(f, h);
            h = f.tape.silu(h);
        }
        let out = self.dec_out.apply(f, h);
        f.tape.tanh(out)
    }

    fn check_image_batch(&self, x: &Array4<f32>) -> Result<(), CodecError> {
        let sf = self.config.scale_factor;
        let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != 3 {
            return Err(CodecError::Shape(format!("expected 3 channels, got {c}")));
        }
        if h % sf != 0 || w % sf != 0 {
            return Err(CodecError::Shape(format!(
                "image size {h}x{w} not divisible by scale factor {sf}"
            )));
        }
        Ok(())
    }

    /// Posterior over latents for a batch of `[n, 3, h, w]` images in
    /// `[-1, 1]`. Returns `(mean, log_variance)`, each `[n, c, h/f, w/f]`.
    pub fn encode_batch(&self, x: &Array4<f32>) -> Result<(Array4<f32>, Array4<f32>), CodecError> {
        self.check_image_batch(x)?;
        let mut f = Fwd::new(&self.store, false);
        let xv = f.tape.constant(x.clone().into_dyn());
        let (mean, logvar) = self.encode_vars(&mut f, xv);
        let m = f.tape.value(mean).clone().into_dimensionality().unwrap();
        let lv = f.tape.value(logvar).clone().into_dimensionality().unwrap();
        Ok((m, lv))
    }

    /// Single-image `[3, h, w]` encode.
    pub fn encode(&self, image: &Array3<f32>) -> Result<LatentDistribution, CodecError> {
        let batch = image.clone().insert_axis(Axis(0));
        let (m, lv) = self.encode_batch(&batch)?;
        let sf = self.config.scale_factor;
        Ok(LatentDistribution {
            mean: LatentGrid {
                values: m.index_axis(Axis(0), 0).to_owned(),
                scale_factor: sf,
            },
            log_variance: LatentGrid {
                values: lv.index_axis(Axis(0), 0).to_owned(),
                scale_factor: sf,
            },
        })
    }

    pub fn decode_batch(&self, z: &Array4<f32>) -> Result<Array4<f32>, CodecError> {
        if z.shape()[1] != self.config.latent_channels {
            return Err(CodecError::Shape(format!(
                "expected {} latent channels, got {}",
                self.config.latent_channels,
                z.shape()[1]
            )));
        }
        let mut f = Fwd::new(&self.store, false);
        let zv = f.tape.constant(z.clone().into_dyn());
        let out = self.decode_vars(&mut f, zv);
        Ok(f.tape.value(out).clone().into_dimensionality().unwrap())
    }

    /// Decode one latent grid to a `[3, h, w]` image in `[-1, 1]`.
    pub fn decode(&self, latent: &LatentGrid) -> Result<Array3<f32>, CodecError> {
        let batch = latent.values.clone().insert_axis(Axis(0));
        let out = self.decode_batch(&batch)?;
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }

    /// Encode a height map: replicate the single channel three times, map
    /// `[0, 1]` to `[-1, 1]`, then run the ordinary encoder.
    pub fn encode_height(&self, h: &HeightMap) -> Result<LatentDistribution, CodecError> {
        if h.normalization != Normalization::UnitScaled {
            return Err(CodecError::Data(
                "height maps must be unit-scaled before encoding".into(),
            ));
        }
        let (rows, cols) = (h.values.shape()[0], h.values.shape()[1]);
        let mut img = Array3::<f32>::zeros((3, rows, cols));
        for c in 0..3 {
            for i in 0..rows {
                for j in 0..cols {
                    img[[c, i, j]] = 2.0 * h.values[[i, j]] - 1.0;
                }
            }
        }
        self.encode(&img)
    }

    pub fn weight_hash(&self) -> String {
        params_hash(&self.store)
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn save(&self, dir: &Path, data_hash: &str) -> Result<(), CodecError> {
        std::fs::create_dir_all(dir)?;
        save_params(&self.store, &dir.join("codec.weights"))?;
        let manifest = CodecManifest {
            config: self.config.clone(),
            weight_hash: self.weight_hash(),
            data_hash: data_hash.to_string(),
        };
        std::fs::write(
            dir.join("codec.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CodecError> {
        let raw = std::fs::read_to_string(dir.join("codec.json"))?;
        let manifest: CodecManifest = serde_json::from_str(&raw)?;
        let mut codec = Codec::new(manifest.config);
        load_params(&mut codec.store, &dir.join("codec.weights"))?;
        if codec.weight_hash() != manifest.weight_hash {
            return Err(CodecError::Data("checkpoint weight hash mismatch".into()));
        }
        Ok(codec)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CodecManifest {
    config: CodecConfig,
    weight_hash: String,
    data_hash: String,
}

/// Reparameterized draw: `mean + exp(0.5 * log_variance) * eps`.
pub fn sample_latent(dist: &LatentDistribution, seed: u64) -> LatentGrid {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut values = dist.mean.values.clone();
    for (v, &lv) in values.iter_mut().zip(dist.log_variance.values.iter()) {
        let eps: f32 = StandardNormal.sample(&mut rng);
        *v += (0.5 * lv).exp() * eps;
    }
    LatentGrid {
        values,
        scale_factor: dist.mean.scale_factor,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// KL weight; tiny so the codec acts as a near-deterministic compressor.
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            kl_weight: 1e-6,
            seed: 0,
        }
    }
}

/// Train the codec with an L1 reconstruction loss plus a lightly weighted
/// KL term. `images` is `[n, 3, h, w]` in `[-1, 1]`. Returns per-epoch mean
/// losses; the codec is meant to be frozen afterward.
pub fn train_codec(
    codec: &mut Codec,
    images: &Array4<f32>,
    cfg: &CodecTrainConfig,
) -> Result<Vec<f64>, CodecError> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(CodecError::Data("empty training set".into()));
    }
    codec.check_image_batch(images)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &codec.store,
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = select_batch(images, chunk);
            let loss = codec_step(codec, &batch, cfg.kl_weight, &mut opt, &mut rng)?;
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(history)
}

fn codec_step(
    codec: &mut Codec,
    batch: &Array4<f32>,
    kl_weight: f64,
    opt: &mut AdamW<f32>,
    rng: &mut ChaCha12Rng,
) -> Result<f64, CodecError> {
    let mut f = Fwd::new(&codec.store, true);
    let x = f.tape.constant(batch.clone().into_dyn());
    let (mean, logvar) = codec.encode_vars(&mut f, x);

    let eps_arr: ArrayD<f32> = {
        let shape = f.tape.shape(mean).to_vec();
        ArrayD::from_shape_simple_fn(IxDyn(&shape), || StandardNormal.sample(rng))
    };
    let eps = f.tape.constant(eps_arr);
    let half_lv = f.tape.scale(logvar, 0.5);
    let std = f.tape.exp(half_lv);
    let noise = f.tape.mul(std, eps);
    let z = f.tape.add(mean, noise);

    let recon = codec.decode_vars(&mut f, z);
    let diff = f.tape.sub(recon, x);
    let l1 = f.tape.abs(diff);
    let recon_loss = f.tape.mean_all(l1);

    // KL(q || N(0, I)) per element: 0.5 * (mu^2 + var - 1 - logvar)
    let mean_sq = f.tape.square(mean);
    let var = f.tape.exp(logvar);
    let a = f.tape.add(mean_sq, var);
    let b = f.tape.add_scalar(a, -1.0);
    let c = f.tape.sub(b, logvar);
    let kl_sum = f.tape.mean_all(c);
    let kl = f.tape.scale(kl_sum, 0.5);

    let weighted = f.tape.scale(kl, kl_weight);
    let loss = f.tape.add(recon_loss, weighted);

    let mut grads = f.tape.backward(loss);
    let loss_val = f.tape.value(loss)[[]] as f64;
    let bindings = f.bindings();
    drop(f);
    opt.step(&mut codec.store, &mut grads, &bindings);
    if !loss_val.is_finite() {
        return Err(CodecError::Data("non-finite training loss".into()));
    }
    Ok(loss_val)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

pub(crate) fn select_batch(images: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (_, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    let mut out = Array4::<f32>::zeros((idx.len(), c, h, w));
    for (k, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), k)
            .assign(&images.index_axis(Axis(0), i));
    }
    out
}

/// `[h, w, 3]` image in `[0, 1]` to the codec's `[3, h, w]` `[-1, 1]` layout.
pub fn image_to_input(img: &Array3<f32>) -> Array3<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                out[[c, i, j]] = 2.0 * img[[i, j, c]] - 1.0;
            }
        }
    }
    out
}

/// Inverse of [`image_to_input`], clamping into `[0, 1]`.
pub fn output_to_image(out: &Array3<f32>) -> Array3<f32> {
    let (h, w) = (out.shape()[1], out.shape()[2]);
    let mut img = Array3::<f32>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                img[[i, j, c]] = ((out[[c, i, j]] + 1.0) / 2.0).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Stack `[h, w, 3]` images into a `[n, 3, h, w]` batch in `[-1, 1]`.
pub fn batch_from_images<'a, I: IntoIterator<Item = &'a Array3<f32>>>(images: I) -> Array4<f32> {
    let inputs: Vec<Array3<f32>> = images.into_iter().map(image_to_input).collect();
    let (c, h, w) = (3, inputs[0].shape()[1], inputs[0].shape()[2]);
    let mut out = Array4::<f32>::zeros((inputs.len(), c, h, w));
    for (k, x) in inputs.iter().enumerate() {
        out.index_axis_mut(Axis(0), k).assign(x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny_codec() -> Codec {
        Codec::new(CodecConfig {
            image_size: 16,
            base_channels: 8,
            ..Default::default()
        })
    }

    fn rand_images(n: usize, size: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, 3, size, size), || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn encode_shape_contract() {
        let codec = Codec::new(CodecConfig::default());
        let img = Array3::<f32>::zeros((3, 64, 64));
        let dist = codec.encode(&img).unwrap();
        assert_eq!(dist.mean.values.shape(), &[4, 16, 16]);
        assert_eq!(dist.log_variance.values.shape(), &[4, 16, 16]);
        assert_eq!(dist.mean.scale_factor, 4);
    }

    #[test]
    fn encode_is_deterministic() {
        let codec = tiny_codec();
        let img = rand_images(1, 16, 3).index_axis(Axis(0), 0).to_owned();
        let a = codec.encode(&img).unwrap();
        let b = codec.encode(&img).unwrap();
        assert_eq!(a.mean.values, b.mean.values);
        assert_eq!(a.log_variance.values, b.log_variance.values);
    }

    #[test]
    fn encode_rejects_indivisible_size() {
        let codec = tiny_codec();
        let img = Array3::<f32>::zeros((3, 15, 15));
        assert!(matches!(codec.encode(&img), Err(CodecError::Shape(_))));
    }

    #[test]
    fn sample_latent_collapses_at_tiny_variance() {
        let mean = LatentGrid {
            values: Array3::from_elem((2, 4, 4), 0.7),
            scale_factor: 4,
        };
        let dist = LatentDistribution {
            log_variance: LatentGrid {
                values: Array3::from_elem((2, 4, 4), -30.0),
                scale_factor: 4,
            },
            mean: mean.clone(),
        };
        let z = sample_latent(&dist, 1);
        for (&a, &b) in z.values.iter().zip(mean.values.iter()) {
            assert!((a - b).abs() <= (-15.0f32).exp() * 8.0);
        }
    }

    #[test]
    fn sample_latent_is_seed_deterministic() {
        let dist = LatentDistribution {
            mean: LatentGrid {
                values: Array3::zeros((2, 3, 3)),
                scale_factor: 4,
            },
            log_variance: LatentGrid {
                values: Array3::zeros((2, 3, 3)),
                scale_factor: 4,
            },
        };
        assert_eq!(sample_latent(&dist, 9).values, sample_latent(&dist, 9).values);
        assert_ne!(sample_latent(&dist, 9).values, sample_latent(&dist, 10).values);
    }

    #[test]
    fn sample_latent_unit_variance_statistics() {
        // one cell, mean 0, log_variance 0, 10^4 draws
        let dist = LatentDistribution {
            mean: LatentGrid {
                values: Array3::zeros((1, 1, 1)),
                scale_factor: 4,
            },
            log_variance: LatentGrid {
                values: Array3::zeros((1, 1, 1)),
                scale_factor: 4,
            },
        };
        let n = 10_000;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for seed in 0..n {
            let v = sample_latent(&dist, seed as u64).values[[0, 0, 0]] as f64;
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((0.94..=1.06).contains(&var), "sample variance {var}");
    }

    #[test]
    fn decode_shape_and_range() {
        let codec = Codec::new(CodecConfig::default());
        let latent = LatentGrid {
            values: Array3::from_elem((4, 16, 16), 0.3),
            scale_factor: 4,
        };
        let img = codec.decode(&latent).unwrap();
        assert_eq!(img.shape(), &[3, 64, 64]);
        assert!(img.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(img, codec.decode(&latent).unwrap());
    }

    #[test]
    fn encode_height_matches_replicated_constant() {
        let codec = tiny_codec();
        let h = HeightMap {
            values: Array2::zeros((16, 16)),
            normalization: Normalization::UnitScaled,
        };
        let from_height = codec.encode_height(&h).unwrap();
        let img = Array3::from_elem((3, 16, 16), -1.0f32);
        let from_image = codec.encode(&img).unwrap();
        assert_eq!(from_height.mean.values, from_image.mean.values);
        assert_eq!(
            from_height.log_variance.values,
            from_image.log_variance.values
        );
    }

    #[test]
    fn encode_height_shape_matches_rgb_encode() {
        let codec = tiny_codec();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let h = HeightMap {
            values: Array2::from_shape_simple_fn((16, 16), || rng.random_range(0.0f32..1.0)),
            normalization: Normalization::UnitScaled,
        };
        let dist = codec.encode_height(&h).unwrap();
        let rgb = codec.encode(&Array3::zeros((3, 16, 16))).unwrap();
        assert_eq!(dist.mean.values.shape(), rgb.mean.values.shape());
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let mut codec = tiny_codec();
        let images = Array4::<f32>::zeros((0, 3, 16, 16));
        assert!(matches!(
            train_codec(&mut codec, &images, &CodecTrainConfig::default()),
            Err(CodecError::Data(_))
        ));
    }

    #[test]
    fn training_smoke_and_checkpoint_roundtrip() {
        let mut codec = tiny_codec();
        let images = rand_images(8, 16, 1);
        let cfg = CodecTrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            ..Default::default()
        };
        let history = train_codec(&mut codec, &images, &cfg).unwrap();
        assert!(history.iter().all(|l| l.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        codec.save(dir.path(), "testdata").unwrap();
        let loaded = Codec::load(dir.path()).unwrap();
        assert_eq!(loaded.weight_hash(), codec.weight_hash());
        let img = images.index_axis(Axis(0), 0).to_owned();
        assert_eq!(
            loaded.encode(&img).unwrap().mean.values,
            codec.encode(&img).unwrap().mean.values
        );
    }

    #[test]
    fn training_reduces_loss() {
        let mut codec = tiny_codec();
        let images = rand_images(16, 16, 2);
        let cfg = CodecTrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 3e-3,
            ..Default::default()
        };
        let history = train_codec(&mut codec, &images, &cfg).unwrap();
        assert!(
            history.last().unwrap() < history.first().unwrap(),
            "loss history {history:?}"
        );
    }

    #[test]
    fn image_conversion_roundtrip() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let img = Array3::from_shape_simple_fn((6, 5, 3), || rng.random_range(0.0f32..1.0));
        let back = output_to_image(&image_to_input(&img));
        for (&a, &b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
