//! Diffusion training: frozen-encoder feature preparation and the noise
//! prediction objective with joint condition dropout.

use super::{q_sample, Denoiser, DiffusionError, NoiseSchedule};
use crate::codec::{batch_from_images, image_to_input, Codec};
use crate::nn::{AdamW, AdamWConfig, Fwd};
use crate::scene::PairedSample;
use crate::semantic::SemanticEncoder;
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_drop: f64,
    pub schedule: String,
    pub t_count: usize,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-4,
            p_drop: 0.1,
            schedule: "linear".into(),
            t_count: 1000,
            seed: 0,
        }
    }
}

/// Frozen-encoder features for a dataset: conditioning latent means, token
/// contexts, and the posterior of the ground-image latent (sampled fresh
/// every step).
pub struct PreparedData {
    pub v_x: Array4<f32>,
    pub v_h: Array4<f32>,
    pub c_x: Array3<f32>,
    pub z_mean: Array4<f32>,
    pub z_logvar: Array4<f32>,
}

impl PreparedData {
    pub fn len(&self) -> usize {
        self.v_x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Run the frozen codec and semantic encoder over a dataset once.
pub fn prepare_data(
    codec: &Codec,
    semantic: &SemanticEncoder,
    samples: &[PairedSample],
) -> Result<PreparedData, DiffusionError> {
    if samples.is_empty() {
        return Err(DiffusionError::Data("empty dataset".into()));
    }
    let mut v_x = Vec::new();
    let mut v_h = Vec::new();
    let mut c_x = Vec::new();
    let mut z_mean = Vec::new();
    let mut z_logvar = Vec::new();
    const CHUNK: usize = 64;
    for chunk in samples.chunks(CHUNK) {
        let aerial = batch_from_images(chunk.iter().map(|s| &s.aerial.pixels));
        let ground = batch_from_images(chunk.iter().map(|s| &s.ground.pixels));
        let height = height_batch(chunk)?;

        let (ax, _) = codec
            .encode_batch(&aerial)
            .map_err(|e| DiffusionError::Data(format!("aerial encode: {e}")))?;
        let (hx, _) = codec
            .encode_batch(&height)
            .map_err(|e| DiffusionError::Data(format!("height encode: {e}")))?;
        let (gm, gl) = codec
            .encode_batch(&ground)
            .map_err(|e| DiffusionError::Data(format!("ground encode: {e}")))?;
        let (tokens, _) = semantic
            .embed_aerial_batch(&aerial)
            .map_err(|e| DiffusionError::Data(format!("semantic embed: {e}")))?;

        v_x.push(ax);
        v_h.push(hx);
        c_x.push(tokens);
        z_mean.push(gm);
        z_logvar.push(gl);
    }
    let cat4 = |parts: &[Array4<f32>]| {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("chunk shapes agree")
    };
    let c_views: Vec<_> = c_x.iter().map(|p| p.view()).collect();
    let data = PreparedData {
        v_x: cat4(&v_x),
        v_h: cat4(&v_h),
        c_x: ndarray::concatenate(Axis(0), &c_views).expect("chunk shapes agree"),
        z_mean: cat4(&z_mean),
        z_logvar: cat4(&z_logvar),
    };
    if data.v_x.shape() != data.z_mean.shape() {
        return Err(DiffusionError::Shape(format!(
            "conditioning latents {:?} do not match ground latents {:?}; aerial \
             and ground resolutions must agree for channel concatenation",
            data.v_x.shape(),
            data.z_mean.shape()
        )));
    }
    Ok(data)
}

fn height_batch(chunk: &[PairedSample]) -> Result<Array4<f32>, DiffusionError> {
    // replicate the single channel and map [0, 1] -> [-1, 1], mirroring
    // Codec::encode_height for a whole batch
    let (h, w) = {
        let s = chunk[0].height.values.shape();
        (s[0], s[1])
    };
    let mut out = Array4::<f32>::zeros((chunk.len(), 3, h, w));
    for (k, s) in chunk.iter().enumerate() {
        if s.height.values.shape() != [h, w] {
            return Err(DiffusionError::Shape("ragged height maps".into()));
        }
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    out[[k, c, i, j]] = 2.0 * s.height.values[[i, j]] - 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Convert one `[h, w, 3]` image and height map pair into the conditioning
/// arrays used at inference (batch of one).
pub fn conditioning_for(
    codec: &Codec,
    semantic: &SemanticEncoder,
    aerial: &Array3<f32>,
    height: &crate::scene::HeightMap,
    no_height: bool,
) -> Result<(Array4<f32>, Array4<f32>, Array3<f32>), DiffusionError> {
    let input = image_to_input(aerial);
    let dist = codec
        .encode(&input)
        .map_err(|e| DiffusionError::Data(format!("aerial encode: {e}")))?;
    let v_x = dist.mean.values.insert_axis(Axis(0));
    let v_h = if no_height {
        Array4::zeros(v_x.raw_dim())
    } else {
        codec
            .encode_height(height)
            .map_err(|e| DiffusionError::Data(format!("height encode: {e}")))?
            .mean
            .values
            .insert_axis(Axis(0))
    };
    let seq = semantic
        .embed(aerial)
        .map_err(|e| DiffusionError::Data(format!("semantic embed: {e}")))?;
    let c_x = seq.tokens.insert_axis(Axis(0));
    Ok((v_x, v_h, c_x))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    /// Samples whose conditions were nulled this step.
    pub dropped: usize,
}

/// One noise-prediction step over the given row indices: draw `z0` from the
/// ground posterior, corrupt it at a per-sample uniform timestep, null both
/// condition families jointly with probability `p_drop`, regress the noise,
/// and update the denoiser (only).
pub fn training_step(
    model: &mut Denoiser<f32>,
    data: &PreparedData,
    idx: &[usize],
    sched: &NoiseSchedule,
    p_drop: f64,
    opt: &mut AdamW<f32>,
    rng: &mut ChaCha12Rng,
) -> Result<StepStats, DiffusionError> {
    if idx.is_empty() {
        return Err(DiffusionError::Data("empty batch".into()));
    }
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(DiffusionError::Config("p_drop must lie in [0, 1]".into()));
    }
    let nb = idx.len();
    let (c, lh, lw) = {
        let s = data.z_mean.shape();
        (s[1], s[2], s[3])
    };

    let mut v_x = Array4::<f32>::zeros((nb, c, lh, lw));
    let mut v_h = v_x.clone();
    let mut z0 = v_x.clone();
    let mut eps = v_x.clone();
    let mut c_x = Array3::<f32>::zeros((nb, data.c_x.shape()[1], data.c_x.shape()[2]));
    let mut t = vec![0usize; nb];
    let mut dropped_rows = vec![false; nb];
    let mut dropped = 0;

    for (k, &i) in idx.iter().enumerate() {
        let drop = rng.random_bool(p_drop);
        dropped_rows[k] = drop;
        if drop {
            dropped += 1;
        } else {
            v_x.index_axis_mut(Axis(0), k)
                .assign(&data.v_x.index_axis(Axis(0), i));
            v_h.index_axis_mut(Axis(0), k)
                .assign(&data.v_h.index_axis(Axis(0), i));
        }
        c_x.index_axis_mut(Axis(0), k)
            .assign(&data.c_x.index_axis(Axis(0), i));
        t[k] = rng.random_range(0..sched.len());

        let mean = data.z_mean.index_axis(Axis(0), i);
        let logvar = data.z_logvar.index_axis(Axis(0), i);
        {
            let mut z0k = z0.index_axis_mut(Axis(0), k);
            for ((z, &m), &lv) in z0k.iter_mut().zip(mean.iter()).zip(logvar.iter()) {
                let xi: f32 = StandardNormal.sample(rng);
                *z = m + (0.5 * lv).exp() * xi;
            }
            let mut ek = eps.index_axis_mut(Axis(0), k);
            for e in ek.iter_mut() {
                *e = StandardNormal.sample(rng);
            }
        }
        let zt = q_sample(
            &z0.index_axis(Axis(0), k).to_owned().into_dyn(),
            t[k],
            &eps.index_axis(Axis(0), k).to_owned().into_dyn(),
            sched,
        )?;
        z0.index_axis_mut(Axis(0), k)
            .assign(&zt.into_dimensionality::<ndarray::Ix3>().unwrap());
    }
    let z_t = z0; // rows were overwritten with their corrupted versions

    // network input: used slots concatenated channel-wise
    let mut parts = vec![z_t.view()];
    if model.config.use_image_cond {
        parts.push(v_x.view());
    }
    if model.config.use_height_cond {
        parts.push(v_h.view());
    }
    let input = ndarray::concatenate(Axis(1), &parts).expect("shapes match");

    let mut f = Fwd::new(&model.store, true);
    let x = f.tape.constant(input.into_dyn());
    let ctx = if model.config.use_semantic_cond {
        // per-row mix of the real context and the learned null embedding so
        // gradient flows into the null tokens on dropped rows
        let (l, d) = (c_x.shape()[1], c_x.shape()[2]);
        let mut keep = Array3::<f32>::zeros((nb, l, d));
        let mut swap = Array3::<f32>::zeros((nb, l, d));
        for k in 0..nb {
            let fill = if dropped_rows[k] { 0.0 } else { 1.0 };
            keep.index_axis_mut(Axis(0), k).fill(fill);
            swap.index_axis_mut(Axis(0), k).fill(1.0 - fill);
        }
        let ctx_real = f.tape.constant(c_x.into_dyn());
        let keep_m = f.tape.constant(keep.into_dyn());
        let swap_m = f.tape.constant(swap.into_dyn());
        let null = f.p(model.null_tokens_id());
        let null_b = f.tape.broadcast_axis0(null, nb);
        let a = f.tape.mul(ctx_real, keep_m);
        let b = f.tape.mul(null_b, swap_m);
        Some(f.tape.add(a, b))
    } else {
        None
    };
    let out = model.forward(&mut f, x, &t, ctx);
    let target = f.tape.constant(eps.into_dyn());
    let diff = f.tape.sub(out, target);
    let sq = f.tape.square(diff);
    let loss = f.tape.mean_all(sq);
    let loss_val = f.tape.value(loss)[[]] as f64;

    let mut grads = f.tape.backward(loss);
    let bindings = f.bindings();
    drop(f);
    opt.step(&mut model.store, &mut grads, &bindings);

    if !loss_val.is_finite() {
        return Err(DiffusionError::Data("non-finite training loss".into()));
    }
    Ok(StepStats {
        loss: loss_val,
        dropped,
    })
}

/// Full training loop with a fresh optimizer; returns per-epoch mean
/// losses. Pass `start_epoch` to resume the epoch-derived data order.
pub fn train_diffusion(
    model: &mut Denoiser<f32>,
    data: &PreparedData,
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    start_epoch: usize,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>, DiffusionError> {
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &model.store,
    );
    train_diffusion_with(model, data, sched, cfg, start_epoch, &mut opt, on_epoch)
}

/// Training loop over a caller-owned optimizer, so checkpoints can persist
/// the moment estimates and a resumed run matches an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_diffusion_with(
    model: &mut Denoiser<f32>,
    data: &PreparedData,
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    start_epoch: usize,
    opt: &mut AdamW<f32>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>, DiffusionError> {
    if data.is_empty() {
        return Err(DiffusionError::Data("empty dataset".into()));
    }
    let mut history = Vec::new();
    let n = data.len();
    for epoch in start_epoch..cfg.epochs {
        // derive the epoch stream from (seed, epoch) so resuming reproduces
        // the schedule of a straight-through run
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let stats = training_step(model, data, chunk, sched, cfg.p_drop, opt, &mut rng)?;
            sum += stats.loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(history)
}
