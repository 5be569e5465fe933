//! The generative engine: DDPM noise schedules, a conditional U-shaped
//! denoiser consuming the conditioning bundle via channel concatenation and
//! cross-attention, condition-dropout training, and guided samplers.

mod sampler;
mod schedule;
mod train;
mod unet;


pub use sampler::{get_sampler, sample, sampler_registry, CondInputs, SampleSpec, Sampler};
pub use schedule::{make_schedule, q_sample, schedule_registry, NoiseSchedule, ScheduleBuilder};
pub use train::{
    prepare_data, train_diffusion, train_diffusion_with, training_step, DiffusionTrainConfig,
    PreparedData, StepStats,
};
pub use unet::{Denoiser, DenoiserConfig, DiffusionManifest};

use crate::tensor::Scalar;
use ndarray::{Array2, Array3, Array4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("timestep out of range: {0}")]
    Index(String),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Io(#[from] crate::nn::IoError),
    #[error("i/o failure: {0}")]
    File(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Everything the denoiser sees for one batch: spatial conditioning grids,
/// the semantic token context, the noisy latent and its timesteps. Null
/// flags record which condition family was dropped; the substitutions are
/// already applied to the stored arrays.
#[derive(Debug, Clone)]
pub struct ConditioningBundle<S: Scalar> {
    pub v_x: Array4<S>,
    pub v_h: Array4<S>,
    pub c_x: Array3<S>,
    pub z_t: Array4<S>,
    pub t: Vec<usize>,
    pub null_spatial: bool,
    pub null_semantic: bool,
}

/// Bundle the conditioning inputs, applying the classifier-free-guidance
/// null substitutions: dropped spatial grids become zeros, a dropped token
/// context becomes the learned null embedding.
#[allow(clippy::too_many_arguments)]
pub fn assemble<S: Scalar>(
    v_x: &Array4<S>,
    v_h: &Array4<S>,
    c_x: &Array3<S>,
    z_t: &Array4<S>,
    t: &[usize],
    drop_spatial: bool,
    drop_semantic: bool,
    null_tokens: &Array2<S>,
) -> Result<ConditioningBundle<S>, DiffusionError> {
    if v_x.shape() != z_t.shape() || v_h.shape() != z_t.shape() {
        return Err(DiffusionError::Shape(format!(
            "conditioning grids {:?}/{:?} must match z_t {:?}",
            v_x.shape(),
            v_h.shape(),
            z_t.shape()
        )));
    }
    let n = z_t.shape()[0];
    if c_x.shape()[0] != n || t.len() != n {
        return Err(DiffusionError::Shape(format!(
            "batch size mismatch: z_t {n}, c_x {}, t {}",
            c_x.shape()[0],
            t.len()
        )));
    }
    if null_tokens.shape() != [c_x.shape()[1], c_x.shape()[2]] {
        return Err(DiffusionError::Shape(format!(
            "null tokens {:?} do not match context {:?}",
            null_tokens.shape(),
            c_x.shape()
        )));
    }
    let (v_x, v_h) = if drop_spatial {
        (Array4::zeros(z_t.raw_dim()), Array4::zeros(z_t.raw_dim()))
    } else {
        (v_x.clone(), v_h.clone())
    };
    let c_x = if drop_semantic {
        let mut out = Array3::zeros(c_x.raw_dim());
        for mut lane in out.outer_iter_mut() {
            lane.assign(null_tokens);
        }
        out
    } else {
        c_x.clone()
    };
    Ok(ConditioningBundle {
        v_x,
        v_h,
        c_x,
        z_t: z_t.clone(),
        t: t.to_vec(),
        null_spatial: drop_spatial,
        null_semantic: drop_semantic,
    })
}

/// Run the denoiser on an assembled bundle. The config decides which
/// conditioning slots are consumed; unused slots are ignored.
pub fn predict_noise<S: Scalar>(
    model: &Denoiser<S>,
    bundle: &ConditioningBundle<S>,
) -> Result<Array4<S>, DiffusionError> {
    model.predict(bundle)
}

/// Guided prediction `(1 - s) * eps_u + s * eps_c`. The form is chosen so
/// that `s = 1` returns the conditional branch and `s = 0` the
/// unconditional branch bit-for-bit.
pub fn cfg_combine<S: Scalar>(eps_u: &Array4<S>, eps_c: &Array4<S>, s: f64) -> Array4<S> {
    let (wu, wc) = (S::lit(1.0 - s), S::lit(s));
    let mut out = eps_c.clone();
    out.zip_mut_with(eps_u, |c, &u| *c = wu * u + wc * *c);
    out
}

pub fn cfg_predict<S: Scalar>(
    model: &Denoiser<S>,
    bundle_cond: &ConditioningBundle<S>,
    bundle_null: &ConditioningBundle<S>,
    s: f64,
) -> Result<Array4<S>, DiffusionError> {
    if bundle_cond.z_t.shape() != bundle_null.z_t.shape() || bundle_cond.t != bundle_null.t {
        return Err(DiffusionError::Shape(
            "guidance bundles must share z_t and t".into(),
        ));
    }
    let eps_c = model.predict(bundle_cond)?;
    let eps_u = model.predict(bundle_null)?;
    Ok(cfg_combine(&eps_u, &eps_c, s))
}
