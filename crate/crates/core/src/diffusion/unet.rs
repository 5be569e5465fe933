//! Conditional U-shaped denoiser with sinusoidal timestep features and
//! cross-attention onto the semantic token sequence at the coarse levels.

use super::{ConditioningBundle, DiffusionError};
use crate::nn::{
    load_params, params_hash, save_params, Conv2d, CrossAttention, Fwd, GroupNorm, Linear,
    ParamId, ParamStore,
};
use crate::tensor::{Scalar, Var};
use ndarray::{concatenate, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub token_dim: usize,
    pub num_tokens: usize,
    /// Concatenate the aerial latent onto the denoiser input.
    pub use_image_cond: bool,
    /// Concatenate the height latent onto the denoiser input.
    pub use_height_cond: bool,
    /// Cross-attend onto the semantic token sequence.
    pub use_semantic_cond: bool,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            base_channels: 64,
            token_dim: 128,
            num_tokens: crate::semantic::NUM_TOKENS,
            use_image_cond: true,
            use_height_cond: true,
            use_semantic_cond: true,
            init_seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn in_channels(&self) -> usize {
        let mut slots = 1;
        if self.use_image_cond {
            slots += 1;
        }
        if self.use_height_cond {
            slots += 1;
        }
        slots * self.latent_channels
    }

    fn time_dim(&self) -> usize {
        (self.base_channels * 4).max(8)
    }
}

fn groups_for(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<S>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self
    where
        S: Scalar,
        StandardNormal: Distribution<S>,
    {
        let block = ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups_for(cin)),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            temb: Linear::new(store, &format!("{name}.temb"), time_dim, cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups_for(cout)),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout)
                .then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        };
        // start every residual branch at zero so the block is initially the
        // identity (up to the skip projection)
        block.conv2.zero_init(store);
        block
    }

    fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var, temb: Var) -> Var {
        let mut h = self.norm1.apply(f, x);
        h = f.tape.silu(h);
        h = self.conv1.apply(f, h);
        let tproj = self.temb.apply(f, temb);
        h = f.tape.add_bias_sample_chan(h, tproj);
        h = self.norm2.apply(f, h);
        h = f.tape.silu(h);
        h = self.conv2.apply(f, h);
        let s = match &self.skip {
            Some(conv) => conv.apply(f, x),
            None => x,
        };
        f.tape.add(h, s)
    }
}

pub struct Denoiser<S: Scalar> {
    pub config: DenoiserConfig,
    pub(crate) store: ParamStore<S>,
    time_mlp: Linear,
    conv_in: Conv2d,
    rb_d0: ResBlock,
    down1: Conv2d,
    rb_d1: ResBlock,
    attn_d1: Option<CrossAttention>,
    down2: Conv2d,
    rb_m1: ResBlock,
    attn_m: Option<CrossAttention>,
    rb_m2: ResBlock,
    up1: Conv2d,
    rb_u1: ResBlock,
    attn_u1: Option<CrossAttention>,
    up2: Conv2d,
    rb_u2: ResBlock,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    null_tokens: ParamId,
}

impl<S: Scalar> Denoiser<S>
where
    StandardNormal: Distribution<S>,
{
    pub fn new(config: DenoiserConfig) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let b = config.base_channels;
        let td = config.time_dim();
        let (d, l) = (config.token_dim, config.num_tokens);
        let attn = config.use_semantic_cond;

        let time_mlp = Linear::new(&mut store, "time.mlp", td, td, &mut rng);
        let conv_in = Conv2d::new(&mut store, "in", config.in_channels(), b, 3, 1, &mut rng);
        let rb_d0 = ResBlock::new(&mut store, "d0", b, b, td, &mut rng);
        let down1 = Conv2d::new(&mut store, "down1", b, 2 * b, 3, 2, &mut rng);
        let rb_d1 = ResBlock::new(&mut store, "d1", 2 * b, 2 * b, td, &mut rng);
        let attn_d1 =
            attn.then(|| CrossAttention::new(&mut store, "attn_d1", 2 * b, d, 2 * b, &mut rng));
        let down2 = Conv2d::new(&mut store, "down2", 2 * b, 4 * b, 3, 2, &mut rng);
        let rb_m1 = ResBlock::new(&mut store, "m1", 4 * b, 4 * b, td, &mut rng);
        let attn_m =
            attn.then(|| CrossAttention::new(&mut store, "attn_m", 4 * b, d, 4 * b, &mut rng));
        let rb_m2 = ResBlock::new(&mut store, "m2", 4 * b, 4 * b, td, &mut rng);
        let up1 = Conv2d::new(&mut store, "up1", 4 * b, 2 * b, 3, 1, &mut rng);
        let rb_u1 = ResBlock::new(&mut store, "u1", 4 * b, 2 * b, td, &mut rng);
        let attn_u1 =
            attn.then(|| CrossAttention::new(&mut store, "attn_u1", 2 * b, d, 2 * b, &mut rng));
        let up2 = Conv2d::new(&mut store, "up2", 2 * b, b, 3, 1, &mut rng);
        let rb_u2 = ResBlock::new(&mut store, "u2", 2 * b, b, td, &mut rng);
        let out_norm = GroupNorm::new(&mut store, "out.norm", b, groups_for(b));
        let out_conv = Conv2d::new(&mut store, "out", b, config.latent_channels, 3, 1, &mut rng);
        // zero final projection: the denoiser predicts zero noise at init
        out_conv.zero_init(&mut store);
        let null_tokens = store.add("null_tokens", ArrayD::zeros(IxDyn(&[l, d])));

        Denoiser {
            config,
            store,
            time_mlp,
            conv_in,
            rb_d0,
            down1,
            rb_d1,
            attn_d1,
            down2,
            rb_m1,
            attn_m,
            rb_m2,
            up1,
            rb_u1,
            attn_u1,
            up2,
            rb_u2,
            out_norm,
            out_conv,
            null_tokens,
        }
    }
}

impl<S: Scalar> Denoiser<S> {
    /// The learned unconditional token context; all-zero until trained.
    pub fn null_tokens(&self) -> Array2<S> {
        self.store
            .get(self.null_tokens)
            .clone()
            .into_dimensionality()
            .unwrap()
    }

    pub(crate) fn null_tokens_id(&self) -> ParamId {
        self.null_tokens
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    /// Mutable parameter access for perturbation-based testing.
    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn weight_hash(&self) -> String {
        params_hash(&self.store)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn time_embedding(&self, t: &[usize]) -> Array2<S> {
        let dim = self.config.time_dim();
        let half = dim / 2;
        let mut out = Array2::<S>::zeros((t.len(), dim));
        for (i, &ti) in t.iter().enumerate() {
            for j in 0..half {
                let freq = (-(j as f64) / (half - 1) as f64 * 10_000f64.ln()).exp();
                let angle = ti as f64 * freq;
                out[[i, j]] = S::lit(angle.sin());
                out[[i, half + j]] = S::lit(angle.cos());
            }
        }
        out
    }

    /// Core forward pass over an already-concatenated input. Public so
    /// external gradient checks can differentiate the same computation the
    /// training step uses.
    pub fn forward(
        &self,
        f: &mut Fwd<S>,
        x: Var,
        t: &[usize],
        ctx: Option<Var>,
    ) -> Var {
        let temb_raw = f.tape.constant(self.time_embedding(t).into_dyn());
        let mut temb = self.time_mlp.apply(f, temb_raw);
        temb = f.tape.silu(temb);

        let h0 = self.conv_in.apply(f, x);
        let h0 = self.rb_d0.apply(f, h0, temb);

        let d1 = self.down1.apply(f, h0);
        let mut h1 = self.rb_d1.apply(f, d1, temb);
        if let (Some(attn), Some(c)) = (&self.attn_d1, ctx) {
            let a = attn.apply(f, h1, c);
            h1 = f.tape.add(h1, a);
        }

        let d2 = self.down2.apply(f, h1);
        let mut m = self.rb_m1.apply(f, d2, temb);
        if let (Some(attn), Some(c)) = (&self.attn_m, ctx) {
            let a = attn.apply(f, m, c);
            m = f.tape.add(m, a);
        }
        m = self.rb_m2.apply(f, m, temb);

        let mu = f.tape.upsample2(m);
        let u1 = self.up1.apply(f, mu);
        let cat1 = f.tape.concat_axis1(&[u1, h1]);
        let mut v = self.rb_u1.apply(f, cat1, temb);
        if let (Some(attn), Some(c)) = (&self.attn_u1, ctx) {
            let a = attn.apply(f, v, c);
            v = f.tape.add(v, a);
        }

        let vu = f.tape.upsample2(v);
        let u2 = self.up2.apply(f, vu);
        let cat2 = f.tape.concat_axis1(&[u2, h0]);
        let w = self.rb_u2.apply(f, cat2, temb);

        let mut o = self.out_norm.apply(f, w);
        o = f.tape.silu(o);
        self.out_conv.apply(f, o)
    }

    /// Stack the bundle slots this config consumes into the network input.
    pub(crate) fn stack_input(
        &self,
        bundle: &ConditioningBundle<S>,
    ) -> Result<Array4<S>, DiffusionError> {
        let cfg = &self.config;
        if bundle.z_t.shape()[1] != cfg.latent_channels {
            return Err(DiffusionError::Shape(format!(
                "z_t has {} channels, config expects {}",
                bundle.z_t.shape()[1],
                cfg.latent_channels
            )));
        }
        let mut parts = vec![bundle.z_t.view()];
        if cfg.use_image_cond {
            parts.push(bundle.v_x.view());
        }
        if cfg.use_height_cond {
            parts.push(bundle.v_h.view());
        }
        Ok(concatenate(Axis(1), &parts).expect("slot shapes verified by assemble"))
    }

    pub(crate) fn predict(
        &self,
        bundle: &ConditioningBundle<S>,
    ) -> Result<Array4<S>, DiffusionError> {
        let input = self.stack_input(bundle)?;
        if self.config.use_semantic_cond
            && bundle.c_x.shape()[1..] != [self.config.num_tokens, self.config.token_dim]
        {
            return Err(DiffusionError::Shape(format!(
                "context {:?} does not match config ({}, {})",
                bundle.c_x.shape(),
                self.config.num_tokens,
                self.config.token_dim
            )));
        }
        let mut f = Fwd::new(&self.store, false);
        let x = f.tape.constant(input.into_dyn());
        let ctx = self
            .config
            .use_semantic_cond
            .then(|| f.tape.constant(bundle.c_x.clone().into_dyn()));
        let out = self.forward(&mut f, x, &bundle.t, ctx);
        Ok(f.tape.value(out).clone().into_dimensionality().unwrap())
    }

    pub fn save(&self, dir: &Path, manifest: &DiffusionManifest) -> Result<(), DiffusionError> {
        std::fs::create_dir_all(dir)?;
        save_params(&self.store, &dir.join("diffusion.weights"))?;
        let mut manifest = manifest.clone();
        manifest.config = self.config.clone();
        manifest.weight_hash = self.weight_hash();
        std::fs::write(
            dir.join("diffusion.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

impl Denoiser<f32> {
    pub fn load(dir: &Path) -> Result<(Self, DiffusionManifest), DiffusionError> {
        let raw = std::fs::read_to_string(dir.join("diffusion.json"))?;
        let manifest: DiffusionManifest = serde_json::from_str(&raw)?;
        let mut model = Denoiser::new(manifest.config.clone());
        load_params(&mut model.store, &dir.join("diffusion.weights"))?;
        if model.weight_hash() != manifest.weight_hash {
            return Err(DiffusionError::Data("checkpoint weight hash mismatch".into()));
        }
        Ok((model, manifest))
    }
}

/// Sidecar metadata persisted next to the denoiser weights.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DiffusionManifest {
    #[serde(default)]
    pub config: DenoiserConfig,
    pub schedule: String,
    pub t_count: usize,
    pub p_drop: f64,
    pub lr: f64,
    pub epoch: usize,
    pub codec_hash: String,
    pub semantic_hash: String,
    pub data_hash: String,
    #[serde(default)]
    pub weight_hash: String,
}
