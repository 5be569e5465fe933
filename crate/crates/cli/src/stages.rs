//! Individual pipeline stages: dataset generation, the four training
//! stages, sampling and evaluation.

use crate::HarnessError;
use crossview_core::codec::{batch_from_images, train_codec, Codec};
use crossview_core::config::ExperimentConfig;
use crossview_core::diffusion::{
    get_sampler, make_schedule, prepare_data, sample, train_diffusion_with, Denoiser,
    DenoiserConfig, DiffusionManifest, SampleSpec,
};
use crossview_core::nn::{load_params, save_params, AdamW, AdamWConfig};
use crossview_core::metrics::{
    evaluate_run, train_extractor, EvalContext, FeatureExtractor, MetricReport,
};
use crossview_core::scene::{
    generate_scene, make_sample, num_categories, perturb_height, read_manifest, read_sample,
    scene_category, write_dataset, DatasetManifest, PairedSample,
};
use crossview_core::semantic::{train_semantic, SemanticEncoder};
use ndarray::Array3;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const SEED_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Generate the paired dataset described by the config into `out`.
pub fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<DatasetManifest, HarnessError> {
    config.validate()?;
    let total = config.dataset.train_size + config.dataset.test_size;
    let ids: Vec<String> = (0..total).map(|i| format!("s{i:05}")).collect();
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        ids: ids.clone(),
        train: ids[..config.dataset.train_size].to_vec(),
        test: ids[config.dataset.train_size..].to_vec(),
        config_hash: config.hash(),
    };
    let mut chunk = Vec::with_capacity(64);
    for i in 0..total {
        chunk.push(make_sample(i, config.dataset.seed, &config.dataset.generator)?);
        if chunk.len() == 64 || i + 1 == total {
            write_dataset(&chunk, out, &manifest)?;
            chunk.clear();
        }
    }
    Ok(manifest)
}

pub fn load_manifest(data_dir: &Path) -> Result<DatasetManifest, HarnessError> {
    read_manifest(data_dir)?.ok_or_else(|| {
        HarnessError::Dependency(format!(
            "no dataset manifest at {}; run gen-data first",
            data_dir.display()
        ))
    })
}

pub fn load_split(
    data_dir: &Path,
    split: Split,
) -> Result<(Vec<PairedSample>, DatasetManifest), HarnessError> {
    let manifest = load_manifest(data_dir)?;
    let ids = match split {
        Split::Train => &manifest.train,
        Split::Test => &manifest.test,
    };
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        samples.push(read_sample(data_dir, id)?);
    }
    Ok((samples, manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Codec,
    Semantic,
    Extractor,
    Diffusion,
}

/// Optional checkpoint locations for stages with prerequisites; when absent
/// they default to siblings of the output directory.
#[derive(Debug, Clone, Default)]
pub struct StagePaths {
    pub codec: Option<PathBuf>,
    pub semantic: Option<PathBuf>,
}

fn sibling(out: &Path, name: &str, explicit: &Option<PathBuf>) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| out.parent().unwrap_or(Path::new(".")).join(name))
}

fn require_dir(dir: &Path, stage: &str) -> Result<(), HarnessError> {
    if dir.join(format!("{stage}.json")).exists() {
        Ok(())
    } else {
        Err(HarnessError::Dependency(format!(
            "stage `{stage}` has no checkpoint at {}; run `train --stage {stage}` first",
            dir.display()
        )))
    }
}

/// Identity of a completed training stage: model config, train config and
/// the dataset hash. A stage whose stamp matches is skipped on rerun.
fn stage_stamp<M: serde::Serialize, T: serde::Serialize>(
    model: &M,
    train: &T,
    data_hash: &str,
) -> serde_json::Value {
    serde_json::json!({
        "model": serde_json::to_value(model).expect("serializable config"),
        "train": serde_json::to_value(train).expect("serializable config"),
        "data_hash": data_hash,
    })
}

fn stamp_matches(dir: &Path, stamp: &serde_json::Value) -> bool {
    std::fs::read_to_string(dir.join("stage.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .is_some_and(|existing| existing == *stamp)
}

fn write_stamp(dir: &Path, stamp: &serde_json::Value) -> Result<(), HarnessError> {
    std::fs::write(dir.join("stage.json"), serde_json::to_string_pretty(stamp)?)?;
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[(usize, f64)], append: bool) -> Result<(), HarnessError> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)?;
    if !append {
        writeln!(file, "epoch,loss")?;
    }
    for (epoch, loss) in history {
        writeln!(file, "{epoch},{loss}")?;
    }
    Ok(())
}

/// Train one stage. Completed stages with matching config and data are
/// skipped; an interrupted diffusion run resumes from its last saved epoch.
pub fn train_stage(
    stage: Stage,
    config: &ExperimentConfig,
    data_dir: &Path,
    out: &Path,
    paths: &StagePaths,
) -> Result<(), HarnessError> {
    config.validate()?;
    match stage {
        Stage::Codec => train_codec_stage(config, data_dir, out),
        Stage::Semantic => train_semantic_stage(config, data_dir, out),
        Stage::Extractor => train_extractor_stage(config, data_dir, out),
        Stage::Diffusion => train_diffusion_stage(config, data_dir, out, paths),
    }
}

fn train_codec_stage(
    config: &ExperimentConfig,
    data_dir: &Path,
    out: &Path,
) -> Result<(), HarnessError> {
    let manifest = load_manifest(data_dir)?;
    let stamp = stage_stamp(&config.codec.model, &config.codec.train, &manifest.config_hash);
    if stamp_matches(out, &stamp) && Codec::load(out).is_ok() {
        eprintln!("codec checkpoint up to date at {}", out.display());
        return Ok(());
    }
    let (samples, _) = load_split(data_dir, Split::Train)?;
    // the same autoencoder embeds aerial views, replicated heights and
    // ground views, so it must train on all three input domains; heights
    // are replicated to three channels exactly as the encoder sees them
    let height_images: Vec<Array3<f32>> = samples
        .iter()
        .map(|s| {
            let v = &s.height.values;
            let (h, w) = (v.shape()[0], v.shape()[1]);
            Array3::from_shape_fn((h, w, 3), |(i, j, _)| v[[i, j]])
        })
        .collect();
    let images = batch_from_images(
        samples
            .iter()
            .map(|s| &s.ground.pixels)
            .chain(samples.iter().map(|s| &s.aerial.pixels))
            .chain(height_images.iter()),
    );
    let mut codec = Codec::new(config.codec.model.clone());
    let history = train_codec(&mut codec, &images, &config.codec.train)?;
    codec.save(out, &manifest.config_hash)?;
    write_stamp(out, &stamp)?;
    let rows: Vec<(usize, f64)> = history.iter().copied().enumerate().collect();
    write_loss_csv(&out.join("loss.csv"), &rows, false)?;
    eprintln!(
        "codec: {} epochs, final loss {:.6}",
        rows.len(),
        rows.last().map(|r| r.1).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_semantic_stage(
    config: &ExperimentConfig,
    data_dir: &Path,
    out: &Path,
) -> Result<(), HarnessError> {
    let manifest = load_manifest(data_dir)?;
    let stamp = stage_stamp(&config.semantic.model, &config.semantic.train, &manifest.config_hash);
    if stamp_matches(out, &stamp) && SemanticEncoder::load(out).is_ok() {
        eprintln!("semantic checkpoint up to date at {}", out.display());
        return Ok(());
    }
    let (samples, _) = load_split(data_dir, Split::Train)?;
    let aerials = batch_from_images(samples.iter().map(|s| &s.aerial.pixels));
    let grounds = batch_from_images(samples.iter().map(|s| &s.ground.pixels));
    let mut encoder = SemanticEncoder::new(config.semantic.model.clone());
    let history = train_semantic(&mut encoder, &aerials, &grounds, &config.semantic.train)?;
    encoder.save(out, &manifest.config_hash)?;
    write_stamp(out, &stamp)?;
    let rows: Vec<(usize, f64)> = history.iter().copied().enumerate().collect();
    write_loss_csv(&out.join("loss.csv"), &rows, false)?;
    eprintln!(
        "semantic: {} epochs, final loss {:.6}",
        rows.len(),
        rows.last().map(|r| r.1).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_extractor_stage(
    config: &ExperimentConfig,
    data_dir: &Path,
    out: &Path,
) -> Result<(), HarnessError> {
    let manifest = load_manifest(data_dir)?;
    let stamp = stage_stamp(&config.eval.extractor, &config.eval.extractor_train, &manifest.config_hash);
    if stamp_matches(out, &stamp) && FeatureExtractor::load(out).is_ok() {
        eprintln!("extractor checkpoint up to date at {}", out.display());
        return Ok(());
    }
    let (samples, _) = load_split(data_dir, Split::Train)?;
    let gen_cfg = &config.dataset.generator;
    let mut extractor_cfg = config.eval.extractor.clone();
    extractor_cfg.num_classes = num_categories(gen_cfg);
    let mut images: Vec<Array3<f32>> = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in &samples {
        let scene = generate_scene(s.scene_seed, gen_cfg)?;
        labels.push(scene_category(&scene, gen_cfg));
        images.push(s.ground.pixels.clone());
    }
    let mut extractor = FeatureExtractor::new(extractor_cfg);
    let history = train_extractor(&mut extractor, &images, &labels, &config.eval.extractor_train)?;
    extractor.save(out, &manifest.config_hash)?;
    write_stamp(out, &stamp)?;
    let rows: Vec<(usize, f64)> = history.iter().copied().enumerate().collect();
    write_loss_csv(&out.join("loss.csv"), &rows, false)?;
    eprintln!(
        "extractor: {} epochs, final loss {:.6}",
        rows.len(),
        rows.last().map(|r| r.1).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// The denoiser configuration implied by the config's ablation flags: each
/// removed conditioning slot shrinks the input channel count. The height
/// latent is produced by the same autoencoder as the aerial latent, so
/// disabling VAE conditioning removes both spatial grids and the
/// no-CLIP/no-VAE cell is a genuinely unconditional-input variant.
pub fn denoiser_config(config: &ExperimentConfig) -> DenoiserConfig {
    DenoiserConfig {
        use_image_cond: config.ablation.use_vae_cond,
        use_height_cond: config.ablation.use_vae_cond && config.ablation.use_height,
        use_semantic_cond: config.ablation.use_clip,
        ..config.diffusion.model.clone()
    }
}

fn train_diffusion_stage(
    config: &ExperimentConfig,
    data_dir: &Path,
    out: &Path,
    paths: &StagePaths,
) -> Result<(), HarnessError> {
    let codec_dir = sibling(out, "codec", &paths.codec);
    let semantic_dir = sibling(out, "semantic", &paths.semantic);
    require_dir(&codec_dir, "codec")?;
    require_dir(&semantic_dir, "semantic")?;
    let codec = Codec::load(&codec_dir)?;
    let semantic = SemanticEncoder::load(&semantic_dir)?;

    let manifest = load_manifest(data_dir)?;
    let tcfg = &config.diffusion.train;
    let model_cfg = denoiser_config(config);
    let want = DiffusionManifest {
        config: model_cfg.clone(),
        schedule: tcfg.schedule.clone(),
        t_count: tcfg.t_count,
        p_drop: tcfg.p_drop,
        lr: tcfg.lr,
        epoch: 0,
        codec_hash: codec.weight_hash(),
        semantic_hash: semantic.weight_hash(),
        data_hash: manifest.config_hash.clone(),
        weight_hash: String::new(),
    };

    let (mut model, mut done_epochs) = match Denoiser::<f32>::load(out) {
        Ok((m, existing))
            if existing.config == want.config
                && existing.schedule == want.schedule
                && existing.t_count == want.t_count
                && existing.codec_hash == want.codec_hash
                && existing.semantic_hash == want.semantic_hash
                && existing.data_hash == want.data_hash =>
        {
            (m, existing.epoch)
        }
        _ => (Denoiser::new(model_cfg), 0),
    };
    if done_epochs >= tcfg.epochs {
        eprintln!("diffusion checkpoint up to date at {}", out.display());
        return Ok(());
    }

    let (samples, _) = load_split(data_dir, Split::Train)?;
    let data = prepare_data(&codec, &semantic, &samples)?;
    let sched = make_schedule(&tcfg.schedule, tcfg.t_count)?;

    // the optimizer state is checkpointed with the weights, so a resumed
    // run is bit-identical to an uninterrupted one
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: tcfg.lr,
            ..Default::default()
        },
        model.store(),
    );
    let opt_path = out.join("optimizer.state");
    if done_epochs > 0 && opt_path.exists() {
        let mut state = opt.state_store(model.store());
        load_params(&mut state, &opt_path)?;
        opt.load_state(model.store(), &state);
    }

    // one epoch per call so the checkpoint on disk is always consistent
    while done_epochs < tcfg.epochs {
        let mut cfg_epoch = tcfg.clone();
        cfg_epoch.epochs = done_epochs + 1;
        let history = train_diffusion_with(
            &mut model,
            &data,
            &sched,
            &cfg_epoch,
            done_epochs,
            &mut opt,
            |_, _| {},
        )?;
        let loss = history[0];
        done_epochs += 1;
        let mut man = want.clone();
        man.epoch = done_epochs;
        model.save(out, &man)?;
        save_params(&opt.state_store(model.store()), &opt_path)?;
        write_loss_csv(
            &out.join("loss.csv"),
            &[(done_epochs - 1, loss)],
            done_epochs > 1,
        )?;
        eprintln!("diffusion epoch {done_epochs}/{}: loss {loss:.6}", tcfg.epochs);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub codec: Option<PathBuf>,
    pub semantic: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub scale: f64,
    pub steps: usize,
    pub seed: u64,
    pub sampler: Option<String>,
    pub no_height: bool,
    /// Gaussian noise added to the height map at inference.
    pub height_noise_sigma: f64,
}

#[derive(Debug, serde::Serialize)]
struct SampleRunRecord<'a> {
    checkpoint_hash: String,
    codec_hash: String,
    semantic_hash: String,
    data_hash: String,
    scale: f64,
    steps: usize,
    seed: u64,
    sampler: Option<&'a String>,
    no_height: bool,
    height_noise_sigma: f64,
    ids: &'a [String],
}

/// Generate one ground image per test sample, id-aligned with the dataset.
pub fn sample_run(args: &SampleArgs) -> Result<(), HarnessError> {
    let (model, man) = Denoiser::<f32>::load(&args.ckpt).map_err(|e| {
        HarnessError::Dependency(format!(
            "stage `diffusion` checkpoint at {}: {e}; run `train --stage diffusion` first",
            args.ckpt.display()
        ))
    })?;
    let codec_dir = sibling(&args.ckpt, "codec", &args.codec);
    let semantic_dir = sibling(&args.ckpt, "semantic", &args.semantic);
    require_dir(&codec_dir, "codec")?;
    require_dir(&semantic_dir, "semantic")?;
    let codec = Codec::load(&codec_dir)?;
    let semantic = SemanticEncoder::load(&semantic_dir)?;
    if codec.weight_hash() != man.codec_hash || semantic.weight_hash() != man.semantic_hash {
        return Err(HarnessError::Validation(
            "the diffusion checkpoint was trained against different codec/semantic weights".into(),
        ));
    }
    if args.height_noise_sigma < 0.0 {
        return Err(HarnessError::Validation("height noise sigma must be >= 0".into()));
    }
    if let Some(name) = &args.sampler {
        get_sampler(name).map_err(|e| HarnessError::Validation(e.to_string()))?;
    }

    let manifest = load_manifest(&args.data)?;
    let sched = make_schedule(&man.schedule, man.t_count)?;
    std::fs::create_dir_all(&args.out)?;
    for (idx, id) in manifest.test.iter().enumerate() {
        let s = read_sample(&args.data, id)?;
        let per_sample_seed = args.seed ^ (idx as u64 + 1).wrapping_mul(SEED_STRIDE);
        let height = if args.height_noise_sigma > 0.0 {
            perturb_height(&s.height, args.height_noise_sigma, per_sample_seed ^ 0x5eed)
        } else {
            s.height
        };
        let spec = SampleSpec {
            scale: args.scale,
            steps: args.steps,
            seed: per_sample_seed,
            sampler: args.sampler.clone(),
            no_height: args.no_height,
        };
        let image = sample(
            &model,
            &codec,
            &semantic,
            &s.aerial.pixels,
            &height,
            &sched,
            &spec,
        )?;
        crossview_core::scene::save_png(&image, &args.out.join(format!("{id}.png")))?;
    }
    let record = SampleRunRecord {
        checkpoint_hash: model.weight_hash(),
        codec_hash: man.codec_hash.clone(),
        semantic_hash: man.semantic_hash.clone(),
        data_hash: manifest.config_hash.clone(),
        scale: args.scale,
        steps: args.steps,
        seed: args.seed,
        sampler: args.sampler.as_ref(),
        no_height: args.no_height,
        height_noise_sigma: args.height_noise_sigma,
        ids: &manifest.test,
    };
    std::fs::write(
        args.out.join("run.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(())
}

/// Copy the test-split ground-truth views into a flat id-aligned directory.
pub fn export_ground_truth(data_dir: &Path, out: &Path) -> Result<(), HarnessError> {
    let manifest = load_manifest(data_dir)?;
    std::fs::create_dir_all(out)?;
    for id in &manifest.test {
        std::fs::copy(
            data_dir.join(id).join("ground.png"),
            out.join(format!("{id}.png")),
        )?;
    }
    Ok(())
}

/// Evaluate a generated directory against ground truth using the pinned
/// extractor and semantic encoder checkpoints.
pub fn eval_run(
    gen: &Path,
    gt: &Path,
    extractor_dir: &Path,
    semantic_dir: &Path,
    seed: u64,
    out_dir: &Path,
) -> Result<MetricReport, HarnessError> {
    require_dir(extractor_dir, "extractor")?;
    require_dir(semantic_dir, "semantic")?;
    let extractor = FeatureExtractor::load(extractor_dir)?;
    let semantic = SemanticEncoder::load(semantic_dir)?;
    let ctx = EvalContext {
        extractor: &extractor,
        semantic: &semantic,
    };
    let report = evaluate_run(gen, gt, &ctx, seed, out_dir).map_err(|e| match e {
        crossview_core::metrics::MetricError::Format(msg) => HarnessError::Validation(msg),
        other => other.into(),
    })?;
    Ok(report)
}
