//! The ablation grid: retrained conditioning variants, the height on/off
//! comparison, the guidance-scale sweep and height-noise sensitivity, with
//! ordering assertions evaluated over per-sample structural similarity.

use crate::stages::{eval_run, export_ground_truth, sample_run, train_stage, SampleArgs, Stage, StagePaths};
use crate::HarnessError;
use crossview_core::config::ExperimentConfig;
use crossview_core::metrics::{wilcoxon_signed_rank, MetricReport, MetricValues};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const ABLATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub config: ExperimentConfig,
    pub data: PathBuf,
    pub codec: PathBuf,
    pub semantic: PathBuf,
    pub extractor: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub name: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub n: usize,
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub cells: Vec<CellReport>,
    pub assertions: Vec<Assertion>,
    /// (guidance scale, mean SSIM) rows for manual curve inspection.
    pub cfg_scale_curve: Vec<(f64, f64)>,
}

/// Conditioning variants retrained per grid cell; removing a slot changes
/// the denoiser's input channel count rather than zeroing at inference.
const VARIANTS: &[(&str, bool, bool, bool)] = &[
    // (name, use_clip, use_vae_cond, use_height)
    ("full", true, true, true),
    ("vae_only", false, true, true),
    ("clip_only", true, false, true),
    ("none", false, false, true),
    ("no_height", true, true, false),
];

fn variant_config(base: &ExperimentConfig, clip: bool, vae: bool, height: bool) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.ablation.use_clip = clip;
    cfg.ablation.use_vae_cond = vae;
    cfg.ablation.use_height = height;
    cfg
}

struct Runner<'a> {
    args: &'a AblateArgs,
    gt: PathBuf,
    cells: Vec<CellReport>,
    reports: Vec<(String, MetricReport)>,
}

impl<'a> Runner<'a> {
    fn sample_and_eval(
        &mut self,
        name: &str,
        ckpt: &Path,
        cfg: &ExperimentConfig,
        scale: f64,
        sigma: f64,
    ) -> Result<(), HarnessError> {
        let samples_dir = self.args.out.join("samples").join(name);
        sample_run(&SampleArgs {
            ckpt: ckpt.to_path_buf(),
            codec: Some(self.args.codec.clone()),
            semantic: Some(self.args.semantic.clone()),
            data: self.args.data.clone(),
            out: samples_dir.clone(),
            scale,
            steps: cfg.sample.steps,
            seed: cfg.sample.seed,
            sampler: cfg.sample.sampler.clone(),
            no_height: false,
            height_noise_sigma: sigma,
        })?;
        let report = eval_run(
            &samples_dir,
            &self.gt,
            &self.args.extractor,
            &self.args.semantic,
            cfg.eval.seed,
            &self.args.out.join("eval").join(name),
        )?;
        let man: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(ckpt.join("diffusion.json"))?)?;
        self.cells.push(CellReport {
            name: name.to_string(),
            config_hash: cfg.hash(),
            checkpoint_hash: man["weight_hash"].as_str().unwrap_or_default().to_string(),
            n: report.n,
            metrics: report.metrics.clone(),
        });
        self.reports.push((name.to_string(), report));
        Ok(())
    }

    fn report(&self, name: &str) -> &MetricReport {
        &self
            .reports
            .iter()
            .find(|(n, _)| n == name)
            .expect("cell was run")
            .1
    }

    fn mean_ssim(&self, name: &str) -> f64 {
        self.report(name).metrics.ssim
    }

    /// Two-sided signed-rank p-value over per-sample SSIM deltas a - b.
    fn ssim_p(&self, a: &str, b: &str) -> f64 {
        let (ra, rb) = (self.report(a), self.report(b));
        let deltas: Vec<f64> = ra
            .rows
            .iter()
            .zip(&rb.rows)
            .map(|(x, y)| x.ssim - y.ssim)
            .collect();
        match wilcoxon_signed_rank(&deltas) {
            Ok((_, p)) => p,
            Err(_) => 1.0, // all deltas zero: no evidence of a difference
        }
    }
}

pub fn run_ablation(args: &AblateArgs) -> Result<AblationReport, HarnessError> {
    args.config.validate()?;
    let gt = args.out.join("gt");
    export_ground_truth(&args.data, &gt)?;
    let mut runner = Runner {
        args,
        gt,
        cells: Vec::new(),
        reports: Vec::new(),
    };

    // retrained conditioning/height variants
    let paths = StagePaths {
        codec: Some(args.codec.clone()),
        semantic: Some(args.semantic.clone()),
    };
    for &(name, clip, vae, height) in VARIANTS {
        let cfg = variant_config(&args.config, clip, vae, height);
        let ckpt = args.out.join("ckpt").join(name);
        eprintln!("ablation cell `{name}`: training");
        train_stage(Stage::Diffusion, &cfg, &args.data, &ckpt, &paths)?;
        eprintln!("ablation cell `{name}`: sampling and evaluating");
        runner.sample_and_eval(name, &ckpt, &cfg, cfg.sample.scale, 0.0)?;
    }

    // guidance-scale sweep over the full model's checkpoint
    let full_ckpt = args.out.join("ckpt").join("full");
    let mut curve = Vec::new();
    for &scale in &args.config.ablation.cfg_scales {
        let name = format!("cfg_{scale}");
        eprintln!("ablation cell `{name}`: sampling and evaluating");
        runner.sample_and_eval(&name, &full_ckpt, &args.config, scale, 0.0)?;
        curve.push((scale, runner.mean_ssim(&name)));
    }

    // height-noise sensitivity at inference on the full model
    for &sigma in &args.config.ablation.height_noise_sigmas {
        if sigma == 0.0 {
            continue; // identical to the `full` cell
        }
        let name = format!("noise_{sigma}");
        eprintln!("ablation cell `{name}`: sampling and evaluating");
        runner.sample_and_eval(&name, &full_ckpt, &args.config, args.config.sample.scale, sigma)?;
    }

    let mut assertions = Vec::new();
    let (full, vae, clip, none, noh) = (
        runner.mean_ssim("full"),
        runner.mean_ssim("vae_only"),
        runner.mean_ssim("clip_only"),
        runner.mean_ssim("none"),
        runner.mean_ssim("no_height"),
    );
    let p_height = runner.ssim_p("full", "no_height");
    assertions.push(Assertion {
        name: "height_ablation_direction".into(),
        passed: full > noh && p_height < 0.05,
        detail: format!("mean SSIM with height {full:.4} vs without {noh:.4}"),
        p_value: Some(p_height),
    });
    let p_top = runner.ssim_p("full", "vae_only");
    assertions.push(Assertion {
        name: "conditioning_ordering".into(),
        passed: full >= vae && vae >= none && full >= clip,
        detail: format!(
            "mean SSIM full {full:.4} >= vae_only {vae:.4} >= none {none:.4}, full >= clip_only {clip:.4}"
        ),
        p_value: Some(p_top),
    });
    if let Some(&sigma) = args
        .config
        .ablation
        .height_noise_sigmas
        .iter()
        .find(|&&s| s > 0.0)
    {
        let name = format!("noise_{sigma}");
        let noisy = runner.mean_ssim(&name);
        let p_noise = runner.ssim_p("full", &name);
        assertions.push(Assertion {
            name: "height_noise_sensitivity".into(),
            passed: full > noisy && p_noise < 0.05,
            detail: format!("mean SSIM clean {full:.4} vs sigma={sigma} {noisy:.4}"),
            p_value: Some(p_noise),
        });
    }
    let sweep_ok = curve.len() == args.config.ablation.cfg_scales.len()
        && runner
            .cells
            .iter()
            .filter(|c| c.name.starts_with("cfg_"))
            .all(|c| {
                c.metrics.ssim.is_finite()
                    && c.metrics.is.is_finite()
                    && c.metrics.kid.is_finite()
                    && c.metrics.lpips.is_finite()
                    && c.metrics.clip_sim.is_finite()
            });
    assertions.push(Assertion {
        name: "cfg_sweep_complete".into(),
        passed: sweep_ok,
        detail: format!("scale-vs-SSIM curve: {curve:?}"),
        p_value: None,
    });

    let report = AblationReport {
        schema_version: ABLATION_SCHEMA_VERSION,
        config_hash: args.config.hash(),
        cells: runner.cells,
        assertions,
        cfg_scale_curve: curve,
    };
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
