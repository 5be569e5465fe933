//! Acceptance suite for the whole pipeline. Each check prints one
//! `pass`/`fail` line; run with
//! `cargo test -p crossview-cli --test acceptance -- --nocapture` to see
//! them as they complete. The end-to-end checks train every stage at a
//! reduced profile sized for a single CPU core; set `ACCEPTANCE_FULL=1`
//! to use the full-scale default configuration instead.

use crossview_cli::ablate::{run_ablation, AblateArgs, AblationReport};
use crossview_cli::stages::{
    eval_run, gen_data, sample_run, train_stage, SampleArgs, Stage, StagePaths,
};
use crossview_core::codec::{Codec, CodecConfig};
use crossview_core::config::ExperimentConfig;
use crossview_core::diffusion::{
    cfg_combine, make_schedule, prepare_data, q_sample, training_step, Denoiser, DenoiserConfig,
    NoiseSchedule,
};
use crossview_core::metrics::{inception_score, kid, ssim, wilcoxon_signed_rank};
use crossview_core::nn::{AdamW, AdamWConfig, Fwd};
use crossview_core::scene::make_sample;
use crossview_core::semantic::{SemanticConfig, SemanticEncoder};
use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::{Path, PathBuf};

/// Regression floors for the full model at the reduced profile, frozen
/// from pilot runs; see `thresholds()` for the full-profile values.
const TAU_SSIM_REDUCED: f64 = 0.0; // placeholder until pilot freeze
const TAU_LPIPS_REDUCED: f64 = 1.0; // placeholder until pilot freeze
const TAU_SSIM_FULL: f64 = 0.0;
const TAU_LPIPS_FULL: f64 = 1.0;

fn full_scale() -> bool {
    std::env::var("ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn thresholds() -> (f64, f64) {
    if full_scale() {
        (TAU_SSIM_FULL, TAU_LPIPS_FULL)
    } else {
        (TAU_SSIM_REDUCED, TAU_LPIPS_REDUCED)
    }
}

/// The profile used by the end-to-end checks.
fn experiment_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    if full_scale() {
        return cfg;
    }
    cfg.dataset.train_size = 1024;
    cfg.dataset.test_size = 128;
    cfg.codec.model.base_channels = 16;
    cfg.codec.model.init_seed = 1;
    cfg.codec.train.epochs = 12;
    cfg.codec.train.lr = 2e-4;
    cfg.codec.train.seed = 1;
    cfg.semantic.model.token_dim = 64;
    cfg.semantic.model.base_channels = 8;
    cfg.semantic.model.init_seed = 2;
    cfg.semantic.train.epochs = 10;
    cfg.semantic.train.seed = 2;
    cfg.diffusion.model.base_channels = 32;
    cfg.diffusion.model.token_dim = 64;
    cfg.diffusion.model.init_seed = 3;
    cfg.diffusion.train.epochs = 60;
    cfg.diffusion.train.lr = 2e-4;
    cfg.diffusion.train.t_count = 400;
    cfg.diffusion.train.seed = 3;
    cfg.sample.steps = 20;
    cfg.sample.seed = 11;
    cfg.eval.extractor_train.epochs = 8;
    cfg.eval.extractor_train.seed = 4;
    cfg
}

struct Suite {
    results: Vec<(String, Result<(), String>)>,
}

impl Suite {
    fn new() -> Self {
        Suite { results: Vec::new() }
    }

    fn check(&mut self, name: &str, outcome: Result<(), String>) {
        match &outcome {
            Ok(()) => println!("acceptance: {name} ... pass"),
            Err(e) => println!("acceptance: {name} ... FAIL ({e})"),
        }
        self.results.push((name.to_string(), outcome));
    }

    fn finish(self) {
        let failures: Vec<String> = self
            .results
            .iter()
            .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
            .collect();
        assert!(
            failures.is_empty(),
            "{} acceptance check(s) failed:\n{}",
            failures.len(),
            failures.join("\n")
        );
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

// ---------------------------------------------------------------------
// guidance endpoints
// ---------------------------------------------------------------------

fn check_guidance_endpoints() -> Result<(), String> {
    let eps_u = randn4((2, 4, 8, 8), 1);
    let eps_c = randn4((2, 4, 8, 8), 2);

    let at0 = cfg_combine(&eps_u, &eps_c, 0.0);
    for (a, b) in at0.iter().zip(eps_u.iter()) {
        ensure(a.to_bits() == b.to_bits(), "s=0 is not bitwise unconditional")?;
    }
    let at1 = cfg_combine(&eps_u, &eps_c, 1.0);
    for (a, b) in at1.iter().zip(eps_c.iter()) {
        ensure(a.to_bits() == b.to_bits(), "s=1 is not bitwise conditional")?;
    }
    // general affine form at s = 2: (1 - 2) * 1.0 + 2 * 0.25 = -0.5
    let u = Array4::from_elem((1, 1, 1, 1), 1.0f32);
    let c = Array4::from_elem((1, 1, 1, 1), 0.25f32);
    let got = cfg_combine(&u, &c, 2.0)[[0, 0, 0, 0]] as f64;
    ensure(
        (got + 0.5).abs() < 1e-7,
        format!("s=2 guidance expected -0.5, got {got}"),
    )
}

// ---------------------------------------------------------------------
// forward process
// ---------------------------------------------------------------------

fn check_forward_process() -> Result<(), String> {
    let sched = make_schedule("linear", 1000).map_err(|e| e.to_string())?;
    ensure(
        (sched.alpha_bar[0] - (1.0 - 1e-4)).abs() < 1e-15,
        "first alpha_bar of the linear schedule is off",
    )?;
    // schedule invariants for both registered builders at T = 1000
    for name in ["linear", "cosine"] {
        let s = make_schedule(name, 1000).map_err(|e| e.to_string())?;
        ensure(
            s.beta.iter().all(|b| *b > 0.0 && *b < 1.0),
            format!("{name}: betas must lie in (0, 1)"),
        )?;
        ensure(
            s.alpha_bar.windows(2).all(|w| w[1] < w[0]),
            format!("{name}: alpha_bar must be strictly decreasing"),
        )?;
        ensure(
            s.alpha_bar[0] > 0.999 && s.alpha_bar[999] < 0.01,
            format!(
                "{name}: alpha_bar endpoints {} / {} out of range",
                s.alpha_bar[0], s.alpha_bar[999]
            ),
        )?;
        // independent oracle: product via summed logs
        let log_sum: f64 = s.beta.iter().map(|b| (1.0 - b).ln()).sum();
        ensure(
            (s.alpha_bar[999] - log_sum.exp()).abs() < 1e-12,
            format!("{name}: alpha_bar product disagrees with the log-sum oracle"),
        )?;
    }

    // closed form at t = 1 for betas (0.1, 0.2): abar = 0.72
    let two = NoiseSchedule::from_betas(vec![0.1, 0.2]).map_err(|e| e.to_string())?;
    ensure(
        (two.alpha_bar[1] - 0.72).abs() < 1e-15,
        "two-step alpha_bar is not 0.72",
    )?;
    let z0 = ArrayD::from_elem(IxDyn(&[3]), 1.0f64);
    let eps = ArrayD::from_elem(IxDyn(&[3]), -0.5f64);
    let zt = q_sample(&z0, 1, &eps, &two).map_err(|e| e.to_string())?;
    let want = 0.72f64.sqrt() - 0.5 * 0.28f64.sqrt();
    for v in zt.iter() {
        ensure(
            (v - want).abs() < 1e-12,
            format!("q_sample closed form: got {v}, want {want}"),
        )?;
    }

    // marginal variance at the end of the schedule: z_t ~ N(sqrt(abar) z0, 1 - abar)
    let n = 10_000;
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let z0 = ArrayD::from_elem(IxDyn(&[n]), 0.3f64);
    let eps = ArrayD::from_shape_simple_fn(IxDyn(&[n]), || {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let zt = q_sample(&z0, 999, &eps, &sched).map_err(|e| e.to_string())?;
    let mean: f64 = zt.iter().sum::<f64>() / n as f64;
    let var: f64 = zt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want_var = 1.0 - sched.alpha_bar[999];
    ensure(
        (var / want_var - 1.0).abs() < 0.06,
        format!("t=999 variance {var} strays from {want_var}"),
    )
}

// ---------------------------------------------------------------------
// gradient consistency
// ---------------------------------------------------------------------

fn check_gradients() -> Result<(), String> {
    let cfg = DenoiserConfig {
        latent_channels: 2,
        base_channels: 4,
        token_dim: 8,
        num_tokens: 5,
        init_seed: 7,
        ..DenoiserConfig::default()
    };
    let mut model = Denoiser::<f64>::new(cfg);
    // fill every parameter (including zero-initialized ones) with noise so
    // the check exercises a generic point in weight space
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let ids: Vec<_> = model.store().iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for w in model.store_mut().get_mut(id).iter_mut() {
            *w = 0.2 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let mut randn = |shape: &[usize]| {
        ArrayD::<f64>::from_shape_simple_fn(IxDyn(shape), || {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
    };
    let input = randn(&[2, 6, 8, 8]);
    let ctx = randn(&[2, 5, 8]);
    let eps = randn(&[2, 2, 8, 8]);
    let t = vec![3usize, 11];

    let loss_value = |model: &Denoiser<f64>| -> f64 {
        let mut f = Fwd::new(model.store(), false);
        let x = f.tape.constant(input.clone());
        let c = f.tape.constant(ctx.clone());
        let out = model.forward(&mut f, x, &t, Some(c));
        let tgt = f.tape.constant(eps.clone());
        let d = f.tape.sub(out, tgt);
        let sq = f.tape.square(d);
        let l = f.tape.mean_all(sq);
        f.tape.value(l)[[]]
    };

    let mut f = Fwd::new(model.store(), true);
    let x = f.tape.constant(input.clone());
    let c = f.tape.constant(ctx.clone());
    let out = model.forward(&mut f, x, &t, Some(c));
    let tgt = f.tape.constant(eps.clone());
    let d = f.tape.sub(out, tgt);
    let sq = f.tape.square(d);
    let l = f.tape.mean_all(sq);
    let grads = f.tape.backward(l);
    let bindings = f.bindings();
    drop(f);

    let mut coord_rng = ChaCha12Rng::seed_from_u64(10);
    let h = 1e-5;
    let mut checked = 0;
    while checked < 32 {
        let &(pid, var) = &bindings[coord_rng.random_range(0..bindings.len())];
        let Some(g) = grads.get(var) else { continue };
        let k = coord_rng.random_range(0..g.len());
        let analytic = g.as_slice().unwrap()[k];

        let orig = model.store().get(pid).as_slice().unwrap()[k];
        model.store_mut().get_mut(pid).as_slice_mut().unwrap()[k] = orig + h;
        let up = loss_value(&model);
        model.store_mut().get_mut(pid).as_slice_mut().unwrap()[k] = orig - h;
        let down = loss_value(&model);
        model.store_mut().get_mut(pid).as_slice_mut().unwrap()[k] = orig;
        let numeric = (up - down) / (2.0 * h);

        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        ensure(
            rel < 1e-3,
            format!("coordinate {k}: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"),
        )?;
        checked += 1;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// frozen conditioning encoders
// ---------------------------------------------------------------------

fn check_frozen_encoders() -> Result<(), String> {
    let gen = crossview_core::scene::GeneratorConfig::default();
    let samples: Vec<_> = (0..8)
        .map(|i| make_sample(i, 99, &gen))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    let codec = Codec::new(CodecConfig {
        base_channels: 8,
        init_seed: 1,
        ..Default::default()
    });
    let semantic = SemanticEncoder::new(SemanticConfig {
        token_dim: 16,
        base_channels: 4,
        ..Default::default()
    });
    let codec_hash = codec.weight_hash();
    let semantic_hash = semantic.weight_hash();

    let data = prepare_data(&codec, &semantic, &samples).map_err(|e| e.to_string())?;
    let sched = make_schedule("linear", 50).map_err(|e| e.to_string())?;
    let mut model = Denoiser::<f32>::new(DenoiserConfig {
        base_channels: 8,
        token_dim: 16,
        init_seed: 3,
        ..Default::default()
    });
    let before = model.weight_hash();
    let mut opt = AdamW::new(
        AdamWConfig { lr: 1e-3, ..Default::default() },
        model.store(),
    );
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let idx: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..20 {
        training_step(&mut model, &data, &idx, &sched, 0.1, &mut opt, &mut rng)
            .map_err(|e| e.to_string())?;
    }
    ensure(model.weight_hash() != before, "denoiser weights never moved")?;
    ensure(
        codec.weight_hash() == codec_hash,
        "codec weights changed during diffusion training",
    )?;
    ensure(
        semantic.weight_hash() == semantic_hash,
        "semantic encoder weights changed during diffusion training",
    )
}

// ---------------------------------------------------------------------
// metric oracles
// ---------------------------------------------------------------------

/// Brute-force signed-rank null: enumerate all 2^n sign assignments.
fn wilcoxon_enumeration(deltas: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    // doubled average ranks of |deltas|
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| nz[a].abs().partial_cmp(&nz[b].abs()).unwrap());
    let mut ranks2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[order[j + 1]].abs() == nz[order[i]].abs() {
            j += 1;
        }
        let sum2: u64 = ((i + 1 + j + 1) * (j - i + 1)) as u64;
        for &k in &order[i..=j] {
            ranks2[k] = sum2 / (j - i + 1) as u64;
        }
        i = j + 1;
    }
    let w2: u64 = nz
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let mut le = 0u64;
    let mut ge = 0u64;
    for mask in 0u64..(1 << n) {
        let s: u64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| ranks2[k]).sum();
        if s <= w2 {
            le += 1;
        }
        if s >= w2 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    let p = (2.0 * (le.min(ge) as f64) / total).min(1.0);
    (w2 as f64 / 2.0, p)
}

fn check_metric_oracles() -> Result<(), String> {
    // structural similarity: identity and the constant-offset closed form
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let img = Array3::from_shape_simple_fn((24, 24, 3), || rng.random_range(0.0f32..1.0));
    let s_id = ssim(&img, &img).map_err(|e| e.to_string())?;
    ensure(s_id == 1.0, format!("self-similarity is {s_id}, not exactly 1"))?;
    let img2 = Array3::from_shape_simple_fn((24, 24, 3), || rng.random_range(0.0f32..1.0));
    let fwd = ssim(&img, &img2).map_err(|e| e.to_string())?;
    let rev = ssim(&img2, &img).map_err(|e| e.to_string())?;
    ensure(
        (fwd - rev).abs() < 1e-12,
        format!("similarity is asymmetric: {fwd} vs {rev}"),
    )?;

    // perceptual distance vanishes on identical inputs
    let extractor = crossview_core::metrics::FeatureExtractor::new(Default::default());
    let d0 = extractor
        .perceptual_distance(&img, &img)
        .map_err(|e| e.to_string())?;
    ensure(d0 == 0.0, format!("perceptual self-distance is {d0}, not 0"))?;

    let a = Array3::from_elem((24, 24, 3), 0.5f32);
    let b = Array3::from_elem((24, 24, 3), 0.6f32);
    let c1 = 0.01f64 * 0.01;
    let want = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
    let got = ssim(&a, &b).map_err(|e| e.to_string())?;
    ensure(
        (got - want).abs() < 1e-6,
        format!("constant-image closed form: got {got}, want {want}"),
    )?;

    // kernel distance on two two-point sets, against a direct evaluation
    let x = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = Array2::from_shape_vec((2, 2), vec![0.5, 0.5, -0.5, 0.5]).unwrap();
    let k3 = |u: &[f64], v: &[f64]| {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        (dot / 2.0 + 1.0).powi(3)
    };
    let xs: Vec<&[f64]> = x.rows().into_iter().map(|r| r.to_slice().unwrap()).collect();
    let ys: Vec<&[f64]> = y.rows().into_iter().map(|r| r.to_slice().unwrap()).collect();
    // unbiased MMD^2 for n = m = 2
    let want = k3(xs[0], xs[1]) + k3(ys[0], ys[1])
        - (k3(xs[0], ys[0]) + k3(xs[0], ys[1]) + k3(xs[1], ys[0]) + k3(xs[1], ys[1])) / 2.0;
    let got = kid(&x, &y, 0).map_err(|e| e.to_string())?;
    ensure(
        (got - want).abs() < 1e-10,
        format!("kernel distance: got {got}, want {want}"),
    )?;

    // kernel distance stays near zero when both sets share a distribution
    let mut rng_kid = ChaCha12Rng::seed_from_u64(23);
    let mut draw = |n: usize| {
        Array2::from_shape_simple_fn((n, 128), || {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng_kid)
        })
    };
    let (fa, fb) = (draw(200), draw(200));
    let same = kid(&fa, &fb, 0).map_err(|e| e.to_string())?;
    ensure(
        same.abs() < 0.01,
        format!("same-distribution kernel distance {same} is not near zero"),
    )?;

    // inception score of one-hot rows with a single split is the class count
    let mut probs = Array2::zeros((12, 4));
    for i in 0..12 {
        probs[[i, i % 4]] = 1.0;
    }
    let is = inception_score(&probs, 1).map_err(|e| e.to_string())?;
    ensure(
        (is - 4.0).abs() < 1e-10,
        format!("one-hot inception score: got {is}, want 4"),
    )?;
    // identical per-image posteriors give the lower bound exactly
    let uniform = Array2::from_elem((12, 4), 0.25);
    let is_lo = inception_score(&uniform, 3).map_err(|e| e.to_string())?;
    ensure(
        (is_lo - 1.0).abs() < 1e-12,
        format!("identical-posterior inception score: got {is_lo}, want 1"),
    )?;

    // signed-rank test vs. exhaustive enumeration
    let (w, p) = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]).map_err(|e| e.to_string())?;
    ensure(
        w == 15.0 && (p - 0.0625).abs() < 1e-12,
        format!("all-positive n=5 case: got W={w}, p={p}"),
    )?;
    let mut rng = ChaCha12Rng::seed_from_u64(22);
    for trial in 0..100 {
        let n = rng.random_range(5..=10);
        let deltas: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(-4i32..=4) as f64) / 2.0)
            .collect();
        if deltas.iter().all(|d| *d == 0.0) {
            continue;
        }
        let (wp, pp) = wilcoxon_signed_rank(&deltas).map_err(|e| e.to_string())?;
        let (wo, po) = wilcoxon_enumeration(&deltas);
        ensure(
            (wp - wo).abs() < 1e-12 && (pp - po).abs() < 1e-12,
            format!("trial {trial}: ({wp}, {pp}) vs enumeration ({wo}, {po}) for {deltas:?}"),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// end-to-end pipeline
// ---------------------------------------------------------------------

struct Pipeline {
    root: PathBuf,
    config: ExperimentConfig,
    report: AblationReport,
}

fn hash_dir(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        if entry.path().is_file() {
            entries.push((
                entry.file_name().to_string_lossy().into_owned(),
                std::fs::read(entry.path()).map_err(|e| e.to_string())?,
            ));
        }
    }
    entries.sort();
    Ok(entries)
}

fn run_pipeline(root: &Path) -> Result<Pipeline, String> {
    let config = experiment_config();
    let data = root.join("data");
    gen_data(&config, &data).map_err(|e| format!("gen-data: {e}"))?;

    let paths = StagePaths::default();
    for (stage, name) in [
        (Stage::Codec, "codec"),
        (Stage::Semantic, "semantic"),
        (Stage::Extractor, "extractor"),
    ] {
        train_stage(stage, &config, &data, &root.join("ckpt").join(name), &paths)
            .map_err(|e| format!("train {name}: {e}"))?;
    }
    let report = run_ablation(&AblateArgs {
        config: config.clone(),
        data,
        codec: root.join("ckpt/codec"),
        semantic: root.join("ckpt/semantic"),
        extractor: root.join("ckpt/extractor"),
        out: root.join("ablation"),
    })
    .map_err(|e| format!("ablation: {e}"))?;
    Ok(Pipeline {
        root: root.to_path_buf(),
        config,
        report,
    })
}

fn cell_metrics<'r>(
    report: &'r AblationReport,
    name: &str,
) -> Result<&'r crossview_core::metrics::MetricValues, String> {
    report
        .cells
        .iter()
        .find(|c| c.name == name)
        .map(|c| &c.metrics)
        .ok_or_else(|| format!("ablation cell `{name}` missing"))
}

fn assertion_result(report: &AblationReport, name: &str) -> Result<(), String> {
    let a = report
        .assertions
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| format!("assertion `{name}` missing from the ablation report"))?;
    if a.passed {
        Ok(())
    } else {
        Err(format!(
            "{}{}",
            a.detail,
            a.p_value.map(|p| format!(" (p={p:.4})")).unwrap_or_default()
        ))
    }
}

fn check_quality(p: &Pipeline) -> Result<(), String> {
    let (tau_ssim, tau_lpips) = thresholds();
    let m = cell_metrics(&p.report, "full")?;
    ensure(
        m.ssim >= tau_ssim,
        format!("full-model SSIM {:.4} below floor {tau_ssim}", m.ssim),
    )?;
    ensure(
        m.lpips <= tau_lpips,
        format!("full-model perceptual distance {:.4} above ceiling {tau_lpips}", m.lpips),
    )
}

fn check_reproducibility(p: &Pipeline) -> Result<(), String> {
    // dataset generation is byte-identical
    let data2 = p.root.join("data_rerun");
    gen_data(&p.config, &data2).map_err(|e| format!("gen-data rerun: {e}"))?;
    ensure(
        hash_dir(&p.root.join("data"))? == hash_dir(&data2)?,
        "regenerated dataset differs byte-for-byte",
    )?;

    // sampling from the trained full model is byte-identical
    let args = |out: PathBuf| SampleArgs {
        ckpt: p.root.join("ablation/ckpt/full"),
        codec: Some(p.root.join("ckpt/codec")),
        semantic: Some(p.root.join("ckpt/semantic")),
        data: p.root.join("data"),
        out,
        scale: p.config.sample.scale,
        steps: p.config.sample.steps,
        seed: p.config.sample.seed,
        sampler: p.config.sample.sampler.clone(),
        no_height: false,
        height_noise_sigma: 0.0,
    };
    let s1 = p.root.join("repro/s1");
    let s2 = p.root.join("repro/s2");
    sample_run(&args(s1.clone())).map_err(|e| format!("sample rerun 1: {e}"))?;
    sample_run(&args(s2.clone())).map_err(|e| format!("sample rerun 2: {e}"))?;
    ensure(
        hash_dir(&s1)? == hash_dir(&s2)?,
        "two identically seeded sampling runs differ",
    )?;

    // evaluation is byte-identical
    let gt = p.root.join("ablation/gt");
    let e1 = p.root.join("repro/e1");
    let e2 = p.root.join("repro/e2");
    for out in [&e1, &e2] {
        eval_run(
            &s1,
            &gt,
            &p.root.join("ckpt/extractor"),
            &p.root.join("ckpt/semantic"),
            p.config.eval.seed,
            out,
        )
        .map_err(|e| format!("eval rerun: {e}"))?;
    }
    ensure(
        std::fs::read(e1.join("report.json")).map_err(|e| e.to_string())?
            == std::fs::read(e2.join("report.json")).map_err(|e| e.to_string())?,
        "two identically seeded evaluations differ",
    )
}

// ---------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut suite = Suite::new();
    suite.check("guidance endpoints are exact", check_guidance_endpoints());
    suite.check("noise schedule and forward process", check_forward_process());
    suite.check("gradients match finite differences", check_gradients());
    suite.check("conditioning encoders stay frozen", check_frozen_encoders());
    suite.check("metric implementations match oracles", check_metric_oracles());

    let tmp = tempfile::tempdir().expect("tempdir");
    match run_pipeline(tmp.path()) {
        Ok(p) => {
            suite.check("end-to-end reconstruction quality", check_quality(&p));
            suite.check(
                "height conditioning improves similarity",
                assertion_result(&p.report, "height_ablation_direction"),
            );
            suite.check(
                "conditioning ablations order correctly",
                assertion_result(&p.report, "conditioning_ordering"),
            );
            suite.check(
                "height noise degrades similarity",
                assertion_result(&p.report, "height_noise_sensitivity"),
            );
            suite.check(
                "guidance scale sweep completes",
                assertion_result(&p.report, "cfg_sweep_complete"),
            );
            suite.check("seeded runs are byte-identical", check_reproducibility(&p));
        }
        Err(e) => {
            let msg = format!("pipeline failed: {e}");
            for name in [
                "end-to-end reconstruction quality",
                "height conditioning improves similarity",
                "conditioning ablations order correctly",
                "height noise degrades similarity",
                "guidance scale sweep completes",
                "seeded runs are byte-identical",
            ] {
                suite.check(name, Err(msg.clone()));
            }
        }
    }
    suite.finish();
}
