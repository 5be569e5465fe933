//! Fast checks of the command-line contract: exit codes, prerequisite
//! ordering, stage skipping and dataset determinism at a tiny scale.

use std::path::Path;
use std::process::{Command, Output};

fn crossview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossview"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

/// A config small enough that gen-data takes well under a second.
const TINY: &str = r#"{
    "schema_version": 1,
    "dataset": { "train_size": 6, "test_size": 2, "seed": 7 },
    "codec": { "model": { "base_channels": 4 },
               "train": { "epochs": 1, "batch_size": 4 } },
    "semantic": { "model": { "token_dim": 8, "base_channels": 2 },
                  "train": { "epochs": 1, "batch_size": 4 } },
    "diffusion": { "model": { "base_channels": 4, "token_dim": 8 },
                   "train": { "epochs": 1, "batch_size": 4, "t_count": 8 } },
    "sample": { "steps": 4 },
    "eval": { "extractor": { "base_channels": 2, "feature_dim": 8 },
              "extractor_train": { "epochs": 1, "batch_size": 4 } }
}"#;

#[test]
fn invalid_config_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{ "schema_version": 1, "dataset": { "train_size": 0, "test_size": 0 } }"#,
    );
    let out = crossview(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("data").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn unparseable_config_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "{ not json");
    let out = crossview(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("data").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn missing_prerequisites_exit_with_dependency_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write_config(tmp.path(), TINY);

    // training against a dataset that was never generated
    let out = crossview(&[
        "train",
        "--stage",
        "codec",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("codec").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("gen-data"),
        "error should tell the user what to run first: {out:?}"
    );

    // diffusion before its prerequisite stages
    let st = crossview(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(0), "{st:?}");
    let out = crossview(&[
        "train",
        "--stage",
        "diffusion",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("diffusion").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("train --stage"),
        "{out:?}"
    );

    // sampling before any diffusion checkpoint exists
    let out = crossview(&[
        "sample",
        "--ckpt",
        tmp.path().join("diffusion").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("gen").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn tiny_pipeline_runs_and_reruns_skip_completed_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();

    let out = crossview(&["gen-data", "--config", &cfg, "--out", &p("data")]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    for stage in ["codec", "semantic", "extractor"] {
        let out = crossview(&[
            "train", "--stage", stage, "--config", &cfg,
            "--data", &p("data"), "--out", &p(stage),
        ]);
        assert_eq!(out.status.code(), Some(0), "{stage}: {out:?}");
    }
    let out = crossview(&[
        "train", "--stage", "diffusion", "--config", &cfg,
        "--data", &p("data"), "--out", &p("diffusion"),
        "--codec", &p("codec"), "--semantic", &p("semantic"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");

    // rerunning a completed stage reports it as up to date
    let out = crossview(&[
        "train", "--stage", "codec", "--config", &cfg,
        "--data", &p("data"), "--out", &p("codec"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("up to date"),
        "{out:?}"
    );

    // sampling with an unknown sampler name is a validation error
    let out = crossview(&[
        "sample", "--ckpt", &p("diffusion"), "--data", &p("data"),
        "--out", &p("gen"), "--codec", &p("codec"), "--semantic", &p("semantic"),
        "--sampler", "euler", "--config", &cfg,
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    // a real sampling pass, then evaluation against exported ground truth
    let out = crossview(&[
        "sample", "--ckpt", &p("diffusion"), "--data", &p("data"),
        "--out", &p("gen"), "--codec", &p("codec"), "--semantic", &p("semantic"),
        "--config", &cfg,
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let out = crossview(&["export-gt", "--data", &p("data"), "--out", &p("gt")]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let out = crossview(&[
        "eval", "--gen", &p("gen"), "--gt", &p("gt"),
        "--extractor", &p("extractor"), "--semantic", &p("semantic"),
        "--out", &p("eval"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(tmp.path().join("eval/report.json").exists());
    assert!(tmp.path().join("eval/per_sample.csv").exists());

    // evaluating disjoint directories is a validation error
    let out = crossview(&[
        "eval", "--gen", &p("codec"), "--gt", &p("gt"),
        "--extractor", &p("extractor"), "--semantic", &p("semantic"),
        "--out", &p("eval2"),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    // ... but a changed training config retrains instead of skipping
    let bumped = TINY.replace(r#""train": { "epochs": 1, "batch_size": 4 } },
    "semantic""#, r#""train": { "epochs": 2, "batch_size": 4 } },
    "semantic""#);
    assert_ne!(bumped, TINY, "replacement must hit the codec section");
    let cfg2 = tmp.path().join("config2.json");
    std::fs::write(&cfg2, &bumped).unwrap();
    let out = crossview(&[
        "train", "--stage", "codec", "--config", cfg2.to_str().unwrap(),
        "--data", &p("data"), "--out", &p("codec"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(
        !String::from_utf8_lossy(&out.stderr).contains("up to date"),
        "changed epochs must retrain: {out:?}"
    );

    // a checkpoint trained against the old codec now fails hash validation
    let out = crossview(&[
        "sample", "--ckpt", &p("diffusion"), "--data", &p("data"),
        "--out", &p("gen2"), "--codec", &p("codec"), "--semantic", &p("semantic"),
        "--config", &cfg,
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("different codec"),
        "{out:?}"
    );
}

#[test]
fn dataset_generation_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    for out in ["a", "b"] {
        let st = crossview(&[
            "gen-data",
            "--config",
            &cfg,
            "--out",
            tmp.path().join(out).to_str().unwrap(),
        ]);
        assert_eq!(st.status.code(), Some(0), "{st:?}");
    }
    fn walk(dir: &Path, base: &Path, into: &mut Vec<String>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(&path, base, into);
            } else {
                into.push(
                    path.strip_prefix(base).unwrap().to_string_lossy().into_owned(),
                );
            }
        }
    }
    let list = |d: &str| {
        let mut names = Vec::new();
        walk(&tmp.path().join(d), &tmp.path().join(d), &mut names);
        names.sort();
        names
    };
    let names = list("a");
    assert_eq!(names, list("b"));
    assert!(!names.is_empty());
    for name in names {
        let a = std::fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}
