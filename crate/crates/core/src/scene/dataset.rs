//! On-disk dataset layout:
//! `<dir>/<id>/{aerial.png, ground.png, height.pfm, meta.json}` plus a
//! top-level `manifest.json` with ids and the train/test split.

use super::{
    AerialImage, GroundCamera, GroundView, HeightMap, Normalization, PairedSample, SceneError,
};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub ids: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub scene_seed: u64,
    pub camera: GroundCamera,
    pub normalization: Normalization,
    pub config_hash: String,
}

fn fmt_err(sample: &str, field: &str, msg: impl ToString) -> SceneError {
    SceneError::Format {
        sample: sample.to_string(),
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

pub fn save_png(img: &Array3<f32>, path: &Path) -> Result<(), SceneError> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert_eq!(c, 3);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                (img[[i, j, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[i, j, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[i, j, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| fmt_err(&path.display().to_string(), "png", e))
}

pub fn load_png(path: &Path) -> Result<Array3<f32>, SceneError> {
    let img = image::open(path)
        .map_err(|e| fmt_err(&path.display().to_string(), "png", e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let px = img.get_pixel(j as u32, i as u32);
            for c in 0..3 {
                out[[i, j, c]] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Single-channel little-endian Portable FloatMap. PFM scanlines run
/// bottom-to-top.
pub fn save_pfm(values: &Array2<f32>, path: &Path) -> Result<(), SceneError> {
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let mut f = std::fs::File::create(path)?;
    write!(f, "Pf\n{w} {h}\n-1.0\n")?;
    for i in (0..h).rev() {
        for j in 0..w {
            f.write_f32::<LittleEndian>(values[[i, j]])?;
        }
    }
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<Array2<f32>, SceneError> {
    let name = path.display().to_string();
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "Pf" {
        return Err(fmt_err(&name, "pfm", "expected single-channel `Pf` header"));
    }
    line.clear();
    r.read_line(&mut line)?;
    let dims: Vec<usize> = line
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|e| fmt_err(&name, "pfm", format!("bad dimensions: {e}")))?;
    if dims.len() != 2 {
        return Err(fmt_err(&name, "pfm", "expected `<w> <h>`"));
    }
    let (w, h) = (dims[0], dims[1]);
    line.clear();
    r.read_line(&mut line)?;
    let scale: f32 = line
        .trim()
        .parse()
        .map_err(|e| fmt_err(&name, "pfm", format!("bad scale: {e}")))?;
    if scale >= 0.0 {
        return Err(fmt_err(&name, "pfm", "big-endian PFM not supported"));
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for i in (0..h).rev() {
        for j in 0..w {
            out[[i, j]] = r.read_f32::<LittleEndian>()?;
        }
    }
    Ok(out)
}

/// Write samples and the manifest. Lossless for height maps, 8-bit
/// quantized for images.
pub fn write_dataset(
    samples: &[PairedSample],
    dir: &Path,
    manifest: &DatasetManifest,
) -> Result<(), SceneError> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        let sdir = dir.join(&s.id);
        std::fs::create_dir_all(&sdir)?;
        save_png(&s.aerial.pixels, &sdir.join("aerial.png"))?;
        save_png(&s.ground.pixels, &sdir.join("ground.png"))?;
        save_pfm(&s.height.values, &sdir.join("height.pfm"))?;
        let meta = SampleMeta {
            scene_seed: s.scene_seed,
            camera: s.ground.camera,
            normalization: s.height.normalization,
            config_hash: manifest.config_hash.clone(),
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| fmt_err(&s.id, "meta.json", e))?;
        std::fs::write(sdir.join("meta.json"), json)?;
    }
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| fmt_err("manifest", "manifest.json", e))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Option<DatasetManifest>, SceneError> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let mut buf = String::new();
    std::fs::File::open(&path)?.read_to_string(&mut buf)?;
    let manifest = serde_json::from_str(&buf)
        .map_err(|e| fmt_err("manifest", "manifest.json", e))?;
    Ok(Some(manifest))
}

pub fn read_sample(dir: &Path, id: &str) -> Result<PairedSample, SceneError> {
    let sdir = dir.join(id);
    let check = |file: &str| -> Result<std::path::PathBuf, SceneError> {
        let p = sdir.join(file);
        if !p.exists() {
            return Err(fmt_err(id, file, "missing file"));
        }
        Ok(p)
    };
    let aerial = load_png(&check("aerial.png")?)?;
    let ground = load_png(&check("ground.png")?)?;
    let height = load_pfm(&check("height.pfm")?)?;
    let meta_raw = std::fs::read_to_string(check("meta.json")?)?;
    let meta: SampleMeta =
        serde_json::from_str(&meta_raw).map_err(|e| fmt_err(id, "meta.json", e))?;

    if aerial.shape()[0] != aerial.shape()[1] {
        return Err(fmt_err(id, "aerial.png", "aerial image must be square"));
    }
    if height.shape() != [aerial.shape()[0], aerial.shape()[1]] {
        return Err(fmt_err(id, "height.pfm", "height/aerial size mismatch"));
    }
    if height.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(fmt_err(id, "height.pfm", "negative or non-finite height"));
    }
    if meta.normalization == Normalization::UnitScaled && height.iter().any(|&v| v > 1.0) {
        return Err(fmt_err(id, "height.pfm", "unit-scaled height exceeds 1"));
    }
    Ok(PairedSample {
        id: id.to_string(),
        aerial: AerialImage { pixels: aerial },
        height: HeightMap {
            values: height,
            normalization: meta.normalization,
        },
        ground: GroundView {
            pixels: ground,
            camera: meta.camera,
        },
        scene_seed: meta.scene_seed,
    })
}

/// Read every sample listed in the manifest; an empty or manifest-less
/// directory yields an empty list.
pub fn read_dataset(dir: &Path) -> Result<(Vec<PairedSample>, DatasetManifest), SceneError> {
    let Some(manifest) = read_manifest(dir)? else {
        return Ok((Vec::new(), DatasetManifest::default()));
    };
    let mut samples = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        samples.push(read_sample(dir, id)?);
    }
    Ok((samples, manifest))
}
