//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.txt          format, seed, config hash, split sizes and first ids
//! <dir>/config.txt            the dataset.* keys that produced the scenes
//! <dir>/<split>.images.f32    packed images, see below
//! <dir>/<split>.labels.txt    one record per object (scene_id class xmin ymin xmax ymax)
//! ```
//!
//! The image file starts with the 8 magic bytes `SSIMG001`, then four
//! little-endian u32 (`count`, `height`, `width`, `channels`), then
//! `count * height * width * channels` little-endian f32 values in scene
//! order, each image row-major with interleaved channels.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use semisup_core::datagen::{generate_benchmark, Benchmark, Scene};
use semisup_core::image::{Image, CHANNELS};
use semisup_core::metrics::LabelSet;
use semisup_core::records::{group_labels, labels_to_text, parse_records};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 8] = b"SSIMG001";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.dataset_text().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_images(images: &[&Image]) -> Vec<u8> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut out = Vec::with_capacity(24 + images.len() * h * w * CHANNELS * 4);
    out.extend_from_slice(MAGIC);
    for v in [images.len(), h, w, CHANNELS] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in images {
        for v in &img.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_images(bytes: &[u8]) -> CliResult<Vec<Image>> {
    let bad = |why: &str| CliError::Io(format!("corrupt image file: {why}"));
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(bad("missing header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, h, w, c) = (word(0), word(1), word(2), word(3));
    if c != CHANNELS {
        return Err(bad("unexpected channel count"));
    }
    let per = h * w * c;
    if bytes.len() != 24 + n * per * 4 {
        return Err(bad("length does not match header"));
    }
    let mut images = Vec::with_capacity(n);
    for k in 0..n {
        let start = 24 + k * per * 4;
        let data = bytes[start..start + per * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        images.push(Image { width: w, height: h, data });
    }
    Ok(images)
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn split_scenes<'a>(bench: &'a Benchmark, split: &str) -> &'a [Scene] {
    match split {
        "train" => &bench.train,
        "val" => &bench.val,
        _ => &bench.test,
    }
}

fn manifest_text(cfg: &ExperimentConfig, bench: &Benchmark) -> String {
    let mut s = String::from("format = semisup-dataset 1\n");
    s.push_str(&format!("seed = {}\n", cfg.data_seed));
    s.push_str(&format!("config_sha256 = {}\n", config_hash(cfg)));
    for split in SPLITS {
        let scenes = split_scenes(bench, split);
        s.push_str(&format!("{split}.count = {}\n", scenes.len()));
        s.push_str(&format!("{split}.first_id = {}\n", scenes.first().map_or(0, |sc| sc.id)));
    }
    s
}

/// Generates the benchmark described by `cfg` and writes it under `dir`.
pub fn write_dataset(cfg: &ExperimentConfig, dir: &Path) -> CliResult<Benchmark> {
    cfg.validate()?;
    let bench = generate_benchmark(&cfg.dataset, cfg.data_seed, cfg.sizes)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for split in SPLITS {
        let scenes = split_scenes(&bench, split);
        let images: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
        write(&dir.join(format!("{split}.images.f32")), &encode_images(&images))?;
        let labels = labels_to_text(scenes.iter().map(|s| (s.id, &s.labels)));
        write(&dir.join(format!("{split}.labels.txt")), labels.as_bytes())?;
    }
    write(&dir.join("config.txt"), cfg.dataset_text().as_bytes())?;
    write(&dir.join("manifest.txt"), manifest_text(cfg, &bench).as_bytes())?;
    Ok(bench)
}

fn manifest_value(manifest: &str, key: &str) -> Option<String> {
    manifest.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

/// Loads a dataset directory, checking that it was produced by `cfg`.
pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> CliResult<Benchmark> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Err(CliError::Io(format!("no dataset at {} (run `semisup generate` first)", dir.display())));
    }
    let manifest = String::from_utf8_lossy(&read(&manifest_path)?).into_owned();
    let want = config_hash(cfg);
    if manifest_value(&manifest, "config_sha256").as_deref() != Some(want.as_str()) {
        return Err(CliError::Config(format!(
            "dataset at {} was generated from a different dataset config",
            dir.display()
        )));
    }
    let mut parts = Vec::new();
    for split in SPLITS {
        let images = decode_images(&read(&dir.join(format!("{split}.images.f32")))?)?;
        let text = String::from_utf8_lossy(&read(&dir.join(format!("{split}.labels.txt")))?).into_owned();
        let labels = group_labels(&parse_records(&text)?);
        let first: u64 = manifest_value(&manifest, &format!("{split}.first_id"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Io(format!("manifest lacks {split}.first_id")))?;
        let scenes = images
            .into_iter()
            .enumerate()
            .map(|(k, image)| {
                let id = first + k as u64;
                Scene { id, image, labels: labels.get(&id).cloned().unwrap_or_else(LabelSet::empty) }
            })
            .collect();
        parts.push(scenes);
    }
    let test = parts.pop().expect("three splits");
    let val = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok(Benchmark { train, val, test })
}

/// Where `train` looks for the dataset.
pub fn dataset_dir(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    if cfg.data_dir.is_empty() {
        out.join("dataset")
    } else {
        PathBuf::from(&cfg.data_dir)
    }
}
