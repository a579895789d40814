//! Dataset loading: the seeded synthetic generator with a flat binary cache,
//! the CIFAR-10 binary reader, per-channel normalization, and the
//! train/validation split.
//!
//! All loaders produce values in `[0, 1]`; normalization is applied
//! afterwards from the run configuration and is invertible given it.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use bonsai_core::data::{split, synthetic, Augment, Dataset};
use bonsai_core::sched::{rng_for, STREAM_DATA, STREAM_SPLIT};

use crate::config::{AugmentConfig, DatasetConfig, RunConfig};
use crate::{runtime, CliResult};

pub const DATA_DIR_ENV: &str = "BONSAI_DATA_DIR";

const CACHE_MAGIC: &[u8; 5] = b"BNSD1";
const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Writes a dataset as a flat binary cache file: magic `BNSD1`, then
/// N, C, H, W as 32-bit little-endian, N label bytes, and the image values
/// as 32-bit little-endian floats.
pub fn write_cache(path: &Path, ds: &Dataset) -> CliResult<()> {
    let mut buf = Vec::with_capacity(21 + ds.len() + ds.len() * ds.sample_len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    for dim in [ds.len(), ds.channels, ds.height, ds.width] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&ds.labels);
    for img in &ds.images {
        for &v in img {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)
        .map_err(|e| runtime(format!("cannot create cache {}: {e}", path.display())))?;
    f.write_all(&buf)
        .map_err(|e| runtime(format!("cannot write cache {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_cache(path: &Path) -> CliResult<Dataset> {
    let buf = fs::read(path)
        .map_err(|e| runtime(format!("cannot read cache {}: {e}", path.display())))?;
    let bad = |why: &str| runtime(format!("bad cache {}: {why}", path.display()));
    if buf.len() < 21 || &buf[..5] != CACHE_MAGIC {
        return Err(bad("missing BNSD1 magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (n, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    let sample = c * h * w;
    let expect = 21 + n + n * sample * 4;
    if buf.len() != expect {
        return Err(bad("wrong file length for its header"));
    }
    let labels = buf[21..21 + n].to_vec();
    let mut images = Vec::with_capacity(n);
    let mut at = 21 + n;
    for _ in 0..n {
        let img: Vec<f64> = buf[at..at + sample * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        images.push(img);
        at += sample * 4;
    }
    Ok(Dataset {
        channels: c,
        height: h,
        width: w,
        images,
        labels,
    })
}

fn read_cifar_file(path: &Path, images: &mut Vec<Vec<f64>>, labels: &mut Vec<u8>) -> CliResult<()> {
    let mut f = fs::File::open(path)
        .map_err(|e| runtime(format!("missing CIFAR-10 file {}: {e}", path.display())))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
        return Err(runtime(format!(
            "{}: length {} is not a multiple of the {CIFAR_RECORD}-byte record",
            path.display(),
            buf.len()
        )));
    }
    for rec in buf.chunks_exact(CIFAR_RECORD) {
        let label = rec[0];
        if label >= 10 {
            return Err(runtime(format!(
                "{}: label byte {label} out of range",
                path.display()
            )));
        }
        labels.push(label);
        images.push(rec[1..=CIFAR_PIXELS].iter().map(|&b| b as f64 / 255.0).collect());
    }
    Ok(())
}

/// Reads the standard CIFAR-10 binary batches from `dir`: five training
/// files and one test file of 10000 records each (any whole number of
/// 3073-byte records is accepted per file). Returns (train, test) with
/// values scaled to `[0, 1]`.
pub fn load_cifar10(dir: &Path) -> CliResult<(Dataset, Dataset)> {
    let mut sets = Vec::with_capacity(2);
    for files in [
        &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
          "data_batch_4.bin", "data_batch_5.bin"][..],
        &["test_batch.bin"][..],
    ] {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for name in files {
            read_cifar_file(&dir.join(name), &mut images, &mut labels)?;
        }
        sets.push(Dataset {
            channels: 3,
            height: 32,
            width: 32,
            images,
            labels,
        });
    }
    let test = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok((train, test))
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

fn synthetic_pool(cfg: &RunConfig) -> CliResult<Dataset> {
    let DatasetConfig::Synthetic {
        classes,
        per_class,
        channels,
        height,
        width,
    } = cfg.dataset
    else {
        unreachable!("caller checked the dataset kind");
    };
    let cache = data_dir().map(|d| {
        d.join(format!(
            "synth-c{classes}-n{per_class}-{channels}x{height}x{width}-s{}.bnsd",
            cfg.seed
        ))
    });
    if let Some(path) = &cache {
        if path.is_file() {
            return read_cache(path);
        }
    }
    let mut rng = rng_for(cfg.seed, STREAM_DATA);
    let ds = synthetic(classes, per_class, channels, height, width, &mut rng);
    if let Some(path) = &cache {
        if fs::create_dir_all(path.parent().unwrap()).is_ok() {
            write_cache(path, &ds)?;
        }
    }
    Ok(ds)
}

/// In-place per-channel normalization `(v - mean) / std`.
fn normalize(ds: &mut Dataset, aug: &AugmentConfig) {
    if aug.mean.is_empty() {
        return;
    }
    let hw = ds.height * ds.width;
    for img in &mut ds.images {
        for ch in 0..ds.channels {
            let (m, s) = (aug.mean[ch], aug.std[ch]);
            for v in &mut img[ch * hw..(ch + 1) * hw] {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Loads the configured dataset, normalizes it, and splits off the
/// validation fraction. Everything is derived from the run seed.
pub fn load_train_val(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    let mut pool = match &cfg.dataset {
        DatasetConfig::Synthetic { .. } => synthetic_pool(cfg)?,
        DatasetConfig::Cifar10 { dir } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => data_dir()
                    .map(|d| d.join("cifar-10-batches-bin"))
                    .ok_or_else(|| {
                        runtime(format!(
                            "no CIFAR-10 directory configured and {DATA_DIR_ENV} is unset"
                        ))
                    })?,
            };
            load_cifar10(&dir)?.0
        }
    };
    normalize(&mut pool, &cfg.augment);
    let mut rng = rng_for(cfg.seed, STREAM_SPLIT);
    Ok(split(&pool, cfg.val_fraction, &mut rng))
}

pub fn augment_of(cfg: &RunConfig) -> Augment {
    Augment {
        pad: cfg.augment.random_crop_pad,
        flip: cfg.augment.horizontal_flip,
        cutout: cfg.augment.cutout_size,
    }
}
