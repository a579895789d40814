//! Synthetic image classification data and training-time augmentation.
//!
//! The generator draws small multi-channel images from three texture
//! families (oriented stripes, checkerboards, concentric rings) with
//! randomized frequency, phase, orientation, and additive noise, so the
//! classes are separable by shape statistics rather than by pixel lookup.
//! Values lie in `[0, 1]` and are rounded through `f32` at generation time
//! so an `f32`-typed cache file round-trips losslessly.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tensor::{Shape, Tensor};

/// In-memory dataset: one flat `channels*height*width` image per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

const TAU: f64 = 6.283185307179586;

/// Draws `classes * per_class` images. Class `c % 3` picks the texture
/// family; higher class indices shift the frequency band so more than three
/// classes stay separable.
pub fn synthetic(
    classes: usize,
    per_class: usize,
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let band = 1.5 + (class / 3) as f64 * 0.8;
        for _ in 0..per_class {
            let freq = TAU * (band + rng.gen::<f64>()) / width as f64;
            let phase = TAU * rng.gen::<f64>();
            let theta = TAU / 8.0 * rng.gen_range(0..4) as f64;
            let (cos_t, sin_t) = (fmath::cos(theta), fmath::sin(theta));
            let cy = height as f64 * (0.3 + 0.4 * rng.gen::<f64>());
            let cx = width as f64 * (0.3 + 0.4 * rng.gen::<f64>());
            let mut img = vec![0.0; channels * height * width];
            for ch in 0..channels {
                // channels share structure but differ in phase, like color planes
                let ch_phase = phase + ch as f64 * 0.7;
                for y in 0..height {
                    for x in 0..width {
                        let (xf, yf) = (x as f64, y as f64);
                        let v = match class % 3 {
                            0 => fmath::sin(freq * (xf * cos_t + yf * sin_t) + ch_phase),
                            1 => {
                                let a = fmath::sin(freq * xf + ch_phase);
                                let b = fmath::sin(freq * yf + ch_phase * 0.5);
                                // sharpened product reads as a checkerboard
                                let p = a * b;
                                let mag = fmath::sqrt(fmath::abs(p));
                                if p > 0.0 {
                                    mag
                                } else {
                                    -mag
                                }
                            }
                            _ => {
                                let dy = yf - cy;
                                let dx = xf - cx;
                                fmath::sin(freq * fmath::sqrt(dy * dy + dx * dx) + ch_phase)
                            }
                        };
                        let noise = 0.3 * (rng.gen::<f64>() * 2.0 - 1.0);
                        // map the signed texture (wave in [-1, 1] plus noise in
                        // [-0.3, 0.3]) into [0, 1] with headroom so nothing clips
                        img[(ch * height + y) * width + x] =
                            f32_round(0.5 + (v + noise) * 0.3125);
                    }
                }
            }
            images.push(img);
            labels.push(class as u8);
        }
    }
    Dataset {
        channels,
        height,
        width,
        images,
        labels,
    }
}

/// Stratified split: for each class, `val_frac` of its samples (rounded
/// down, at least one when the class has two) go to validation.
pub fn split(ds: &Dataset, val_frac: f64, rng: &mut ChaCha8Rng) -> (Dataset, Dataset) {
    let classes = ds.labels.iter().map(|&l| l as usize).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for idxs in &mut by_class {
        // Fisher-Yates keeps the split deterministic under the caller's rng
        for i in (1..idxs.len()).rev() {
            let j = rng.gen_range(0..=i);
            idxs.swap(i, j);
        }
        let n_val = ((idxs.len() as f64) * val_frac) as usize;
        let n_val = n_val.min(idxs.len().saturating_sub(1)).max(usize::from(idxs.len() >= 2));
        val_idx.extend_from_slice(&idxs[..n_val]);
        train_idx.extend_from_slice(&idxs[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let take = |idxs: &[usize]| Dataset {
        channels: ds.channels,
        height: ds.height,
        width: ds.width,
        images: idxs.iter().map(|&i| ds.images[i].clone()).collect(),
        labels: idxs.iter().map(|&i| ds.labels[i]).collect(),
    };
    (take(&train_idx), take(&val_idx))
}

/// Training-time augmentation: zero-pad then random crop, horizontal flip,
/// and square cutout. Any field at zero disables that stage.
#[derive(Debug, Clone, Copy)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
    pub cutout: usize,
}

impl Augment {
    pub fn none() -> Augment {
        Augment {
            pad: 0,
            flip: false,
            cutout: 0,
        }
    }
}

fn augment_into(
    out: &mut [f64],
    src: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    aug: &Augment,
    rng: &mut ChaCha8Rng,
) {
    let (dy, dx) = if aug.pad > 0 {
        (
            rng.gen_range(0..=2 * aug.pad) as isize - aug.pad as isize,
            rng.gen_range(0..=2 * aug.pad) as isize - aug.pad as isize,
        )
    } else {
        (0, 0)
    };
    let flip = aug.flip && rng.gen::<bool>();
    for ch in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let sx = if flip { width - 1 - x } else { x };
                let sy = y as isize + dy;
                let sx = sx as isize + dx;
                let v = if sy >= 0 && sy < height as isize && sx >= 0 && sx < width as isize {
                    src[(ch * height + sy as usize) * width + sx as usize]
                } else {
                    0.0
                };
                out[(ch * height + y) * width + x] = v;
            }
        }
    }
    if aug.cutout > 0 {
        let cy = rng.gen_range(0..height) as isize;
        let cx = rng.gen_range(0..width) as isize;
        let half = aug.cutout as isize / 2;
        let y0 = (cy - half).max(0) as usize;
        let y1 = ((cy - half + aug.cutout as isize).max(0) as usize).min(height);
        let x0 = (cx - half).max(0) as usize;
        let x1 = ((cx - half + aug.cutout as isize).max(0) as usize).min(width);
        for ch in 0..channels {
            for y in y0..y1 {
                for x in x0..x1 {
                    out[(ch * height + y) * width + x] = 0.0;
                }
            }
        }
    }
}

/// Assembles an NCHW batch from dataset rows, augmenting when `aug` is set.
pub fn make_batch(
    ds: &Dataset,
    idxs: &[usize],
    aug: Option<(&Augment, &mut ChaCha8Rng)>,
) -> Result<(Tensor, Vec<u8>)> {
    if idxs.is_empty() {
        return Err(CoreError::Invalid("empty batch".into()));
    }
    let sample = ds.sample_len();
    let mut data = vec![0.0; idxs.len() * sample];
    let mut labels = Vec::with_capacity(idxs.len());
    match aug {
        Some((a, rng)) => {
            for (row, &i) in idxs.iter().enumerate() {
                augment_into(
                    &mut data[row * sample..(row + 1) * sample],
                    &ds.images[i],
                    ds.channels,
                    ds.height,
                    ds.width,
                    a,
                    rng,
                );
                labels.push(ds.labels[i]);
            }
        }
        None => {
            for (row, &i) in idxs.iter().enumerate() {
                data[row * sample..(row + 1) * sample].copy_from_slice(&ds.images[i]);
                labels.push(ds.labels[i]);
            }
        }
    }
    let t = Tensor::from_vec(
        Shape(vec![idxs.len(), ds.channels, ds.height, ds.width]),
        data,
    )?;
    Ok((t, labels))
}

/// In-place Fisher-Yates shuffle of an index list.
pub fn shuffle(idxs: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idxs.len()).rev() {
        let j = rng.gen_range(0..=i);
        idxs.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn gen(seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synthetic(3, 10, 3, 12, 12, &mut rng)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen(5);
        let b = gen(5);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = gen(6);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn values_survive_f32_round_trip_and_stay_in_unit_interval() {
        let ds = gen(1);
        for img in &ds.images {
            for &v in img {
                assert_eq!(v, v as f32 as f64);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn labels_are_balanced() {
        let ds = gen(2);
        for class in 0..3u8 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == class).count(), 10);
        }
    }

    #[test]
    fn split_is_stratified() {
        let ds = gen(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (train, val) = split(&ds, 0.2, &mut rng);
        assert_eq!(train.len() + val.len(), 30);
        for class in 0..3u8 {
            assert_eq!(val.labels.iter().filter(|&&l| l == class).count(), 2);
            assert_eq!(train.labels.iter().filter(|&&l| l == class).count(), 8);
        }
    }

    #[test]
    fn batch_shapes_and_labels() {
        let ds = gen(4);
        let (t, labels) = make_batch(&ds, &[0, 10, 20], None).unwrap();
        assert_eq!(t.shape, Shape(vec![3, 3, 12, 12]));
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn cutout_zeroes_a_square() {
        let ds = gen(7);
        let aug = Augment {
            pad: 0,
            flip: false,
            cutout: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, _) = make_batch(&ds, &[0], Some((&aug, &mut rng))).unwrap();
        let zeros = t.data.iter().filter(|&&v| v == 0.0).count();
        // at least a clipped-corner cutout across all three channels
        assert!(zeros >= 3 * 3 * 3, "{zeros}");
    }

    #[test]
    fn pad_crop_keeps_shape_and_shifts() {
        let ds = gen(8);
        let aug = Augment {
            pad: 4,
            flip: false,
            cutout: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, _) = make_batch(&ds, &[0], Some((&aug, &mut rng))).unwrap();
        assert_eq!(t.shape, Shape(vec![1, 3, 12, 12]));
    }

    #[test]
    fn flip_reverses_rows() {
        let ds = gen(9);
        let aug = Augment {
            pad: 0,
            flip: true,
            cutout: 0,
        };
        // run until both flip outcomes observed
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_flipped = false;
        let mut saw_plain = false;
        for _ in 0..32 {
            let (t, _) = make_batch(&ds, &[0], Some((&aug, &mut rng))).unwrap();
            let w = ds.width;
            let orig = &ds.images[0][..w];
            let got = &t.data[..w];
            let flipped: Vec<f64> = orig.iter().rev().copied().collect();
            if got == &flipped[..] {
                saw_flipped = true;
            }
            if got == orig {
                saw_plain = true;
            }
        }
        assert!(saw_flipped && saw_plain);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut idxs: Vec<usize> = (0..50).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        shuffle(&mut idxs, &mut rng);
        let mut sorted = idxs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(idxs, (0..50).collect::<Vec<_>>());
    }
}
