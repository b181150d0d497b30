//! Synthetic three-class toy dataset generator.
//!
//! Each class is a bright Gaussian opacity at a class-specific location
//! inside the frame, over a noisy background. The opacity's support is
//! written out as the sample's ground-truth mask. Optionally a bright
//! text-like stamp is burned into a corner of one class's images,
//! emulating class-correlated external annotations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::image_io::write_gray_png;
use super::{Split, CLASS_NAMES};

/// Corner stamp burned into one class's images.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StampSpec {
    /// Class whose images receive the stamp.
    pub class: usize,
    /// Per-image probability of stamping.
    pub probability: f64,
    /// Stamp brightness in `[0,1]`.
    pub intensity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Square image side.
    pub size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Uniform background noise amplitude.
    pub noise: f64,
    /// Peak opacity added by the class blob.
    pub blob_amplitude: f64,
    /// Amplitude of the class-coded pixel dither, a perfectly
    /// discriminative but low-contrast signature that a small max-norm
    /// perturbation can erase. Zero disables it.
    pub fragile_amplitude: f64,
    pub stamp: Option<StampSpec>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 32,
            train_per_class: 60,
            val_per_class: 12,
            test_per_class: 20,
            noise: 0.2,
            blob_amplitude: 0.3,
            fragile_amplitude: 0.05,
            stamp: None,
            seed: 0,
        }
    }
}

/// Fixed region the stamp occupies: `(x, y, width, height)` near the
/// top-left corner.
pub fn stamp_rect(size: usize) -> (usize, usize, usize, usize) {
    (2, 2, (size / 3).max(4), (size / 6).max(3))
}

/// Text-like pattern inside the stamp rect: bright bars with gaps.
pub fn stamp_pattern(xx: usize, yy: usize) -> bool {
    yy % 3 != 2 && xx % 5 != 4
}

/// Deterministic per-class dither sign at one pixel.
fn dither_sign(class: usize, x: usize, y: usize, size: usize) -> f64 {
    let mut z = (class as u64 + 1)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((y * size + x) as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    if (z ^ (z >> 31)) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn blob_center(class: usize, size: usize) -> (f64, f64) {
    let s = size as f64;
    match class {
        0 => (0.30 * s, 0.35 * s),
        1 => (0.70 * s, 0.35 * s),
        _ => (0.50 * s, 0.72 * s),
    }
}

/// Generate the dataset under `dir` and return the manifest path.
pub fn generate(dir: &Path, config: &SynthConfig) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&masks_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.size;
    let mut rows = vec!["path,label,split,mask_path".to_string()];

    for (split, count) in [
        (Split::Train, config.train_per_class),
        (Split::Val, config.val_per_class),
        (Split::Test, config.test_per_class),
    ] {
        for class in 0..3usize {
            for i in 0..count {
                let (image, mask) = render(config, class, &mut rng);
                let name = format!("{split}_{}_{i:04}.png", CLASS_NAMES[class]);
                write_gray_png(&images_dir.join(&name), &image, size, size)?;
                write_gray_png(&masks_dir.join(&name), &mask, size, size)?;
                rows.push(format!(
                    "images/{name},{},{split},masks/{name}",
                    CLASS_NAMES[class]
                ));
            }
        }
    }

    let manifest = dir.join("manifest.csv");
    fs::write(&manifest, rows.join("\n") + "\n")?;
    Ok(manifest)
}

fn render(config: &SynthConfig, class: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let size = config.size;
    let s = size as f64;
    let (base_cx, base_cy) = blob_center(class, size);
    let jitter = 0.04 * s;
    let cx = base_cx + rng.gen_range(-jitter..jitter);
    let cy = base_cy + rng.gen_range(-jitter..jitter);
    let sigma = 0.12 * s * rng.gen_range(0.9..1.1);
    let amplitude = config.blob_amplitude * rng.gen_range(0.85..1.15);

    let stamped = match (&config.stamp, class) {
        (Some(spec), c) if c == spec.class => rng.gen_bool(spec.probability),
        _ => false,
    };

    let mut image = vec![0u8; size * size];
    let mut mask = vec![0u8; size * size];
    let mask_radius = 1.2 * sigma;
    let (sx, sy, sw, sh) = stamp_rect(size);

    for y in 0..size {
        for x in 0..size {
            let mut v = 0.08 + rng.gen_range(0.0..config.noise);
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            v += amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
            v += config.fragile_amplitude * dither_sign(class, x, y, size);
            if stamped
                && x >= sx
                && x < sx + sw
                && y >= sy
                && y < sy + sh
                && stamp_pattern(x - sx, y - sy)
            {
                v = config.stamp.as_ref().map_or(v, |spec| spec.intensity);
            }
            image[y * size + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            if d2.sqrt() <= mask_radius {
                mask[y * size + x] = 255;
            }
        }
    }
    (image, mask)
}
