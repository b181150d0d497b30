//! Stochastic affine augmentation: flips, zoom, rotation, shifts, and
//! shear composed into a single warp per sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{affine_sample_forward, AffineMap, SampleMode};
use crate::tensor::Tensor;

use super::Sample;

/// Augmentation ranges. Defaults follow the standard chest X-ray recipe:
/// rescale 1/255, both flips, zoom 0.8..1.2, rotation 0..180 degrees,
/// shifts within 20% of the image extent, shear within 10 degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub rescale: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub zoom_range: [f64; 2],
    /// Degrees; the rotation is drawn uniformly from this interval.
    pub rotation_range: [f64; 2],
    /// Fraction of width; shifts are drawn from `[-w, +w]`.
    pub width_shift: f64,
    /// Fraction of height; shifts are drawn from `[-h, +h]`.
    pub height_shift: f64,
    /// Degrees; x-axis shear drawn from `[-s, +s]`.
    pub shear_degrees: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rescale: 1.0 / 255.0,
            horizontal_flip: true,
            vertical_flip: true,
            zoom_range: [0.8, 1.2],
            rotation_range: [0.0, 180.0],
            width_shift: 0.2,
            height_shift: 0.2,
            shear_degrees: 10.0,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// All ranges collapsed so the drawn transform is always the identity.
    pub fn identity(rescale: f64) -> Self {
        AugmentationConfig {
            rescale,
            horizontal_flip: false,
            vertical_flip: false,
            zoom_range: [1.0, 1.0],
            rotation_range: [0.0, 0.0],
            width_shift: 0.0,
            height_shift: 0.0,
            shear_degrees: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rescale <= 0.0 {
            return Err(Error::Config(format!("rescale must be positive, got {}", self.rescale)));
        }
        if self.zoom_range[0] > self.zoom_range[1] || self.zoom_range[0] <= 0.0 {
            return Err(Error::Config(format!("bad zoom range {:?}", self.zoom_range)));
        }
        if self.rotation_range[0] > self.rotation_range[1] {
            return Err(Error::Config(format!("bad rotation range {:?}", self.rotation_range)));
        }
        if self.width_shift < 0.0 || self.height_shift < 0.0 || self.shear_degrees < 0.0 {
            return Err(Error::Config("shift/shear ranges must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parameters drawn for one sample's warp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrawnTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub zoom: f64,
    pub rotation_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub shear_deg: f64,
}

impl DrawnTransform {
    pub const IDENTITY: DrawnTransform = DrawnTransform {
        hflip: false,
        vflip: false,
        zoom: 1.0,
        rotation_deg: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
        shear_deg: 0.0,
    };

    fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Draw flip/zoom/rotation/shift/shear parameters independently. The draw
/// order is fixed so a given RNG stream always produces the same transform.
pub fn draw_transform<R: Rng>(config: &AugmentationConfig, size: (usize, usize), rng: &mut R) -> DrawnTransform {
    let (h, w) = size;
    let hflip = config.horizontal_flip && rng.gen_bool(0.5);
    let vflip = config.vertical_flip && rng.gen_bool(0.5);
    let zoom = draw_range(rng, config.zoom_range[0], config.zoom_range[1]);
    let rotation_deg = draw_range(rng, config.rotation_range[0], config.rotation_range[1]);
    let shift_x = draw_range(rng, -config.width_shift, config.width_shift) * w as f64;
    let shift_y = draw_range(rng, -config.height_shift, config.height_shift) * h as f64;
    let shear_deg = draw_range(rng, -config.shear_degrees, config.shear_degrees);
    DrawnTransform { hflip, vflip, zoom, rotation_deg, shift_x, shift_y, shear_deg }
}

fn draw_range<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Build the forward geometry for a plane of the given size: about the
/// image center, flips first, then zoom, shear, rotation, and finally the
/// translation. Returns the pull map (output to source) for sampling.
pub fn pull_map(t: &DrawnTransform, size: (usize, usize)) -> AffineMap {
    let (h, w) = size;
    let cx = (w - 1) as f64 / 2.0;
    let cy = (h - 1) as f64 / 2.0;

    let mut forward = AffineMap::identity();
    if t.hflip {
        forward = AffineMap { m: [-1.0, 0.0, 0.0, 0.0, 1.0, 0.0] }.compose(&forward);
    }
    if t.vflip {
        forward = AffineMap { m: [1.0, 0.0, 0.0, 0.0, -1.0, 0.0] }.compose(&forward);
    }
    forward = AffineMap::scale(t.zoom, t.zoom).compose(&forward);
    forward = AffineMap::shear_x_deg(t.shear_deg).compose(&forward);
    forward = AffineMap::rotate_deg(t.rotation_deg).compose(&forward);
    let centered = AffineMap::translate(cx + t.shift_x, cy + t.shift_y)
        .compose(&forward)
        .compose(&AffineMap::translate(-cx, -cy));

    // A degenerate draw falls back to the identity rather than erroring.
    centered.invert().unwrap_or_else(AffineMap::identity)
}

/// Apply one drawn affine transform to a sample: bilinear with zero fill
/// for the image, nearest-neighbor for the mask so it stays binary. Shape
/// and label are untouched.
pub fn augment_with<T: Scalar>(sample: &Sample<T>, transform: &DrawnTransform) -> Sample<T> {
    if transform.is_identity() {
        return sample.clone();
    }
    let shape = sample.image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let map = pull_map(transform, (h, w));

    let warped = affine_sample_forward(sample.image.data(), &shape, &map, SampleMode::Bilinear);
    // zero-fill bilinear keeps values inside the hull of {0} and the inputs;
    // clamp away the last-ulp overshoot
    let clamped: Vec<T> = warped
        .into_iter()
        .map(|v| v.max(T::zero()).min(T::one()))
        .collect();
    let image = Tensor::new(shape, clamped).expect("warp preserves shape");

    let mask = sample.mask.as_ref().map(|m| {
        let data = affine_sample_forward(m.data(), m.shape(), &map, SampleMode::Nearest);
        Tensor::new(m.shape().to_vec(), data).expect("warp preserves shape")
    });

    Sample { image, class: sample.class, mask }
}

/// Draw a transform from `rng` and apply it.
pub fn augment<T: Scalar, R: Rng>(sample: &Sample<T>, config: &AugmentationConfig, rng: &mut R) -> Sample<T> {
    let shape = sample.image.shape();
    let t = draw_transform(config, (shape[1], shape[2]), rng);
    augment_with(sample, &t)
}
