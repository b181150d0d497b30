//! 8-bit grayscale image decode/encode and resizing.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

use super::{DatasetManifest, ManifestRecord, Sample};

fn image_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image { path: path.display().to_string(), detail: detail.into() }
}

/// Decode an 8-bit grayscale PNG or binary PGM into raw bytes plus size.
pub fn read_gray(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| image_err(path, e.to_string()))?;
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Ok((buf.into_raw(), h, w))
        }
        other => Err(image_err(
            path,
            format!("expected 8-bit grayscale, got {:?}", other.color()),
        )),
    }
}

/// Decode, bilinear-resize to `target` (height, width), and scale by
/// `rescale` (1/255 maps into `[0,1]`). Returns a `1 x H x W` tensor.
pub fn decode_image_rescaled<T: Scalar>(
    path: &Path,
    target: (usize, usize),
    rescale: f64,
) -> Result<Tensor<T>> {
    let (raw, h, w) = read_gray(path)?;
    let plane: Vec<T> = raw.iter().map(|&v| T::from_f64(f64::from(v))).collect();
    let resized = kernels::resize_bilinear(&plane, h, w, target.0, target.1);
    let scale = T::from_f64(rescale);
    let data: Vec<T> = resized.into_iter().map(|v| v * scale).collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite(format!("decoded image {}", path.display())));
    }
    Tensor::new(vec![1, target.0, target.1], data)
}

/// Decode with the standard 1/255 rescale into `[0,1]`.
pub fn decode_image<T: Scalar>(path: &Path, target: (usize, usize)) -> Result<Tensor<T>> {
    decode_image_rescaled(path, target, 1.0 / 255.0)
}

/// Decode a binary mask: nearest-neighbor resize, then threshold at 128.
/// Returns an `H x W` tensor of zeros and ones.
pub fn decode_mask<T: Scalar>(path: &Path, target: (usize, usize)) -> Result<Tensor<T>> {
    let (raw, h, w) = read_gray(path)?;
    let resized = resize_nearest(&raw, h, w, target.0, target.1);
    let data = resized
        .into_iter()
        .map(|v| if v >= 128 { T::one() } else { T::zero() })
        .collect();
    Tensor::new(vec![target.0, target.1], data)
}

/// Nearest-neighbor resize with the same half-pixel-center convention as
/// the bilinear path.
pub fn resize_nearest(plane: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let mut out = vec![0u8; out_h * out_w];
    let sy_scale = h as f64 / out_h as f64;
    let sx_scale = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * sy_scale - 0.5).round().clamp(0.0, (h - 1) as f64) as usize;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * sx_scale - 0.5).round().clamp(0.0, (w - 1) as f64) as usize;
            out[oy * out_w + ox] = plane[sy * w + sx];
        }
    }
    out
}

/// Load a manifest record as a [`Sample`]: image rescaled into range, mask
/// decoded when present.
pub fn load_sample<T: Scalar>(
    manifest: &DatasetManifest,
    record: &ManifestRecord,
    target: (usize, usize),
    rescale: f64,
) -> Result<Sample<T>> {
    let image = decode_image_rescaled(&manifest.image_path(record), target, rescale)?;
    let mask = match manifest.mask_path(record) {
        Some(path) => Some(decode_mask(&path, target)?),
        None => None,
    };
    let sample = Sample { image, class: record.label, mask };
    sample.validate()?;
    Ok(sample)
}

/// Quantize a `[0,1]` plane to 8-bit.
pub fn to_u8_plane<T: Scalar>(data: &[T]) -> Vec<u8> {
    data.iter()
        .map(|v| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Write an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, data.to_vec())
        .ok_or_else(|| image_err(path, "buffer size does not match dimensions"))?;
    buf.save(path).map_err(|e| image_err(path, e.to_string()))
}

/// Write an interleaved RGB8 PNG.
pub fn write_rgb_png(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, data.to_vec())
        .ok_or_else(|| image_err(path, "buffer size does not match dimensions"))?;
    buf.save(path).map_err(|e| image_err(path, e.to_string()))
}

/// Encode a grayscale PNG into bytes without touching the filesystem.
pub fn encode_gray_png(data: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, data.to_vec())
        .ok_or_else(|| Error::Image { path: "<memory>".into(), detail: "buffer size mismatch".into() })?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: "<memory>".into(), detail: e.to_string() })?;
    Ok(out.into_inner())
}
