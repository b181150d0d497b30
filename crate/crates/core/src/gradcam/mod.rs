//! Gradient-weighted class activation heatmaps, colored overlays, and
//! quantitative coherence scoring against ground-truth masks.
//!
//! For an explained class `c` and a conv layer's activations `A^k`, the
//! channel weights are the spatial means of `d logit_c / d A^k`; the raw
//! map is `relu(sum_k alpha_k A^k)`, bilinearly upsampled to input size
//! and min-max normalized to `[0,1]`.

mod jet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{bind_params, forward, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Graph, Tensor};

pub use jet::JET;

/// Overlay blend weight for the colormap layer.
pub const OVERLAY_ALPHA: f64 = 0.4;
/// Default top-quantile fraction for containment scoring.
pub const TOP_Q: f64 = 0.2;

/// A per-image saliency map for one class, tapped at one conv layer.
#[derive(Clone, Debug)]
pub struct Heatmap<T> {
    /// Saliency at feature-map resolution, post-ReLU, unnormalized.
    pub coarse: Tensor<T>,
    /// Upsampled to input size and min-max normalized into `[0,1]`.
    pub map: Tensor<T>,
    /// The explained class.
    pub class: usize,
    /// Config index of the tapped conv layer.
    pub layer: usize,
    /// Set when the raw map was identically zero (zero gradients or all
    /// activations rectified away); `map` is all zeros then.
    pub zero_map: bool,
}

/// Compute the heatmap for `image` (`C x H x W`) explaining `class`, tapped
/// at the conv layer with config index `layer`.
pub fn gradcam<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    image: &Tensor<T>,
    class: usize,
    layer: usize,
) -> Result<Heatmap<T>> {
    if class >= config.num_classes {
        return Err(Error::Config(format!(
            "class {class} out of range for {} classes",
            config.num_classes
        )));
    }
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::shape("gradcam", format!("image must be C x H x W, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let batch = Tensor::new(vec![1, shape[0], h, w], image.data().to_vec())?;

    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params, false);
    // The input requires grad so the whole forward chain is recorded and
    // the tapped activation receives a gradient buffer.
    let input = graph.leaf(batch.with_requires_grad());
    let out = forward(&mut graph, config, &bound, input)?;

    let tap = out
        .conv_outputs
        .iter()
        .find(|(idx, _)| *idx == layer)
        .map(|(_, id)| *id)
        .ok_or_else(|| {
            let names: Vec<String> = config.conv_layer_names().iter().map(|(n, _)| n.clone()).collect();
            Error::Config(format!(
                "layer {layer} is not a conv layer; conv layers: {}",
                names.join(", ")
            ))
        })?;

    // Select the class logit as a scalar: mask, multiply, sum.
    let k = config.num_classes;
    let mut onehot = vec![T::zero(); k];
    onehot[class] = T::one();
    let mask = graph.constant(Tensor::new(vec![1, k], onehot)?);
    let picked = graph.mul(out.logits, mask)?;
    let root = graph.sum(picked)?;
    graph.backward(root)?;

    let activations = graph.tensor(tap);
    let grads = graph
        .grad(tap)
        .ok_or_else(|| Error::non_finite("missing activation gradient"))?;
    let tap_shape = activations.shape();
    let (channels, fh, fw) = (tap_shape[1], tap_shape[2], tap_shape[3]);
    let plane = fh * fw;

    // alpha_k: spatial mean of the gradient per channel.
    let inv_plane = T::from_f64(1.0 / plane as f64);
    let mut raw = vec![T::zero(); plane];
    for c in 0..channels {
        let offset = c * plane;
        let alpha = grads[offset..offset + plane].iter().cloned().sum::<T>() * inv_plane;
        for p in 0..plane {
            raw[p] = raw[p] + alpha * activations.data()[offset + p];
        }
    }
    for v in raw.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }

    let upsampled = kernels::resize_bilinear(&raw, fh, fw, h, w);
    let (map, zero_map) = normalize_minmax(upsampled);

    Ok(Heatmap {
        coarse: Tensor::new(vec![fh, fw], raw)?,
        map: Tensor::new(vec![h, w], map)?,
        class,
        layer,
        zero_map,
    })
}

/// Min-max normalize into `[0,1]`. An identically-zero map stays zero and
/// is flagged; a constant positive map normalizes to all ones.
fn normalize_minmax<T: Scalar>(values: Vec<T>) -> (Vec<T>, bool) {
    let mx = values.iter().cloned().fold(T::neg_infinity(), T::max);
    let mn = values.iter().cloned().fold(T::infinity(), T::min);
    if mx <= T::zero() {
        return (vec![T::zero(); values.len()], true);
    }
    if mx == mn {
        return (vec![T::one(); values.len()], false);
    }
    let range = mx - mn;
    (values.into_iter().map(|v| (v - mn) / range).collect(), false)
}

/// Blend a heatmap value over a grayscale pixel, both in `[0,1]`:
/// `(1 - alpha) * gray + alpha * jet(heat)`, per RGB channel.
pub fn blend_pixel(gray: f64, heat: f64) -> [f64; 3] {
    let idx = (heat * 255.0).round().clamp(0.0, 255.0) as usize;
    let jet = JET[idx];
    let mut out = [0.0; 3];
    for (o, &j) in out.iter_mut().zip(jet.iter()) {
        *o = (1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * (f64::from(j) / 255.0);
    }
    out
}

/// Render the heatmap over its grayscale image as interleaved RGB8.
pub fn overlay<T: Scalar>(map: &Tensor<T>, image: &Tensor<T>) -> Result<Vec<u8>> {
    let ishape = image.shape();
    let gray = match ishape.len() {
        2 => image.data(),
        3 if ishape[0] == 1 => image.data(),
        _ => return Err(Error::shape("overlay", format!("image shape {ishape:?}"))),
    };
    if map.numel() != gray.len() {
        return Err(Error::shape(
            "overlay",
            format!("heatmap {:?} vs image {:?}", map.shape(), ishape),
        ));
    }
    let mut out = Vec::with_capacity(gray.len() * 3);
    for (&h, &g) in map.data().iter().zip(gray) {
        let rgb = blend_pixel(g.to_f64_lossy(), h.to_f64_lossy());
        for c in rgb {
            out.push((c * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// How much of a heatmap's mass falls inside a ground-truth mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScore {
    /// Fraction of total saliency mass inside the mask.
    pub containment: f64,
    /// Fraction of the top-q-quantile pixels that fall inside the mask.
    pub top_q_containment: f64,
    pub q: f64,
    /// Set when the heatmap had no mass; both scores are 0 then.
    pub zero_mass: bool,
}

/// Score a normalized heatmap against a binary mask of the same size.
pub fn score_containment<T: Scalar>(map: &Tensor<T>, mask: &Tensor<T>) -> Result<SaliencyScore> {
    score_containment_q(map, mask, TOP_Q)
}

/// [`score_containment`] with an explicit top-quantile fraction.
pub fn score_containment_q<T: Scalar>(map: &Tensor<T>, mask: &Tensor<T>, q: f64) -> Result<SaliencyScore> {
    if map.shape() != mask.shape() {
        return Err(Error::shape(
            "score_containment",
            format!("heatmap {:?} vs mask {:?}", map.shape(), mask.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("top quantile must be in [0,1], got {q}")));
    }
    let total: f64 = map.data().iter().map(|v| v.to_f64_lossy()).sum();
    if total <= 0.0 {
        return Ok(SaliencyScore { containment: 0.0, top_q_containment: 0.0, q, zero_mass: true });
    }
    let inside: f64 = map
        .data()
        .iter()
        .zip(mask.data())
        .map(|(v, m)| v.to_f64_lossy() * m.to_f64_lossy())
        .sum();

    let n = map.numel();
    let count = ((q * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // sort by value descending, index ascending for deterministic ties
    order.sort_by(|&a, &b| {
        map.data()[b]
            .partial_cmp(&map.data()[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top_inside = order[..count]
        .iter()
        .filter(|&&i| mask.data()[i] > T::zero())
        .count();

    Ok(SaliencyScore {
        containment: inside / total,
        top_q_containment: top_inside as f64 / count as f64,
        q,
        zero_mass: false,
    })
}

/// Fraction of heatmap mass inside a pixel rectangle `(x, y, w, h)`.
pub fn region_mass<T: Scalar>(map: &Tensor<T>, rect: (usize, usize, usize, usize)) -> Result<f64> {
    let shape = map.shape();
    let (h, w) = (shape[0], shape[1]);
    let (rx, ry, rw, rh) = rect;
    if rx + rw > w || ry + rh > h {
        return Err(Error::Config(format!("region {rect:?} outside {h}x{w} heatmap")));
    }
    let total: f64 = map.data().iter().map(|v| v.to_f64_lossy()).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let mut inside = 0.0;
    for y in ry..ry + rh {
        for x in rx..rx + rw {
            inside += map.data()[y * w + x].to_f64_lossy();
        }
    }
    Ok(inside / total)
}

/// A bright text-like patch burned into an image corner.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TextStamp {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    /// Brightness written into the patterned pixels, in `[0,1]`.
    pub intensity: f64,
}

impl TextStamp {
    /// Burn the stamp into a copy of `image` (`C x H x W` or `H x W`).
    pub fn burn<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = image.shape().to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if self.x + self.width > w || self.y + self.height > h {
            return Err(Error::Config(format!(
                "stamp {}x{} at ({},{}) outside {h}x{w} image",
                self.width, self.height, self.x, self.y
            )));
        }
        let mut data = image.data().to_vec();
        let planes = data.len() / (h * w);
        let v = T::from_f64(self.intensity.clamp(0.0, 1.0));
        for p in 0..planes {
            for yy in 0..self.height {
                for xx in 0..self.width {
                    if crate::data::synth::stamp_pattern(xx, yy) {
                        data[p * h * w + (self.y + yy) * w + (self.x + xx)] = v;
                    }
                }
            }
        }
        Tensor::new(shape, data)
    }

    pub fn rect(&self) -> (usize, usize, usize, usize) {
        (self.x, self.y, self.width, self.height)
    }
}

/// Heatmap sensitivity to an external annotation: scores before and after
/// burning the stamp, plus the saliency mass the stamp region captures.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AnnotationSensitivity {
    pub containment_before: Option<f64>,
    pub containment_after: Option<f64>,
    /// `after - before`, when a mask was supplied.
    pub containment_delta: Option<f64>,
    pub stamp_mass_before: f64,
    pub stamp_mass_after: f64,
}

/// Compare heatmaps of an image before and after stamping a bright
/// text-like patch into it.
pub fn annotation_sensitivity<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    image: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    stamp: &TextStamp,
    class: usize,
    layer: usize,
) -> Result<AnnotationSensitivity> {
    let stamped = stamp.burn(image)?;
    let before = gradcam(config, params, image, class, layer)?;
    let after = gradcam(config, params, &stamped, class, layer)?;

    let (cb, ca) = match mask {
        Some(m) => (
            Some(score_containment(&before.map, m)?.containment),
            Some(score_containment(&after.map, m)?.containment),
        ),
        None => (None, None),
    };
    Ok(AnnotationSensitivity {
        containment_before: cb,
        containment_after: ca,
        containment_delta: cb.zip(ca).map(|(b, a)| a - b),
        stamp_mass_before: region_mass(&before.map, stamp.rect())?,
        stamp_mass_after: region_mass(&after.map, stamp.rect())?,
    })
}
