//! Pure numeric kernels behind the recorded tensor ops.
//!
//! These are shared with code that needs the same arithmetic without a
//! graph: augmentation warps samples directly, heatmap upsampling reuses
//! the bilinear resize.

use crate::scalar::Scalar;

/// Row-major 2x3 affine map taking output pixel coordinates `(x, y)` to
/// source coordinates: `sx = m[0]*x + m[1]*y + m[2]`, `sy = m[3]*x + m[4]*y + m[5]`.
/// Pixel centers sit on integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap {
    pub m: [f64; 6],
}

impl AffineMap {
    pub fn identity() -> Self {
        AffineMap { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] }
    }

    pub fn translate(tx: f64, ty: f64) -> Self {
        AffineMap { m: [1.0, 0.0, tx, 0.0, 1.0, ty] }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        AffineMap { m: [sx, 0.0, 0.0, 0.0, sy, 0.0] }
    }

    pub fn rotate_deg(theta_deg: f64) -> Self {
        let t = theta_deg.to_radians();
        let (s, c) = t.sin_cos();
        AffineMap { m: [c, -s, 0.0, s, c, 0.0] }
    }

    /// Shear parallel to the x axis by the given angle.
    pub fn shear_x_deg(phi_deg: f64) -> Self {
        let k = phi_deg.to_radians().tan();
        AffineMap { m: [1.0, k, 0.0, 0.0, 1.0, 0.0] }
    }

    pub fn flip_h(width: usize) -> Self {
        AffineMap { m: [-1.0, 0.0, (width - 1) as f64, 0.0, 1.0, 0.0] }
    }

    pub fn flip_v(height: usize) -> Self {
        AffineMap { m: [1.0, 0.0, 0.0, 0.0, -1.0, (height - 1) as f64] }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &AffineMap) -> Self {
        let a = &self.m;
        let b = &other.m;
        AffineMap {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    /// Inverse map; `None` when the linear part is singular.
    pub fn invert(&self) -> Option<Self> {
        let [a, b, c, d, e, f] = self.m;
        let det = a * e - b * d;
        if det.abs() < 1e-12 {
            return None;
        }
        let ia = e / det;
        let ib = -b / det;
        let id = -d / det;
        let ie = a / det;
        Some(AffineMap {
            m: [ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)],
        })
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0] * x + self.m[1] * y + self.m[2],
            self.m[3] * x + self.m[4] * y + self.m[5],
        )
    }
}

/// Interpolation used when pulling source pixels through an [`AffineMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Bilinear,
    Nearest,
}

/// Warp the trailing `H x W` planes of `input` through `map` (output to
/// source), zero-filling samples that land outside the plane. Output shape
/// equals input shape.
pub fn affine_sample_forward<T: Scalar>(
    input: &[T],
    shape: &[usize],
    map: &AffineMap,
    mode: SampleMode,
) -> Vec<T> {
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let planes: usize = shape[..rank - 2].iter().product::<usize>().max(1);
    let mut out = vec![T::zero(); input.len()];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = map.apply(ox as f64, oy as f64);
                let v = match mode {
                    SampleMode::Bilinear => sample_bilinear_zero(&input[base..base + h * w], h, w, sx, sy),
                    SampleMode::Nearest => sample_nearest_zero(&input[base..base + h * w], h, w, sx, sy),
                };
                out[base + oy * w + ox] = v;
            }
        }
    }
    out
}

/// Scatter `grad_out` back through the warp. Both sampling modes are linear
/// in the input pixels, so this is exact.
pub fn affine_sample_backward<T: Scalar>(
    grad_out: &[T],
    shape: &[usize],
    map: &AffineMap,
    mode: SampleMode,
) -> Vec<T> {
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let planes: usize = shape[..rank - 2].iter().product::<usize>().max(1);
    let mut gin = vec![T::zero(); grad_out.len()];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..h {
            for ox in 0..w {
                let g = grad_out[base + oy * w + ox];
                if g == T::zero() {
                    continue;
                }
                let (sx, sy) = map.apply(ox as f64, oy as f64);
                match mode {
                    SampleMode::Bilinear => {
                        for (ix, iy, wgt) in bilinear_taps(h, w, sx, sy) {
                            gin[base + iy * w + ix] = gin[base + iy * w + ix] + g * T::from_f64(wgt);
                        }
                    }
                    SampleMode::Nearest => {
                        let (ix, iy) = (sx.round(), sy.round());
                        if in_bounds(ix, iy, h, w) {
                            let idx = base + iy as usize * w + ix as usize;
                            gin[idx] = gin[idx] + g;
                        }
                    }
                }
            }
        }
    }
    gin
}

fn in_bounds(x: f64, y: f64, h: usize, w: usize) -> bool {
    x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h
}

fn bilinear_taps(h: usize, w: usize, sx: f64, sy: f64) -> impl Iterator<Item = (usize, usize, f64)> {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let tx = sx - x0;
    let ty = sy - y0;
    let taps = [
        (x0, y0, (1.0 - tx) * (1.0 - ty)),
        (x0 + 1.0, y0, tx * (1.0 - ty)),
        (x0, y0 + 1.0, (1.0 - tx) * ty),
        (x0 + 1.0, y0 + 1.0, tx * ty),
    ];
    taps.into_iter().filter_map(move |(x, y, wgt)| {
        if wgt != 0.0 && in_bounds(x, y, h, w) {
            Some((x as usize, y as usize, wgt))
        } else {
            None
        }
    })
}

fn sample_bilinear_zero<T: Scalar>(plane: &[T], h: usize, w: usize, sx: f64, sy: f64) -> T {
    let mut acc = T::zero();
    for (ix, iy, wgt) in bilinear_taps(h, w, sx, sy) {
        acc = acc + plane[iy * w + ix] * T::from_f64(wgt);
    }
    acc
}

fn sample_nearest_zero<T: Scalar>(plane: &[T], h: usize, w: usize, sx: f64, sy: f64) -> T {
    let (ix, iy) = (sx.round(), sy.round());
    if in_bounds(ix, iy, h, w) {
        plane[iy as usize * w + ix as usize]
    } else {
        T::zero()
    }
}

/// Bilinear resize of one `h x w` plane to `out_h x out_w` using half-pixel
/// centers and edge clamping. Identity when sizes match, bit for bit.
pub fn resize_bilinear<T: Scalar>(plane: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); out_h * out_w];
    let sy_scale = h as f64 / out_h as f64;
    let sx_scale = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) * sy_scale - 0.5;
        let y0 = sy.floor();
        let ty = sy - y0;
        let y0c = clamp_idx(y0, h);
        let y1c = clamp_idx(y0 + 1.0, h);
        for ox in 0..out_w {
            let sx = (ox as f64 + 0.5) * sx_scale - 0.5;
            let x0 = sx.floor();
            let tx = sx - x0;
            let x0c = clamp_idx(x0, w);
            let x1c = clamp_idx(x0 + 1.0, w);
            let top = plane[y0c * w + x0c] * T::from_f64(1.0 - tx) + plane[y0c * w + x1c] * T::from_f64(tx);
            let bot = plane[y1c * w + x0c] * T::from_f64(1.0 - tx) + plane[y1c * w + x1c] * T::from_f64(tx);
            out[oy * out_w + ox] = top * T::from_f64(1.0 - ty) + bot * T::from_f64(ty);
        }
    }
    out
}

fn clamp_idx(v: f64, len: usize) -> usize {
    if v < 0.0 {
        0
    } else if v > (len - 1) as f64 {
        len - 1
    } else {
        v as usize
    }
}

/// `C[m,n] = A[m,k] * B` where `B` is `k x n`, or `n x k` when `trans_b`.
pub fn matmul_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                let bv = if trans_b { b[j * k + p] } else { b[p * n + j] };
                acc = acc + a[i * k + p] * bv;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Gradients of [`matmul_forward`] with respect to both factors.
pub fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    grad_c: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); m * k];
    let mut gb = vec![T::zero(); b.len()];
    for i in 0..m {
        for j in 0..n {
            let g = grad_c[i * n + j];
            if g == T::zero() {
                continue;
            }
            for p in 0..k {
                if trans_b {
                    ga[i * k + p] = ga[i * k + p] + g * b[j * k + p];
                    gb[j * k + p] = gb[j * k + p] + g * a[i * k + p];
                } else {
                    ga[i * k + p] = ga[i * k + p] + g * b[p * n + j];
                    gb[p * n + j] = gb[p * n + j] + g * a[i * k + p];
                }
            }
        }
    }
    (ga, gb)
}

/// Direct NCHW convolution. Output spatial size is
/// `(in + 2*pad - kernel) / stride + 1` (floor).
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    ishape: [usize; 4],
    kernel: &[T],
    kshape: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 4]) {
    let [n, c, ih, iw] = ishape;
    let [f, _, kh, kw] = kshape;
    let oh = (ih + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;
    let mut out = vec![T::zero(); n * f * oh * ow];
    for bi in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let iv = input[((bi * c + ci) * ih + iy as usize) * iw + ix as usize];
                                let kv = kernel[((fo * c + ci) * kh + ky) * kw + kx];
                                acc = acc + iv * kv;
                            }
                        }
                    }
                    out[((bi * f + fo) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    ishape: [usize; 4],
    kernel: &[T],
    kshape: [usize; 4],
    stride: usize,
    pad: usize,
    grad_out: &[T],
    oshape: [usize; 4],
) -> (Vec<T>, Vec<T>) {
    let [n, c, ih, iw] = ishape;
    let [f, _, kh, kw] = kshape;
    let [_, _, oh, ow] = oshape;
    let mut gin = vec![T::zero(); input.len()];
    let mut gker = vec![T::zero(); kernel.len()];
    for bi in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[((bi * f + fo) * oh + oy) * ow + ox];
                    if g == T::zero() {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let iidx = ((bi * c + ci) * ih + iy as usize) * iw + ix as usize;
                                let kidx = ((fo * c + ci) * kh + ky) * kw + kx;
                                gin[iidx] = gin[iidx] + g * kernel[kidx];
                                gker[kidx] = gker[kidx] + g * input[iidx];
                            }
                        }
                    }
                }
            }
        }
    }
    (gin, gker)
}

/// Non-overlapping max pooling with a square window. Also returns the flat
/// source index of each maximum (first occurrence wins) for the backward
/// scatter.
pub fn maxpool2d_forward<T: Scalar>(
    input: &[T],
    ishape: [usize; 4],
    window: usize,
) -> (Vec<T>, [usize; 4], Vec<usize>) {
    let [n, c, ih, iw] = ishape;
    let oh = ih / window;
    let ow = iw / window;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for bi in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * window + ky;
                            let ix = ox * window + kx;
                            let idx = ((bi * c + ci) * ih + iy) * iw + ix;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = ((bi * c + ci) * oh + oy) * ow + ox;
                    out[oidx] = best;
                    argmax[oidx] = best_idx;
                }
            }
        }
    }
    (out, [n, c, oh, ow], argmax)
}

/// Fused softmax + cross-entropy over rows of an `n x k` logit matrix,
/// averaged over the batch. Uses the log-sum-exp shift for stability.
/// Returns the scalar loss and the row-wise softmax probabilities.
pub fn softmax_cross_entropy_forward<T: Scalar>(
    logits: &[T],
    n: usize,
    k: usize,
    labels: &[usize],
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for j in 0..k {
            let e = (row[j] - max).exp();
            probs[i * k + j] = e;
            sum = sum + e;
        }
        let lse = max + sum.ln();
        for j in 0..k {
            probs[i * k + j] = probs[i * k + j] / sum;
        }
        total = total + (lse - row[labels[i]]);
    }
    (total / T::from_f64(n as f64), probs)
}

/// Gradient of the fused loss with respect to the logits:
/// `(softmax - onehot) * upstream / n`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &[T],
    n: usize,
    k: usize,
    labels: &[usize],
    upstream: T,
) -> Vec<T> {
    let scale = upstream / T::from_f64(n as f64);
    let mut grad = vec![T::zero(); n * k];
    for i in 0..n {
        for j in 0..k {
            let indicator = if labels[i] == j { T::one() } else { T::zero() };
            grad[i * k + j] = (probs[i * k + j] - indicator) * scale;
        }
    }
    grad
}
