//! Small CNN classifiers: configuration, initialization, forward pass,
//! and checkpoint serialization.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorId};

pub use checkpoint::{from_bytes, load, save, to_bytes, Checkpoint, CheckpointMeta};

/// One layer of the network, in application order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    MaxPool { window: usize },
    Relu,
    Flatten,
    Dense { width: usize },
}

/// Architecture description: input planes, the layer chain, and the width
/// of the softmax head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input shape as (channels, height, width); batches are NCHW.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub seed: u64,
}

/// Layer output shape while threading the config's chain.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Fan {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ModelConfig {
    /// Two conv blocks and a dense head; the test-scale reference config.
    pub fn tiny(input: [usize; 3], num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            input,
            layers: vec![
                LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { width: num_classes },
            ],
            num_classes,
            seed,
        }
    }

    /// Four 3x3 conv blocks with doubling channel counts, VGG style.
    pub fn vgg_mini(input: [usize; 3], num_classes: usize, seed: u64) -> Self {
        let mut layers = Vec::new();
        for out_channels in [8usize, 16, 32, 64] {
            layers.push(LayerSpec::Conv { out_channels, kernel: 3, stride: 1, pad: 1 });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Conv { out_channels, kernel: 3, stride: 1, pad: 1 });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { window: 2 });
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { width: num_classes });
        ModelConfig { input, layers, num_classes, seed }
    }

    /// Shape-check the whole chain. Errors carry the offending layer index.
    pub fn validate(&self) -> Result<()> {
        self.thread_shapes().map(|_| ())
    }

    fn thread_shapes(&self) -> Result<Vec<Fan>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig { layer: 0, detail: format!("empty input shape {:?}", self.input) });
        }
        let mut fan = Fan::Spatial { c, h, w };
        let mut fans = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let bad = |detail: String| Error::InvalidConfig { layer: idx, detail };
            fan = match (layer, &fan) {
                (LayerSpec::Conv { out_channels, kernel, stride, pad }, Fan::Spatial { h, w, .. }) => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(bad("conv dims must be positive".into()));
                    }
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(bad(format!("kernel {kernel} exceeds padded input {h}x{w}")));
                    }
                    Fan::Spatial {
                        c: *out_channels,
                        h: (h + 2 * pad - kernel) / stride + 1,
                        w: (w + 2 * pad - kernel) / stride + 1,
                    }
                }
                (LayerSpec::MaxPool { window }, Fan::Spatial { c, h, w }) => {
                    if *window == 0 || h < window || w < window {
                        return Err(bad(format!("pool window {window} on {h}x{w} input")));
                    }
                    Fan::Spatial { c: *c, h: h / window, w: w / window }
                }
                (LayerSpec::Relu, f) => f.clone(),
                (LayerSpec::Flatten, Fan::Spatial { c, h, w }) => Fan::Flat(c * h * w),
                (LayerSpec::Flatten, Fan::Flat(_)) => {
                    return Err(bad("flatten on already-flat input".into()));
                }
                (LayerSpec::Dense { width }, Fan::Flat(_)) => {
                    if *width == 0 {
                        return Err(bad("dense width must be positive".into()));
                    }
                    Fan::Flat(*width)
                }
                (LayerSpec::Dense { .. }, Fan::Spatial { .. }) => {
                    return Err(bad("dense on spatial input; add a flatten layer first".into()));
                }
                (spec, Fan::Flat(_)) => {
                    return Err(bad(format!("{spec:?} needs spatial input")));
                }
            };
            fans.push(fan.clone());
        }
        match fans.last() {
            Some(Fan::Flat(d)) if *d == self.num_classes => Ok(fans),
            other => Err(Error::InvalidConfig {
                layer: self.layers.len().saturating_sub(1),
                detail: format!("final output {:?} does not emit {} logits", other, self.num_classes),
            }),
        }
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> Result<usize> {
        let fans = self.thread_shapes()?;
        let mut count = 0usize;
        let mut prev = Fan::Spatial { c: self.input[0], h: self.input[1], w: self.input[2] };
        for (layer, fan) in self.layers.iter().zip(&fans) {
            match (layer, &prev) {
                (LayerSpec::Conv { out_channels, kernel, .. }, Fan::Spatial { c, .. }) => {
                    count += out_channels * c * kernel * kernel + out_channels;
                }
                (LayerSpec::Dense { width }, Fan::Flat(d)) => {
                    count += width * d + width;
                }
                _ => {}
            }
            prev = fan.clone();
        }
        Ok(count)
    }

    /// Conv layers in order, as `(name, layer index)` with names
    /// `conv0, conv1, ...`.
    pub fn conv_layer_names(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .enumerate()
            .map(|(ordinal, (idx, _))| (format!("conv{ordinal}"), idx))
            .collect()
    }

    /// Resolve a conv layer name (`"conv1"`) to its layer index.
    pub fn resolve_conv_layer(&self, name: &str) -> Result<usize> {
        let names = self.conv_layer_names();
        names
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, idx)| *idx)
            .ok_or_else(|| {
                let available: Vec<&str> = names.iter().map(|(n, _)| n.as_str()).collect();
                Error::Config(format!("no conv layer named {name}; available: {}", available.join(", ")))
            })
    }

    /// The last conv layer's index, the default heatmap tap.
    pub fn last_conv_layer(&self) -> Result<usize> {
        self.conv_layer_names()
            .last()
            .map(|(_, idx)| *idx)
            .ok_or_else(|| Error::Config("model has no conv layers".into()))
    }
}

/// Which parameter of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Bias,
}

/// `(layer index, role)` key for one parameter tensor.
pub type ParamKey = (usize, Role);

/// Named parameter tensors in canonical order: by layer index, weight
/// before bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    entries: Vec<(ParamKey, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn entries(&self) -> &[(ParamKey, Tensor<T>)] {
        &self.entries
    }

    pub fn get(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(k, _)| *k == key).map(|(_, t)| t)
    }

    /// Replace every tensor's data with `new`, key by key. Shapes must match.
    pub fn set_all(&mut self, new: Vec<(ParamKey, Vec<T>)>) -> Result<()> {
        for ((key, tensor), (nkey, data)) in self.entries.iter_mut().zip(new) {
            if *key != nkey || tensor.numel() != data.len() {
                return Err(Error::Config("parameter update does not match model layout".into()));
            }
            tensor.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self.entries.iter().map(|(k, t)| (*k, t.cast())).collect(),
        }
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Allocate and initialize parameters for `config`: He-uniform weights
/// (bound `sqrt(6 / fan_in)`) and zero biases, deterministic in the seed.
pub fn build<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::new();
    let [mut c, mut h, mut w] = config.input;
    let mut flat = None::<usize>;
    for (idx, layer) in config.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                let fan_in = c * kernel * kernel;
                let shape = vec![*out_channels, c, *kernel, *kernel];
                entries.push(((idx, Role::Weight), he_uniform(&mut rng, shape, fan_in)));
                entries.push(((idx, Role::Bias), Tensor::zeros(vec![*out_channels])));
                c = *out_channels;
                h = (h + 2 * pad - kernel) / stride + 1;
                w = (w + 2 * pad - kernel) / stride + 1;
            }
            LayerSpec::MaxPool { window } => {
                h /= window;
                w /= window;
            }
            LayerSpec::Relu => {}
            LayerSpec::Flatten => flat = Some(c * h * w),
            LayerSpec::Dense { width } => {
                let fan_in = flat.expect("validated config has flatten before dense");
                entries.push(((idx, Role::Weight), he_uniform(&mut rng, vec![*width, fan_in], fan_in)));
                entries.push(((idx, Role::Bias), Tensor::zeros(vec![*width])));
                flat = Some(*width);
            }
        }
    }
    Ok(ModelParams { entries })
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape/data sizes agree by construction")
}

/// Parameter tensors bound onto a graph for one forward/backward cycle.
pub struct BoundParams {
    ids: Vec<(ParamKey, TensorId)>,
}

impl BoundParams {
    pub fn ids(&self) -> &[(ParamKey, TensorId)] {
        &self.ids
    }

    fn get(&self, key: ParamKey) -> TensorId {
        self.ids
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, id)| *id)
            .expect("bound params cover every config layer")
    }

    /// Extract `(key, gradient)` pairs after a backward pass, in canonical
    /// parameter order.
    pub fn grads<T: Scalar>(&self, graph: &Graph<T>) -> Result<Vec<(ParamKey, Vec<T>)>> {
        self.ids
            .iter()
            .map(|(key, id)| {
                let g = graph
                    .grad(*id)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); graph.tensor(*id).numel()]);
                Ok((*key, g))
            })
            .collect()
    }
}

/// Insert every parameter tensor into `graph` as a leaf; `trainable`
/// controls whether gradients are accumulated for them.
pub fn bind_params<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ModelParams<T>,
    trainable: bool,
) -> BoundParams {
    let ids = params
        .entries
        .iter()
        .map(|(key, tensor)| {
            let mut t = tensor.clone();
            if trainable {
                t = t.with_requires_grad();
            }
            (*key, graph.leaf(t))
        })
        .collect();
    BoundParams { ids }
}

/// Logits plus the recorded output of every conv layer (post bias, before
/// the following activation), for heatmap taps.
pub struct ForwardOutput {
    pub logits: TensorId,
    pub conv_outputs: Vec<(usize, TensorId)>,
}

/// Run the config's layer chain over `input` (NCHW), recording on `graph`.
pub fn forward<T: Scalar>(
    graph: &mut Graph<T>,
    config: &ModelConfig,
    bound: &BoundParams,
    input: TensorId,
) -> Result<ForwardOutput> {
    let shape = graph.tensor(input).shape().to_vec();
    let [c, h, w] = config.input;
    if shape.len() != 4 || shape[1..] != [c, h, w] {
        return Err(Error::shape(
            "forward",
            format!("batch shape {:?} does not match config input {:?}", shape, config.input),
        ));
    }
    let mut x = input;
    let mut conv_outputs = Vec::new();
    for (idx, layer) in config.layers.iter().enumerate() {
        x = match layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let y = graph.conv2d(x, bound.get((idx, Role::Weight)), *stride, *pad)?;
                let y = graph.add_bias(y, bound.get((idx, Role::Bias)))?;
                conv_outputs.push((idx, y));
                y
            }
            LayerSpec::MaxPool { window } => graph.maxpool2d(x, *window)?,
            LayerSpec::Relu => graph.relu(x)?,
            LayerSpec::Flatten => graph.flatten(x)?,
            LayerSpec::Dense { .. } => {
                let y = graph.matmul(x, bound.get((idx, Role::Weight)), true)?;
                graph.add_bias(y, bound.get((idx, Role::Bias)))?
            }
        };
    }
    Ok(ForwardOutput { logits: x, conv_outputs })
}

/// Pure inference: logits for a batch, `N x num_classes`.
pub fn predict<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params, false);
    let input = graph.constant(batch.clone());
    let out = forward(&mut graph, config, &bound, input)?;
    Ok(graph.tensor(out.logits).clone())
}

/// Row-wise argmax with ties broken toward the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let shape = logits.shape();
    let (n, k) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}
