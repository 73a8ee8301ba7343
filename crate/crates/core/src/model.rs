//! The desk-scale CNN: architecture description, parameters, forward
//! execution (full or from an intermediate layer), a toy SGD trainer, and the
//! binary weight file.
//!
//! Weight file layout (all integers little-endian):
//!
//! ```text
//! "RCAM"  u16 version  u64 init-seed  u32 in_channels  u32 input_size  u32 classes
//! u32 layer-count
//! per layer: u8 kind, kind-specific header, u8 tensor-count,
//!            per tensor: u8 rank, u32 dims[rank], f32 data[prod(dims)]
//! u32 CRC32 of every preceding byte
//! ```

use crate::error::{dim_err, param_err, Error, Result};
use crate::io::Dataset;
use crate::tensor::ops::{self, DropoutMode};
use crate::tensor::{Graph, NodeId, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_DROPOUT: f32 = 0.2;
pub const WEIGHT_FORMAT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"RCAM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2x2,
    Dropout {
        p: f32,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl Layer {
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            Layer::Linear {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// `[conv3x3 -> relu -> maxpool] x3 -> dropout -> conv3x3 -> relu -> GAP -> linear`.
    pub fn default_cnn(classes: usize, input_size: usize) -> Result<Self> {
        if classes < 2 {
            return Err(param_err!("need at least 2 classes, got {classes}"));
        }
        if input_size < 32 {
            return Err(param_err!("input size must be at least 32, got {input_size}"));
        }
        if input_size % 8 != 0 {
            return Err(param_err!(
                "input size must be divisible by 8, got {input_size}"
            ));
        }
        let conv = |i, o| Layer::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let layers = vec![
            conv(3, 8),
            Layer::Relu,
            Layer::MaxPool2x2,
            conv(8, 16),
            Layer::Relu,
            Layer::MaxPool2x2,
            conv(16, 16),
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Dropout { p: DEFAULT_DROPOUT },
            conv(16, 32),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Linear {
                in_features: 32,
                out_features: classes,
            },
        ];
        let spec = ModelSpec {
            in_channels: 3,
            input_size,
            classes,
            layers,
        };
        spec.output_shapes()?;
        Ok(spec)
    }

    /// Sets the probability of every dropout layer.
    pub fn with_dropout(mut self, p: f32) -> Self {
        for layer in &mut self.layers {
            if let Layer::Dropout { p: q } = layer {
                *q = p;
            }
        }
        self
    }

    /// Per-layer output shapes for a single image, validating that
    /// consecutive layers fit together.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if !self
            .layers
            .iter()
            .any(|l| matches!(l, Layer::Conv2d { .. }))
        {
            return Err(param_err!("model needs at least one convolution"));
        }
        if !self
            .layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout { .. }))
        {
            return Err(param_err!("model needs at least one dropout layer"));
        }
        let mut shape = vec![1, self.in_channels, self.input_size, self.input_size];
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 4 || shape[1] != in_channels {
                        return Err(dim_err!("layer {i}: conv expects {in_channels} channels, input is {shape:?}"));
                    }
                    let h = ops::conv_output_len(shape[2], kernel, stride, padding)
                        .ok_or_else(|| dim_err!("layer {i}: kernel larger than input {shape:?}"))?;
                    let w = ops::conv_output_len(shape[3], kernel, stride, padding)
                        .ok_or_else(|| dim_err!("layer {i}: kernel larger than input {shape:?}"))?;
                    vec![1, out_channels, h, w]
                }
                Layer::Relu => shape,
                Layer::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(param_err!("layer {i}: dropout p={p} outside [0, 1)"));
                    }
                    shape
                }
                Layer::MaxPool2x2 => {
                    if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
                        return Err(dim_err!("layer {i}: max pooling needs even extents, got {shape:?}"));
                    }
                    vec![1, shape[1], shape[2] / 2, shape[3] / 2]
                }
                Layer::GlobalAvgPool => {
                    if shape.len() != 4 {
                        return Err(dim_err!("layer {i}: GAP needs a 4-D input, got {shape:?}"));
                    }
                    vec![1, shape[1], 1, 1]
                }
                Layer::Linear {
                    in_features,
                    out_features,
                } => {
                    let f: usize = shape[1..].iter().product();
                    if f != in_features {
                        return Err(dim_err!("layer {i}: linear expects {in_features} features, input has {f}"));
                    }
                    vec![1, out_features]
                }
            };
            shapes.push(shape.clone());
        }
        if shape != [1, self.classes] {
            return Err(dim_err!(
                "model produces {shape:?}, expected [1, {}] logits",
                self.classes
            ));
        }
        Ok(shapes)
    }

    /// Output of the last conv block (the ReLU after the final convolution,
    /// or the convolution itself when no ReLU follows).
    pub fn default_attribution_layer(&self) -> usize {
        let conv = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv2d { .. }))
            .expect("validated model has a convolution");
        match self.layers.get(conv + 1) {
            Some(Layer::Relu) => conv + 1,
            _ => conv,
        }
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout { p } if *p > 0.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub version: u16,
    /// Seed used for the initial draw of the parameters.
    pub seed: u64,
    /// One entry per layer; `None` for parameter-free layers.
    pub params: Vec<Option<LayerParams>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub weights: WeightStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
    pub class: usize,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f32>) -> Self {
        let probabilities: Vec<f32> = ops::softmax_f64(&logits)
            .into_iter()
            .map(|p| p as f32)
            .collect();
        let class = argmax(&logits);
        Prediction {
            logits,
            probabilities,
            class,
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    pub input: NodeId,
    /// Output node of every layer, in layer order.
    pub outputs: Vec<NodeId>,
    /// `(weight, bias)` leaves of every parametrised layer.
    pub params: Vec<Option<(NodeId, NodeId)>>,
}

impl ForwardPass {
    pub fn logits(&self) -> NodeId {
        *self.outputs.last().expect("non-empty model")
    }

    pub fn layer_output(&self, layer: usize) -> Result<NodeId> {
        self.outputs
            .get(layer)
            .copied()
            .ok_or_else(|| param_err!("layer {layer} out of range"))
    }
}

/// Generator for the dropout masks of one layer. The seed identifies the
/// whole pass; each layer draws from its own stream.
fn dropout_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    rng
}

pub fn build_default_model(classes: usize, input_size: usize, seed: u64) -> Result<Model> {
    let spec = ModelSpec::default_cnn(classes, input_size)?;
    Model::init(spec, seed)
}

impl Model {
    /// He-normal initialisation of every parametrised layer, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.output_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layers
            .iter()
            .map(|layer| {
                layer.param_shapes().map(|(w_shape, b_shape)| {
                    let fan_in: usize = w_shape[1..].iter().product();
                    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
                    LayerParams {
                        weight: Tensor::from_fn(&w_shape, |_| normal.sample(&mut rng)),
                        bias: Tensor::zeros(&b_shape),
                    }
                })
            })
            .collect();
        Ok(Model {
            spec,
            weights: WeightStore {
                version: WEIGHT_FORMAT_VERSION,
                seed,
                params,
            },
        })
    }

    pub fn from_parts(spec: ModelSpec, weights: WeightStore) -> Result<Self> {
        spec.output_shapes()?;
        if weights.params.len() != spec.layers.len() {
            return Err(dim_err!(
                "{} parameter slots for {} layers",
                weights.params.len(),
                spec.layers.len()
            ));
        }
        for (i, (layer, params)) in spec.layers.iter().zip(&weights.params).enumerate() {
            match (layer.param_shapes(), params) {
                (None, None) => {}
                (Some((w, b)), Some(p)) if p.weight.shape() == w && p.bias.shape() == b => {}
                _ => return Err(dim_err!("layer {i}: parameters do not match {layer:?}")),
            }
        }
        Ok(Model { spec, weights })
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Copy with every dropout probability replaced by `p`.
    pub fn with_dropout(&self, p: f32) -> Self {
        Model {
            spec: self.spec.clone().with_dropout(p),
            weights: self.weights.clone(),
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.spec.in_channels || h != self.spec.input_size || w != self.spec.input_size {
            return Err(dim_err!(
                "image is {c}x{h}x{w}, model expects {}x{}x{}",
                self.spec.in_channels,
                self.spec.input_size,
                self.spec.input_size
            ));
        }
        Ok(())
    }

    /// Records layers `start..` on top of node `input`.
    fn run_layers(
        &self,
        graph: &mut Graph,
        start: usize,
        mut x: NodeId,
        mode: DropoutMode,
        seed: u64,
        track_params: bool,
    ) -> Result<(Vec<NodeId>, Vec<Option<(NodeId, NodeId)>>)> {
        let mut outputs = Vec::with_capacity(self.spec.layers.len() - start);
        let mut params = Vec::with_capacity(self.spec.layers.len() - start);
        for (i, layer) in self.spec.layers.iter().enumerate().skip(start) {
            let mut leaf_params = None;
            x = match *layer {
                Layer::Conv2d {
                    stride, padding, ..
                } => {
                    let (w, b) = self.param_leaves(graph, i, track_params);
                    leaf_params = Some((w, b));
                    graph.conv2d(x, w, b, stride, padding)?
                }
                Layer::Relu => graph.relu(x)?,
                Layer::MaxPool2x2 => graph.max_pool2x2(x)?,
                Layer::Dropout { p } => graph.dropout(x, p, mode, &mut dropout_rng(seed, i))?,
                Layer::GlobalAvgPool => graph.global_avg_pool(x)?,
                Layer::Linear { .. } => {
                    let (w, b) = self.param_leaves(graph, i, track_params);
                    leaf_params = Some((w, b));
                    graph.linear(x, w, b)?
                }
            };
            outputs.push(x);
            params.push(leaf_params);
        }
        Ok((outputs, params))
    }

    fn param_leaves(&self, graph: &mut Graph, layer: usize, track: bool) -> (NodeId, NodeId) {
        let p = self.weights.params[layer]
            .as_ref()
            .expect("validated parameter layer");
        (
            graph.leaf(p.weight.clone().with_requires_grad(track)),
            graph.leaf(p.bias.clone().with_requires_grad(track)),
        )
    }

    /// Full forward pass over a `[B, C, H, W]` batch.
    pub fn forward(&self, image: &Tensor, mode: DropoutMode, seed: u64) -> Result<ForwardPass> {
        self.forward_impl(image, mode, seed, false)
    }

    fn forward_impl(
        &self,
        image: &Tensor,
        mode: DropoutMode,
        seed: u64,
        track_params: bool,
    ) -> Result<ForwardPass> {
        self.check_image(image)?;
        let mut graph = Graph::new();
        let input = graph.leaf(image.clone());
        let (outputs, params) = self.run_layers(&mut graph, 0, input, mode, seed, track_params)?;
        Ok(ForwardPass {
            graph,
            input,
            outputs,
            params,
        })
    }

    /// Logits obtained by feeding `features` in place of the output of
    /// `layer` and running only the layers after it. Dropout layers in the
    /// tail draw the same masks as a full pass with the same seed.
    pub fn forward_tail(
        &self,
        layer: usize,
        features: &Tensor,
        mode: DropoutMode,
        seed: u64,
    ) -> Result<Tensor> {
        if layer + 1 >= self.spec.layers.len() {
            return Err(param_err!(
                "layer {layer} has no tail to run (model has {} layers)",
                self.spec.layers.len()
            ));
        }
        let mut graph = Graph::new();
        let x = graph.leaf(features.clone());
        let (outputs, _) = self.run_layers(&mut graph, layer + 1, x, mode, seed, false)?;
        Ok(graph.value(*outputs.last().unwrap()).clone())
    }

    pub fn predict(
        &self,
        image: &Tensor,
        mode: DropoutMode,
        seed: u64,
    ) -> Result<(Prediction, ForwardPass)> {
        let pass = self.forward(image, mode, seed)?;
        let logits = pass.graph.value(pass.logits());
        if logits.shape()[0] != 1 {
            return Err(dim_err!("predict expects a single image, got batch {}", logits.shape()[0]));
        }
        let prediction = Prediction::from_logits(logits.data().to_vec());
        Ok((prediction, pass))
    }

    /// Logits only.
    pub fn logits(&self, image: &Tensor, mode: DropoutMode, seed: u64) -> Result<Vec<f32>> {
        let pass = self.forward(image, mode, seed)?;
        Ok(pass.graph.value(pass.logits()).data().to_vec())
    }

    /// Cross-entropy loss of one labelled image and its parameter gradients.
    fn sample_gradient(
        &self,
        image: &Tensor,
        label: usize,
        seed: u64,
    ) -> Result<(f64, Vec<Option<(Tensor, Tensor)>>)> {
        let pass = self.forward_impl(image, DropoutMode::Train, seed, true)?;
        let logits = pass.graph.value(pass.logits());
        let probs = ops::softmax_f64(logits.data());
        let loss = -probs[label].max(1e-300).ln();
        let seed_grad: Vec<f32> = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| (p - if k == label { 1.0 } else { 0.0 }) as f32)
            .collect();
        let targets: Vec<NodeId> = pass
            .params
            .iter()
            .flatten()
            .flat_map(|&(w, b)| [w, b])
            .collect();
        let mut grads = pass.graph.backward(
            pass.logits(),
            Tensor::new(logits.shape().to_vec(), seed_grad)?,
            &targets,
        )?;
        let param_grads = pass
            .params
            .iter()
            .map(|p| {
                p.map(|(w, b)| {
                    let gw = grads.take(w).unwrap_or_else(|| Tensor::zeros(pass.graph.value(w).shape()));
                    let gb = grads.take(b).unwrap_or_else(|| Tensor::zeros(pass.graph.value(b).shape()));
                    (gw, gb)
                })
            })
            .collect();
        Ok((loss, param_grads))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy of each epoch, measured during the epoch.
    pub loss_history: Vec<f64>,
    /// Accuracy on the training set with dropout disabled, after training.
    pub train_accuracy: f64,
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch SGD with momentum on softmax cross-entropy, dropout in train
/// mode. Per-sample gradients are computed in parallel and summed in sample
/// order, so the result does not depend on the thread count.
pub fn train_toy(model: &Model, data: &Dataset, config: &TrainConfig) -> Result<(Model, TrainReport)> {
    if data.items.is_empty() {
        return Err(param_err!("cannot train on an empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(param_err!("batch size must be positive"));
    }
    if let Some(bad) = data.items.iter().find(|s| s.label >= model.classes()) {
        return Err(param_err!(
            "label {} of item {} outside [0, {})",
            bad.label,
            bad.id,
            model.classes()
        ));
    }
    let mut model = model.clone();
    let mut velocity: Vec<Option<(Vec<f32>, Vec<f32>)>> = model
        .weights
        .params
        .iter()
        .map(|p| p.as_ref().map(|p| (vec![0.0; p.weight.len()], vec![0.0; p.bias.len()])))
        .collect();
    let mut order: Vec<usize> = (0..data.items.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut loss_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<Option<(Tensor, Tensor)>>)> = batch
                .par_iter()
                .map(|&idx| {
                    let item = &data.items[idx];
                    let seed = mix_seed(mix_seed(config.seed, epoch as u64), idx as u64);
                    model.sample_gradient(&item.image, item.label, seed)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            for (layer, (params, vel)) in model
                .weights
                .params
                .iter_mut()
                .zip(velocity.iter_mut())
                .enumerate()
            {
                let (Some(params), Some((vw, vb))) = (params.as_mut(), vel.as_mut()) else {
                    continue;
                };
                let mut gw = vec![0.0f32; vw.len()];
                let mut gb = vec![0.0f32; vb.len()];
                for (_, grads) in &results {
                    let (sw, sb) = grads[layer].as_ref().expect("parameter gradient");
                    for (a, b) in gw.iter_mut().zip(sw.data()) {
                        *a += b;
                    }
                    for (a, b) in gb.iter_mut().zip(sb.data()) {
                        *a += b;
                    }
                }
                sgd_step(params.weight.data_mut(), vw, &gw, scale, config);
                sgd_step(params.bias.data_mut(), vb, &gb, scale, config);
            }
            epoch_loss += results.iter().map(|(l, _)| l).sum::<f64>();
        }
        let mean = epoch_loss / data.items.len() as f64;
        let finite = model
            .weights
            .params
            .iter()
            .flatten()
            .all(|p| p.weight.is_finite() && p.bias.is_finite());
        if !finite || !mean.is_finite() {
            return Err(Error::Convergence(format!(
                "non-finite weights or loss after epoch {epoch}"
            )));
        }
        log::debug!("epoch {epoch}: loss {mean:.4}");
        loss_history.push(mean);
    }

    let train_accuracy = accuracy(&model, data)?;
    Ok((
        model,
        TrainReport {
            loss_history,
            train_accuracy,
        },
    ))
}

fn sgd_step(param: &mut [f32], velocity: &mut [f32], grad: &[f32], scale: f32, config: &TrainConfig) {
    for ((w, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = config.momentum * *v + g * scale;
        *w -= config.lr * *v;
    }
}

/// Fraction of items classified correctly with dropout disabled.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.items.is_empty() {
        return Err(param_err!("accuracy of an empty dataset"));
    }
    let correct: Vec<bool> = data
        .items
        .par_iter()
        .map(|item| {
            let logits = model.logits(&item.image, DropoutMode::Disabled, 0)?;
            Ok(argmax(&logits) == item.label)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

// ---------------------------------------------------------------------------
// Weight file

fn layer_kind(layer: &Layer) -> u8 {
    match layer {
        Layer::Conv2d { .. } => 0,
        Layer::Relu => 1,
        Layer::MaxPool2x2 => 2,
        Layer::Dropout { .. } => 3,
        Layer::GlobalAvgPool => 4,
        Layer::Linear { .. } => 5,
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        put_u32(buf, d);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_weights(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&model.weights.version.to_le_bytes());
    buf.extend_from_slice(&model.weights.seed.to_le_bytes());
    put_u32(&mut buf, model.spec.in_channels);
    put_u32(&mut buf, model.spec.input_size);
    put_u32(&mut buf, model.spec.classes);
    put_u32(&mut buf, model.spec.layers.len());
    for (layer, params) in model.spec.layers.iter().zip(&model.weights.params) {
        buf.push(layer_kind(layer));
        match *layer {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                for v in [in_channels, out_channels, kernel, stride, padding] {
                    put_u32(&mut buf, v);
                }
            }
            Layer::Dropout { p } => buf.extend_from_slice(&p.to_le_bytes()),
            Layer::Linear {
                in_features,
                out_features,
            } => {
                put_u32(&mut buf, in_features);
                put_u32(&mut buf, out_features);
            }
            Layer::Relu | Layer::MaxPool2x2 | Layer::GlobalAvgPool => {}
        }
        match params {
            Some(p) => {
                buf.push(2);
                put_tensor(&mut buf, &p.weight);
                put_tensor(&mut buf, &p.bias);
            }
            None => buf.push(0),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "unexpected end of weight data at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 2 + 4 {
        return Err(Error::Format(format!(
            "weight data too short ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not an RCAM weight file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WEIGHT_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: WEIGHT_FORMAT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("CRC mismatch (truncated or corrupt file)".into()));
    }
    let mut r = Reader { bytes: body, pos: 6 };
    let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let in_channels = r.u32()?;
    let input_size = r.u32()?;
    let classes = r.u32()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer = match r.u8()? {
            0 => Layer::Conv2d {
                in_channels: r.u32()?,
                out_channels: r.u32()?,
                kernel: r.u32()?,
                stride: r.u32()?,
                padding: r.u32()?,
            },
            1 => Layer::Relu,
            2 => Layer::MaxPool2x2,
            3 => Layer::Dropout { p: r.f32()? },
            4 => Layer::GlobalAvgPool,
            5 => Layer::Linear {
                in_features: r.u32()?,
                out_features: r.u32()?,
            },
            other => return Err(Error::Format(format!("unknown layer kind {other}"))),
        };
        let p = match r.u8()? {
            0 => None,
            2 => Some(LayerParams {
                weight: r.tensor()?,
                bias: r.tensor()?,
            }),
            other => return Err(Error::Format(format!("bad tensor count {other}"))),
        };
        layers.push(layer);
        params.push(p);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after last layer".into()));
    }
    let spec = ModelSpec {
        in_channels,
        input_size,
        classes,
        layers,
    };
    Model::from_parts(
        spec,
        WeightStore {
            version,
            seed,
            params,
        },
    )
    .map_err(|e| Error::Format(format!("inconsistent model: {e}")))
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_weights(model))
}

pub fn load_weights(path: &Path) -> Result<Model> {
    decode_weights(&std::fs::read(path)?)
}
