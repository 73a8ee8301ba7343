//! CAM-family pixel attribution: Grad-CAM, Grad-CAM++, SmoothGrad-CAM++,
//! Score-CAM and Recipro-CAM.
//!
//! Every method works on the activations of one 4-D layer of the model and
//! returns a [`SaliencyMap`] at input resolution, min-max normalised to
//! `[0, 1]`. Gradients are taken with respect to the raw (pre-softmax) logit
//! of the target class; Score-CAM and Recipro-CAM use the class probability
//! and never run a backward pass.

use crate::error::{dim_err, param_err, Error, Result};
use crate::model::{argmax, mix_seed, ForwardPass, Model};
use crate::tensor::ops::softmax_f64;
use crate::tensor::{DropoutMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Guard on the Grad-CAM++ alpha denominator.
pub const ALPHA_EPS: f64 = 1e-8;

/// A dense single-channel `height x width` map, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Map {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Map {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                data.len()
            ));
        }
        Ok(Map {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Map {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_constant(&self) -> bool {
        self.data.iter().all(|&v| v == self.data[0])
    }

    pub fn same_shape(&self, other: &Map) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Min-max normalisation to `[0, 1]`. A constant map carries no attribution
/// signal and normalises to all zeros.
pub fn normalize_map(raw: &Map) -> Map {
    let (lo, hi) = (raw.min() as f64, raw.max() as f64);
    let range = hi - lo;
    let data = if raw.data.is_empty() || !(range > 0.0) {
        vec![0.0; raw.data.len()]
    } else {
        raw.data
            .iter()
            .map(|&v| ((v as f64 - lo) / range) as f32)
            .collect()
    };
    Map {
        height: raw.height,
        width: raw.width,
        data,
    }
}

/// Bilinear resampling with aligned corners: output corner pixels sample the
/// input corner pixels exactly.
pub fn upsample_bilinear(map: &Map, height: usize, width: usize) -> Map {
    assert!(map.height >= 1 && map.width >= 1, "empty map");
    if map.height == height && map.width == width {
        return map.clone();
    }
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out <= 1 || inp <= 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (pos.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| coord(x, width, map.width)).collect();
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, map.height);
        for &(x0, x1, fx) in &cols {
            let top = map.get(y0, x0) as f64 * (1.0 - fx) + map.get(y0, x1) as f64 * fx;
            let bottom = map.get(y1, x0) as f64 * (1.0 - fx) + map.get(y1, x1) as f64 * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Map {
        height,
        width,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    GradCam,
    GradCamPp,
    SmoothGradCamPp,
    ScoreCam,
    ReciproCam,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::GradCam,
        MethodKind::GradCamPp,
        MethodKind::SmoothGradCamPp,
        MethodKind::ScoreCam,
        MethodKind::ReciproCam,
    ];

    /// Command-line name.
    pub fn cli_name(self) -> &'static str {
        match self {
            MethodKind::GradCam => "grad-cam",
            MethodKind::GradCamPp => "grad-cam-pp",
            MethodKind::SmoothGradCamPp => "smooth-grad-cam-pp",
            MethodKind::ScoreCam => "score-cam",
            MethodKind::ReciproCam => "recipro-cam",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodKind::GradCam => "Grad-CAM",
            MethodKind::GradCamPp => "Grad-CAM++",
            MethodKind::SmoothGradCamPp => "SmoothGradCAM++",
            MethodKind::ScoreCam => "Score-CAM",
            MethodKind::ReciproCam => "Recipro-CAM",
        })
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['_', ' '], "-");
        let key = key.replace("++", "-pp").replace("--", "-");
        MethodKind::ALL
            .into_iter()
            .find(|m| m.cli_name() == key || m.to_string().to_ascii_lowercase() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = MethodKind::ALL.iter().map(|m| m.cli_name()).collect();
                param_err!("unknown method '{s}', expected one of: {}", names.join(", "))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttributionMethod {
    GradCam,
    GradCamPp,
    SmoothGradCamPp {
        /// Number of noisy passes.
        samples: usize,
        /// Noise standard deviation relative to the image's value range.
        noise: f32,
    },
    ScoreCam {
        /// Run every Score-CAM pass with dropout disabled, whatever mode the
        /// caller asks for.
        freeze_dropout: bool,
    },
    ReciproCam,
}

impl AttributionMethod {
    pub fn kind(&self) -> MethodKind {
        match self {
            AttributionMethod::GradCam => MethodKind::GradCam,
            AttributionMethod::GradCamPp => MethodKind::GradCamPp,
            AttributionMethod::SmoothGradCamPp { .. } => MethodKind::SmoothGradCamPp,
            AttributionMethod::ScoreCam { .. } => MethodKind::ScoreCam,
            AttributionMethod::ReciproCam => MethodKind::ReciproCam,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let AttributionMethod::SmoothGradCamPp { samples, noise } = *self {
            if samples == 0 {
                return Err(param_err!("SmoothGrad-CAM++ needs at least one sample"));
            }
            if !(noise >= 0.0) || !noise.is_finite() {
                return Err(param_err!("SmoothGrad-CAM++ noise must be a finite value >= 0, got {noise}"));
            }
        }
        Ok(())
    }

    /// Dropout mode actually used by the method's passes.
    pub fn effective_mode(&self, mode: DropoutMode) -> DropoutMode {
        match self {
            AttributionMethod::ScoreCam {
                freeze_dropout: true,
            } => DropoutMode::Disabled,
            _ => mode,
        }
    }
}

impl From<MethodKind> for AttributionMethod {
    fn from(kind: MethodKind) -> Self {
        match kind {
            MethodKind::GradCam => AttributionMethod::GradCam,
            MethodKind::GradCamPp => AttributionMethod::GradCamPp,
            MethodKind::SmoothGradCamPp => AttributionMethod::SmoothGradCamPp {
                samples: 5,
                noise: 0.1,
            },
            MethodKind::ScoreCam => AttributionMethod::ScoreCam {
                freeze_dropout: true,
            },
            MethodKind::ReciproCam => AttributionMethod::ReciproCam,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassTarget {
    /// Argmax of the logits of the pass the map is computed from.
    Predicted,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub map: Map,
    pub method: MethodKind,
    pub class: usize,
    pub normalized: bool,
}

/// Saliency map for one image under one dropout configuration.
pub fn attribute(
    model: &Model,
    image: &Tensor,
    method: &AttributionMethod,
    layer: usize,
    target: ClassTarget,
    mode: DropoutMode,
    seed: u64,
) -> Result<SaliencyMap> {
    method.validate()?;
    let mode = method.effective_mode(mode);
    match *method {
        AttributionMethod::GradCam => {
            let (pass, class) = base_pass(model, image, layer, target, mode, seed)?;
            let (acts, grads) = activations_and_gradient(&pass, layer, class)?;
            let raw = grad_cam_raw(&acts, &grads)?;
            finish(model, raw, MethodKind::GradCam, class)
        }
        AttributionMethod::GradCamPp => grad_cam_pp(model, image, layer, target, mode, seed),
        AttributionMethod::SmoothGradCamPp { samples, noise } => {
            smooth_grad_cam_pp(model, image, layer, target, samples, noise, mode, seed)
        }
        AttributionMethod::ScoreCam { .. } => score_cam(model, image, layer, target, mode, seed),
        AttributionMethod::ReciproCam => recipro_cam(model, image, layer, target, mode, seed),
    }
}

fn check_layer(model: &Model, layer: usize) -> Result<()> {
    let shapes = model.spec.output_shapes()?;
    let shape = shapes
        .get(layer)
        .ok_or_else(|| param_err!("layer {layer} out of range"))?;
    if shape.len() != 4 {
        return Err(param_err!(
            "layer {layer} has output shape {shape:?}; CAM methods need a 4-D feature map"
        ));
    }
    if layer + 1 >= model.spec.layers.len() {
        return Err(param_err!("layer {layer} is the final layer"));
    }
    Ok(())
}

fn base_pass(
    model: &Model,
    image: &Tensor,
    layer: usize,
    target: ClassTarget,
    mode: DropoutMode,
    seed: u64,
) -> Result<(ForwardPass, usize)> {
    check_layer(model, layer)?;
    if image.dims4()?.0 != 1 {
        return Err(dim_err!("attribution works on a single image"));
    }
    let pass = model.forward(image, mode, seed)?;
    let logits = pass.graph.value(pass.logits()).data();
    let class = match target {
        ClassTarget::Predicted => argmax(logits),
        ClassTarget::Fixed(c) if c < logits.len() => c,
        ClassTarget::Fixed(c) => {
            return Err(param_err!("class {c} out of range for {} classes", logits.len()))
        }
    };
    Ok((pass, class))
}

/// Layer activations `[1,K,h,w]` and the gradient of the class logit
/// with respect to them.
fn activations_and_gradient(pass: &ForwardPass, layer: usize, class: usize) -> Result<(Tensor, Tensor)> {
    let node = pass.layer_output(layer)?;
    let grads = pass.graph.logit_gradient(pass.logits(), 0, class, node)?;
    Ok((pass.graph.value(node).clone(), grads))
}

fn finish(model: &Model, raw: Map, method: MethodKind, class: usize) -> Result<SaliencyMap> {
    let size = model.spec.input_size;
    let map = normalize_map(&upsample_bilinear(&raw, size, size));
    Ok(SaliencyMap {
        map,
        method,
        class,
        normalized: true,
    })
}

/// `ReLU(sum_k w_k A_k)` over the spatial extent of a `[1,K,h,w]` tensor.
pub fn weighted_activation_sum(acts: &Tensor, weights: &[f64]) -> Result<Map> {
    let (b, k, h, w) = acts.dims4()?;
    if b != 1 || weights.len() != k {
        return Err(dim_err!(
            "{} channel weights for activations {:?}",
            weights.len(),
            acts.shape()
        ));
    }
    let mut sum = vec![0.0f64; h * w];
    for (c, &wk) in weights.iter().enumerate() {
        for (s, &a) in sum.iter_mut().zip(acts.plane(0, c)) {
            *s += wk * a as f64;
        }
    }
    Map::new(h, w, sum.into_iter().map(|v| v.max(0.0) as f32).collect())
}

/// Grad-CAM channel weights: spatial mean of the gradient of each channel.
pub fn grad_cam_weights(grads: &Tensor) -> Result<Vec<f64>> {
    let (_, k, h, w) = grads.dims4()?;
    Ok((0..k)
        .map(|c| grads.plane(0, c).iter().map(|&g| g as f64).sum::<f64>() / (h * w) as f64)
        .collect())
}

pub fn grad_cam_raw(acts: &Tensor, grads: &Tensor) -> Result<Map> {
    if acts.shape() != grads.shape() {
        return Err(dim_err!("activation and gradient shapes differ"));
    }
    weighted_activation_sum(acts, &grad_cam_weights(grads)?)
}

/// Per-position gradient terms used by Grad-CAM++: `g`, `g^2` and `g^3`,
/// possibly averaged over several passes.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMoments {
    shape: Vec<usize>,
    first: Vec<f64>,
    second: Vec<f64>,
    third: Vec<f64>,
    count: usize,
}

impl GradientMoments {
    pub fn new(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        GradientMoments {
            shape: shape.to_vec(),
            first: vec![0.0; n],
            second: vec![0.0; n],
            third: vec![0.0; n],
            count: 0,
        }
    }

    pub fn accumulate(&mut self, grads: &Tensor) -> Result<()> {
        if grads.shape() != self.shape.as_slice() {
            return Err(dim_err!("gradient shape {:?} != {:?}", grads.shape(), self.shape));
        }
        for (i, &g) in grads.data().iter().enumerate() {
            let g = g as f64;
            let g2 = g * g;
            self.first[i] += g;
            self.second[i] += g2;
            self.third[i] += g2 * g;
        }
        self.count += 1;
        Ok(())
    }

    fn mean(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.count.max(1) as f64;
        let div = |v: &[f64]| v.iter().map(|x| x / n).collect::<Vec<_>>();
        (div(&self.first), div(&self.second), div(&self.third))
    }
}

/// Grad-CAM++ raw map:
/// `alpha = g2 / (2 g2 + sum_ab A(a,b) g3)` (zero where the denominator is
/// not above `ALPHA_EPS`), `w_k = sum_ij alpha * relu(g)`,
/// map `= ReLU(sum_k w_k A_k)`.
pub fn grad_cam_pp_raw(acts: &Tensor, moments: &GradientMoments) -> Result<Map> {
    let (_, k, h, w) = acts.dims4()?;
    if acts.shape() != moments.shape.as_slice() {
        return Err(dim_err!("activation and gradient shapes differ"));
    }
    let (g1, g2, g3) = moments.mean();
    let area = h * w;
    let weights: Vec<f64> = (0..k)
        .map(|c| {
            let a_sum: f64 = acts.plane(0, c).iter().map(|&a| a as f64).sum();
            (c * area..(c + 1) * area)
                .map(|i| {
                    let denom = 2.0 * g2[i] + a_sum * g3[i];
                    let alpha = if denom > ALPHA_EPS { g2[i] / denom } else { 0.0 };
                    alpha * g1[i].max(0.0)
                })
                .sum()
        })
        .collect();
    weighted_activation_sum(acts, &weights)
}

pub fn grad_cam_pp(
    model: &Model,
    image: &Tensor,
    layer: usize,
    target: ClassTarget,
    mode: DropoutMode,
    seed: u64,
) -> Result<SaliencyMap> {
    let (pass, class) = base_pass(model, image, layer, target, mode, seed)?;
    let (acts, grads) = activations_and_gradient(&pass, layer, class)?;
    let mut moments = GradientMoments::new(acts.shape());
    moments.accumulate(&grads)?;
    finish(model, grad_cam_pp_raw(&acts, &moments)?, MethodKind::GradCamPp, class)
}

/// Grad-CAM++ with gradient moments averaged over `samples` passes on
/// `image + N(0, (noise * range(image))^2)`. Activations come from the clean
/// pass; every pass reuses the dropout masks of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn smooth_grad_cam_pp(
    model: &Model,
    image: &Tensor,
    layer: usize,
    target: ClassTarget,
    samples: usize,
    noise: f32,
    mode: DropoutMode,
    seed: u64,
) -> Result<SaliencyMap> {
    AttributionMethod::SmoothGradCamPp { samples, noise }.validate()?;
    let (pass, class) = base_pass(model, image, layer, target, mode, seed)?;
    let node = pass.layer_output(layer)?;
    let acts = pass.graph.value(node).clone();
    let std = noise * (image.max_value() - image.min_value());
    let mut moments = GradientMoments::new(acts.shape());
    for i in 0..samples {
        let grads = if std > 0.0 {
            let normal = Normal::new(0.0f32, std).map_err(|e| param_err!("noise: {e}"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64 + 1));
            let noisy = Tensor::new(
                image.shape().to_vec(),
                image.data().iter().map(|&v| v + normal.sample(&mut rng)).collect(),
            )?;
            let noisy_pass = model.forward(&noisy, mode, seed)?;
            let noisy_node = noisy_pass.layer_output(layer)?;
            noisy_pass.graph.logit_gradient(noisy_pass.logits(), 0, class, noisy_node)?
        } else {
            pass.graph.logit_gradient(pass.logits(), 0, class, node)?
        };
        moments.accumulate(&grads)?;
    }
    finish(model, grad_cam_pp_raw(&acts, &moments)?, MethodKind::SmoothGradCamPp, class)
}

/// `X ⊙ M`, broadcasting a `H x W` mask over the channels of `[1,C,H,W]`.
pub fn mask_image(image: &Tensor, mask: &Map) -> Result<Tensor> {
    let (b, c, h, w) = image.dims4()?;
    if mask.height != h || mask.width != w {
        return Err(dim_err!(
            "mask is {}x{}, image is {h}x{w}",
            mask.height,
            mask.width
        ));
    }
    let mut out = image.clone().with_requires_grad(false);
    for plane in out.data_mut().chunks_mut(h * w).take(b * c) {
        for (v, &m) in plane.iter_mut().zip(&mask.data) {
            *v *= m;
        }
    }
    Ok(out)
}

fn class_probability(logits: &[f32], class: usize) -> f64 {
    softmax_f64(logits)[class]
}

/// Score-CAM: each channel's upsampled, normalised activation masks the
/// input; the class probability of the masked input, softmax-normalised
/// over channels, weights the channel. One base pass plus one pass per
/// channel, all with the same dropout seed.
pub fn score_cam(
    model: &Model,
    image: &Tensor,
    layer: usize,
    target: ClassTarget,
    mode: DropoutMode,
    seed: u64,
) -> Result<SaliencyMap> {
    let (pass, class) = base_pass(model, image, layer, target, mode, seed)?;
    let acts = pass.graph.value(pass.layer_output(layer)?).clone();
    drop(pass);
    let (_, k, h, w) = acts.dims4()?;
    let size = model.spec.input_size;
    let mut scores = Vec::with_capacity(k);
    for c in 0..k {
        let channel = Map::new(h, w, acts.plane(0, c).to_vec())?;
        let mask = normalize_map(&upsample_bilinear(&channel, size, size));
        let masked = mask_image(image, &mask)?;
        let logits = model.logits(&masked, mode, seed)?;
        scores.push(class_probability(&logits, class));
    }
    let weights = softmax_over(&scores);
    let raw = weighted_activation_sum(&acts, &weights)?;
    finish(model, raw, MethodKind::ScoreCam, class)
}

fn softmax_over(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Recipro-CAM: for each feature position keep only that position's
/// channel column, run the rest of the network from the layer, and record
/// the class probability.
pub fn recipro_cam(
    model: &Model,
    image: &Tensor,
    layer: usize,
    target: ClassTarget,
    mode: DropoutMode,
    seed: u64,
) -> Result<SaliencyMap> {
    let (pass, class) = base_pass(model, image, layer, target, mode, seed)?;
    let acts = pass.graph.value(pass.layer_output(layer)?).clone();
    drop(pass);
    let (_, k, h, w) = acts.dims4()?;
    let mut raw = Vec::with_capacity(h * w);
    let mut feature = Tensor::zeros(acts.shape());
    for pos in 0..h * w {
        for c in 0..k {
            feature.data_mut()[c * h * w + pos] = acts.data()[c * h * w + pos];
        }
        let logits = model.forward_tail(layer, &feature, mode, seed)?;
        raw.push(class_probability(logits.data(), class) as f32);
        for c in 0..k {
            feature.data_mut()[c * h * w + pos] = 0.0;
        }
    }
    finish(model, Map::new(h, w, raw)?, MethodKind::ReciproCam, class)
}
