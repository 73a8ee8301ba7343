//! Monte-Carlo dropout PA volumes and their per-pixel statistics.
//!
//! A volume holds `T` saliency maps, each computed with dropout enabled and
//! its own seed. The per-pixel mean is the enhanced map; the per-pixel
//! coefficient of variation `std / mean` is the risk map.

use crate::attrib::{attribute, normalize_map, AttributionMethod, ClassTarget, Map, MethodKind, SaliencyMap};
use crate::error::{dim_err, param_err, Result};
use crate::model::Model;
use crate::tensor::{DropoutMode, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_PASSES: usize = 10;
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    /// Number of Monte-Carlo passes `T`.
    pub passes: usize,
    /// Slice `t` (1-based) uses seed `base_seed + t`.
    pub base_seed: u64,
    /// Expectation below which the CV is reported as undefined.
    pub eps: f64,
    pub method: AttributionMethod,
    /// Attribution layer; the model's last conv block when `None`.
    pub layer: Option<usize>,
    pub class: ClassTarget,
    /// Compute slices on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl RiskConfig {
    pub fn new(method: AttributionMethod) -> Self {
        RiskConfig {
            passes: DEFAULT_PASSES,
            base_seed: 0,
            eps: DEFAULT_EPS,
            method,
            layer: None,
            class: ClassTarget::Predicted,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.passes < 1 {
            return Err(param_err!("T must be at least 1"));
        }
        if !(self.eps > 0.0) {
            return Err(param_err!("eps must be positive, got {}", self.eps));
        }
        self.method.validate()
    }

    pub fn slice_seed(&self, t: usize) -> u64 {
        self.base_seed.wrapping_add(t as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaVolume {
    pub slices: Vec<SaliencyMap>,
    pub seeds: Vec<u64>,
    pub method: MethodKind,
}

impl PaVolume {
    pub fn new(slices: Vec<SaliencyMap>, seeds: Vec<u64>) -> Result<Self> {
        let first = slices.first().ok_or_else(|| param_err!("empty PA volume"))?;
        if seeds.len() != slices.len() {
            return Err(param_err!("{} seeds for {} slices", seeds.len(), slices.len()));
        }
        if slices.iter().any(|s| !s.map.same_shape(&first.map)) {
            return Err(dim_err!("PA volume slices differ in shape"));
        }
        Ok(PaVolume {
            method: first.method,
            slices,
            seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    fn dims(&self) -> (usize, usize) {
        (self.slices[0].map.height, self.slices[0].map.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskResult {
    pub expectation: Map,
    pub variance: Map,
    pub cv: Map,
    /// Pixels whose expectation is below `eps`; their CV is reported as 0.
    pub undefined_mask: Vec<bool>,
    pub passes: usize,
    pub eps: f64,
}

impl RiskResult {
    pub fn undefined_fraction(&self) -> f64 {
        self.undefined_mask.iter().filter(|&&u| u).count() as f64 / self.undefined_mask.len() as f64
    }
}

/// One saliency map per Monte-Carlo pass.
pub fn pa_volume(model: &Model, image: &Tensor, config: &RiskConfig) -> Result<PaVolume> {
    pa_volume_with_mode(model, image, config, DropoutMode::McEnabled)
}

pub(crate) fn pa_volume_with_mode(
    model: &Model,
    image: &Tensor,
    config: &RiskConfig,
    mode: DropoutMode,
) -> Result<PaVolume> {
    config.validate()?;
    let layer = config
        .layer
        .unwrap_or_else(|| model.spec.default_attribution_layer());
    let seeds: Vec<u64> = (1..=config.passes).map(|t| config.slice_seed(t)).collect();
    let slice = |&seed: &u64| attribute(model, image, &config.method, layer, config.class, mode, seed);
    let slices = if config.parallel {
        seeds.par_iter().map(slice).collect::<Result<Vec<_>>>()?
    } else {
        seeds.iter().map(slice).collect::<Result<Vec<_>>>()?
    };
    PaVolume::new(slices, seeds)
}

/// Per-pixel mean over the slices, summed in `f64` in slice order.
pub fn expectation_map(volume: &PaVolume) -> Map {
    let (h, w) = volume.dims();
    let t = volume.len() as f64;
    let mut sum = vec![0.0f64; h * w];
    for s in &volume.slices {
        for (acc, &v) in sum.iter_mut().zip(&s.map.data) {
            *acc += v as f64;
        }
    }
    Map {
        height: h,
        width: w,
        data: sum.into_iter().map(|v| (v / t) as f32).collect(),
    }
}

/// Per-pixel population variance `E[s^2] - E[s]^2`, clamped at zero.
pub fn variance_map(volume: &PaVolume) -> Map {
    let (h, w) = volume.dims();
    let var = population_variance(volume.slices.iter().map(|s| s.map.data.as_slice()), h * w, volume.len());
    Map {
        height: h,
        width: w,
        data: var.into_iter().map(|v| v as f32).collect(),
    }
}

/// One-pass population variance of `count` equally long series. Values are
/// shifted by the first series before squaring, which keeps the formula
/// stable and makes constant series come out as exactly zero.
fn population_variance<'a>(
    mut series: impl Iterator<Item = &'a [f32]>,
    len: usize,
    count: usize,
) -> Vec<f64> {
    let Some(first) = series.next() else {
        return vec![0.0; len];
    };
    let shift: Vec<f64> = first.iter().map(|&v| v as f64).collect();
    let mut sum = vec![0.0f64; len];
    let mut sum_sq = vec![0.0f64; len];
    for s in series {
        for (i, &v) in s.iter().enumerate() {
            let d = v as f64 - shift[i];
            sum[i] += d;
            sum_sq[i] += d * d;
        }
    }
    let n = count as f64;
    sum_sq
        .iter()
        .zip(&sum)
        .map(|(sq, s)| {
            let m = s / n;
            (sq / n - m * m).max(0.0)
        })
        .collect()
}

/// Coefficient of variation `sqrt(variance) / expectation`. Where the
/// expectation is below `eps` the CV is 0 and the pixel is flagged.
pub fn cv_map(expectation: &Map, variance: &Map, eps: f64) -> Result<(Map, Vec<bool>)> {
    if !(eps > 0.0) {
        return Err(param_err!("eps must be positive, got {eps}"));
    }
    if !expectation.same_shape(variance) {
        return Err(dim_err!("expectation and variance maps differ in shape"));
    }
    let mut undefined = Vec::with_capacity(expectation.data.len());
    let data = expectation
        .data
        .iter()
        .zip(&variance.data)
        .map(|(&e, &v)| {
            let e = e as f64;
            if e < eps {
                undefined.push(true);
                0.0
            } else {
                undefined.push(false);
                ((v as f64).max(0.0).sqrt() / e) as f32
            }
        })
        .collect();
    Ok((
        Map {
            height: expectation.height,
            width: expectation.width,
            data,
        },
        undefined,
    ))
}

pub fn risk_from_volume(volume: &PaVolume, eps: f64) -> Result<RiskResult> {
    let expectation = expectation_map(volume);
    let variance = variance_map(volume);
    let (cv, undefined_mask) = cv_map(&expectation, &variance, eps)?;
    Ok(RiskResult {
        expectation,
        variance,
        cv,
        undefined_mask,
        passes: volume.len(),
        eps,
    })
}

/// Enhanced map (re-normalised expectation) and the risk statistics.
pub fn explain_with_risk(model: &Model, image: &Tensor, config: &RiskConfig) -> Result<(SaliencyMap, RiskResult)> {
    let volume = pa_volume(model, image, config)?;
    enhance(&volume, config.eps)
}

pub fn enhance(volume: &PaVolume, eps: f64) -> Result<(SaliencyMap, RiskResult)> {
    let risk = risk_from_volume(volume, eps)?;
    let enhanced = SaliencyMap {
        map: normalize_map(&risk.expectation),
        method: volume.method,
        class: volume.slices[0].class,
        normalized: true,
    };
    Ok((enhanced, risk))
}
