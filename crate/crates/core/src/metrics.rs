//! ADCC evaluation: Average Drop, Coherency, Complexity and their harmonic
//! mean, plus the per-map latency protocol.
//!
//! All metrics are stored in `[0, 1]`; the x100 scale is applied only when
//! results are written out.

use crate::attrib::{attribute, mask_image, AttributionMethod, ClassTarget, Map, MethodKind, SaliencyMap};
use crate::error::{dim_err, Error, Result};
use crate::model::Model;
use crate::risk::{explain_with_risk, RiskConfig};
use crate::tensor::{DropoutMode, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub architecture: String,
    pub method: MethodKind,
    /// Whether the map came from the Monte-Carlo pipeline.
    pub mc: bool,
    pub coherency: f64,
    pub complexity: f64,
    pub average_drop: f64,
    pub adcc: f64,
    /// Median wall-clock time to compute one map, when measured.
    pub latency_ms: Option<f64>,
    /// Images whose coherency or ADCC was undefined and scored as 0.
    pub degenerate_count: usize,
    pub images: usize,
}

impl MetricsReport {
    /// ADCC recomputed from the three stored components.
    pub fn recomputed_adcc(&self) -> f64 {
        adcc_or_zero(self.coherency, self.complexity, self.average_drop)
    }

    /// Mean of each component over `reports`, with ADCC recomputed from the
    /// means. Latency is averaged over the reports that measured it.
    pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Parameter("nothing to aggregate".into()))?;
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let coherency = mean(|r| r.coherency);
        let complexity = mean(|r| r.complexity);
        let average_drop = mean(|r| r.average_drop);
        let timed: Vec<f64> = reports.iter().filter_map(|r| r.latency_ms).collect();
        let latency_ms = (!timed.is_empty()).then(|| timed.iter().sum::<f64>() / timed.len() as f64);
        Ok(MetricsReport {
            architecture: first.architecture.clone(),
            method: first.method,
            mc: first.mc,
            coherency,
            complexity,
            average_drop,
            adcc: adcc_or_zero(coherency, complexity, average_drop),
            latency_ms,
            degenerate_count: reports.iter().map(|r| r.degenerate_count).sum(),
            images: reports.iter().map(|r| r.images).sum(),
        })
    }
}

/// `X ⊙ S`, broadcast over channels.
pub fn masked_input(image: &Tensor, map: &SaliencyMap) -> Result<Tensor> {
    mask_image(image, &map.map)
}

/// Relative drop of the class score, clamped at 0: `max(0, full - masked) / full`.
pub fn average_drop(score_full: f64, score_masked: f64) -> Result<f64> {
    if !(score_full > 0.0) {
        return Err(Error::Domain(format!(
            "average drop needs a positive full-image score, got {score_full}"
        )));
    }
    Ok(((score_full - score_masked).max(0.0) / score_full).min(1.0))
}

/// Pearson correlation of two equally shaped maps.
pub fn pearson(a: &Map, b: &Map) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(dim_err!("coherency maps differ in shape"));
    }
    if a.is_constant() || b.is_constant() {
        return Err(Error::CoherencyUndefined(
            "Pearson correlation of a constant map".into(),
        ));
    }
    let (ma, mb) = (a.mean(), b.mean());
    let (mut cov, mut va, mut vb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::CoherencyUndefined("zero variance".into()));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between the map of the masked input and the map of
/// the full input, rescaled from `[-1, 1]` to `[0, 1]`.
pub fn coherency(map_on_masked: &Map, map_on_full: &Map) -> Result<f64> {
    Ok((pearson(map_on_masked, map_on_full)? + 1.0) / 2.0)
}

/// Mean absolute value of the map, i.e. its L1 norm over the pixel count.
pub fn complexity(map: &Map) -> f64 {
    map.data.iter().map(|v| v.abs() as f64).sum::<f64>() / map.data.len() as f64
}

/// Harmonic mean of coherency, `1 - complexity` and `1 - average_drop`.
pub fn adcc(coherency: f64, complexity: f64, average_drop: f64) -> Result<f64> {
    let terms = [coherency, 1.0 - complexity, 1.0 - average_drop];
    if terms.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Domain(format!(
            "ADCC undefined for coherency {coherency}, complexity {complexity}, average drop {average_drop}"
        )));
    }
    Ok(3.0 / terms.iter().map(|t| 1.0 / t).sum::<f64>())
}

/// ADCC with undefined cases scored as 0.
pub fn adcc_or_zero(coherency: f64, complexity: f64, average_drop: f64) -> f64 {
    adcc(coherency, complexity, average_drop).unwrap_or(0.0)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation, with tied values given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(dim_err!("spearman needs two series of equal length >= 2"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Domain("spearman of NaN values".into()));
    }
    let to_map = |v: Vec<f64>| Map::new(1, v.len(), v.into_iter().map(|r| r as f32).collect());
    pearson(&to_map(ranks(x))?, &to_map(ranks(y))?).map_err(|_| Error::Domain("spearman of a constant series".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Timing { warmup: 1, runs: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub method: AttributionMethod,
    pub layer: Option<usize>,
    /// Monte-Carlo pipeline (`true`) or a single pass with dropout disabled.
    pub mc: bool,
    pub passes: usize,
    pub seed: u64,
    pub timing: Option<Timing>,
    pub architecture: String,
}

impl EvalConfig {
    pub fn new(method: AttributionMethod, mc: bool) -> Self {
        EvalConfig {
            method,
            layer: None,
            mc,
            passes: crate::risk::DEFAULT_PASSES,
            seed: 7,
            timing: None,
            architecture: "toy-cnn".into(),
        }
    }

    fn risk_config(&self, class: ClassTarget) -> RiskConfig {
        RiskConfig {
            passes: self.passes,
            base_seed: self.seed,
            layer: self.layer,
            class,
            ..RiskConfig::new(self.method)
        }
    }
}

/// The map under evaluation: a single dropout-free pass, or the enhanced
/// map of the Monte-Carlo pipeline.
pub fn compute_map(model: &Model, image: &Tensor, config: &EvalConfig, class: ClassTarget) -> Result<SaliencyMap> {
    if config.mc {
        Ok(explain_with_risk(model, image, &config.risk_config(class))?.0)
    } else {
        let layer = config
            .layer
            .unwrap_or_else(|| model.spec.default_attribution_layer());
        attribute(model, image, &config.method, layer, class, DropoutMode::Disabled, config.seed)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median wall-clock milliseconds of `f` after `timing.warmup` untimed calls.
pub fn measure_latency<T>(timing: Timing, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    for _ in 0..timing.warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(timing.runs.max(1));
    for _ in 0..timing.runs.max(1) {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

/// Scores one method on one image.
///
/// The class `c` is the dropout-free prediction on the full image. Average
/// Drop compares the dropout-free probability of `c` on `X` and on
/// `X ⊙ S`; Coherency reruns the same pipeline on `X ⊙ S` for class `c`.
pub fn evaluate_method(model: &Model, image: &Tensor, config: &EvalConfig) -> Result<MetricsReport> {
    let (full, _) = model.predict(image, DropoutMode::Disabled, 0)?;
    let class = full.class;
    let map = compute_map(model, image, config, ClassTarget::Predicted)?;
    let masked = masked_input(image, &map)?;
    let (masked_pred, _) = model.predict(&masked, DropoutMode::Disabled, 0)?;
    let ad = average_drop(full.probabilities[class] as f64, masked_pred.probabilities[class] as f64)?;
    let comp = complexity(&map.map);
    let masked_map = compute_map(model, &masked, config, ClassTarget::Fixed(class))?;

    let mut degenerate = false;
    let coh = match coherency(&masked_map.map, &map.map) {
        Ok(c) => c,
        Err(Error::CoherencyUndefined(why)) => {
            log::info!("{} (mc={}): coherency undefined ({why}); scored as 0", config.method.kind(), config.mc);
            degenerate = true;
            0.0
        }
        Err(e) => return Err(e),
    };
    let score = match adcc(coh, comp, ad) {
        Ok(v) => v,
        Err(e) => {
            if !degenerate {
                log::info!("{}: {e}; scored as 0", config.method.kind());
            }
            degenerate = true;
            0.0
        }
    };
    let latency_ms = match config.timing {
        Some(t) => Some(measure_latency(t, || compute_map(model, image, config, ClassTarget::Predicted))?),
        None => None,
    };
    Ok(MetricsReport {
        architecture: config.architecture.clone(),
        method: config.method.kind(),
        mc: config.mc,
        coherency: coh,
        complexity: comp,
        average_drop: ad,
        adcc: score,
        latency_ms,
        degenerate_count: degenerate as usize,
        images: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, LayerParams, ModelSpec, WeightStore};
    use proptest::prelude::*;

    fn map(h: usize, w: usize, d: &[f32]) -> Map {
        Map::new(h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn masked_input_examples() {
        let img = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f32 - 4.0);
        let wrap = |m: Map| SaliencyMap {
            map: m,
            method: MethodKind::GradCam,
            class: 0,
            normalized: true,
        };
        assert_eq!(masked_input(&img, &wrap(Map::filled(2, 2, 1.0))).unwrap(), img);
        assert!(masked_input(&img, &wrap(Map::zeros(2, 2))).unwrap().data().iter().all(|&v| v == 0.0));
        let half = masked_input(&img, &wrap(Map::filled(2, 2, 0.5))).unwrap();
        for (a, b) in half.data().iter().zip(img.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        assert!(matches!(masked_input(&img, &wrap(Map::zeros(3, 2))), Err(Error::Dimension(_))));
    }

    #[test]
    fn average_drop_examples() {
        assert_eq!(average_drop(0.8, 0.8).unwrap(), 0.0);
        assert_eq!(average_drop(0.5, 0.9).unwrap(), 0.0);
        assert!((average_drop(0.8, 0.6).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(average_drop(0.0, 0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn coherency_examples() {
        let a = map(2, 2, &[0.1, 0.9, 0.4, 0.3]);
        assert!((coherency(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = map(2, 2, &[0.9, 0.1, 0.6, 0.7]);
        assert!(coherency(&a, &inv).unwrap().abs() < 1e-7);
        let x = map(2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let y = map(2, 2, &[0.0, 2.0, 4.0, 6.0]);
        assert!((coherency(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(coherency(&Map::filled(2, 2, 0.3), &x), Err(Error::CoherencyUndefined(_))));
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(complexity(&Map::zeros(3, 3)), 0.0);
        assert_eq!(complexity(&Map::filled(3, 3, 1.0)), 1.0);
        assert_eq!(complexity(&map(2, 2, &[1.0, 1.0, 0.0, 0.0])), 0.5);
    }

    #[test]
    fn adcc_examples() {
        assert_eq!(adcc(1.0, 0.0, 0.0).unwrap(), 1.0);
        let v = adcc(0.9, 0.3, 0.1).unwrap();
        let oracle = 3.0 / (1.0 / 0.9 + 1.0 / 0.7 + 1.0 / 0.9);
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.8217).abs() < 1e-4);
        assert!((adcc(0.8, 0.3, 0.1).unwrap() - adcc(0.8, 0.1, 0.3).unwrap()).abs() < 1e-12);
        assert!(matches!(adcc(0.0, 0.3, 0.1), Err(Error::Domain(_))));
        assert!(matches!(adcc(0.5, 1.0, 0.1), Err(Error::Domain(_))));
        assert_eq!(adcc_or_zero(0.5, 0.2, 1.0), 0.0);
    }

    #[test]
    fn aggregate_recomputes_adcc() {
        let r = |coh: f64, comp: f64, ad: f64| MetricsReport {
            architecture: "x".into(),
            method: MethodKind::GradCam,
            mc: false,
            coherency: coh,
            complexity: comp,
            average_drop: ad,
            adcc: adcc_or_zero(coh, comp, ad),
            latency_ms: Some(2.0),
            degenerate_count: 0,
            images: 1,
        };
        let agg = MetricsReport::aggregate(&[r(0.9, 0.3, 0.1), r(0.7, 0.5, 0.3)]).unwrap();
        assert!((agg.coherency - 0.8).abs() < 1e-12);
        assert!((agg.adcc - agg.recomputed_adcc()).abs() < 1e-12);
        assert_eq!(agg.images, 2);
        assert_eq!(agg.latency_ms, Some(2.0));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // classic textbook value: 1 - 6*sum(d^2)/(n(n^2-1)) with d = (0, -1, 1, 0, 0)
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 4.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-6);
        let tied = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(tied > 0.9 && tied < 1.0);
        assert!(matches!(spearman(&[1.0, 2.0], &[5.0, 5.0]), Err(Error::Domain(_))));
        assert!(matches!(spearman(&[1.0], &[5.0]), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn average_drop_scale_invariant(full in 0.01f64..1.0, masked in 0.0f64..1.0, s in 0.1f64..10.0) {
            let a = average_drop(full, masked).unwrap();
            let b = average_drop(full * s, masked * s).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn complexity_bounded(data in proptest::collection::vec(0.0f32..=1.0, 16)) {
            let m = map(4, 4, &data);
            let c = complexity(&m);
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert_eq!(c == 1.0, data.iter().all(|&v| v == 1.0));
        }
    }

    /// A model whose output ignores the input: conv with zero kernel.
    fn constant_model() -> Model {
        let spec = ModelSpec {
            in_channels: 1,
            input_size: 4,
            classes: 2,
            layers: vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Dropout { p: 0.2 },
                Layer::GlobalAvgPool,
                Layer::Linear {
                    in_features: 2,
                    out_features: 2,
                },
            ],
        };
        let weights = WeightStore {
            version: 1,
            seed: 0,
            params: vec![
                Some(LayerParams {
                    weight: Tensor::zeros(&[2, 1, 3, 3]),
                    bias: Tensor::vector(vec![0.5, 0.25]),
                }),
                None,
                None,
                None,
                Some(LayerParams {
                    weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                    bias: Tensor::vector(vec![0.0, 0.0]),
                }),
            ],
        };
        Model::from_parts(spec, weights).unwrap()
    }

    #[test]
    fn input_invariant_model_has_no_drop() {
        let model = constant_model();
        let img = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32 / 16.0);
        for kind in MethodKind::ALL {
            let mut cfg = EvalConfig::new(kind.into(), false);
            cfg.layer = Some(1);
            let report = evaluate_method(&model, &img, &cfg).unwrap();
            assert_eq!(report.average_drop, 0.0);
            assert!((report.adcc - report.recomputed_adcc()).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = crate::model::build_default_model(3, 32, 5).unwrap();
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 31) % 53) as f32 / 53.0);
        for mc in [false, true] {
            let mut cfg = EvalConfig::new(MethodKind::GradCam.into(), mc);
            cfg.passes = 3;
            let a = evaluate_method(&model, &img, &cfg).unwrap();
            let b = evaluate_method(&model, &img, &cfg).unwrap();
            assert_eq!(a, b);
            assert!((a.adcc - a.recomputed_adcc()).abs() < 1e-9);
        }
    }

    #[test]
    fn latency_is_measured_when_requested() {
        let model = crate::model::build_default_model(3, 32, 5).unwrap();
        let img = Tensor::full(&[1, 3, 32, 32], 0.3);
        let mut cfg = EvalConfig::new(MethodKind::GradCam.into(), false);
        cfg.timing = Some(Timing::default());
        let r = evaluate_method(&model, &img, &cfg).unwrap();
        assert!(r.latency_ms.unwrap() > 0.0);
    }
}
