//! Acceptance criteria A1-A7. Each test prints one `PASS`/`FAIL` line.
//!
//! Run with `cargo test -p riskcam-cli --test acceptance -- --nocapture`
//! to see the lines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskcam::attrib::{self, AttributionMethod, ClassTarget, Map, MethodKind, SaliencyMap};
use riskcam::io::{self, Dataset};
use riskcam::metrics::{self, EvalConfig, MetricsReport, Timing};
use riskcam::model::{self, Model};
use riskcam::risk::{self, PaVolume, RiskConfig};
use riskcam::tensor::{ops, DropoutMode, Graph};
use riskcam::Tensor;
use riskcam_cli::{evaluate_model, heldout_seed, train_model, TrainArgs};
use std::sync::OnceLock;
use std::time::Instant;

fn verdict(id: &str, pass: bool, detail: &str) {
    println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0f32) * scale)
}

// ---------------------------------------------------------------- f64 oracle

fn conv_f64(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [o, _, kh, kw] = ks;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ic) * h + iy as usize) * w + ix as usize]
                                    * k[((oc * c + ic) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

fn maxpool_f64(x: &[f64], s: [usize; 4]) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = s;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[(p * h + 2 * y + dy) * w + 2 * xx + dx]);
                    }
                }
                out[(p * oh + y) * ow + xx] = m;
            }
        }
    }
    (out, [n, c, oh, ow])
}

fn gap_f64(x: &[f64], s: [usize; 4]) -> Vec<f64> {
    let plane = s[2] * s[3];
    (0..s[0] * s[1]).map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64).collect()
}

fn linear_f64(x: &[f64], w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let f = x.len();
    (0..k).map(|o| b[o] + (0..f).map(|i| w[o * f + i] * x[i]).sum::<f64>()).collect()
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn shape4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// conv(2->3) relu pool conv(3->4) relu gap linear(4->3) softmax, then the
/// dot product with `r`.
struct SmallCnn {
    params: Vec<Tensor>,
    r: Vec<f64>,
}

impl SmallCnn {
    fn loss_f64(&self, p: &[Vec<f64>]) -> f64 {
        let s = |i: usize| shape4(&self.params[i]);
        let (h, hs) = conv_f64(&p[0], s(0), &p[1], s(1), &p[2], 1, 1);
        let h: Vec<f64> = h.into_iter().map(|v| v.max(0.0)).collect();
        let (h, hs) = maxpool_f64(&h, hs);
        let (h, hs) = conv_f64(&h, hs, &p[3], s(3), &p[4], 1, 1);
        let h: Vec<f64> = h.into_iter().map(|v| v.max(0.0)).collect();
        let g = gap_f64(&h, hs);
        let z = linear_f64(&g, &p[5], &p[6], self.r.len());
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.iter().zip(&self.r).map(|(a, r)| a / sum * r).sum()
    }

    fn autodiff(&self) -> Vec<Tensor> {
        let mut g = Graph::new();
        let ids: Vec<_> = self.params.iter().map(|t| g.leaf(t.clone())).collect();
        let h = g.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.max_pool2x2(h).unwrap();
        let h = g.conv2d(h, ids[3], ids[4], 1, 1).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.global_avg_pool(h).unwrap();
        let z = g.linear(h, ids[5], ids[6]).unwrap();
        let y = g.softmax(z).unwrap();
        let seed = Tensor::new(vec![1, self.r.len()], self.r.iter().map(|&v| v as f32).collect()).unwrap();
        let mut grads = g.backward(y, seed, &ids).unwrap();
        ids.iter().map(|&id| grads.take(id).unwrap()).collect()
    }
}

fn a1_gradient_check() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = vec![
        random_tensor(&[1, 2, 8, 8], &mut rng, 1.0),
        random_tensor(&[3, 2, 3, 3], &mut rng, 0.5),
        random_tensor(&[3], &mut rng, 0.1),
        random_tensor(&[4, 3, 3, 3], &mut rng, 0.5),
        random_tensor(&[4], &mut rng, 0.1),
        random_tensor(&[3, 4], &mut rng, 1.0),
        random_tensor(&[3], &mut rng, 0.1),
    ];
    let r: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let net = SmallCnn { params, r };
    let analytic = net.autodiff();
    let base: Vec<Vec<f64>> = net.params.iter().map(f64s).collect();
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..base[pi].len() {
            let mut p = base.clone();
            p[pi][i] += h;
            let up = net.loss_f64(&p);
            p[pi][i] -= 2.0 * h;
            let down = net.loss_f64(&p);
            let fd = (up - down) / (2.0 * h);
            let a = grad.data()[i] as f64;
            let denom = a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((a - fd).abs() / denom);
            checked += 1;
        }
    }
    (worst < 1e-3, format!("max relative error {worst:.2e} over {checked} parameters"))
}

fn a1_naive_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)] {
        let x = random_tensor(&[2, 3, 9, 9], &mut rng, 1.0);
        let w = random_tensor(&[4, 3, k, k], &mut rng, 1.0);
        let b = random_tensor(&[4], &mut rng, 1.0);
        let got = ops::conv2d(&x, &w, &b, stride, pad).unwrap();
        let (want, _) = conv_f64(&f64s(&x), shape4(&x), &f64s(&w), shape4(&w), &f64s(&b), stride, pad);
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((*g as f64 - w).abs() / w.abs().max(1.0));
        }
    }
    let x = random_tensor(&[2, 3, 6, 8], &mut rng, 1.0);
    let (pooled, _) = ops::max_pool2x2(&x).unwrap();
    let (want, _) = maxpool_f64(&f64s(&x), shape4(&x));
    for (g, w) in pooled.data().iter().zip(&want) {
        worst = worst.max((*g as f64 - w).abs());
    }
    let gap = ops::global_avg_pool(&x).unwrap();
    for (g, w) in gap.data().iter().zip(gap_f64(&f64s(&x), shape4(&x))) {
        worst = worst.max((*g as f64 - w).abs());
    }
    let xin = random_tensor(&[1, 12], &mut rng, 1.0);
    let wl = random_tensor(&[5, 12], &mut rng, 1.0);
    let bl = random_tensor(&[5], &mut rng, 1.0);
    let lin = ops::linear(&xin, &wl, &bl).unwrap();
    for (g, w) in lin.data().iter().zip(linear_f64(&f64s(&xin), &f64s(&wl), &f64s(&bl), 5)) {
        worst = worst.max((*g as f64 - w).abs() / w.abs().max(1.0));
    }
    (worst < 1e-6, format!("max deviation from naive oracles {worst:.2e}"))
}

#[test]
fn a1_numerical_core() {
    let start = Instant::now();
    let (grad_ok, grad_detail) = a1_gradient_check();
    let (oracle_ok, oracle_detail) = a1_naive_oracles();
    let secs = start.elapsed().as_secs_f64();
    let pass = grad_ok && oracle_ok && secs < 30.0;
    verdict("A1", pass, &format!("{grad_detail}; {oracle_detail}; {secs:.1}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- A2

fn adcc_oracle(c: f64, x: f64, d: f64) -> f64 {
    3.0 / (1.0 / c + 1.0 / (1.0 - x) + 1.0 / (1.0 - d))
}

#[test]
fn a2_metric_arithmetic() {
    let tol = 1e-6;
    let mut failures = Vec::new();
    fn check(failures: &mut Vec<String>, name: &str, got: f64, want: f64, tol: f64) {
        if (got - want).abs() > tol {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    }
    let img = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f32 * 0.1 - 0.3);
    let wrap = |m: Map| SaliencyMap {
        map: m,
        method: MethodKind::GradCam,
        class: 0,
        normalized: true,
    };
    let ones = metrics::masked_input(&img, &wrap(Map::filled(2, 2, 1.0))).unwrap();
    let zeros = metrics::masked_input(&img, &wrap(Map::zeros(2, 2))).unwrap();
    let half = metrics::masked_input(&img, &wrap(Map::filled(2, 2, 0.5))).unwrap();
    for i in 0..img.len() {
        check(&mut failures, "mask ones", ones.data()[i] as f64, img.data()[i] as f64, 0.0);
        check(&mut failures, "mask zeros", zeros.data()[i] as f64, 0.0, 0.0);
        check(&mut failures, "mask half", half.data()[i] as f64, 0.5 * img.data()[i] as f64, tol);
    }
    check(&mut failures, "ad equal", metrics::average_drop(0.7, 0.7).unwrap(), 0.0, tol);
    check(&mut failures, "ad clamp", metrics::average_drop(0.5, 0.9).unwrap(), 0.0, tol);
    check(&mut failures, "ad 0.8/0.6", metrics::average_drop(0.8, 0.6).unwrap(), 0.25, tol);
    let a = Map::new(2, 2, vec![0.2, 0.9, 0.4, 0.1]).unwrap();
    let inv = Map::new(2, 2, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    check(&mut failures, "coh self", metrics::coherency(&a, &a).unwrap(), 1.0, tol);
    check(&mut failures, "coh inverse", metrics::coherency(&a, &inv).unwrap(), 0.0, tol);
    let x = Map::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = Map::new(2, 2, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
    check(&mut failures, "coh linear", metrics::coherency(&x, &y).unwrap(), 1.0, tol);
    check(&mut failures, "comp zeros", metrics::complexity(&Map::zeros(2, 2)), 0.0, tol);
    check(&mut failures, "comp ones", metrics::complexity(&Map::filled(2, 2, 1.0)), 1.0, tol);
    check(&mut failures, "comp half", metrics::complexity(&Map::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap()), 0.5, tol);
    check(&mut failures, "adcc perfect", metrics::adcc(1.0, 0.0, 0.0).unwrap(), 1.0, tol);
    let v = metrics::adcc(0.9, 0.3, 0.1).unwrap();
    check(&mut failures, "adcc oracle", v, adcc_oracle(0.9, 0.3, 0.1), tol);
    check(&mut failures, "adcc 4dp", (v * 1e4).round() / 1e4, 0.8217, 1e-12);
    if format!("{:.1}", v * 100.0) != "82.2" {
        failures.push("adcc rendering".into());
    }
    check(&mut failures, "adcc symmetry", metrics::adcc(0.8, 0.2, 0.4).unwrap(), metrics::adcc(0.8, 0.4, 0.2).unwrap(), 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut recomposition = 0.0f64;
    let mut monotone_violations = 0;
    for _ in 0..1000 {
        let (c, x, d) = (
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        );
        let delta = rng.random_range(0.001..0.04);
        let base = metrics::adcc(c, x, d).unwrap();
        recomposition = recomposition.max((base - adcc_oracle(c, x, d)).abs());
        if metrics::adcc(c + delta, x, d).unwrap() <= base
            || metrics::adcc(c, x + delta, d).unwrap() >= base
            || metrics::adcc(c, x, d + delta).unwrap() >= base
        {
            monotone_violations += 1;
        }
        let report = MetricsReport {
            architecture: "toy-cnn".into(),
            method: MethodKind::GradCam,
            mc: true,
            coherency: c,
            complexity: x,
            average_drop: d,
            adcc: base,
            latency_ms: Some(1.0),
            degenerate_count: 0,
            images: 1,
        };
        recomposition = recomposition.max((report.adcc - report.recomputed_adcc()).abs());
    }

    let model = model::build_default_model(3, 32, 3).unwrap();
    let data = io::gen_synthetic_shapes(3, 2, 32, 11).unwrap();
    let rows = evaluate_model(&model, &data, &MethodKind::ALL, 3, 7, None, 0).unwrap();
    for r in &rows {
        recomposition = recomposition.max((r.adcc - r.recomputed_adcc()).abs());
        for v in [r.coherency, r.complexity, r.average_drop, r.adcc] {
            if !(0.0..=1.0).contains(&v) {
                failures.push(format!("{} out of range: {v}", r.method));
            }
        }
    }
    if recomposition > 1e-9 {
        failures.push(format!("recomposition {recomposition:e}"));
    }
    if monotone_violations > 0 {
        failures.push(format!("{monotone_violations} monotonicity violations"));
    }
    let pass = failures.is_empty();
    verdict(
        "A2",
        pass,
        &format!(
            "examples at 1e-6, recomposition max {recomposition:.1e} over 1000 triples + {} rows, monotone on 1000 triples{}",
            rows.len(),
            if pass { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- toy setup

const TOY_SIZE: usize = 64;
const TOY_PER_CLASS: usize = 150;
const TOY_EPOCHS: usize = 12;
const TEST_IMAGES: usize = 50;
const T: usize = 10;
const EVAL_SEED: u64 = 7;

struct Toy {
    seed: u64,
    model: Model,
    heldout_accuracy: f64,
    test: Dataset,
}

fn toy(seed: u64) -> Toy {
    let args = TrainArgs {
        size: TOY_SIZE,
        per_class: TOY_PER_CLASS,
        epochs: TOY_EPOCHS,
        seed,
        ..TrainArgs::default()
    };
    let (model, summary) = train_model(&args).unwrap();
    let test = io::gen_synthetic_shapes(3, TEST_IMAGES.div_ceil(3), TOY_SIZE, heldout_seed(seed))
        .unwrap()
        .truncated(TEST_IMAGES);
    Toy {
        seed,
        model,
        heldout_accuracy: summary.heldout_accuracy,
        test,
    }
}

fn toys() -> &'static Vec<Toy> {
    static TOYS: OnceLock<Vec<Toy>> = OnceLock::new();
    TOYS.get_or_init(|| (1..=10).map(toy).collect())
}

#[test]
fn a3_method_improvement_direction() {
    let start = Instant::now();
    let mut wins = [0usize; 2];
    let mut lines = Vec::new();
    let mut accuracy_ok = true;
    for toy in toys() {
        accuracy_ok &= toy.heldout_accuracy >= 0.9;
        let rows = evaluate_model(
            &toy.model,
            &toy.test,
            &[MethodKind::GradCam, MethodKind::ReciproCam],
            T,
            EVAL_SEED,
            None,
            0,
        )
        .unwrap();
        let mut cells = Vec::new();
        for (m, pair) in rows.chunks(2).enumerate() {
            let (original, proposed) = (pair[0].adcc, pair[1].adcc);
            if proposed >= original {
                wins[m] += 1;
            }
            cells.push(format!("{} {:.2}->{:.2}", pair[0].method, original * 100.0, proposed * 100.0));
        }
        lines.push(format!(
            "    seed {:>2} acc {:.3}: {}",
            toy.seed,
            toy.heldout_accuracy,
            cells.join(", ")
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = accuracy_ok && wins.iter().all(|&w| w >= 8) && secs < 600.0;
    verdict(
        "A3",
        pass,
        &format!(
            "proposed >= original in Grad-CAM {}/10, Recipro-CAM {}/10 seeds (need 8); held-out accuracy >= 0.9: {accuracy_ok}; {secs:.0}s",
            wins[0], wins[1]
        ),
    );
    for l in &lines {
        println!("{l}");
    }
    assert!(pass);
}

#[test]
fn a4_t_study_trend() {
    let ts = [1, 2, 5, 10, 20];
    let mut positive = 0;
    let mut details = Vec::new();
    for toy in &toys()[..5] {
        let study = riskcam_cli::t_study(&toy.model, &toy.test, MethodKind::GradCam, &ts, EVAL_SEED, None, 0).unwrap();
        let rho = study.spearman.unwrap_or(f64::NAN);
        if rho > 0.0 {
            positive += 1;
        }
        let adcc: Vec<String> = study.rows.iter().map(|r| format!("{:.2}", r.adcc * 100.0)).collect();
        details.push(format!("    seed {} rho {rho:+.2}: ADCC {}", toy.seed, adcc.join(" ")));
    }
    let pass = positive >= 4;
    verdict("A4", pass, &format!("Spearman(T, ADCC) > 0 in {positive}/5 seeds (need 4)"));
    for d in &details {
        println!("{d}");
    }
    assert!(pass);
}

#[test]
fn a5_score_cam_fixed_point() {
    let toy = &toys()[0];
    let method = AttributionMethod::from(MethodKind::ScoreCam);
    let baseline = EvalConfig {
        seed: EVAL_SEED,
        ..EvalConfig::new(method, false)
    };
    let mean_adcc = |config: &EvalConfig| {
        let reports: Vec<MetricsReport> = toy
            .test
            .items
            .iter()
            .map(|s| metrics::evaluate_method(&toy.model, &s.image, config).unwrap())
            .collect();
        MetricsReport::aggregate(&reports).unwrap().adcc
    };
    let reference = mean_adcc(&baseline);
    let mut mismatches = Vec::new();
    for t in [1, 3, 10] {
        let proposed = EvalConfig {
            passes: t,
            ..EvalConfig::new(method, true)
        };
        let got = mean_adcc(&proposed);
        if got != reference {
            mismatches.push(format!("T={t}: {got} vs {reference}"));
        }
    }
    let pass = mismatches.is_empty();
    verdict(
        "A5",
        pass,
        &format!(
            "Score-CAM proposed ADCC equals baseline {:.4} exactly at T=1,3,10{}",
            reference * 100.0,
            if pass { String::new() } else { format!("; {}", mismatches.join("; ")) }
        ),
    );
    assert!(pass);
}

fn two_pass_variance(series: &[Vec<f64>]) -> Vec<f64> {
    let n = series.len() as f64;
    (0..series[0].len())
        .map(|i| {
            let mean = series.iter().map(|s| s[i]).sum::<f64>() / n;
            series.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

fn raw_volume(series: &[Vec<f32>], h: usize, w: usize) -> PaVolume {
    let slices = series
        .iter()
        .map(|d| SaliencyMap {
            map: Map::new(h, w, d.clone()).unwrap(),
            method: MethodKind::GradCam,
            class: 0,
            normalized: false,
        })
        .collect();
    PaVolume::new(slices, (1..=series.len() as u64).collect()).unwrap()
}

#[test]
fn a6_risk_map_properties() {
    let mut failures = Vec::new();
    let toy = &toys()[0];
    let images: Vec<&Tensor> = toy.test.items.iter().take(3).map(|s| &s.image).collect();

    let no_dropout = toy.model.with_dropout(0.0);
    for kind in MethodKind::ALL {
        let config = RiskConfig {
            passes: 4,
            base_seed: EVAL_SEED,
            ..RiskConfig::new(kind.into())
        };
        let (_, r) = risk::explain_with_risk(&no_dropout, images[0], &config).unwrap();
        if r.cv.data.iter().any(|&v| v != 0.0) {
            failures.push(format!("{kind}: CV not identically 0 at p=0"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_var = 0.0f64;
    let mut worst_cv = 0.0f64;
    for trial in 0..20 {
        let t = 2 + trial % 9;
        let offset = rng.random_range(0.0..0.9f32);
        let series: Vec<Vec<f32>> = (0..t)
            .map(|_| (0..16).map(|_| offset + rng.random_range(0.0..0.1f32)).collect())
            .collect();
        let volume = raw_volume(&series, 4, 4);
        let oracle = two_pass_variance(&series.iter().map(|s| s.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>());
        for (got, want) in risk::variance_map(&volume).data.iter().zip(&oracle) {
            worst_var = worst_var.max((*got as f64 - want).abs());
        }
        let lambda = rng.random_range(0.1..10.0f32);
        let scaled: Vec<Vec<f32>> = series.iter().map(|s| s.iter().map(|v| v * lambda).collect()).collect();
        let a = risk::risk_from_volume(&volume, 1e-6).unwrap();
        let b = risk::risk_from_volume(&raw_volume(&scaled, 4, 4), 1e-6).unwrap();
        for (x, y) in a.cv.data.iter().zip(&b.cv.data) {
            worst_cv = worst_cv.max(((x - y) / x.abs().max(1e-3)).abs() as f64);
        }
    }
    if worst_var > 1e-6 {
        failures.push(format!("variance deviates by {worst_var:e}"));
    }
    if worst_cv > 1e-3 {
        failures.push(format!("CV not scale invariant ({worst_cv:e})"));
    }

    let layer = toy.model.spec.default_attribution_layer();
    for (i, image) in images.iter().enumerate() {
        for mode in [DropoutMode::Disabled, DropoutMode::McEnabled] {
            let seed = 31 + i as u64;
            let smooth = attrib::smooth_grad_cam_pp(&toy.model, image, layer, ClassTarget::Predicted, 1, 0.0, mode, seed).unwrap();
            let plain = attribute_pp(&toy.model, image, layer, mode, seed);
            if smooth.map.data.iter().map(|v| v.to_bits()).ne(plain.map.data.iter().map(|v| v.to_bits())) {
                failures.push(format!("SmoothGradCAM++(n=1, sigma=0) differs from Grad-CAM++ on image {i}"));
            }
        }
    }

    let mut smoke = 0;
    for image in &images {
        for kind in MethodKind::ALL {
            for mc in [false, true] {
                let config = EvalConfig {
                    passes: 3,
                    ..EvalConfig::new(kind.into(), mc)
                };
                let map = metrics::compute_map(&toy.model, image, &config, ClassTarget::Predicted).unwrap();
                let valid = map.map.height == TOY_SIZE
                    && map.map.width == TOY_SIZE
                    && map.map.data.iter().all(|v| (0.0..=1.0).contains(v));
                if !valid {
                    failures.push(format!("{kind} mc={mc}: invalid map"));
                }
                smoke += 1;
            }
        }
    }
    let pass = failures.is_empty();
    verdict(
        "A6",
        pass,
        &format!(
            "p=0 CV zero for 5 methods; variance vs two-pass {worst_var:.1e}; CV scale deviation {worst_cv:.1e}; smooth==pp bitwise; {smoke} smoke maps valid{}",
            if pass { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    );
    assert!(pass);
}

fn attribute_pp(model: &Model, image: &Tensor, layer: usize, mode: DropoutMode, seed: u64) -> SaliencyMap {
    attrib::grad_cam_pp(model, image, layer, ClassTarget::Predicted, mode, seed).unwrap()
}

#[test]
fn a7_latency_harness() {
    let toy = &toys()[0];
    let method = AttributionMethod::from(MethodKind::GradCam);
    let single = EvalConfig::new(method, false);
    let proposed = EvalConfig {
        passes: T,
        ..EvalConfig::new(method, true)
    };
    let timing = Timing { warmup: 1, runs: 5 };
    let mean_latency = |config: &EvalConfig| {
        let images = &toy.test.items[..5];
        images
            .iter()
            .map(|s| {
                metrics::measure_latency(timing, || {
                    metrics::compute_map(&toy.model, &s.image, config, ClassTarget::Predicted)
                })
                .unwrap()
            })
            .sum::<f64>()
            / images.len() as f64
    };
    let one = mean_latency(&single);
    let mc = mean_latency(&proposed);
    let ratio = mc / one;

    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("toy.rcam");
    model::save_weights(&toy.model, &weights).unwrap();
    let image = dir.path().join("image.png");
    io::save_tensor_image(&toy.test.items[0].image, &image).unwrap();
    let start = Instant::now();
    riskcam_cli::cmd_explain(&riskcam_cli::ExplainArgs {
        weights,
        image,
        method: MethodKind::GradCam,
        passes: T,
        seed: EVAL_SEED,
        out: dir.path().join("explain"),
        layer: None,
        no_dropout: false,
        alpha: 0.5,
    })
    .unwrap();
    let explain_secs = start.elapsed().as_secs_f64();
    let pass = (5.0..=20.0).contains(&ratio) && explain_secs < 1.0;
    verdict(
        "A7",
        pass,
        &format!("Grad-CAM single {one:.2} ms, T=10 {mc:.2} ms, ratio {ratio:.1}x; explain 64x64 T=10 {explain_secs:.3}s"),
    );
    assert!(pass);
}
