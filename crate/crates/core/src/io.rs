//! Datasets, image files, heatmap rendering and result tables.

use crate::attrib::Map;
use crate::error::{dim_err, param_err, Error, Result};
use crate::metrics::MetricsReport;
use crate::model::mix_seed;
use crate::tensor::Tensor;
use image::{imageops, DynamicImage, ImageFormat, Rgb32FImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

pub const CHANNELS: usize = 3;
pub const CLASS_NAMES: [&str; 3] = ["circle", "rings", "blobs"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, CHANNELS, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Sample>,
    pub class_names: Vec<String>,
    pub resolution: usize,
    /// Generation seed; unknown for datasets read back from disk.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for s in &self.items {
            counts[s.label] += 1;
        }
        counts
    }

    /// The first `n` items (all of them if there are fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            items: self.items.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn paint_disc(canvas: &mut [f32], size: usize, cy: f32, cx: f32, r_in: f32, r_out: f32, value: f32) {
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2)).sqrt();
            if d >= r_in && d <= r_out {
                canvas[y * size + x] = value;
            }
        }
    }
}

fn synthetic_image(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let background = rng.random_range(0.05..0.25f32);
    let mut canvas = vec![background; size * size];
    let fg = rng.random_range(0.6..0.95f32);
    match label {
        0 => {
            let r = rng.random_range(0.15..0.3) * s;
            let cy = rng.random_range(r..s - r);
            let cx = rng.random_range(r..s - r);
            paint_disc(&mut canvas, size, cy, cx, 0.0, r, fg);
        }
        1 => {
            let outer = rng.random_range(0.25..0.4) * s;
            let width = (0.05 * s).max(1.5);
            let cy = rng.random_range(outer..s - outer);
            let cx = rng.random_range(outer..s - outer);
            let mut r = outer;
            while r > width {
                paint_disc(&mut canvas, size, cy, cx, r - width, r, fg);
                r -= 2.2 * width;
            }
        }
        _ => {
            let count = rng.random_range(5..10);
            for _ in 0..count {
                let r = rng.random_range(0.03..0.06) * s;
                let cy = rng.random_range(r..s - r);
                let cx = rng.random_range(r..s - r);
                paint_disc(&mut canvas, size, cy, cx, 0.0, r, fg);
            }
        }
    }
    let noise = Normal::new(0.0f32, 0.04).unwrap();
    canvas.iter().map(|&v| quantize(v + noise.sample(rng))).collect()
}

fn gray_to_tensor(gray: &[f32], size: usize) -> Tensor {
    let plane = size * size;
    Tensor::from_fn(&[1, CHANNELS, size, size], |i| gray[i % plane])
}

/// Filled circles, concentric rings and scattered small blobs on a noisy
/// background, one per class. Items are interleaved by class and each item
/// draws from its own RNG stream, so the first `k` items of a larger set
/// equal a smaller set with the same seed.
pub fn gen_synthetic_shapes(classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if !(2..=CLASS_NAMES.len()).contains(&classes) {
        return Err(param_err!("synthetic shapes support 2 or 3 classes, got {classes}"));
    }
    if resolution < 32 {
        return Err(param_err!("resolution must be at least 32, got {resolution}"));
    }
    let items = (0..classes * per_class)
        .map(|idx| {
            let label = idx % classes;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, idx as u64));
            let gray = synthetic_image(label, resolution, &mut rng);
            Sample {
                image: gray_to_tensor(&gray, resolution),
                label,
                id: format!("{idx:05}"),
            }
        })
        .collect();
    Ok(Dataset {
        items,
        class_names: CLASS_NAMES[..classes].iter().map(|s| s.to_string()).collect(),
        resolution,
        seed: Some(seed),
    })
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| param_err!("not a file path: {}", path.display()))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    if let Err(e) = fs::write(&tmp, bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::from(e)
    })
}

fn encode_png(img: DynamicImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("PNG encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first batch item of a `[B, C, H, W]` tensor as an 8-bit PNG:
/// grayscale when all channels agree (or C = 1), RGB otherwise.
pub fn save_tensor_image(image: &Tensor, path: &Path) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if c != 1 && c != 3 {
        return Err(dim_err!("cannot save a {c}-channel image"));
    }
    let planes: Vec<&[f32]> = (0..c).map(|ch| image.plane(0, ch)).collect();
    let gray = planes.iter().all(|p| *p == planes[0]);
    let img = if gray {
        let px = planes[0].iter().map(|&v| to_u8(v)).collect();
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w as u32, h as u32, px).unwrap())
    } else {
        let px = (0..h * w).flat_map(|i| planes.iter().map(move |p| to_u8(p[i]))).collect();
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, px).unwrap())
    };
    write_atomic(path, &encode_png(img)?)
}

fn decode_image(bytes: &[u8]) -> Result<DynamicImage> {
    let format = image::guess_format(bytes).map_err(|_| Error::Format("unrecognized image format".into()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        let name = format.extensions_str().first().map(|s| s.to_uppercase()).unwrap_or_else(|| format!("{format:?}"));
        return Err(Error::Format(format!(
            "unsupported image format {name}; expected PNG, PGM or PPM"
        )));
    }
    image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Format(format!("corrupt {format:?} image: {e}")))
}

/// Decodes a PNG/PGM/PPM image into `[1, channels, size, size]` with values
/// in `[0, 1]`, resizing with a triangle (bilinear) filter when needed.
/// Grayscale sources are replicated across channels; colour sources are
/// converted to luma when `channels == 1`.
pub fn image_from_bytes(bytes: &[u8], channels: usize, size: usize) -> Result<Tensor> {
    if channels != 1 && channels != 3 {
        return Err(param_err!("channels must be 1 or 3, got {channels}"));
    }
    let img = decode_image(bytes)?;
    let colour = img.color().has_color() && channels == 3;
    let img = if colour {
        DynamicImage::ImageRgb8(img.to_rgb8())
    } else {
        DynamicImage::ImageLuma8(img.to_luma8())
    };
    let plane = size * size;
    if img.width() as usize == size && img.height() as usize == size {
        let raw = img.to_rgb8().into_raw();
        return Ok(Tensor::from_fn(&[1, channels, size, size], |i| {
            raw[(i % plane) * 3 + i / plane] as f32 / 255.0
        }));
    }
    let rgb: Rgb32FImage = imageops::resize(&img.to_rgb32f(), size as u32, size as u32, imageops::FilterType::Triangle);
    let raw = rgb.into_raw();
    Ok(Tensor::from_fn(&[1, channels, size, size], |i| {
        raw[(i % plane) * 3 + i / plane].clamp(0.0, 1.0)
    }))
}

pub fn load_image(path: &Path, channels: usize, size: usize) -> Result<Tensor> {
    image_from_bytes(&fs::read(path)?, channels, size)
}

/// Image size without resizing, for callers that want native resolution.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let img = decode_image(&fs::read(path)?)?;
    Ok((img.width() as usize, img.height() as usize))
}

pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["id", "label"]).map_err(csv_err)?;
    for s in &data.items {
        save_tensor_image(&s.image, &dir.join(format!("{}.png", s.id)))?;
        wtr.write_record([s.id.as_str(), &s.label.to_string()]).map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join("labels.csv"), &bytes)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("CSV: {e}"))
}

#[derive(Deserialize)]
struct LabelRow {
    id: String,
    label: usize,
}

/// Reads a directory written by [`save_dataset`]. Images are loaded at
/// `resolution` with [`CHANNELS`] channels.
pub fn load_dataset(dir: &Path, resolution: usize) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(dir.join("labels.csv")).map_err(csv_err)?;
    let mut items = Vec::new();
    for row in rdr.deserialize() {
        let row: LabelRow = row.map_err(csv_err)?;
        let image = load_image(&dir.join(format!("{}.png", row.id)), CHANNELS, resolution)?;
        items.push(Sample {
            image,
            label: row.label,
            id: row.id,
        });
    }
    let classes = items.iter().map(|s| s.label + 1).max().unwrap_or(0);
    if classes > CLASS_NAMES.len() {
        return Err(Error::Format(format!("label {} out of range", classes - 1)));
    }
    Ok(Dataset {
        items,
        class_names: CLASS_NAMES[..classes.max(2)].iter().map(|s| s.to_string()).collect(),
        resolution,
        seed: None,
    })
}

pub const COLORMAP: &str = "black-red-yellow";

/// Ramp entry `i` of 256: black to red over the first half, red to yellow
/// over the second.
pub fn ramp_color(i: u8) -> [u8; 3] {
    let i = i as u32;
    if i <= 127 {
        [((i * 255 + 63) / 127) as u8, 0, 0]
    } else {
        [255, (((i - 127) * 255 + 64) / 128) as u8, 0]
    }
}

pub const UNDEFINED_COLOR: [u8; 3] = [0, 0, 139];

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRender {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
    pub colormap: String,
    pub alpha: f32,
    /// Raw `(min, max)` mapped to the ends of the ramp, for display-scaled maps.
    pub scale: Option<(f32, f32)>,
}

impl HeatmapRender {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

fn ramp_index(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// Colours a `[0, 1]` map, optionally blended over the grayscale of `base`
/// as `alpha * heat + (1 - alpha) * base`. Pixels flagged in `undefined`
/// are drawn dark blue.
pub fn render_heatmap(map: &Map, base: Option<&Tensor>, alpha: f32, undefined: Option<&[bool]>) -> Result<HeatmapRender> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(param_err!("overlay alpha must lie in [0, 1], got {alpha}"));
    }
    let n = map.height * map.width;
    if let Some(u) = undefined {
        if u.len() != n {
            return Err(dim_err!("undefined mask has {} entries for {n} pixels", u.len()));
        }
    }
    let gray: Option<Vec<f32>> = match base {
        None => None,
        Some(img) => {
            let (_, c, h, w) = img.dims4()?;
            if (h, w) != (map.height, map.width) {
                return Err(dim_err!("base image {h}x{w} does not match map {}x{}", map.height, map.width));
            }
            Some(
                (0..n)
                    .map(|p| (0..c).map(|ch| img.plane(0, ch)[p]).sum::<f32>() / c as f32)
                    .collect(),
            )
        }
    };
    let mut rgb = Vec::with_capacity(n * 3);
    for p in 0..n {
        if undefined.is_some_and(|u| u[p]) {
            rgb.extend_from_slice(&UNDEFINED_COLOR);
            continue;
        }
        let heat = ramp_color(ramp_index(map.data[p]));
        match &gray {
            None => rgb.extend_from_slice(&heat),
            Some(g) => {
                let b = g[p].clamp(0.0, 1.0) * 255.0;
                rgb.extend(heat.iter().map(|&h| (alpha * h as f32 + (1.0 - alpha) * b).round() as u8));
            }
        }
    }
    Ok(HeatmapRender {
        width: map.width,
        height: map.height,
        rgb,
        colormap: COLORMAP.into(),
        alpha: if base.is_some() { alpha } else { 1.0 },
        scale: None,
    })
}

/// Min-max scales the defined pixels of a raw CV map for display and renders
/// it; the raw range is kept in [`HeatmapRender::scale`].
pub fn render_cv(cv: &Map, undefined: &[bool]) -> Result<HeatmapRender> {
    let defined = cv.data.iter().zip(undefined).filter(|(_, &u)| !u).map(|(&v, _)| v);
    let (lo, hi) = defined.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = hi - lo;
    let scaled = Map::new(
        cv.height,
        cv.width,
        cv.data
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect(),
    )?;
    let mut render = render_heatmap(&scaled, None, 1.0, Some(undefined))?;
    render.scale = Some((lo, hi));
    Ok(render)
}

pub fn encode_render(render: &HeatmapRender) -> Result<Vec<u8>> {
    let img = RgbImage::from_raw(render.width as u32, render.height as u32, render.rgb.clone())
        .ok_or_else(|| dim_err!("render buffer does not match its size"))?;
    encode_png(DynamicImage::ImageRgb8(img))
}

pub fn save_image(render: &HeatmapRender, path: &Path) -> Result<()> {
    write_atomic(path, &encode_render(render)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResultFormat {
    Csv,
    Json,
}

impl ResultFormat {
    /// `.json` selects JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ResultFormat::Json,
            _ => ResultFormat::Csv,
        }
    }
}

pub const RESULT_COLUMNS: [&str; 9] = [
    "architecture",
    "method",
    "mc",
    "Coh",
    "Comp",
    "AD",
    "ADCC",
    "latency_ms",
    "degenerate_count",
];

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

pub fn result_row(r: &MetricsReport) -> Vec<String> {
    vec![
        r.architecture.clone(),
        r.method.to_string(),
        r.mc.to_string(),
        pct(r.coherency),
        pct(r.complexity),
        pct(r.average_drop),
        pct(r.adcc),
        r.latency_ms.map(|l| format!("{l:.1}")).unwrap_or_default(),
        r.degenerate_count.to_string(),
    ]
}

/// CSV with one header line, written atomically.
pub fn write_table<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header).map_err(csv_err)?;
    for row in rows {
        wtr.write_record(row.iter().map(|s| s.as_ref())).map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// CSV values are x100 with one decimal; JSON keeps full precision.
pub fn write_results(reports: &[MetricsReport], path: &Path, format: ResultFormat) -> Result<()> {
    if reports.is_empty() {
        return Err(param_err!("no results to write"));
    }
    match format {
        ResultFormat::Csv => {
            let rows: Vec<Vec<String>> = reports.iter().map(result_row).collect();
            write_table(path, &RESULT_COLUMNS, &rows)
        }
        ResultFormat::Json => {
            let json = serde_json::to_vec_pretty(reports).map_err(|e| Error::Format(e.to_string()))?;
            write_atomic(path, &json)
        }
    }
}

pub fn read_results_json(path: &Path) -> Result<Vec<MetricsReport>> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format(format!("results JSON: {e}")))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &json)
}

/// `dir/name`, creating `dir` if needed.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}
