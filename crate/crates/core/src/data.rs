//! Synthetic scenes, PNG folder ingestion, value-space conversions and fold splits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;
use crate::rng::{derive_seed, stream_rng};
use crate::training::TrainData;

/// An image with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]` in `[-1, 1]`.
    pub image: Array3<f32>,
    /// `[K, H, W]` probabilities: one channel for binary labels, one-hot with
    /// background at channel 0 otherwise.
    pub label: Array3<f32>,
}

impl Sample {
    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    /// Per-pixel class index (0 = background).
    pub fn class_map(&self) -> Array2<u8> {
        class_map(&self.label)
    }
}

/// Hard class indices from a probability-space label map.
pub fn class_map(label: &Array3<f32>) -> Array2<u8> {
    let (k, h, w) = label.dim();
    if k == 1 {
        return label.index_axis(Axis(0), 0).mapv(|p| u8::from(p >= 0.5));
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for c in 1..k {
            if label[[c, y, x]] > label[[best, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}

/// Probability-space label map from class indices; `classes` counts foreground classes.
pub fn one_hot(classes_map: &Array2<u8>, classes: usize) -> Array3<f32> {
    let (h, w) = classes_map.dim();
    if classes == 1 {
        return classes_map.mapv(|c| f32::from(c > 0)).insert_axis(Axis(0));
    }
    Array3::from_shape_fn((classes + 1, h, w), |(c, y, x)| f32::from(classes_map[[y, x]] as usize == c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    /// Ellipses with a wobbling boundary.
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub resolution: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shape: ShapeFamily,
    /// Semi-axis range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Foreground brightness offset over the background, in `[0, 1]` intensity units.
    pub contrast: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// 1 for binary labels, 2 for two adjacent foreground classes per object.
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            min_objects: 1,
            max_objects: 4,
            shape: ShapeFamily::Ellipse,
            min_radius: 5.0,
            max_radius: 14.0,
            contrast: 0.35,
            noise: 0.05,
            classes: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::config("synth.resolution", "must be at least 1"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("synth.min_objects", "exceeds synth.max_objects"));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::config("synth.min_radius", "must be positive and at most synth.max_radius"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("synth.noise", "must be non-negative"));
        }
        if !(1..=2).contains(&self.classes) {
            return Err(Error::config("synth.classes", "must be 1 or 2"));
        }
        Ok(())
    }

    pub fn label_channels(&self) -> usize {
        if self.classes == 1 {
            1
        } else {
            self.classes + 1
        }
    }
}

/// `n` deterministic synthetic samples named `synth-0000`, `synth-0001`, ...
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("synth.count", "must be at least 1"));
    }
    Ok((0..n).into_par_iter().map(|i| synthesize(spec, i)).collect())
}

fn synthesize(spec: &SyntheticSpec, index: usize) -> Sample {
    let mut rng = stream_rng(derive_seed(spec.seed, 0x73796e), index as u64);
    let r = spec.resolution;
    let rf = r as f64;

    // Low-frequency background texture in roughly [0.15, 0.45].
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / rf,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / rf,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let base = rng.random_range(0.25..0.35);
    let mut intensity = Array2::from_shape_fn((r, r), |(y, x)| {
        base + waves
            .iter()
            .map(|&(fy, fx, phase, amp)| amp * (fy * y as f64 + fx * x as f64 + phase).sin())
            .sum::<f64>()
    });
    let mut classes = Array2::<u8>::zeros((r, r));

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    for _ in 0..count {
        let cy = rng.random_range(0.0..rf);
        let cx = rng.random_range(0.0..rf);
        let ry = rng.random_range(spec.min_radius..=spec.max_radius);
        let rx = rng.random_range(spec.min_radius..=spec.max_radius);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let split = rng.random_range(0.0..std::f64::consts::TAU);
        let (wobble_freq, wobble_amp, wobble_phase) = match spec.shape {
            ShapeFamily::Ellipse => (0.0, 0.0, 0.0),
            ShapeFamily::Blob => (
                f64::from(rng.random_range(2u8..=5)),
                rng.random_range(0.08..0.2),
                rng.random_range(0.0..std::f64::consts::TAU),
            ),
        };
        let (sin, cos) = angle.sin_cos();
        let (split_sin, split_cos) = split.sin_cos();
        let reach = ry.max(rx) * (1.0 + wobble_amp) + 1.0;
        // Iterate over the clipped bounding box only, so objects never wrap.
        let y_range = ((cy - reach).floor().max(0.0) as usize)..((cy + reach).ceil().min(rf) as usize);
        let x_range = ((cx - reach).floor().max(0.0) as usize)..((cx + reach).ceil().min(rf) as usize);
        for y in y_range {
            for x in x_range.clone() {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                let radius = 1.0 + wobble_amp * (wobble_freq * v.atan2(u) + wobble_phase).sin();
                if u * u + v * v > radius * radius {
                    continue;
                }
                let second_half = spec.classes == 2 && dx * split_cos + dy * split_sin > 0.0;
                classes[[y, x]] = if second_half { 2 } else { 1 };
                let boost = if second_half { 1.5 } else { 1.0 };
                intensity[[y, x]] = base + 0.05 + spec.contrast * boost;
            }
        }
    }

    let image = Array2::from_shape_fn((r, r), |(y, x)| {
        let n: f64 = rng.sample(rand_distr::StandardNormal);
        let v = (intensity[[y, x]] + spec.noise * n).clamp(0.0, 1.0);
        (v * 2.0 - 1.0) as f32
    });
    Sample {
        id: format!("synth-{index:04}"),
        image: image.insert_axis(Axis(0)),
        label: one_hot(&classes, spec.classes),
    }
}

/// 8-bit intensity to `[-1, 1]`.
pub fn normalize_intensity(v: u8) -> f32 {
    f32::from(v) / 127.5 - 1.0
}

/// `[-1, 1]` back to the nearest 8-bit intensity.
pub fn denormalize_intensity(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Probability space `[0, 1]` to model space `[-1, 1]`.
pub fn label_to_model<F: Real>(p: F) -> F {
    p + p - F::one()
}

/// Model space `[-1, 1]` to probability space `[0, 1]`.
pub fn label_from_model<F: Real>(x: F) -> F {
    (x + F::one()) / F::lit(2.0)
}

/// Stacks samples into model-space training tensors.
pub fn to_train_data<F: Real>(samples: &[Sample]) -> Result<TrainData<F>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::config("data.root", "dataset contains no samples"))?;
    let (c, h, w) = first.image.dim();
    let k = first.label.dim().0;
    let mut images = Array4::zeros((samples.len(), c, h, w));
    let mut labels = Array4::zeros((samples.len(), k, h, w));
    for (i, sample) in samples.iter().enumerate() {
        if sample.image.dim() != (c, h, w) || sample.label.dim() != (k, h, w) {
            return Err(Error::Data(format!("sample `{}` differs in shape from `{}`", sample.id, first.id)));
        }
        images
            .index_axis_mut(Axis(0), i)
            .assign(&sample.image.mapv(|v| F::from_f32(v).unwrap()));
        labels
            .index_axis_mut(Axis(0), i)
            .assign(&sample.label.mapv(|p| label_to_model(F::from_f32(p).unwrap())));
    }
    TrainData::new(images, labels)
}

/// Batch of model-space images, `[N, C, H, W]`.
pub fn stack_images<F: Real>(samples: &[Sample]) -> Array4<F> {
    let views: Vec<_> = samples.iter().map(|s| s.image.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views)
        .expect("images share a shape")
        .mapv(|v| F::from_f32(v).unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Grayscale masks thresholded at half range.
    Binary,
    /// Palette or grayscale index masks with values `0..=classes`.
    Indexed { classes: usize },
}

impl MaskMode {
    pub fn for_classes(classes: usize) -> Self {
        if classes <= 1 {
            MaskMode::Binary
        } else {
            MaskMode::Indexed { classes }
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            MaskMode::Binary => 1,
            MaskMode::Indexed { classes } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FolderLayout {
    pub resolution: usize,
    /// 1 for grayscale, 3 for RGB.
    pub image_channels: usize,
    pub mask: MaskMode,
}

/// A file that could not be turned into a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejected {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    /// Sorted by identifier.
    pub samples: Vec<Sample>,
    pub rejected: Vec<Rejected>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Reads `root/images/*.png` with masks from `root/masks/*.png` paired by file stem.
pub fn load_folder(root: &Path, layout: &FolderLayout) -> Result<LoadReport> {
    if !root.is_dir() {
        return Err(Error::config("data.root", format!("`{}` is not a directory", root.display())));
    }
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    let mut report = LoadReport::default();
    for (stem, path) in &masks {
        if !images.contains_key(stem) {
            report.rejected.push(Rejected {
                path: path.clone(),
                reason: "no image with this stem".into(),
            });
        }
    }
    let results: Vec<(String, &PathBuf, Result<Sample>)> = images
        .par_iter()
        .filter_map(|(stem, image_path)| {
            let mask_path = masks.get(stem)?;
            Some((stem.clone(), image_path, load_pair(stem, image_path, mask_path, layout)))
        })
        .collect();
    for (stem, image_path, result) in results {
        match result {
            Ok(sample) => report.samples.push(sample),
            Err(e) => report.rejected.push(Rejected {
                path: image_path.clone(),
                reason: format!("{stem}: {e}"),
            }),
        }
    }
    for (stem, path) in &images {
        if !masks.contains_key(stem) {
            report.rejected.push(Rejected {
                path: path.clone(),
                reason: "no mask with this stem".into(),
            });
        }
    }
    if report.samples.is_empty() {
        tracing::warn!(root = %root.display(), "no image/mask pairs found");
    }
    for r in &report.rejected {
        tracing::warn!(path = %r.path.display(), reason = %r.reason, "rejected");
    }
    Ok(report)
}

/// Reads one image as `[C, H, W]` in `[-1, 1]`, resized bilinearly to `resolution`.
pub fn load_image(path: &Path, resolution: usize, channels: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let side = resolution as u32;
    match channels {
        1 => {
            let mut g = img.to_luma8();
            if g.dimensions() != (side, side) {
                g = imageops::resize(&g, side, side, FilterType::Triangle);
            }
            Ok(Array3::from_shape_fn((1, resolution, resolution), |(_, y, x)| {
                normalize_intensity(g.get_pixel(x as u32, y as u32)[0])
            }))
        }
        3 => {
            let mut rgb = img.to_rgb8();
            if rgb.dimensions() != (side, side) {
                rgb = imageops::resize(&rgb, side, side, FilterType::Triangle);
            }
            Ok(Array3::from_shape_fn((3, resolution, resolution), |(c, y, x)| {
                normalize_intensity(rgb.get_pixel(x as u32, y as u32)[c])
            }))
        }
        other => Err(Error::config("model.image_channels", format!("{other} is not 1 or 3"))),
    }
}

/// Reads a mask as class indices, resized with nearest-neighbour sampling.
pub fn load_mask(path: &Path, resolution: usize, mode: MaskMode) -> Result<Array2<u8>> {
    let raw = read_mask_values(path, mode)?;
    let (h, w) = raw.dim();
    if h == 0 || w == 0 {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    if let MaskMode::Indexed { classes } = mode {
        if let Some(&bad) = raw.iter().find(|&&v| v as usize > classes) {
            return Err(Error::Data(format!("mask value {bad} exceeds class count {classes}")));
        }
    }
    Ok(Array2::from_shape_fn((resolution, resolution), |(y, x)| {
        raw[[y * h / resolution, x * w / resolution]]
    }))
}

fn read_mask_values(path: &Path, mode: MaskMode) -> Result<Array2<u8>> {
    if let MaskMode::Indexed { .. } = mode {
        // Keep palette indices instead of letting the image crate expand them to colours.
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let info = reader.info();
        let (w, h) = (info.width as usize, info.height as usize);
        let (color, depth) = (info.color_type, info.bit_depth);
        if color == png::ColorType::Indexed || (color == png::ColorType::Grayscale && depth == png::BitDepth::Eight) {
            let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
            let frame = reader
                .next_frame(&mut buf)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let bits = match frame.bit_depth {
                png::BitDepth::One => 1,
                png::BitDepth::Two => 2,
                png::BitDepth::Four => 4,
                png::BitDepth::Eight => 8,
                png::BitDepth::Sixteen => {
                    return Err(Error::Data(format!("{}: 16-bit index masks are unsupported", path.display())))
                }
            };
            let stride = frame.line_size;
            return Ok(Array2::from_shape_fn((h, w), |(y, x)| {
                let bit = x * bits;
                let byte = buf[y * stride + bit / 8];
                let shift = 8 - bits - (bit % 8);
                (byte >> shift) & ((1u16 << bits) - 1) as u8
            }));
        }
        return Err(Error::Data(format!(
            "{}: index masks must be paletted or 8-bit grayscale",
            path.display()
        )));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let g = img.to_luma16();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(g.get_pixel(x as u32, y as u32)[0] >= 128 * 257)
    }))
}

fn load_pair(stem: &str, image_path: &Path, mask_path: &Path, layout: &FolderLayout) -> Result<Sample> {
    let image = load_image(image_path, layout.resolution, layout.image_channels)?;
    let mask = load_mask(mask_path, layout.resolution, layout.mask)?;
    Ok(Sample {
        id: stem.to_string(),
        image,
        label: one_hot(&mask, layout.mask.classes()),
    })
}

/// Writes class indices as PNG: 8-bit 0/255 for binary, paletted otherwise.
pub fn write_mask_png(path: &Path, classes_map: &Array2<u8>, classes: usize) -> Result<()> {
    let (h, w) = classes_map.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = if classes <= 1 {
        encoder.set_color(png::ColorType::Grayscale);
        classes_map.iter().map(|&c| if c > 0 { 255 } else { 0 }).collect()
    } else {
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_palette(palette(classes));
        classes_map.iter().copied().collect()
    };
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn palette(classes: usize) -> Vec<u8> {
    const COLOURS: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    (0..=classes).flat_map(|c| COLOURS[c % COLOURS.len()]).collect()
}

/// Writes a `[0, 1]` map as 16-bit grayscale PNG.
pub fn write_probability_png(path: &Path, probs: &Array2<f32>) -> Result<()> {
    let (h, w) = probs.dim();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(probs[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an image as 8-bit grayscale or RGB PNG.
pub fn write_image_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    let result = if c == 3 {
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|k| denormalize_intensity(image[[k, y as usize, x as usize]])))
        })
        .save(path)
    } else {
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([denormalize_intensity(image[[0, y as usize, x as usize]])])
        })
        .save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Exports samples as `root/images/<id>.png` and `root/masks/<id>.png`.
pub fn export_folder(samples: &[Sample], root: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    samples.par_iter().try_for_each(|sample| {
        write_image_png(&root.join("images").join(format!("{}.png", sample.id)), &sample.image)?;
        let classes = if sample.label.dim().0 == 1 {
            1
        } else {
            sample.label.dim().0 - 1
        };
        write_mask_png(
            &root.join("masks").join(format!("{}.png", sample.id)),
            &sample.class_map(),
            classes,
        )
    })
}

/// Train and validation indices for fold `fold` of a seeded `k`-way split of `n` items.
/// The first `n % k` folds hold one extra item.
pub fn kfold_indices(n: usize, k: usize, fold: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if k < 2 {
        return Err(Error::config("data.folds", "need at least 2 folds"));
    }
    if fold >= k {
        return Err(Error::config("data.fold", format!("fold {fold} is out of range for {k} folds")));
    }
    if n < k {
        return Err(Error::config("data.folds", format!("{n} samples cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(derive_seed(seed, 0x666f6c64), 0));
    let (base, extra) = (n / k, n % k);
    let start = fold * base + fold.min(extra);
    let len = base + usize::from(fold < extra);
    let val = order[start..start + len].to_vec();
    let train = order[..start].iter().chain(&order[start + len..]).copied().collect();
    Ok((train, val))
}

/// Sample-level wrapper around [`kfold_indices`].
pub fn kfold_split(samples: &[Sample], k: usize, fold: usize, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, val) = kfold_indices(samples.len(), k, fold, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&train), pick(&val)))
}

/// Foreground share of a probability-space label map.
pub fn foreground_fraction(label: &Array3<f32>) -> f64 {
    let map = class_map(label);
    map.iter().filter(|&&c| c > 0).count() as f64 / map.len() as f64
}
