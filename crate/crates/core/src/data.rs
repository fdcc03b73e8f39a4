//! Dataset ingestion (IDX, CSV), synthetic generators, and seeded batching.
//!
//! Every input value lies in `[0, 1]`; byte-valued pixels are scaled by 1/255.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("label {bad} out of range for {num_classes} classes")));
        }
        if let Some(bad) = inputs.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("input value {bad} outside [0, 1]")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Reinterprets each sample with `shape` (same element count).
    pub fn reshape_samples(mut self, shape: &[usize]) -> Result<Self> {
        let full = [vec![self.len()], shape.to_vec()].concat();
        self.inputs = self.inputs.reshape(full)?;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: name.into(),
        }
    }

    /// Writes the dataset as an IDX image/label pair (values quantized to u8).
    pub fn write_idx(&self, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
        let dims: Vec<usize> = match self.sample_shape() {
            [1, h, w] | [h, w] => vec![*h, *w],
            [d] => vec![*d],
            other => {
                return Err(Error::dim(format!("cannot store samples of shape {other:?} as IDX images")));
            }
        };
        let mut img = Vec::with_capacity(16 + self.inputs.len());
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(self.len() as u32).to_be_bytes());
        for d in &dims {
            img.extend_from_slice(&(*d as u32).to_be_bytes());
        }
        img.extend(self.inputs.values().iter().map(|&v| (v * 255.0).round() as u8));
        let mut lab = Vec::with_capacity(8 + self.len());
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(self.len() as u32).to_be_bytes());
        for &y in &self.labels {
            lab.push(u8::try_from(y).map_err(|_| Error::input(format!("label {y} does not fit a byte")))?);
        }
        fs::write(images_path, img)?;
        fs::write(labels_path, lab)?;
        Ok(())
    }
}

/// Parses a big-endian IDX image file (`0x00000803`, dims N, rows, cols) and
/// label file (`0x00000801`, dim N). Images become `[N, 1, rows, cols]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let images = fs::read(&images_path)?;
    let labels = fs::read(&labels_path)?;
    parse_idx(&images, &labels, num_classes, &images_path.as_ref().display().to_string())
}

pub fn parse_idx(images: &[u8], labels: &[u8], num_classes: usize, name: &str) -> Result<Dataset> {
    let be = |b: &[u8], at: usize, what: &str| -> Result<u32> {
        b.get(at..at + 4)
            .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format(format!("{what} truncated at byte offset {at}")))
    };
    let magic = be(images, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!("bad IDX image magic {magic:#010x} at byte offset 0")));
    }
    let magic = be(labels, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!("bad IDX label magic {magic:#010x} at byte offset 0")));
    }
    let n = be(images, 4, "image header")? as usize;
    let rows = be(images, 8, "image header")? as usize;
    let cols = be(images, 12, "image header")? as usize;
    let n_labels = be(labels, 4, "label header")? as usize;
    if n != n_labels {
        return Err(Error::format(format!("image file holds {n} samples but label file holds {n_labels}")));
    }
    let need = n * rows * cols;
    let pixels = images.get(16..16 + need).ok_or_else(|| {
        Error::format(format!(
            "image payload truncated at byte offset {}: expected {need} pixel bytes",
            images.len()
        ))
    })?;
    let label_bytes = labels.get(8..8 + n).ok_or_else(|| {
        Error::format(format!("label payload truncated at byte offset {}: expected {n} labels", labels.len()))
    })?;
    let inputs = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    Dataset::new(inputs, label_bytes.iter().map(|&y| usize::from(y)).collect(), num_classes, name)
}

/// Label-first CSV rows of byte-valued pixels; samples become `[N, D]`.
pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(&path)?;
    parse_csv(&text, num_classes, &path.as_ref().display().to_string())
}

pub fn parse_csv(text: &str, num_classes: usize, name: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(format!("row {}: {e}", row + 1)))?;
        let cell = |col: usize| -> Result<f64> {
            let raw = &record[col];
            raw.parse::<f64>()
                .map_err(|_| Error::format(format!("row {} col {}: non-numeric cell `{raw}`", row + 1, col + 1)))
        };
        let label = cell(0)?;
        if label < 0.0 || label.fract() != 0.0 {
            return Err(Error::format(format!("row {} col 1: label `{}` is not a class index", row + 1, &record[0])));
        }
        if label as usize >= num_classes {
            return Err(Error::input(format!("row {}: label {label} out of range for {num_classes} classes", row + 1)));
        }
        let d = record.len() - 1;
        if *width.get_or_insert(d) != d {
            return Err(Error::format(format!("row {}: {d} pixels, expected {}", row + 1, width.unwrap())));
        }
        for col in 1..record.len() {
            let v = cell(col)?;
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::format(format!("row {} col {}: pixel {v} outside [0, 255]", row + 1, col + 1)));
            }
            values.push(v / 255.0);
        }
        labels.push(label as usize);
    }
    let inputs = Tensor::new(vec![labels.len(), width.unwrap_or(0)], values)?;
    Dataset::new(inputs, labels, num_classes, name)
}

/// Point `i` of `n` on arm `class` of a `k`-arm spiral, before noise and rescaling.
pub fn spiral_point(class: usize, i: usize, n: usize, k: usize) -> (f64, f64) {
    let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let radius = 0.1 + 0.9 * t;
    let angle = 3.0 * PI * t + 2.0 * PI * class as f64 / k as f64;
    (radius * angle.cos(), radius * angle.sin())
}

/// Interleaved `k`-arm spirals with Gaussian noise, min-max rescaled into
/// `[0, 1]²`. Samples are ordered `(arm 0, arm 1, …)` per step along the arm.
pub fn synth_spirals(n_per_class: usize, k: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if !(2..=3).contains(&k) {
        return Err(Error::input(format!("spirals support 2 or 3 classes, got {k}")));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::input(format!("noise std must be non-negative, got {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pts = Vec::with_capacity(2 * n_per_class * k);
    let mut labels = Vec::with_capacity(n_per_class * k);
    for i in 0..n_per_class {
        for c in 0..k {
            let (x, y) = spiral_point(c, i, n_per_class, k);
            pts.push(x + noise_std * normal.sample(&mut rng));
            pts.push(y + noise_std * normal.sample(&mut rng));
            labels.push(c);
        }
    }
    for axis in 0..2 {
        let (lo, hi) = pts
            .iter()
            .skip(axis)
            .step_by(2)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in pts.iter_mut().skip(axis).step_by(2) {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    }
    let inputs = Tensor::new(vec![labels.len(), 2], pts)?;
    Dataset::new(inputs, labels, k, format!("spirals-k{k}-seed{seed}"))
}

/// Procedurally rendered handwritten-style digits.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitStyle {
    pub side: usize,
    /// Per-vertex jitter of the stroke skeleton, in glyph units.
    pub jitter: f64,
    /// Maximum rotation in radians.
    pub rotation: f64,
    pub pixel_noise: f64,
}

impl Default for DigitStyle {
    fn default() -> Self {
        Self {
            side: 12,
            jitter: 0.07,
            rotation: 0.25,
            pixel_noise: 0.12,
        }
    }
}

/// Stroke skeletons in a unit box (x right, y down).
fn glyph(d: usize) -> &'static [&'static [(f64, f64)]] {
    match d {
        0 => &[&[(0.5, 0.0), (0.85, 0.2), (0.85, 0.8), (0.5, 1.0), (0.15, 0.8), (0.15, 0.2), (0.5, 0.0)]],
        1 => &[&[(0.3, 0.2), (0.55, 0.0), (0.55, 1.0)], &[(0.3, 1.0), (0.8, 1.0)]],
        2 => &[&[(0.15, 0.2), (0.5, 0.0), (0.85, 0.2), (0.8, 0.45), (0.15, 1.0), (0.9, 1.0)]],
        3 => &[&[(0.15, 0.05), (0.85, 0.05), (0.45, 0.45), (0.85, 0.65), (0.7, 0.95), (0.15, 0.9)]],
        4 => &[&[(0.7, 1.0), (0.7, 0.0), (0.1, 0.65), (0.9, 0.65)]],
        5 => &[&[(0.85, 0.0), (0.2, 0.0), (0.15, 0.45), (0.7, 0.45), (0.85, 0.75), (0.6, 1.0), (0.15, 0.9)]],
        6 => &[&[(0.8, 0.0), (0.3, 0.3), (0.15, 0.75), (0.5, 1.0), (0.85, 0.75), (0.55, 0.5), (0.2, 0.65)]],
        7 => &[&[(0.1, 0.0), (0.9, 0.0), (0.4, 1.0)], &[(0.35, 0.5), (0.75, 0.5)]],
        8 => &[
            &[(0.5, 0.5), (0.2, 0.25), (0.5, 0.0), (0.8, 0.25), (0.5, 0.5)],
            &[(0.5, 0.5), (0.15, 0.75), (0.5, 1.0), (0.85, 0.75), (0.5, 0.5)],
        ],
        _ => &[&[(0.8, 0.35), (0.5, 0.55), (0.2, 0.35), (0.5, 0.0), (0.8, 0.35), (0.7, 1.0)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// `n` digit images (balanced round-robin over the 10 classes), shape
/// `[n, 1, side, side]`, quantized to byte levels so they survive an IDX round trip.
pub fn synth_digits(n: usize, style: &DigitStyle, seed: u64) -> Result<Dataset> {
    let side = style.side;
    if side < 4 {
        return Err(Error::input(format!("digit canvas side must be at least 4, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    let s = side as f64;
    for i in 0..n {
        let d = i % 10;
        let strokes: Vec<Vec<(f64, f64)>> = glyph(d)
            .iter()
            .map(|stroke| {
                stroke
                    .iter()
                    .map(|&(x, y)| (x + style.jitter * normal.sample(&mut rng), y + style.jitter * normal.sample(&mut rng)))
                    .collect()
            })
            .collect();
        let angle = rng.random_range(-style.rotation..=style.rotation);
        let scale = rng.random_range(0.6..0.8) * s;
        let aspect = rng.random_range(0.8..1.1);
        let shear = rng.random_range(-0.25..0.25);
        let (cx, cy) = (s / 2.0 + rng.random_range(-1.0..1.0), s / 2.0 + rng.random_range(-1.0..1.0));
        let width = rng.random_range(0.55..1.0);
        let ink = rng.random_range(0.7..1.0);
        let (sin, cos) = angle.sin_cos();
        let place = |(x, y): (f64, f64)| {
            let (u, v) = ((x - 0.5) * aspect + shear * (y - 0.5), y - 0.5);
            (cx + scale * (cos * u - sin * v), cy + scale * (sin * u + cos * v))
        };
        let segments: Vec<((f64, f64), (f64, f64))> = strokes
            .iter()
            .flat_map(|st| st.windows(2).map(|w| (place(w[0]), place(w[1]))).collect::<Vec<_>>())
            .collect();
        for py in 0..side {
            for px in 0..side {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let dist = segments
                    .iter()
                    .map(|&(a, b)| segment_distance(p, a, b))
                    .fold(f64::INFINITY, f64::min);
                let stroke = ink * (1.0 - ((dist - width) / 0.8).clamp(0.0, 1.0));
                let v = (stroke + style.pixel_noise * normal.sample(&mut rng)).clamp(0.0, 1.0);
                values.push((v * 255.0).round() / 255.0);
            }
        }
        labels.push(d);
    }
    let inputs = Tensor::new(vec![n, 1, side, side], values)?;
    Dataset::new(inputs, labels, 10, format!("digits-{side}px-seed{seed}"))
}

/// Seeded per-epoch shuffling plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Fisher–Yates permutation of `0..n` for `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Splits a freshly shuffled dataset into batches; the final partial batch is kept.
pub fn batches(ds: &Dataset, plan: &BatchPlan) -> Result<Vec<Batch>> {
    if plan.batch_size == 0 {
        return Err(Error::input("batch size must be at least 1"));
    }
    let order = epoch_permutation(ds.len(), plan.seed, plan.epoch);
    Ok(order
        .chunks(plan.batch_size)
        .map(|idx| Batch {
            indices: idx.to_vec(),
            inputs: ds.inputs().select_rows(idx),
            labels: idx.iter().map(|&i| ds.labels()[i]).collect(),
        })
        .collect())
}
