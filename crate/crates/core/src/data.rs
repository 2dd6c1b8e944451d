//! MNIST IDX ingestion, stratified constrained splits and a procedural
//! digit-like fixture for runs without the real files.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ColonyError, Result};
use crate::nn::Tensor;
use crate::seed;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
/// Network input side after zero padding.
pub const PADDED: usize = 32;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// Row-major 28×28 intensities in [0, 1].
    pub pixels: Vec<f32>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub images_sha256: Option<String>,
    pub labels_sha256: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    /// Source positions of `train` / `test`, ascending.
    pub train_index: Vec<usize>,
    pub test_index: Vec<usize>,
    pub provenance: Provenance,
}

fn parse_err(offset: usize, message: impl Into<String>) -> ColonyError {
    ColonyError::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(bytes.len(), format!("truncated header: missing {what}")))
}

/// Parse in-memory IDX image and label payloads.
pub fn parse_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Vec<LabeledImage>> {
    let magic = be_u32(images, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(parse_err(0, format!("expected image magic {IMAGE_MAGIC}, found {magic}")));
    }
    let count = be_u32(images, 4, "image count")? as usize;
    let rows = be_u32(images, 8, "row count")? as usize;
    let cols = be_u32(images, 12, "column count")? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(parse_err(8, format!("expected {SIDE}x{SIDE} images, header says {rows}x{cols}")));
    }
    let lmagic = be_u32(labels, 0, "label magic")?;
    if lmagic != LABEL_MAGIC {
        return Err(parse_err(0, format!("expected label magic {LABEL_MAGIC}, found {lmagic}")));
    }
    let lcount = be_u32(labels, 4, "label count")? as usize;
    if lcount != count {
        return Err(parse_err(4, format!("label count {lcount} does not match image count {count}")));
    }
    let need = count
        .checked_mul(PIXELS)
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| parse_err(4, "image count overflows"))?;
    if images.len() < need {
        return Err(parse_err(
            images.len(),
            format!("truncated image payload: {} of {need} bytes", images.len()),
        ));
    }
    if labels.len() < 8 + count {
        return Err(parse_err(
            labels.len(),
            format!("truncated label payload: {} of {} bytes", labels.len(), 8 + count),
        ));
    }
    (0..count)
        .map(|i| {
            let label = labels[8 + i];
            if label as usize >= CLASSES {
                return Err(parse_err(8 + i, format!("label {label} out of range")));
            }
            let start = 16 + i * PIXELS;
            let pixels = images[start..start + PIXELS]
                .iter()
                .map(|&v| v as f32 / 255.0)
                .collect();
            Ok(LabeledImage { pixels, label })
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ColonyError::io(path, e))
}

/// Read and parse an IDX image/label file pair.
pub fn parse_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    parse_idx_bytes(&read(images.as_ref())?, &read(labels.as_ref())?)
}

/// Encode images and labels as an IDX pair (inverse of [`parse_idx_bytes`]
/// up to the `v/255` quantization).
pub fn encode_idx(images: &[LabeledImage]) -> (Vec<u8>, Vec<u8>) {
    let n = images.len() as u32;
    let mut img = Vec::with_capacity(16 + images.len() * PIXELS);
    for v in [IMAGE_MAGIC, n, SIDE as u32, SIDE as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    let mut lab = Vec::with_capacity(8 + images.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for im in images {
        img.extend(im.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        lab.push(im.label);
    }
    (img, lab)
}

/// Standard MNIST file names under a data directory.
pub struct MnistFiles {
    pub train_images: std::path::PathBuf,
    pub train_labels: std::path::PathBuf,
}

impl MnistFiles {
    pub fn under(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        MnistFiles {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
        }
    }

    pub fn load(&self) -> Result<(Vec<LabeledImage>, Provenance)> {
        let images = read(&self.train_images)?;
        let labels = read(&self.train_labels)?;
        let set = parse_idx_bytes(&images, &labels)?;
        let provenance = Provenance {
            source: self.train_images.display().to_string(),
            images_sha256: Some(seed::content_hash(&images)),
            labels_sha256: Some(seed::content_hash(&labels)),
            seed: 0,
        };
        Ok((set, provenance))
    }
}

/// Largest-remainder apportionment of `total` over `weights`.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut quota: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rest: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(k, &w)| (total * w % sum, k))
        .collect();
    // largest remainder first, lower class first on ties
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - quota.iter().sum::<usize>();
    for &(_, k) in rest.iter().take(missing) {
        quota[k] += 1;
    }
    quota
}

/// Stratified draw of disjoint index sets of the given sizes. Each class's
/// share in every set matches its share in `labels` to within one item.
pub fn stratified_partition(labels: &[u8], sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    let requested: usize = sizes.iter().sum();
    if requested > labels.len() {
        return Err(ColonyError::Input(format!(
            "requested {requested} items from a source of {}",
            labels.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l as usize)
            .ok_or_else(|| ColonyError::Input(format!("label {l} out of range")))?
            .push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas: Vec<Vec<usize>> = sizes.iter().map(|&n| apportion(n, &counts)).collect();
    let mut out = vec![Vec::new(); sizes.len()];
    for (k, members) in by_class.iter_mut().enumerate() {
        let needed: usize = quotas.iter().map(|q| q[k]).sum();
        if needed > members.len() {
            return Err(ColonyError::Input(format!(
                "class {k} has {} items, {needed} needed",
                members.len()
            )));
        }
        members.shuffle(&mut seed::stream(seed, &format!("split/class{k}")));
        let mut start = 0;
        for (set, q) in out.iter_mut().zip(&quotas) {
            set.extend_from_slice(&members[start..start + q[k]]);
            start += q[k];
        }
    }
    for set in &mut out {
        set.sort_unstable();
    }
    Ok(out)
}

/// Seeded stratified subsample into disjoint train and test sets.
pub fn constrained_split(
    full: &[LabeledImage],
    n_train: usize,
    n_test: usize,
    seed: u64,
    mut provenance: Provenance,
) -> Result<DatasetSplit> {
    let labels: Vec<u8> = full.iter().map(|x| x.label).collect();
    let sets = stratified_partition(&labels, &[n_train, n_test], seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| full[i].clone()).collect::<Vec<_>>();
    provenance.seed = seed;
    Ok(DatasetSplit {
        train: pick(&sets[0]),
        test: pick(&sets[1]),
        train_index: sets[0].clone(),
        test_index: sets[1].clone(),
        provenance,
    })
}

/// Carve a stratified validation set (`fraction` of `train`) off a training set.
pub fn carve_validation(
    train: &[LabeledImage],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(ColonyError::Input(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let n_valid = (train.len() as f64 * fraction).round() as usize;
    let labels: Vec<u8> = train.iter().map(|x| x.label).collect();
    let sets = stratified_partition(&labels, &[n_valid], seed::derive(seed, "validation"))?;
    let mut is_valid = vec![false; train.len()];
    for &i in &sets[0] {
        is_valid[i] = true;
    }
    let (mut fit, mut valid) = (Vec::new(), Vec::new());
    for (im, v) in train.iter().zip(is_valid) {
        if v {
            valid.push(im.clone());
        } else {
            fit.push(im.clone());
        }
    }
    Ok((fit, valid))
}

// Seven-segment layout: a top, b upper right, c lower right, d bottom,
// e lower left, f upper left, g middle.
const SEGMENTS: [((f32, f32), (f32, f32)); 7] = [
    ((-1.0, -1.0), (1.0, -1.0)),
    ((1.0, -1.0), (1.0, 0.0)),
    ((1.0, 0.0), (1.0, 1.0)),
    ((-1.0, 1.0), (1.0, 1.0)),
    ((-1.0, 0.0), (-1.0, 1.0)),
    ((-1.0, -1.0), (-1.0, 0.0)),
    ((-1.0, 0.0), (1.0, 0.0)),
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 4, 3, 2, 6],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Procedural digit-like images: seven-segment strokes with random shift,
/// scale, slant, thickness, intensity and background noise. Label `i % 10`.
pub fn synthetic_fixture(n: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if n < 10 {
        return Err(ColonyError::Input(format!("fixture needs at least 10 images, got {n}")));
    }
    let mut rng = seed::stream(seed, "fixture");
    Ok((0..n)
        .map(|i| {
            let label = (i % CLASSES) as u8;
            let cx = 14.0 + rng.random_range(-2.5f32..2.5);
            let cy = 14.0 + rng.random_range(-2.0f32..2.0);
            let sx = 5.0 * rng.random_range(0.8f32..1.2);
            let sy = 8.0 * rng.random_range(0.85f32..1.15);
            let slant = rng.random_range(-0.25f32..0.25);
            let thickness = rng.random_range(1.2f32..2.2);
            let ink = rng.random_range(0.7f32..1.0);
            let strokes: Vec<((f32, f32), (f32, f32))> = DIGIT_SEGMENTS[label as usize]
                .iter()
                .map(|&s| {
                    let place = |(u, v): (f32, f32)| (cx + sx * u - slant * sy * v, cy + sy * v);
                    (place(SEGMENTS[s].0), place(SEGMENTS[s].1))
                })
                .collect();
            let pixels = (0..PIXELS)
                .map(|p| {
                    let pt = ((p % SIDE) as f32 + 0.5, (p / SIDE) as f32 + 0.5);
                    let d = strokes
                        .iter()
                        .map(|&(a, b)| segment_distance(pt, a, b))
                        .fold(f32::INFINITY, f32::min);
                    let stroke = ink * (1.0 - (d - thickness).max(0.0)).clamp(0.0, 1.0);
                    let noise = rng.random_range(0.0f32..0.08);
                    (stroke + noise).clamp(0.0, 1.0)
                })
                .collect();
            LabeledImage { pixels, label }
        })
        .collect())
}

/// Stack images into a zero-padded `[n, 1, 32, 32]` batch.
pub fn to_batch(images: &[&LabeledImage]) -> Result<Tensor<f32>> {
    let pad = (PADDED - SIDE) / 2;
    let mut data = vec![0.0f32; images.len() * PADDED * PADDED];
    for (n, im) in images.iter().enumerate() {
        let base = n * PADDED * PADDED;
        for r in 0..SIDE {
            let dst = base + (r + pad) * PADDED + pad;
            data[dst..dst + SIDE].copy_from_slice(&im.pixels[r * SIDE..(r + 1) * SIDE]);
        }
    }
    Tensor::from_vec(&[images.len(), 1, PADDED, PADDED], data)
}
