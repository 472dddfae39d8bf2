//! Datasets: MNIST IDX and CIFAR-10 binary readers, standardization,
//! pad-crop-flip augmentation, shuffled batching and synthetic blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×C×H×W`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(dim_err(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(dim_err(format!("{} images but {} labels", images.batch(), labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_names.len()) {
            return Err(Error::Parameter(format!("label {y} outside {} classes", class_names.len())));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-sample `C×H×W`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        Ok((self.images.select_rows(idx)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` samples.
    pub fn subset(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Parameter(format!("subset of {n} from {} samples", self.len())));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&idx)?;
        Ok(Self {
            images,
            labels,
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
        })
    }
}

fn digit_names(n: usize) -> Vec<String> {
    (0..n).map(|k| k.to_string()).collect()
}

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| fmt_err(offset, "truncated header"))
}

/// Returns the dimension sizes and the payload offset.
fn idx_header(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, usize)> {
    let got = be_u32(bytes, 0)?;
    if got != magic {
        return Err(fmt_err(0, format!("{what}: magic {got:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let want = dims.iter().product::<usize>();
    if bytes.len() - start < want {
        return Err(fmt_err(
            bytes.len(),
            format!("{what}: truncated payload, {} of {want} bytes", bytes.len() - start),
        ));
    }
    Ok((dims, start))
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, istart) = idx_header(images, IDX_IMAGES, "images")?;
    let (ldims, lstart) = idx_header(labels, IDX_LABELS, "labels")?;
    if idims[0] != ldims[0] {
        return Err(fmt_err(4, format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if n == 0 {
        return Err(fmt_err(4, "empty dataset"));
    }
    let labels: Vec<usize> = labels[lstart..lstart + n].iter().map(|&b| b as usize).collect();
    if let Some(pos) = labels.iter().position(|&y| y >= 10) {
        return Err(fmt_err(lstart + pos, format!("label {} is not a digit", labels[pos])));
    }
    let px = images[istart..istart + n * h * w].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(Tensor::new(vec![n, 1, h, w], px)?, labels, digit_names(10))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Inverse of [`parse_idx`] for single-channel datasets with pixels in `[0,1]`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = ds.images.shape();
    if s[1] != 1 {
        return Err(dim_err(format!("IDX images are single-channel, got {s:?}")));
    }
    let mut img = IDX_IMAGES.to_be_bytes().to_vec();
    for d in [s[0], s[2], s[3]] {
        img.extend((d as u32).to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = IDX_LABELS.to_be_bytes().to_vec();
    lab.extend((s[0] as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&y| y as u8));
    Ok((img, lab))
}

pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(fmt_err(
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut px = Vec::with_capacity(n * CIFAR_PIXELS);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(fmt_err(r * CIFAR_RECORD, format!("label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        px.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], px)?,
        labels,
        CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
}

pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.sample_shape() != [3, 32, 32] {
        return Err(dim_err(format!("CIFAR records are 3×32×32, got {:?}", ds.sample_shape())));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.images.row(i).iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let names = parts[0].class_names.clone();
    let mut shape = parts[0].images.shape().to_vec();
    shape[0] = parts.iter().map(Dataset::len).sum();
    let images = Tensor::new(shape, parts.iter().flat_map(|d| d.images.data().iter().copied()).collect())?;
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    Dataset::new(images, labels, names)
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = (1..=5)
        .map(|k| parse_cifar10(&fs::read(dir.join(format!("data_batch_{k}.bin")))?))
        .collect::<Result<Vec<_>>>()?;
    let test = parse_cifar10(&fs::read(dir.join("test_batch.bin"))?)?;
    Ok((concat(train)?, test))
}

/// Standard MNIST file names inside `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Per-channel standardization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn fit(ds: &Dataset) -> Self {
        let s = ds.images.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| ds.images.row(i)[ch * plane..(ch + 1) * plane].iter());
            let (mut s1, mut count) = (0.0f64, 0usize);
            for &v in vals.clone() {
                s1 += v as f64;
                count += 1;
            }
            let m = s1 / count as f64;
            let var = vals.map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count as f64;
            mean.push(m as f32);
            std.push(if var > 0.0 { var.sqrt() as f32 } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let s = ds.images.shape().to_vec();
        let plane = s[2] * s[3];
        for i in 0..s[0] {
            for (ch, px) in ds.images.row_mut(i).chunks_mut(plane).enumerate() {
                for v in px {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
        ds.normalization = Some(self.clone());
    }
}

/// Fits constants on `train` and applies them to both splits.
pub fn standardize(train: &mut Dataset, test: &mut Dataset) -> Normalization {
    let norm = Normalization::fit(train);
    norm.apply(train);
    norm.apply(test);
    norm
}

pub const AUG_PAD: usize = 4;

/// Crop of the zero-padded `C×32×32` image at `(dy, dx)` in the padded
/// frame, optionally mirrored.
pub fn augment_sample(img: &[f32], channels: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let side = 32;
    let mut out = vec![0.0f32; channels * side * side];
    for c in 0..channels {
        for y in 0..side {
            let sy = (y + dy) as isize - AUG_PAD as isize;
            if !(0..side as isize).contains(&sy) {
                continue;
            }
            for x in 0..side {
                let xo = if flip { side - 1 - x } else { x };
                let sx = (xo + dx) as isize - AUG_PAD as isize;
                if (0..side as isize).contains(&sx) {
                    out[(c * side + y) * side + x] = img[(c * side + sy as usize) * side + sx as usize];
                }
            }
        }
    }
    out
}

/// Pads by 4, crops a random 32×32 window and flips with probability 0.5,
/// independently per sample.
pub fn augment(batch: &mut Tensor<f32>, rng: &mut Rng) -> Result<()> {
    let s = batch.shape().to_vec();
    if s.len() != 4 || s[2] != 32 || s[3] != 32 {
        return Err(dim_err(format!("augmentation expects N×C×32×32, got {s:?}")));
    }
    for i in 0..s[0] {
        let dy = rng.below(2 * AUG_PAD + 1);
        let dx = rng.below(2 * AUG_PAD + 1);
        let flip = rng.bernoulli(0.5);
        let out = augment_sample(batch.row(i), s[1], dy, dx, flip);
        batch.row_mut(i).copy_from_slice(&out);
    }
    Ok(())
}

/// Index batches for one epoch after a Fisher–Yates shuffle.
pub fn batches(ds: &Dataset, b: usize, rng: &mut Rng, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    let n = ds.len();
    if b == 0 || b > n {
        return Err(Error::Parameter(format!("batch size {b} for {n} samples")));
    }
    let perm = rng.permutation(n);
    Ok(perm
        .chunks(b)
        .filter(|c| !drop_last || c.len() == b)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Gaussian clusters with unit noise around centres placed `separation`
/// apart on average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    /// Per-sample `C×H×W`.
    pub shape: Vec<usize>,
    pub per_class: usize,
    pub separation: f64,
}

pub fn synth(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.shape.len() != 3 || spec.shape.contains(&0) {
        return Err(Error::Parameter(format!("degenerate synthetic spec {spec:?}")));
    }
    let d: usize = spec.shape.iter().product();
    let mut rng = Rng::new(seed);
    let scale = spec.separation / (2.0 * d as f64).sqrt();
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| rng.normal() * scale).collect())
        .collect();
    let n = spec.classes * spec.per_class;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    let mut px = Vec::with_capacity(n * d);
    for &y in &labels {
        px.extend(centres[y].iter().map(|&m| (m + rng.normal()) as f32));
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.shape);
    Dataset::new(Tensor::new(shape, px)?, labels, digit_names(spec.classes))
}
