//! Per-class saliency explanations and class-similarity statistics.
//!
//! All four methods need one backward pass per (sample, class). `explain_all`
//! replicates each sample once per class and seeds the replicas with distinct
//! one-hot selectors, so a single pass yields every map; when the replicated
//! batch would exceed the memory budget the classes are processed in chunks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::net::{ForwardOpts, Network, ReluMode};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Grad,
    GradInput,
    GuidedBp,
    GradCam,
}

pub const METHOD_NAMES: &[&str] = &["grad", "grad-input", "guidedbp", "gradcam"];

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "grad" => Method::Grad,
            "grad-input" => Method::GradInput,
            "guidedbp" => Method::GuidedBp,
            "gradcam" => Method::GradCam,
            other => {
                return Err(Error::Configuration(format!(
                    "unknown explanation method `{other}`; expected one of {}",
                    METHOD_NAMES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Grad => "grad",
            Method::GradInput => "grad-input",
            Method::GuidedBp => "guidedbp",
            Method::GradCam => "gradcam",
        })
    }
}

/// How explanations are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub method: Method,
    /// Grad-CAM layer; `None` picks the last convolutional feature map.
    pub layer: Option<usize>,
    /// Normalize batchnorm with batch statistics instead of running ones.
    pub batch_stats: bool,
    /// Upper bound on activation memory for one replicated pass.
    pub budget_bytes: usize,
}

impl ExplainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            layer: None,
            batch_stats: false,
            budget_bytes: 256 << 20,
        }
    }
}

/// The `c` class explanations of one sample.
#[derive(Debug, Clone)]
pub struct ExplanationSet<T: Scalar = f32> {
    pub maps: Vec<Tensor<T>>,
    pub method: Method,
    pub sample: usize,
}

impl<T: Scalar> ExplanationSet<T> {
    /// `c×c` matrix of pairwise cosines, row-major.
    pub fn cosine_matrix(&self) -> Result<Vec<f64>> {
        let c = self.maps.len();
        let mut m = vec![0.0; c * c];
        for j in 0..c {
            for k in j..c {
                let v = cosine(&self.maps[j], &self.maps[k])?;
                m[j * c + k] = v;
                m[k * c + j] = v;
            }
        }
        Ok(m)
    }
}

/// Norms below this make the cosine zero.
pub const NORM_EPS: f64 = 1e-12;

/// Cosine similarity of two equally-shaped maps, computed in `f64`.
pub fn cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.widen(), y.widen());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < NORM_EPS || nb < NORM_EPS {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn resolve_layer<T: Scalar>(net: &Network<T>, cfg: &ExplainConfig) -> Result<usize> {
    if !net.is_convolutional() {
        return Err(Error::Configuration(format!(
            "gradcam needs a convolutional network; {} has none",
            net.arch()
        )));
    }
    match cfg.layer {
        Some(l) => {
            net.check_feature_layer(l)?;
            Ok(l)
        }
        None => net.default_feature_layer(),
    }
}

/// One backward pass over `x` (a batch) seeded with `selector`, returning one
/// map per row.
fn maps_for_rows<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    selector: &Tensor<T>,
    cfg: &ExplainConfig,
) -> Result<Vec<Tensor<T>>> {
    let mut opts = ForwardOpts {
        batch_stats: cfg.batch_stats,
        ..ForwardOpts::eval()
    };
    match cfg.method {
        Method::Grad | Method::GradInput | Method::GuidedBp => {
            let (_, tape) = net.forward(x, opts)?;
            let mode = if cfg.method == Method::GuidedBp {
                ReluMode::Guided
            } else {
                ReluMode::Standard
            };
            let g = net.backward_input(tape, selector, mode)?;
            let per_sample = x.shape()[1..].to_vec();
            (0..x.batch())
                .map(|r| {
                    let row: Vec<T> = if cfg.method == Method::GradInput {
                        g.row(r).iter().zip(x.row(r)).map(|(&a, &b)| a * b).collect()
                    } else {
                        g.row(r).to_vec()
                    };
                    Tensor::new(per_sample.clone(), row)
                })
                .collect()
        }
        Method::GradCam => {
            let layer = resolve_layer(net, cfg)?;
            opts.capture = Some(layer);
            let (_, tape) = net.forward(x, opts)?;
            let fg = net.feature_grads(tape, selector, layer)?;
            let s = fg.activations.shape();
            let (k, h, w) = (s[1], s[2], s[3]);
            let plane = h * w;
            let inv = T::lit(1.0 / plane as f64);
            (0..x.batch())
                .map(|r| {
                    let a = fg.activations.row(r);
                    let g = fg.grads.row(r);
                    let mut cam = vec![T::zero(); plane];
                    for ch in 0..k {
                        let weight = g[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>() * inv;
                        for (c, &v) in cam.iter_mut().zip(&a[ch * plane..(ch + 1) * plane]) {
                            *c += weight * v;
                        }
                    }
                    for c in &mut cam {
                        if *c < T::zero() {
                            *c = T::zero();
                        }
                    }
                    Tensor::new(vec![h, w], cam)
                })
                .collect()
        }
    }
}

fn one_hot_rows<T: Scalar>(classes: &[usize], c: usize) -> Tensor<T> {
    let mut s = Tensor::zeros(vec![classes.len(), c]);
    for (r, &k) in classes.iter().enumerate() {
        s.row_mut(r)[k] = T::one();
    }
    s
}

/// Explanation of class `class` for a single (unbatched) sample.
pub fn explain<T: Scalar>(net: &Network<T>, x: &Tensor<T>, class: usize, cfg: &ExplainConfig) -> Result<Tensor<T>> {
    if class >= net.num_classes() {
        return Err(Error::Parameter(format!("class {class} of {}", net.num_classes())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xb = x.clone().reshape(shape)?;
    let mut maps = maps_for_rows(net, &xb, &one_hot_rows(&[class], net.num_classes()), cfg)?;
    Ok(maps.remove(0))
}

/// Rough bytes of activation storage per batch row during an explanation pass.
fn bytes_per_row<T: Scalar>(net: &Network<T>) -> usize {
    let shapes = net.layer_output_shapes().unwrap_or_default();
    let floats: usize = net.input_shape().iter().product::<usize>()
        + shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
    // caches plus gradients in flight
    3 * floats * std::mem::size_of::<T>()
}

/// Explanation sets for every sample in `batch`, semantically equal to `c`
/// independent [`explain`] calls per sample.
pub fn explain_all<T: Scalar>(net: &Network<T>, batch: &Tensor<T>, cfg: &ExplainConfig) -> Result<Vec<ExplanationSet<T>>> {
    if batch.ndim() < 2 || batch.shape()[1..] != *net.input_shape() {
        return Err(dim_err(format!(
            "batch {:?} does not match network input {:?}",
            batch.shape(),
            net.input_shape()
        )));
    }
    if cfg.method == Method::GradCam {
        resolve_layer(net, cfg)?;
    }
    let c = net.num_classes();
    let b = batch.batch();
    let max_rows = (cfg.budget_bytes / bytes_per_row(net).max(1)).max(1);
    // Either all classes of several samples per pass, or class chunks of one sample.
    let (samples_per_pass, classes_per_pass) = if max_rows >= c {
        ((max_rows / c).min(b), c)
    } else {
        (1, max_rows)
    };
    let mut sets: Vec<ExplanationSet<T>> = (0..b)
        .map(|i| ExplanationSet {
            maps: Vec::with_capacity(c),
            method: cfg.method,
            sample: i,
        })
        .collect();
    for s0 in (0..b).step_by(samples_per_pass) {
        let samples: Vec<usize> = (s0..(s0 + samples_per_pass).min(b)).collect();
        for k0 in (0..c).step_by(classes_per_pass) {
            let classes: Vec<usize> = (k0..(k0 + classes_per_pass).min(c)).collect();
            let rows: Vec<usize> = samples
                .iter()
                .flat_map(|&i| std::iter::repeat_n(i, classes.len()))
                .collect();
            let sel_classes: Vec<usize> = samples.iter().flat_map(|_| classes.iter().copied()).collect();
            let xr = batch.select_rows(&rows)?;
            let maps = maps_for_rows(net, &xr, &one_hot_rows(&sel_classes, c), cfg)?;
            for (&row, map) in rows.iter().zip(maps) {
                sets[row].maps.push(map);
            }
        }
    }
    Ok(sets)
}

/// Dataset-level mean of per-sample explanation cosines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub classes: usize,
    /// Row-major `classes × classes`.
    pub values: Vec<f64>,
    pub count: usize,
}

impl SimilarityMatrix {
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.classes + k]
    }

    /// Median of the entries above the diagonal.
    pub fn median_off_diagonal(&self) -> f64 {
        let mut v: Vec<f64> = (0..self.classes)
            .flat_map(|j| ((j + 1)..self.classes).map(move |k| (j, k)))
            .map(|(j, k)| self.get(j, k))
            .collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return 0.0;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// CSV with a header row; row and column order is class index.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for k in 0..self.classes {
            s.push_str(&format!(",{k}"));
        }
        s.push('\n');
        for j in 0..self.classes {
            s.push_str(&j.to_string());
            for k in 0..self.classes {
                s.push_str(&format!(",{:.8}", self.get(j, k)));
            }
            s.push('\n');
        }
        s
    }

    /// Binary PGM heatmap, min-max normalized, `cell` pixels per entry.
    pub fn to_pgm(&self, cell: usize) -> Vec<u8> {
        let img = Tensor::<f64>::new(vec![self.classes, self.classes], self.values.clone()).expect("square");
        pgm_bytes(&upscale(&img, cell))
    }
}

fn upscale(img: &Tensor<f64>, cell: usize) -> Tensor<f64> {
    let cell = cell.max(1);
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Tensor::from_fn(vec![h * cell, w * cell], |i| {
        let (y, x) = (i / (w * cell), i % (w * cell));
        img.at(&[y / cell, x / cell])
    })
}

/// Encodes an `H×W` tensor as binary PGM after min-max normalization.
pub fn pgm_bytes(img: &Tensor<f64>) -> Vec<u8> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Collapses a saliency map to `H×W` (summing channels) for display.
pub fn saliency_image<T: Scalar>(map: &Tensor<T>) -> Tensor<f64> {
    let s = map.shape();
    let (c, h, w) = match s {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => (1, 1, map.len()),
    };
    Tensor::from_fn(vec![h, w], |i| (0..c).map(|ch| map.data()[ch * h * w + i].widen()).sum())
}

/// Averages per-sample cosine matrices over every image in `images`.
pub fn similarity_matrix<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    cfg: &ExplainConfig,
    chunk: usize,
) -> Result<SimilarityMatrix> {
    if images.is_empty() || images.ndim() < 2 {
        return Err(Error::Parameter("similarity matrix over an empty dataset".into()));
    }
    let c = net.num_classes();
    let n = images.batch();
    let mut acc = vec![0.0; c * c];
    for start in (0..n).step_by(chunk.max(1)) {
        let rows: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
        let batch = images.select_rows(&rows)?;
        for set in explain_all(net, &batch, cfg)? {
            for (a, v) in acc.iter_mut().zip(set.cosine_matrix()?) {
                *a += v;
            }
        }
    }
    Ok(SimilarityMatrix {
        classes: c,
        values: acc.into_iter().map(|v| v / n as f64).collect(),
        count: n,
    })
}
