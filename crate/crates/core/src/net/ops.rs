//! Batched forward/backward primitives. Activations are `[B, ...]` tensors.

use crate::error::Result;
use crate::tensor::{argmax4, gemm, ConvGeom, Scalar, Tensor};

use super::ReluMode;

pub(crate) const BN_EPS: f64 = 1e-5;

pub(crate) fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (batch, inputs) = (x.batch(), x.row_len());
    let outputs = w.shape()[0];
    let mut y = Tensor::zeros(vec![batch, outputs]);
    for r in 0..batch {
        y.row_mut(r).copy_from_slice(b.data());
    }
    gemm(batch, inputs, outputs, x.data(), false, w.data(), true, y.data_mut(), true);
    y
}

pub(crate) struct DenseGrads<T: Scalar> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    want_params: bool,
    want_dx: bool,
) -> DenseGrads<T> {
    let (batch, inputs) = (x.batch(), x.row_len());
    let outputs = w.shape()[0];
    let (dw, db) = if want_params {
        let mut dw = Tensor::zeros(vec![outputs, inputs]);
        gemm(outputs, batch, inputs, dy.data(), true, x.data(), false, dw.data_mut(), false);
        let mut db = Tensor::zeros(vec![outputs]);
        for r in 0..batch {
            for (acc, &g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                *acc += g;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape().to_vec());
        gemm(batch, outputs, inputs, dy.data(), false, w.data(), false, dx.data_mut(), false);
        dx
    });
    DenseGrads { dx, dw, db }
}

pub(crate) fn conv_geom(x_shape: &[usize], kernel: usize, stride: usize) -> Result<ConvGeom> {
    ConvGeom::new(x_shape[1], x_shape[2], x_shape[3], kernel, kernel, stride, kernel / 2)
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), w.shape()[2], stride)?;
    let out_c = w.shape()[0];
    let batch = x.batch();
    let plane = g.col_cols();
    let mut y = Tensor::zeros(vec![batch, out_c, g.out_h, g.out_w]);
    let mut cols = vec![T::zero(); g.col_rows() * plane];
    for s in 0..batch {
        g.im2col(x.row(s), &mut cols);
        let out = y.row_mut(s);
        gemm(out_c, g.col_rows(), plane, w.data(), false, &cols, false, out, false);
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut out[o * plane..(o + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    Ok(y)
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    dy: &Tensor<T>,
    want_params: bool,
    want_dx: bool,
) -> Result<DenseGrads<T>> {
    let g = conv_geom(x.shape(), w.shape()[2], stride)?;
    let out_c = w.shape()[0];
    let batch = x.batch();
    let plane = g.col_cols();
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * plane];
    let mut dcols = vec![T::zero(); rows * plane];
    let mut dw = want_params.then(|| Tensor::zeros(w.shape().to_vec()));
    let mut db = (want_params && has_bias).then(|| Tensor::zeros(vec![out_c]));
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    for s in 0..batch {
        let dys = dy.row(s);
        if let Some(dw) = dw.as_mut() {
            g.im2col(x.row(s), &mut cols);
            gemm(out_c, plane, rows, dys, false, &cols, true, dw.data_mut(), true);
        }
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.data_mut().iter_mut().enumerate() {
                *acc += dys[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, out_c, plane, w.data(), true, dys, false, &mut dcols, false);
            g.col2im(&dcols, dx.row_mut(s));
        }
    }
    Ok(DenseGrads { dx, dw, db })
}

/// `(channels, positions-per-channel)` view of a `[B, C]` or `[B, C, H, W]` batch.
fn bn_layout(shape: &[usize]) -> (usize, usize) {
    let spatial = shape[2..].iter().product::<usize>().max(1);
    (shape[1], spatial)
}

pub(crate) struct BnCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
    /// Batch mean and unbiased variance, for updating running statistics.
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub(crate) fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, BnCache<T>) {
    let (channels, spatial) = bn_layout(x.shape());
    let batch = x.batch();
    let count = batch * spatial;
    let eps = T::lit(BN_EPS);
    let idx = |b: usize, c: usize| (b * channels + c) * spatial;
    let (mean, var) = if batch_stats {
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for c in 0..channels {
            let mut s = T::zero();
            for b in 0..batch {
                s += x.data()[idx(b, c)..idx(b, c) + spatial].iter().copied().sum::<T>();
            }
            let m = s / T::lit(count as f64);
            let mut v = T::zero();
            for b in 0..batch {
                for &xv in &x.data()[idx(b, c)..idx(b, c) + spatial] {
                    v += (xv - m) * (xv - m);
                }
            }
            mean[c] = m;
            var[c] = v / T::lit(count as f64);
        }
        (mean, var)
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape().to_vec());
    let mut y = Tensor::zeros(x.shape().to_vec());
    for b in 0..batch {
        for c in 0..channels {
            let r = idx(b, c)..idx(b, c) + spatial;
            let (g, bt) = (gamma.data()[c], beta.data()[c]);
            for i in r {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + bt;
            }
        }
    }
    let var_unbiased = if batch_stats && count > 1 {
        let k = T::lit(count as f64 / (count - 1) as f64);
        var.iter().map(|&v| v * k).collect()
    } else {
        var
    };
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats,
            mean,
            var_unbiased,
        },
    )
}

pub(crate) fn bn_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = dy.shape();
    let (channels, spatial) = bn_layout(shape);
    let batch = dy.batch();
    let count = T::lit((batch * spatial) as f64);
    let idx = |b: usize, c: usize| (b * channels + c) * spatial;
    let mut dgamma = Tensor::zeros(vec![channels]);
    let mut dbeta = Tensor::zeros(vec![channels]);
    for c in 0..channels {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for b in 0..batch {
            for i in idx(b, c)..idx(b, c) + spatial {
                sb += dy.data()[i];
                sg += dy.data()[i] * cache.xhat.data()[i];
            }
        }
        dgamma.data_mut()[c] = sg;
        dbeta.data_mut()[c] = sb;
    }
    let mut dx = Tensor::zeros(shape.to_vec());
    for c in 0..channels {
        let scale = gamma.data()[c] * cache.inv_std[c];
        let (sb, sg) = (dbeta.data()[c], dgamma.data()[c]);
        for b in 0..batch {
            for i in idx(b, c)..idx(b, c) + spatial {
                dx.data_mut()[i] = if cache.batch_stats {
                    scale / count * (count * dy.data()[i] - sb - cache.xhat.data()[i] * sg)
                } else {
                    scale * dy.data()[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Scalar>(output: &Tensor<T>, dy: &Tensor<T>, mode: ReluMode) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    for ((d, &g), &y) in dx.data_mut().iter_mut().zip(dy.data()).zip(output.data()) {
        let pass = y > T::zero() && (mode == ReluMode::Standard || g > T::zero());
        *d = if pass { g } else { T::zero() };
    }
    dx
}

pub(crate) fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(vec![b, c, oh, ow]);
    let mut idx = vec![0u32; b * c * oh * ow];
    let xd = x.data();
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let p = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let k = argmax4([xd[p[0]], xd[p[1]], xd[p[2]], xd[p[3]]]);
                y.data_mut()[o] = xd[p[k]];
                idx[o] = p[k] as u32;
                o += 1;
            }
        }
    }
    (y, idx)
}

pub(crate) fn maxpool_backward<T: Scalar>(input_shape: &[usize], idx: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (&i, &g) in idx.iter().zip(dy.data()) {
        dx.data_mut()[i as usize] += g;
    }
    dx
}

pub(crate) fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let spatial = s[2] * s[3];
    let inv = T::lit(1.0 / spatial as f64);
    let mut y = Tensor::zeros(vec![s[0], s[1]]);
    for (o, chunk) in y.data_mut().iter_mut().zip(x.data().chunks(spatial)) {
        *o = chunk.iter().copied().sum::<T>() * inv;
    }
    y
}

pub(crate) fn gap_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let spatial = input_shape[2] * input_shape[3];
    let inv = T::lit(1.0 / spatial as f64);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (chunk, &g) in dx.data_mut().chunks_mut(spatial).zip(dy.data()) {
        chunk.fill(g * inv);
    }
    dx
}

/// Identity shortcut with spatial subsampling and zero channel padding.
pub(crate) fn shortcut_forward<T: Scalar>(x: &Tensor<T>, out_c: usize, stride: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if stride == 1 && c == out_c {
        return x.clone();
    }
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut y = Tensor::zeros(vec![b, out_c, oh, ow]);
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    y.set(&[n, ch, oy, ox], x.at(&[n, ch, oy * stride, ox * stride]));
                }
            }
        }
    }
    y
}

pub(crate) fn shortcut_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (b, c) = (input_shape[0], input_shape[1]);
    if stride == 1 && c == dy.shape()[1] {
        return dy.clone();
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    dx.set(&[n, ch, oy * stride, ox * stride], dy.at(&[n, ch, oy, ox]));
                }
            }
        }
    }
    dx
}
