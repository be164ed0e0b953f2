//! Forward and backward kernels on plain tensors. The tape in
//! [`super::graph`] calls into these; they are also the public
//! non-differentiable API.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new([m, n], out)
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [k, m] = a.dims2("matmul_at_b")?;
    let [k2, n] = b.dims2("matmul_at_b")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_at_b",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new([m, n], out)
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul_a_bt")?;
    let [n, k2] = b.dims2("matmul_a_bt")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_a_bt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new([m, n], out)
}

/// Softmax along `axis`, stabilized by max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::Shape {
            op: "softmax",
            shape: x.shape().to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    if !x.is_finite() {
        return Err(Error::Numeric {
            what: "softmax input".into(),
            step: 0,
        });
    }
    let extent = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let max = (0..extent).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..extent {
                let e = (d[idx(k)] - max).exp();
                d[idx(k)] = e;
                sum += e;
            }
            for k in 0..extent {
                d[idx(k)] /= sum;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_rows_inplace(d: &mut [f64], cols: usize) {
    for row in d.chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

#[inline]
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Normalized rows plus the per-row reciprocal standard deviation.
pub(crate) struct LayerNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
    /// Rows whose variance fell under the epsilon floor.
    pub floored: Vec<bool>,
}

/// Layer normalization over the last axis. The variance is floored at
/// `LAYER_NORM_EPS` rather than shifted by it, so rows with variance above
/// the floor normalize exactly to unit variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(layer_norm_cached(x, gain, bias)?.0)
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, LayerNormCache)> {
    let n = x.cols();
    if gain.len() != n || bias.len() != n {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let rows = x.len() / n.max(1);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut rstd = Vec::with_capacity(rows);
    let mut floored = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let floor = var < LAYER_NORM_EPS;
        let rs = 1.0 / var.max(LAYER_NORM_EPS).sqrt();
        rstd.push(rs);
        floored.push(floor);
        for j in 0..n {
            let h = (xr[j] - mean) * rs;
            xhat.data_mut()[r * n + j] = h;
            y.data_mut()[r * n + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((
        y,
        LayerNormCache {
            xhat,
            rstd,
            floored,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = gain.len();
    let rows = gy.len() / n.max(1);
    let mut dx = Tensor::zeros(gy.shape().to_vec());
    let mut dg = Tensor::zeros(gain.shape().to_vec());
    let mut db = Tensor::zeros(gain.shape().to_vec());
    let mut gxhat = vec![0.0; n];
    for r in 0..rows {
        let g = &gy.data()[r * n..(r + 1) * n];
        let h = &cache.xhat.data()[r * n..(r + 1) * n];
        for j in 0..n {
            gxhat[j] = g[j] * gain.data()[j];
            dg.data_mut()[j] += g[j] * h[j];
            db.data_mut()[j] += g[j];
        }
        let mean_g = gxhat.iter().sum::<f64>() / n as f64;
        let rs = cache.rstd[r];
        let out = &mut dx.data_mut()[r * n..(r + 1) * n];
        if cache.floored[r] {
            for j in 0..n {
                out[j] = rs * (gxhat[j] - mean_g);
            }
        } else {
            let mean_gh = gxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            for j in 0..n {
                out[j] = rs * (gxhat[j] - mean_g - h[j] * mean_gh);
            }
        }
    }
    (dx, dg, db)
}

fn conv_offset(width: usize, causal: bool) -> usize {
    if causal {
        0
    } else {
        (width - 1) / 2
    }
}

/// Depthwise 1-D convolution along the sequence axis:
/// `y[t,d] = Σ_j k[j,d] · x[t − j + c, d]` with `c = 0` in causal mode
/// (left padding only) and `c = (w−1)/2` otherwise.
pub fn conv1d(x: &Tensor, kernel: &Tensor, causal: bool) -> Result<Tensor> {
    let [l, d] = x.dims2("conv1d")?;
    let [w, kd] = kernel.dims2("conv1d")?;
    if kd != d || w == 0 {
        return Err(Error::Dimension {
            op: "conv1d",
            left: x.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    let c = conv_offset(w, causal) as isize;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        let orow = &mut out[t * d..(t + 1) * d];
        for j in 0..w {
            let src = t as isize - j as isize + c;
            if src < 0 || src >= l as isize {
                continue;
            }
            let src = src as usize;
            let xrow = &xd[src * d..(src + 1) * d];
            let krow = &kd[j * d..(j + 1) * d];
            for ch in 0..d {
                orow[ch] += krow[ch] * xrow[ch];
            }
        }
    }
    Tensor::new([l, d], out)
}

/// Returns `(dx, dkernel)`.
pub(crate) fn conv1d_backward(
    x: &Tensor,
    kernel: &Tensor,
    causal: bool,
    gy: &Tensor,
) -> (Tensor, Tensor) {
    let (l, d) = (x.rows(), x.cols());
    let w = kernel.rows();
    let c = conv_offset(w, causal) as isize;
    let mut dx = Tensor::zeros([l, d]);
    let mut dk = Tensor::zeros([w, d]);
    for t in 0..l {
        let g = &gy.data()[t * d..(t + 1) * d];
        for j in 0..w {
            let src = t as isize - j as isize + c;
            if src < 0 || src >= l as isize {
                continue;
            }
            let src = src as usize;
            for ch in 0..d {
                dx.data_mut()[src * d + ch] += g[ch] * kernel.data()[j * d + ch];
                dk.data_mut()[j * d + ch] += g[ch] * x.data()[src * d + ch];
            }
        }
    }
    (dx, dk)
}

/// Centered, zero-padded sliding windows: `out[t, j·D + d] = x[t + j − c, d]`
/// with `c = (w−1)/2`. A linear layer over the result is a full (not
/// depthwise) 1-D convolution.
pub fn unfold(x: &Tensor, width: usize) -> Result<Tensor> {
    let [l, d] = x.dims2("unfold")?;
    if width == 0 {
        return Err(Error::Invalid("unfold width must be ≥ 1".into()));
    }
    let c = ((width - 1) / 2) as isize;
    let mut out = vec![0.0; l * width * d];
    for t in 0..l {
        for j in 0..width {
            let src = t as isize + j as isize - c;
            if src < 0 || src >= l as isize {
                continue;
            }
            let src = src as usize;
            let dst = t * width * d + j * d;
            out[dst..dst + d].copy_from_slice(&x.data()[src * d..(src + 1) * d]);
        }
    }
    Tensor::new([l, width * d], out)
}

pub(crate) fn unfold_backward(l: usize, d: usize, width: usize, gy: &Tensor) -> Tensor {
    let c = ((width - 1) / 2) as isize;
    let mut dx = Tensor::zeros([l, d]);
    for t in 0..l {
        for j in 0..width {
            let src = t as isize + j as isize - c;
            if src < 0 || src >= l as isize {
                continue;
            }
            let src = src as usize;
            let g = &gy.data()[t * width * d + j * d..t * width * d + (j + 1) * d];
            for (o, v) in dx.data_mut()[src * d..(src + 1) * d].iter_mut().zip(g) {
                *o += v;
            }
        }
    }
    dx
}

/// Cosine similarity between every row of `a` and every row of `b`. Rows with
/// zero norm get similarity 0.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let na = normalize_rows(a)?;
    let nb = normalize_rows(b)?;
    matmul_a_bt(&na, &nb)
}

pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let [m, n] = x.dims2("normalize_rows")?;
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &x).unwrap(), x);
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[1.0], [1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 2], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.at2(i, k) * b.at2(k, j);
                }
                assert!((got.at2(i, j) - s).abs() < 1e-12);
            }
        }
        let at = matmul_at_b(&a.transpose().unwrap(), &b).unwrap();
        assert!(at.max_abs_diff(&got) < 1e-12);
        let bt = matmul_a_bt(&a, &b.transpose().unwrap()).unwrap();
        assert!(bt.max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        assert!(softmax(&Tensor::vector(vec![f64::NAN]), 0).is_err());
        assert!(softmax(&Tensor::vector(vec![1.0]), 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [3.0, 5.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.at2(0, 0) + s.at2(1, 0) - 1.0).abs() < 1e-15);
        assert!((s.at2(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(40.0) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows() {
        let x = Tensor::from_rows(&[[2.0, 2.0, 2.0], [1.0, 2.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &Tensor::ones([3]), &Tensor::zeros([3])).unwrap();
        assert_eq!(y.row(0), &[0.0, 0.0, 0.0]);
        let r = y.row(1);
        let mean = r.iter().sum::<f64>() / 3.0;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conv1d_identity_and_impulse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[6, 2], &mut rng);
        assert_eq!(conv1d(&x, &Tensor::ones([1, 2]), true).unwrap(), x);

        let mut imp = Tensor::zeros([7, 1]);
        imp.set2(2, 0, 1.0);
        let k = Tensor::from_rows(&[[0.5], [-1.0], [2.0]]).unwrap();
        let y = conv1d(&imp, &k, true).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, -1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv1d_matches_sliding_window_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[9, 3], &mut rng);
        let k = random(&[4, 3], &mut rng);
        for causal in [true, false] {
            let y = conv1d(&x, &k, causal).unwrap();
            let c = if causal { 0 } else { 1 };
            for t in 0..9usize {
                for d in 0..3 {
                    let mut s = 0.0;
                    for j in 0..4usize {
                        let src = t as isize - j as isize + c;
                        if (0..9).contains(&src) {
                            s += k.at2(j, d) * x.at2(src as usize, d);
                        }
                    }
                    assert!((y.at2(t, d) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unfold_windows() {
        let x = Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let u = unfold(&x, 3).unwrap();
        assert_eq!(u.data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn cosine_handles_zero_rows() {
        let a = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[2.0, 0.0]]).unwrap();
        let c = cosine_matrix(&a, &b).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0]);
    }
}
