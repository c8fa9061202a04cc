//! Inference kernels on CHW feature maps and token matrices.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView4, Axis};

pub const BN_EPS: f32 = 1e-5;
pub const LN_EPS: f32 = 1e-6;

/// 2-D convolution over a CHW map. `weight` is (out, in, kh, kw).
pub fn conv2d(x: &Array3<f32>, weight: ArrayView4<'_, f32>, bias: Option<ArrayView1<'_, f32>>, stride: usize, pad: usize) -> Array3<f32> {
    let (cin, h, w) = x.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    assert_eq!(cin, wcin, "conv input channels");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let wmat = weight
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("contiguous conv weight");

    let out = if kh == 1 && kw == 1 && pad == 0 {
        let xs = if stride == 1 {
            x.as_standard_layout().into_owned()
        } else {
            x.slice(s![.., ..;stride, ..;stride]).to_owned()
        };
        let cols = xs.into_shape_with_order((cin, ho * wo)).expect("contiguous");
        wmat.dot(&cols)
    } else {
        let cols = im2col(x, kh, kw, stride, pad, ho, wo);
        wmat.dot(&cols)
    };
    let mut out = out.into_shape_with_order((cout, ho, wo)).expect("gemm output");
    if let Some(b) = bias {
        for (mut plane, &bv) in out.outer_iter_mut().zip(b.iter()) {
            plane += bv;
        }
    }
    out
}

fn im2col(x: &Array3<f32>, kh: usize, kw: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let (cin, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = vec![0.0f32; cin * kh * kw * ho * wo];
    for c in 0..cin {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((cin * kh * kw, ho * wo), cols).expect("im2col size")
}

/// Inference-mode batch norm with running statistics, optionally followed by ReLU.
pub fn batch_norm(x: &mut Array3<f32>, gamma: ArrayView1<f32>, beta: ArrayView1<f32>, mean: ArrayView1<f32>, var: ArrayView1<f32>, relu: bool) {
    for (c, mut plane) in x.outer_iter_mut().enumerate() {
        let scale = gamma[c] / (var[c] + BN_EPS).sqrt();
        let shift = beta[c] - mean[c] * scale;
        if relu {
            plane.mapv_inplace(|v| (v * scale + shift).max(0.0));
        } else {
            plane.mapv_inplace(|v| v * scale + shift);
        }
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Max pooling with implicit -inf padding.
pub fn max_pool(x: &Array3<f32>, k: usize, stride: usize, pad: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Array3::from_elem((c, ho, wo), f32::NEG_INFINITY);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            m = m.max(x[[ch, iy as usize, ix as usize]]);
                        }
                    }
                }
                out[[ch, oy, ox]] = m;
            }
        }
    }
    out
}

/// `x · weightᵀ + bias` with `weight` stored (out, in).
pub fn linear(x: &ArrayView2<f32>, weight: ArrayView2<f32>, bias: ArrayView1<f32>) -> Array2<f32> {
    let mut y = x.dot(&weight.t());
    y += &bias;
    y
}

pub fn layer_norm(x: &ArrayView2<f32>, gamma: ArrayView1<f32>, beta: ArrayView1<f32>) -> Array2<f32> {
    let mut y = x.to_owned();
    let d = x.ncols() as f32;
    for mut row in y.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma.iter()).zip(beta.iter()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    y
}

/// Exact (erf) GELU.
pub fn gelu_inplace(x: &mut Array2<f32>) {
    x.mapv_inplace(|v| 0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2)));
}

pub fn softmax_rows(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - m).exp();
            sum += e;
            e
        });
        row /= sum;
    }
}

/// Per-channel mean over the spatial axes of a CHW map.
pub fn global_avg_pool(x: &Array3<f32>) -> Vec<f32> {
    let (_, h, w) = x.dim();
    x.outer_iter().map(|p| p.sum() / (h * w) as f32).collect()
}

/// Mean over rows.
pub fn mean_rows(x: &ArrayView2<f32>) -> Vec<f32> {
    x.mean_axis(Axis(0)).expect("non-empty").to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    /// Direct sliding-window convolution.
    fn conv_direct(x: &Array3<f32>, w: &Array4<f32>, stride: usize, pad: usize) -> Array3<f32> {
        let (cin, h, wd) = x.dim();
        let (cout, _, kh, kw) = w.dim();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Array3::from_shape_fn((cout, ho, wo), |(o, oy, ox)| {
            let mut acc = 0.0;
            for c in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x[[c, iy as usize, ix as usize]] * w[[o, c, ky, kx]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let x = Array3::from_shape_fn((3, 9, 8), |(c, y, xx)| ((c * 31 + y * 7 + xx * 3) % 11) as f32 / 11.0 - 0.4);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 1, 0), (1, 2, 0)] {
            let w = Array4::from_shape_fn((4, 3, k, k), |(o, c, a, b)| ((o * 5 + c * 3 + a * 2 + b) % 7) as f32 / 7.0 - 0.5);
            let got = conv2d(&x, w.view(), None, stride, pad);
            let want = conv_direct(&x, &w, stride, pad);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-5, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn max_pool_halves_resolution() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, xx)| (y * 4 + xx) as f32);
        let p = max_pool(&x, 3, 2, 1);
        assert_eq!(p.dim(), (1, 2, 2));
        assert_eq!(p[[0, 1, 1]], 15.0);
        assert_eq!(p[[0, 0, 0]], 5.0);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0f32, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 14.0]];
        let g = ndarray::Array1::ones(4);
        let b = ndarray::Array1::zeros(4);
        let y = layer_norm(&x.view(), g.view(), b.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-5);
            assert!((row.mapv(|v| v * v).sum() / 4.0 - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1.0f32, 2.0, 3.0], [1000.0, 1000.0, 1000.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert!((x[[1, 0]] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_reference_points() {
        let mut x = array![[0.0f32, 1.0, -1.0]];
        gelu_inplace(&mut x);
        assert_eq!(x[[0, 0]], 0.0);
        assert!((x[[0, 1]] - 0.841_344_7).abs() < 1e-6);
        assert!((x[[0, 2]] + 0.158_655_3).abs() < 1e-6);
    }
}
