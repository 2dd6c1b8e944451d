//! Forward and backward kernels for the layer kinds used by the archetypes.
//!
//! All image tensors are NCHW. Convolutions go through a batch-wide im2col so
//! each layer is one GEMM.

use super::layer::ConvGeom;
use super::tensor::{gemm, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Unfold `x` into a `[in_ch·k·k, n·ho·wo]` column matrix.
fn im2col<F: Scalar>(x: &Tensor<F>, g: &ConvGeom, ho: usize, wo: usize) -> Vec<F> {
    let (n, c, h, w) = dims4(x.shape());
    let k = g.kernel;
    let cols_per_row = n * ho * wo;
    let mut cols = vec![F::ZERO; c * k * k * cols_per_row];
    let xd = x.data();
    let pad = g.padding as isize;
    let stride = g.stride as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * cols_per_row..(row + 1) * cols_per_row];
                for img in 0..n {
                    let src = &xd[(img * c + ci) * h * w..(img * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = oy as isize * stride + ky as isize - pad;
                        let dst = &mut dst_row[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * stride + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column-gradient matrix back onto the input layout (adjoint of `im2col`).
fn col2im<F: Scalar>(
    cols: &[F],
    g: &ConvGeom,
    shape: (usize, usize, usize, usize),
    ho: usize,
    wo: usize,
) -> Vec<F> {
    let (n, c, h, w) = shape;
    let k = g.kernel;
    let cols_per_row = n * ho * wo;
    let mut out = vec![F::ZERO; n * c * h * w];
    let pad = g.padding as isize;
    let stride = g.stride as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * cols_per_row..(row + 1) * cols_per_row];
                for img in 0..n {
                    let base = (img * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = oy as isize * stride + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &src_row[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
                        let dst = &mut out[base + iy as usize * w..base + (iy as usize + 1) * w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = ox as isize * stride + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    weight: &[F],
    bias: Option<&[F]>,
    g: &ConvGeom,
) -> Tensor<F> {
    let (n, _, h, w) = dims4(x.shape());
    let (ho, wo) = g.output_hw(h, w);
    let kk = g.in_ch * g.kernel * g.kernel;
    let cols = im2col(x, g, ho, wo);
    let spatial = n * ho * wo;
    let mut mat = vec![F::ZERO; g.out_ch * spatial];
    gemm(g.out_ch, kk, spatial, weight, false, &cols, false, &mut mat, false);
    // [out_ch, n·ho·wo] -> [n, out_ch, ho, wo]
    let hw = ho * wo;
    let mut out = vec![F::ZERO; n * g.out_ch * hw];
    for co in 0..g.out_ch {
        let b = bias.map_or(F::ZERO, |b| b[co]);
        for img in 0..n {
            let src = &mat[co * spatial + img * hw..co * spatial + (img + 1) * hw];
            let dst = &mut out[(img * g.out_ch + co) * hw..(img * g.out_ch + co + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    Tensor::from_vec(&[n, g.out_ch, ho, wo], out).expect("conv output shape")
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    weight: &[F],
    g: &ConvGeom,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let (n, c, h, w) = dims4(x.shape());
    let (ho, wo) = g.output_hw(h, w);
    let hw = ho * wo;
    let spatial = n * hw;
    let kk = g.in_ch * g.kernel * g.kernel;

    let gd = grad_out.data();
    let mut gmat = vec![F::ZERO; g.out_ch * spatial];
    let mut grad_bias = vec![F::ZERO; g.out_ch];
    for co in 0..g.out_ch {
        let mut acc = F::ZERO;
        for img in 0..n {
            let src = &gd[(img * g.out_ch + co) * hw..(img * g.out_ch + co + 1) * hw];
            let dst = &mut gmat[co * spatial + img * hw..co * spatial + (img + 1) * hw];
            dst.copy_from_slice(src);
            for &v in src {
                acc += v;
            }
        }
        grad_bias[co] = acc;
    }

    let cols = im2col(x, g, ho, wo);
    let mut grad_weight = vec![F::ZERO; g.out_ch * kk];
    gemm(g.out_ch, spatial, kk, &gmat, false, &cols, true, &mut grad_weight, false);

    let mut gcols = cols;
    gemm(kk, g.out_ch, spatial, weight, true, &gmat, false, &mut gcols, false);
    let gx = col2im(&gcols, g, (n, c, h, w), ho, wo);
    (
        Tensor::from_vec(x.shape(), gx).expect("conv grad shape"),
        grad_weight,
        grad_bias,
    )
}

/// Cached values from a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
    pub batch_mean: Vec<F>,
    pub batch_var: Vec<F>,
    pub used_batch_stats: bool,
}

pub fn batch_norm_forward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    running_mean: &[F],
    running_var: &[F],
    use_batch_stats: bool,
) -> (Tensor<F>, BnCache<F>) {
    let (n, c, h, w) = dims4(x.shape());
    let hw = h * w;
    let m = F::from_f64((n * hw) as f64);
    let eps = F::from_f64(BN_EPS);
    let xd = x.data();
    let mut mean = vec![F::ZERO; c];
    let mut var = vec![F::ZERO; c];
    if use_batch_stats {
        for ch in 0..c {
            let mut s = F::ZERO;
            for img in 0..n {
                for &v in &xd[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                    s += v;
                }
            }
            let mu = s / m;
            let mut sq = F::ZERO;
            for img in 0..n {
                for &v in &xd[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::ZERO; xd.len()];
    let mut out = vec![F::ZERO; xd.len()];
    for img in 0..n {
        for ch in 0..c {
            let range = (img * c + ch) * hw..(img * c + ch + 1) * hw;
            for i in range {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), out).expect("bn shape"),
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            used_batch_stats: use_batch_stats,
        },
    )
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<F: Scalar>(
    shape: &[usize],
    cache: &BnCache<F>,
    gamma: &[F],
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let (n, c, h, w) = dims4(shape);
    let hw = h * w;
    let gd = grad_out.data();
    let mut ggamma = vec![F::ZERO; c];
    let mut gbeta = vec![F::ZERO; c];
    for img in 0..n {
        for ch in 0..c {
            for i in (img * c + ch) * hw..(img * c + ch + 1) * hw {
                ggamma[ch] += gd[i] * cache.xhat[i];
                gbeta[ch] += gd[i];
            }
        }
    }
    let mut gx = vec![F::ZERO; gd.len()];
    if cache.used_batch_stats {
        // dx = inv_std/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), dxhat = dy·gamma
        let m = F::from_f64((n * hw) as f64);
        for ch in 0..c {
            let sum_dxhat = gbeta[ch] * gamma[ch];
            let sum_dxhat_xhat = ggamma[ch] * gamma[ch];
            let scale = cache.inv_std[ch] / m;
            for img in 0..n {
                for i in (img * c + ch) * hw..(img * c + ch + 1) * hw {
                    let dxhat = gd[i] * gamma[ch];
                    gx[i] = scale * (m * dxhat - sum_dxhat - cache.xhat[i] * sum_dxhat_xhat);
                }
            }
        }
    } else {
        for img in 0..n {
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch];
                for i in (img * c + ch) * hw..(img * c + ch + 1) * hw {
                    gx[i] = gd[i] * k;
                }
            }
        }
    }
    (
        Tensor::from_vec(shape, gx).expect("bn grad shape"),
        ggamma,
        gbeta,
    )
}

/// Running-statistics update after a training-mode forward pass.
pub fn update_running_stats<F: Scalar>(
    cache: &BnCache<F>,
    count: usize,
    running_mean: &mut [F],
    running_var: &mut [F],
) {
    let mom = F::from_f64(BN_MOMENTUM);
    let keep = F::ONE - mom;
    let unbias = if count > 1 {
        F::from_f64(count as f64 / (count as f64 - 1.0))
    } else {
        F::ONE
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = keep * running_mean[ch] + mom * cache.batch_mean[ch];
        running_var[ch] = keep * running_var[ch] + mom * cache.batch_var[ch] * unbias;
    }
}

pub fn relu_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > F::ZERO { v } else { F::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu shape")
}

pub fn relu_backward<F: Scalar>(x: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > F::ZERO { g } else { F::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu grad shape")
}

/// `size×size` max-pool with stride `size`; returns output and flat argmax indices.
pub fn max_pool_forward<F: Scalar>(x: &Tensor<F>, size: usize) -> (Tensor<F>, Vec<u32>) {
    let (n, c, h, w) = dims4(x.shape());
    let (ho, wo) = (h / size, w / size);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best as u32);
            }
        }
    }
    (
        Tensor::from_vec(&[n, c, ho, wo], out).expect("pool shape"),
        arg,
    )
}

pub fn max_pool_backward<F: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx as usize] += g;
    }
    gx
}

pub fn global_avg_pool_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w) = dims4(x.shape());
    let hw = h * w;
    let inv = F::from_f64(1.0 / hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<F>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data).expect("gap shape")
}

pub fn global_avg_pool_backward<F: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let (_, _, h, w) = dims4(input_shape);
    let hw = h * w;
    let inv = F::from_f64(1.0 / hw as f64);
    let mut data = Vec::with_capacity(input_shape.iter().product());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::from_vec(input_shape, data).expect("gap grad shape")
}

/// `y = x · Wᵀ + b` with `W: [outputs, inputs]`.
pub fn linear_forward<F: Scalar>(
    x: &Tensor<F>,
    weight: &[F],
    bias: &[F],
    inputs: usize,
    outputs: usize,
) -> Tensor<F> {
    let n = x.shape()[0];
    let mut out = vec![F::ZERO; n * outputs];
    for row in out.chunks_mut(outputs) {
        row.copy_from_slice(bias);
    }
    gemm(n, inputs, outputs, x.data(), false, weight, true, &mut out, true);
    Tensor::from_vec(&[n, outputs], out).expect("linear shape")
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<F: Scalar>(
    x: &Tensor<F>,
    weight: &[F],
    inputs: usize,
    outputs: usize,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let n = x.shape()[0];
    let mut gw = vec![F::ZERO; outputs * inputs];
    gemm(outputs, n, inputs, grad_out.data(), true, x.data(), false, &mut gw, false);
    let mut gb = vec![F::ZERO; outputs];
    for row in grad_out.data().chunks(outputs) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut gx = vec![F::ZERO; n * inputs];
    gemm(n, outputs, inputs, grad_out.data(), false, weight, false, &mut gx, false);
    (
        Tensor::from_vec(x.shape(), gx).expect("linear grad shape"),
        gw,
        gb,
    )
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let cols = x.shape()[1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(row[0], F::max);
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: F = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::from_vec(x.shape(), out).expect("softmax shape")
}

/// Mean cross-entropy of logits against labels, computed with log-sum-exp.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> F {
    let cols = logits.shape()[1];
    let mut total = F::ZERO;
    for (row, &label) in logits.data().chunks(cols).zip(labels) {
        let max = row.iter().copied().fold(row[0], F::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        total += lse - row[label];
    }
    total / F::from_f64(labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> ConvGeom {
        ConvGeom {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    /// Direct nested-loop cross-correlation.
    fn conv_naive(x: &Tensor<f64>, w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (n, c, h, wd) = dims4(x.shape());
        let (ho, wo) = g.output_hw(h, wd);
        let k = g.kernel;
        let mut out = vec![0.0; n * g.out_ch * ho * wo];
        for img in 0..n {
            for co in 0..g.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((img * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((co * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((img * g.out_ch + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn valid_2x2_conv_hand_value() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = [1.0, 0.0, 0.0, 1.0];
        let y = conv2d_forward(&x, &w, Some(&[0.0]), &geom(1, 1, 2, 1, 0));
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn identity_1x1_conv_passes_input_through() {
        let x = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|v| v as f32 * 0.5).collect()).unwrap();
        let y = conv2d_forward(&x, &[1.0], Some(&[0.0]), &geom(1, 1, 1, 1, 0));
        assert_eq!(y, x);
    }

    #[test]
    fn im2col_conv_matches_naive_loops() {
        let mut rng = crate::seed::rng(3);
        use rand::Rng;
        for g in [geom(2, 3, 3, 1, 1), geom(3, 2, 1, 2, 0), geom(2, 2, 3, 2, 1)] {
            let x = Tensor::from_vec(
                &[2, g.in_ch, 5, 6],
                (0..2 * g.in_ch * 30).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let w: Vec<f64> = (0..g.out_ch * g.in_ch * g.kernel * g.kernel)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let fast = conv2d_forward(&x, &w, None, &g);
            let slow = conv_naive(&x, &w, &g);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_picks_block_maxima() {
        let x = Tensor::from_vec(
            &[1, 1, 2, 4],
            vec![1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, -1.0],
        )
        .unwrap();
        let (y, arg) = max_pool_forward(&x, 2);
        assert_eq!(y.data(), &[5.0, 7.0]);
        assert_eq!(arg, vec![1, 6]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln10() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let loss = cross_entropy(&logits, &[0, 4, 9]);
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }
}
