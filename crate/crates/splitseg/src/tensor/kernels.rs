//! Raw compute kernels behind the graph ops.
//!
//! All kernels are pure functions on flat row-major (B,C,H,W) buffers.
//! Convolutions go through im2col + sgemm; everything that runs per image
//! is parallelized over the batch with disjoint output slices, so results
//! are bit-identical regardless of thread scheduling.

use rayon::prelude::*;

/// Row-major C[m,n] = A[m,k] * B[k,n] (+ beta * C).
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A^T[m,k] * B[k,n] + beta * C, where `a` is stored as [k,m].
fn gemm_at(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A[m,k] * B^T[k,n] + beta * C, where `b` is stored as [n,k].
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(b.len(), n * k);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv_out_hw(h: usize, w: usize, ksize: usize, stride: usize) -> (usize, usize) {
    let pad = ksize / 2;
    let oh = (h + 2 * pad - ksize) / stride + 1;
    let ow = (w + 2 * pad - ksize) / stride + 1;
    (oh, ow)
}

/// col[(ci*ks*ks + ky*ks + kx) * (oh*ow) + oyx] = x[ci, oy*stride+ky-pad, ox*stride+kx-pad]
fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    ksize: usize,
    stride: usize,
    col: &mut [f32],
) {
    let pad = ksize / 2;
    let (oh, ow) = conv_out_hw(h, w, ksize, stride);
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = &mut col[(ci * ksize * ksize + ky * ksize + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..][..ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back into an image gradient.
fn col2im_add(
    col: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    ksize: usize,
    stride: usize,
    dx: &mut [f32],
) {
    let pad = ksize / 2;
    let (oh, ow) = conv_out_hw(h, w, ksize, stride);
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = &col[(ci * ksize * ksize + ky * ksize + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    x: &[f32],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    cout: usize,
    ksize: usize,
    stride: usize,
    out: &mut [f32],
) {
    let (oh, ow) = conv_out_hw(h, w, ksize, stride);
    let ohw = oh * ow;
    let kdim = cin * ksize * ksize;
    let run = |xi: &[f32], oi: &mut [f32]| {
        let mut col = vec![0.0f32; kdim * ohw];
        im2col(xi, cin, h, w, ksize, stride, &mut col);
        gemm(cout, kdim, ohw, weight, &col, 0.0, oi);
        for co in 0..cout {
            let b = bias[co];
            if b != 0.0 {
                for v in &mut oi[co * ohw..(co + 1) * ohw] {
                    *v += b;
                }
            }
        }
    };
    if batch > 1 {
        x.par_chunks(cin * h * w)
            .zip(out.par_chunks_mut(cout * ohw))
            .for_each(|(xi, oi)| run(xi, oi));
    } else {
        run(x, out);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &[f32],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
    ksize: usize,
    stride: usize,
    dout: &[f32],
    dx: &mut [f32],
    dw: &mut [f32],
    db: &mut [f32],
) {
    let (oh, ow) = conv_out_hw(h, w, ksize, stride);
    let ohw = oh * ow;
    let kdim = cin * ksize * ksize;
    let per_image = |xi: &[f32], doi: &[f32], dxi: &mut [f32]| -> Vec<f32> {
        let mut col = vec![0.0f32; kdim * ohw];
        im2col(xi, cin, h, w, ksize, stride, &mut col);
        // dW_b[cout, kdim] = dout_b[cout, ohw] * col^T
        let mut dwi = vec![0.0f32; cout * kdim];
        gemm_bt(cout, ohw, kdim, doi, &col, 0.0, &mut dwi);
        // dcol[kdim, ohw] = W^T * dout_b
        let mut dcol = vec![0.0f32; kdim * ohw];
        gemm_at(kdim, cout, ohw, weight, doi, 0.0, &mut dcol);
        col2im_add(&dcol, cin, h, w, ksize, stride, dxi);
        dwi
    };
    let partial_dw: Vec<Vec<f32>> = if batch > 1 {
        x.par_chunks(cin * h * w)
            .zip(dout.par_chunks(cout * ohw))
            .zip(dx.par_chunks_mut(cin * h * w))
            .map(|((xi, doi), dxi)| per_image(xi, doi, dxi))
            .collect()
    } else {
        vec![per_image(x, dout, dx)]
    };
    // deterministic batch-order reduction
    for dwi in &partial_dw {
        for (acc, v) in dw.iter_mut().zip(dwi) {
            *acc += *v;
        }
    }
    for b in 0..batch {
        let doi = &dout[b * cout * ohw..][..cout * ohw];
        for co in 0..cout {
            let mut s = 0.0f32;
            for v in &doi[co * ohw..(co + 1) * ohw] {
                s += *v;
            }
            db[co] += s;
        }
    }
}

/// Transposed convolution, 2x2 kernel, stride 2, no padding.
/// weight layout is (Cin, Cout, 2, 2); output is (B, Cout, 2H, 2W).
pub fn tconv_forward(
    x: &[f32],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    cout: usize,
    out: &mut [f32],
) {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let run = |xi: &[f32], oi: &mut [f32]| {
        // cols[cout*4, hw] = W^T_flat * x_img, where weight is [cin, cout*4]
        let mut cols = vec![0.0f32; cout * 4 * hw];
        gemm_at(cout * 4, cin, hw, weight, xi, 0.0, &mut cols);
        // stride == kernel, so each output pixel receives exactly one term
        for co in 0..cout {
            let b = bias[co];
            let plane = &mut oi[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..2 {
                for kx in 0..2 {
                    let row = &cols[(co * 4 + ky * 2 + kx) * hw..][..hw];
                    for y in 0..h {
                        for xq in 0..w {
                            plane[(2 * y + ky) * ow + 2 * xq + kx] = row[y * w + xq] + b;
                        }
                    }
                }
            }
        }
    };
    if batch > 1 {
        x.par_chunks(cin * hw)
            .zip(out.par_chunks_mut(cout * oh * ow))
            .for_each(|(xi, oi)| run(xi, oi));
    } else {
        run(x, out);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn tconv_backward(
    x: &[f32],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
    dout: &[f32],
    dx: &mut [f32],
    dw: &mut [f32],
    db: &mut [f32],
) {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let gather = |doi: &[f32]| -> Vec<f32> {
        // dcols[cout*4, hw] from the strided output
        let mut dcols = vec![0.0f32; cout * 4 * hw];
        for co in 0..cout {
            let plane = &doi[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..2 {
                for kx in 0..2 {
                    let row = &mut dcols[(co * 4 + ky * 2 + kx) * hw..][..hw];
                    for y in 0..h {
                        for xq in 0..w {
                            row[y * w + xq] = plane[(2 * y + ky) * ow + 2 * xq + kx];
                        }
                    }
                }
            }
        }
        dcols
    };
    let per_image = |xi: &[f32], doi: &[f32], dxi: &mut [f32]| -> Vec<f32> {
        let dcols = gather(doi);
        // dx[cin, hw] = W_flat[cin, cout*4] * dcols
        gemm(cin, cout * 4, hw, weight, &dcols, 0.0, dxi);
        // dW_b[cin, cout*4] = x_img[cin, hw] * dcols^T
        let mut dwi = vec![0.0f32; cin * cout * 4];
        gemm_bt(cin, hw, cout * 4, xi, &dcols, 0.0, &mut dwi);
        dwi
    };
    let partial_dw: Vec<Vec<f32>> = if batch > 1 {
        x.par_chunks(cin * hw)
            .zip(dout.par_chunks(cout * oh * ow))
            .zip(dx.par_chunks_mut(cin * hw))
            .map(|((xi, doi), dxi)| per_image(xi, doi, dxi))
            .collect()
    } else {
        vec![per_image(x, dout, dx)]
    };
    for dwi in &partial_dw {
        for (acc, v) in dw.iter_mut().zip(dwi) {
            *acc += *v;
        }
    }
    for b in 0..batch {
        let doi = &dout[b * cout * oh * ow..][..cout * oh * ow];
        for co in 0..cout {
            let mut s = 0.0f32;
            for v in &doi[co * oh * ow..(co + 1) * oh * ow] {
                s += *v;
            }
            db[co] += s;
        }
    }
}

/// 2x2 max pooling, stride 2. Ties break to the first element in row-major
/// window scan order. `argmax` receives flat indices into the input buffer.
pub fn max_pool2_forward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    out: &mut [f32],
    argmax: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        let arg = &mut argmax[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = 2 * oy * w + 2 * ox;
                let mut best = src[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                dst[oy * ow + ox] = best;
                arg[oy * ow + ox] = (p * h * w + best_idx) as u32;
            }
        }
    }
}

/// Per-(b,c) normalization to zero mean / unit variance. Returns 1/sqrt(var+eps) per slice.
pub fn instance_norm_forward(
    x: &[f32],
    planes: usize,
    hw: usize,
    eps: f32,
    out: &mut [f32],
    inv_std: &mut [f32],
) {
    for p in 0..planes {
        let src = &x[p * hw..(p + 1) * hw];
        let dst = &mut out[p * hw..(p + 1) * hw];
        let mut sum = 0.0f32;
        for v in src {
            sum += *v;
        }
        let mean = sum / hw as f32;
        let mut var = 0.0f32;
        for v in src {
            let d = *v - mean;
            var += d * d;
        }
        var /= hw as f32;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[p] = is;
        for (d, v) in dst.iter_mut().zip(src) {
            *d = (*v - mean) * is;
        }
    }
}

/// dx = inv_std * (dy - mean(dy) - y * mean(dy * y)), per slice.
pub fn instance_norm_backward(
    y: &[f32],
    planes: usize,
    hw: usize,
    inv_std: &[f32],
    dout: &[f32],
    dx: &mut [f32],
) {
    for p in 0..planes {
        let yp = &y[p * hw..(p + 1) * hw];
        let gp = &dout[p * hw..(p + 1) * hw];
        let dp = &mut dx[p * hw..(p + 1) * hw];
        let mut g_mean = 0.0f32;
        let mut gy_mean = 0.0f32;
        for (g, yv) in gp.iter().zip(yp) {
            g_mean += *g;
            gy_mean += *g * *yv;
        }
        g_mean /= hw as f32;
        gy_mean /= hw as f32;
        let is = inv_std[p];
        for i in 0..hw {
            dp[i] += is * (gp[i] - g_mean - yp[i] * gy_mean);
        }
    }
}

/// Softmax over the channel axis at every (b,h,w).
pub fn softmax_channels_forward(x: &[f32], batch: usize, c: usize, hw: usize, out: &mut [f32]) {
    for b in 0..batch {
        let base = b * c * hw;
        for i in 0..hw {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[base + ch * hw + i]);
            }
            let mut z = 0.0f32;
            for ch in 0..c {
                let e = (x[base + ch * hw + i] - m).exp();
                out[base + ch * hw + i] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * hw + i] /= z;
            }
        }
    }
}

/// dx = p * (g - sum_c p*g), using the forward output `p`.
pub fn softmax_channels_backward(
    p: &[f32],
    batch: usize,
    c: usize,
    hw: usize,
    dout: &[f32],
    dx: &mut [f32],
) {
    for b in 0..batch {
        let base = b * c * hw;
        for i in 0..hw {
            let mut dot = 0.0f32;
            for ch in 0..c {
                dot += p[base + ch * hw + i] * dout[base + ch * hw + i];
            }
            for ch in 0..c {
                let idx = base + ch * hw + i;
                dx[idx] += p[idx] * (dout[idx] - dot);
            }
        }
    }
}

/// Anisotropic total variation, normalized by element count.
pub fn total_variation_forward(x: &[f32], planes: usize, h: usize, w: usize) -> f32 {
    let mut tv = 0.0f32;
    for p in 0..planes {
        let img = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h - 1 {
            for xq in 0..w {
                tv += (img[(y + 1) * w + xq] - img[y * w + xq]).abs();
            }
        }
        for y in 0..h {
            for xq in 0..w - 1 {
                tv += (img[y * w + xq + 1] - img[y * w + xq]).abs();
            }
        }
    }
    tv / (planes * h * w) as f32
}

/// Subgradient of total variation; 0 at exact ties.
pub fn total_variation_backward(x: &[f32], planes: usize, h: usize, w: usize, g: f32, dx: &mut [f32]) {
    let scale = g / (planes * h * w) as f32;
    for p in 0..planes {
        let img = &x[p * h * w..(p + 1) * h * w];
        let dimg = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h - 1 {
            for xq in 0..w {
                let d = img[(y + 1) * w + xq] - img[y * w + xq];
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dimg[(y + 1) * w + xq] += s * scale;
                dimg[y * w + xq] -= s * scale;
            }
        }
        for y in 0..h {
            for xq in 0..w - 1 {
                let d = img[y * w + xq + 1] - img[y * w + xq];
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dimg[y * w + xq + 1] += s * scale;
                dimg[y * w + xq] -= s * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f32; 4];
        gemm(2, 3, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // A^T path: store A as 3x2 and ask for its transpose
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0f32; 4];
        gemm_at(2, 3, 2, &at, &b, 0.0, &mut c2);
        assert_eq!(c2, c);

        // B^T path
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c3 = [0.0f32; 4];
        gemm_bt(2, 3, 2, &a, &bt, 0.0, &mut c3);
        assert_eq!(c3, c);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish data
        let (c, h, w) = (2, 4, 4);
        let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.37).sin()).collect();
        let (oh, ow) = conv_out_hw(h, w, 3, 1);
        let kdim = c * 9;
        let mut col = vec![0.0f32; kdim * oh * ow];
        im2col(&x, c, h, w, 3, 1, &mut col);
        let y: Vec<f32> = (0..col.len()).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut back = vec![0.0f32; x.len()];
        col2im_add(&y, c, h, w, 3, 1, &mut back);
        let lhs: f32 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }
}
