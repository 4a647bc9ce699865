//! Dense loops behind the graph operators. Everything here works on flat
//! row-major slices; shapes are validated by the caller.

use alloc::vec;
use alloc::vec::Vec;

/// Strided view of a matrix inside a flat slice.
#[derive(Clone, Copy)]
struct View {
    rs: usize,
    cs: usize,
}

fn covers(len: usize, rows: usize, cols: usize, v: View) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * v.rs + (cols - 1) * v.cs < len
}

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    va: View,
    b: &[f64],
    vb: View,
    beta: f64,
    c: &mut [f64],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(covers(a.len(), m, k, va) && covers(b.len(), k, n, vb) && covers(c.len(), m, n, vc));
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * vc.rs + j * vc.cs] *= beta;
            }
        }
        return;
    }
    // SAFETY: `covers` bounds every addressed element of the three operands.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr(),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr(),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(
        m,
        k,
        n,
        a,
        View { rs: rsa, cs: csa },
        b,
        View { rs: rsb, cs: csb },
        0.0,
        &mut c,
        View { rs: n, cs: 1 },
    );
    c
}

/// `c[n,p] = a[n,k] · b[k,p]`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    gemm(n, k, p, a, k, 1, b, p, 1)
}

/// `ga[n,k] = g[n,p] · bᵀ`
pub fn matmul_grad_a(g: &[f64], b: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    gemm(n, p, k, g, p, 1, b, 1, p)
}

/// `gb[k,p] = aᵀ · g[n,p]`
pub fn matmul_grad_b(a: &[f64], g: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    gemm(k, n, p, a, 1, k, g, p, 1)
}

pub fn transpose2(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Row-wise softmax of an `[rows, cols]` matrix.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = libm::exp(v - max);
            total += *o;
        }
        let inv = 1.0 / total;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub fn softmax_rows_grad(y: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), or) in y
        .chunks_exact(cols)
        .zip(g.chunks_exact(cols))
        .zip(out.chunks_exact_mut(cols))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Geometry of a 3D convolution window sweep over a cubic-or-not grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dims(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.in_dims[a] + 2 * self.pad;
            if span < self.kernel || self.stride == 0 {
                return None;
            }
            out[a] = (span - self.kernel) / self.stride + 1;
        }
        Some(out)
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel * self.kernel
    }
}

/// Output columns `lo..hi` whose input column `ox + kx - pad` is inside `0..w`.
fn unit_stride_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
    (lo, hi)
}

/// Unfolds the patches of output slice `oz` into `buf[channels·k³, oh·ow]`,
/// writing zeros where a patch leaves the grid.
fn unfold_slab(x: &[f64], geom: &ConvGeom, oz: usize, buf: &mut [f64]) {
    let [d, h, w] = geom.in_dims;
    let [_, oh, ow] = geom.out_dims().expect("validated conv geometry");
    let k = geom.kernel;
    let slab = oh * ow;
    let (s, pad) = (geom.stride, geom.pad);
    for c in 0..geom.channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            let iz = (oz * s + kz).checked_sub(pad).filter(|&z| z < d);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut buf[row * slab..(row + 1) * slab];
                    let Some(iz) = iz else {
                        dst.fill(0.0);
                        continue;
                    };
                    for oy in 0..oh {
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&y| y < h) else {
                            dst_row.fill(0.0);
                            continue;
                        };
                        let src_row = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                        if s == 1 {
                            let (lo, hi) = unit_stride_span(kx, pad, w, ow);
                            dst_row.fill(0.0);
                            if lo < hi {
                                dst_row[lo..hi]
                                    .copy_from_slice(&src_row[lo + kx - pad..hi + kx - pad]);
                            }
                            continue;
                        }
                        for (ox, slot) in dst_row.iter_mut().enumerate() {
                            *slot = match (ox * s + kx).checked_sub(pad) {
                                Some(ix) if ix < w => src_row[ix],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`unfold_slab`]: accumulates `buf` back onto the grid `x`.
fn fold_slab(buf: &[f64], geom: &ConvGeom, oz: usize, x: &mut [f64]) {
    let [d, h, w] = geom.in_dims;
    let [_, oh, ow] = geom.out_dims().expect("validated conv geometry");
    let k = geom.kernel;
    let slab = oh * ow;
    let (s, pad) = (geom.stride, geom.pad);
    for c in 0..geom.channels {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            let Some(iz) = (oz * s + kz).checked_sub(pad).filter(|&z| z < d) else {
                continue;
            };
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let src = &buf[row * slab..(row + 1) * slab];
                    for oy in 0..oh {
                        let Some(iy) = (oy * s + ky).checked_sub(pad).filter(|&y| y < h) else {
                            continue;
                        };
                        let dst_row = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                        if s == 1 {
                            let (lo, hi) = unit_stride_span(kx, pad, w, ow);
                            if lo == hi {
                                continue;
                            }
                            for (d, &v) in dst_row[lo + kx - pad..hi + kx - pad]
                                .iter_mut()
                                .zip(&src[oy * ow + lo..oy * ow + hi])
                            {
                                *d += v;
                            }
                            continue;
                        }
                        for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            if let Some(ix) = (ox * s + kx).checked_sub(pad).filter(|&ix| ix < w) {
                                dst_row[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], b: &[f64], per_channel: usize) {
    for (row, &bv) in out.chunks_exact_mut(per_channel).zip(b) {
        for v in row.iter_mut() {
            *v += bv;
        }
    }
}

fn channel_sums(g: &[f64], per_channel: usize) -> Vec<f64> {
    g.chunks_exact(per_channel)
        .map(|r| r.iter().sum())
        .collect()
}

/// Dense 3D convolution. `w` is `[out_ch, in_ch, k, k, k]`, `b` is `[out_ch]`.
/// Works one output z-slice at a time so the unfolded patches stay small.
pub fn conv3d(x: &[f64], w: &[f64], b: &[f64], geom: &ConvGeom, out_ch: usize) -> Vec<f64> {
    let [od, oh, ow] = geom.out_dims().expect("validated conv geometry");
    let (l, slab, rows) = (od * oh * ow, oh * ow, geom.rows());
    let mut out = vec![0.0; out_ch * l];
    let mut buf = vec![0.0; rows * slab];
    for oz in 0..od {
        unfold_slab(x, geom, oz, &mut buf);
        let dst = &mut out[oz * slab..];
        gemm_into(
            out_ch,
            rows,
            slab,
            w,
            View { rs: rows, cs: 1 },
            &buf,
            View { rs: slab, cs: 1 },
            0.0,
            dst,
            View { rs: l, cs: 1 },
        );
    }
    add_bias(&mut out, b, l);
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv3d_grad(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    geom: &ConvGeom,
    out_ch: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [od, oh, ow] = geom.out_dims().expect("validated conv geometry");
    let (l, slab, rows) = (od * oh * ow, oh * ow, geom.rows());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; out_ch * rows];
    let mut buf = vec![0.0; rows * slab];
    let mut gbuf = vec![0.0; rows * slab];
    for oz in 0..od {
        let gs = &g[oz * slab..];
        unfold_slab(x, geom, oz, &mut buf);
        // gw += g_slab · bufᵀ
        gemm_into(
            out_ch,
            slab,
            rows,
            gs,
            View { rs: l, cs: 1 },
            &buf,
            View { rs: 1, cs: slab },
            1.0,
            &mut gw,
            View { rs: rows, cs: 1 },
        );
        // gbuf = wᵀ · g_slab
        gemm_into(
            rows,
            out_ch,
            slab,
            w,
            View { rs: 1, cs: rows },
            gs,
            View { rs: l, cs: 1 },
            0.0,
            &mut gbuf,
            View { rs: slab, cs: 1 },
        );
        fold_slab(&gbuf, geom, oz, &mut gx);
    }
    (gx, gw, channel_sums(g, l))
}

/// Transposed 3D convolution (no padding). `w` is `[in_ch, out_ch, k, k, k]`;
/// `big` describes the output grid as seen by the adjoint convolution.
pub fn conv_transpose3d(x: &[f64], w: &[f64], b: &[f64], big: &ConvGeom, in_ch: usize) -> Vec<f64> {
    let [d, h, ww] = big.out_dims().expect("validated conv geometry");
    let (l, slab, rows) = (d * h * ww, h * ww, big.rows());
    let v = big.in_dims.iter().product::<usize>();
    let mut out = vec![0.0; big.channels * v];
    let mut buf = vec![0.0; rows * slab];
    for oz in 0..d {
        // buf = wᵀ · x_slab
        let xs = &x[oz * slab..];
        gemm_into(
            rows,
            in_ch,
            slab,
            w,
            View { rs: 1, cs: rows },
            xs,
            View { rs: l, cs: 1 },
            0.0,
            &mut buf,
            View { rs: slab, cs: 1 },
        );
        fold_slab(&buf, big, oz, &mut out);
    }
    add_bias(&mut out, b, v);
    out
}

pub fn conv_transpose3d_grad(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    big: &ConvGeom,
    in_ch: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [d, h, ww] = big.out_dims().expect("validated conv geometry");
    let (l, slab, rows) = (d * h * ww, h * ww, big.rows());
    let v = big.in_dims.iter().product::<usize>();
    let mut gx = vec![0.0; in_ch * l];
    let mut gw = vec![0.0; in_ch * rows];
    let mut buf = vec![0.0; rows * slab];
    for oz in 0..d {
        unfold_slab(g, big, oz, &mut buf);
        let xs = &x[oz * slab..];
        // gx_slab = w · buf
        gemm_into(
            in_ch,
            rows,
            slab,
            w,
            View { rs: rows, cs: 1 },
            &buf,
            View { rs: slab, cs: 1 },
            0.0,
            &mut gx[oz * slab..],
            View { rs: l, cs: 1 },
        );
        // gw += x_slab · bufᵀ
        gemm_into(
            in_ch,
            slab,
            rows,
            xs,
            View { rs: l, cs: 1 },
            &buf,
            View { rs: 1, cs: slab },
            1.0,
            &mut gw,
            View { rs: rows, cs: 1 },
        );
    }
    (gx, gw, channel_sums(g, v))
}

/// Non-overlapping `k`-cube max pooling over `[c, d, h, w]`; returns the
/// pooled values and the flat source index of each window's first maximum.
pub fn max_pool3d(x: &[f64], c: usize, dims: [usize; 3], k: usize) -> (Vec<f64>, Vec<usize>) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / k, h / k, w / k);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dz in 0..k {
                        for dy in 0..k {
                            for dx in 0..k {
                                let i =
                                    ((ch * d + oz * k + dz) * h + oy * k + dy) * w + ox * k + dx;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample3d(x: &[f64], c: usize, dims: [usize; 3], k: usize) -> Vec<f64> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d * k, h * k, w * k);
    let mut out = vec![0.0; c * od * oh * ow];
    let mut i = 0;
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let src = &x[((ch * d + z / k) * h + y / k) * w..];
                for xx in 0..ow {
                    out[i] = src[xx / k];
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn upsample3d_grad(g: &[f64], c: usize, dims: [usize; 3], k: usize) -> Vec<f64> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d * k, h * k, w * k);
    let mut out = vec![0.0; c * d * h * w];
    let mut i = 0;
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let base = ((ch * d + z / k) * h + y / k) * w;
                for xx in 0..ow {
                    out[base + xx / k] += g[i];
                    i += 1;
                }
            }
        }
    }
    out
}

/// Max-pools `[n, c]` point features into `cells` grid cells (`[c, cells]`).
/// Empty cells hold 0. Also returns the winning point per `(channel, cell)`.
pub fn scatter_max(
    x: &[f64],
    n: usize,
    c: usize,
    cell_of: &[usize],
    cells: usize,
) -> (Vec<f64>, Vec<Option<u32>>) {
    let mut out = vec![0.0; c * cells];
    let mut win: Vec<Option<u32>> = vec![None; c * cells];
    for p in 0..n {
        let cell = cell_of[p];
        for ch in 0..c {
            let v = x[p * c + ch];
            let slot = ch * cells + cell;
            match win[slot] {
                Some(_) if v <= out[slot] => {}
                _ => {
                    out[slot] = v;
                    win[slot] = Some(p as u32);
                }
            }
        }
    }
    (out, win)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a: Vec<f64> = (0..9).map(|i| i as f64 - 3.5).collect();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&eye, &a, 3, 3, 3), a);
    }

    #[test]
    fn conv_with_centered_delta_kernel_is_identity() {
        let geom = ConvGeom {
            channels: 1,
            in_dims: [3, 4, 5],
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let x: Vec<f64> = (0..60).map(|i| (i as f64).cos()).collect();
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        assert_eq!(conv3d(&x, &w, &[0.0], &geom, 1), x);
    }

    /// Direct six-loop convolution.
    fn naive_conv(x: &[f64], w: &[f64], geom: &ConvGeom, out_ch: usize) -> Vec<f64> {
        let [d, h, ww] = geom.in_dims;
        let [od, oh, ow] = geom.out_dims().unwrap();
        let k = geom.kernel;
        let mut out = vec![0.0; out_ch * od * oh * ow];
        for co in 0..out_ch {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..geom.channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (iz, iy, ix) = (
                                            oz * geom.stride + kz,
                                            oy * geom.stride + ky,
                                            ox * geom.stride + kx,
                                        );
                                        let (iz, iy, ix) = (
                                            iz as isize - geom.pad as isize,
                                            iy as isize - geom.pad as isize,
                                            ix as isize - geom.pad as isize,
                                        );
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= ww as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((c * d + iz as usize) * h + iy as usize) * ww
                                            + ix as usize;
                                        acc += x[xi]
                                            * w[(((co * geom.channels + c) * k + kz) * k + ky) * k
                                                + kx];
                                    }
                                }
                            }
                        }
                        out[((co * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn wave(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f).sin()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_loops_and_its_adjoint() {
        for (geom, out_ch) in [
            (
                ConvGeom {
                    channels: 2,
                    in_dims: [4, 3, 5],
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                3,
            ),
            (
                ConvGeom {
                    channels: 3,
                    in_dims: [6, 5, 4],
                    kernel: 2,
                    stride: 2,
                    pad: 0,
                },
                2,
            ),
            (
                ConvGeom {
                    channels: 1,
                    in_dims: [5, 5, 5],
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                },
                2,
            ),
        ] {
            let x = wave(geom.channels * geom.in_dims.iter().product::<usize>(), 0.37);
            let w = wave(out_ch * geom.rows(), 1.13);
            let y = conv3d(&x, &w, &vec![0.0; out_ch], &geom, out_ch);
            let r = naive_conv(&x, &w, &geom, out_ch);
            assert!(y.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-12));
            // <conv(x), g> = <x, gx> and = <w, gw>
            let g = wave(y.len(), 0.71);
            let (gx, gw, _) = conv3d_grad(&x, &w, &g, &geom, out_ch);
            assert!((dot(&y, &g) - dot(&x, &gx)).abs() < 1e-10);
            assert!((dot(&y, &g) - dot(&w, &gw)).abs() < 1e-10);
        }
    }

    #[test]
    fn transposed_conv_is_the_adjoint() {
        let big = ConvGeom {
            channels: 2,
            in_dims: [4, 6, 4],
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        let in_ch = 3;
        let small = big.out_dims().unwrap().iter().product::<usize>();
        let x = wave(in_ch * small, 0.29);
        let w = wave(in_ch * big.rows(), 0.83);
        let y = conv_transpose3d(&x, &w, &[0.0, 0.0], &big, in_ch);
        let z = wave(y.len(), 0.41);
        // <convT(x), z> = <x, conv(z)> with the same weights
        let cz = naive_conv(&z, &w, &big, in_ch);
        assert!((dot(&y, &z) - dot(&x, &cz)).abs() < 1e-10);
        let (gx, gw, gb) = conv_transpose3d_grad(&x, &w, &z, &big, in_ch);
        assert!(gx.iter().zip(&cz).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((dot(&y, &z) - dot(&w, &gw)).abs() < 1e-10);
        assert!((gb[0] - z[..z.len() / 2].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn strided_conv_output_dims() {
        let geom = ConvGeom {
            channels: 2,
            in_dims: [8, 8, 8],
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        assert_eq!(geom.out_dims(), Some([4, 4, 4]));
        let geom = ConvGeom {
            channels: 2,
            in_dims: [1, 8, 8],
            kernel: 3,
            stride: 1,
            pad: 0,
        };
        assert_eq!(geom.out_dims(), None);
    }

    #[test]
    fn scatter_max_keeps_zero_for_empty_cells() {
        let x = [1.0, -2.0, 3.0, 0.5];
        let (out, win) = scatter_max(&x, 2, 2, &[1, 1], 3);
        assert_eq!(out, vec![0.0, 3.0, 0.0, 0.0, 0.5, 0.0]);
        assert_eq!(win[1], Some(1));
        assert_eq!(win[0], None);
    }
}
