//! Raw forward/backward kernels on flat row-major buffers. Shape checking
//! happens in the graph layer; these assume consistent extents.

use super::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - pad`
/// lands inside `[0, w)`.
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Writes the patches of one image into columns `[off, off + plane)` of the
/// row-major matrix `col` whose rows are `ld` long.
fn im2col<F: Float>(g: &ConvGeom, x: &[F], col: &mut [F], ld: usize, off: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y_lo, y_hi) = valid_range(oh, g.stride, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let (x_lo, x_hi) = valid_range(ow, g.stride, kx, g.pad, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ld + off..row * ld + off + plane];
                dst[..y_lo * ow].fill(F::zero());
                dst[y_hi * ow..].fill(F::zero());
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    line[..x_lo].fill(F::zero());
                    line[x_hi..].fill(F::zero());
                    let start = x_lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[x_lo..x_hi].copy_from_slice(&src[start..start + (x_hi - x_lo)]);
                    } else {
                        for (j, v) in line[x_lo..x_hi].iter_mut().enumerate() {
                            *v = src[start + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Float>(g: &ConvGeom, col: &[F], ld: usize, off: usize, dx: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y_lo, y_hi) = valid_range(oh, g.stride, ky, g.pad, g.h);
            for kx in 0..g.kw {
                let (x_lo, x_hi) = valid_range(ow, g.stride, kx, g.pad, g.w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * ld + off..row * ld + off + plane];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut dxc[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * ow + x_lo..oy * ow + x_hi];
                    let start = x_lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + line.len()].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            let d = &mut dst[start + j * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Sum with eight independent accumulators so the loop vectorises.
pub fn lane_sum<F: Float>(xs: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for k in 0..8 {
            acc[k] = acc[k] + c[k];
        }
    }
    let tail: F = chunks.remainder().iter().copied().sum();
    acc.iter().copied().sum::<F>() + tail
}

/// `sum(a * b)` with eight independent accumulators.
pub fn lane_dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let tail: F = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    acc.iter().copied().sum::<F>() + tail
}

/// Fills `col` with the patch matrix `[rows, n * plane]` of the whole batch.
fn batch_cols<F: Float>(g: &ConvGeom, x: &[F], col: &mut [F]) {
    let plane = g.out_h() * g.out_w();
    let ld = g.n * plane;
    let img = g.c_in * g.h * g.w;
    for i in 0..g.n {
        if g.is_pointwise() {
            for c in 0..g.c_in {
                col[c * ld + i * plane..c * ld + (i + 1) * plane]
                    .copy_from_slice(&x[i * img + c * plane..i * img + (c + 1) * plane]);
            }
        } else {
            im2col(g, &x[i * img..(i + 1) * img], col, ld, i * plane);
        }
    }
}

pub fn conv2d_forward<F: Float>(g: &ConvGeom, x: &[F], w: &[F], b: Option<&[F]>) -> Vec<F> {
    let plane = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let ld = g.n * plane;
    let mut out = vec![F::zero(); g.n * g.c_out * plane];
    F::with_scratch(rows * ld, |col| {
        batch_cols(g, x, col);
        F::with_scratch(g.c_out * ld, |y| {
            F::gemm(g.c_out, rows, ld, F::one(), w, rows as isize, 1, col, ld as isize, 1, F::zero(), y, ld as isize, 1);
            for i in 0..g.n {
                for k in 0..g.c_out {
                    let bias = b.map_or(F::zero(), |b| b[k]);
                    let src = &y[k * ld + i * plane..k * ld + (i + 1) * plane];
                    let dst = &mut out[(i * g.c_out + k) * plane..(i * g.c_out + k + 1) * plane];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = v + bias;
                    }
                }
            }
        })
    });
    out
}

/// Gradients of a convolution. Each requested output is accumulated into.
pub fn conv2d_backward<F: Float>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let plane = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let ld = g.n * plane;
    F::with_scratch(g.c_out * ld, |dy_cm| {
        // [n, c_out, plane] to [c_out, n * plane]
        for i in 0..g.n {
            for k in 0..g.c_out {
                dy_cm[k * ld + i * plane..k * ld + (i + 1) * plane]
                    .copy_from_slice(&dy[(i * g.c_out + k) * plane..(i * g.c_out + k + 1) * plane]);
            }
        }
        if let Some(db) = db {
            for (k, chunk) in dy_cm.chunks(ld).enumerate() {
                db[k] = db[k] + lane_sum(chunk);
            }
        }
        F::with_scratch(rows * ld, |col| {
            if let Some(dw) = dw {
                batch_cols(g, x, col);
                // dw[c_out, rows] += dy[c_out, ld] * col^T
                F::gemm(g.c_out, ld, rows, F::one(), dy_cm, ld as isize, 1, col, 1, ld as isize, F::one(), dw, rows as isize, 1);
            }
            if let Some(dx) = dx {
                let dcol = col;
                F::gemm(rows, g.c_out, ld, F::one(), w, 1, rows as isize, dy_cm, ld as isize, 1, F::zero(), dcol, ld as isize, 1);
                let img = g.c_in * g.h * g.w;
                for i in 0..g.n {
                    let dxi = &mut dx[i * img..(i + 1) * img];
                    if g.is_pointwise() {
                        for c in 0..g.c_in {
                            let src = &dcol[c * ld + i * plane..c * ld + (i + 1) * plane];
                            for (d, &v) in dxi[c * plane..(c + 1) * plane].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    } else {
                        col2im_add(g, dcol, ld, i * plane, dxi);
                    }
                }
            }
        });
    });
}

/// Group normalization statistics and output (before the affine transform
/// is applied by the caller). Returns `(normalized, mean, rstd)` with one
/// `mean`/`rstd` entry per `(item, group)`.
pub fn group_norm_forward<F: Float>(
    x: &[F],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let per = c / groups * hw;
    let mut xhat = vec![F::zero(); x.len()];
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for (chunk, out) in x.chunks(per).zip(xhat.chunks_mut(per)) {
        let cnt = F::of(per as f64);
        let mean = lane_sum(chunk) / cnt;
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = v - mean;
        }
        let var = lane_dot(out, out) / cnt;
        let rstd = F::one() / (var + eps).sqrt();
        for o in out.iter_mut() {
            *o = *o * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    debug_assert_eq!(means.len(), n * groups);
    (xhat, means, rstds)
}

/// Backward through `xhat = (x - mean) * rstd` given `dxhat`.
pub fn group_norm_backward<F: Float>(xhat: &[F], dxhat: &[F], rstd: &[F], per: usize, dx: &mut [F]) {
    let cnt = F::of(per as f64);
    for (((xh, dxh), r), out) in xhat.chunks(per).zip(dxhat.chunks(per)).zip(rstd).zip(dx.chunks_mut(per)) {
        let mean_d = lane_sum(dxh) / cnt;
        let mean_dx = lane_dot(xh, dxh) / cnt;
        for ((o, &a), &d) in out.iter_mut().zip(xh).zip(dxh) {
            *o = *o + *r * (d - mean_d - a * mean_dx);
        }
    }
}

pub fn upsample2x<F: Float>(x: &[F], nc: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); nc * oh * ow];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<F: Float>(dy: &[F], nc: usize, h: usize, w: usize, dx: &mut [F]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..nc {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = (y / 2) * w + xx / 2;
                dst[i] = dst[i] + src[y * ow + xx];
            }
        }
    }
}

pub fn avg_pool2x<F: Float>(x: &[F], nc: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::of(0.25);
    let mut out = vec![F::zero(); nc * oh * ow];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1];
                let b = src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = (a + b) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2x_backward<F: Float>(dy: &[F], nc: usize, h: usize, w: usize, dx: &mut [F]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::of(0.25);
    for p in 0..nc {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let g = src[y * ow + xx] * quarter;
                for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (2 * y + dy_) * w + 2 * xx + dx_;
                    dst[i] = dst[i] + g;
                }
            }
        }
    }
}

/// Edge-replicating padding of each `h x w` plane by `p` pixels.
pub fn pad_replicate<F: Float>(x: &[F], nc: usize, h: usize, w: usize, p: usize) -> Vec<F> {
    let (oh, ow) = (h + 2 * p, w + 2 * p);
    let mut out = vec![F::zero(); nc * oh * ow];
    for c in 0..nc {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            let sy = y.saturating_sub(p).min(h - 1);
            for xx in 0..ow {
                let sx = xx.saturating_sub(p).min(w - 1);
                dst[y * ow + xx] = src[sy * w + sx];
            }
        }
    }
    out
}

pub fn pad_replicate_backward<F: Float>(dy: &[F], nc: usize, h: usize, w: usize, p: usize, dx: &mut [F]) {
    let (oh, ow) = (h + 2 * p, w + 2 * p);
    for c in 0..nc {
        let src = &dy[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let sy = y.saturating_sub(p).min(h - 1);
            for xx in 0..ow {
                let sx = xx.saturating_sub(p).min(w - 1);
                dst[sy * w + sx] = dst[sy * w + sx] + src[y * ow + xx];
            }
        }
    }
}
