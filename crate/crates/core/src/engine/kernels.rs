//! Raw slice kernels behind the graph ops.

use super::Real;

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`,
/// all row-major. `ta`/`tb` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length assertions above cover every index reachable from
    // (m, k, n) with these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial geometry of a convolution, in terms of the *image* side
/// (`c`, `h`, `w`) and the *column* side (`ho`, `wo`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col<T: Real>(img: &[T], g: &Window, cols: &mut [T]) {
    debug_assert_eq!(img.len(), g.c * g.h * g.w);
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let p = g.pad as isize;
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - p;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds columns back onto the image (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Window, img: &mut [T]) {
    debug_assert_eq!(img.len(), g.c * g.h * g.w);
    let p = g.pad as isize;
    let mut row = 0;
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward cross-correlation over a batch. `w` is `(O, C, kh, kw)`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    n: usize,
    c_out: usize,
    g: &Window,
) -> Vec<T> {
    let in_per = g.c * g.h * g.w;
    let out_per = c_out * g.cols();
    let mut out = vec![T::zero(); n * out_per];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.rows() * g.cols()]
    };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let os = &mut out[s * out_per..(s + 1) * out_per];
        let cols_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        matmul(w, false, cols_ref, false, os, c_out, g.rows(), g.cols(), false);
        if let Some(b) = b {
            for (o, plane) in os.chunks_mut(g.cols()).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + b[o]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    n: usize,
    c_out: usize,
    g: &Window,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let in_per = g.c * g.h * g.w;
    let out_per = c_out * g.cols();
    let mut dx = need.0.then(|| vec![T::zero(); n * in_per]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut db = need.2.then(|| vec![T::zero(); c_out]);
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let gs = &gout[s * out_per..(s + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            matmul(gs, false, cols_ref, true, dw, c_out, g.cols(), g.rows(), true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                matmul(w, true, gs, false, dxs, g.rows(), c_out, g.cols(), true);
            } else {
                matmul(w, true, gs, false, &mut cols, g.rows(), c_out, g.cols(), false);
                col2im(&cols, g, dxs);
            }
        }
        if let Some(db) = db.as_mut() {
            for (o, plane) in gs.chunks(g.cols()).enumerate() {
                db[o] = db[o] + plane.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `x` is `(N, Cin, H, W)`, `w` is `(Cin, Cout, kh,
/// kw)`; `g` describes the *output* image `(Cout, Ho, Wo)` with `x`'s
/// spatial size on the column side.
pub(crate) fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    n: usize,
    c_in: usize,
    g: &Window,
) -> Vec<T> {
    let in_per = c_in * g.cols();
    let out_per = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * out_per];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let os = &mut out[s * out_per..(s + 1) * out_per];
        matmul(w, true, xs, false, &mut cols, g.rows(), c_in, g.cols(), false);
        col2im(&cols, g, os);
        if let Some(b) = b {
            for (o, plane) in os.chunks_mut(g.h * g.w).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + b[o]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    n: usize,
    c_in: usize,
    g: &Window,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let in_per = c_in * g.cols();
    let out_per = g.c * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); n * in_per]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut db = need.2.then(|| vec![T::zero(); g.c]);
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for s in 0..n {
        let gs = &gout[s * out_per..(s + 1) * out_per];
        if dx.is_some() || dw.is_some() {
            im2col(gs, g, &mut cols);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            matmul(w, false, &cols, false, dxs, c_in, g.rows(), g.cols(), false);
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[s * in_per..(s + 1) * in_per];
            matmul(xs, false, &cols, true, dw, c_in, g.cols(), g.rows(), true);
        }
        if let Some(db) = db.as_mut() {
            for (o, plane) in gs.chunks(g.h * g.w).enumerate() {
                db[o] = db[o] + plane.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Max pooling; returns outputs and the flat input index of each maximum.
/// Ties resolve to the first position in row-major window order.
pub(crate) fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avgpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Vec<T> {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let scale = T::one() / T::lit((k * k) as f64);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..k {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        acc = acc + x[row + kx];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward<T: Real>(
    gout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Vec<T> {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let scale = T::one() / T::lit((k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let gval = gout[(p * ho + oy) * wo + ox] * scale;
                for ky in 0..k {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        dx[row + kx] = dx[row + kx] + gval;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul(&a, false, &b, false, &mut c, 2, 2, 2, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(&a, true, &b, false, &mut c, 2, 2, 2, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(&a, false, &b, true, &mut c, 2, 2, 2, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        matmul(&a, false, &b, true, &mut c, 2, 2, 2, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = Window {
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            ho: (5 + 2 - 3) / 2 + 1,
            wo: (4 + 2 - 2) / 2 + 1,
        };
        let img: Vec<f64> = (0..g.c * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
