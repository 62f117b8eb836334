//! Convolution kernels built on im2col + GEMM.

use super::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent of a strided convolution over `len` input samples.
    pub fn conv_out(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the matching transposed convolution.
    pub fn transpose_out(&self, len: usize) -> Option<usize> {
        ((len.checked_sub(1)?) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

/// Unfold `img` ([c, h, w]) into `cols` ([c*k*k, oh*ow]).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Element>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let src = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold `cols` back into `img`, accumulating overlapping contributions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_line[ix as usize] = dst_line[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Shapes shared by the forward and backward passes of one convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeom,
}

/// y = conv(x, w) + b with w laid out [out_ch, in_ch, k, k].
pub(crate) fn conv2d_forward<T: Element>(s: &ConvShape, x: &[T], w: &[T], b: &[T], y: &mut [T]) {
    let kk = s.geom.kernel * s.geom.kernel;
    let rows = s.in_ch * kk;
    let plane = s.out_h * s.out_w;
    let mut cols = vec![T::zero(); rows * plane];
    for n in 0..s.batch {
        let xb = &x[n * s.in_ch * s.in_h * s.in_w..(n + 1) * s.in_ch * s.in_h * s.in_w];
        im2col(xb, s.in_ch, s.in_h, s.in_w, s.geom, s.out_h, s.out_w, &mut cols);
        let yb = &mut y[n * s.out_ch * plane..(n + 1) * s.out_ch * plane];
        for (co, line) in yb.chunks_exact_mut(plane).enumerate() {
            line.fill(b[co]);
        }
        T::gemm(
            s.out_ch,
            rows,
            plane,
            T::one(),
            w,
            rows as isize,
            1,
            &cols,
            plane as isize,
            1,
            T::one(),
            yb,
            plane as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Element>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kk = s.geom.kernel * s.geom.kernel;
    let rows = s.in_ch * kk;
    let plane = s.out_h * s.out_w;
    let in_size = s.in_ch * s.in_h * s.in_w;
    let mut cols = vec![T::zero(); rows * plane];
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..s.batch {
        let dyb = &dy[n * s.out_ch * plane..(n + 1) * s.out_ch * plane];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(
                &x[n * in_size..(n + 1) * in_size],
                s.in_ch,
                s.in_h,
                s.in_w,
                s.geom,
                s.out_h,
                s.out_w,
                &mut cols,
            );
            // dW[out, rows] += dy[out, plane] @ cols^T
            T::gemm(
                s.out_ch,
                plane,
                rows,
                T::one(),
                dyb,
                plane as isize,
                1,
                &cols,
                1,
                plane as isize,
                T::one(),
                dw,
                rows as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols[rows, plane] = W^T @ dy
            T::gemm(
                rows,
                s.out_ch,
                plane,
                T::one(),
                w,
                1,
                rows as isize,
                dyb,
                plane as isize,
                1,
                T::zero(),
                &mut cols,
                plane as isize,
                1,
            );
            col2im(
                &cols,
                s.in_ch,
                s.in_h,
                s.in_w,
                s.geom,
                s.out_h,
                s.out_w,
                &mut dx[n * in_size..(n + 1) * in_size],
            );
        }
    }
    if let Some(db) = db {
        accumulate_bias(dy, s.batch, s.out_ch, plane, db);
    }
}

fn accumulate_bias<T: Element>(dy: &[T], batch: usize, ch: usize, plane: usize, db: &mut [T]) {
    for n in 0..batch {
        for (c, d) in db.iter_mut().enumerate().take(ch) {
            let start = (n * ch + c) * plane;
            let s = dy[start..start + plane]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v);
            *d = *d + s;
        }
    }
}

/// Transposed convolution with w laid out [in_ch, out_ch, k, k].
///
/// `in_h`/`in_w` describe x and `out_h`/`out_w` describe y; the geometry is
/// that of the forward convolution mapping y back onto x.
pub(crate) fn conv_transpose2d_forward<T: Element>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    b: &[T],
    y: &mut [T],
) {
    let kk = s.geom.kernel * s.geom.kernel;
    let rows = s.out_ch * kk;
    let in_plane = s.in_h * s.in_w;
    let out_plane = s.out_h * s.out_w;
    let mut cols = vec![T::zero(); rows * in_plane];
    for n in 0..s.batch {
        let xb = &x[n * s.in_ch * in_plane..(n + 1) * s.in_ch * in_plane];
        // cols[rows, in_plane] = W^T @ x
        T::gemm(
            rows,
            s.in_ch,
            in_plane,
            T::one(),
            w,
            1,
            rows as isize,
            xb,
            in_plane as isize,
            1,
            T::zero(),
            &mut cols,
            in_plane as isize,
            1,
        );
        let yb = &mut y[n * s.out_ch * out_plane..(n + 1) * s.out_ch * out_plane];
        for (co, line) in yb.chunks_exact_mut(out_plane).enumerate() {
            line.fill(b[co]);
        }
        col2im(&cols, s.out_ch, s.out_h, s.out_w, s.geom, s.in_h, s.in_w, yb);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Element>(
    s: &ConvShape,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kk = s.geom.kernel * s.geom.kernel;
    let rows = s.out_ch * kk;
    let in_plane = s.in_h * s.in_w;
    let out_plane = s.out_h * s.out_w;
    let mut cols = vec![T::zero(); rows * in_plane];
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..s.batch {
        let dyb = &dy[n * s.out_ch * out_plane..(n + 1) * s.out_ch * out_plane];
        im2col(
            dyb, s.out_ch, s.out_h, s.out_w, s.geom, s.in_h, s.in_w, &mut cols,
        );
        if let Some(dx) = dx.as_deref_mut() {
            // dx[in_ch, in_plane] = W @ cols
            T::gemm(
                s.in_ch,
                rows,
                in_plane,
                T::one(),
                w,
                rows as isize,
                1,
                &cols,
                in_plane as isize,
                1,
                T::one(),
                &mut dx[n * s.in_ch * in_plane..(n + 1) * s.in_ch * in_plane],
                in_plane as isize,
                1,
            );
        }
        if let Some(dw) = dw.as_deref_mut() {
            // dW[in_ch, rows] += x @ cols^T
            T::gemm(
                s.in_ch,
                in_plane,
                rows,
                T::one(),
                &x[n * s.in_ch * in_plane..(n + 1) * s.in_ch * in_plane],
                in_plane as isize,
                1,
                &cols,
                1,
                in_plane as isize,
                T::one(),
                dw,
                rows as isize,
                1,
            );
        }
    }
    if let Some(db) = db {
        accumulate_bias(dy, s.batch, s.out_ch, out_plane, db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(s: &ConvShape, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let k = s.geom.kernel;
        let mut y = vec![0.0; s.batch * s.out_ch * s.out_h * s.out_w];
        for n in 0..s.batch {
            for co in 0..s.out_ch {
                for oy in 0..s.out_h {
                    for ox in 0..s.out_w {
                        let mut acc = b[co];
                        for ci in 0..s.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s.geom.stride + ky) as isize - s.geom.pad as isize;
                                    let ix = (ox * s.geom.stride + kx) as isize - s.geom.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= s.in_h as isize || ix >= s.in_w as isize {
                                        continue;
                                    }
                                    acc += w[((co * s.in_ch + ci) * k + ky) * k + kx]
                                        * x[((n * s.in_ch + ci) * s.in_h + iy as usize) * s.in_w + ix as usize];
                                }
                            }
                        }
                        y[((n * s.out_ch + co) * s.out_h + oy) * s.out_w + ox] = acc;
                    }
                }
            }
        }
        y
    }

    /// Scatter form of the transposed convolution.
    fn naive_conv_t(s: &ConvShape, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let k = s.geom.kernel;
        let mut y = vec![0.0; s.batch * s.out_ch * s.out_h * s.out_w];
        for n in 0..s.batch {
            for co in 0..s.out_ch {
                for p in 0..s.out_h * s.out_w {
                    y[(n * s.out_ch + co) * s.out_h * s.out_w + p] = b[co];
                }
            }
            for ci in 0..s.in_ch {
                for iy in 0..s.in_h {
                    for ix in 0..s.in_w {
                        let v = x[((n * s.in_ch + ci) * s.in_h + iy) * s.in_w + ix];
                        for co in 0..s.out_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (iy * s.geom.stride + ky) as isize - s.geom.pad as isize;
                                    let ox = (ix * s.geom.stride + kx) as isize - s.geom.pad as isize;
                                    if oy < 0 || ox < 0 || oy >= s.out_h as isize || ox >= s.out_w as isize {
                                        continue;
                                    }
                                    y[((n * s.out_ch + co) * s.out_h + oy as usize) * s.out_w + ox as usize] +=
                                        v * w[((ci * s.out_ch + co) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive() {
        let geom = ConvGeom { kernel: 4, stride: 2, pad: 1 };
        let s = ConvShape {
            batch: 2, in_ch: 3, out_ch: 5, in_h: 8, in_w: 6,
            out_h: geom.conv_out(8).unwrap(), out_w: geom.conv_out(6).unwrap(), geom,
        };
        let x = ramp(2 * 3 * 8 * 6, 0.1);
        let w = ramp(5 * 3 * 16, 0.05);
        let b = ramp(5, 0.3);
        let mut y = vec![0.0; 2 * 5 * s.out_h * s.out_w];
        conv2d_forward(&s, &x, &w, &b, &mut y);
        let r = naive_conv(&s, &x, &w, &b);
        for (a, b) in y.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_matches_naive() {
        let geom = ConvGeom { kernel: 4, stride: 2, pad: 1 };
        let s = ConvShape {
            batch: 2, in_ch: 3, out_ch: 2, in_h: 4, in_w: 5,
            out_h: geom.transpose_out(4).unwrap(), out_w: geom.transpose_out(5).unwrap(), geom,
        };
        assert_eq!((s.out_h, s.out_w), (8, 10));
        let x = ramp(2 * 3 * 20, 0.1);
        let w = ramp(3 * 2 * 16, 0.05);
        let b = ramp(2, 0.3);
        let mut y = vec![0.0; 2 * 2 * 80];
        conv_transpose2d_forward(&s, &x, &w, &b, &mut y);
        let r = naive_conv_t(&s, &x, &w, &b);
        for (a, b) in y.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn geometry() {
        let down = ConvGeom { kernel: 4, stride: 2, pad: 1 };
        assert_eq!(down.conv_out(256), Some(128));
        assert_eq!(down.transpose_out(128), Some(256));
        let same = ConvGeom { kernel: 3, stride: 1, pad: 1 };
        assert_eq!(same.conv_out(4), Some(4));
        assert_eq!(same.conv_out(1), Some(1));
    }
}
