//! im2col / col2im kernels for 2D convolution with zero padding.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
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

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// A 1×1 stride-1 unpadded convolution reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns `ox` for which `ox*stride + kj - pad` lies in `[0, w)`.
    fn valid_range(&self, k: usize, out: usize, size: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= size-1, exclusive bound
        let hi_num = size as isize - 1 - off;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let lo = (lo as usize).min(out);
        let hi = (hi as usize).min(out).max(lo);
        (lo, hi)
    }
}

/// Writes the `[c_in*kh*kw, out_h*out_w]` column matrix of one image.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    debug_assert_eq!(col.len(), g.col_rows() * p);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = g.valid_range(ki, oh, g.h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (x_lo, x_hi) = g.valid_range(kj, ow, g.w);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if oy < y_lo || oy >= y_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = x_lo + kj - g.pad;
                        line[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            line[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adds the column-matrix gradient back onto the image gradient (adjoint of `im2col`).
pub(crate) fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = g.valid_range(ki, oh, g.h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let (x_lo, x_hi) = g.valid_range(kj, ow, g.w);
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = x_lo + kj - g.pad;
                        for (d, &v) in dst[ix0..ix0 + (x_hi - x_lo)].iter_mut().zip(&line[x_lo..x_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in x_lo..x_hi {
                            dst[ox * g.stride + kj - g.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.col_rows() * oh * ow];
        for c in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                out[row * oh * ow + oy * ow + ox] =
                                    x[c * g.h * g.w + iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive_gather() {
        for &(h, w, k, s, p) in &[(5, 7, 3, 1, 1), (8, 8, 3, 2, 1), (6, 5, 1, 1, 0), (7, 7, 5, 2, 2), (4, 4, 3, 3, 0)] {
            let g = ConvGeom { c_in: 2, h, w, kh: k, kw: k, stride: s, pad: p };
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 * 0.5 - 3.0).collect();
            let mut col = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&g, &x, &mut col);
            assert_eq!(col, naive_im2col(&g, &x), "geometry {g:?}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { c_in: 3, h: 9, w: 6, kh: 3, kw: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..3 * 9 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&g, &x, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&g, &y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
