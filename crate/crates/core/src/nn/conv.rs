//! im2col / col2im kernels for 2-D convolution on a single image.

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// A 1x1 stride-1 unpadded convolution can use the image as its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `image` (`[C, H, W]`, row-major) into `cols` (`[C*K*K, Ho*Wo]`).
pub(crate) fn im2col<F: Real>(image: &[F], geo: &ConvGeometry, cols: &mut [F]) {
    let (h, w) = (geo.height as isize, geo.width as isize);
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let k = geo.kernel;
    debug_assert_eq!(cols.len(), geo.col_rows() * ho * wo);
    let mut row = 0;
    for c in 0..geo.channels {
        let plane = &image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *out = if ix < 0 || ix >= w {
                            F::zero()
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

/// Adjoint of [`im2col`]: scatters `cols` back onto `image`, accumulating.
pub(crate) fn col2im<F: Real>(cols: &[F], geo: &ConvGeometry, image: &mut [F]) {
    let (h, w) = (geo.height as isize, geo.width as isize);
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let k = geo.kernel;
    let mut row = 0;
    for c in 0..geo.channels {
        let plane = &mut image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
