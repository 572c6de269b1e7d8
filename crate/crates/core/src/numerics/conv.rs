//! im2col/col2im kernels shared by the convolution ops.

use super::scalar::Scalar;
use super::NumericsError;

/// Geometry of a cross-correlation from a `channels × height × width` image
/// to a `out_h × out_w` response map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, NumericsError> {
        if stride == 0 {
            return Err(NumericsError::Shape("conv stride must be positive".into()));
        }
        let padded_h = height + 2 * padding;
        let padded_w = width + 2 * padding;
        if padded_h < kernel_h || padded_w < kernel_w {
            return Err(NumericsError::Shape(format!(
                "kernel {kernel_h}x{kernel_w} does not fit a {height}x{width} input with padding {padding}"
            )));
        }
        Ok(ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (padded_h - kernel_h) / stride + 1,
            out_w: (padded_w - kernel_w) / stride + 1,
        })
    }

    /// Rows of the column matrix: `channels * kernel_h * kernel_w`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    fn source(&self, oh: usize, ki: usize, ow: usize, kj: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride + ki) as isize - self.padding as isize;
        let iw = (ow * self.stride + kj) as isize - self.padding as isize;
        if ih < 0 || iw < 0 || ih as usize >= self.height || iw as usize >= self.width {
            None
        } else {
            Some((ih as usize, iw as usize))
        }
    }
}

/// Unfolds one image into a `patch_len × out_len` matrix.
pub fn im2col<S: Scalar>(g: &ConvGeometry, image: &[S], cols: &mut [S]) {
    let out_len = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        dst[oh * g.out_w + ow] = match g.source(oh, ki, ow, kj) {
                            Some((ih, iw)) => image[(c * g.height + ih) * g.width + iw],
                            None => S::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub fn col2im<S: Scalar>(g: &ConvGeometry, cols: &[S], image: &mut [S]) {
    let out_len = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        if let Some((ih, iw)) = g.source(oh, ki, ow, kj) {
                            image[(c * g.height + ih) * g.width + iw] =
                                image[(c * g.height + ih) * g.width + iw] + src[oh * g.out_w + ow];
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

    #[test]
    fn geometry_of_strided_kernel() {
        let g = ConvGeometry::new(1, 28, 28, 4, 4, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (14, 14));
        let g = ConvGeometry::new(32, 14, 14, 4, 4, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (7, 7));
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        assert!(ConvGeometry::new(1, 2, 2, 5, 5, 1, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry::new(2, 5, 4, 3, 2, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
