//! im2col helpers for strided 2-D cross-correlation with "same" padding.

use crate::element::Element;

/// Output extent of a "same"-padded strided convolution: `ceil(len / stride)`.
pub fn conv_output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Zero padding `(before, after)` for a "same" convolution along one axis.
///
/// The total pad is the smallest amount that lets `ceil(len / stride)` windows
/// fit; an odd remainder goes after.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = conv_output_len(len, stride);
    let needed = (out - 1) * stride + kernel;
    let total = needed.saturating_sub(len);
    (total / 2, total - total / 2)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: (usize, usize)) -> Self {
        let (pad_top, _) = same_padding(h, kh, stride.0);
        let (pad_left, _) = same_padding(w, kw, stride.1);
        ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            h_out: conv_output_len(h, stride.0),
            w_out: conv_output_len(w, stride.1),
        }
    }

    /// Rows of the column matrix: one per (input channel, kernel tap).
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn source(&self, ho: usize, ki: usize, wo: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (ho * self.stride.0 + ki).checked_sub(self.pad_top)?;
        let x = (wo * self.stride.1 + kj).checked_sub(self.pad_left)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Fills `cols` (`col_rows x col_cols`, row-major) from one `c_in x h x w` image.
    pub fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        let p = self.col_cols();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for ho in 0..self.h_out {
                        for wo in 0..self.w_out {
                            cols[row + ho * self.w_out + wo] = match self.source(ho, ki, wo, kj) {
                                Some((y, x)) => image[(c * self.h + y) * self.w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column-matrix gradient back onto an image gradient.
    pub fn col2im_add<T: Element>(&self, cols: &[T], image: &mut [T]) {
        let p = self.col_cols();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for ho in 0..self.h_out {
                        for wo in 0..self.w_out {
                            if let Some((y, x)) = self.source(ho, ki, wo, kj) {
                                image[(c * self.h + y) * self.w + x] += cols[row + ho * self.w_out + wo];
                            }
                        }
                    }
                }
            }
        }
    }
}
