//! Low-level array kernels used by the graph operations.

use crate::scalar::{Scalar, Strides};

/// Geometry of a square-kernel 2D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window2d {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window2d {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_area(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Maps output position and kernel offset to the source pixel, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` patch matrix.
pub fn im2col<T: Scalar>(image: &[T], g: &Window2d, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let area = ho * wo;
    debug_assert_eq!(cols.len(), g.patch_len() * area);
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..ho {
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    match g.source(oy, ki, g.height) {
                        None => out_row.fill(T::zero()),
                        Some(y) => {
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = match g.source(ox, kj, g.width) {
                                    Some(x) => src[y * g.width + x],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into image gradients.
pub fn col2im<T: Scalar>(cols: &[T], g: &Window2d, image: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let area = ho * wo;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..ho {
                    let Some(y) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    for ox in 0..wo {
                        if let Some(x) = g.source(ox, kj, g.width) {
                            let d = &mut dst[y * g.width + x];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c (+)= a · b` with optional transposes of the stored operands.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    transpose_a: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    transpose_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (m, k) = if transpose_a {
        (a_cols, a_rows)
    } else {
        (a_rows, a_cols)
    };
    let (k2, n) = if transpose_b {
        (b_cols, b_rows)
    } else {
        (b_rows, b_cols)
    };
    assert_eq!(k, k2, "inner dimensions differ");
    let sa = if transpose_a {
        Strides::transposed(a_cols)
    } else {
        Strides::row_major(a_cols)
    };
    let sb = if transpose_b {
        Strides::transposed(b_cols)
    } else {
        Strides::row_major(b_cols)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    T::gemm(m, k, n, T::one(), a, sa, b, sb, beta, c, Strides::row_major(n));
}
