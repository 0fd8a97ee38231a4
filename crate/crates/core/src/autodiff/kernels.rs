//! Low-level dense kernels shared by the graph ops.

/// Row-major matrix view described by its strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a · b + beta · c`, with `c` contiguous row-major of shape `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views describe in-bounds elements of their slices (checked by
    // construction at every call site) and `c` holds at least m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution geometry for square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            padding,
        }
    }

    /// Output side of a forward convolution, or `None` if the kernel does not fit.
    pub fn conv_out(&self, side: usize) -> Option<usize> {
        let padded = side + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output side of the transposed convolution.
    pub fn transpose_out(&self, side: usize) -> Option<usize> {
        ((side - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Unfolds one `c × h × w` image into `(c·k·k) × (oh·ow)` columns.
pub(crate) fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let k = geom.kernel;
    let pad = geom.padding as isize;
    let s = geom.stride;
    let plane = oh * ow;
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - pad;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - pad;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
pub(crate) fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    img: &mut [f64],
) {
    let k = geom.kernel;
    let pad = geom.padding as isize;
    let s = geom.stride;
    let plane = oh * ow;
    for ch in 0..c {
        let dst = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Flat source indices for permuting a tensor of `shape` by `perm`
/// (output axis `i` is input axis `perm[i]`).
pub(crate) fn permute_indices(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    assert_eq!(perm.len(), rank);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        // Odometer increment over the output shape.
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (idx, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposed_views() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; 8];
        gemm(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 4), &mut c, 0.0);
        // the packed kernel may fuse multiply-adds
        for (x, y) in c.iter().zip(naive_matmul(&a, &b, 2, 3, 4)) {
            assert!((x - y).abs() < 1e-12);
        }

        // a stored as 3x2, used transposed
        let at: Vec<f64> = vec![a[0], a[3], a[1], a[4], a[2], a[5]];
        let mut c2 = vec![0.0; 8];
        gemm(MatRef::new(&at, 3, 2).t(), MatRef::new(&b, 3, 4), &mut c2, 0.0);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 5, 4);
        let geom = ConvGeom::new(3, 2, 1);
        let oh = geom.conv_out(h).unwrap();
        let ow = geom.conv_out(w).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|v| (v as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..c * 9 * oh * ow).map(|v| (v as f64 * 0.11).sin()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, geom, oh, ow, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, geom, oh, ow, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn permute_indices_transposes_matrix() {
        let (idx, shape) = permute_indices(&[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
    }
}
