//! Bounds-checked wrappers over `matrixmultiply`.

/// Strided matrix operand: `data[i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> View<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "gemm operand out of bounds");
        }
    }
}

/// `c = alpha * a @ b + beta * c` with `c` row-major `a.rows x b.cols`.
pub fn sgemm(alpha: f32, a: View<'_, f32>, b: View<'_, f32>, beta: f32, c: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size mismatch");
    a.check();
    b.check();
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: operand extents were bounds-checked above; `c` is an exclusive
    // row-major buffer of the right length.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Double precision counterpart of [`sgemm`].
pub fn dgemm(alpha: f64, a: View<'_, f64>, b: View<'_, f64>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size mismatch");
    a.check();
    b.check();
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: as in `sgemm`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}
