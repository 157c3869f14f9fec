/// Strided view of a row-major matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> isize {
        self.offset as isize
            + (self.rows as isize - 1) * self.row_stride
            + (self.cols as isize - 1) * self.col_stride
    }
}

/// `c[offset..] = a · b + beta · c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], c_offset: usize, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c_offset + m * n <= c.len(), "gemm output out of range");
    assert!(a.offset < a.data.len() && (a.last_index() as usize) < a.data.len());
    assert!(b.offset < b.data.len() && (b.last_index() as usize) < b.data.len());
    // SAFETY: every index touched by dgemm lies within the slices, checked above
    // (strides are non-negative for all views built in this crate).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr().add(b.offset),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr().add(c_offset),
            n as isize,
            1,
        );
    }
}
