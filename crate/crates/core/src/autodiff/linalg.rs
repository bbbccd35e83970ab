//! Thin safe wrapper over the `matrixmultiply` dgemm kernel.

/// Row-major matrix view description: `rows × cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols, trans: false }
    }

    pub fn t(self) -> Self {
        Self { trans: !self.trans, ..self }
    }

    /// Logical (rows, cols, row stride, col stride) after transposition.
    fn layout(&self) -> (usize, usize, isize, isize) {
        if self.trans {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `c = alpha·a·b + beta·c` with `c` row-major `m × n`.
pub(crate) fn gemm(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    let (m, k, rsa, csa) = a.layout();
    let (k2, n, rsb, csb) = b.layout();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: strides and extents describe the borrowed slices exactly (checked above).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: Mat<'_>, b: Mat<'_>) -> Vec<f64> {
    let m = if a.trans { a.cols } else { a.rows };
    let n = if b.trans { b.rows } else { b.cols };
    let mut c = vec![0.0; m * n];
    gemm(1.0, a, b, 0.0, &mut c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a: 2x3, b: 2x3 -> a·bᵀ: 2x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, -1.0, 2.0, 1.0, 0.0];
        let c = matmul(Mat::new(&a, 2, 3), Mat::new(&b, 2, 3).t());
        assert_eq!(c, vec![-2.0, 4.0, -2.0, 13.0]);
        let d = matmul(Mat::new(&a, 2, 3).t(), Mat::new(&b, 2, 3));
        assert_eq!(d, vec![9.0, 4.0, -1.0, 12.0, 5.0, -2.0, 15.0, 6.0, -3.0]);
    }
}
