//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub row: isize,
    pub col: isize,
}

impl Layout {
    /// Row-major storage of a matrix with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Self {
            row: cols as isize,
            col: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self {
            row: 1,
            col: cols as isize,
        }
    }
}

/// `c = a · b + beta · c` where `a` is `m×k`, `b` is `k×n` and `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output buffer too small");
    assert!(max_index(m, k, la) < a.len().max(1), "gemm lhs out of bounds");
    assert!(max_index(k, n, lb) < b.len().max(1), "gemm rhs out of bounds");
    // SAFETY: every index reachable through the given strides was bounds-checked
    // above, and `c` is a distinct mutable slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.row,
            la.col,
            b.as_ptr(),
            lb.row,
            lb.col,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_index(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * l.row as usize + (cols - 1) * l.col as usize
}
