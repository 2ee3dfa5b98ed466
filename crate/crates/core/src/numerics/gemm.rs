//! Thin safe wrappers over `matrixmultiply::dgemm`.

/// Strided view into a flat buffer: element `(i, j)` lives at
/// `data[offset + i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    data: &'a [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        Mat { data, offset, rs, cs }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C[m,n] = alpha · A[m,k] · B[k,n] + beta · C` over strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.last_index(m, k) < a.data.len(), "gemm: A view out of bounds");
    assert!(k == 0 || b.last_index(k, n) < b.data.len(), "gemm: B view out of bounds");
    let c_last = c_offset + (m - 1) * rsc + (n - 1) * csc;
    assert!(c_last < c.len(), "gemm: C view out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `C = op(A) · op(B) + beta · C` for dense row-major buffers.
///
/// `ta` means `A` is stored as `[k, m]` and used transposed; likewise `tb`
/// for `B` stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    let av = if ta { Mat::new(a, 0, 1, m) } else { Mat::new(a, 0, k, 1) };
    let bv = if tb { Mat::new(b, 0, 1, k) } else { Mat::new(b, 0, n, 1) };
    gemm_strided(m, k, n, 1.0, av, bv, beta, c, 0, n, 1);
}
