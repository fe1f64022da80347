//! Strided matrix products backed by `matrixmultiply`.

/// A read-only strided matrix view over a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Contiguous row-major `rows × cols`.
    pub fn rm(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Row-major rows with an explicit row stride.
    pub fn strided(data: &'a [f64], rows: usize, cols: usize, rs: usize) -> Self {
        Self { data, rows, cols, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = a · b + beta · c`, with `c` row-major with row stride `c_rs`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], c_rs: usize, beta: f64) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.max_index() < a.data.len().max(1));
    assert!(b.max_index() < b.data.len().max(1));
    assert!((m - 1) * c_rs + n <= c.len());
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * c_rs..i * c_rs + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(MatRef::rm(&a, 2, 3), MatRef::rm(&b, 3, 4), &mut c, 4, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (aᵀ)ᵀ·b through the transposed view
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64)).collect();
        let mut c2 = vec![0.0; 8];
        gemm(MatRef::rm(&at, 3, 2).t(), MatRef::rm(&b, 3, 4), &mut c2, 4, 0.0);
        assert_eq!(c, c2);
    }
}
