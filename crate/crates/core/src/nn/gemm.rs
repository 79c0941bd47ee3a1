use crate::par::{self, Exec};

/// Rows of the output handled per work item.
const ROW_CHUNK: usize = 32;

/// Strided view of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `[rows, cols]` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }
}

/// `c[m, n] = a[m, k] · b[k, n] (+ c if accumulate)`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    exec: Exec,
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len());
    assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    par::for_each_chunk_mut(exec, c, ROW_CHUNK * n, |ci, c_chunk| {
        let r0 = ci * ROW_CHUNK;
        let rows = c_chunk.len() / n;
        let a_sub = &a.data[r0 * a.rs..];
        // SAFETY: the asserts above bound every index the kernel touches in
        // `a` and `b`; `c_chunk` is an exclusive row-major `rows × n` block.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_sub.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Public matrix product used by the benchmarks: `a[m,k] · b[k,n]`, both row-major.
pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(
        exec,
        m,
        k,
        n,
        MatRef::row_major(a, k),
        MatRef::row_major(b, n),
        &mut c,
        false,
    );
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (70, 13, 9);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 3) % 5) as f64 * 0.5).collect();
        let c = matmul(Exec::Sequential, &a, &b, m, k, n);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(c, matmul(Exec::Parallel, &a, &b, m, k, n));
    }

    #[test]
    fn transposed_operand() {
        // b stored as [n, k]; use its transpose
        let a = [1.0, 2.0, 3.0, 4.0];
        let bt = [1.0, 0.0, 1.0, 1.0];
        let mut c = vec![0.0; 4];
        gemm(
            Exec::Sequential,
            2,
            2,
            2,
            MatRef::row_major(&a, 2),
            MatRef::transposed(&bt, 2),
            &mut c,
            false,
        );
        assert_eq!(c, vec![1.0, 3.0, 3.0, 7.0]);
    }
}
