// Row-major dense kernels. The inner loops run over contiguous memory so the
// compiler can vectorize them.

use crate::scalar::Scalar;

/// out[m×n] = a[m×k] · b[k×n]. `out` must be zeroed by the caller.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// acc[m×k] += g[m×n] · b[k×n]ᵀ
pub(crate) fn accumulate_grad_lhs<T: Scalar>(
    g: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    acc: &mut [T],
) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in g_row.iter().zip(b_row) {
                s += x * y;
            }
            acc[i * k + p] += s;
        }
    }
}

/// acc[k×n] += a[m×k]ᵀ · g[m×n]
pub(crate) fn accumulate_grad_rhs<T: Scalar>(
    a: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    acc: &mut [T],
) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let acc_row = &mut acc[p * n..(p + 1) * n];
            for (o, &gv) in acc_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}
