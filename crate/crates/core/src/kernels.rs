//! Inner loops shared by the differentiable ops.

use crate::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub(crate) fn mm_tn_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub(crate) fn mm_nt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    // Four independent accumulators let the compiler vectorise the loop.
    let mut acc = [F::ZERO; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Pairwise sum of equally sized slices, elementwise.
pub(crate) fn pairwise_sum<F: Scalar>(parts: &[&[F]], out: &mut [F]) {
    match parts.len() {
        0 => {}
        1 => out.copy_from_slice(parts[0]),
        _ => {
            let mid = parts.len() / 2;
            let mut right = alloc::vec![F::ZERO; out.len()];
            pairwise_sum(&parts[..mid], out);
            pairwise_sum(&parts[mid..], &mut right);
            add_into(out, &right);
        }
    }
}
