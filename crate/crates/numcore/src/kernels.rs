//! Fixed-order dense kernels. Every reduction visits indices in the same
//! order on every call, so results are bit-reproducible.

use crate::scalar::Real;

#[inline]
pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let x = &a[c * 8..c * 8 + 8];
        let y = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<S: Real>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// out[m, n] += sum_k a[m, k] * b[k, n]
pub fn gemm_nn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != S::zero() {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// out[m, n] += sum_k a[m, k] * b[n, k]
pub fn gemm_nt<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[m, n] += sum_i a[i, m] * b[i, n]
pub fn gemm_tn<S: Real>(a: &[S], b: &[S], out: &mut [S], rows: usize, m: usize, n: usize) {
    for i in 0..rows {
        let arow = &a[i * m..(i + 1) * m];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != S::zero() {
                axpy(av, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU
#[inline]
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64_lossy(GELU_C);
    let a = S::from_f64_lossy(GELU_A);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + three * a * x * x)
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out_shape`, the flat source index obtained by
/// walking `src_strides` (one stride per output axis, zero for broadcast axes).
pub fn gather_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let rank = out_shape.len();
    if rank == 0 {
        idx.push(0);
        return idx;
    }
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        idx.push(offset);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    idx
}
