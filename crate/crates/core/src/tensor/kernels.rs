//! Slice-level numeric kernels shared by the graph ops and the inference paths.

use super::Real;

/// `C = A·B` for row-major `A (m×k)` and `B (k×n)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `C = A·Bᵀ` for `A (m×k)` and `B (n×k)`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    // a transposed copy of B turns the inner loop into contiguous row
    // updates, which vectorize far better than n short dot products
    matmul(a, &transpose(b, n, k), m, k, n)
}

/// Row-major `rows × cols` to `cols × rows`.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for (j, &v) in a[i * cols..(i + 1) * cols].iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
    out
}

/// `C = Aᵀ·B` for `A (k×m)` and `B (k×n)`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // four accumulators keep the loop vectorizable without changing results
    // between runs
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let close = |x: &[f64]| x.iter().zip(&want).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&matmul(&a, &b, m, k, n)));
        assert!(close(&matmul_nt(&a, &transpose(&b, k, n), m, k, n)));
        assert!(close(&matmul_tn(&transpose(&a, m, k), &b, k, m, n)));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let cd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((cd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
