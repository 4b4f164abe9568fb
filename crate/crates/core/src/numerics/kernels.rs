//! Raw slice kernels shared by the graph forward and backward passes.

use super::Real;

/// `C[m×n] = A[m×k] · B[k×n]`, row-major.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `acc[m×k] += dC[m×n] · Bᵀ` where `B` is `k×n`.
pub fn matmul_a_bt_acc<T: Real>(dc: &[T], b: &[T], acc: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let d_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: T = d_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            acc[i * k + p] = acc[i * k + p] + dot;
        }
    }
}

/// `acc[k×n] += Aᵀ · dC` where `A` is `m×k` and `dC` is `m×n`.
pub fn matmul_at_b_acc<T: Real>(a: &[T], dc: &[T], acc: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let d_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let acc_row = &mut acc[p * n..(p + 1) * n];
            for (o, &d) in acc_row.iter_mut().zip(d_row) {
                *o = *o + av * d;
            }
        }
    }
}

pub fn transpose<T: Real>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = x[r * n + c];
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn unfold<T: Real>(x: &[T], t_len: usize, c: usize, kernel: usize) -> Vec<T> {
    let pad = kernel / 2;
    let width = kernel * c;
    let mut out = vec![T::zero(); t_len * width];
    for t in 0..t_len {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            out[t * width + j * c..t * width + (j + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
        }
    }
    out
}

pub fn unfold_backward_acc<T: Real>(dy: &[T], acc: &mut [T], t_len: usize, c: usize, kernel: usize) {
    let pad = kernel / 2;
    let width = kernel * c;
    for t in 0..t_len {
        for j in 0..kernel {
            let src = t as isize + j as isize - pad as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            for ch in 0..c {
                acc[src * c + ch] = acc[src * c + ch] + dy[t * width + j * c + ch];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unfold_pads_with_zeros() {
        // 3 steps, 1 channel, kernel 3
        let x = [1.0f64, 2.0, 3.0];
        let u = unfold(&x, 3, 1, 3);
        assert_eq!(u, vec![0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
