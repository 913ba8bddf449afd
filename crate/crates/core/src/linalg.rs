//! Small dense kernels for random-effect vectors of dimension at most
//! [`MAX_RE`]. Matrices are row-major with a fixed stride of `MAX_RE`, so
//! everything lives on the stack inside the quadrature and sampling loops.

pub const MAX_RE: usize = 6;

pub type Vec6 = [f64; MAX_RE];
pub type Mat6 = [f64; MAX_RE * MAX_RE];

#[inline]
pub fn at(i: usize, j: usize) -> usize {
    i * MAX_RE + j
}

/// Lower Cholesky factor of the leading `n x n` block, or `None` when the
/// block is not numerically positive definite.
pub fn cholesky(a: &Mat6, n: usize) -> Option<Mat6> {
    let mut l = [0.0; MAX_RE * MAX_RE];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[at(i, j)];
            for k in 0..j {
                sum -= l[at(i, k)] * l[at(j, k)];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[at(i, i)] = sum.sqrt();
            } else {
                l[at(i, j)] = sum / l[at(j, j)];
            }
        }
    }
    Some(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn forward_sub(l: &Mat6, n: usize, b: &Vec6) -> Vec6 {
    let mut x = [0.0; MAX_RE];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[at(i, k)] * x[k];
        }
        x[i] = s / l[at(i, i)];
    }
    x
}

/// Solve `L' x = b` for lower-triangular `L`.
pub fn back_sub_t(l: &Mat6, n: usize, b: &Vec6) -> Vec6 {
    let mut x = [0.0; MAX_RE];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[at(k, i)] * x[k];
        }
        x[i] = s / l[at(i, i)];
    }
    x
}

/// Inverse of `L L'` given the lower factor.
pub fn chol_inverse(l: &Mat6, n: usize) -> Mat6 {
    let mut inv = [0.0; MAX_RE * MAX_RE];
    for j in 0..n {
        let mut e = [0.0; MAX_RE];
        e[j] = 1.0;
        let y = forward_sub(l, n, &e);
        let x = back_sub_t(l, n, &y);
        for i in 0..n {
            inv[at(i, j)] = x[i];
        }
    }
    inv
}

pub fn log_det_chol(l: &Mat6, n: usize) -> f64 {
    (0..n).map(|i| l[at(i, i)].ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_roundtrip() {
        let mut a = [0.0; 36];
        let vals = [[4.0, 2.0, 0.4], [2.0, 3.0, 0.5], [0.4, 0.5, 2.0]];
        for i in 0..3 {
            for j in 0..3 {
                a[at(i, j)] = vals[i][j];
            }
        }
        let l = cholesky(&a, 3).unwrap();
        let inv = chol_inverse(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let p: f64 = (0..3).map(|k| vals[i][k] * inv[at(k, j)]).sum();
                assert!((p - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
        let mut bad = a;
        bad[at(2, 2)] = -1.0;
        assert!(cholesky(&bad, 3).is_none());
    }
}
