//! Raw row-major slice kernels shared by [`Tensor`](crate::Tensor) methods
//! and the gradient tape.

/// Additive mask value for blocked attention positions. Kept finite so that
/// `masked - row_max` never produces `-inf - -inf`.
pub const MASK: f64 = -1e30;

/// Scores at or below this are treated as masked by [`softmax_rows`].
pub const MASK_THRESHOLD: f64 = -1e29;

#[inline]
pub fn is_masked(x: f64) -> bool {
    x <= MASK_THRESHOLD
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Inner product with four interleaved partial sums, which lets the
/// compiler vectorize. Summation order is fixed, so results are
/// reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

pub fn transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Row-wise softmax over the last dimension with row-max stabilization.
/// Masked entries map to exactly zero. Returns the index of the first row
/// whose entries are all masked, if any.
pub fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) -> Result<(), usize> {
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for &v in xr {
            if !is_masked(v) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(r);
        }
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = if is_masked(v) { 0.0 } else { libm::exp(v - max) };
            sum += *o;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
    Ok(())
}

pub fn log_softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(xr.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Shannon entropy (nats) of a probability row; `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * libm::log(v))
        .sum::<f64>()
}

/// Index of the first maximal entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut ab = [0.0; 4];
        matmul_acc(&a, &b, &mut ab, 2, 3, 2);
        assert_eq!(ab, [58.0, 64.0, 139.0, 154.0]);

        let mut bt = [0.0; 6];
        transpose(&b, 3, 2, &mut bt);
        let mut ab2 = [0.0; 4];
        matmul_bt_acc(&a, &bt, &mut ab2, 2, 3, 2);
        assert_eq!(ab, ab2);

        let mut at = [0.0; 6];
        transpose(&a, 2, 3, &mut at);
        let mut ab3 = [0.0; 4];
        matmul_at_acc(&at, &b, &mut ab3, 3, 2, 2);
        assert_eq!(ab, ab3);
    }

    #[test]
    fn fully_masked_row_reports_index() {
        let x = [0.0, 1.0, MASK, MASK];
        let mut out = [0.0; 4];
        assert_eq!(softmax_rows(&x, 2, &mut out), Err(1));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
