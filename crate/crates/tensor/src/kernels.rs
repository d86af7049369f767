//! Dense kernels shared by the forward and backward passes.

/// `c = beta·c + a·b` with arbitrary strides (row stride, column stride)
/// for each operand. `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + usize::from(k > 0));
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + usize::from(k > 0));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Temporal offsets of each kernel tap for "same" padding.
pub(crate) fn tap_offsets(kernel: usize, dilation: usize) -> impl Iterator<Item = isize> {
    let half = (kernel / 2) as isize;
    (0..kernel as isize).map(move |k| (k - half) * dilation as isize)
}

/// Unfolds `[batch, time, cin]` into `[batch·time, kernel·cin]`, zero-filled
/// where a tap falls outside the sequence.
pub(crate) fn im2col(x: &[f64], batch: usize, time: usize, cin: usize, kernel: usize, dilation: usize) -> Vec<f64> {
    let width = kernel * cin;
    let mut cols = vec![0.0; batch * time * width];
    for b in 0..batch {
        for (k, off) in tap_offsets(kernel, dilation).enumerate() {
            let (lo, hi) = valid_range(time, off);
            for t in lo..hi {
                let src = ((b * time) as isize + t as isize + off) as usize * cin;
                let dst = (b * time + t) * width + k * cin;
                cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
pub(crate) fn col2im(
    dcols: &[f64],
    dx: &mut [f64],
    batch: usize,
    time: usize,
    cin: usize,
    kernel: usize,
    dilation: usize,
) {
    let width = kernel * cin;
    for b in 0..batch {
        for (k, off) in tap_offsets(kernel, dilation).enumerate() {
            let (lo, hi) = valid_range(time, off);
            for t in lo..hi {
                let dst = ((b * time) as isize + t as isize + off) as usize * cin;
                let src = (b * time + t) * width + k * cin;
                for (d, s) in dx[dst..dst + cin].iter_mut().zip(&dcols[src..src + cin]) {
                    *d += s;
                }
            }
        }
    }
}

/// Output positions `t` for which `t + off` lies inside `0..time`.
fn valid_range(time: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (time as isize - off).clamp(0, time as isize) as usize;
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| f64::from(v) * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), 1.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want = 1.0 + (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum::<f64>();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ·a via strides: 3x2 times 2x3
        let mut g = vec![0.0; 9];
        gemm(3, 2, 3, &a, (1, 3), &a, (3, 1), 0.0, &mut g);
        assert_eq!(g[0], 0.0 * 0.0 + 3.0 * 3.0);
        assert_eq!(g[5], 1.0 * 2.0 + 4.0 * 5.0);
    }

    #[test]
    fn im2col_pads_with_zeros() {
        let x = [1.0, 2.0, 3.0];
        let cols = im2col(&x, 1, 3, 1, 3, 1);
        assert_eq!(cols, vec![0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
        let mut dx = vec![0.0; 3];
        col2im(&[1.0; 9], &mut dx, 1, 3, 1, 3, 1);
        assert_eq!(dx, vec![2.0, 3.0, 2.0]);
    }
}
