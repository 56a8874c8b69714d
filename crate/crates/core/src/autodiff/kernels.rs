//! Slice-level numeric kernels shared by the tape and the gradient-free
//! inference path, so both produce bit-identical values.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `c (+)= a · b` with `a: [n, k]`, `b: [k, m]`, `c: [n, m]`.
pub fn matmul(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked by callers against n, k, m.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), m as isize, 1,
            beta,
            c.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// `c += a · bᵀ` with `a: [n, m]`, `b: [k, m]`, `c: [n, k]`.
pub fn matmul_bt_acc(n: usize, m: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            n, m, k, 1.0,
            a.as_ptr(), m as isize, 1,
            b.as_ptr(), 1, m as isize,
            1.0,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `c += aᵀ · b` with `a: [n, k]`, `b: [n, m]`, `c: [k, m]`.
pub fn matmul_at_acc(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            k, n, m, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), m as isize, 1,
            1.0,
            c.as_mut_ptr(), m as isize, 1,
        );
    }
}

// `f64::tanh` is roughly 3x slower than one `exp`, and GELU dominates the
// cost of small MLPs. Absolute error stays at the 1e-16 level.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + fast_tanh(u))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let th = fast_tanh(u);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise normalisation to zero mean, unit variance (no affine part).
pub fn layer_norm_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (y, v) in yr.iter_mut().zip(xr) {
            *y = (v - mean) * rstd;
        }
    }
}

/// Accumulate the input gradient of [`layer_norm_rows`] given its output `y`.
pub fn layer_norm_rows_backward(x: &[f64], y: &[f64], dy: &[f64], cols: usize, dx: &mut [f64]) {
    let n = cols as f64;
    for r in 0..x.len() / cols {
        let range = r * cols..(r + 1) * cols;
        let xr = &x[range.clone()];
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let yr = &y[range.clone()];
        let dyr = &dy[range.clone()];
        let mean_dy = dyr.iter().sum::<f64>() / n;
        let mean_dy_y = dyr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((d, &g), &yy) in dx[range].iter_mut().zip(dyr).zip(yr) {
            *d += rstd * (g - mean_dy - yy * mean_dy_y);
        }
    }
}

/// Asymmetric squared loss `|mu - 1(x < 0)| x²`.
#[inline]
pub fn expectile(x: f64, mu: f64) -> f64 {
    let w = if x < 0.0 { 1.0 - mu } else { mu };
    w * x * x
}

/// Derivative of [`expectile`]; at `x = 0` both branches give 0.
#[inline]
pub fn expectile_grad(x: f64, mu: f64) -> f64 {
    let w = if x < 0.0 { 1.0 - mu } else { mu };
    2.0 * w * x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (n, k, m) = (3, 4, 2);
        let a: Vec<f64> = (0..n * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; n * m];
        matmul(n, k, m, &a, &b, &mut c, false);
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
                assert!((c[i * m + j] - want).abs() < 1e-12);
            }
        }
        // c·bᵀ should reproduce a·(b·bᵀ)
        let mut cbt = vec![0.0; n * k];
        matmul_bt_acc(n, m, k, &c, &b, &mut cbt);
        for i in 0..n {
            for l in 0..k {
                let want: f64 = (0..m).map(|j| c[i * m + j] * b[l * m + j]).sum();
                assert!((cbt[i * k + l] - want).abs() < 1e-12);
            }
        }
        let mut atc = vec![0.0; k * m];
        matmul_at_acc(n, k, m, &a, &c, &mut atc);
        for l in 0..k {
            for j in 0..m {
                let want: f64 = (0..n).map(|i| a[i * k + l] * c[i * m + j]).sum();
                assert!((atc[l * m + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn fast_tanh_tracks_std() {
        for i in -400..=400 {
            let u = i as f64 * 0.05;
            assert!((fast_tanh(u) - u.tanh()).abs() < 1e-15, "u={u}");
        }
        assert_eq!(fast_tanh(1e4), 1.0);
        assert_eq!(fast_tanh(-1e4), -1.0);
    }

    #[test]
    fn expectile_values() {
        assert_eq!(expectile(2.0, 0.5), 2.0);
        assert!((expectile(1.0, 0.9) - 0.9).abs() < 1e-15);
        assert!((expectile(-1.0, 0.9) - 0.1).abs() < 1e-15);
        assert_eq!(expectile_grad(0.0, 0.9), 0.0);
    }
}
