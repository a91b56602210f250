//! Shared oracles for unit tests: finite-difference gradients and dense
//! Hessians. These evaluate objectives through the forward pass only, so
//! they stay independent of the reverse-mode path they are used to check.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function of a flat vector.
pub(crate) fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    for i in 0..point.len() {
        work[i] = point[i] + step;
        let fp = f(&work);
        work[i] = point[i] - step;
        let fm = f(&work);
        work[i] = point[i];
        grads.push((fp - fm) / (2.0 * step));
    }
    grads
}

/// Dense Hessian assembled column-by-column from central differences of a
/// gradient function; symmetrized.
pub(crate) fn dense_hessian(
    grad: impl Fn(&[f64]) -> Vec<f64>,
    point: &[f64],
    step: f64,
) -> Vec<Vec<f64>> {
    let n = point.len();
    let mut h = vec![vec![0.0; n]; n];
    let mut work = point.to_vec();
    for i in 0..n {
        work[i] = point[i] + step;
        let gp = grad(&work);
        work[i] = point[i] - step;
        let gm = grad(&work);
        work[i] = point[i];
        for j in 0..n {
            h[i][j] = (gp[j] - gm[j]) / (2.0 * step);
        }
    }
    // Symmetrize to cancel odd-order noise.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = avg;
            h[j][i] = avg;
        }
    }
    h
}

/// Worst per-coordinate mismatch |a-b| / max(|a|, |b|, floor).
pub(crate) fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Deterministic pseudo-random tensor with entries in (-scale, scale),
/// independent of any RNG crate so oracle inputs never shift.
pub(crate) fn lcg_tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data: Vec<f64> = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((state >> 11) as f64) / ((1u64 << 53) as f64);
            (2.0 * u - 1.0) * scale
        })
        .collect();
    Tensor::new(shape, data).expect("lcg tensor shape")
}
