//! Shared fixtures and independent oracles for the integration suites.

#![allow(dead_code)]

use synflow_core::netgraph::{LayerKind, NetworkSpec};
use synflow_core::tensor::Tensor;

/// Deterministic pseudo-random tensor, independent of any RNG crate.
pub fn lcg_tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor {
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

/// Central-difference gradient of a scalar function over a flat vector.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
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

/// Dense Hessian from central differences of a gradient function.
pub fn dense_hessian(
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
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = avg;
            h[j][i] = avg;
        }
    }
    h
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// The desk-scale VGG-like net: four conv layers with interleaved pooling,
/// two dense layers, 8x8 single-channel inputs, ten classes. The single
/// rectifier sits right after the first conv, where the stream still carries
/// both signs: at extreme compression each layer keeps one weight, and a
/// rectifier placed after a one-weight layer on an already-rectified stream
/// goes permanently dead whenever that weight is negative, which would make
/// the maximally-compressed network untrainable for reasons unrelated to
/// layer-collapse.
pub fn vgg_toy() -> NetworkSpec {
    NetworkSpec::new(
        vec![1, 8, 8],
        vec![
            LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Relu,
            LayerKind::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            LayerKind::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            LayerKind::Flatten,
            LayerKind::Dense { out_dim: 32 },
            LayerKind::Dense { out_dim: 10 },
        ],
    )
    .expect("vgg toy arch")
}

/// Two-layer imbalance net: a thin wide-fan-in layer (1000 parameters,
/// fan-in 100) followed by a huge narrow-fan-in layer (10000 parameters,
/// fan-in 10). Largest layer = layer 2; widest (largest fan-in) = layer 1;
/// smallest = layer 1.
pub fn imbalance_net() -> NetworkSpec {
    NetworkSpec::new(
        vec![100],
        vec![
            LayerKind::Dense { out_dim: 10 },
            LayerKind::Relu,
            LayerKind::Dense { out_dim: 1000 },
        ],
    )
    .expect("imbalance arch")
}
