//! Synthetic Gaussian class-cluster data, the desk-scale stand-in for image
//! datasets.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::StandardNormal;

use crate::autodiff::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance of each class mean from the origin along its anchor coordinate.
const ANCHOR_SEP: f64 = 4.0;
/// Per-class step of the intensity code: every coordinate of a class mean is
/// shifted by (class − (C−1)/2) · INTENSITY_STEP. Each single coordinate
/// therefore carries the same monotone class signal, one that survives
/// max-pooling and either sign of a gating weight, which keeps extremely
/// sparse subnetworks trainable above chance.
const INTENSITY_STEP: f64 = 0.5;
/// Fraction of samples assigned to the training split.
const TRAIN_FRACTION: f64 = 0.75;

/// Labelled inputs with a disjoint train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub dim: usize,
    pub train_inputs: Tensor,
    pub train_labels: Vec<usize>,
    pub test_inputs: Tensor,
    pub test_labels: Vec<usize>,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }

    /// Training rows at the given indices, reshaped to `input_shape` per
    /// sample.
    pub fn train_batch(&self, indices: &[usize], input_shape: &[usize]) -> Result<Batch> {
        self.gather(&self.train_inputs, &self.train_labels, indices, input_shape)
    }

    /// The first `n` training rows (deterministic scoring subset).
    pub fn scoring_batch(&self, n: usize, input_shape: &[usize]) -> Result<Batch> {
        let n = n.min(self.train_len());
        let indices: Vec<usize> = (0..n).collect();
        self.train_batch(&indices, input_shape)
    }

    pub fn test_batch(&self, input_shape: &[usize]) -> Result<Batch> {
        let indices: Vec<usize> = (0..self.test_len()).collect();
        self.gather(&self.test_inputs, &self.test_labels, &indices, input_shape)
    }

    fn gather(
        &self,
        inputs: &Tensor,
        labels: &[usize],
        indices: &[usize],
        input_shape: &[usize],
    ) -> Result<Batch> {
        let per: usize = input_shape.iter().product();
        if per != self.dim {
            return Err(Error::structural(
                None,
                format!("network input shape {input_shape:?} does not hold {} features", self.dim),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut out_labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&inputs.data()[i * per..(i + 1) * per]);
            out_labels.push(labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(input_shape);
        Ok(Batch { inputs: Tensor::new(shape, data)?, labels: out_labels })
    }
}

/// Gaussian clusters with separated means and unit covariance, balanced
/// labels, deterministic per seed. Each class mean is a strong one-hot
/// anchor plus a small dense sign pattern.
pub fn gen_synthetic(classes: usize, dim: usize, samples: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::domain(format!("need at least 2 classes, got {classes}")));
    }
    if samples < classes {
        return Err(Error::domain(format!("{samples} samples cannot cover {classes} classes")));
    }
    if dim == 0 {
        return Err(Error::domain("zero-dimensional inputs"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let mut means = vec![vec![0.0f64; dim]; classes];
    for (c, mean) in means.iter_mut().enumerate() {
        let intensity = (c as f64 - (classes as f64 - 1.0) / 2.0) * INTENSITY_STEP;
        for v in mean.iter_mut() {
            *v = intensity;
        }
        mean[(c * dim) / classes] += ANCHOR_SEP;
    }

    let mut data = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        labels.push(label);
        for d in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            data.push(means[label][d] + z);
        }
    }

    let train_len = ((samples as f64) * TRAIN_FRACTION).ceil() as usize;
    let train_len = train_len.clamp(classes, samples.saturating_sub(1).max(classes));
    let (train_data, test_data) = data.split_at(train_len * dim);
    let (train_labels, test_labels) = labels.split_at(train_len);

    Ok(Dataset {
        classes,
        dim,
        train_inputs: Tensor::new(vec![train_len, dim], train_data.to_vec())?,
        train_labels: train_labels.to_vec(),
        test_inputs: Tensor::new(vec![samples - train_len, dim], test_data.to_vec())?,
        test_labels: test_labels.to_vec(),
    })
}
